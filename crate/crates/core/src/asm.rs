//! Two-pass assembler for the Thumb subset.
//!
//! Pass one sizes every statement and binds labels; pass two evaluates
//! operands and encodes. The result is a flat image plus its manifest.
//! See `docs/asm.md` for the grammar.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::isa::{self, Cond, Instruction, RegList, Register};
use crate::manifest::{AddrRange, FirmwareImage, Manifest, ManifestError, NamedRange, Symbol, VectorTable};
use crate::memory::{MemoryRegion, Perms, Security};

/// Source line with its 1-based line number.
type Numbered = (usize, String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error(transparent)]
    Image(#[from] ManifestError),
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, AsmError> {
    Err(AsmError::Line { line, msg: msg.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Bootstrap,
    Main,
}

#[derive(Debug, Clone)]
enum Item {
    Instr { mnemonic: String, operands: String },
    Words(Vec<String>),
    Space(u32),
    Align(u32),
}

#[derive(Debug, Clone)]
struct Stmt {
    line: usize,
    addr: u32,
    section: Section,
    item: Item,
}

#[derive(Default)]
struct Ranges(Vec<AddrRange>);

impl Ranges {
    fn add(&mut self, base: u32, size: u32) {
        if size == 0 {
            return;
        }
        if let Some(last) = self.0.last_mut() {
            if last.end() == base as u64 {
                last.size += size;
                return;
            }
        }
        self.0.push(AddrRange::new(base, size));
    }
}

struct Assembler {
    stmts: Vec<Stmt>,
    labels: BTreeMap<String, (u32, usize)>,
    equs: BTreeMap<String, u32>,
    regions: Vec<MemoryRegion>,
    reserves: Vec<NamedRange>,
    vectors: Option<VectorTable>,
    entry: Option<(String, usize)>,
    addr: Option<u32>,
    section: Section,
}

fn parse_number(tok: &str) -> Option<u32> {
    let t = tok.trim();
    if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u32::from_str_radix(&h.replace('_', ""), 16).ok()
    } else {
        t.replace('_', "").parse::<u32>().ok()
    }
}

fn split_operands(s: &str) -> Vec<String> {
    // Commas inside braces or brackets do not separate operands.
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '{' | '[' => depth += 1,
            '}' | ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

impl Assembler {
    fn new() -> Assembler {
        Assembler {
            stmts: Vec::new(),
            labels: BTreeMap::new(),
            equs: BTreeMap::new(),
            regions: Vec::new(),
            reserves: Vec::new(),
            vectors: None,
            entry: None,
            addr: None,
            section: Section::None,
        }
    }

    fn here(&self, line: usize) -> Result<u32, AsmError> {
        self.addr.map_or_else(|| err(line, "no .org before the first emitted statement"), Ok)
    }

    fn advance(&mut self, line: usize, bytes: u32) -> Result<(), AsmError> {
        let here = self.here(line)?;
        self.addr = Some(here.checked_add(bytes).ok_or(AsmError::Line { line, msg: "address overflow".into() })?);
        Ok(())
    }

    /// Constant expression usable in pass one: numbers and `.equ` names only.
    fn constant(&self, line: usize, expr: &str) -> Result<u32, AsmError> {
        self.eval_with(line, expr, &|name| self.equs.get(name).copied())
    }

    fn eval(&self, line: usize, expr: &str) -> Result<u32, AsmError> {
        self.eval_with(line, expr, &|name| {
            self.equs.get(name).copied().or_else(|| self.labels.get(name).map(|(a, _)| *a))
        })
    }

    fn eval_with(&self, line: usize, expr: &str, lookup: &dyn Fn(&str) -> Option<u32>) -> Result<u32, AsmError> {
        let expr = expr.trim();
        if expr.is_empty() {
            return err(line, "missing expression");
        }
        let mut total: u32 = 0;
        let mut sign = 1i8;
        let mut rest = expr;
        loop {
            let end = rest[1..].find(['+', '-']).map(|i| i + 1).unwrap_or(rest.len());
            let (term, tail) = rest.split_at(end);
            let term = term.trim();
            let value = match parse_number(term) {
                Some(v) => v,
                None if is_ident(term) => match lookup(term) {
                    Some(v) => v,
                    None => return err(line, format!("undefined symbol `{term}`")),
                },
                None => return err(line, format!("bad expression `{expr}`")),
            };
            total = if sign > 0 { total.wrapping_add(value) } else { total.wrapping_sub(value) };
            if tail.is_empty() {
                return Ok(total);
            }
            sign = if tail.starts_with('+') { 1 } else { -1 };
            rest = tail[1..].trim_start();
            if rest.is_empty() {
                return err(line, format!("bad expression `{expr}`"));
            }
        }
    }

    fn define(&mut self, line: usize, name: &str, value: u32) -> Result<(), AsmError> {
        if !is_ident(name) {
            return err(line, format!("bad label `{name}`"));
        }
        if self.labels.contains_key(name) || self.equs.contains_key(name) {
            return err(line, format!("`{name}` is defined twice"));
        }
        self.labels.insert(name.to_string(), (value, line));
        Ok(())
    }

    fn push(&mut self, line: usize, item: Item, size: u32) -> Result<(), AsmError> {
        let addr = self.here(line)?;
        self.stmts.push(Stmt { line, addr, section: self.section, item });
        self.advance(line, size)
    }

    /// Expands `.rept n` ... `.endr` blocks, keeping original line numbers.
    fn expand(&self, source: &str) -> Result<Vec<Numbered>, AsmError> {
        let mut out = Vec::new();
        // (opening line, count, body)
        let mut block: Option<(usize, u32, Vec<Numbered>)> = None;
        for (i, raw) in source.lines().enumerate() {
            let line = i + 1;
            let code = raw.split([';', '@']).next().unwrap().trim();
            let lower = code.to_ascii_lowercase();
            if let Some(count) = lower.strip_prefix(".rept") {
                if block.is_some() {
                    return err(line, "nested .rept");
                }
                block = Some((line, self.constant(line, count)?, Vec::new()));
            } else if lower == ".endr" {
                let Some((_, count, body)) = block.take() else { return err(line, ".endr without .rept") };
                for _ in 0..count {
                    out.extend(body.iter().cloned());
                }
            } else if let Some((_, _, body)) = block.as_mut() {
                body.push((line, raw.to_string()));
            } else {
                out.push((line, raw.to_string()));
            }
        }
        if let Some((line, ..)) = block {
            return err(line, ".rept without .endr");
        }
        Ok(out)
    }

    fn pass_one(&mut self, source: &str) -> Result<(), AsmError> {
        for (line, raw) in self.expand(source)? {
            let raw = raw.as_str();
            let mut text = raw;
            if let Some(p) = text.find([';', '@']) {
                text = &text[..p];
            }
            let mut text = text.trim();
            // Any number of leading labels.
            while let Some(colon) = text.find(':') {
                let name = text[..colon].trim();
                if !is_ident(name) {
                    break;
                }
                let here = self.here(line)?;
                self.define(line, name, here)?;
                text = text[colon + 1..].trim();
            }
            if text.is_empty() {
                continue;
            }
            let (head, rest) = match text.find(char::is_whitespace) {
                Some(p) => (&text[..p], text[p..].trim()),
                None => (text, ""),
            };
            let head = head.to_ascii_lowercase();
            let args: Vec<&str> = rest.split_whitespace().collect();
            match head.as_str() {
                ".org" => self.addr = Some(self.constant(line, rest)?),
                ".equ" => {
                    let (name, value) = rest
                        .split_once([' ', ','])
                        .ok_or(AsmError::Line { line, msg: ".equ needs a name and a value".into() })?;
                    let name = name.trim();
                    let value = self.constant(line, value)?;
                    if !is_ident(name) || self.labels.contains_key(name) || self.equs.contains_key(name) {
                        return err(line, format!("bad or duplicate .equ name `{name}`"));
                    }
                    self.equs.insert(name.to_string(), value);
                }
                ".region" => {
                    if args.len() != 5 {
                        return err(line, ".region needs: name base size perms security");
                    }
                    let perms = Perms::parse(args[3]).ok_or(AsmError::Line { line, msg: "bad permissions".into() })?;
                    let security =
                        Security::parse(args[4]).ok_or(AsmError::Line { line, msg: "bad security".into() })?;
                    self.regions.push(MemoryRegion {
                        name: args[0].to_string(),
                        base: self.constant(line, args[1])?,
                        size: self.constant(line, args[2])?,
                        perms,
                        security,
                    });
                }
                ".reserve" => match args.len() {
                    2 => {
                        let size = self.constant(line, args[1])?;
                        let base = self.here(line)?;
                        self.reserves.push(NamedRange { name: args[0].into(), range: AddrRange::new(base, size) });
                        self.push(line, Item::Space(size), size)?;
                    }
                    3 => {
                        let range = AddrRange::new(self.constant(line, args[1])?, self.constant(line, args[2])?);
                        self.reserves.push(NamedRange { name: args[0].into(), range });
                    }
                    _ => return err(line, ".reserve needs: name size, or name base size"),
                },
                ".section" => {
                    self.section = match rest {
                        "main" => Section::Main,
                        "bootstrap" => Section::Bootstrap,
                        "none" => Section::None,
                        _ => return err(line, "section must be main, bootstrap or none"),
                    }
                }
                ".entry" => self.entry = Some((rest.to_string(), line)),
                ".vectors" => {
                    let count = self.constant(line, rest)?;
                    self.vectors = Some(VectorTable { base: self.here(line)?, count });
                }
                ".word" => {
                    if self.here(line)? % 4 != 0 {
                        return err(line, ".word is not word aligned");
                    }
                    let words = split_operands(rest);
                    if words.is_empty() {
                        return err(line, ".word needs at least one value");
                    }
                    let n = words.len() as u32;
                    self.push(line, Item::Words(words), 4 * n)?;
                }
                ".space" => {
                    let n = self.constant(line, rest)?;
                    self.push(line, Item::Space(n), n)?;
                }
                ".align" => {
                    let n = self.constant(line, rest)?;
                    if !n.is_power_of_two() || n < 2 {
                        return err(line, ".align needs a power of two of at least 2");
                    }
                    let here = self.here(line)?;
                    let pad = here.next_multiple_of(n) - here;
                    self.push(line, Item::Align(n), pad)?;
                }
                m if m.starts_with('.') => return err(line, format!("unknown directive `{m}`")),
                m => {
                    let size = if m == "bl" { 4 } else { 2 };
                    if self.here(line)? % 2 != 0 {
                        return err(line, "instruction is not halfword aligned");
                    }
                    self.push(line, Item::Instr { mnemonic: m.to_string(), operands: rest.to_string() }, size)?;
                }
            }
        }
        Ok(())
    }

    fn reg(&self, line: usize, s: &str) -> Result<Register, AsmError> {
        Register::parse(s.trim()).map_or_else(|| err(line, format!("bad register `{s}`")), Ok)
    }

    fn imm(&self, line: usize, s: &str) -> Result<u32, AsmError> {
        let s = s.trim();
        match s.strip_prefix('#') {
            Some(e) => self.eval(line, e),
            None => err(line, format!("expected #immediate, found `{s}`")),
        }
    }

    fn imm_u8(&self, line: usize, s: &str) -> Result<u8, AsmError> {
        let v = self.imm(line, s)?;
        u8::try_from(v).or_else(|_| err(line, format!("immediate {v} out of range 0-255")))
    }

    fn reglist(&self, line: usize, s: &str) -> Result<(RegList, Option<Register>), AsmError> {
        let inner = s
            .trim()
            .strip_prefix('{')
            .and_then(|t| t.strip_suffix('}'))
            .ok_or(AsmError::Line { line, msg: format!("expected register list, found `{s}`") })?;
        let mut bits = 0u8;
        let mut special = None;
        for part in inner.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (lo, hi) = match part.split_once('-') {
                Some((a, b)) => (self.reg(line, a)?, self.reg(line, b)?),
                None => {
                    let r = self.reg(line, part)?;
                    (r, r)
                }
            };
            if lo == hi && (lo == Register::LR || lo == Register::PC) {
                if special.is_some() {
                    return err(line, "register list names lr or pc twice");
                }
                special = Some(lo);
                continue;
            }
            if !lo.is_low() || !hi.is_low() || lo.index() > hi.index() {
                return err(line, format!("register list may only hold r0-r7 plus lr or pc: `{part}`"));
            }
            for i in lo.index()..=hi.index() {
                bits |= 1 << i;
            }
        }
        Ok((RegList(bits), special))
    }

    fn branch_offset(&self, line: usize, stmt_addr: u32, target: &str) -> Result<i32, AsmError> {
        let t = self.eval(line, target)?;
        Ok(t.wrapping_sub(stmt_addr.wrapping_add(4)) as i32)
    }

    fn instruction(&self, s: &Stmt, mnemonic: &str, operands: &str) -> Result<Instruction, AsmError> {
        let line = s.line;
        let ops = split_operands(operands);
        let want = |n: usize| -> Result<(), AsmError> {
            if ops.len() == n {
                Ok(())
            } else {
                err(line, format!("`{mnemonic}` takes {n} operand(s), found {}", ops.len()))
            }
        };
        use Instruction::*;
        let i = match mnemonic {
            "movs" => {
                want(2)?;
                MovImm { rd: self.reg(line, &ops[0])?, imm: self.imm_u8(line, &ops[1])? }
            }
            "mov" => {
                want(2)?;
                MovReg { rd: self.reg(line, &ops[0])?, rm: self.reg(line, &ops[1])? }
            }
            "cmp" => {
                want(2)?;
                CmpImm { rn: self.reg(line, &ops[0])?, imm: self.imm_u8(line, &ops[1])? }
            }
            "adds" | "subs" if ops.len() == 2 => {
                let rdn = self.reg(line, &ops[0])?;
                let imm = self.imm_u8(line, &ops[1])?;
                if mnemonic == "adds" {
                    AddImm { rdn, imm }
                } else {
                    SubImm { rdn, imm }
                }
            }
            "adds" => {
                want(3)?;
                AddReg { rd: self.reg(line, &ops[0])?, rn: self.reg(line, &ops[1])?, rm: self.reg(line, &ops[2])? }
            }
            "ldr" | "str" => {
                want(2)?;
                let rt = self.reg(line, &ops[0])?;
                let mem = ops[1].trim();
                if let Some(inner) = mem.strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
                    let parts = split_operands(inner);
                    let rn = self.reg(line, &parts[0])?;
                    let offset = match parts.len() {
                        1 => 0,
                        2 => self.imm(line, &parts[1])?,
                        _ => return err(line, "bad memory operand"),
                    };
                    let offset =
                        u8::try_from(offset).or_else(|_| err(line, format!("offset {offset} out of range")))?;
                    if mnemonic == "ldr" {
                        LdrImm { rt, rn, offset }
                    } else {
                        StrImm { rt, rn, offset }
                    }
                } else if mnemonic == "ldr" {
                    let target = self.eval(line, mem)?;
                    let base = (s.addr + 4) & !3;
                    let offset = target.wrapping_sub(base);
                    let offset = u16::try_from(offset).or_else(|_| {
                        err(line, format!("literal {target:#x} is behind or too far from {:#x}", s.addr))
                    })?;
                    LdrLit { rt, offset }
                } else {
                    return err(line, "str needs a [rn, #imm] operand");
                }
            }
            "push" | "pop" => {
                want(1)?;
                let (regs, special) = self.reglist(line, &ops[0])?;
                if mnemonic == "push" {
                    if special == Some(Register::PC) {
                        return err(line, "push cannot include pc");
                    }
                    Push { regs, lr: special.is_some() }
                } else {
                    if special == Some(Register::LR) {
                        return err(line, "pop cannot include lr");
                    }
                    Pop { regs, pc: special.is_some() }
                }
            }
            "b" => {
                want(1)?;
                B { offset: self.branch_offset(line, s.addr, &ops[0])? }
            }
            "bl" => {
                want(1)?;
                BlImm { offset: self.branch_offset(line, s.addr, &ops[0])? }
            }
            "blx" => {
                want(1)?;
                BlxReg { rm: self.reg(line, &ops[0])? }
            }
            "bx" => {
                want(1)?;
                BxReg { rm: self.reg(line, &ops[0])? }
            }
            "bxns" => {
                want(1)?;
                Bxns { rm: self.reg(line, &ops[0])? }
            }
            "svc" => {
                want(1)?;
                Svc { comment: self.imm_u8(line, &ops[0])? }
            }
            "sg" => {
                want(0)?;
                Sg
            }
            "nop" => {
                want(0)?;
                Nop
            }
            "halt" => {
                want(0)?;
                Halt
            }
            m => match m.strip_prefix('b').and_then(Cond::parse) {
                Some(cond) => {
                    want(1)?;
                    BCond { cond, offset: self.branch_offset(line, s.addr, &ops[0])? }
                }
                None => return err(line, format!("unknown mnemonic `{m}`")),
            },
        };
        Ok(i)
    }

    fn pass_two(&self) -> Result<FirmwareImage, AsmError> {
        let mut bytes_at: BTreeMap<u32, Vec<u8>> = BTreeMap::new();
        let (mut main, mut bootstrap, mut pools) = (Ranges::default(), Ranges::default(), Ranges::default());
        for s in &self.stmts {
            let (data, pool) = match &s.item {
                Item::Instr { mnemonic, operands } => {
                    let instr = self.instruction(s, mnemonic, operands)?;
                    let bytes = isa::encode(&instr).or_else(|e| err(s.line, e.to_string()))?;
                    (bytes, false)
                }
                Item::Words(words) => {
                    let mut out = Vec::new();
                    for w in words {
                        out.extend(self.eval(s.line, w)?.to_le_bytes());
                    }
                    (out, true)
                }
                Item::Space(n) => (vec![0; *n as usize], false),
                Item::Align(n) => {
                    let pad = (s.addr.next_multiple_of(*n) - s.addr) as usize;
                    let filler = if s.section == Section::None { [0, 0] } else { isa::NOP_HALFWORD.to_le_bytes() };
                    if !pad.is_multiple_of(2) {
                        return err(s.line, ".align from an odd address");
                    }
                    (filler.repeat(pad / 2), false)
                }
            };
            let size = data.len() as u32;
            match s.section {
                Section::Main => main.add(s.addr, size),
                Section::Bootstrap => bootstrap.add(s.addr, size),
                Section::None => {}
            }
            if pool && s.section != Section::None {
                pools.add(s.addr, size);
            }
            if size > 0 {
                bytes_at.insert(s.addr, data);
            }
        }

        // The image spans everything emitted, including in-place reserves.
        let mut spans: Vec<(u32, u64)> = bytes_at.iter().map(|(a, b)| (*a, *a as u64 + b.len() as u64)).collect();
        spans.sort();
        let load = spans.first().map(|s| s.0).unwrap_or(0);
        let end = spans.iter().map(|s| s.1).max().unwrap_or(load as u64);
        let mut image = vec![0u8; (end - load as u64) as usize];
        let mut covered = load as u64;
        for (addr, data) in &bytes_at {
            if (*addr as u64) < covered {
                let line = self.stmts.iter().find(|s| s.addr == *addr).map(|s| s.line).unwrap_or(0);
                return err(line, format!("output at {addr:#x} overlaps earlier output"));
            }
            let off = (addr - load) as usize;
            image[off..off + data.len()].copy_from_slice(data);
            covered = *addr as u64 + data.len() as u64;
        }

        let executable = |a: u32| self.regions.iter().any(|r| r.contains(a, 2) && r.perms.execute);
        let symbols = self
            .labels
            .iter()
            .filter(|(name, (addr, _))| !name.starts_with('.') && executable(*addr))
            .map(|(name, (addr, _))| Symbol { name: name.clone(), addr: *addr })
            .collect();
        let entry = match &self.entry {
            Some((e, line)) => Some(self.eval(*line, e)?),
            None => None,
        };
        let manifest = Manifest {
            load: Some(load),
            regions: self.regions.clone(),
            entry,
            symbols,
            vectors: self.vectors,
            bootstrap: bootstrap.0,
            main: main.0,
            pools: pools.0,
            reserves: self.reserves.clone(),
            tables: Vec::new(),
            instrumented: false,
        };
        Ok(FirmwareImage::new(image, manifest)?)
    }
}

/// Assembles a complete source file into an image and its manifest.
pub fn assemble(source: &str) -> Result<FirmwareImage, AsmError> {
    let mut a = Assembler::new();
    a.pass_one(source)?;
    a.pass_two()
}
