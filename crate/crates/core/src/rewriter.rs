//! Layout-preserving instrumentation.
//!
//! Every call, indirect branch and effective return in the main program is
//! overwritten in place with an `svc` dispatch instruction (a 32-bit `bl`
//! becomes `svc` followed by `0xB000` padding). Return trampolines, exception
//! trampolines and the lookup tables go into reserves declared in the
//! manifest; no existing instruction moves.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::isa::{self, classify, decode, Instruction, Register};
use crate::machine::EXC_SVC;
use crate::manifest::{reserved, tables, AddrRange, FirmwareImage, Manifest, ManifestError, NamedRange};
use crate::tables::{BranchRecord, BranchTable, CallTargetTable, Descriptor, DispatchClass, DispatchTable, TableError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("image is already instrumented")]
    AlreadyInstrumented,
    #[error("svc at {0:#010x} in the main program: svc is reserved for the monitor")]
    SvcInMain(u32),
    #[error("undefined instruction {halfword:#06x} at {addr:#010x} outside any literal pool")]
    Undefined { addr: u32, halfword: u16 },
    #[error("instruction at {0:#010x} runs past the end of its range")]
    Truncated(u32),
    #[error("main range {0:#x} is not inside the image")]
    RangeOutsideImage(u32),
    #[error("call at {site:#010x} targets {target:#010x}, outside the main program")]
    CallLeavesMain { site: u32, target: u32 },
    #[error("{instr} at {addr:#010x} cannot be mediated")]
    Unsupported { addr: u32, instr: String },
    #[error("{0} dispatch classes exceed the 255 available svc comments")]
    Capacity(usize),
    #[error("layout: {0}")]
    Layout(String),
    #[error("vector {exc} = {entry:#010x} is not a Thumb address in executable memory")]
    BadVector { exc: u32, entry: u32 },
}

/// One overwritten instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewrittenSite {
    pub addr: u32,
    pub original: Instruction,
    pub comment: u8,
    pub class: DispatchClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trampoline {
    pub addr: u32,
    pub class: DispatchClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExceptionTrampoline {
    pub exc: u32,
    pub addr: u32,
    pub handler: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RewriteReport {
    pub sites: Vec<RewrittenSite>,
    /// Instructions decoded in main ranges, pools excluded.
    pub decoded_instructions: usize,
    pub return_trampolines: Vec<Trampoline>,
    pub exception_trampolines: Vec<ExceptionTrampoline>,
    pub branch_table_bytes: usize,
    pub call_target_bytes: usize,
    pub dispatch_bytes: usize,
}

impl RewriteReport {
    /// Rewritten sites over decoded main-program instructions.
    pub fn ratio(&self) -> f64 {
        if self.decoded_instructions == 0 {
            0.0
        } else {
            self.sites.len() as f64 / self.decoded_instructions as f64
        }
    }

    pub fn direct_call_sites(&self) -> usize {
        self.sites.iter().filter(|s| s.class == DispatchClass::DirectCall).count()
    }
}

impl fmt::Display for RewriteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "decoded-instructions {}", self.decoded_instructions)?;
        writeln!(f, "rewritten-sites {}", self.sites.len())?;
        writeln!(f, "direct-call-sites {}", self.direct_call_sites())?;
        writeln!(f, "ratio {:.6}", self.ratio())?;
        writeln!(f, "table-bytes branch {}", self.branch_table_bytes)?;
        writeln!(f, "table-bytes call_targets {}", self.call_target_bytes)?;
        writeln!(f, "table-bytes dispatch {}", self.dispatch_bytes)?;
        for s in &self.sites {
            writeln!(f, "site {:x} svc#{} {} ({})", s.addr, s.comment, s.class, s.original.disasm_at(s.addr))?;
        }
        for t in &self.return_trampolines {
            writeln!(f, "trampoline {:x} {}", t.addr, t.class)?;
        }
        for t in &self.exception_trampolines {
            writeln!(f, "exception-trampoline {} {:x} -> {:x}", t.exc, t.addr, t.handler)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instrumented {
    /// Rewritten image; its manifest is the sidecar.
    pub image: FirmwareImage,
    pub branch_table: BranchTable,
    pub call_targets: CallTargetTable,
    pub dispatch: DispatchTable,
    pub report: RewriteReport,
}

/// Linear sweep over the main ranges, stepping over literal pools.
pub fn scan_main(image: &FirmwareImage) -> Result<Vec<(u32, Instruction)>, RewriteError> {
    let m = &image.manifest;
    let mut ranges = m.main.clone();
    ranges.sort();
    let mut out = Vec::new();
    for range in ranges {
        let bytes = image.slice(range).ok_or(RewriteError::RangeOutsideImage(range.base))?;
        let mut addr = range.base;
        while (addr as u64) < range.end() {
            if let Some(pool) = m.pools.iter().find(|p| p.contains(addr)) {
                addr = pool.end() as u32;
                continue;
            }
            let offset = (addr - range.base) as usize;
            let (instr, width) = decode(bytes, offset).map_err(|_| RewriteError::Truncated(addr))?;
            if (addr as u64 + width as u64) > range.end() || (width == 4 && m.in_pool(addr + 2)) {
                return Err(RewriteError::Truncated(addr));
            }
            out.push((addr, instr));
            addr += width;
        }
    }
    Ok(out)
}

/// Entry addresses of main-program subroutines.
pub fn build_call_target_table(manifest: &Manifest) -> Result<CallTargetTable, RewriteError> {
    manifest.validate()?;
    let entries = manifest.symbols.iter().filter(|s| manifest.in_main(s.addr)).map(|s| s.addr).collect();
    Ok(CallTargetTable::new(entries))
}

fn dispatch_class(addr: u32, instr: &Instruction) -> Result<Option<DispatchClass>, RewriteError> {
    let unsupported = || RewriteError::Unsupported { addr, instr: instr.disasm_at(addr) };
    Ok(match *instr {
        Instruction::BlImm { .. } => Some(DispatchClass::DirectCall),
        Instruction::BlxReg { rm } | Instruction::BxReg { rm } if rm == Register::PC || rm == Register::SP => {
            return Err(unsupported())
        }
        Instruction::BlxReg { rm } => Some(DispatchClass::IndirectCall { reg: rm, link: true }),
        Instruction::BxReg { rm } if rm == Register::LR => Some(DispatchClass::ReturnBxLr),
        Instruction::BxReg { rm } => Some(DispatchClass::IndirectCall { reg: rm, link: false }),
        Instruction::Pop { regs, pc: true } => Some(DispatchClass::ReturnPop { regs }),
        _ => {
            debug_assert!(!classify(instr).is_mediated());
            None
        }
    })
}

/// Sequential allocator: each distinct class gets the next comment on first use.
#[derive(Default)]
struct Comments {
    by_class: BTreeMap<DispatchClass, u8>,
    order: Vec<DispatchClass>,
}

impl Comments {
    fn get(&mut self, class: DispatchClass) -> Result<u8, RewriteError> {
        if let Some(c) = self.by_class.get(&class) {
            return Ok(*c);
        }
        if self.order.len() >= DispatchTable::CAPACITY {
            return Err(RewriteError::Capacity(self.order.len() + 1));
        }
        self.order.push(class);
        let c = self.order.len() as u8;
        self.by_class.insert(class, c);
        Ok(c)
    }
}

fn reserve(manifest: &Manifest, name: &str) -> Result<AddrRange, RewriteError> {
    manifest.reserve(name).ok_or_else(|| RewriteError::Layout(format!("no `{name}` reserve")))
}

/// Bump allocator over a reserve that must be backed by image bytes.
struct Placer {
    name: &'static str,
    range: AddrRange,
    cursor: u32,
}

impl Placer {
    fn new(image: &FirmwareImage, name: &'static str) -> Result<Placer, RewriteError> {
        let range = reserve(&image.manifest, name)?;
        if !image.range().contains_range(&range) {
            return Err(RewriteError::Layout(format!("`{name}` reserve is not inside the image")));
        }
        Ok(Placer { name, range, cursor: range.base })
    }

    fn place(&mut self, image: &mut FirmwareImage, bytes: &[u8], align: u32) -> Result<u32, RewriteError> {
        let addr = self.cursor.next_multiple_of(align);
        if addr as u64 + bytes.len() as u64 > self.range.end() {
            return Err(RewriteError::Layout(format!(
                "`{}` reserve ({:#x} bytes) is too small",
                self.name, self.range.size
            )));
        }
        image.write_bytes(addr, bytes).expect("reserve inside image");
        self.cursor = addr + bytes.len() as u32;
        Ok(addr)
    }
}

fn executable(manifest: &Manifest, addr: u32) -> bool {
    manifest.regions.iter().any(|r| r.contains(addr, 2) && r.perms.execute)
}

/// Vector entries that get an exception trampoline: everything except the
/// initial sp, reset, the svc entry hosting the monitor and unused (zero) slots.
fn vectors_to_rewrite(image: &FirmwareImage) -> Result<Vec<(u32, u32)>, RewriteError> {
    let mut out = Vec::new();
    for (exc, entry) in image.vector_entries() {
        if exc < 2 || exc == EXC_SVC || entry == 0 {
            continue;
        }
        if entry & 1 == 0 || !executable(&image.manifest, entry & !1) {
            return Err(RewriteError::BadVector { exc, entry });
        }
        out.push((exc, entry & !1));
    }
    Ok(out)
}

fn encode(instr: Instruction) -> Vec<u8> {
    isa::encode(&instr).expect("rewriter emits encodable instructions")
}

pub fn instrument_image(image: &FirmwareImage) -> Result<Instrumented, RewriteError> {
    image.validate()?;
    if image.manifest.instrumented {
        return Err(RewriteError::AlreadyInstrumented);
    }
    let decoded = scan_main(image)?;
    let mut comments = Comments::default();
    let mut sites = Vec::new();
    let mut branches = Vec::new();
    for &(addr, instr) in &decoded {
        match instr {
            Instruction::Svc { .. } => return Err(RewriteError::SvcInMain(addr)),
            Instruction::Undefined { halfword } => return Err(RewriteError::Undefined { addr, halfword }),
            _ => {}
        }
        let Some(class) = dispatch_class(addr, &instr)? else { continue };
        if class == DispatchClass::DirectCall {
            let target = instr.branch_target(addr).unwrap();
            if !image.manifest.in_main(target) {
                return Err(RewriteError::CallLeavesMain { site: addr, target });
            }
            branches.push(BranchRecord { site: addr, destination: target });
        }
        let comment = comments.get(class)?;
        sites.push(RewrittenSite { addr, original: instr, comment, class });
    }

    let vectors = vectors_to_rewrite(image)?;
    let exc_comment = if vectors.is_empty() { None } else { Some(comments.get(DispatchClass::ExceptionEntry)?) };

    let mut out = image.clone();
    for site in &sites {
        let mut bytes = encode(Instruction::Svc { comment: site.comment });
        if site.original.width() == 4 {
            bytes.extend(encode(Instruction::Nop));
        }
        out.write_bytes(site.addr, &bytes).expect("site inside image");
    }

    // Return trampolines, then exception trampolines.
    let mut dispatch = DispatchTable::default();
    let mut report = RewriteReport { decoded_instructions: decoded.len(), ..Default::default() };
    let needs_trampolines = exc_comment.is_some() || comments.order.iter().any(|c| c.is_return());
    let mut placer = if needs_trampolines { Some(Placer::new(image, reserved::TRAMPOLINES)?) } else { None };
    for (i, class) in comments.order.iter().enumerate() {
        let comment = i as u8 + 1;
        let instr = match *class {
            DispatchClass::ReturnBxLr => Some(Instruction::BxReg { rm: Register::LR }),
            DispatchClass::ReturnPop { regs } => Some(Instruction::Pop { regs, pc: true }),
            _ => None,
        };
        let trampoline = match instr {
            Some(instr) => {
                let addr = placer.as_mut().unwrap().place(&mut out, &encode(instr), 2)?;
                report.return_trampolines.push(Trampoline { addr, class: *class });
                addr
            }
            None => 0,
        };
        dispatch.insert(comment, Descriptor { class: *class, trampoline })?;
    }
    if let Some(comment) = exc_comment {
        let placer = placer.as_mut().unwrap();
        for (exc, handler) in vectors {
            let addr = placer.cursor.next_multiple_of(2);
            let branch = Instruction::B { offset: handler as i32 - (addr as i32 + 2 + 4) };
            let b = isa::encode(&branch).map_err(|_| {
                RewriteError::Layout(format!("handler {handler:#010x} of exception {exc} is out of branch range"))
            })?;
            let mut code = encode(Instruction::Svc { comment });
            code.extend(b);
            placer.place(&mut out, &code, 2)?;
            let vbase = image.manifest.vectors.unwrap().base;
            out.write_u32(vbase + 4 * exc, addr | 1).unwrap();
            report.exception_trampolines.push(ExceptionTrampoline { exc, addr, handler });
        }
    }

    let branch_table = BranchTable::new(branches)?;
    let has_indirect = comments.order.iter().any(|c| matches!(c, DispatchClass::IndirectCall { .. }));
    let call_targets =
        if has_indirect { build_call_target_table(&image.manifest)? } else { CallTargetTable::default() };

    let blobs = [
        (tables::BRANCH, branch_table.to_bytes()),
        (tables::CALL_TARGETS, call_targets.to_bytes()),
        (tables::DISPATCH, dispatch.to_bytes()),
    ];
    let mut sidecar = image.manifest.clone();
    if blobs.iter().any(|(_, b)| !b.is_empty()) {
        let mut placer = Placer::new(image, reserved::TABLES)?;
        if executable(&image.manifest, placer.range.base)
            || image.manifest.regions.iter().any(|r| r.contains(placer.range.base, 1) && r.perms.write)
        {
            return Err(RewriteError::Layout("`tables` reserve must be in read-only data memory".into()));
        }
        for (name, bytes) in &blobs {
            let base = placer.place(&mut out, bytes, 4)?;
            sidecar.tables.push(NamedRange { name: name.to_string(), range: AddrRange::new(base, bytes.len() as u32) });
        }
    }
    sidecar.instrumented = true;
    out.manifest = sidecar;

    report.branch_table_bytes = branch_table.byte_len();
    report.call_target_bytes = call_targets.len() * 4;
    report.dispatch_bytes = dispatch.len() * DispatchTable::RECORD_BYTES;
    report.sites = sites;
    Ok(Instrumented { image: out, branch_table, call_targets, dispatch, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::RegList;

    const MANIFEST: &str = "\
load 8000
region flash 8000 1000 rx ns
region rodata 9000 100 r ns
region sram 20000000 1000 rw ns
vectors 8000 20
bootstrap 8060 20
main 8100 200
reserve trampolines 8080 40
reserve tables 9000 100
";

    fn image(code: &[(u32, Instruction)], vectors: &[(u32, u32)], syms: &str) -> FirmwareImage {
        let manifest: Manifest = format!("{MANIFEST}{syms}").parse().unwrap();
        let mut img = FirmwareImage::new(vec![0; 0x1100], manifest).unwrap();
        for a in (0x8100..0x8300).step_by(2) {
            img.write_bytes(a, &encode(Instruction::Nop)).unwrap();
        }
        for (addr, i) in code {
            img.write_bytes(*addr, &encode(*i)).unwrap();
        }
        img.write_u32(0x8000, 0x2000_1000).unwrap();
        img.write_u32(0x8004, 0x8061).unwrap();
        for (exc, v) in vectors {
            img.write_u32(0x8000 + 4 * exc, *v).unwrap();
        }
        img
    }

    fn bl(from: u32, to: u32) -> Instruction {
        Instruction::BlImm { offset: to as i32 - (from as i32 + 4) }
    }

    #[test]
    fn direct_call_site_becomes_svc_and_padding() {
        let img = image(&[(0x8100, bl(0x8100, 0x8200)), (0x8200, Instruction::BxReg { rm: Register::LR })], &[], "");
        let out = instrument_image(&img).unwrap();
        assert_eq!(out.image.read_u16(0x8100), Some(0xDF01));
        assert_eq!(out.image.read_u16(0x8102), Some(0xB000));
        assert_eq!(out.image.read_u16(0x8200), Some(0xDF02));
        assert_eq!(out.branch_table.lookup(0x8100).destination, Some(0x8200));
        assert_eq!(out.report.return_trampolines, vec![Trampoline { addr: 0x8080, class: DispatchClass::ReturnBxLr }]);
        assert_eq!(out.image.read_u16(0x8080), Some(0x4770));
        assert_eq!(out.image.bytes.len(), img.bytes.len());
        assert!(out.image.manifest.instrumented);
        let btbl = out.image.manifest.table(tables::BRANCH).unwrap();
        assert_eq!(btbl, AddrRange::new(0x9000, 8));
        assert_eq!(BranchTable::from_bytes(out.image.slice(btbl).unwrap()).unwrap(), out.branch_table);
    }

    #[test]
    fn zero_branches_leave_the_image_untouched() {
        let img = image(&[(0x8100, Instruction::MovImm { rd: Register::R0, imm: 1 })], &[], "sym main 8100\n");
        let out = instrument_image(&img).unwrap();
        assert_eq!(out.image.bytes, img.bytes);
        assert!(out.branch_table.is_empty() && out.call_targets.is_empty() && out.dispatch.is_empty());
    }

    #[test]
    fn pop_forms_share_trampolines_and_comments() {
        let pop = |bits| Instruction::Pop { regs: RegList(bits), pc: true };
        let img = image(&[(0x8100, pop(0x10)), (0x8102, pop(0x30)), (0x8104, pop(0x10))], &[], "");
        let out = instrument_image(&img).unwrap();
        let comments: Vec<u8> = out.report.sites.iter().map(|s| s.comment).collect();
        assert_eq!(comments, vec![1, 2, 1]);
        assert_eq!(out.report.return_trampolines.len(), 2);
        assert_eq!(out.image.read_u16(0x8080), Some(0xBD10));
        assert_eq!(out.image.read_u16(0x8082), Some(0xBD30));
    }

    #[test]
    fn vector_entries_get_exception_trampolines() {
        let img = image(&[(0x8150, Instruction::BxReg { rm: Register::LR })], &[(11, 0x80F1), (16, 0x8151)], "");
        let out = instrument_image(&img).unwrap();
        // svc vector and reset stay.
        assert_eq!(out.image.read_u32(0x8000 + 44), Some(0x80F1));
        assert_eq!(out.image.read_u32(0x8004), Some(0x8061));
        let t = out.report.exception_trampolines[0];
        assert_eq!(out.image.read_u32(0x8040), Some(t.addr | 1));
        let exc = out.dispatch.comment_for(&DispatchClass::ExceptionEntry).unwrap();
        assert_eq!(exc, 2);
        assert_eq!(out.image.read_u16(t.addr), Some(0xDF00 | exc as u16));
        let (b, _) = decode(out.image.slice(AddrRange::new(t.addr + 2, 2)).unwrap(), 0).unwrap();
        assert_eq!(b.branch_target(t.addr + 2), Some(0x8150));
    }

    #[test]
    fn rejections() {
        let svc = image(&[(0x8100, Instruction::Svc { comment: 3 })], &[], "");
        assert_eq!(instrument_image(&svc).unwrap_err(), RewriteError::SvcInMain(0x8100));

        let img = image(&[(0x8100, Instruction::BxReg { rm: Register::LR })], &[], "");
        let once = instrument_image(&img).unwrap();
        assert_eq!(instrument_image(&once.image).unwrap_err(), RewriteError::AlreadyInstrumented);

        let undefined = image(&[(0x8100, Instruction::Undefined { halfword: 0xFFFF })], &[], "");
        assert!(matches!(instrument_image(&undefined), Err(RewriteError::Undefined { .. })));

        let mut pooled = undefined.clone();
        pooled.manifest.pools.push(AddrRange::new(0x8100, 4));
        assert!(instrument_image(&pooled).is_ok());

        let to_boot = image(&[(0x8100, bl(0x8100, 0x8060))], &[], "");
        assert!(matches!(instrument_image(&to_boot), Err(RewriteError::CallLeavesMain { .. })));

        let mut no_reserve = img.clone();
        no_reserve.manifest.reserves.retain(|r| r.name != reserved::TRAMPOLINES);
        assert!(matches!(instrument_image(&no_reserve), Err(RewriteError::Layout(_))));
    }

    #[test]
    fn call_target_table_keeps_main_symbols_only() {
        let img = image(
            &[(0x8100, Instruction::BlxReg { rm: Register::R3 })],
            &[],
            "sym boot 8060\nsym f 8200\nsym main 8100\nsym g 8180\n",
        );
        assert_eq!(build_call_target_table(&img.manifest).unwrap().entries(), &[0x8100, 0x8180, 0x8200]);
        let out = instrument_image(&img).unwrap();
        assert_eq!(out.call_targets.entries(), &[0x8100, 0x8180, 0x8200]);
        assert_eq!(out.dispatch.get(1).unwrap().class, DispatchClass::IndirectCall { reg: Register::R3, link: true });
    }
}
