//! Scripted adversary: memory writes, register corruption and interrupts
//! fired by cycle, pc or symbol triggers.
//!
//! ```text
//! at-symbol vuln_copy write32 sp+4 gadget_0+1
//! at-cycle 500 raise-irq 0
//! at-pc 0x8240 set-reg r3 0x8301
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::isa::Register;
use crate::manifest::Manifest;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct ScriptError {
    pub line: usize,
    pub msg: String,
}

/// Address or value operand, resolved when the trigger fires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Abs(u32),
    Symbol { name: String, offset: i64 },
    Sp(i64),
}

impl Operand {
    pub fn resolve(&self, manifest: &Manifest, sp: u32) -> Option<u32> {
        match self {
            Operand::Abs(v) => Some(*v),
            Operand::Symbol { name, offset } => manifest.symbol(name).map(|a| (a as i64 + offset) as u32),
            Operand::Sp(offset) => Some((sp as i64 + offset) as u32),
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (base, offset) = match self {
            Operand::Abs(v) => return write!(f, "{v:#x}"),
            Operand::Symbol { name, offset } => (name.as_str(), *offset),
            Operand::Sp(offset) => ("sp", *offset),
        };
        match offset {
            0 => f.write_str(base),
            o if o > 0 => write!(f, "{base}+{o:#x}"),
            o => write!(f, "{base}-{:#x}", -o),
        }
    }
}

fn number(s: &str) -> Option<u64> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

impl FromStr for Operand {
    type Err = String;

    fn from_str(s: &str) -> Result<Operand, String> {
        if let Some(v) = number(s) {
            return u32::try_from(v).map(Operand::Abs).map_err(|_| format!("`{s}` does not fit in 32 bits"));
        }
        let (base, offset) = match s.find(['+', '-']) {
            Some(p) => {
                let o = number(&s[p + 1..]).ok_or_else(|| format!("bad offset in `{s}`"))? as i64;
                (&s[..p], if &s[p..p + 1] == "-" { -o } else { o })
            }
            None => (s, 0),
        };
        if base.is_empty() {
            return Err(format!("bad operand `{s}`"));
        }
        Ok(if base == "sp" { Operand::Sp(offset) } else { Operand::Symbol { name: base.to_string(), offset } })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    AtCycle(u64),
    AtPc(Operand),
    AtSymbol(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Write { width: u8, addr: Operand, value: Operand },
    SetReg { reg: Register, value: Operand },
    RaiseIrq(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub trigger: Trigger,
    pub action: Action,
}

/// Ordered list of one-shot triggered actions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttackScript {
    pub steps: Vec<Step>,
}

impl AttackScript {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn extend(&mut self, other: AttackScript) {
        self.steps.extend(other.steps);
    }
}

impl FromStr for AttackScript {
    type Err = ScriptError;

    fn from_str(text: &str) -> Result<AttackScript, ScriptError> {
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let fail = |msg: String| ScriptError { line, msg };
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let toks: Vec<&str> = content.split_whitespace().collect();
            let arg = |n: usize| toks.get(n).copied().ok_or_else(|| fail(format!("missing operand in `{content}`")));
            let operand = |n: usize| arg(n)?.parse::<Operand>().map_err(fail);
            let trigger = match toks[0] {
                "at-cycle" => Trigger::AtCycle(number(arg(1)?).ok_or_else(|| fail("bad cycle count".into()))?),
                "at-pc" => Trigger::AtPc(operand(1)?),
                "at-symbol" => Trigger::AtSymbol(arg(1)?.to_string()),
                t => return Err(fail(format!("unknown trigger `{t}`"))),
            };
            let action = match arg(2)? {
                "write8" | "write16" | "write32" => {
                    let width = arg(2)?[5..].parse::<u8>().unwrap() / 8;
                    Action::Write { width, addr: operand(3)?, value: operand(4)? }
                }
                "set-reg" => Action::SetReg {
                    reg: Register::parse(arg(3)?).ok_or_else(|| fail(format!("bad register `{}`", toks[3])))?,
                    value: operand(4)?,
                },
                "raise-irq" => {
                    let n = number(arg(3)?).and_then(|n| u32::try_from(n).ok());
                    Action::RaiseIrq(n.ok_or_else(|| fail("bad irq number".into()))?)
                }
                a => return Err(fail(format!("unknown action `{a}`"))),
            };
            let expected = match action {
                Action::Write { .. } | Action::SetReg { .. } => 5,
                Action::RaiseIrq(_) => 4,
            };
            if toks.len() != expected {
                return Err(fail(format!("expected {expected} fields, found {}", toks.len())));
            }
            steps.push(Step { trigger, action });
        }
        Ok(AttackScript { steps })
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.trigger {
            Trigger::AtCycle(n) => write!(f, "at-cycle {n} ")?,
            Trigger::AtPc(a) => write!(f, "at-pc {a} ")?,
            Trigger::AtSymbol(s) => write!(f, "at-symbol {s} ")?,
        }
        match &self.action {
            Action::Write { width, addr, value } => write!(f, "write{} {addr} {value}", width * 8),
            Action::SetReg { reg, value } => write!(f, "set-reg {reg} {value}"),
            Action::RaiseIrq(n) => write!(f, "raise-irq {n}"),
        }
    }
}

impl fmt::Display for AttackScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}
