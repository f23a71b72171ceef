//! Why a simulation stopped.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    MemFault,
    UsageFault,
    HardFault,
    SecureFault,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::MemFault => "MemFault",
            FaultKind::UsageFault => "UsageFault",
            FaultKind::HardFault => "HardFault",
            FaultKind::SecureFault => "SecureFault",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    pub pc: u32,
    pub cycle: u64,
    pub detail: String,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at pc={:#010x} cycle={}: {}", self.kind, self.pc, self.cycle, self.detail)
    }
}

/// Machine-readable CFI violation record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub cycle: u64,
    /// Address of the dispatch instruction that trapped.
    pub site: u32,
    pub class: String,
    pub expected: Option<u32>,
    pub observed: Option<u32>,
    pub verdict: String,
}

fn opt_hex(v: Option<u32>) -> String {
    v.map(|v| format!("{v:#010x}")).unwrap_or_else(|| "-".into())
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cycle={} site={:#010x} class={} expected={} observed={} verdict={}",
            self.cycle,
            self.site,
            self.class,
            opt_hex(self.expected),
            opt_hex(self.observed),
            self.verdict
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stop {
    /// Guest executed `halt`.
    Halted,
    Fault(Fault),
    Violation(Violation),
}

impl From<Fault> for Stop {
    fn from(f: Fault) -> Stop {
        Stop::Fault(f)
    }
}

impl fmt::Display for Stop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stop::Halted => f.write_str("halted"),
            Stop::Fault(fault) => write!(f, "fault: {fault}"),
            Stop::Violation(v) => write!(f, "cfi violation: {v}"),
        }
    }
}
