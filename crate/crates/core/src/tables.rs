//! Lookup tables emitted by the rewriter and consumed by the monitor.
//!
//! All three serialize little-endian:
//!
//! * branch table: `site: u32, destination: u32` per record, sorted by site;
//! * call target table: one `u32` entry address per subroutine, sorted;
//! * dispatch table: `comment: u8, kind: u8, operand: u8, flags: u8,
//!   trampoline: u32` per descriptor, sorted by comment.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::isa::{RegList, Register};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("duplicate site {0:#010x} in branch table")]
    DuplicateSite(u32),
    #[error("{what} table length {len} is not a multiple of {record}")]
    Length { what: &'static str, len: usize, record: usize },
    #[error("{0} table is not sorted")]
    Unsorted(&'static str),
    #[error("dispatch comment 0 is reserved")]
    ReservedComment,
    #[error("bad dispatch descriptor kind {kind} for comment {comment}")]
    BadDescriptor { comment: u8, kind: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BranchRecord {
    pub site: u32,
    pub destination: u32,
}

/// Direct-call sites mapped to their absolute destinations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BranchTable {
    records: Vec<BranchRecord>,
}

/// Result of a branch-table search, with the number of probes it took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lookup {
    pub destination: Option<u32>,
    pub probes: u32,
}

impl BranchTable {
    pub const RECORD_BYTES: usize = 8;

    pub fn new(mut records: Vec<BranchRecord>) -> Result<BranchTable, TableError> {
        records.sort_unstable();
        if let Some(w) = records.windows(2).find(|w| w[0].site == w[1].site) {
            return Err(TableError::DuplicateSite(w[0].site));
        }
        Ok(BranchTable { records })
    }

    pub fn records(&self) -> &[BranchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.records.len() * Self::RECORD_BYTES
    }

    /// Binary search by site address.
    pub fn lookup(&self, site: u32) -> Lookup {
        let (mut lo, mut hi) = (0usize, self.records.len());
        let mut probes = 0;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            probes += 1;
            let rec = self.records[mid];
            if rec.site == site {
                return Lookup { destination: Some(rec.destination), probes };
            }
            if rec.site < site {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        Lookup { destination: None, probes }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.records.iter().flat_map(|r| r.site.to_le_bytes().into_iter().chain(r.destination.to_le_bytes())).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BranchTable, TableError> {
        if !bytes.len().is_multiple_of(Self::RECORD_BYTES) {
            return Err(TableError::Length { what: "branch", len: bytes.len(), record: Self::RECORD_BYTES });
        }
        let records: Vec<BranchRecord> = bytes
            .chunks_exact(8)
            .map(|c| BranchRecord {
                site: u32::from_le_bytes(c[0..4].try_into().unwrap()),
                destination: u32::from_le_bytes(c[4..8].try_into().unwrap()),
            })
            .collect();
        if records.windows(2).any(|w| w[0].site >= w[1].site) {
            return Err(TableError::Unsorted("branch"));
        }
        Ok(BranchTable { records })
    }
}

/// Sorted, de-duplicated subroutine entry addresses.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CallTargetTable {
    entries: Vec<u32>,
}

impl CallTargetTable {
    pub fn new(mut entries: Vec<u32>) -> CallTargetTable {
        entries.sort_unstable();
        entries.dedup();
        CallTargetTable { entries }
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, addr: u32) -> bool {
        self.entries.binary_search(&addr).is_ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.entries.iter().flat_map(|e| e.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CallTargetTable, TableError> {
        if !bytes.len().is_multiple_of(4) {
            return Err(TableError::Length { what: "call target", len: bytes.len(), record: 4 });
        }
        let entries: Vec<u32> = bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        if entries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TableError::Unsorted("call target"));
        }
        Ok(CallTargetTable { entries })
    }
}

/// What a dispatch instruction stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DispatchClass {
    DirectCall,
    /// `blx rm` when `link`, otherwise `bx rm` with `rm != lr`.
    IndirectCall {
        reg: Register,
        link: bool,
    },
    ReturnBxLr,
    ReturnPop {
        regs: RegList,
    },
    /// First instruction of an exception trampoline.
    ExceptionEntry,
}

impl DispatchClass {
    pub fn name(&self) -> String {
        match self {
            DispatchClass::DirectCall => "BL_IMM".into(),
            DispatchClass::IndirectCall { reg, link: true } => format!("BLX_{}", reg.to_string().to_uppercase()),
            DispatchClass::IndirectCall { reg, link: false } => format!("BX_{}", reg.to_string().to_uppercase()),
            DispatchClass::ReturnBxLr => "BX_LR".into(),
            DispatchClass::ReturnPop { regs } => {
                let mut s = String::from("POP_");
                for r in regs.iter() {
                    s.push_str(&r.to_string().to_uppercase());
                    s.push('_');
                }
                s.push_str("PC");
                s
            }
            DispatchClass::ExceptionEntry => "EXC_ENTRY".into(),
        }
    }

    pub fn is_return(&self) -> bool {
        matches!(self, DispatchClass::ReturnBxLr | DispatchClass::ReturnPop { .. })
    }
}

impl fmt::Display for DispatchClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor {
    pub class: DispatchClass,
    /// Return trampoline for return classes; zero otherwise.
    pub trampoline: u32,
}

/// Map from `svc` comment to descriptor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DispatchTable {
    entries: BTreeMap<u8, Descriptor>,
}

const KIND_DIRECT: u8 = 1;
const KIND_INDIRECT: u8 = 2;
const KIND_BX_LR: u8 = 3;
const KIND_POP: u8 = 4;
const KIND_EXC_ENTRY: u8 = 5;

impl DispatchTable {
    pub const RECORD_BYTES: usize = 8;
    /// Comments 1..=255 are assignable.
    pub const CAPACITY: usize = 255;

    pub fn insert(&mut self, comment: u8, descriptor: Descriptor) -> Result<(), TableError> {
        if comment == 0 {
            return Err(TableError::ReservedComment);
        }
        self.entries.insert(comment, descriptor);
        Ok(())
    }

    pub fn get(&self, comment: u8) -> Option<&Descriptor> {
        self.entries.get(&comment)
    }

    pub fn comment_for(&self, class: &DispatchClass) -> Option<u8> {
        self.entries.iter().find(|(_, d)| d.class == *class).map(|(c, _)| *c)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &Descriptor)> {
        self.entries.iter().map(|(c, d)| (*c, d))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.entries.len() * Self::RECORD_BYTES);
        for (comment, d) in &self.entries {
            let (kind, operand, flags) = match d.class {
                DispatchClass::DirectCall => (KIND_DIRECT, 0, 0),
                DispatchClass::IndirectCall { reg, link } => (KIND_INDIRECT, reg.index(), link as u8),
                DispatchClass::ReturnBxLr => (KIND_BX_LR, 0, 0),
                DispatchClass::ReturnPop { regs } => (KIND_POP, regs.0, 0),
                DispatchClass::ExceptionEntry => (KIND_EXC_ENTRY, 0, 0),
            };
            out.extend_from_slice(&[*comment, kind, operand, flags]);
            out.extend_from_slice(&d.trampoline.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DispatchTable, TableError> {
        if !bytes.len().is_multiple_of(Self::RECORD_BYTES) {
            return Err(TableError::Length { what: "dispatch", len: bytes.len(), record: Self::RECORD_BYTES });
        }
        let mut table = DispatchTable::default();
        let mut last = 0u8;
        for c in bytes.chunks_exact(Self::RECORD_BYTES) {
            let (comment, kind, operand, flags) = (c[0], c[1], c[2], c[3]);
            if comment <= last {
                return Err(if comment == 0 { TableError::ReservedComment } else { TableError::Unsorted("dispatch") });
            }
            last = comment;
            let bad = TableError::BadDescriptor { comment, kind };
            let class = match kind {
                KIND_DIRECT => DispatchClass::DirectCall,
                KIND_INDIRECT => {
                    DispatchClass::IndirectCall { reg: Register::new(operand).ok_or(bad)?, link: flags & 1 != 0 }
                }
                KIND_BX_LR => DispatchClass::ReturnBxLr,
                KIND_POP => DispatchClass::ReturnPop { regs: RegList(operand) },
                KIND_EXC_ENTRY => DispatchClass::ExceptionEntry,
                _ => return Err(bad),
            };
            let trampoline = u32::from_le_bytes(c[4..8].try_into().unwrap());
            table.entries.insert(comment, Descriptor { class, trampoline });
        }
        Ok(table)
    }
}
