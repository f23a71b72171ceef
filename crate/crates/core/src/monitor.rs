//! The branch monitor: a host-level handler bound to the svc vector.
//!
//! It reads the dispatch comment of the trapping `svc`, validates the
//! transfer against the branch table, the call target table or the secure
//! shadow stack, rewrites the stacked context frame and performs the
//! exception return. Shadow-stack accesses go through the secure gateway
//! veneer, so the stack itself stays in Secure memory.

use thiserror::Error;

use crate::diag::{Fault, Stop, Violation};
use crate::isa::{decode16, Instruction, Register};
use crate::machine::{
    frame, is_exc_return, HostHandler, Machine, EXC_SVC, FRAME_BYTES, XPSR_FRAME_PAD, XPSR_IPSR_MASK,
};
use crate::manifest::{reserved, tables, FirmwareImage};
use crate::memory::{SecState, Security};
use crate::tables::{BranchTable, CallTargetTable, DispatchClass, DispatchTable, TableError};

/// Extra cycles the monitor's own work costs, on top of the svc entry and
/// exception return the machine already charges.
pub mod cost {
    /// Reading the comment, fetching the descriptor, touching the frame.
    pub const DISPATCH: u64 = 16;
    /// One binary-search probe in the branch or call target table.
    pub const PROBE: u64 = 2;
    /// Body of a shadow-stack push or pop (the gateway adds sg and bxns).
    pub const SHADOW_OP: u64 = 4;
}

pub const DEFAULT_CAPACITY: u32 = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("missing `{0}`")]
    Missing(String),
    #[error("`{0}` must be in read-only memory")]
    Writable(String),
    #[error("`{0}` is in the wrong security domain")]
    Domain(String),
    #[error("shadow stack reserve holds no slots")]
    TooSmall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorOptions {
    pub capacity: u32,
    /// Resume non-exception `bx lr` returns directly instead of via the trampoline.
    pub fast_path: bool,
}

impl Default for MonitorOptions {
    fn default() -> Self {
        MonitorOptions { capacity: DEFAULT_CAPACITY, fast_path: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShadowError {
    Overflow,
    Underflow,
    Fault(Fault),
}

impl From<Fault> for ShadowError {
    fn from(f: Fault) -> Self {
        ShadowError::Fault(f)
    }
}

/// Return-address stack in Secure memory: a depth word followed by slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowStack {
    pub base: u32,
    pub capacity: u32,
    pub veneer: u32,
}

impl ShadowStack {
    fn slot(&self, index: u32) -> u32 {
        self.base + 4 + 4 * index
    }

    /// Host-level read of the current depth (no gateway crossing).
    pub fn depth(&self, m: &Machine) -> u32 {
        m.peek_u32(self.base).unwrap_or(0)
    }

    pub fn entries(&self, m: &Machine) -> Vec<u32> {
        (0..self.depth(m).min(self.capacity)).filter_map(|i| m.peek_u32(self.slot(i))).collect()
    }

    pub fn push(&self, m: &mut Machine, value: u32) -> Result<(), ShadowError> {
        let s = *self;
        m.secure_gateway_call(self.veneer, move |m| {
            m.charge(cost::SHADOW_OP);
            let depth = m.load_u32_as(SecState::Secure, s.base)?;
            if depth >= s.capacity {
                return Ok(Err(ShadowError::Overflow));
            }
            m.store_u32_as(SecState::Secure, s.slot(depth), value)?;
            m.store_u32_as(SecState::Secure, s.base, depth + 1)?;
            Ok(Ok(()))
        })?
    }

    pub fn pop(&self, m: &mut Machine) -> Result<u32, ShadowError> {
        let s = *self;
        m.secure_gateway_call(self.veneer, move |m| {
            m.charge(cost::SHADOW_OP);
            let depth = m.load_u32_as(SecState::Secure, s.base)?;
            if depth == 0 {
                return Ok(Err(ShadowError::Underflow));
            }
            let value = m.load_u32_as(SecState::Secure, s.slot(depth - 1))?;
            m.store_u32_as(SecState::Secure, s.base, depth - 1)?;
            Ok(Ok(value))
        })?
    }
}

/// Approved transfers, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorEvent {
    Call {
        site: u32,
        target: u32,
        ret: Option<u32>,
    },
    /// Indirect branch without link.
    Jump {
        site: u32,
        target: u32,
    },
    Return {
        site: u32,
        value: u32,
    },
    /// Exception trampoline recorded the interrupted context.
    ExceptionEntry {
        exc: u32,
        marker: u32,
    },
    /// Handler return through a trampoline, validated against its marker.
    ExceptionReturn {
        site: u32,
        marker: u32,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MonitorStats {
    pub traps: u64,
    pub max_depth: u32,
}

#[derive(Debug, Clone)]
pub struct Monitor {
    entry: u32,
    branch_table: BranchTable,
    call_targets: CallTargetTable,
    dispatch: DispatchTable,
    shadow: ShadowStack,
    vector_base: u32,
    vector_count: u32,
    options: MonitorOptions,
    stats: MonitorStats,
    events: Vec<MonitorEvent>,
    violation: Option<Violation>,
}

struct Frame {
    base: u32,
    words: [u32; 8],
}

impl Frame {
    fn caller_sp(&self) -> u32 {
        let pad = if self.words[frame::XPSR] & XPSR_FRAME_PAD != 0 { 4 } else { 0 };
        self.base + FRAME_BYTES + pad
    }

    fn addr(&self, word: usize) -> u32 {
        self.base + 4 * word as u32
    }
}

impl Monitor {
    /// Binds to an instrumented image: tables come from the sidecar ranges.
    pub fn from_image(image: &FirmwareImage, options: MonitorOptions) -> Result<Monitor, MonitorError> {
        let m = &image.manifest;
        let table_bytes = |name: &str| -> Result<&[u8], MonitorError> {
            let Some(range) = m.table(name) else { return Ok(&[]) };
            let region = m.regions.iter().find(|r| r.contains(range.base, range.size.max(1)));
            if region.is_none_or(|r| r.perms.write) {
                return Err(MonitorError::Writable(format!("{name} table")));
            }
            image.slice(range).ok_or_else(|| MonitorError::Missing(format!("{name} table bytes")))
        };
        let branch_table = BranchTable::from_bytes(table_bytes(tables::BRANCH)?)?;
        let call_targets = CallTargetTable::from_bytes(table_bytes(tables::CALL_TARGETS)?)?;
        let dispatch = DispatchTable::from_bytes(table_bytes(tables::DISPATCH)?)?;

        let reserve = |name: &str, want: &[Security]| {
            let r = m.reserve(name).ok_or_else(|| MonitorError::Missing(format!("`{name}` reserve")))?;
            let region = m.regions.iter().find(|g| g.contains(r.base, r.size));
            match region {
                Some(g) if want.contains(&g.security) => Ok(r),
                _ => Err(MonitorError::Domain(name.to_string())),
            }
        };
        let shadow_range = reserve(reserved::SHADOW, &[Security::Secure])?;
        let veneers = reserve(reserved::VENEERS, &[Security::Nsc])?;
        let slots = (shadow_range.size / 4).saturating_sub(1);
        if slots == 0 {
            return Err(MonitorError::TooSmall);
        }
        let vectors = m.vectors.ok_or_else(|| MonitorError::Missing("vector table".into()))?;
        let entry =
            image.read_u32(vectors.base + 4 * EXC_SVC).ok_or_else(|| MonitorError::Missing("svc vector".into()))? & !1;
        Ok(Monitor {
            entry,
            branch_table,
            call_targets,
            dispatch,
            shadow: ShadowStack {
                base: shadow_range.base,
                capacity: options.capacity.min(slots),
                veneer: veneers.base,
            },
            vector_base: vectors.base,
            vector_count: vectors.count,
            options,
            stats: MonitorStats::default(),
            events: Vec::new(),
            violation: None,
        })
    }

    /// Secure-boot step: writes the gateway veneer and clears the shadow stack.
    pub fn install(&self, m: &mut Machine) {
        let mut veneer = Vec::new();
        for i in [Instruction::Sg, Instruction::Bxns { rm: Register::LR }] {
            veneer.extend(crate::isa::encode(&i).unwrap());
        }
        m.poke(self.shadow.veneer, &veneer).expect("veneer reserve is mapped");
        m.poke(self.shadow.base, &0u32.to_le_bytes()).expect("shadow reserve is mapped");
    }

    pub fn entry(&self) -> u32 {
        self.entry
    }

    pub fn shadow(&self) -> ShadowStack {
        self.shadow
    }

    pub fn branch_table(&self) -> &BranchTable {
        &self.branch_table
    }

    pub fn call_targets(&self) -> &CallTargetTable {
        &self.call_targets
    }

    pub fn dispatch(&self) -> &DispatchTable {
        &self.dispatch
    }

    pub fn stats(&self) -> MonitorStats {
        self.stats
    }

    pub fn events(&self) -> &[MonitorEvent] {
        &self.events
    }

    pub fn violation(&self) -> Option<&Violation> {
        self.violation.as_ref()
    }

    /// Binary search in the branch table, charging one probe cost per probe.
    pub fn btbl_lookup(&self, m: &mut Machine, site: u32) -> Option<u32> {
        let l = self.branch_table.lookup(site);
        m.charge(cost::PROBE * l.probes as u64);
        l.destination
    }

    fn read_frame(m: &Machine) -> Result<Frame, Fault> {
        let base = m.sp();
        let mut words = [0u32; 8];
        for (i, w) in words.iter_mut().enumerate() {
            *w = m.load_u32_as(SecState::NonSecure, base + 4 * i as u32)?;
        }
        Ok(Frame { base, words })
    }

    fn set_word(m: &mut Machine, f: &Frame, word: usize, value: u32) -> Result<(), Fault> {
        m.store_u32_as(SecState::NonSecure, f.addr(word), value)
    }

    fn flag(
        &mut self,
        m: &Machine,
        site: u32,
        class: &str,
        expected: Option<u32>,
        observed: Option<u32>,
        verdict: &str,
    ) -> Stop {
        let v = Violation {
            cycle: m.cycles(),
            site,
            class: class.to_string(),
            expected,
            observed,
            verdict: verdict.to_string(),
        };
        self.violation = Some(v.clone());
        Stop::Violation(v)
    }

    fn push(&mut self, m: &mut Machine, site: u32, class: &str, value: u32) -> Result<(), Stop> {
        match self.shadow.push(m, value) {
            Ok(()) => {
                self.stats.max_depth = self.stats.max_depth.max(self.shadow.depth(m));
                Ok(())
            }
            Err(ShadowError::Overflow) => Err(self.flag(m, site, class, None, Some(value), "shadow stack overflow")),
            Err(ShadowError::Underflow) => unreachable!(),
            Err(ShadowError::Fault(f)) => Err(f.into()),
        }
    }

    fn pop(&mut self, m: &mut Machine, site: u32, class: &str, observed: u32) -> Result<u32, Stop> {
        match self.shadow.pop(m) {
            Ok(v) => Ok(v),
            Err(ShadowError::Underflow) => {
                Err(self.flag(m, site, class, None, Some(observed), "shadow stack underflow"))
            }
            Err(ShadowError::Overflow) => unreachable!(),
            Err(ShadowError::Fault(f)) => Err(f.into()),
        }
    }

    /// Candidate and return routing shared by both return forms. `outer`
    /// locates the interrupted context's frame when the candidate is an ERV.
    fn check_return(
        &mut self,
        m: &mut Machine,
        site: u32,
        class: &DispatchClass,
        candidate: u32,
        outer: u32,
    ) -> Result<bool, Stop> {
        let name = class.name();
        if is_exc_return(candidate) {
            let marker = m.load_u32_as(SecState::NonSecure, outer + 4 * frame::PC as u32)?;
            let expected = self.pop(m, site, &name, marker)?;
            if expected != marker {
                return Err(self.flag(
                    m,
                    site,
                    &name,
                    Some(expected),
                    Some(marker),
                    "exception return address mismatch",
                ));
            }
            self.events.push(MonitorEvent::ExceptionReturn { site, marker });
            Ok(true)
        } else {
            let expected = self.pop(m, site, &name, candidate)?;
            if expected != candidate {
                return Err(self.flag(m, site, &name, Some(expected), Some(candidate), "return address mismatch"));
            }
            self.events.push(MonitorEvent::Return { site, value: candidate });
            Ok(false)
        }
    }

    fn dispatch_trap(&mut self, m: &mut Machine) -> Result<(), Stop> {
        m.charge(cost::DISPATCH);
        let f = Self::read_frame(m)?;
        let stacked_pc = f.words[frame::PC];
        let site = stacked_pc.wrapping_sub(2);
        let comment = match m.peek_u16(site).map(decode16) {
            Some(Instruction::Svc { comment }) => comment,
            _ => return Err(self.flag(m, site, "SVC", None, None, "trap site is not an svc")),
        };
        let Some(desc) = self.dispatch.get(comment).copied() else {
            return Err(self.flag(m, site, &format!("SVC_{comment}"), None, None, "unrecognized svc number"));
        };
        let name = desc.class.name();
        match desc.class {
            DispatchClass::DirectCall => {
                let Some(dest) = self.btbl_lookup(m, site) else {
                    return Err(self.flag(m, site, &name, None, None, "site not in branch table"));
                };
                let ret = (site + 4) | 1;
                self.push(m, site, &name, ret)?;
                Self::set_word(m, &f, frame::LR, ret)?;
                Self::set_word(m, &f, frame::PC, dest)?;
                self.events.push(MonitorEvent::Call { site, target: dest, ret: Some(ret) });
            }
            DispatchClass::IndirectCall { reg, link } => {
                let value = match reg.index() {
                    0..=3 => f.words[reg.index() as usize],
                    12 => f.words[frame::R12],
                    14 => f.words[frame::LR],
                    _ => m.reg(reg),
                };
                let target = value & !1;
                let probes = (usize::BITS - self.call_targets.len().leading_zeros()) as u64;
                m.charge(cost::PROBE * probes);
                if value & 1 == 0 || !self.call_targets.contains(target) {
                    return Err(self.flag(m, site, &name, None, Some(value), "target not in call target table"));
                }
                if link {
                    let ret = (site + 2) | 1;
                    self.push(m, site, &name, ret)?;
                    Self::set_word(m, &f, frame::LR, ret)?;
                    self.events.push(MonitorEvent::Call { site, target, ret: Some(ret) });
                } else {
                    self.events.push(MonitorEvent::Jump { site, target });
                }
                Self::set_word(m, &f, frame::PC, target)?;
            }
            DispatchClass::ReturnBxLr => {
                let candidate = f.words[frame::LR];
                let nested = self.check_return(m, site, &desc.class, candidate, f.caller_sp())?;
                let resume = if !nested && self.options.fast_path { candidate & !1 } else { desc.trampoline };
                Self::set_word(m, &f, frame::PC, resume)?;
            }
            DispatchClass::ReturnPop { regs } => {
                let slot = f.caller_sp() + 4 * regs.len();
                let candidate = m.load_u32_as(SecState::NonSecure, slot)?;
                self.check_return(m, site, &desc.class, candidate, slot + 4)?;
                Self::set_word(m, &f, frame::PC, desc.trampoline)?;
            }
            DispatchClass::ExceptionEntry => {
                let exc = f.words[frame::XPSR] & XPSR_IPSR_MASK;
                let vector = if exc >= 2 && exc < self.vector_count && exc != EXC_SVC {
                    m.peek_u32(self.vector_base + 4 * exc)
                } else {
                    None
                };
                if vector.map(|v| v & !1) != Some(site) {
                    return Err(self.flag(m, site, &name, None, Some(exc), "trampoline svc outside its exception"));
                }
                let marker = m.load_u32_as(SecState::NonSecure, f.caller_sp() + 4 * frame::PC as u32)?;
                self.push(m, site, &name, marker)?;
                Self::set_word(m, &f, frame::PC, site + 2)?;
                self.events.push(MonitorEvent::ExceptionEntry { exc, marker });
            }
        }
        let erv = m.reg(Register::LR);
        m.exception_return(erv)?;
        Ok(())
    }
}

impl HostHandler for Monitor {
    fn claims(&self, addr: u32, ipsr: u32) -> bool {
        ipsr == EXC_SVC && addr == self.entry
    }

    fn on_entry(&mut self, m: &mut Machine, _addr: u32) -> Result<(), Stop> {
        self.stats.traps += 1;
        self.dispatch_trap(m)
    }
}
