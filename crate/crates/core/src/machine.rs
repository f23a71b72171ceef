//! Deterministic ARMv8-M-like core: banked stacks, Thread/Handler modes,
//! hardware exception entry and return, secure gateway transitions and a
//! fixed cycle model.

use std::collections::BTreeSet;
use std::fmt;

use crate::diag::{Fault, FaultKind, Stop};
use crate::isa::{self, Instruction, Register};
use crate::memory::{check_access, Access, AccessFault, AccessKind, MemoryRegion, SecState};

pub const EXC_SVC: u32 = 11;
/// Exception number of IRQ 0.
pub const EXC_IRQ0: u32 = 16;

/// Size of the hardware-stacked context frame.
pub const FRAME_BYTES: u32 = 32;

/// Word offsets inside the context state stack frame.
pub mod frame {
    pub const R0: usize = 0;
    pub const R1: usize = 1;
    pub const R2: usize = 2;
    pub const R3: usize = 3;
    pub const R12: usize = 4;
    pub const LR: usize = 5;
    pub const PC: usize = 6;
    pub const XPSR: usize = 7;
}

pub const XPSR_N: u32 = 1 << 31;
pub const XPSR_Z: u32 = 1 << 30;
pub const XPSR_THUMB: u32 = 1 << 24;
/// Set in the stacked xpsr when a padding word was inserted to 8-byte align the frame.
pub const XPSR_FRAME_PAD: u32 = 1 << 9;
pub const XPSR_IPSR_MASK: u32 = 0x1FF;

/// Cycle costs.
pub mod cost {
    pub const INSTRUCTION: u64 = 1;
    pub const WIDE_EXTRA: u64 = 1;
    pub const BRANCH_REFILL: u64 = 2;
    pub const PER_REGISTER: u64 = 1;
    pub const EXCEPTION_ENTRY: u64 = 12;
    pub const EXCEPTION_RETURN: u64 = 12;
    pub const SG: u64 = 1;
    pub const BXNS: u64 = 3;
}

/// Same test as the monitor uses: anything above 0xF0000000 is an ERV.
pub fn is_exc_return(value: u32) -> bool {
    value > 0xF000_0000
}

/// Decoded exception return value.
///
/// Non-secure frames use the classic encodings (`0xFFFFFFF1` handler,
/// `0xFFFFFFF9` thread/main, `0xFFFFFFFD` thread/process). Frames stacked on
/// the secure stack clear bit 6.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExcReturn {
    pub to_thread: bool,
    pub process_stack: bool,
    pub secure_frame: bool,
}

pub const ERV_HANDLER: u32 = 0xFFFF_FFF1;
pub const ERV_THREAD_MAIN: u32 = 0xFFFF_FFF9;
pub const ERV_THREAD_PROCESS: u32 = 0xFFFF_FFFD;
const ERV_SECURE_CLEAR: u32 = 1 << 6;

impl ExcReturn {
    pub fn encode(self) -> u32 {
        let base = match (self.to_thread, self.process_stack) {
            (false, _) => ERV_HANDLER,
            (true, false) => ERV_THREAD_MAIN,
            (true, true) => ERV_THREAD_PROCESS,
        };
        if self.secure_frame {
            base & !ERV_SECURE_CLEAR
        } else {
            base
        }
    }

    pub fn decode(value: u32) -> Option<ExcReturn> {
        let secure_frame = value & ERV_SECURE_CLEAR == 0;
        let r = match value | ERV_SECURE_CLEAR {
            ERV_HANDLER => ExcReturn { to_thread: false, process_stack: false, secure_frame },
            ERV_THREAD_MAIN => ExcReturn { to_thread: true, process_stack: false, secure_frame },
            ERV_THREAD_PROCESS => ExcReturn { to_thread: true, process_stack: true, secure_frame },
            _ => return None,
        };
        Some(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Thread,
    Handler,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Thread => "T",
            Mode::Handler => "H",
        })
    }
}

/// Privileged host code bound to guest addresses, entered only in Handler mode.
pub trait HostHandler {
    fn claims(&self, addr: u32, ipsr: u32) -> bool;
    fn on_entry(&mut self, machine: &mut Machine, addr: u32) -> Result<(), Stop>;
}

/// No host code: every address executes guest instructions.
pub struct NoHost;

impl HostHandler for NoHost {
    fn claims(&self, _addr: u32, _ipsr: u32) -> bool {
        false
    }

    fn on_entry(&mut self, _machine: &mut Machine, _addr: u32) -> Result<(), Stop> {
        unreachable!("NoHost claims nothing")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Exec(Instruction),
    ExceptionEntry(u32),
    ExceptionReturn(u32),
    HostEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub cycle: u64,
    pub security: SecState,
    pub mode: Mode,
    pub pc: u32,
    pub event: TraceEvent,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>8} {:<2} {} {:08x} ", self.cycle, self.security, self.mode, self.pc)?;
        match self.event {
            TraceEvent::Exec(i) => f.write_str(&i.disasm_at(self.pc)),
            TraceEvent::ExceptionEntry(n) => write!(f, "<exception {n} entry>"),
            TraceEvent::ExceptionReturn(erv) => write!(f, "<exception return {erv:#010x}>"),
            TraceEvent::HostEntry => f.write_str("<host handler>"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    pub instructions: u64,
    pub svc_entries: u64,
    pub exceptions_taken: u64,
    pub exception_returns: u64,
    pub host_entries: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunEnd {
    Stopped,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Machine {
    /// r0-r12, a placeholder for r13, lr and pc.
    regs: [u32; 16],
    pub msp_ns: u32,
    pub psp_ns: u32,
    pub msp_s: u32,
    flag_n: bool,
    flag_z: bool,
    ipsr: u32,
    active: Vec<u32>,
    pending: BTreeSet<u32>,
    security: SecState,
    cycles: u64,
    regions: Vec<MemoryRegion>,
    mem: Vec<Vec<u8>>,
    vector_base: u32,
    vector_count: u32,
    output_port: Option<u32>,
    output: Vec<u8>,
    stop: Option<Stop>,
    stats: Stats,
    trace: Option<Vec<TraceRecord>>,
}

impl Machine {
    pub fn new(regions: Vec<MemoryRegion>, vector_base: u32, vector_count: u32) -> Machine {
        let mem = regions.iter().map(|r| vec![0u8; r.size as usize]).collect();
        Machine {
            regs: [0; 16],
            msp_ns: 0,
            psp_ns: 0,
            msp_s: 0,
            flag_n: false,
            flag_z: false,
            ipsr: 0,
            active: Vec::new(),
            pending: BTreeSet::new(),
            security: SecState::NonSecure,
            cycles: 0,
            regions,
            mem,
            vector_base,
            vector_count,
            output_port: None,
            output: Vec::new(),
            stop: None,
            stats: Stats::default(),
            trace: None,
        }
    }

    /// Stores to this word-wide address append to the output log.
    pub fn set_output_port(&mut self, addr: u32) {
        self.output_port = Some(addr);
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Loads the initial main stack pointer and entry point from the vector table.
    pub fn reset(&mut self) -> Result<(), Fault> {
        self.msp_ns =
            self.peek_u32(self.vector_base).ok_or_else(|| self.fault(FaultKind::HardFault, "no vector table"))?;
        let reset =
            self.peek_u32(self.vector_base + 4).ok_or_else(|| self.fault(FaultKind::HardFault, "no reset vector"))?;
        self.regs[15] = reset & !1;
        self.security = SecState::NonSecure;
        self.ipsr = 0;
        Ok(())
    }

    // ---- host-level (unchecked) memory access -------------------------------------------

    fn locate(&self, addr: u32, len: u32) -> Option<(usize, usize)> {
        let idx = crate::memory::find_region(&self.regions, addr, len)?;
        Some((idx, (addr - self.regions[idx].base) as usize))
    }

    /// Writes bytes without permission checks (image loading, test setup).
    pub fn poke(&mut self, addr: u32, data: &[u8]) -> Option<()> {
        let (idx, off) = self.locate(addr, data.len() as u32)?;
        self.mem[idx][off..off + data.len()].copy_from_slice(data);
        Some(())
    }

    pub fn peek(&self, addr: u32, len: u32) -> Option<&[u8]> {
        let (idx, off) = self.locate(addr, len)?;
        Some(&self.mem[idx][off..off + len as usize])
    }

    pub fn peek_u32(&self, addr: u32) -> Option<u32> {
        self.peek(addr, 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn peek_u16(&self, addr: u32) -> Option<u16> {
        self.peek(addr, 2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn regions(&self) -> &[MemoryRegion] {
        &self.regions
    }

    pub fn region_bytes(&self, name: &str) -> Option<&[u8]> {
        let idx = self.regions.iter().position(|r| r.name == name)?;
        Some(&self.mem[idx])
    }

    /// Concatenated contents of every Secure and NSC region.
    pub fn secure_snapshot(&self) -> Vec<u8> {
        self.regions
            .iter()
            .zip(&self.mem)
            .filter(|(r, _)| r.security.is_secure())
            .flat_map(|(_, m)| m.iter().copied())
            .collect()
    }

    // ---- checked access ----------------------------------------------------------------

    fn access_fault(&self, fault: AccessFault, addr: u32, kind: AccessKind) -> Fault {
        let fk = match fault {
            AccessFault::Security => FaultKind::SecureFault,
            AccessFault::Unmapped | AccessFault::Permission => FaultKind::MemFault,
        };
        self.fault(fk, format!("{kind} {addr:#010x} denied ({fault:?})"))
    }

    fn checked(&self, state: SecState, addr: u32, len: u32, kind: AccessKind) -> Result<(usize, usize), Fault> {
        if kind != AccessKind::Fetch && !addr.is_multiple_of(len) {
            return Err(self.fault(FaultKind::UsageFault, format!("unaligned {kind} {addr:#010x}")));
        }
        let access =
            check_access(state, &self.regions, addr, len, kind).map_err(|f| self.access_fault(f, addr, kind))?;
        let idx = access.region();
        Ok((idx, (addr - self.regions[idx].base) as usize))
    }

    pub fn load_u32_as(&self, state: SecState, addr: u32) -> Result<u32, Fault> {
        let (idx, off) = self.checked(state, addr, 4, AccessKind::Load)?;
        Ok(u32::from_le_bytes(self.mem[idx][off..off + 4].try_into().unwrap()))
    }

    pub fn store_u32_as(&mut self, state: SecState, addr: u32, value: u32) -> Result<(), Fault> {
        self.store_as(state, addr, &value.to_le_bytes())
    }

    /// Checked store of 1, 2 or 4 bytes.
    pub fn store_as(&mut self, state: SecState, addr: u32, data: &[u8]) -> Result<(), Fault> {
        let (idx, off) = self.checked(state, addr, data.len() as u32, AccessKind::Store)?;
        if self.output_port == Some(addr & !3) {
            self.output.extend_from_slice(data);
            return Ok(());
        }
        self.mem[idx][off..off + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn load_u32(&self, addr: u32) -> Result<u32, Fault> {
        self.load_u32_as(self.security, addr)
    }

    pub fn store_u32(&mut self, addr: u32, value: u32) -> Result<(), Fault> {
        self.store_u32_as(self.security, addr, value)
    }

    // ---- register file ------------------------------------------------------------------

    pub fn pc(&self) -> u32 {
        self.regs[15]
    }

    pub fn set_pc(&mut self, pc: u32) {
        self.regs[15] = pc & !1;
    }

    pub fn sp(&self) -> u32 {
        match self.security {
            SecState::NonSecure => self.msp_ns,
            SecState::Secure => self.msp_s,
        }
    }

    pub fn set_sp(&mut self, value: u32) {
        match self.security {
            SecState::NonSecure => self.msp_ns = value,
            SecState::Secure => self.msp_s = value,
        }
    }

    /// Architectural register read; pc reads as the current instruction address.
    pub fn reg(&self, r: Register) -> u32 {
        match r.index() {
            13 => self.sp(),
            i => self.regs[i as usize],
        }
    }

    pub fn set_reg(&mut self, r: Register, value: u32) {
        match r.index() {
            13 => self.set_sp(value),
            15 => self.set_pc(value),
            i => self.regs[i as usize] = value,
        }
    }

    pub fn ipsr(&self) -> u32 {
        self.ipsr
    }

    pub fn mode(&self) -> Mode {
        if self.ipsr == 0 {
            Mode::Thread
        } else {
            Mode::Handler
        }
    }

    pub fn security(&self) -> SecState {
        self.security
    }

    pub fn active_exceptions(&self) -> &[u32] {
        &self.active
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    /// Adds host-side work to the cycle counter.
    pub fn charge(&mut self, cycles: u64) {
        self.cycles += cycles;
    }

    pub fn stats(&self) -> Stats {
        self.stats
    }

    pub fn output(&self) -> &[u8] {
        &self.output
    }

    pub fn stopped(&self) -> Option<&Stop> {
        self.stop.as_ref()
    }

    pub fn xpsr(&self) -> u32 {
        (self.flag_n as u32) << 31 | (self.flag_z as u32) << 30 | XPSR_THUMB | self.ipsr
    }

    pub fn flags(&self) -> (bool, bool) {
        (self.flag_n, self.flag_z)
    }

    pub fn fault(&self, kind: FaultKind, detail: impl Into<String>) -> Fault {
        Fault { kind, pc: self.pc(), cycle: self.cycles, detail: detail.into() }
    }

    fn record(&mut self, pc: u32, event: TraceEvent) {
        let (cycle, security, mode) = (self.cycles, self.security, self.mode());
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord { cycle, security, mode, pc, event });
        }
    }

    // ---- exceptions -----------------------------------------------------------------------

    fn priority(exc: u32) -> i64 {
        match exc {
            0 => i64::MAX,
            EXC_SVC => -1,
            n => n as i64,
        }
    }

    /// Marks an exception pending; it is taken at the next step boundary its priority allows.
    pub fn set_pending(&mut self, exc: u32) -> Result<(), Fault> {
        if exc < EXC_IRQ0 || exc >= self.vector_count {
            return Err(self.fault(FaultKind::HardFault, format!("exception {exc} has no vector")));
        }
        self.pending.insert(exc);
        Ok(())
    }

    pub fn pending(&self) -> impl Iterator<Item = u32> + '_ {
        self.pending.iter().copied()
    }

    fn next_pending(&self) -> Option<u32> {
        let current = Self::priority(self.ipsr);
        self.pending.iter().copied().find(|&n| Self::priority(n) < current)
    }

    /// Hardware exception entry: stacks the context frame, switches to Handler
    /// mode and vectors to the handler.
    pub fn raise_exception(&mut self, exc: u32, return_pc: u32) -> Result<(), Fault> {
        if exc >= self.vector_count || exc < 2 {
            return Err(self.fault(FaultKind::HardFault, format!("exception {exc} has no vector")));
        }
        let from = self.security;
        let sp = self.sp();
        let unaligned = sp.wrapping_sub(FRAME_BYTES);
        let base = unaligned & !7;
        let pad = if unaligned & 4 != 0 { XPSR_FRAME_PAD } else { 0 };
        let words = [
            self.regs[0],
            self.regs[1],
            self.regs[2],
            self.regs[3],
            self.regs[12],
            self.regs[14],
            return_pc,
            self.xpsr() | pad,
        ];
        for (i, w) in words.iter().enumerate() {
            self.store_u32_as(from, base + 4 * i as u32, *w).map_err(|f| Fault {
                kind: FaultKind::HardFault,
                detail: format!("stacking error: {}", f.detail),
                ..f
            })?;
        }
        self.set_sp(base);
        let erv = ExcReturn { to_thread: self.ipsr == 0, process_stack: false, secure_frame: from == SecState::Secure };
        let vector = self
            .peek_u32(self.vector_base + 4 * exc)
            .ok_or_else(|| self.fault(FaultKind::HardFault, "vector table unreadable"))?;
        let target = vector & !1;
        let executable = vector & 1 == 1
            && matches!(
                check_access(SecState::NonSecure, &self.regions, target, 2, AccessKind::Fetch),
                Ok(Access::Allow { .. })
            );
        if !executable {
            return Err(self.fault(FaultKind::HardFault, format!("vector {exc} = {vector:#010x} is not executable")));
        }
        self.pending.remove(&exc);
        self.active.push(exc);
        self.ipsr = exc;
        self.security = SecState::NonSecure;
        self.regs[14] = erv.encode();
        self.regs[15] = target;
        self.stats.exceptions_taken += 1;
        if exc == EXC_SVC {
            self.stats.svc_entries += 1;
        }
        self.record(return_pc, TraceEvent::ExceptionEntry(exc));
        self.cycles += cost::EXCEPTION_ENTRY;
        Ok(())
    }

    /// Hardware exception return triggered by loading `erv` into pc.
    pub fn exception_return(&mut self, erv: u32) -> Result<(), Fault> {
        if self.ipsr == 0 {
            return Err(self.fault(FaultKind::HardFault, format!("exception return {erv:#010x} in Thread mode")));
        }
        let ret = ExcReturn::decode(erv)
            .ok_or_else(|| self.fault(FaultKind::HardFault, format!("malformed exception return {erv:#010x}")))?;
        if ret.process_stack {
            return Err(self.fault(FaultKind::HardFault, "process stack is not in use"));
        }
        if self.active.last() != Some(&self.ipsr) {
            return Err(self.fault(FaultKind::HardFault, "ipsr does not match the active exception"));
        }
        let outer = self.active.get(self.active.len().wrapping_sub(2)).copied().unwrap_or(0);
        if ret.to_thread != (outer == 0) {
            return Err(self.fault(FaultKind::HardFault, "exception return to the wrong mode"));
        }
        let state = if ret.secure_frame { SecState::Secure } else { SecState::NonSecure };
        let base = match state {
            SecState::NonSecure => self.msp_ns,
            SecState::Secure => self.msp_s,
        };
        let mut words = [0u32; 8];
        for (i, w) in words.iter_mut().enumerate() {
            *w = self.load_u32_as(state, base + 4 * i as u32).map_err(|f| Fault {
                kind: FaultKind::HardFault,
                detail: format!("unstacking error: {}", f.detail),
                ..f
            })?;
        }
        let xpsr = words[frame::XPSR];
        if xpsr & XPSR_IPSR_MASK != outer {
            return Err(self.fault(FaultKind::HardFault, "stacked xpsr does not match the returning context"));
        }
        let pc = words[frame::PC];
        if is_exc_return(pc) {
            return Err(self.fault(FaultKind::HardFault, format!("stacked pc {pc:#010x} is an exception return value")));
        }
        self.record(self.pc(), TraceEvent::ExceptionReturn(erv));
        self.active.pop();
        self.ipsr = outer;
        self.security = state;
        let pad = if xpsr & XPSR_FRAME_PAD != 0 { 4 } else { 0 };
        self.set_sp(base + FRAME_BYTES + pad);
        self.regs[0] = words[frame::R0];
        self.regs[1] = words[frame::R1];
        self.regs[2] = words[frame::R2];
        self.regs[3] = words[frame::R3];
        self.regs[12] = words[frame::R12];
        self.regs[14] = words[frame::LR];
        self.regs[15] = pc & !1;
        self.flag_n = xpsr & XPSR_N != 0;
        self.flag_z = xpsr & XPSR_Z != 0;
        self.stats.exception_returns += 1;
        self.cycles += cost::EXCEPTION_RETURN;
        Ok(())
    }

    /// Host-side call into secure code through the gateway veneer at `veneer`
    /// (`sg` followed by `bxns lr`). The body runs in Secure state.
    pub fn secure_gateway_call<R>(
        &mut self,
        veneer: u32,
        body: impl FnOnce(&mut Machine) -> Result<R, Fault>,
    ) -> Result<R, Fault> {
        let caller = self.security;
        let entry = check_access(caller, &self.regions, veneer, 2, AccessKind::Fetch);
        let is_gateway = matches!(entry, Ok(Access::GatewayOnly { .. }));
        if !is_gateway || self.peek_u16(veneer) != Some(isa::SG_HALFWORD) {
            return Err(self.fault(FaultKind::SecureFault, format!("{veneer:#010x} is not a secure gateway")));
        }
        self.security = SecState::Secure;
        self.cycles += cost::SG;
        let result = body(self);
        let exit = self.peek_u16(veneer + 2).map(isa::decode16);
        if !matches!(exit, Some(Instruction::Bxns { rm: Register::LR })) {
            return Err(self.fault(FaultKind::SecureFault, "veneer does not return with bxns lr"));
        }
        self.security = caller;
        self.cycles += cost::BXNS;
        result
    }

    // ---- execution -------------------------------------------------------------------------

    pub fn step(&mut self, host: &mut dyn HostHandler) -> Result<(), Stop> {
        if let Some(stop) = &self.stop {
            return Err(stop.clone());
        }
        let result = self.step_inner(host);
        if let Err(stop) = &result {
            self.stop = Some(stop.clone());
        }
        result
    }

    /// Steps until the machine stops or `budget` cycles have elapsed.
    pub fn run(&mut self, host: &mut dyn HostHandler, budget: u64) -> RunEnd {
        while self.stop.is_none() {
            if self.cycles >= budget {
                return RunEnd::BudgetExhausted;
            }
            let _ = self.step(host);
        }
        RunEnd::Stopped
    }

    fn step_inner(&mut self, host: &mut dyn HostHandler) -> Result<(), Stop> {
        if let Some(exc) = self.next_pending() {
            self.raise_exception(exc, self.pc())?;
            return Ok(());
        }
        let pc = self.pc();
        if self.ipsr != 0 && host.claims(pc, self.ipsr) {
            self.record(pc, TraceEvent::HostEntry);
            self.stats.host_entries += 1;
            return host.on_entry(self, pc);
        }
        let (instr, width, gateway) = self.fetch(pc)?;
        self.record(pc, TraceEvent::Exec(instr));
        self.stats.instructions += 1;
        match self.execute(instr, pc, width, gateway) {
            Err(Stop::Fault(mut f)) => {
                // Faults are reported against the instruction that raised them.
                f.pc = pc;
                self.regs[15] = pc;
                Err(Stop::Fault(f))
            }
            other => other,
        }
    }

    fn fetch(&self, pc: u32) -> Result<(Instruction, u32, bool), Fault> {
        let access = check_access(self.security, &self.regions, pc, 2, AccessKind::Fetch)
            .map_err(|f| self.access_fault(f, pc, AccessKind::Fetch))?;
        let first = self.peek_u16(pc).expect("checked fetch");
        let mut bytes = first.to_le_bytes().to_vec();
        if first & 0xF800 == 0xF000 {
            check_access(self.security, &self.regions, pc + 2, 2, AccessKind::Fetch)
                .map_err(|f| self.access_fault(f, pc + 2, AccessKind::Fetch))?;
            bytes.extend_from_slice(self.peek(pc + 2, 2).expect("checked fetch"));
        }
        let (instr, width) = isa::decode(&bytes, 0).map_err(|e| self.fault(FaultKind::UsageFault, e.to_string()))?;
        let gateway = matches!(access, Access::GatewayOnly { .. });
        if gateway && instr != Instruction::Sg {
            return Err(self.fault(FaultKind::SecureFault, "non-secure entry to NSC memory without sg"));
        }
        Ok((instr, width, gateway))
    }

    fn set_nz(&mut self, value: u32) {
        self.flag_n = value & 0x8000_0000 != 0;
        self.flag_z = value == 0;
    }

    /// Interworking branch used by `bx`, `pop {pc}` and `bxns`.
    fn branch_exchange(&mut self, value: u32) -> Result<(), Stop> {
        if is_exc_return(value) {
            if self.ipsr == 0 {
                return Err(self
                    .fault(FaultKind::HardFault, format!("exception return value {value:#010x} loaded in Thread mode"))
                    .into());
            }
            return Ok(self.exception_return(value)?);
        }
        if value & 1 == 0 {
            return Err(self
                .fault(FaultKind::UsageFault, format!("branch to {value:#010x} leaves Thumb state"))
                .into());
        }
        self.regs[15] = value & !1;
        self.cycles += cost::BRANCH_REFILL;
        Ok(())
    }

    fn execute(&mut self, instr: Instruction, pc: u32, width: u32, gateway: bool) -> Result<(), Stop> {
        use Instruction::*;
        let next = pc + width;
        let operand = |m: &Machine, r: Register| if r == Register::PC { pc + 4 } else { m.reg(r) };
        self.cycles += cost::INSTRUCTION;
        self.regs[15] = next;
        match instr {
            MovImm { rd, imm } => {
                self.set_reg(rd, imm as u32);
                self.set_nz(imm as u32);
            }
            CmpImm { rn, imm } => {
                let v = self.reg(rn).wrapping_sub(imm as u32);
                self.set_nz(v);
            }
            AddImm { rdn, imm } => {
                let v = self.reg(rdn).wrapping_add(imm as u32);
                self.set_reg(rdn, v);
                self.set_nz(v);
            }
            SubImm { rdn, imm } => {
                let v = self.reg(rdn).wrapping_sub(imm as u32);
                self.set_reg(rdn, v);
                self.set_nz(v);
            }
            AddReg { rd, rn, rm } => {
                let v = self.reg(rn).wrapping_add(self.reg(rm));
                self.set_reg(rd, v);
                self.set_nz(v);
            }
            MovReg { rd, rm } => {
                let v = operand(self, rm);
                self.set_reg(rd, v);
            }
            LdrImm { rt, rn, offset } => {
                let v = self.load_u32(self.reg(rn).wrapping_add(offset as u32))?;
                self.set_reg(rt, v);
                self.cycles += cost::PER_REGISTER;
            }
            StrImm { rt, rn, offset } => {
                self.store_u32(self.reg(rn).wrapping_add(offset as u32), self.reg(rt))?;
                self.cycles += cost::PER_REGISTER;
            }
            LdrLit { rt, offset } => {
                let v = self.load_u32(((pc + 4) & !3) + offset as u32)?;
                self.set_reg(rt, v);
                self.cycles += cost::PER_REGISTER;
            }
            Push { regs, lr } => {
                let count = regs.len() + lr as u32;
                let base = self.sp().wrapping_sub(4 * count);
                let mut addr = base;
                for r in regs.iter() {
                    self.store_u32(addr, self.reg(r))?;
                    addr += 4;
                }
                if lr {
                    self.store_u32(addr, self.regs[14])?;
                }
                self.set_sp(base);
                self.cycles += cost::PER_REGISTER * count as u64;
            }
            Pop { regs, pc: load_pc } => {
                let count = regs.len() + load_pc as u32;
                let mut addr = self.sp();
                let mut values = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    values.push(self.load_u32(addr)?);
                    addr += 4;
                }
                for (r, v) in regs.iter().zip(&values) {
                    self.set_reg(r, *v);
                }
                self.set_sp(addr);
                self.cycles += cost::PER_REGISTER * count as u64;
                if load_pc {
                    self.branch_exchange(values[count as usize - 1])?;
                }
            }
            B { .. } => {
                self.regs[15] = instr.branch_target(pc).unwrap();
                self.cycles += cost::BRANCH_REFILL;
            }
            BCond { cond, .. } => {
                if cond.holds(self.flag_n, self.flag_z) {
                    self.regs[15] = instr.branch_target(pc).unwrap();
                    self.cycles += cost::BRANCH_REFILL;
                }
            }
            BlImm { .. } => {
                self.regs[14] = next | 1;
                self.regs[15] = instr.branch_target(pc).unwrap();
                self.cycles += cost::WIDE_EXTRA + cost::BRANCH_REFILL;
            }
            BlxReg { rm } => {
                let target = operand(self, rm);
                if is_exc_return(target) {
                    return Err(self.fault(FaultKind::HardFault, "blx to an exception return value").into());
                }
                self.regs[14] = next | 1;
                self.branch_exchange(target)?;
            }
            BxReg { rm } => {
                let target = operand(self, rm);
                self.branch_exchange(target)?;
            }
            Bxns { rm } => {
                if self.security != SecState::Secure {
                    return Err(self.fault(FaultKind::UsageFault, "bxns in Non-secure state").into());
                }
                let target = operand(self, rm);
                self.security = SecState::NonSecure;
                self.regs[15] = target & !1;
                self.cycles += cost::BXNS - cost::INSTRUCTION;
            }
            Sg => {
                if gateway {
                    self.security = SecState::Secure;
                }
            }
            Svc { .. } => self.raise_exception(EXC_SVC, next)?,
            Nop => {}
            Halt => {
                self.regs[15] = pc;
                return Err(Stop::Halted);
            }
            Undefined { halfword } => {
                self.regs[15] = pc;
                return Err(self.fault(FaultKind::UsageFault, format!("undefined instruction {halfword:#06x}")).into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{encode, RegList};
    use crate::memory::{Perms, Security};

    const CODE: u32 = 0x8000;
    const RAM: u32 = 0x2000_0000;
    const SECURE: u32 = 0x3000_0000;
    const NSC: u32 = 0x1000_0000;

    fn regions() -> Vec<MemoryRegion> {
        let r =
            |name: &str, base, size, perms, security| MemoryRegion { name: name.into(), base, size, perms, security };
        vec![
            r("flash", CODE, 0x1000, Perms::RX, Security::NonSecure),
            r("sram", RAM, 0x1000, Perms::RW, Security::NonSecure),
            r("ssram", SECURE, 0x100, Perms::RW, Security::Secure),
            r("nsc", NSC, 0x10, Perms::RX, Security::Nsc),
            r("out", 0x4000_0000, 4, Perms::W, Security::NonSecure),
        ]
    }

    /// Machine with vectors at 0x8000 (32 entries), code at 0x8100 and every
    /// used vector pointing at a `halt` at 0x8400 unless overridden.
    fn machine(code: &[Instruction]) -> Machine {
        let mut m = Machine::new(regions(), CODE, 32);
        m.poke(CODE, &(RAM + 0x1000).to_le_bytes());
        m.poke(CODE + 4, &(0x8101u32).to_le_bytes());
        for exc in 2..32 {
            m.poke(CODE + 4 * exc, &0x8401u32.to_le_bytes());
        }
        m.poke(0x8400, &encode(&Instruction::Halt).unwrap());
        let mut addr = 0x8100;
        for i in code {
            let bytes = encode(i).unwrap();
            m.poke(addr, &bytes);
            addr += bytes.len() as u32;
        }
        m.poke(NSC, &encode(&Instruction::Sg).unwrap());
        m.poke(NSC + 2, &encode(&Instruction::Bxns { rm: Register::LR }).unwrap());
        m.set_output_port(0x4000_0000);
        m.reset().unwrap();
        m
    }

    fn run(m: &mut Machine) -> Stop {
        assert_eq!(m.run(&mut NoHost, 100_000), RunEnd::Stopped);
        m.stopped().cloned().unwrap()
    }

    fn mov(rd: Register, imm: u8) -> Instruction {
        Instruction::MovImm { rd, imm }
    }

    #[test]
    fn svc_stacks_frame_at_table_offsets() {
        let mut m = machine(&[Instruction::Svc { comment: 1 }]);
        for (i, v) in [10, 11, 12, 13].iter().enumerate() {
            m.set_reg(Register::new(i as u8).unwrap(), *v);
        }
        m.set_reg(Register::R12, 0xCC);
        m.set_reg(Register::LR, 0x8123);
        let sp0 = m.sp();
        m.step(&mut NoHost).unwrap();
        assert_eq!(m.mode(), Mode::Handler);
        assert_eq!(m.ipsr(), EXC_SVC);
        assert_eq!(m.reg(Register::LR), ERV_THREAD_MAIN);
        assert_eq!(m.pc(), 0x8400);
        let sp = m.sp();
        assert_eq!(sp, sp0 - 32);
        let words: Vec<u32> = (0..8).map(|i| m.peek_u32(sp + 4 * i).unwrap()).collect();
        assert_eq!(words, vec![10, 11, 12, 13, 0xCC, 0x8123, 0x8102, XPSR_THUMB]);
        assert_eq!(m.cycles(), 1 + cost::EXCEPTION_ENTRY);
    }

    #[test]
    fn frame_is_eight_byte_aligned_with_pad_flag() {
        let mut m = machine(&[Instruction::Push { regs: RegList(1), lr: false }, Instruction::Svc { comment: 0 }]);
        m.step(&mut NoHost).unwrap();
        let sp0 = m.sp();
        assert_eq!(sp0 % 8, 4);
        m.step(&mut NoHost).unwrap();
        assert_eq!(m.sp(), (sp0 - 32) & !7);
        let xpsr = m.peek_u32(m.sp() + 28).unwrap();
        assert_ne!(xpsr & XPSR_FRAME_PAD, 0);
        m.exception_return(m.reg(Register::LR)).unwrap();
        assert_eq!(m.sp(), sp0);
    }

    #[test]
    fn raise_then_return_is_identity() {
        let mut m = machine(&[mov(Register::R0, 0)]);
        for i in 0..13 {
            m.set_reg(Register::new(i).unwrap(), 0x100 + i as u32);
        }
        m.set_reg(Register::LR, 0x8555);
        let before = m.clone();
        m.raise_exception(EXC_IRQ0 + 3, m.pc()).unwrap();
        assert_eq!(m.reg(Register::LR), ERV_THREAD_MAIN);
        m.exception_return(ERV_THREAD_MAIN).unwrap();
        for i in 0..16 {
            let r = Register::new(i).unwrap();
            assert_eq!(m.reg(r), before.reg(r), "{r}");
        }
        assert_eq!((m.msp_ns, m.psp_ns, m.msp_s), (before.msp_ns, before.psp_ns, before.msp_s));
        assert_eq!(m.mode(), Mode::Thread);
        assert_eq!(m.xpsr(), before.xpsr());
    }

    #[test]
    fn nested_exception_uses_handler_erv() {
        let mut m = machine(&[mov(Register::R0, 0)]);
        m.raise_exception(EXC_IRQ0 + 5, 0x8100).unwrap();
        m.raise_exception(EXC_IRQ0 + 1, 0x8402).unwrap();
        assert_eq!(m.reg(Register::LR), ERV_HANDLER);
        assert_eq!(m.active_exceptions(), &[21, 17]);
        m.exception_return(ERV_HANDLER).unwrap();
        assert_eq!(m.ipsr(), 21);
        assert_eq!(m.pc(), 0x8402);
        m.exception_return(ERV_THREAD_MAIN).unwrap();
        assert_eq!(m.mode(), Mode::Thread);
        assert_eq!(m.pc(), 0x8100);
    }

    #[test]
    fn erv_to_wrong_mode_hard_faults() {
        let mut m = machine(&[mov(Register::R0, 0)]);
        m.raise_exception(EXC_IRQ0, 0x8100).unwrap();
        let err = m.exception_return(ERV_HANDLER).unwrap_err();
        assert_eq!(err.kind, FaultKind::HardFault);
        let err = m.exception_return(0xF000_0001).unwrap_err();
        assert_eq!(err.kind, FaultKind::HardFault);
    }

    #[test]
    fn pop_erv_in_handler_returns() {
        // Handler at 0x8100 body: push {lr}; pop {pc}
        let mut m = machine(&[
            Instruction::Push { regs: RegList(0), lr: true },
            Instruction::Pop { regs: RegList(0), pc: true },
        ]);
        m.set_pc(0x8200);
        m.raise_exception(EXC_IRQ0, 0x8200).unwrap();
        m.set_pc(0x8100);
        m.step(&mut NoHost).unwrap();
        m.step(&mut NoHost).unwrap();
        assert_eq!(m.mode(), Mode::Thread);
        assert_eq!(m.pc(), 0x8200);
    }

    #[test]
    fn tampered_stored_pc_resumes_there() {
        let mut m = machine(&[mov(Register::R0, 0)]);
        m.raise_exception(EXC_IRQ0, 0x8100).unwrap();
        let sp = m.sp();
        m.poke(sp + 0x18, &0x8230u32.to_le_bytes());
        m.exception_return(ERV_THREAD_MAIN).unwrap();
        assert_eq!(m.pc(), 0x8230);
    }

    #[test]
    fn stored_erv_in_frame_hard_faults() {
        let mut m = machine(&[mov(Register::R0, 0)]);
        m.raise_exception(EXC_IRQ0, 0x8100).unwrap();
        let sp = m.sp();
        m.poke(sp + 0x18, &ERV_HANDLER.to_le_bytes());
        assert_eq!(m.exception_return(ERV_THREAD_MAIN).unwrap_err().kind, FaultKind::HardFault);
    }

    #[test]
    fn erv_in_thread_mode_hard_faults() {
        let mut m = machine(&[Instruction::BxReg { rm: Register::R0 }]);
        m.set_reg(Register::R0, ERV_THREAD_MAIN);
        match run(&mut m) {
            Stop::Fault(f) => assert_eq!(f.kind, FaultKind::HardFault),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn branch_into_secure_memory_is_a_secure_fault() {
        let mut m = machine(&[Instruction::BxReg { rm: Register::R0 }]);
        m.set_reg(Register::R0, SECURE | 1);
        match run(&mut m) {
            Stop::Fault(f) => assert_eq!(f.kind, FaultKind::SecureFault),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gateway_round_trip() {
        let mut m = machine(&[Instruction::BlxReg { rm: Register::R0 }, Instruction::Halt]);
        m.set_reg(Register::R0, NSC | 1);
        m.step(&mut NoHost).unwrap();
        m.step(&mut NoHost).unwrap();
        assert_eq!(m.security(), SecState::Secure);
        m.step(&mut NoHost).unwrap();
        assert_eq!(m.security(), SecState::NonSecure);
        assert_eq!(m.pc(), 0x8102);
        assert_eq!(run(&mut m), Stop::Halted);
    }

    #[test]
    fn nsc_without_sg_is_a_secure_fault() {
        let mut m = machine(&[Instruction::BxReg { rm: Register::R0 }]);
        m.set_reg(Register::R0, (NSC + 2) | 1);
        match run(&mut m) {
            Stop::Fault(f) => assert_eq!(f.kind, FaultKind::SecureFault),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ns_store_to_secure_ram_faults() {
        let mut m = machine(&[Instruction::StrImm { rt: Register::R0, rn: Register::R1, offset: 0 }]);
        m.set_reg(Register::R1, SECURE);
        m.set_reg(Register::R0, 0xDEAD);
        let before = m.secure_snapshot();
        match run(&mut m) {
            Stop::Fault(f) => assert_eq!(f.kind, FaultKind::SecureFault),
            other => panic!("{other:?}"),
        }
        assert_eq!(m.secure_snapshot(), before);
    }

    #[test]
    fn code_is_not_writable() {
        let mut m = machine(&[Instruction::StrImm { rt: Register::R0, rn: Register::R1, offset: 0 }]);
        m.set_reg(Register::R1, CODE + 0x200);
        match run(&mut m) {
            Stop::Fault(f) => assert_eq!(f.kind, FaultKind::MemFault),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn output_port_appends() {
        let mut m = machine(&[
            mov(Register::R0, 0x41),
            Instruction::LdrLit { rt: Register::R1, offset: 4 },
            Instruction::StrImm { rt: Register::R0, rn: Register::R1, offset: 0 },
            Instruction::Halt,
            Instruction::Nop,
            Instruction::Nop,
        ]);
        // literal at align4(0x8102 + 4) + 4 = 0x8108
        m.poke(0x8108, &0x4000_0000u32.to_le_bytes());
        assert_eq!(run(&mut m), Stop::Halted);
        assert_eq!(m.output(), &[0x41, 0, 0, 0]);
    }

    #[test]
    fn cycle_model() {
        // movs(1) + bl(1+1+2) + bx lr(1+2) + push 2 regs(1+2) + pop {r4,pc}... halts
        let mut m = machine(&[
            Instruction::BlImm { offset: 2 },        // 0x8100 -> 0x8106
            Instruction::Halt,                       // 0x8104
            Instruction::BxReg { rm: Register::LR }, // 0x8106
        ]);
        m.step(&mut NoHost).unwrap();
        assert_eq!(m.cycles(), 4);
        assert_eq!(m.pc(), 0x8106);
        m.step(&mut NoHost).unwrap();
        assert_eq!(m.cycles(), 7);
        assert_eq!(m.pc(), 0x8104);
    }

    #[test]
    fn pending_irq_preempts_thread_and_higher_priority_nests() {
        let mut m = machine(&[Instruction::Nop, Instruction::Nop]);
        m.set_pending(EXC_IRQ0 + 4).unwrap();
        m.step(&mut NoHost).unwrap();
        assert_eq!(m.ipsr(), 20);
        m.set_pending(EXC_IRQ0 + 6).unwrap();
        m.set_pending(EXC_IRQ0 + 2).unwrap();
        m.step(&mut NoHost).unwrap();
        assert_eq!(m.ipsr(), 18);
        assert_eq!(m.pending().collect::<Vec<_>>(), vec![22]);
    }

    #[test]
    fn undefined_is_usage_fault() {
        let mut m = machine(&[Instruction::Undefined { halfword: 0xDE00 }]);
        match run(&mut m) {
            Stop::Fault(f) => assert_eq!(f.kind, FaultKind::UsageFault),
            other => panic!("{other:?}"),
        }
        assert_eq!(m.pc(), 0x8100);
    }

    #[test]
    fn erv_encoding_variants() {
        for to_thread in [false, true] {
            for secure_frame in [false, true] {
                let r = ExcReturn { to_thread, process_stack: false, secure_frame };
                assert!(is_exc_return(r.encode()));
                assert_eq!(ExcReturn::decode(r.encode()), Some(r));
            }
        }
        assert_eq!(ExcReturn::decode(0xFFFF_FFE1), None);
    }
}
