//! Loads an image into a machine, attaches the monitor when the image is
//! instrumented, drives the attack script and collects a report.

use std::fmt;

use thiserror::Error;

use crate::diag::{Fault, Stop, Violation};
use crate::harness::attack::{Action, AttackScript, Operand, Trigger};
use crate::isa::{classify, Instruction};
use crate::machine::{HostHandler, Machine, NoHost, EXC_IRQ0};
use crate::manifest::{reserved, tables, FirmwareImage};
use crate::memory::SecState;
use crate::monitor::{Monitor, MonitorError, MonitorOptions};
use crate::rewriter::scan_main;
use crate::tables::{DispatchClass, DispatchTable};

pub const DEFAULT_BUDGET: u64 = 5_000_000;
/// Name of the word-wide output port region.
pub const OUTPUT_REGION: &str = "out";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error("boot failed: {0}")]
    Boot(Fault),
    #[error("image has no vector table")]
    NoVectors,
    #[error("attack script names unknown symbol `{0}`")]
    UnknownSymbol(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Violation(Violation),
    Fault(Fault),
    BudgetExhausted,
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::Violation(_) => "cfi-violation",
            Outcome::Fault(_) => "fault",
            Outcome::BudgetExhausted => "budget-exhausted",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Completed => 0,
            Outcome::Violation(_) => 10,
            Outcome::Fault(_) => 11,
            Outcome::BudgetExhausted => 12,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Violation(v) => write!(f, "cfi-violation ({v})"),
            Outcome::Fault(x) => write!(f, "fault ({x})"),
            o => f.write_str(o.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub budget: u64,
    pub trace: bool,
    pub monitor: MonitorOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { budget: DEFAULT_BUDGET, trace: false, monitor: MonitorOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub outcome: Outcome,
    pub instrumented: bool,
    pub cycles: u64,
    pub instructions: u64,
    /// Monitor invocations.
    pub traps: u64,
    /// svc exceptions counted by the machine.
    pub svc_entries: u64,
    pub ratio: f64,
    pub output: Vec<u8>,
    pub tables: Vec<(String, u32)>,
    pub shadow_max_depth: u32,
    /// Attack steps that fired, with the cycle they fired at.
    pub fired: Vec<(u64, String)>,
}

impl RunReport {
    /// Output log as little-endian words.
    pub fn output_words(&self) -> Vec<u32> {
        self.output.chunks(4).map(|c| c.iter().rev().fold(0, |acc, b| acc << 8 | *b as u32)).collect()
    }
}

/// Same directive style as the manifest.
impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "outcome {}", self.outcome.name())?;
        match &self.outcome {
            Outcome::Violation(v) => writeln!(f, "violation {v}")?,
            Outcome::Fault(x) => writeln!(f, "fault {x}")?,
            _ => {}
        }
        writeln!(f, "instrumented {}", self.instrumented)?;
        writeln!(f, "cycles {}", self.cycles)?;
        writeln!(f, "instructions {}", self.instructions)?;
        writeln!(f, "traps {}", self.traps)?;
        writeln!(f, "svc-entries {}", self.svc_entries)?;
        writeln!(f, "ratio {:.6}", self.ratio)?;
        writeln!(f, "shadow-max-depth {}", self.shadow_max_depth)?;
        for (name, size) in &self.tables {
            writeln!(f, "table-bytes {name} {size}")?;
        }
        let words: Vec<String> = self.output_words().iter().map(|w| format!("{w:x}")).collect();
        writeln!(f, "output {}", words.join(" "))?;
        for (cycle, step) in &self.fired {
            writeln!(f, "fired {cycle} {step}")?;
        }
        Ok(())
    }
}

pub struct Run {
    pub report: RunReport,
    pub machine: Machine,
    pub monitor: Option<Monitor>,
}

/// Rewritten (or rewritable) sites over decoded main-program instructions,
/// counted on the original layout: a direct-call site is one instruction
/// whether it holds `bl` or `svc` plus padding.
pub fn instrumentation_ratio(image: &FirmwareImage) -> f64 {
    let Ok(decoded) = scan_main(image) else { return 0.0 };
    let direct_comment = image
        .manifest
        .table(tables::DISPATCH)
        .and_then(|r| image.slice(r))
        .and_then(|b| DispatchTable::from_bytes(b).ok())
        .and_then(|d| d.comment_for(&DispatchClass::DirectCall));
    let (mut sites, mut total) = (0usize, 0usize);
    let mut skip_padding = false;
    for (_, i) in &decoded {
        if std::mem::take(&mut skip_padding) && *i == Instruction::Nop {
            continue;
        }
        total += 1;
        match i {
            Instruction::Svc { comment } => {
                sites += 1;
                skip_padding = Some(*comment) == direct_comment;
            }
            i if classify(i).is_mediated() => sites += 1,
            _ => {}
        }
    }
    if total == 0 {
        0.0
    } else {
        sites as f64 / total as f64
    }
}

/// Fresh machine with the image loaded and reset; monitor attached and
/// installed when the image is instrumented.
pub fn boot(image: &FirmwareImage, options: &RunOptions) -> Result<(Machine, Option<Monitor>), RunError> {
    let m = &image.manifest;
    let vectors = m.vectors.ok_or(RunError::NoVectors)?;
    let mut machine = Machine::new(m.regions.clone(), vectors.base, vectors.count);
    // The image may span several adjacent regions.
    let (base, end) = (image.base() as u64, image.range().end());
    for r in m.regions.iter().filter(|r| (r.base as u64) < end && base < r.end()) {
        let lo = base.max(r.base as u64);
        let hi = end.min(r.end());
        let bytes = &image.bytes[(lo - base) as usize..(hi - base) as usize];
        machine.poke(lo as u32, bytes).expect("region is mapped");
    }
    if let Some(out) = m.region(OUTPUT_REGION) {
        machine.set_output_port(out.base);
    }
    if options.trace {
        machine.enable_trace();
    }
    let monitor = if m.instrumented {
        let mon = Monitor::from_image(image, options.monitor)?;
        mon.install(&mut machine);
        Some(mon)
    } else {
        None
    };
    machine.reset().map_err(RunError::Boot)?;
    Ok((machine, monitor))
}

/// Writable Non-secure data memory, with the `stack` reserve zeroed: frames
/// and spilled registers below the final sp legitimately differ between
/// instrumented and uninstrumented runs.
pub fn ns_data_snapshot(machine: &Machine, image: &FirmwareImage) -> Vec<(String, Vec<u8>)> {
    let stack = image.manifest.reserve(reserved::STACK);
    machine
        .regions()
        .iter()
        .filter(|r| !r.security.is_secure() && r.perms.write && r.perms.read)
        .map(|r| {
            let mut bytes = machine.region_bytes(&r.name).unwrap().to_vec();
            if let Some(s) = stack {
                for (i, b) in bytes.iter_mut().enumerate() {
                    if s.contains(r.base + i as u32) {
                        *b = 0;
                    }
                }
            }
            (r.name.clone(), bytes)
        })
        .collect()
}

fn apply(machine: &mut Machine, image: &FirmwareImage, action: &Action) -> Result<(), Fault> {
    let sp = machine.sp();
    let resolve = |o: &Operand| o.resolve(&image.manifest, sp).expect("symbols checked before the run");
    match action {
        Action::Write { width, addr, value } => {
            let bytes = resolve(value).to_le_bytes();
            machine.store_as(SecState::NonSecure, resolve(addr), &bytes[..*width as usize])
        }
        Action::SetReg { reg, value } => {
            machine.set_reg(*reg, resolve(value));
            Ok(())
        }
        Action::RaiseIrq(n) => machine.set_pending(EXC_IRQ0 + n),
    }
}

fn check_symbols(image: &FirmwareImage, script: &AttackScript) -> Result<(), RunError> {
    let known = |name: &str| image.manifest.symbol(name).is_some();
    for step in &script.steps {
        let mut names = Vec::new();
        match &step.trigger {
            Trigger::AtSymbol(s) => names.push(s.as_str()),
            Trigger::AtPc(Operand::Symbol { name, .. }) => names.push(name.as_str()),
            _ => {}
        }
        match &step.action {
            Action::Write { addr, value, .. } => names.extend([addr, value].into_iter().filter_map(|o| match o {
                Operand::Symbol { name, .. } => Some(name.as_str()),
                _ => None,
            })),
            Action::SetReg { value: Operand::Symbol { name, .. }, .. } => names.push(name),
            _ => {}
        }
        if let Some(bad) = names.into_iter().find(|n| !known(n)) {
            return Err(RunError::UnknownSymbol(bad.to_string()));
        }
    }
    Ok(())
}

pub fn run(image: &FirmwareImage, script: &AttackScript, options: &RunOptions) -> Result<Run, RunError> {
    check_symbols(image, script)?;
    let (mut machine, mut monitor) = boot(image, options)?;
    let mut pending: Vec<usize> = (0..script.steps.len()).collect();
    let mut fired = Vec::new();
    let outcome = loop {
        if let Some(stop) = machine.stopped() {
            break match stop.clone() {
                Stop::Halted => Outcome::Completed,
                Stop::Fault(f) => Outcome::Fault(f),
                Stop::Violation(v) => Outcome::Violation(v),
            };
        }
        if machine.cycles() >= options.budget {
            break Outcome::BudgetExhausted;
        }
        let (pc, cycles) = (machine.pc(), machine.cycles());
        let mut attack_fault = None;
        pending.retain(|&i| {
            let step = &script.steps[i];
            let due = match &step.trigger {
                Trigger::AtCycle(n) => cycles >= *n,
                Trigger::AtPc(a) => a.resolve(&image.manifest, 0) == Some(pc),
                Trigger::AtSymbol(s) => image.manifest.symbol(s) == Some(pc),
            };
            if due && attack_fault.is_none() {
                fired.push((cycles, step.to_string()));
                if let Err(f) = apply(&mut machine, image, &step.action) {
                    attack_fault = Some(f);
                }
            }
            !due
        });
        if let Some(f) = attack_fault {
            break Outcome::Fault(f);
        }
        let host: &mut dyn HostHandler = match monitor.as_mut() {
            Some(m) => m,
            None => &mut NoHost,
        };
        let _ = machine.step(host);
    };
    let stats = machine.stats();
    let mon_stats = monitor.as_ref().map(|m| m.stats()).unwrap_or_default();
    let report = RunReport {
        outcome,
        instrumented: image.manifest.instrumented,
        cycles: machine.cycles(),
        instructions: stats.instructions,
        traps: mon_stats.traps,
        svc_entries: stats.svc_entries,
        ratio: instrumentation_ratio(image),
        output: machine.output().to_vec(),
        tables: image.manifest.tables.iter().map(|t| (t.name.clone(), t.range.size)).collect(),
        shadow_max_depth: mon_stats.max_depth,
        fired,
    };
    Ok(Run { report, machine, monitor })
}
