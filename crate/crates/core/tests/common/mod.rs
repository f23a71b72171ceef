#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mcfi::asm::assemble;
use mcfi::harness::attack::AttackScript;
use mcfi::harness::runner::{run, Run, RunOptions};
use mcfi::isa::{decode, Instruction, Register};
use mcfi::machine::{TraceEvent, TraceRecord, EXC_SVC};
use mcfi::manifest::{AddrRange, FirmwareImage};
use mcfi::monitor::MonitorEvent;
use mcfi::rewriter::{instrument_image, Instrumented};

pub const FIXTURES: &[&str] =
    &["callback", "calls", "dense", "frametamper", "irqcount", "overflow", "recursion", "sparse", "straight"];

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn load(name: &str) -> FirmwareImage {
    let path = fixture_dir().join(format!("{name}.s"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assemble(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn instrumented(name: &str) -> FirmwareImage {
    instrument_image(&load(name)).unwrap_or_else(|e| panic!("{name}: {e}")).image
}

/// The fixture's interrupt schedule, empty when it has none.
pub fn schedule(name: &str) -> AttackScript {
    let path = fixture_dir().join(format!("{name}.irq"));
    match std::fs::read_to_string(path) {
        Ok(text) => text.parse().unwrap(),
        Err(_) => AttackScript::default(),
    }
}

pub fn script(text: &str) -> AttackScript {
    text.parse().unwrap_or_else(|e| panic!("{text}: {e}"))
}

pub fn run_with(image: &FirmwareImage, script: &AttackScript) -> Run {
    run(image, script, &RunOptions::default()).unwrap()
}

pub fn traced(image: &FirmwareImage, script: &AttackScript) -> Run {
    run(image, script, &RunOptions { trace: true, ..RunOptions::default() }).unwrap()
}

pub fn sym(image: &FirmwareImage, name: &str) -> u32 {
    image.manifest.symbol(name).unwrap_or_else(|| panic!("no symbol {name}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackOp {
    Push(u32),
    Pop(u32),
}

/// Call/return stack an observer would keep for an uninstrumented trace:
/// calls push their link value, returns pop the address control actually
/// reached, interrupts push the interrupted pc and exception returns pop
/// the pc they resume at. Calls and returns outside main are not mediated
/// and are skipped.
pub fn reference_ops(trace: &[TraceRecord], image: &FirmwareImage) -> Vec<StackOp> {
    let mut ops = Vec::new();
    for (i, r) in trace.iter().enumerate() {
        let next = trace.get(i + 1);
        if matches!(r.event, TraceEvent::Exec(_)) && !image.manifest.in_main(r.pc) {
            continue;
        }
        match r.event {
            TraceEvent::Exec(Instruction::BlImm { .. }) => ops.push(StackOp::Push((r.pc + 4) | 1)),
            TraceEvent::Exec(Instruction::BlxReg { .. }) => ops.push(StackOp::Push((r.pc + 2) | 1)),
            TraceEvent::Exec(Instruction::BxReg { rm }) if rm == Register::LR => {
                if let Some(n) = next.filter(|n| !matches!(n.event, TraceEvent::ExceptionReturn(_))) {
                    ops.push(StackOp::Pop(n.pc | 1));
                }
            }
            TraceEvent::Exec(Instruction::Pop { pc: true, .. }) => {
                if let Some(n) = next.filter(|n| !matches!(n.event, TraceEvent::ExceptionReturn(_))) {
                    ops.push(StackOp::Pop(n.pc | 1));
                }
            }
            TraceEvent::ExceptionEntry(exc) if exc != EXC_SVC => ops.push(StackOp::Push(r.pc)),
            TraceEvent::ExceptionReturn(_) => {
                if let Some(n) = next {
                    ops.push(StackOp::Pop(n.pc));
                }
            }
            _ => {}
        }
    }
    ops
}

pub fn monitor_ops(events: &[MonitorEvent]) -> Vec<StackOp> {
    events
        .iter()
        .filter_map(|e| match *e {
            MonitorEvent::Call { ret: Some(r), .. } => Some(StackOp::Push(r)),
            MonitorEvent::Return { value, .. } => Some(StackOp::Pop(value)),
            MonitorEvent::ExceptionEntry { marker, .. } => Some(StackOp::Push(marker)),
            MonitorEvent::ExceptionReturn { marker, .. } => Some(StackOp::Pop(marker)),
            _ => None,
        })
        .collect()
}

/// Replays `ops` on a plain stack, failing on a mismatched or missing pop.
pub fn replay(ops: &[StackOp]) -> Result<Vec<u32>, String> {
    let mut stack = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        match *op {
            StackOp::Push(v) => stack.push(v),
            StackOp::Pop(v) => match stack.pop() {
                Some(top) if top == v => {}
                Some(top) => return Err(format!("op {i}: popped {v:#x}, top was {top:#x}")),
                None => return Err(format!("op {i}: pop {v:#x} on empty stack")),
            },
        }
    }
    Ok(stack)
}

/// Plain linear sweep of the main ranges, stepping over literal pools.
pub fn sweep(image: &FirmwareImage) -> Vec<(u32, Instruction)> {
    let mut out = Vec::new();
    for range in &image.manifest.main {
        let mut addr = range.base;
        while (addr as u64) < range.end() {
            if let Some(pool) = image.manifest.pools.iter().find(|p| p.contains(addr)) {
                addr = pool.end() as u32;
                continue;
            }
            let bytes = image.slice(AddrRange::new(addr, (range.end() - addr as u64) as u32)).unwrap();
            let (instr, width) = decode(bytes, 0).unwrap();
            out.push((addr, instr));
            addr += width;
        }
    }
    out
}

pub fn allowed_diff(image: &FirmwareImage, sites: &[(u32, u32)], addr: u32) -> bool {
    let m = &image.manifest;
    let vectors = m.vectors.unwrap();
    sites.iter().any(|&(a, w)| addr >= a && addr < a + w)
        || (addr >= vectors.base && addr < vectors.base + 4 * vectors.count)
        || m.reserves.iter().any(|r| r.range.contains(addr))
}

/// Changed bytes outside rewritten sites, the vector table and the reserves.
pub fn unexpected_diffs(original: &FirmwareImage, out: &Instrumented) -> Vec<u32> {
    let sites: Vec<(u32, u32)> = out.report.sites.iter().map(|s| (s.addr, s.original.width())).collect();
    original
        .bytes
        .iter()
        .zip(&out.image.bytes)
        .enumerate()
        .map(|(i, _)| original.base() + i as u32)
        .filter(|&addr| {
            let i = (addr - original.base()) as usize;
            original.bytes[i] != out.image.bytes[i] && !allowed_diff(original, &sites, addr)
        })
        .collect()
}
