mod common;

use std::fmt::Write as _;

use common::*;
use mcfi::asm::assemble;
use mcfi::harness::runner::{instrumentation_ratio, ns_data_snapshot, Outcome};
use mcfi::isa::{classify, decode, BranchClass, Instruction};
use mcfi::manifest::{tables, FirmwareImage};
use mcfi::rewriter::{instrument_image, scan_main, RewriteError};
use mcfi::tables::{BranchTable, DispatchClass, DispatchTable};
use proptest::prelude::*;

fn check_layout(original: &FirmwareImage) {
    let out = instrument_image(original).unwrap();
    assert_eq!(out.image.bytes.len(), original.bytes.len());
    assert_eq!(out.image.base(), original.base());
    assert_eq!(unexpected_diffs(original, &out), Vec::<u32>::new());
}

fn check_tables(original: &FirmwareImage) {
    let out = instrument_image(original).unwrap();
    let oracle = sweep(original);
    let calls: Vec<(u32, u32)> = oracle
        .iter()
        .filter(|(_, i)| matches!(i, Instruction::BlImm { .. }))
        .map(|(a, i)| (*a, i.branch_target(*a).unwrap()))
        .collect();
    let m = &out.image.manifest;
    let btbl = BranchTable::from_bytes(out.image.slice(m.table(tables::BRANCH).unwrap()).unwrap()).unwrap();
    let records: Vec<(u32, u32)> = btbl.records().iter().map(|r| (r.site, r.destination)).collect();
    assert_eq!(records, calls);
    assert_eq!(m.table(tables::BRANCH).unwrap().size as usize, 8 * calls.len());

    let dispatch = DispatchTable::from_bytes(out.image.slice(m.table(tables::DISPATCH).unwrap()).unwrap()).unwrap();
    let mediated: Vec<_> = oracle.iter().filter(|(_, i)| classify(i).is_mediated()).collect();
    assert_eq!(mediated.len(), out.report.sites.len());
    for (addr, instr) in mediated {
        let Instruction::Svc { comment } =
            decode(out.image.slice(mcfi::manifest::AddrRange::new(*addr, 2)).unwrap(), 0).unwrap().0
        else {
            panic!("site {addr:#x} not rewritten")
        };
        let class = dispatch.get(comment).unwrap().class;
        let expected = match *instr {
            Instruction::BlImm { .. } => DispatchClass::DirectCall,
            Instruction::BlxReg { rm } => DispatchClass::IndirectCall { reg: rm, link: true },
            Instruction::BxReg { rm } if rm.index() == 14 => DispatchClass::ReturnBxLr,
            Instruction::BxReg { rm } => DispatchClass::IndirectCall { reg: rm, link: false },
            Instruction::Pop { regs, .. } => DispatchClass::ReturnPop { regs },
            _ => unreachable!(),
        };
        assert_eq!(class, expected, "site {addr:#x}");
    }
}

fn check_mediation(original: &FirmwareImage) {
    let out = instrument_image(original).unwrap();
    let left: Vec<_> = sweep(&out.image).into_iter().filter(|(_, i)| classify(i).is_mediated()).collect();
    assert!(left.is_empty(), "{left:?}");
    assert_eq!(sweep(&out.image).len(), scan_main(&out.image).unwrap().len());
}

#[test]
fn fixtures_keep_their_layout() {
    for name in FIXTURES {
        check_layout(&load(name));
    }
}

#[test]
fn fixtures_tables_match_a_linear_sweep() {
    for name in FIXTURES {
        check_tables(&load(name));
    }
}

#[test]
fn fixtures_have_no_unmediated_branches() {
    for name in FIXTURES {
        check_mediation(&load(name));
    }
}

#[test]
fn rewriting_is_deterministic() {
    for name in FIXTURES {
        let a = instrument_image(&load(name)).unwrap();
        let b = instrument_image(&load(name)).unwrap();
        assert_eq!(a.image, b.image, "{name}");
        assert_eq!(a.report, b.report, "{name}");
    }
}

#[test]
fn instrumented_images_are_rejected() {
    for name in FIXTURES {
        let once = instrumented(name);
        assert_eq!(instrument_image(&once).unwrap_err(), RewriteError::AlreadyInstrumented, "{name}");
        let mut unflagged = once.clone();
        unflagged.manifest.instrumented = false;
        unflagged.manifest.tables.clear();
        let err = instrument_image(&unflagged);
        if once.bytes == load(name).bytes {
            continue;
        }
        assert!(matches!(err, Err(RewriteError::SvcInMain(_))), "{name}: {err:?}");
    }
}

#[test]
fn ratio_is_the_same_before_and_after() {
    for name in FIXTURES {
        let r = instrument_image(&load(name)).unwrap().report;
        assert_eq!(instrumentation_ratio(&load(name)), r.ratio(), "{name}");
        assert_eq!(instrumentation_ratio(&instrumented(name)), r.ratio(), "{name}");
    }
}

#[test]
fn no_indirect_calls_means_an_empty_call_target_table() {
    let out = instrumented("calls");
    assert_eq!(out.manifest.table(tables::CALL_TARGETS).unwrap().size, 0);
    let out = instrumented("callback");
    assert!(out.manifest.table(tables::CALL_TARGETS).unwrap().size > 0);
}

#[test]
fn calls_leaving_main_are_rejected() {
    let src = HEADER.to_string()
        + "main:\n    bl helper\n    halt\ntick_irq:\n    bx lr\n.section bootstrap\nhelper:\n    bx lr\n"
        + FOOTER;
    let err = instrument_image(&assemble(&src).unwrap()).unwrap_err();
    assert!(matches!(err, RewriteError::CallLeavesMain { .. }), "{err:?}");
}

#[test]
fn mediated_classes_are_all_covered() {
    let seen: std::collections::BTreeSet<String> = FIXTURES
        .iter()
        .flat_map(|n| instrument_image(&load(n)).unwrap().report.sites)
        .map(|s| format!("{:?}", classify(&s.original)))
        .collect();
    for c in [
        BranchClass::DirectCall,
        BranchClass::IndirectCall,
        BranchClass::EffectiveReturnBxLr,
        BranchClass::EffectiveReturnPop,
    ] {
        assert!(seen.contains(&format!("{c:?}")), "{c:?}");
    }
}

const HEADER: &str = "\
.region flash  0x8000 0x1800 rx ns
.region rodata 0x9800 0x400 r ns
.region sram   0x20000000 0x1000 rw ns
.region out    0x40000000 4 w ns
.region nsc    0x10000000 0x20 rx nsc
.region ssram  0x30000000 0x420 rw s
.reserve veneers 0x10000000 0x20
.reserve shadow  0x30000000 0x420
.reserve stack   0x20000800 0x800
.org 0x8000
.vectors 20
.word 0x20001000, reset+1, 0, 0, 0, 0, 0, 0, 0, 0, 0, monitor+1
.word 0, 0, 0, 0, tick_irq+1, 0, 0, 0
.reserve trampolines 0x100
monitor:
.reserve monitor 0x20
.entry reset
.section bootstrap
reset:
    b main
.section main
";

const FOOTER: &str = "
.section none
.org 0x9800
.reserve tables 0x400
";

/// Random call graph: function `i` only calls functions numbered above it,
/// using the prologue/epilogue form picked for it.
#[derive(Debug, Clone)]
struct Func {
    pop_return: bool,
    body: Vec<Op>,
}

#[derive(Debug, Clone)]
enum Op {
    Add(u8),
    Sub(u8),
    Call(usize),
    Emit,
}

fn program(funcs: &[Func]) -> String {
    let mut s = String::from(HEADER);
    s += "main:\n    ldr r7, .out\n    movs r0, #1\n    bl f0\n    str r0, [r7]\n    halt\n";
    for (i, f) in funcs.iter().enumerate() {
        writeln!(s, "f{i}:").unwrap();
        s += if f.pop_return { "    push {r4, lr}\n" } else { "    push {lr}\n" };
        for op in &f.body {
            match *op {
                Op::Add(k) => writeln!(s, "    adds r0, #{k}").unwrap(),
                Op::Sub(k) => writeln!(s, "    subs r0, #{k}").unwrap(),
                Op::Call(j) if j > i && j < funcs.len() => writeln!(s, "    bl f{j}").unwrap(),
                Op::Call(_) => s += "    nop\n",
                Op::Emit => s += "    str r0, [r7]\n",
            }
        }
        s += if f.pop_return { "    pop {r4, pc}\n" } else { "    pop {r1}\n    mov lr, r1\n    bx lr\n" };
    }
    s += "tick_irq:\n    bx lr\n.align 4\n.out: .word 0x40000000\n";
    s + FOOTER
}

fn func() -> impl Strategy<Value = Func> {
    let op = prop_oneof![
        (0u8..=255).prop_map(Op::Add),
        (0u8..=255).prop_map(Op::Sub),
        (0usize..8).prop_map(Op::Call),
        Just(Op::Emit),
    ];
    (any::<bool>(), proptest::collection::vec(op, 0..8)).prop_map(|(pop_return, body)| Func { pop_return, body })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_programs_rewrite_cleanly(funcs in proptest::collection::vec(func(), 1..8)) {
        let image = assemble(&program(&funcs)).unwrap();
        check_layout(&image);
        check_tables(&image);
        check_mediation(&image);
        let plain = run_with(&image, &Default::default());
        let inst_image = instrument_image(&image).unwrap().image;
        let inst = run_with(&inst_image, &Default::default());
        prop_assert_eq!(&plain.report.outcome, &Outcome::Completed);
        prop_assert_eq!(&inst.report.outcome, &Outcome::Completed);
        prop_assert_eq!(&plain.report.output, &inst.report.output);
        prop_assert_eq!(ns_data_snapshot(&plain.machine, &image), ns_data_snapshot(&inst.machine, &inst_image));
    }
}
