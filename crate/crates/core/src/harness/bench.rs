//! Paired uninstrumented/instrumented runs over a suite of programs.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::asm::{assemble, AsmError};
use crate::harness::attack::{AttackScript, ScriptError};
use crate::harness::runner::{run, Outcome, RunError, RunOptions};
use crate::manifest::FirmwareImage;
use crate::rewriter::{instrument_image, RewriteError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{program}: {source}")]
    Asm { program: String, source: AsmError },
    #[error("{program}: {source}")]
    Script { program: String, source: ScriptError },
    #[error("{program}: {source}")]
    Rewrite { program: String, source: RewriteError },
    #[error("{program}: {source}")]
    Run { program: String, source: RunError },
    #[error("{program}: benchmark invalid, {which} run ended with {outcome}")]
    Invalid { program: String, which: &'static str, outcome: String },
    #[error("{program}: benchmark invalid, output differs between runs")]
    OutputMismatch { program: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub program: String,
    pub traps: u64,
    pub ratio: f64,
    pub cycles_uninstrumented: u64,
    pub cycles_instrumented: u64,
}

impl BenchRow {
    pub fn overhead_pct(&self) -> f64 {
        (self.cycles_instrumented as f64 - self.cycles_uninstrumented as f64) / self.cycles_uninstrumented as f64
            * 100.0
    }

    /// Extra cycles per monitor invocation.
    pub fn per_trap(&self) -> Option<f64> {
        (self.traps > 0)
            .then(|| (self.cycles_instrumented as f64 - self.cycles_uninstrumented as f64) / self.traps as f64)
    }
}

pub fn bench_image(
    program: &str,
    image: &FirmwareImage,
    schedule: &AttackScript,
    options: &RunOptions,
) -> Result<BenchRow, BenchError> {
    let err = |source| BenchError::Run { program: program.into(), source };
    let instrumented =
        instrument_image(image).map_err(|source| BenchError::Rewrite { program: program.into(), source })?.image;
    let plain = run(image, schedule, options).map_err(err)?.report;
    let inst = run(&instrumented, schedule, options).map_err(err)?.report;
    for (which, r) in [("uninstrumented", &plain), ("instrumented", &inst)] {
        if r.outcome != Outcome::Completed {
            return Err(BenchError::Invalid { program: program.into(), which, outcome: r.outcome.to_string() });
        }
    }
    if plain.output != inst.output {
        return Err(BenchError::OutputMismatch { program: program.into() });
    }
    Ok(BenchRow {
        program: program.into(),
        traps: inst.traps,
        ratio: inst.ratio,
        cycles_uninstrumented: plain.cycles,
        cycles_instrumented: inst.cycles,
    })
}

/// Benchmarks every `*.s` in `dir`, with `<name>.irq` as its interrupt schedule when present.
pub fn bench_suite(dir: &Path, options: &RunOptions) -> Result<Vec<BenchRow>, BenchError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BenchError::Io { path, source }
    };
    let mut sources: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "s"))
        .collect();
    sources.sort();
    let mut rows = Vec::new();
    for path in sources {
        let program = path.file_stem().unwrap().to_string_lossy().into_owned();
        let text = std::fs::read_to_string(&path).map_err(io(&path))?;
        let image = assemble(&text).map_err(|source| BenchError::Asm { program: program.clone(), source })?;
        let irq_path = path.with_extension("irq");
        let schedule = if irq_path.exists() {
            let text = std::fs::read_to_string(&irq_path).map_err(io(&irq_path))?;
            text.parse().map_err(|source| BenchError::Script { program: program.clone(), source })?
        } else {
            AttackScript::default()
        };
        rows.push(bench_image(&program, &image, &schedule, options)?);
    }
    Ok(rows)
}

/// Aligned text table.
pub struct BenchTable<'a>(pub &'a [BenchRow]);

impl fmt::Display for BenchTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>7} {:>8} {:>14} {:>14} {:>10} {:>9}",
            "program", "traps", "ratio", "cycles-uninstr", "cycles-instr", "overhead%", "per-trap"
        )?;
        for r in self.0 {
            let per_trap = r.per_trap().map(|p| format!("{p:.1}")).unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "{:<14} {:>7} {:>8.4} {:>14} {:>14} {:>10.2} {:>9}",
                r.program,
                r.traps,
                r.ratio,
                r.cycles_uninstrumented,
                r.cycles_instrumented,
                r.overhead_pct(),
                per_trap
            )?;
        }
        Ok(())
    }
}
