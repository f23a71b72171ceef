//! `mcfi`: assemble, instrument, run and benchmark guest firmware.
//!
//! Images are stored as a raw binary (`*.img`) next to a text manifest with
//! the same stem (`*.manifest`).

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mcfi::asm::assemble;
use mcfi::harness::attack::AttackScript;
use mcfi::harness::bench::{bench_suite, BenchTable};
use mcfi::harness::runner::{run, RunOptions, DEFAULT_BUDGET};
use mcfi::isa::decode;
use mcfi::manifest::{FirmwareImage, Manifest};
use mcfi::monitor::{MonitorOptions, DEFAULT_CAPACITY};
use mcfi::rewriter::instrument_image;

#[derive(Parser)]
#[command(name = "mcfi", version, about = "Layout-preserving control-flow integrity for Thumb firmware")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a source file into an image and manifest.
    Asm {
        source: PathBuf,
        /// Output image; the manifest goes next to it.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Rewrite an image, writing the instrumented image and sidecar manifest.
    Instrument {
        #[command(flatten)]
        input: ImageArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run an image and print the run report.
    Run {
        #[command(flatten)]
        input: ImageArgs,
        /// Attack script: a file, or inline text with steps separated by `;`.
        #[arg(long)]
        attack: Vec<String>,
        /// Interrupt schedule, same format as --attack.
        #[arg(long)]
        irq: Vec<String>,
        /// Print every executed instruction.
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: u64,
        /// Shadow-stack capacity in entries.
        #[arg(long, default_value_t = DEFAULT_CAPACITY)]
        capacity: u32,
        /// Route every `bx lr` return through its trampoline.
        #[arg(long)]
        no_fast_path: bool,
    },
    /// Benchmark every `*.s` in a directory, plain against instrumented.
    Bench { dir: PathBuf },
    /// Disassemble the code ranges of an image.
    Disasm {
        #[command(flatten)]
        input: ImageArgs,
    },
}

#[derive(Args)]
struct ImageArgs {
    image: PathBuf,
    /// Defaults to the image path with a `.manifest` extension.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn manifest_path(image: &Path) -> PathBuf {
    image.with_extension("manifest")
}

impl ImageArgs {
    fn load(&self) -> Result<FirmwareImage> {
        let bytes = fs::read(&self.image).with_context(|| format!("reading {}", self.image.display()))?;
        let mpath = self.manifest.clone().unwrap_or_else(|| manifest_path(&self.image));
        let text = fs::read_to_string(&mpath).with_context(|| format!("reading {}", mpath.display()))?;
        let manifest: Manifest = text.parse().with_context(|| format!("parsing {}", mpath.display()))?;
        Ok(FirmwareImage::new(bytes, manifest)?)
    }
}

fn save(image: &FirmwareImage, out: &Path) -> Result<()> {
    fs::write(out, &image.bytes).with_context(|| format!("writing {}", out.display()))?;
    let mpath = manifest_path(out);
    if mpath == out {
        bail!("output path {} must not end in .manifest", out.display());
    }
    fs::write(&mpath, image.manifest.to_string()).with_context(|| format!("writing {}", mpath.display()))?;
    Ok(())
}

fn script(args: &[String]) -> Result<AttackScript> {
    let mut all = AttackScript::default();
    for arg in args {
        let text = if Path::new(arg).is_file() {
            fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?
        } else {
            arg.replace(';', "\n")
        };
        all.extend(text.parse().with_context(|| format!("in script `{arg}`"))?);
    }
    Ok(all)
}

fn disasm(image: &FirmwareImage, out: &mut impl Write) -> io::Result<()> {
    let m = &image.manifest;
    let mut ranges: Vec<_> = m.bootstrap.iter().chain(&m.main).copied().collect();
    ranges.sort_by_key(|r| r.base);
    for range in ranges {
        let mut addr = range.base;
        while (addr as u64) < range.end() {
            for s in m.symbols.iter().filter(|s| s.addr == addr) {
                writeln!(out, "{}:", s.name)?;
            }
            if let Some(pool) = m.pools.iter().find(|p| p.contains(addr)) {
                for w in (pool.base..pool.end() as u32).step_by(4) {
                    writeln!(out, "  {w:08x}:  .word {:#010x}", image.read_u32(w).unwrap_or(0))?;
                }
                addr = pool.end() as u32;
                continue;
            }
            let at = (addr - image.base()) as usize;
            let Ok((instr, width)) = decode(&image.bytes[..range.end() as usize - image.base() as usize], at) else {
                break;
            };
            let hex: Vec<String> = image.bytes[at..at + width as usize]
                .chunks(2)
                .map(|c| format!("{:04x}", u16::from_le_bytes([c[0], c[1]])))
                .collect();
            writeln!(out, "  {addr:08x}:  {:<10} {}", hex.join(" "), instr.disasm_at(addr))?;
            addr += width;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match try_main() {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn try_main() -> Result<ExitCode> {
    let mut out = io::stdout().lock();
    match Cli::parse().command {
        Command::Asm { source, out: dest } => {
            let text = fs::read_to_string(&source).with_context(|| format!("reading {}", source.display()))?;
            let image = assemble(&text).with_context(|| source.display().to_string())?;
            save(&image, &dest)?;
        }
        Command::Instrument { input, out: dest } => {
            let result = instrument_image(&input.load()?)?;
            save(&result.image, &dest)?;
            write!(out, "{}", result.report)?;
        }
        Command::Run { input, attack, irq, trace, budget, capacity, no_fast_path } => {
            let image = input.load()?;
            let mut steps = script(&irq)?;
            steps.extend(script(&attack)?);
            let options = RunOptions { budget, trace, monitor: MonitorOptions { capacity, fast_path: !no_fast_path } };
            let result = run(&image, &steps, &options)?;
            if trace {
                for record in result.machine.trace() {
                    writeln!(out, "{record}")?;
                }
            }
            write!(out, "{}", result.report)?;
            return Ok(ExitCode::from(result.report.outcome.exit_code() as u8));
        }
        Command::Bench { dir } => {
            let rows = bench_suite(&dir, &RunOptions::default())?;
            write!(out, "{}", BenchTable(&rows))?;
        }
        Command::Disasm { input } => disasm(&input.load()?, &mut out)?,
    }
    Ok(ExitCode::SUCCESS)
}
