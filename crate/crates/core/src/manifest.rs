//! Line-based firmware manifest and the flat firmware image it describes.
//!
//! ```text
//! load 8000
//! region flash 8000 1800 rx ns
//! entry 8200
//! sym main 8240
//! vectors 8000 20
//! bootstrap 8200 40
//! main 8240 400
//! pool 8300 8
//! reserve trampolines 8080 100
//! table branch 9800 58
//! instrumented
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::memory::{find_region, validate_regions, MemoryRegion, Perms, RegionError, Security};

/// Half-open address range `[base, base + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AddrRange {
    pub base: u32,
    pub size: u32,
}

impl AddrRange {
    pub fn new(base: u32, size: u32) -> AddrRange {
        AddrRange { base, size }
    }

    pub fn end(&self) -> u64 {
        self.base as u64 + self.size as u64
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && (addr as u64) < self.end()
    }

    pub fn contains_range(&self, other: &AddrRange) -> bool {
        other.base >= self.base && other.end() <= self.end()
    }

    pub fn overlaps(&self, other: &AddrRange) -> bool {
        (self.base as u64) < other.end() && (other.base as u64) < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    pub addr: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedRange {
    pub name: String,
    pub range: AddrRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VectorTable {
    pub base: u32,
    pub count: u32,
}

/// Reserved-region names the toolchain understands.
pub mod reserved {
    pub const TRAMPOLINES: &str = "trampolines";
    pub const TABLES: &str = "tables";
    pub const MONITOR: &str = "monitor";
    pub const SHADOW: &str = "shadow";
    pub const VENEERS: &str = "veneers";
    pub const STACK: &str = "stack";
}

/// Sidecar table names.
pub mod tables {
    pub const BRANCH: &str = "branch";
    pub const CALL_TARGETS: &str = "call_targets";
    pub const DISPATCH: &str = "dispatch";
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub load: Option<u32>,
    pub regions: Vec<MemoryRegion>,
    pub entry: Option<u32>,
    pub symbols: Vec<Symbol>,
    pub vectors: Option<VectorTable>,
    pub bootstrap: Vec<AddrRange>,
    pub main: Vec<AddrRange>,
    pub pools: Vec<AddrRange>,
    pub reserves: Vec<NamedRange>,
    pub tables: Vec<NamedRange>,
    pub instrumented: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("symbol `{name}` at {addr:#x} is not in an executable region")]
    SymbolNotExecutable { name: String, addr: u32 },
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("bootstrap range {0:#x} overlaps a main-program range")]
    BootstrapOverlapsMain(u32),
    #[error("{what} range {base:#x}+{size:#x} is not inside an executable region")]
    RangeNotExecutable { what: &'static str, base: u32, size: u32 },
    #[error("pool {0:#x} lies outside every code range")]
    StrayPool(u32),
    #[error("reserve `{0}` is not inside a single region")]
    ReserveOutsideRegions(String),
    #[error("missing `{0}` directive")]
    Missing(&'static str),
    #[error("image bytes {base:#x}+{len:#x} are not backed by non-writable regions")]
    ImageOutsideRegions { base: u32, len: u32 },
    #[error("vector table {0:#x} is not inside the image")]
    VectorsOutsideImage(u32),
}

fn parse_hex(tok: &str) -> Option<u32> {
    let t = tok.trim_start_matches("0x").trim_start_matches("0X");
    u32::from_str_radix(t, 16).ok()
}

impl FromStr for Manifest {
    type Err = ManifestError;

    fn from_str(text: &str) -> Result<Manifest, ManifestError> {
        let mut m = Manifest::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let toks: Vec<&str> = content.split_whitespace().collect();
            let err = |msg: &str| ManifestError::Syntax { line, msg: msg.to_string() };
            let hex = |i: usize| -> Result<u32, ManifestError> {
                let tok = toks.get(i).ok_or_else(|| err("missing operand"))?;
                parse_hex(tok).ok_or_else(|| err(&format!("bad hex value `{tok}`")))
            };
            let name = |i: usize| -> Result<String, ManifestError> {
                toks.get(i).map(|s| s.to_string()).ok_or_else(|| err("missing name"))
            };
            let arity = |n: usize| -> Result<(), ManifestError> {
                if toks.len() == n {
                    Ok(())
                } else {
                    Err(err(&format!("`{}` takes {} operands", toks[0], n - 1)))
                }
            };
            match toks[0] {
                "load" => {
                    arity(2)?;
                    m.load = Some(hex(1)?);
                }
                "region" => {
                    arity(6)?;
                    let perms = Perms::parse(toks[4]).ok_or_else(|| err("bad permissions"))?;
                    let security = Security::parse(toks[5]).ok_or_else(|| err("bad security attribute"))?;
                    m.regions.push(MemoryRegion { name: name(1)?, base: hex(2)?, size: hex(3)?, perms, security });
                }
                "entry" => {
                    arity(2)?;
                    m.entry = Some(hex(1)?);
                }
                "sym" => {
                    arity(3)?;
                    m.symbols.push(Symbol { name: name(1)?, addr: hex(2)? });
                }
                "vectors" => {
                    arity(3)?;
                    let count = toks[2].parse::<u32>().map_err(|_| err("bad vector count"))?;
                    m.vectors = Some(VectorTable { base: hex(1)?, count });
                }
                "bootstrap" => {
                    arity(3)?;
                    m.bootstrap.push(AddrRange::new(hex(1)?, hex(2)?));
                }
                "main" => {
                    arity(3)?;
                    m.main.push(AddrRange::new(hex(1)?, hex(2)?));
                }
                "pool" => {
                    arity(3)?;
                    m.pools.push(AddrRange::new(hex(1)?, hex(2)?));
                }
                "reserve" => {
                    arity(4)?;
                    m.reserves.push(NamedRange { name: name(1)?, range: AddrRange::new(hex(2)?, hex(3)?) });
                }
                "table" => {
                    arity(4)?;
                    m.tables.push(NamedRange { name: name(1)?, range: AddrRange::new(hex(2)?, hex(3)?) });
                }
                "instrumented" => {
                    arity(1)?;
                    m.instrumented = true;
                }
                other => return Err(err(&format!("unknown directive `{other}`"))),
            }
        }
        Ok(m)
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(load) = self.load {
            writeln!(f, "load {load:x}")?;
        }
        for r in &self.regions {
            writeln!(f, "region {} {:x} {:x} {} {}", r.name, r.base, r.size, r.perms, r.security.as_str())?;
        }
        if let Some(entry) = self.entry {
            writeln!(f, "entry {entry:x}")?;
        }
        if let Some(v) = self.vectors {
            writeln!(f, "vectors {:x} {}", v.base, v.count)?;
        }
        for r in &self.bootstrap {
            writeln!(f, "bootstrap {:x} {:x}", r.base, r.size)?;
        }
        for r in &self.main {
            writeln!(f, "main {:x} {:x}", r.base, r.size)?;
        }
        for r in &self.pools {
            writeln!(f, "pool {:x} {:x}", r.base, r.size)?;
        }
        for r in &self.reserves {
            writeln!(f, "reserve {} {:x} {:x}", r.name, r.range.base, r.range.size)?;
        }
        for s in &self.symbols {
            writeln!(f, "sym {} {:x}", s.name, s.addr)?;
        }
        for t in &self.tables {
            writeln!(f, "table {} {:x} {:x}", t.name, t.range.base, t.range.size)?;
        }
        if self.instrumented {
            writeln!(f, "instrumented")?;
        }
        Ok(())
    }
}

impl Manifest {
    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.iter().find(|s| s.name == name).map(|s| s.addr)
    }

    pub fn reserve(&self, name: &str) -> Option<AddrRange> {
        self.reserves.iter().find(|r| r.name == name).map(|r| r.range)
    }

    pub fn table(&self, name: &str) -> Option<AddrRange> {
        self.tables.iter().find(|r| r.name == name).map(|r| r.range)
    }

    pub fn region(&self, name: &str) -> Option<&MemoryRegion> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn in_main(&self, addr: u32) -> bool {
        self.main.iter().any(|r| r.contains(addr))
    }

    pub fn in_bootstrap(&self, addr: u32) -> bool {
        self.bootstrap.iter().any(|r| r.contains(addr))
    }

    pub fn in_pool(&self, addr: u32) -> bool {
        self.pools.iter().any(|r| r.contains(addr))
    }

    fn executable(&self, range: &AddrRange) -> bool {
        find_region(&self.regions, range.base, range.size).map(|i| self.regions[i].perms.execute).unwrap_or(false)
    }

    /// Structural checks that do not depend on image contents.
    pub fn validate(&self) -> Result<(), ManifestError> {
        validate_regions(&self.regions)?;
        let mut names: Vec<&str> = self.symbols.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(ManifestError::DuplicateSymbol(w[0].to_string()));
        }
        for s in &self.symbols {
            if !self.executable(&AddrRange::new(s.addr, 2)) {
                return Err(ManifestError::SymbolNotExecutable { name: s.name.clone(), addr: s.addr });
            }
        }
        for (what, ranges) in [("main", &self.main), ("bootstrap", &self.bootstrap)] {
            for r in ranges {
                if !self.executable(r) {
                    return Err(ManifestError::RangeNotExecutable { what, base: r.base, size: r.size });
                }
            }
        }
        for b in &self.bootstrap {
            if self.main.iter().any(|m| m.overlaps(b)) {
                return Err(ManifestError::BootstrapOverlapsMain(b.base));
            }
        }
        for p in &self.pools {
            if !self.main.iter().chain(&self.bootstrap).any(|r| r.contains_range(p)) {
                return Err(ManifestError::StrayPool(p.base));
            }
        }
        for r in self.reserves.iter().chain(&self.tables) {
            if find_region(&self.regions, r.range.base, r.range.size).is_none() {
                return Err(ManifestError::ReserveOutsideRegions(r.name.clone()));
            }
        }
        Ok(())
    }
}

/// Flat image bytes loaded at `manifest.load`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareImage {
    pub bytes: Vec<u8>,
    pub manifest: Manifest,
}

impl FirmwareImage {
    pub fn new(bytes: Vec<u8>, manifest: Manifest) -> Result<FirmwareImage, ManifestError> {
        let image = FirmwareImage { bytes, manifest };
        image.validate()?;
        Ok(image)
    }

    pub fn base(&self) -> u32 {
        self.manifest.load.unwrap_or(0)
    }

    pub fn range(&self) -> AddrRange {
        AddrRange::new(self.base(), self.bytes.len() as u32)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        self.manifest.validate()?;
        if self.manifest.load.is_none() {
            return Err(ManifestError::Missing("load"));
        }
        // Every image byte must land in a non-writable region: the image is code and constants.
        let mut addr = self.base() as u64;
        let end = self.range().end();
        while addr < end {
            let region = self
                .manifest
                .regions
                .iter()
                .find(|r| (r.base as u64) <= addr && addr < r.end() && !r.perms.write)
                .ok_or(ManifestError::ImageOutsideRegions { base: self.base(), len: self.bytes.len() as u32 })?;
            addr = region.end();
        }
        if let Some(v) = self.manifest.vectors {
            if !self.range().contains_range(&AddrRange::new(v.base, v.count * 4)) {
                return Err(ManifestError::VectorsOutsideImage(v.base));
            }
        }
        Ok(())
    }

    fn offset(&self, addr: u32, len: u32) -> Option<usize> {
        self.range().contains_range(&AddrRange::new(addr, len)).then(|| (addr - self.base()) as usize)
    }

    pub fn slice(&self, range: AddrRange) -> Option<&[u8]> {
        let off = self.offset(range.base, range.size)?;
        Some(&self.bytes[off..off + range.size as usize])
    }

    pub fn read_u16(&self, addr: u32) -> Option<u16> {
        let off = self.offset(addr, 2)?;
        Some(u16::from_le_bytes([self.bytes[off], self.bytes[off + 1]]))
    }

    pub fn read_u32(&self, addr: u32) -> Option<u32> {
        let off = self.offset(addr, 4)?;
        Some(u32::from_le_bytes(self.bytes[off..off + 4].try_into().unwrap()))
    }

    pub fn write_bytes(&mut self, addr: u32, data: &[u8]) -> Option<()> {
        let off = self.offset(addr, data.len() as u32)?;
        self.bytes[off..off + data.len()].copy_from_slice(data);
        Some(())
    }

    pub fn write_u32(&mut self, addr: u32, value: u32) -> Option<()> {
        self.write_bytes(addr, &value.to_le_bytes())
    }

    /// Vector entries as `(exception number, raw entry)`.
    pub fn vector_entries(&self) -> Vec<(u32, u32)> {
        let Some(v) = self.manifest.vectors else { return Vec::new() };
        (0..v.count).filter_map(|i| self.read_u32(v.base + 4 * i).map(|e| (i, e))).collect()
    }
}
