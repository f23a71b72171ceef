//! Region map with security attribution and access checks.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Security {
    NonSecure,
    Secure,
    /// Secure, Non-Secure Callable: holds the gateway veneers.
    Nsc,
}

impl Security {
    pub fn parse(s: &str) -> Option<Security> {
        match s {
            "ns" => Some(Security::NonSecure),
            "s" => Some(Security::Secure),
            "nsc" => Some(Security::Nsc),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Security::NonSecure => "ns",
            Security::Secure => "s",
            Security::Nsc => "nsc",
        }
    }

    pub fn is_secure(self) -> bool {
        !matches!(self, Security::NonSecure)
    }
}

/// Security state of the processor (as opposed to the attribution of memory).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SecState {
    NonSecure,
    Secure,
}

impl fmt::Display for SecState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SecState::NonSecure => "NS",
            SecState::Secure => "S",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Perms {
    pub const RX: Perms = Perms { read: true, write: false, execute: true };
    pub const R: Perms = Perms { read: true, write: false, execute: false };
    pub const RW: Perms = Perms { read: true, write: true, execute: false };
    pub const W: Perms = Perms { read: false, write: true, execute: false };

    pub fn parse(s: &str) -> Option<Perms> {
        let mut p = Perms::default();
        for c in s.chars() {
            match c {
                'r' => p.read = true,
                'w' => p.write = true,
                'x' => p.execute = true,
                '-' => {}
                _ => return None,
            }
        }
        Some(p)
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.read {
            f.write_str("r")?;
        }
        if self.write {
            f.write_str("w")?;
        }
        if self.execute {
            f.write_str("x")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRegion {
    pub name: String,
    pub base: u32,
    pub size: u32,
    pub perms: Perms,
    pub security: Security,
}

impl MemoryRegion {
    pub fn end(&self) -> u64 {
        self.base as u64 + self.size as u64
    }

    pub fn contains(&self, addr: u32, len: u32) -> bool {
        addr >= self.base && addr as u64 + len as u64 <= self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Fetch,
    Load,
    Store,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Fetch => "fetch",
            AccessKind::Load => "load",
            AccessKind::Store => "store",
        })
    }
}

/// Why an access was refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessFault {
    /// No region maps the address range.
    Unmapped,
    /// Region exists but lacks the permission.
    Permission,
    /// Illegal crossing of the security boundary.
    Security,
}

/// Outcome of a successful check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Allow {
        region: usize,
    },
    /// Non-secure fetch from NSC memory: legal only if the instruction there is `sg`.
    GatewayOnly {
        region: usize,
    },
}

impl Access {
    pub fn region(self) -> usize {
        match self {
            Access::Allow { region } | Access::GatewayOnly { region } => region,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegionError {
    #[error("regions `{0}` and `{1}` overlap")]
    Overlap(String, String),
    #[error("region `{0}` is both writable and executable")]
    WriteExecute(String),
    #[error("region `{0}` is empty or wraps the address space")]
    BadExtent(String),
}

/// Validates disjointness and W^X for a set of regions.
pub fn validate_regions(regions: &[MemoryRegion]) -> Result<(), RegionError> {
    for (i, a) in regions.iter().enumerate() {
        if a.size == 0 || a.end() > 1 << 32 {
            return Err(RegionError::BadExtent(a.name.clone()));
        }
        if a.perms.write && a.perms.execute {
            return Err(RegionError::WriteExecute(a.name.clone()));
        }
        for b in &regions[i + 1..] {
            if (a.base as u64) < b.end() && (b.base as u64) < a.end() {
                return Err(RegionError::Overlap(a.name.clone(), b.name.clone()));
            }
        }
    }
    Ok(())
}

pub fn find_region(regions: &[MemoryRegion], addr: u32, len: u32) -> Option<usize> {
    regions.iter().position(|r| r.contains(addr, len))
}

/// Pure access check; never traps by itself.
pub fn check_access(
    state: SecState,
    regions: &[MemoryRegion],
    addr: u32,
    len: u32,
    kind: AccessKind,
) -> Result<Access, AccessFault> {
    let idx = find_region(regions, addr, len).ok_or(AccessFault::Unmapped)?;
    let region = &regions[idx];
    let mut gateway = false;
    match (state, region.security) {
        (SecState::NonSecure, Security::Secure) => return Err(AccessFault::Security),
        (SecState::NonSecure, Security::Nsc) => {
            if kind != AccessKind::Fetch {
                return Err(AccessFault::Security);
            }
            gateway = true;
        }
        // Secure code only runs from secure memory; leaving it requires bxns.
        (SecState::Secure, Security::NonSecure) if kind == AccessKind::Fetch => return Err(AccessFault::Security),
        _ => {}
    }
    let permitted = match kind {
        AccessKind::Fetch => region.perms.execute,
        AccessKind::Load => region.perms.read,
        AccessKind::Store => region.perms.write,
    };
    if !permitted {
        return Err(AccessFault::Permission);
    }
    Ok(if gateway { Access::GatewayOnly { region: idx } } else { Access::Allow { region: idx } })
}
