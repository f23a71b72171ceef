//! Thumb subset: bit-exact encode/decode, disassembly and branch classification.
//!
//! Encodings follow the real Thumb/Thumb-2 forms wherever the subset uses an
//! existing instruction; see `docs/isa.md` for the full table.

use std::fmt;

use thiserror::Error;

/// A core register, `r0`..`r15`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Register(u8);

impl Register {
    pub const R0: Register = Register(0);
    pub const R1: Register = Register(1);
    pub const R2: Register = Register(2);
    pub const R3: Register = Register(3);
    pub const R4: Register = Register(4);
    pub const R5: Register = Register(5);
    pub const R6: Register = Register(6);
    pub const R7: Register = Register(7);
    pub const R12: Register = Register(12);
    pub const SP: Register = Register(13);
    pub const LR: Register = Register(14);
    pub const PC: Register = Register(15);

    pub fn new(index: u8) -> Option<Register> {
        (index < 16).then_some(Register(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn is_low(self) -> bool {
        self.0 < 8
    }

    pub fn parse(name: &str) -> Option<Register> {
        match name.to_ascii_lowercase().as_str() {
            "sp" => Some(Register::SP),
            "lr" => Some(Register::LR),
            "pc" => Some(Register::PC),
            "ip" => Some(Register::R12),
            s => s.strip_prefix('r')?.parse::<u8>().ok().and_then(Register::new),
        }
    }

    // Constructs a register from a masked bit field; callers guarantee < 16.
    fn from_bits(bits: u16) -> Register {
        Register((bits & 0xF) as u8)
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            13 => f.write_str("sp"),
            14 => f.write_str("lr"),
            15 => f.write_str("pc"),
            n => write!(f, "r{n}"),
        }
    }
}

/// Bitmask over `r0`..`r7` used by `push`/`pop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RegList(pub u8);

impl RegList {
    pub fn contains(self, reg: Register) -> bool {
        reg.is_low() && self.0 & (1 << reg.0) != 0
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Registers in ascending order, which is also stack order (lowest address first).
    pub fn iter(self) -> impl Iterator<Item = Register> {
        (0..8u8).filter(move |i| self.0 & (1 << i) != 0).map(Register)
    }

    pub fn from_regs(regs: &[Register]) -> Option<RegList> {
        let mut bits = 0u8;
        for r in regs {
            if !r.is_low() {
                return None;
            }
            bits |= 1 << r.0;
        }
        Some(RegList(bits))
    }
}

/// Condition codes. Only the conditions expressible with the N and Z flags are
/// part of the subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Mi,
    Pl,
}

impl Cond {
    fn bits(self) -> u16 {
        match self {
            Cond::Eq => 0x0,
            Cond::Ne => 0x1,
            Cond::Mi => 0x4,
            Cond::Pl => 0x5,
        }
    }

    fn from_bits(bits: u16) -> Option<Cond> {
        match bits {
            0x0 => Some(Cond::Eq),
            0x1 => Some(Cond::Ne),
            0x4 => Some(Cond::Mi),
            0x5 => Some(Cond::Pl),
            _ => None,
        }
    }

    pub fn holds(self, n: bool, z: bool) -> bool {
        match self {
            Cond::Eq => z,
            Cond::Ne => !z,
            Cond::Mi => n,
            Cond::Pl => !n,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Mi => "mi",
            Cond::Pl => "pl",
        }
    }

    pub fn parse(s: &str) -> Option<Cond> {
        match s {
            "eq" => Some(Cond::Eq),
            "ne" => Some(Cond::Ne),
            "mi" => Some(Cond::Mi),
            "pl" => Some(Cond::Pl),
            _ => None,
        }
    }
}

/// Decoded instruction.
///
/// Branch offsets are byte displacements relative to the instruction address
/// plus 4, as in the architecture. `LdrImm`/`StrImm` offsets are byte offsets
/// (multiples of 4); `LdrLit` loads from `align4(pc + 4) + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    MovImm {
        rd: Register,
        imm: u8,
    },
    CmpImm {
        rn: Register,
        imm: u8,
    },
    AddImm {
        rdn: Register,
        imm: u8,
    },
    SubImm {
        rdn: Register,
        imm: u8,
    },
    LdrImm {
        rt: Register,
        rn: Register,
        offset: u8,
    },
    StrImm {
        rt: Register,
        rn: Register,
        offset: u8,
    },
    LdrLit {
        rt: Register,
        offset: u16,
    },
    MovReg {
        rd: Register,
        rm: Register,
    },
    AddReg {
        rd: Register,
        rn: Register,
        rm: Register,
    },
    Push {
        regs: RegList,
        lr: bool,
    },
    Pop {
        regs: RegList,
        pc: bool,
    },
    BCond {
        cond: Cond,
        offset: i32,
    },
    B {
        offset: i32,
    },
    BlImm {
        offset: i32,
    },
    BlxReg {
        rm: Register,
    },
    BxReg {
        rm: Register,
    },
    Bxns {
        rm: Register,
    },
    Svc {
        comment: u8,
    },
    Sg,
    Nop,
    Halt,
    /// Any halfword outside the subset. Executing it raises a UsageFault.
    Undefined {
        halfword: u16,
    },
}

/// How the rewriter and monitor see an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchClass {
    DirectCall,
    IndirectCall,
    EffectiveReturnBxLr,
    EffectiveReturnPop,
    DirectJump,
    NotABranch,
}

impl BranchClass {
    /// Classes the rewriter must replace with a dispatch instruction.
    pub fn is_mediated(self) -> bool {
        matches!(
            self,
            BranchClass::DirectCall
                | BranchClass::IndirectCall
                | BranchClass::EffectiveReturnBxLr
                | BranchClass::EffectiveReturnPop
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("offset {0:#x} is not halfword aligned")]
    Misaligned(usize),
    #[error("offset {0:#x} is past the end of the code")]
    OutOfBounds(usize),
    #[error("32-bit instruction at offset {0:#x} is truncated")]
    Truncated(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("{0} must be a low register (r0-r7)")]
    HighRegister(Register),
    #[error("{what} {value} out of range")]
    OutOfRange { what: &'static str, value: i64 },
    #[error("{what} {value} is not a multiple of {align}")]
    Misaligned { what: &'static str, value: i64, align: i64 },
    #[error("{0} is not encodable in the subset")]
    Unencodable(&'static str),
}

pub const NOP_HALFWORD: u16 = 0xB000;
pub const HALT_HALFWORD: u16 = 0xBEAB;
pub const SG_HALFWORD: u16 = 0xE97F;

impl Instruction {
    pub fn width(&self) -> u32 {
        match self {
            Instruction::BlImm { .. } => 4,
            _ => 2,
        }
    }

    /// Absolute branch target for pc-relative branches located at `addr`.
    pub fn branch_target(&self, addr: u32) -> Option<u32> {
        match *self {
            Instruction::B { offset } | Instruction::BCond { offset, .. } | Instruction::BlImm { offset } => {
                Some(addr.wrapping_add(4).wrapping_add(offset as u32))
            }
            _ => None,
        }
    }

    /// Disassembly with pc-relative operands resolved against `addr`.
    pub fn disasm_at(&self, addr: u32) -> String {
        match *self {
            Instruction::B { .. } => format!("b {:#x}", self.branch_target(addr).unwrap()),
            Instruction::BCond { cond, .. } => {
                format!("b{} {:#x}", cond.mnemonic(), self.branch_target(addr).unwrap())
            }
            Instruction::BlImm { .. } => format!("bl {:#x}", self.branch_target(addr).unwrap()),
            Instruction::LdrLit { rt, offset } => {
                let lit = (addr.wrapping_add(4) & !3).wrapping_add(offset as u32);
                format!("ldr {rt}, [pc, #{offset}] ; {lit:#x}")
            }
            _ => self.to_string(),
        }
    }
}

fn write_reglist(f: &mut fmt::Formatter<'_>, regs: RegList, extra: Option<&str>) -> fmt::Result {
    f.write_str("{")?;
    let mut first = true;
    for r in regs.iter() {
        if !first {
            f.write_str(", ")?;
        }
        write!(f, "{r}")?;
        first = false;
    }
    if let Some(extra) = extra {
        if !first {
            f.write_str(", ")?;
        }
        f.write_str(extra)?;
    }
    f.write_str("}")
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Instruction::MovImm { rd, imm } => write!(f, "movs {rd}, #{imm}"),
            Instruction::CmpImm { rn, imm } => write!(f, "cmp {rn}, #{imm}"),
            Instruction::AddImm { rdn, imm } => write!(f, "adds {rdn}, #{imm}"),
            Instruction::SubImm { rdn, imm } => write!(f, "subs {rdn}, #{imm}"),
            Instruction::LdrImm { rt, rn, offset } => write!(f, "ldr {rt}, [{rn}, #{offset}]"),
            Instruction::StrImm { rt, rn, offset } => write!(f, "str {rt}, [{rn}, #{offset}]"),
            Instruction::LdrLit { rt, offset } => write!(f, "ldr {rt}, [pc, #{offset}]"),
            Instruction::MovReg { rd, rm } => write!(f, "mov {rd}, {rm}"),
            Instruction::AddReg { rd, rn, rm } => write!(f, "adds {rd}, {rn}, {rm}"),
            Instruction::Push { regs, lr } => {
                f.write_str("push ")?;
                write_reglist(f, regs, lr.then_some("lr"))
            }
            Instruction::Pop { regs, pc } => {
                f.write_str("pop ")?;
                write_reglist(f, regs, pc.then_some("pc"))
            }
            Instruction::BCond { cond, offset } => write!(f, "b{} .{:+}", cond.mnemonic(), offset + 4),
            Instruction::B { offset } => write!(f, "b .{:+}", offset + 4),
            Instruction::BlImm { offset } => write!(f, "bl .{:+}", offset + 4),
            Instruction::BlxReg { rm } => write!(f, "blx {rm}"),
            Instruction::BxReg { rm } => write!(f, "bx {rm}"),
            Instruction::Bxns { rm } => write!(f, "bxns {rm}"),
            Instruction::Svc { comment } => write!(f, "svc #{comment}"),
            Instruction::Sg => f.write_str("sg"),
            Instruction::Nop => f.write_str("nop"),
            Instruction::Halt => f.write_str("halt"),
            Instruction::Undefined { halfword } => write!(f, ".inst {halfword:#06x}"),
        }
    }
}

fn read_halfword(bytes: &[u8], offset: usize) -> Option<u16> {
    let b = bytes.get(offset..offset + 2)?;
    Some(u16::from_le_bytes([b[0], b[1]]))
}

fn sign_extend(value: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((value << shift) as i32) >> shift
}

fn is_bl_prefix(hw: u16) -> bool {
    hw & 0xF800 == 0xF000
}

fn is_bl_suffix(hw: u16) -> bool {
    hw & 0xD000 == 0xD000
}

/// Decodes the instruction starting at `offset` in `bytes`.
pub fn decode(bytes: &[u8], offset: usize) -> Result<(Instruction, u32), DecodeError> {
    if !offset.is_multiple_of(2) {
        return Err(DecodeError::Misaligned(offset));
    }
    let hw = read_halfword(bytes, offset).ok_or(DecodeError::OutOfBounds(offset))?;
    if is_bl_prefix(hw) {
        let second = read_halfword(bytes, offset + 2).ok_or(DecodeError::Truncated(offset))?;
        if is_bl_suffix(second) {
            return Ok((decode_bl(hw, second), 4));
        }
        return Ok((Instruction::Undefined { halfword: hw }, 2));
    }
    Ok((decode16(hw), 2))
}

fn decode_bl(first: u16, second: u16) -> Instruction {
    let s = ((first >> 10) & 1) as u32;
    let imm10 = (first & 0x3FF) as u32;
    let j1 = ((second >> 13) & 1) as u32;
    let j2 = ((second >> 11) & 1) as u32;
    let imm11 = (second & 0x7FF) as u32;
    let i1 = !(j1 ^ s) & 1;
    let i2 = !(j2 ^ s) & 1;
    let raw = (s << 24) | (i1 << 23) | (i2 << 22) | (imm10 << 12) | (imm11 << 1);
    Instruction::BlImm { offset: sign_extend(raw, 25) }
}

/// Decodes a single 16-bit halfword. BL prefixes decode as `Undefined` here
/// because they need their second halfword.
pub fn decode16(hw: u16) -> Instruction {
    use Instruction::*;
    let undefined = Undefined { halfword: hw };
    let low3 = |shift: u16| Register::from_bits((hw >> shift) & 0x7);
    match hw >> 11 {
        0b00100 => MovImm { rd: low3(8), imm: hw as u8 },
        0b00101 => CmpImm { rn: low3(8), imm: hw as u8 },
        0b00110 => AddImm { rdn: low3(8), imm: hw as u8 },
        0b00111 => SubImm { rdn: low3(8), imm: hw as u8 },
        0b01100 => StrImm { rt: low3(0), rn: low3(3), offset: (((hw >> 6) & 0x1F) * 4) as u8 },
        0b01101 => LdrImm { rt: low3(0), rn: low3(3), offset: (((hw >> 6) & 0x1F) * 4) as u8 },
        0b01001 => LdrLit { rt: low3(8), offset: (hw & 0xFF) * 4 },
        0b00011 if hw >> 9 == 0b0001100 => AddReg { rd: low3(0), rn: low3(3), rm: low3(6) },
        0b01000 => match hw >> 8 {
            0x46 => {
                let rd = Register::from_bits(((hw >> 4) & 0x8) | (hw & 0x7));
                if rd == Register::PC {
                    undefined
                } else {
                    MovReg { rd, rm: Register::from_bits(hw >> 3) }
                }
            }
            0x47 => {
                let rm = Register::from_bits(hw >> 3);
                match (hw >> 7 & 1, hw & 0x7) {
                    (0, 0b000) => BxReg { rm },
                    (0, 0b100) => Bxns { rm },
                    (1, 0b000) => BlxReg { rm },
                    _ => undefined,
                }
            }
            _ => undefined,
        },
        0b10110 | 0b10111 => match hw {
            NOP_HALFWORD => Nop,
            HALT_HALFWORD => Halt,
            _ if hw & 0xFE00 == 0xB400 && hw & 0x1FF != 0 => Push { regs: RegList(hw as u8), lr: hw & 0x100 != 0 },
            _ if hw & 0xFE00 == 0xBC00 && hw & 0x1FF != 0 => Pop { regs: RegList(hw as u8), pc: hw & 0x100 != 0 },
            _ => undefined,
        },
        0b11010 | 0b11011 => match (hw >> 8) & 0xF {
            0xF => Svc { comment: hw as u8 },
            c => match Cond::from_bits(c) {
                Some(cond) => BCond { cond, offset: sign_extend((hw & 0xFF) as u32, 8) * 2 },
                None => undefined,
            },
        },
        0b11100 => B { offset: sign_extend((hw & 0x7FF) as u32, 11) * 2 },
        _ if hw == SG_HALFWORD => Sg,
        _ => undefined,
    }
}

fn low(reg: Register) -> Result<u16, EncodeError> {
    if reg.is_low() {
        Ok(reg.0 as u16)
    } else {
        Err(EncodeError::HighRegister(reg))
    }
}

fn branch_field(what: &'static str, offset: i32, bits: u32) -> Result<u16, EncodeError> {
    if offset % 2 != 0 {
        return Err(EncodeError::Misaligned { what, value: offset as i64, align: 2 });
    }
    let half = offset / 2;
    let limit = 1i32 << (bits - 1);
    if half < -limit || half >= limit {
        return Err(EncodeError::OutOfRange { what, value: offset as i64 });
    }
    Ok((half as u32 & ((1 << bits) - 1)) as u16)
}

/// Encodes an instruction as little-endian bytes (2 or 4 of them).
pub fn encode(instr: &Instruction) -> Result<Vec<u8>, EncodeError> {
    let halfwords = encode_halfwords(instr)?;
    Ok(halfwords.iter().flat_map(|h| h.to_le_bytes()).collect())
}

pub fn encode_halfwords(instr: &Instruction) -> Result<Vec<u16>, EncodeError> {
    use Instruction::*;
    let one = |h: u16| Ok(vec![h]);
    let word_offset = |offset: u32, max: u32| -> Result<u16, EncodeError> {
        if !offset.is_multiple_of(4) {
            return Err(EncodeError::Misaligned { what: "load/store offset", value: offset as i64, align: 4 });
        }
        if offset > max {
            return Err(EncodeError::OutOfRange { what: "load/store offset", value: offset as i64 });
        }
        Ok((offset / 4) as u16)
    };
    match *instr {
        MovImm { rd, imm } => one(0x2000 | low(rd)? << 8 | imm as u16),
        CmpImm { rn, imm } => one(0x2800 | low(rn)? << 8 | imm as u16),
        AddImm { rdn, imm } => one(0x3000 | low(rdn)? << 8 | imm as u16),
        SubImm { rdn, imm } => one(0x3800 | low(rdn)? << 8 | imm as u16),
        StrImm { rt, rn, offset } => one(0x6000 | word_offset(offset as u32, 124)? << 6 | low(rn)? << 3 | low(rt)?),
        LdrImm { rt, rn, offset } => one(0x6800 | word_offset(offset as u32, 124)? << 6 | low(rn)? << 3 | low(rt)?),
        LdrLit { rt, offset } => one(0x4800 | low(rt)? << 8 | word_offset(offset as u32, 1020)?),
        MovReg { rd, rm } => {
            if rd == Register::PC {
                return Err(EncodeError::Unencodable("mov to pc"));
            }
            let d = rd.0 as u16;
            one(0x4600 | (d & 0x8) << 4 | (rm.0 as u16) << 3 | (d & 0x7))
        }
        AddReg { rd, rn, rm } => one(0x1800 | low(rm)? << 6 | low(rn)? << 3 | low(rd)?),
        Push { regs, lr } => {
            if regs.is_empty() && !lr {
                return Err(EncodeError::Unencodable("empty push"));
            }
            one(0xB400 | (lr as u16) << 8 | regs.0 as u16)
        }
        Pop { regs, pc } => {
            if regs.is_empty() && !pc {
                return Err(EncodeError::Unencodable("empty pop"));
            }
            one(0xBC00 | (pc as u16) << 8 | regs.0 as u16)
        }
        BCond { cond, offset } => {
            one(0xD000 | cond.bits() << 8 | branch_field("conditional branch offset", offset, 8)?)
        }
        B { offset } => one(0xE000 | branch_field("branch offset", offset, 11)?),
        BlImm { offset } => {
            if offset % 2 != 0 {
                return Err(EncodeError::Misaligned { what: "bl offset", value: offset as i64, align: 2 });
            }
            if !(-(1 << 24)..(1 << 24)).contains(&offset) {
                return Err(EncodeError::OutOfRange { what: "bl offset", value: offset as i64 });
            }
            let raw = offset as u32;
            let s = (raw >> 24) & 1;
            let i1 = (raw >> 23) & 1;
            let i2 = (raw >> 22) & 1;
            let j1 = (!(i1 ^ s)) & 1;
            let j2 = (!(i2 ^ s)) & 1;
            let first = 0xF000 | (s << 10) | ((raw >> 12) & 0x3FF);
            let second = 0xD000 | (j1 << 13) | (j2 << 11) | ((raw >> 1) & 0x7FF);
            Ok(vec![first as u16, second as u16])
        }
        BlxReg { rm } => one(0x4780 | (rm.0 as u16) << 3),
        BxReg { rm } => one(0x4700 | (rm.0 as u16) << 3),
        Bxns { rm } => one(0x4704 | (rm.0 as u16) << 3),
        Svc { comment } => one(0xDF00 | comment as u16),
        Sg => one(SG_HALFWORD),
        Nop => one(NOP_HALFWORD),
        Halt => one(HALT_HALFWORD),
        Undefined { halfword } => one(halfword),
    }
}

/// Total classification of an instruction by its control-flow role.
pub fn classify(instr: &Instruction) -> BranchClass {
    match *instr {
        Instruction::BlImm { .. } => BranchClass::DirectCall,
        Instruction::BlxReg { .. } => BranchClass::IndirectCall,
        Instruction::BxReg { rm } if rm == Register::LR => BranchClass::EffectiveReturnBxLr,
        Instruction::BxReg { .. } => BranchClass::IndirectCall,
        Instruction::Pop { pc: true, .. } => BranchClass::EffectiveReturnPop,
        Instruction::B { .. } | Instruction::BCond { .. } => BranchClass::DirectJump,
        _ => BranchClass::NotABranch,
    }
}

/// Linear-sweep disassembly of `bytes` loaded at `base`. Stops at the first
/// truncated instruction.
pub fn disassemble(bytes: &[u8], base: u32) -> Vec<(u32, Instruction)> {
    let mut out = Vec::new();
    let mut offset = 0;
    while let Ok((instr, width)) = decode(bytes, offset) {
        out.push((base + offset as u32, instr));
        offset += width as usize;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw(i: Instruction) -> Vec<u16> {
        encode_halfwords(&i).unwrap()
    }

    fn dec(halfwords: &[u16]) -> Instruction {
        let bytes: Vec<u8> = halfwords.iter().flat_map(|h| h.to_le_bytes()).collect();
        decode(&bytes, 0).unwrap().0
    }

    #[test]
    fn padding_halfword_is_nop() {
        assert_eq!(decode(&[0x00, 0xB0], 0).unwrap(), (Instruction::Nop, 2));
    }

    #[test]
    fn svc_comment() {
        assert_eq!(decode16(0xDF2A), Instruction::Svc { comment: 0x2A });
        assert_eq!(hw(Instruction::Svc { comment: 5 }), vec![0xDF05]);
    }

    // Encodings below were produced by clang's integrated assembler
    // (--target=thumbv8m.main-none-eabi) and are frozen here.
    #[test]
    fn matches_reference_assembler() {
        use Instruction::*;
        let r = |i| Register::new(i).unwrap();
        let cases: &[(Instruction, &[u16])] = &[
            (Pop { regs: RegList(0x10), pc: true }, &[0xBD10]),
            (BlImm { offset: 0 }, &[0xF000, 0xF800]),
            (BlImm { offset: 0x100 }, &[0xF000, 0xF880]),
            (BlImm { offset: -0x21A }, &[0xF7FF, 0xFEF3]),
            (BlImm { offset: 0x800E54 }, &[0xF000, 0xDF2A]),
            (BxReg { rm: Register::LR }, &[0x4770]),
            (Svc { comment: 5 }, &[0xDF05]),
            (Bxns { rm: r(0) }, &[0x4704]),
            (Sg, &[0xE97F]),
            (Halt, &[0xBEAB]),
            (BlxReg { rm: r(3) }, &[0x4798]),
            (BlxReg { rm: Register::LR }, &[0x47F0]),
            (BxReg { rm: r(3) }, &[0x4718]),
            (Nop, &[0xB000]),
            (LdrLit { rt: r(1), offset: 8 }, &[0x4902]),
            (MovReg { rd: Register::SP, rm: r(2) }, &[0x4695]),
            (MovReg { rd: Register::new(8).unwrap(), rm: Register::LR }, &[0x46F0]),
            (MovImm { rd: r(3), imm: 0x7F }, &[0x237F]),
            (CmpImm { rn: r(2), imm: 200 }, &[0x2AC8]),
            (AddImm { rdn: r(1), imm: 1 }, &[0x3101]),
            (SubImm { rdn: r(7), imm: 255 }, &[0x3FFF]),
            (StrImm { rt: r(1), rn: r(2), offset: 4 }, &[0x6051]),
            (LdrImm { rt: r(0), rn: r(7), offset: 124 }, &[0x6FF8]),
            (Push { regs: RegList(0x10), lr: true }, &[0xB510]),
            (Push { regs: RegList(0x07), lr: false }, &[0xB407]),
            (Pop { regs: RegList(0x30), pc: true }, &[0xBD30]),
            (Pop { regs: RegList(0x01), pc: false }, &[0xBC01]),
            (BCond { cond: Cond::Eq, offset: 2 }, &[0xD001]),
            (BCond { cond: Cond::Ne, offset: -10 }, &[0xD1FB]),
            (B { offset: 0xFE }, &[0xE07F]),
            (AddReg { rd: r(0), rn: r(1), rm: r(2) }, &[0x1888]),
        ];
        for (instr, expected) in cases {
            assert_eq!(hw(*instr), expected.to_vec(), "{instr}");
            assert_eq!(dec(expected), *instr);
        }
    }

    #[test]
    fn bl_round_trips() {
        for offset in [0x100, -0x100, 0, 2, -2, 0x3F_FFFE, -0x40_0000, 0xFF_FFFE, -0x100_0000] {
            let i = Instruction::BlImm { offset };
            assert_eq!(dec(&hw(i)), i);
        }
    }

    #[test]
    fn encode_rejects_out_of_range() {
        assert!(encode(&Instruction::BlImm { offset: 0x100_0000 }).is_err());
        assert!(encode(&Instruction::BlImm { offset: 3 }).is_err());
        assert!(encode(&Instruction::B { offset: 2048 }).is_err());
        assert!(encode(&Instruction::B { offset: -2048 }).is_ok());
        assert!(encode(&Instruction::BCond { cond: Cond::Eq, offset: 256 }).is_err());
        assert!(encode(&Instruction::MovImm { rd: Register::new(8).unwrap(), imm: 1 }).is_err());
        assert!(encode(&Instruction::LdrImm { rt: Register::R0, rn: Register::R1, offset: 6 }).is_err());
        assert!(encode(&Instruction::Pop { regs: RegList(0), pc: false }).is_err());
    }

    #[test]
    fn truncated_bl_is_an_error() {
        assert_eq!(decode(&[0x00, 0xF0], 0), Err(DecodeError::Truncated(0)));
        assert_eq!(decode(&[0x00, 0xF0], 1), Err(DecodeError::Misaligned(1)));
        assert_eq!(decode(&[0x00, 0xF0], 2), Err(DecodeError::OutOfBounds(2)));
    }

    #[test]
    fn bl_prefix_without_suffix_is_undefined() {
        let (i, w) = decode(&[0x00, 0xF0, 0x00, 0x20], 0).unwrap();
        assert_eq!(i, Instruction::Undefined { halfword: 0xF000 });
        assert_eq!(w, 2);
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify(&Instruction::BxReg { rm: Register::LR }), BranchClass::EffectiveReturnBxLr);
        assert_eq!(classify(&Instruction::BxReg { rm: Register::R3 }), BranchClass::IndirectCall);
        assert_eq!(classify(&Instruction::Pop { regs: RegList(0x30), pc: true }), BranchClass::EffectiveReturnPop);
        assert_eq!(classify(&Instruction::Pop { regs: RegList(0x30), pc: false }), BranchClass::NotABranch);
        assert_eq!(classify(&Instruction::MovImm { rd: Register::R0, imm: 7 }), BranchClass::NotABranch);
        assert_eq!(classify(&Instruction::BlImm { offset: 8 }), BranchClass::DirectCall);
        assert_eq!(classify(&Instruction::B { offset: 8 }), BranchClass::DirectJump);
    }

    #[test]
    fn second_halfword_of_bl_is_an_svc() {
        let bytes = encode(&Instruction::BlImm { offset: 0x800E54 }).unwrap();
        let (whole, width) = decode(&bytes, 0).unwrap();
        assert_eq!(width, 4);
        assert_eq!(classify(&whole), BranchClass::DirectCall);
        let (inner, _) = decode(&bytes, 2).unwrap();
        assert_eq!(inner, Instruction::Svc { comment: 0x2A });
    }

    #[test]
    fn disasm_resolves_targets() {
        let i = Instruction::BlImm { offset: 0xFC };
        assert_eq!(i.disasm_at(0x8000), "bl 0x8100");
        assert_eq!(Instruction::Pop { regs: RegList(0x30), pc: true }.to_string(), "pop {r4, r5, pc}");
        assert_eq!(Instruction::Push { regs: RegList(0), lr: true }.to_string(), "push {lr}");
    }
}
