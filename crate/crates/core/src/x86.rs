//! The x86-64 instruction subset produced by the emitter, in structured form.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Reg {
    Rax = 0,
    Rcx = 1,
    Rdx = 2,
    Rbx = 3,
    Rsp = 4,
    Rbp = 5,
    Rsi = 6,
    Rdi = 7,
    R8 = 8,
    R9 = 9,
    R10 = 10,
    R11 = 11,
    R12 = 12,
    R13 = 13,
    R14 = 14,
    R15 = 15,
}

impl Reg {
    pub const ALL: [Reg; 16] = [
        Reg::Rax,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rbx,
        Reg::Rsp,
        Reg::Rbp,
        Reg::Rsi,
        Reg::Rdi,
        Reg::R8,
        Reg::R9,
        Reg::R10,
        Reg::R11,
        Reg::R12,
        Reg::R13,
        Reg::R14,
        Reg::R15,
    ];

    /// System V AMD64 integer argument registers, in order.
    pub const ARGS: [Reg; 6] = [Reg::Rdi, Reg::Rsi, Reg::Rdx, Reg::Rcx, Reg::R8, Reg::R9];

    /// Registers the callee must preserve (besides rsp).
    pub const CALLEE_SAVED: [Reg; 6] = [Reg::Rbx, Reg::Rbp, Reg::R12, Reg::R13, Reg::R14, Reg::R15];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Reg {
        Reg::ALL[(code & 15) as usize]
    }

    pub fn is_callee_saved(self) -> bool {
        Reg::CALLEE_SAVED.contains(&self)
    }

    pub fn name64(self) -> &'static str {
        [
            "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11",
            "r12", "r13", "r14", "r15",
        ][self as usize]
    }

    pub fn name32(self) -> &'static str {
        [
            "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d", "r11d",
            "r12d", "r13d", "r14d", "r15d",
        ][self as usize]
    }

    pub fn name8(self) -> &'static str {
        [
            "al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil", "r8b", "r9b", "r10b", "r11b",
            "r12b", "r13b", "r14b", "r15b",
        ][self as usize]
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name64())
    }
}

/// `[base + index*scale + disp]`; `base` may be absent only when an index is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mem {
    pub base: Option<Reg>,
    pub index: Option<(Reg, u8)>,
    pub disp: i32,
}

impl Mem {
    pub fn base(base: Reg, disp: i32) -> Mem {
        Mem {
            base: Some(base),
            index: None,
            disp,
        }
    }
}

impl fmt::Display for Mem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        let mut first = true;
        if let Some(b) = self.base {
            write!(f, "{b}")?;
            first = false;
        }
        if let Some((i, s)) = self.index {
            if !first {
                f.write_str("+")?;
            }
            write!(f, "{i}*{s}")?;
            first = false;
        }
        if first {
            write!(f, "{:#x}", self.disp)?;
        } else if self.disp > 0 {
            write!(f, "+{:#x}", self.disp)?;
        } else if self.disp < 0 {
            write!(f, "-{:#x}", -(self.disp as i64))?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opnd {
    R64(Reg),
    R32(Reg),
    R8(Reg),
    /// qword-sized memory operand (or an address, for `lea`)
    Mem(Mem),
    Imm(i64),
}

impl Opnd {
    pub fn reg(self) -> Option<Reg> {
        match self {
            Opnd::R64(r) | Opnd::R32(r) | Opnd::R8(r) => Some(r),
            _ => None,
        }
    }

    pub fn is_mem(self) -> bool {
        matches!(self, Opnd::Mem(_))
    }
}

impl fmt::Display for Opnd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Opnd::R64(r) => f.write_str(r.name64()),
            Opnd::R32(r) => f.write_str(r.name32()),
            Opnd::R8(r) => f.write_str(r.name8()),
            Opnd::Mem(m) => write!(f, "qword ptr {m}"),
            Opnd::Imm(v) => {
                if *v < 0 {
                    write!(f, "-{:#x}", (*v as i128).unsigned_abs())
                } else {
                    write!(f, "{v:#x}")
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mnemonic {
    Mov,
    Movzx,
    Add,
    Adc,
    Adcx,
    Adox,
    Sub,
    Sbb,
    Imul,
    Mul,
    Mulx,
    Shl,
    Shr,
    Shld,
    Shrd,
    And,
    Or,
    Xor,
    Not,
    Test,
    Bt,
    Setc,
    Seto,
    Setz,
    Cmovnz,
    Lea,
    Rorx,
    Push,
    Pop,
    Ret,
}

impl Mnemonic {
    pub const ALL: [Mnemonic; 30] = [
        Mnemonic::Mov,
        Mnemonic::Movzx,
        Mnemonic::Add,
        Mnemonic::Adc,
        Mnemonic::Adcx,
        Mnemonic::Adox,
        Mnemonic::Sub,
        Mnemonic::Sbb,
        Mnemonic::Imul,
        Mnemonic::Mul,
        Mnemonic::Mulx,
        Mnemonic::Shl,
        Mnemonic::Shr,
        Mnemonic::Shld,
        Mnemonic::Shrd,
        Mnemonic::And,
        Mnemonic::Or,
        Mnemonic::Xor,
        Mnemonic::Not,
        Mnemonic::Test,
        Mnemonic::Bt,
        Mnemonic::Setc,
        Mnemonic::Seto,
        Mnemonic::Setz,
        Mnemonic::Cmovnz,
        Mnemonic::Lea,
        Mnemonic::Rorx,
        Mnemonic::Push,
        Mnemonic::Pop,
        Mnemonic::Ret,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mnemonic::Mov => "mov",
            Mnemonic::Movzx => "movzx",
            Mnemonic::Add => "add",
            Mnemonic::Adc => "adc",
            Mnemonic::Adcx => "adcx",
            Mnemonic::Adox => "adox",
            Mnemonic::Sub => "sub",
            Mnemonic::Sbb => "sbb",
            Mnemonic::Imul => "imul",
            Mnemonic::Mul => "mul",
            Mnemonic::Mulx => "mulx",
            Mnemonic::Shl => "shl",
            Mnemonic::Shr => "shr",
            Mnemonic::Shld => "shld",
            Mnemonic::Shrd => "shrd",
            Mnemonic::And => "and",
            Mnemonic::Or => "or",
            Mnemonic::Xor => "xor",
            Mnemonic::Not => "not",
            Mnemonic::Test => "test",
            Mnemonic::Bt => "bt",
            Mnemonic::Setc => "setc",
            Mnemonic::Seto => "seto",
            Mnemonic::Setz => "setz",
            Mnemonic::Cmovnz => "cmovnz",
            Mnemonic::Lea => "lea",
            Mnemonic::Rorx => "rorx",
            Mnemonic::Push => "push",
            Mnemonic::Pop => "pop",
            Mnemonic::Ret => "ret",
        }
    }

    pub fn from_name(s: &str) -> Option<Mnemonic> {
        Mnemonic::ALL.iter().copied().find(|m| m.name() == s)
    }

    /// Flags left holding a meaningful or garbage value after execution. Any flag in
    /// this set must not carry a live value across the instruction.
    pub fn writes_flags(self) -> Flags {
        match self {
            Mnemonic::Adcx => Flags::CF,
            Mnemonic::Adox => Flags::OF,
            Mnemonic::Mov
            | Mnemonic::Movzx
            | Mnemonic::Mulx
            | Mnemonic::Not
            | Mnemonic::Setc
            | Mnemonic::Seto
            | Mnemonic::Setz
            | Mnemonic::Cmovnz
            | Mnemonic::Lea
            | Mnemonic::Rorx
            | Mnemonic::Push
            | Mnemonic::Pop
            | Mnemonic::Ret => Flags::NONE,
            _ => Flags::CF_OF,
        }
    }

    pub fn reads_flags(self) -> Flags {
        match self {
            Mnemonic::Adc | Mnemonic::Sbb | Mnemonic::Adcx | Mnemonic::Setc => Flags::CF,
            Mnemonic::Adox | Mnemonic::Seto => Flags::OF,
            _ => Flags::NONE,
        }
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of the two modeled carry flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Flags(u8);

impl Flags {
    pub const NONE: Flags = Flags(0);
    pub const CF: Flags = Flags(1);
    pub const OF: Flags = Flags(2);
    pub const CF_OF: Flags = Flags(3);

    pub fn contains(self, other: Flags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn intersects(self, other: Flags) -> bool {
        self.0 & other.0 != 0
    }

    pub fn union(self, other: Flags) -> Flags {
        Flags(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Inst {
    pub mnemonic: Mnemonic,
    pub operands: Vec<Opnd>,
}

impl Inst {
    pub fn new(mnemonic: Mnemonic, operands: &[Opnd]) -> Inst {
        Inst {
            mnemonic,
            operands: operands.to_vec(),
        }
    }

    /// Parses the Intel syntax produced by `Display`.
    pub fn parse(text: &str) -> Result<Inst, String> {
        let text = text.trim();
        let (name, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
        let mnemonic =
            Mnemonic::from_name(name).ok_or_else(|| format!("unknown mnemonic `{name}`"))?;
        let mut operands = Vec::new();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            operands.push(parse_operand(part)?);
        }
        Ok(Inst { mnemonic, operands })
    }
}

fn parse_reg(s: &str) -> Option<Opnd> {
    Reg::ALL.iter().find_map(|&r| {
        if r.name64() == s {
            Some(Opnd::R64(r))
        } else if r.name32() == s {
            Some(Opnd::R32(r))
        } else if r.name8() == s {
            Some(Opnd::R8(r))
        } else {
            None
        }
    })
}

fn parse_number(s: &str) -> Result<i64, String> {
    let (neg, digits) = match s.strip_prefix('-') {
        Some(d) => (true, d),
        None => (false, s),
    };
    let v = match digits.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => digits.parse::<u64>(),
    }
    .map_err(|_| format!("bad number `{s}`"))?;
    Ok(if neg {
        (v as i64).wrapping_neg()
    } else {
        v as i64
    })
}

fn parse_operand(s: &str) -> Result<Opnd, String> {
    if let Some(r) = parse_reg(s) {
        return Ok(r);
    }
    let addr = s.strip_prefix("qword ptr ").unwrap_or(s);
    if let Some(inner) = addr.strip_prefix('[').and_then(|a| a.strip_suffix(']')) {
        let mut mem = Mem {
            base: None,
            index: None,
            disp: 0,
        };
        let mut token = String::new();
        let mut terms = Vec::new();
        for c in inner.chars() {
            if (c == '+' || c == '-') && !token.is_empty() {
                terms.push(std::mem::take(&mut token));
            }
            token.push(c);
        }
        terms.push(token);
        for t in terms {
            let t = t.strip_prefix('+').unwrap_or(&t);
            if let Some((r, scale)) = t.split_once('*') {
                let Some(Opnd::R64(r)) = parse_reg(r) else {
                    return Err(format!("bad index in `{s}`"));
                };
                mem.index = Some((r, scale.parse().map_err(|_| format!("bad scale in `{s}`"))?));
            } else if let Some(Opnd::R64(r)) = parse_reg(t) {
                mem.base = Some(r);
            } else {
                mem.disp = parse_number(t)? as i32;
            }
        }
        return Ok(Opnd::Mem(mem));
    }
    parse_number(s).map(Opnd::Imm)
}

impl fmt::Display for Inst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic.name())?;
        for (i, o) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            if self.mnemonic == Mnemonic::Lea {
                if let Opnd::Mem(m) = o {
                    write!(f, "{m}")?;
                    continue;
                }
            }
            write!(f, "{o}")?;
        }
        Ok(())
    }
}

/// Signed 32-bit immediate that sign-extends back to `v`.
pub fn imm32(v: u64) -> Option<i64> {
    let s = v as i64;
    (s == s as i32 as i64).then_some(s)
}
