//! Machine-code encoder for the emitted instruction subset.
//!
//! Where x86 allows several encodings the one GNU `as` picks is used, so the bytes
//! can be compared against an external assembler directly.

use thiserror::Error;

use crate::x86::{Inst, Mem, Mnemonic, Opnd, Reg};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("cannot encode `{0}`")]
    Unsupported(String),
}

fn unsupported(i: &Inst) -> EncodeError {
    EncodeError::Unsupported(i.to_string())
}

fn fits_i8(v: i64) -> bool {
    v == v as i8 as i64
}

fn fits_i32(v: i64) -> bool {
    v == v as i32 as i64
}

/// Low 8-bit registers that only exist with a REX prefix.
fn needs_rex8(r: Reg) -> bool {
    matches!(r, Reg::Rsp | Reg::Rbp | Reg::Rsi | Reg::Rdi)
}

/// The r/m side of a ModRM byte.
#[derive(Clone, Copy)]
enum Rm {
    Reg(Reg),
    Mem(Mem),
}

struct Enc {
    out: Vec<u8>,
}

impl Enc {
    /// Emits `[REX] opcode ModRM [SIB] [disp]`. `w`: REX.W; `force_rex`: byte-register access.
    fn modrm(&mut self, prefix: &[u8], w: bool, force_rex: bool, opcode: &[u8], reg: u8, rm: Rm) {
        self.out.extend_from_slice(prefix);
        let (x, b) = match rm {
            Rm::Reg(r) => (0, r.code() >> 3),
            Rm::Mem(m) => (
                m.index.map_or(0, |(i, _)| i.code() >> 3),
                m.base.map_or(0, |b| b.code() >> 3),
            ),
        };
        let rex = 0x40 | (w as u8) << 3 | (reg >> 3) << 2 | x << 1 | b;
        if rex != 0x40 || force_rex {
            self.out.push(rex);
        }
        self.out.extend_from_slice(opcode);
        self.rm_bytes(reg & 7, rm);
    }

    fn rm_bytes(&mut self, reg: u8, rm: Rm) {
        let m = match rm {
            Rm::Reg(r) => {
                self.out.push(0xC0 | reg << 3 | (r.code() & 7));
                return;
            }
            Rm::Mem(m) => m,
        };
        let scale_bits = |s: u8| match s {
            1 => 0u8,
            2 => 1,
            4 => 2,
            _ => 3,
        };
        match (m.base, m.index) {
            (None, Some((i, s))) => {
                self.out.push(reg << 3 | 0b100);
                self.out
                    .push(scale_bits(s) << 6 | (i.code() & 7) << 3 | 0b101);
                self.out.extend_from_slice(&m.disp.to_le_bytes());
            }
            (Some(b), index) => {
                let low = b.code() & 7;
                let (md, disp): (u8, Vec<u8>) = if m.disp == 0 && low != 5 {
                    (0, vec![])
                } else if fits_i8(m.disp as i64) {
                    (1, vec![m.disp as i8 as u8])
                } else {
                    (2, m.disp.to_le_bytes().to_vec())
                };
                match index {
                    Some((i, s)) => {
                        self.out.push(md << 6 | reg << 3 | 0b100);
                        self.out
                            .push(scale_bits(s) << 6 | (i.code() & 7) << 3 | low);
                    }
                    None if low == 4 => {
                        self.out.push(md << 6 | reg << 3 | 0b100);
                        self.out.push(0x24);
                    }
                    None => self.out.push(md << 6 | reg << 3 | low),
                }
                self.out.extend_from_slice(&disp);
            }
            (None, None) => {
                // absolute disp32 through SIB without base or index
                self.out.push(reg << 3 | 0b100);
                self.out.push(0x25);
                self.out.extend_from_slice(&m.disp.to_le_bytes());
            }
        }
    }

    /// Three-byte VEX prefix with W1, L0; `map` 2 = 0F38, 3 = 0F3A; `pp` 3 = F2.
    fn vex(&mut self, map: u8, pp: u8, reg: Reg, vvvv: u8, rm: Rm, opcode: u8) {
        let (x, b) = match rm {
            Rm::Reg(r) => (0, r.code() >> 3),
            Rm::Mem(m) => (
                m.index.map_or(0, |(i, _)| i.code() >> 3),
                m.base.map_or(0, |b| b.code() >> 3),
            ),
        };
        let r = reg.code() >> 3;
        self.out.push(0xC4);
        self.out
            .push((r ^ 1) << 7 | (x ^ 1) << 6 | (b ^ 1) << 5 | map);
        self.out.push(1 << 7 | (!vvvv & 15) << 3 | pp);
        self.out.push(opcode);
        self.rm_bytes(reg.code() & 7, rm);
    }
}

fn rm_of(o: Opnd) -> Option<Rm> {
    match o {
        Opnd::R64(r) => Some(Rm::Reg(r)),
        Opnd::Mem(m) => Some(Rm::Mem(m)),
        _ => None,
    }
}

/// `(MR opcode, RM opcode, /digit, rax short imm32 opcode)` of the classic ALU group.
fn alu(m: Mnemonic) -> Option<(u8, u8, u8, u8)> {
    Some(match m {
        Mnemonic::Add => (0x01, 0x03, 0, 0x05),
        Mnemonic::Or => (0x09, 0x0B, 1, 0x0D),
        Mnemonic::Adc => (0x11, 0x13, 2, 0x15),
        Mnemonic::Sbb => (0x19, 0x1B, 3, 0x1D),
        Mnemonic::And => (0x21, 0x23, 4, 0x25),
        Mnemonic::Sub => (0x29, 0x2B, 5, 0x2D),
        Mnemonic::Xor => (0x31, 0x33, 6, 0x35),
        _ => return None,
    })
}

/// Encodes one instruction.
pub fn encode(inst: &Inst) -> Result<Vec<u8>, EncodeError> {
    let mut e = Enc {
        out: Vec::with_capacity(8),
    };
    let ops = inst.operands.as_slice();
    let bad = || unsupported(inst);
    use Mnemonic as M;
    use Opnd::*;
    match (inst.mnemonic, ops) {
        (M::Ret, []) => e.out.push(0xC3),
        (M::Push, [R64(r)]) | (M::Pop, [R64(r)]) => {
            if r.code() >= 8 {
                e.out.push(0x41);
            }
            let base = if inst.mnemonic == M::Push { 0x50 } else { 0x58 };
            e.out.push(base + (r.code() & 7));
        }
        (M::Mov, [R64(d), R64(s)]) => e.modrm(&[], true, false, &[0x89], s.code(), Rm::Reg(*d)),
        (M::Mov, [R64(d), Mem(m)]) => e.modrm(&[], true, false, &[0x8B], d.code(), Rm::Mem(*m)),
        (M::Mov, [Mem(m), R64(s)]) => e.modrm(&[], true, false, &[0x89], s.code(), Rm::Mem(*m)),
        (M::Mov, [d @ (R64(_) | Mem(_)), Imm(v)]) => {
            if fits_i32(*v) {
                e.modrm(&[], true, false, &[0xC7], 0, rm_of(*d).unwrap());
                e.out.extend_from_slice(&(*v as i32).to_le_bytes());
            } else if let R64(r) = d {
                e.out.push(0x48 | r.code() >> 3);
                e.out.push(0xB8 + (r.code() & 7));
                e.out.extend_from_slice(&v.to_le_bytes());
            } else {
                return Err(bad());
            }
        }
        (M::Movzx, [R32(d), R8(s)]) => {
            e.modrm(
                &[],
                false,
                needs_rex8(*s),
                &[0x0F, 0xB6],
                d.code(),
                Rm::Reg(*s),
            );
        }
        (m, [R64(d), src]) if alu(m).is_some() && !matches!(src, Imm(_)) => {
            let (mr, rmop, _, _) = alu(m).unwrap();
            match src {
                R64(s) => e.modrm(&[], true, false, &[mr], s.code(), Rm::Reg(*d)),
                Mem(mm) => e.modrm(&[], true, false, &[rmop], d.code(), Rm::Mem(*mm)),
                _ => return Err(bad()),
            }
        }
        (m, [R64(d), Imm(v)]) if alu(m).is_some() => {
            let (_, _, digit, short) = alu(m).unwrap();
            if fits_i8(*v) {
                e.modrm(&[], true, false, &[0x83], digit, Rm::Reg(*d));
                e.out.push(*v as i8 as u8);
            } else if fits_i32(*v) {
                if *d == Reg::Rax {
                    e.out.extend_from_slice(&[0x48, short]);
                } else {
                    e.modrm(&[], true, false, &[0x81], digit, Rm::Reg(*d));
                }
                e.out.extend_from_slice(&(*v as i32).to_le_bytes());
            } else {
                return Err(bad());
            }
        }
        (M::Adcx | M::Adox, [R64(d), src]) => {
            let prefix = if inst.mnemonic == M::Adcx { 0x66 } else { 0xF3 };
            e.modrm(
                &[prefix],
                true,
                false,
                &[0x0F, 0x38, 0xF6],
                d.code(),
                rm_of(*src).ok_or_else(bad)?,
            );
        }
        (M::Imul, [R64(d), src]) => e.modrm(
            &[],
            true,
            false,
            &[0x0F, 0xAF],
            d.code(),
            rm_of(*src).ok_or_else(bad)?,
        ),
        (M::Imul, [R64(d), src, Imm(v)]) => {
            let rm = rm_of(*src).ok_or_else(bad)?;
            if fits_i8(*v) {
                e.modrm(&[], true, false, &[0x6B], d.code(), rm);
                e.out.push(*v as i8 as u8);
            } else if fits_i32(*v) {
                e.modrm(&[], true, false, &[0x69], d.code(), rm);
                e.out.extend_from_slice(&(*v as i32).to_le_bytes());
            } else {
                return Err(bad());
            }
        }
        (M::Mul, [src]) => e.modrm(&[], true, false, &[0xF7], 4, rm_of(*src).ok_or_else(bad)?),
        (M::Not, [R64(d)]) => e.modrm(&[], true, false, &[0xF7], 2, Rm::Reg(*d)),
        (M::Mulx, [R64(hi), R64(lo), src]) => {
            e.vex(2, 3, *hi, lo.code(), rm_of(*src).ok_or_else(bad)?, 0xF6)
        }
        (M::Rorx, [R64(d), src, Imm(k)]) if (0..64).contains(k) => {
            e.vex(3, 3, *d, 0, rm_of(*src).ok_or_else(bad)?, 0xF0);
            e.out.push(*k as u8);
        }
        (M::Shl | M::Shr, [R64(d), Imm(k)]) if (0..64).contains(k) => {
            let digit = if inst.mnemonic == M::Shl { 4 } else { 5 };
            if *k == 1 {
                e.modrm(&[], true, false, &[0xD1], digit, Rm::Reg(*d));
            } else {
                e.modrm(&[], true, false, &[0xC1], digit, Rm::Reg(*d));
                e.out.push(*k as u8);
            }
        }
        (M::Shld | M::Shrd, [R64(d), R64(s), Imm(k)]) if (0..64).contains(k) => {
            let op = if inst.mnemonic == M::Shld { 0xA4 } else { 0xAC };
            e.modrm(&[], true, false, &[0x0F, op], s.code(), Rm::Reg(*d));
            e.out.push(*k as u8);
        }
        (M::Test, [R64(a), R64(b)]) => e.modrm(&[], true, false, &[0x85], b.code(), Rm::Reg(*a)),
        (M::Bt, [R64(r), Imm(k)]) if (0..64).contains(k) => {
            e.modrm(&[], true, false, &[0x0F, 0xBA], 4, Rm::Reg(*r));
            e.out.push(*k as u8);
        }
        (M::Setc | M::Seto | M::Setz, [R8(r)]) => {
            let op = match inst.mnemonic {
                M::Setc => 0x92,
                M::Seto => 0x90,
                _ => 0x94,
            };
            e.modrm(&[], false, needs_rex8(*r), &[0x0F, op], 0, Rm::Reg(*r));
        }
        (M::Cmovnz, [R64(d), src]) => e.modrm(
            &[],
            true,
            false,
            &[0x0F, 0x45],
            d.code(),
            rm_of(*src).ok_or_else(bad)?,
        ),
        (M::Lea, [R64(d), Mem(m)]) => e.modrm(&[], true, false, &[0x8D], d.code(), Rm::Mem(*m)),
        _ => return Err(bad()),
    }
    Ok(e.out)
}

/// Encodes a whole function body.
pub fn encode_all(insts: &[Inst]) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(insts.len() * 5);
    for i in insts {
        out.extend(encode(i)?);
    }
    Ok(out)
}

/// Coarse form of an instruction: mnemonic plus operand kinds, with immediates
/// classified by the encoding size the encoder picks.
pub fn form_signature(inst: &Inst) -> String {
    let mut s = inst.mnemonic.name().to_string();
    for (i, o) in inst.operands.iter().enumerate() {
        s.push_str(if i == 0 { " " } else { "," });
        let kind = match o {
            Opnd::R64(_) => "r64",
            Opnd::R32(_) => "r32",
            Opnd::R8(_) => "r8",
            Opnd::Mem(_) => "m",
            Opnd::Imm(v) if fits_i8(*v) => "imm8",
            Opnd::Imm(v) if fits_i32(*v) => "imm32",
            Opnd::Imm(_) => "imm64",
        };
        s.push_str(kind);
    }
    s
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(text: &str) -> String {
        to_hex(&encode(&Inst::parse(text).unwrap()).unwrap())
    }

    #[test]
    fn known_encodings() {
        assert_eq!(hex("mov rax, 0x5"), "48c7c005000000");
        assert_eq!(hex("shl rax, 0x1"), "48d1e0");
        assert_eq!(hex("add rax, 0x1000"), "480500100000");
        assert_eq!(hex("lea rax, [rbx*8]"), "488d04dd00000000");
        assert_eq!(hex("lea rax, [r13+rbx*1]"), "498d441d00");
        assert_eq!(hex("movzx eax, sil"), "400fb6c6");
        assert_eq!(hex("setc al"), "0f92c0");
        assert_eq!(hex("mulx r9, r8, rbx"), "c462bbf6cb");
        assert_eq!(hex("rorx rax, rbx, 0x1"), "c4e3fbf0c301");
        assert_eq!(hex("adox r9, qword ptr [rsi]"), "f34c0f38f60e");
        assert_eq!(hex("bt rax, 0x0"), "480fbae000");
        assert_eq!(hex("mov qword ptr [rdi+0x8], 0x5"), "48c7470805000000");
        assert_eq!(hex("push r12"), "4154");
        assert_eq!(hex("pop rbx"), "5b");
        assert_eq!(hex("ret"), "c3");
        assert_eq!(hex("mov rax, 0xffffffff"), "48b8ffffffff00000000");
    }

    #[test]
    fn unsupported_forms_are_errors() {
        let i = Inst::new(Mnemonic::Shl, &[Opnd::R64(Reg::Rax), Opnd::R64(Reg::Rcx)]);
        assert!(encode(&i).is_err());
        let i = Inst::new(Mnemonic::Add, &[Opnd::R64(Reg::Rax), Opnd::Imm(1 << 40)]);
        assert!(encode(&i).is_err());
    }

    #[test]
    fn signatures() {
        assert_eq!(
            form_signature(&Inst::parse("imul rax, qword ptr [rsi], 0x13").unwrap()),
            "imul r64,m,imm8"
        );
        assert_eq!(form_signature(&Inst::parse("ret").unwrap()), "ret");
    }
}
