//! Reference interpreter for the emitted x86-64 subset.
//!
//! Used as a second executor: on hosts without x86-64, for the simulated backend,
//! and in tests because it is stricter than hardware. Registers and flags carry a
//! "defined" state; reading anything the function never wrote (or that the last
//! instruction left undefined) is an error, as is touching memory outside the
//! argument arrays and the function's own stack frame, or returning with a
//! clobbered callee-saved register.

use thiserror::Error;

use crate::emit::AsmProgram;
use crate::x86::{Inst, Mem, Mnemonic, Opnd, Reg};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmuError {
    #[error("instruction {at}: read of undefined register {reg}")]
    UndefinedRegister { at: usize, reg: Reg },
    #[error("instruction {at}: read of undefined flag {flag}")]
    UndefinedFlag { at: usize, flag: &'static str },
    #[error("instruction {at}: read of uninitialized memory {addr:#x}")]
    UndefinedMemory { at: usize, addr: u64 },
    #[error("instruction {at}: access outside the arguments and stack frame at {addr:#x}")]
    OutOfBounds { at: usize, addr: u64 },
    #[error("instruction {at}: write to input array at {addr:#x}")]
    WriteToInput { at: usize, addr: u64 },
    #[error("instruction {at}: unsupported `{text}`")]
    Unsupported { at: usize, text: String },
    #[error("returned with {0} not restored")]
    CalleeSavedClobbered(Reg),
    #[error("returned with an unbalanced stack")]
    StackImbalance,
    #[error("ran off the end without ret")]
    NoReturn,
    #[error("output word {0} never written")]
    OutputNotWritten(usize),
    #[error("expected {expected} input words, got {got}")]
    InputCount { expected: usize, got: usize },
}

const OUT_BASE: u64 = 0x1000_0000;
const ARG_BASE: u64 = 0x2000_0000;
const ARG_STRIDE: u64 = 0x0100_0000;
const STACK_TOP: u64 = 0x7fff_0000;
const STACK_WORDS: usize = 1 << 12;
const RET_ADDR: u64 = 0xdead_beef_0000_0001;

fn sentinel(r: Reg) -> u64 {
    0x5a5a_0000_0000_0000 | (r.code() as u64) << 8 | 0x3c
}

#[derive(Debug, Clone, Copy)]
enum Place {
    Out(usize),
    Arg(usize, usize),
    Stack(usize),
}

struct Machine<'a> {
    regs: [u64; 16],
    /// Defined bytes per register, one bit per byte.
    defined: [u8; 16],
    cf: Option<bool>,
    of: Option<bool>,
    zf: Option<bool>,
    out: Vec<Option<u64>>,
    args: Vec<&'a [u64]>,
    stack: Vec<Option<u64>>,
    at: usize,
}

impl<'a> Machine<'a> {
    fn reg(&self, r: Reg) -> Result<u64, EmuError> {
        if self.defined[r as usize] != 0xff {
            return Err(EmuError::UndefinedRegister {
                at: self.at,
                reg: r,
            });
        }
        Ok(self.regs[r as usize])
    }

    fn set_reg(&mut self, r: Reg, v: u64) {
        self.regs[r as usize] = v;
        self.defined[r as usize] = 0xff;
    }

    fn place(&self, addr: u64) -> Result<Place, EmuError> {
        let oob = EmuError::OutOfBounds { at: self.at, addr };
        if !addr.is_multiple_of(8) {
            return Err(oob);
        }
        if (OUT_BASE..OUT_BASE + 8 * self.out.len() as u64).contains(&addr) {
            return Ok(Place::Out(((addr - OUT_BASE) / 8) as usize));
        }
        if (ARG_BASE..ARG_BASE + ARG_STRIDE * self.args.len() as u64).contains(&addr) {
            let a = ((addr - ARG_BASE) / ARG_STRIDE) as usize;
            let i = ((addr - ARG_BASE - a as u64 * ARG_STRIDE) / 8) as usize;
            return if i < self.args[a].len() {
                Ok(Place::Arg(a, i))
            } else {
                Err(oob)
            };
        }
        let low = STACK_TOP - 8 * STACK_WORDS as u64;
        // the return address sits at STACK_TOP - 8; the frame lies below it
        if (low..STACK_TOP).contains(&addr) {
            return Ok(Place::Stack(((STACK_TOP - 8 - addr) / 8) as usize));
        }
        Err(oob)
    }

    fn load(&self, addr: u64) -> Result<u64, EmuError> {
        let v = match self.place(addr)? {
            Place::Out(i) => self.out[i],
            Place::Arg(a, i) => Some(self.args[a][i]),
            Place::Stack(i) => self.stack[i],
        };
        v.ok_or(EmuError::UndefinedMemory { at: self.at, addr })
    }

    fn store(&mut self, addr: u64, v: u64) -> Result<(), EmuError> {
        match self.place(addr)? {
            Place::Out(i) => self.out[i] = Some(v),
            Place::Arg(..) => return Err(EmuError::WriteToInput { at: self.at, addr }),
            Place::Stack(i) => self.stack[i] = Some(v),
        }
        Ok(())
    }

    fn addr(&self, m: &Mem) -> Result<u64, EmuError> {
        let mut a = m.disp as i64 as u64;
        if let Some(b) = m.base {
            a = a.wrapping_add(self.reg(b)?);
        }
        if let Some((i, s)) = m.index {
            a = a.wrapping_add(self.reg(i)?.wrapping_mul(s as u64));
        }
        Ok(a)
    }

    fn read(&self, o: &Opnd) -> Result<u64, EmuError> {
        match o {
            Opnd::R64(r) => self.reg(*r),
            Opnd::R32(r) => {
                if self.defined[*r as usize] & 0x0f != 0x0f {
                    return Err(EmuError::UndefinedRegister {
                        at: self.at,
                        reg: *r,
                    });
                }
                Ok(self.regs[*r as usize] & 0xffff_ffff)
            }
            Opnd::R8(r) => {
                if self.defined[*r as usize] & 1 == 0 {
                    return Err(EmuError::UndefinedRegister {
                        at: self.at,
                        reg: *r,
                    });
                }
                Ok(self.regs[*r as usize] & 0xff)
            }
            Opnd::Mem(m) => self.load(self.addr(m)?),
            Opnd::Imm(v) => Ok(*v as u64),
        }
    }

    fn write(&mut self, o: &Opnd, v: u64) -> Result<(), EmuError> {
        match o {
            Opnd::R64(r) => self.set_reg(*r, v),
            // 32-bit writes zero-extend
            Opnd::R32(r) => self.set_reg(*r, v & 0xffff_ffff),
            Opnd::R8(r) => {
                let i = *r as usize;
                self.regs[i] = (self.regs[i] & !0xff) | (v & 0xff);
                self.defined[i] |= 1;
            }
            Opnd::Mem(m) => {
                let a = self.addr(m)?;
                self.store(a, v)?;
            }
            Opnd::Imm(_) => return Err(self.unsupported_here()),
        }
        Ok(())
    }

    fn unsupported_here(&self) -> EmuError {
        EmuError::Unsupported {
            at: self.at,
            text: String::new(),
        }
    }

    fn flag(&self, f: Option<bool>, name: &'static str) -> Result<bool, EmuError> {
        f.ok_or(EmuError::UndefinedFlag {
            at: self.at,
            flag: name,
        })
    }

    fn push(&mut self, v: u64) -> Result<(), EmuError> {
        let sp = self.reg(Reg::Rsp)?.wrapping_sub(8);
        self.set_reg(Reg::Rsp, sp);
        self.store(sp, v)
    }

    fn pop(&mut self) -> Result<u64, EmuError> {
        let sp = self.reg(Reg::Rsp)?;
        let v = self.load(sp)?;
        self.set_reg(Reg::Rsp, sp.wrapping_add(8));
        Ok(v)
    }

    fn step(&mut self, inst: &Inst) -> Result<bool, EmuError> {
        use Mnemonic as M;
        let ops = &inst.operands;
        let bad = || EmuError::Unsupported {
            at: self.at,
            text: inst.to_string(),
        };
        let zf_of = |v: u64| Some(v == 0);
        match (inst.mnemonic, ops.as_slice()) {
            (M::Mov, [d, s]) => {
                let v = self.read(s)?;
                self.write(d, v)?;
            }
            (M::Movzx, [d @ Opnd::R32(_), s @ Opnd::R8(_)]) => {
                let v = self.read(s)?;
                self.write(d, v)?;
            }
            (M::Add | M::Adc | M::Sub | M::Sbb, [d, s]) => {
                let a = self.read(d)?;
                let b = self.read(s)?;
                let c = match inst.mnemonic {
                    M::Adc | M::Sbb => self.flag(self.cf, "CF")? as u64,
                    _ => 0,
                };
                let (r, carry, ovf) = if matches!(inst.mnemonic, M::Add | M::Adc) {
                    let wide = a as u128 + b as u128 + c as u128;
                    let r = wide as u64;
                    (r, wide >> 64 != 0, ((a ^ r) & (b ^ r)) >> 63 == 1)
                } else {
                    let r = a.wrapping_sub(b).wrapping_sub(c);
                    let borrow = (a as u128) < b as u128 + c as u128;
                    (r, borrow, ((a ^ b) & (a ^ r)) >> 63 == 1)
                };
                self.write(d, r)?;
                self.cf = Some(carry);
                self.of = Some(ovf);
                self.zf = zf_of(r);
            }
            (M::Adcx | M::Adox, [d, s]) => {
                let a = self.read(d)?;
                let b = self.read(s)?;
                let incoming = if inst.mnemonic == M::Adcx {
                    self.cf
                } else {
                    self.of
                };
                let carry = match (incoming, d, s) {
                    // `adcx r, r` moves bit 63 of r into the flag whatever the incoming
                    // flag; only the (discarded) sum depends on it
                    (None, Opnd::R64(x), Opnd::R64(y)) if x == y => {
                        self.defined[*x as usize] = 0;
                        Some(a >> 63 == 1)
                    }
                    _ => {
                        let x = self
                            .flag(incoming, if inst.mnemonic == M::Adcx { "CF" } else { "OF" })?;
                        let wide = a as u128 + b as u128 + x as u128;
                        self.write(d, wide as u64)?;
                        Some(wide >> 64 != 0)
                    }
                };
                if inst.mnemonic == M::Adcx {
                    self.cf = carry;
                } else {
                    self.of = carry;
                }
            }
            (M::And | M::Or | M::Xor, [d, s]) => {
                let a = self.read(d)?;
                let b = self.read(s)?;
                let r = match inst.mnemonic {
                    M::And => a & b,
                    M::Or => a | b,
                    _ => a ^ b,
                };
                self.write(d, r)?;
                self.cf = Some(false);
                self.of = Some(false);
                self.zf = zf_of(r);
            }
            (M::Test, [a, b]) => {
                let r = self.read(a)? & self.read(b)?;
                self.cf = Some(false);
                self.of = Some(false);
                self.zf = zf_of(r);
            }
            (M::Imul, [d, s]) | (M::Imul, [d, s, _]) => {
                let a = self.read(s)? as i64;
                let b = if ops.len() == 3 {
                    self.read(&ops[2])? as i64
                } else {
                    self.read(d)? as i64
                };
                let wide = a as i128 * b as i128;
                let r = wide as i64;
                self.write(d, r as u64)?;
                let ovf = wide != r as i128;
                self.cf = Some(ovf);
                self.of = Some(ovf);
                self.zf = None;
            }
            (M::Mul, [s]) => {
                let wide = self.reg(Reg::Rax)? as u128 * self.read(s)? as u128;
                self.set_reg(Reg::Rax, wide as u64);
                self.set_reg(Reg::Rdx, (wide >> 64) as u64);
                let ovf = Some(wide >> 64 != 0);
                self.cf = ovf;
                self.of = ovf;
                self.zf = None;
            }
            (M::Mulx, [hi, lo, s]) => {
                let wide = self.reg(Reg::Rdx)? as u128 * self.read(s)? as u128;
                self.write(lo, wide as u64)?;
                self.write(hi, (wide >> 64) as u64)?;
            }
            (M::Rorx, [d, s, Opnd::Imm(k)]) => {
                let v = self.read(s)?.rotate_right((*k & 63) as u32);
                self.write(d, v)?;
            }
            (M::Shl | M::Shr, [d, Opnd::Imm(k)]) => {
                let k = (*k & 63) as u32;
                let a = self.read(d)?;
                if k == 0 {
                    return Ok(false);
                }
                let (r, cf) = if inst.mnemonic == M::Shl {
                    (a << k, (a >> (64 - k)) & 1 == 1)
                } else {
                    (a >> k, (a >> (k - 1)) & 1 == 1)
                };
                self.write(d, r)?;
                self.cf = Some(cf);
                self.of = if k == 1 {
                    Some(if inst.mnemonic == M::Shl {
                        (r >> 63 == 1) != cf
                    } else {
                        a >> 63 == 1
                    })
                } else {
                    None
                };
                self.zf = zf_of(r);
            }
            (M::Shld | M::Shrd, [d, s, Opnd::Imm(k)]) => {
                let k = (*k & 63) as u32;
                let a = self.read(d)?;
                let b = self.read(s)?;
                if k == 0 {
                    return Ok(false);
                }
                let (r, cf) = if inst.mnemonic == M::Shld {
                    ((a << k) | (b >> (64 - k)), (a >> (64 - k)) & 1 == 1)
                } else {
                    ((a >> k) | (b << (64 - k)), (a >> (k - 1)) & 1 == 1)
                };
                self.write(d, r)?;
                self.cf = Some(cf);
                self.of = if k == 1 {
                    Some((r >> 63) != (a >> 63))
                } else {
                    None
                };
                self.zf = zf_of(r);
            }
            (M::Not, [d]) => {
                let v = !self.read(d)?;
                self.write(d, v)?;
            }
            (M::Bt, [r, Opnd::Imm(k)]) => {
                let v = self.read(r)?;
                self.cf = Some((v >> (*k & 63)) & 1 == 1);
                self.of = None;
            }
            (M::Setc | M::Seto | M::Setz, [d @ Opnd::R8(_)]) => {
                let bit = match inst.mnemonic {
                    M::Setc => self.flag(self.cf, "CF")?,
                    M::Seto => self.flag(self.of, "OF")?,
                    _ => self.flag(self.zf, "ZF")?,
                };
                self.write(d, bit as u64)?;
            }
            (M::Cmovnz, [d, s]) => {
                // the source is read unconditionally, as on hardware
                let v = self.read(s)?;
                if !self.flag(self.zf, "ZF")? {
                    self.write(d, v)?;
                } else if let Opnd::R64(r) = d {
                    // 64-bit cmov leaves the destination as is but it must be defined
                    self.reg(*r)?;
                }
            }
            (M::Lea, [d, Opnd::Mem(m)]) => {
                let a = self.addr(m)?;
                self.write(d, a)?;
            }
            (M::Push, [s]) => {
                let v = self.read(s)?;
                self.push(v)?;
            }
            (M::Pop, [d]) => {
                let v = self.pop()?;
                self.write(d, v)?;
            }
            (M::Ret, []) => return Ok(true),
            _ => return Err(bad()),
        }
        Ok(false)
    }
}

/// Runs `insts` as `f(out, arg0, arg1, ...)` on inputs flattened in argument order.
pub fn emulate(
    insts: &[Inst],
    arg_lens: &[usize],
    out_len: usize,
    inputs: &[u64],
) -> Result<Vec<u64>, EmuError> {
    let expected: usize = arg_lens.iter().sum();
    if expected != inputs.len() {
        return Err(EmuError::InputCount {
            expected,
            got: inputs.len(),
        });
    }
    if arg_lens.len() > 5 {
        return Err(EmuError::Unsupported {
            at: 0,
            text: format!("{} input pointers", arg_lens.len()),
        });
    }
    let mut args = Vec::with_capacity(arg_lens.len());
    let mut off = 0;
    for &n in arg_lens {
        args.push(&inputs[off..off + n]);
        off += n;
    }
    let mut m = Machine {
        regs: [0; 16],
        defined: [0; 16],
        cf: None,
        of: None,
        zf: None,
        out: vec![None; out_len],
        args,
        stack: vec![None; STACK_WORDS],
        at: 0,
    };
    for r in Reg::CALLEE_SAVED {
        m.set_reg(r, sentinel(r));
    }
    m.set_reg(Reg::Rsp, STACK_TOP - 8);
    m.stack[0] = Some(RET_ADDR);
    m.set_reg(Reg::Rdi, OUT_BASE);
    for i in 0..arg_lens.len() {
        m.set_reg(Reg::ARGS[i + 1], ARG_BASE + ARG_STRIDE * i as u64);
    }

    for (at, inst) in insts.iter().enumerate() {
        m.at = at;
        if m.step(inst)? {
            if m.reg(Reg::Rsp)? != STACK_TOP - 8 || m.load(STACK_TOP - 8)? != RET_ADDR {
                return Err(EmuError::StackImbalance);
            }
            for r in Reg::CALLEE_SAVED {
                if m.defined[r as usize] != 0xff || m.regs[r as usize] != sentinel(r) {
                    return Err(EmuError::CalleeSavedClobbered(r));
                }
            }
            return m
                .out
                .iter()
                .enumerate()
                .map(|(i, v)| v.ok_or(EmuError::OutputNotWritten(i)))
                .collect();
        }
    }
    Err(EmuError::NoReturn)
}

pub fn emulate_program(p: &AsmProgram, inputs: &[u64]) -> Result<Vec<u64>, EmuError> {
    emulate(&p.insts, &p.arg_lens, p.out_len, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prog(lines: &[&str]) -> Vec<Inst> {
        lines.iter().map(|l| Inst::parse(l).unwrap()).collect()
    }

    #[test]
    fn add_two_words() {
        let p = prog(&[
            "mov rax, qword ptr [rsi]",
            "add rax, qword ptr [rdx]",
            "mov qword ptr [rdi], rax",
            "ret",
        ]);
        assert_eq!(emulate(&p, &[1, 1], 1, &[2, 40]).unwrap(), [42]);
    }

    #[test]
    fn undefined_reads_are_caught() {
        let p = prog(&["mov qword ptr [rdi], rax", "ret"]);
        assert!(matches!(
            emulate(&p, &[], 1, &[]),
            Err(EmuError::UndefinedRegister { reg: Reg::Rax, .. })
        ));
        let p = prog(&[
            "mov rax, 0x0",
            "adc rax, rax",
            "mov qword ptr [rdi], rax",
            "ret",
        ]);
        assert!(matches!(
            emulate(&p, &[], 1, &[]),
            Err(EmuError::UndefinedFlag { flag: "CF", .. })
        ));
        let p = prog(&["mov rax, 0x3", "imul rax, rax", "setz al", "ret"]);
        assert!(matches!(
            emulate(&p, &[], 0, &[]),
            Err(EmuError::UndefinedFlag { flag: "ZF", .. })
        ));
    }

    #[test]
    fn bounds_and_abi() {
        let p = prog(&[
            "mov rax, qword ptr [rsi+0x8]",
            "mov qword ptr [rdi], rax",
            "ret",
        ]);
        assert!(matches!(
            emulate(&p, &[1], 1, &[7]),
            Err(EmuError::OutOfBounds { .. })
        ));
        let p = prog(&["mov qword ptr [rsi], 0x1", "ret"]);
        assert!(matches!(
            emulate(&p, &[1], 0, &[7]),
            Err(EmuError::WriteToInput { .. })
        ));
        let p = prog(&["mov rbx, 0x1", "ret"]);
        assert_eq!(
            emulate(&p, &[], 0, &[]),
            Err(EmuError::CalleeSavedClobbered(Reg::Rbx))
        );
        let p = prog(&["push rbx", "mov rbx, 0x1", "pop rbx", "ret"]);
        assert_eq!(emulate(&p, &[], 0, &[]), Ok(vec![]));
        let p = prog(&["sub rsp, 0x8", "mov rax, qword ptr [rsp]", "ret"]);
        assert!(matches!(
            emulate(&p, &[], 0, &[]),
            Err(EmuError::UndefinedMemory { .. })
        ));
        let p = prog(&["push rax"]);
        assert!(emulate(&p, &[], 0, &[]).is_err());
        assert_eq!(
            emulate(&prog(&["ret"]), &[], 1, &[]),
            Err(EmuError::OutputNotWritten(0))
        );
    }

    #[test]
    fn flag_instructions() {
        // 2^64-1 + 1: carry out, zero result; mulx 2^63 * 4
        let p = prog(&[
            "mov rax, qword ptr [rsi]",
            "add rax, 0x1",
            "setc cl",
            "movzx ecx, cl",
            "mov qword ptr [rdi], rcx",
            "mov rdx, qword ptr [rsi+0x8]",
            "mov r8, 0x4",
            "mulx r9, r10, r8",
            "mov qword ptr [rdi+0x8], r9",
            "mov qword ptr [rdi+0x10], r10",
            "ret",
        ]);
        assert_eq!(
            emulate(&p, &[2], 3, &[u64::MAX, 1 << 63]).unwrap(),
            [1, 2, 0]
        );
    }
}
