//! Turns a model (order + templates) into a complete x86-64 function.

use std::fmt::Write as _;

use thiserror::Error;

use crate::catalog::{shift_add_terms, Features, Shape, TemplateKind};
use crate::ir::{Def, FunctionSpec, Operand, ValueId};
use crate::model::Model;
use crate::regalloc::{init_state, Flag, MachineState, RegallocError};
use crate::x86::{imm32, Flags, Inst, Mem, Mnemonic, Opnd, Reg};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmitError {
    #[error(transparent)]
    Regalloc(#[from] RegallocError),
}

/// An emitted function plus what a caller needs to invoke it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsmProgram {
    pub name: String,
    pub insts: Vec<Inst>,
    pub spill_count: usize,
    /// Element count of each input array, in argument order.
    pub arg_lens: Vec<usize>,
    pub out_len: usize,
}

impl AsmProgram {
    pub fn instruction_count(&self) -> usize {
        self.insts.len()
    }

    /// GNU-assembler compatible Intel-syntax listing. `header` lines become comments.
    pub fn listing(&self, header: &[String]) -> String {
        let mut s = String::new();
        for h in header {
            let _ = writeln!(s, "# {h}");
        }
        let _ = writeln!(s, ".intel_syntax noprefix");
        let _ = writeln!(s, ".text");
        let _ = writeln!(s, ".globl {}", self.name);
        let _ = writeln!(s, "{}:", self.name);
        for i in &self.insts {
            let _ = writeln!(s, "    {i}");
        }
        s
    }
}

/// Mnemonics of a listing that transfer control conditionally (`j*` other than `jmp`, `loop*`).
pub fn conditional_branches(listing: &str) -> Vec<String> {
    listing
        .lines()
        .map(str::trim)
        .filter(|l| !l.starts_with('#') && !l.starts_with('.') && !l.ends_with(':'))
        .filter_map(|l| l.split_whitespace().next())
        .filter(|m| {
            (m.starts_with('j') && *m != "jmp") || m.starts_with("loop") || m.starts_with("jrcxz")
        })
        .map(str::to_string)
        .collect()
}

pub fn assemble_ir(model: &Model) -> Result<AsmProgram, EmitError> {
    Emitter::new(model, false, false)?
        .run(model)
        .map(|(p, _)| p)
}

/// Like [`assemble_ir`] but audits the machine state after every operation and
/// returns a state dump per operation.
pub fn assemble_traced(model: &Model) -> Result<(AsmProgram, Vec<String>), EmitError> {
    Emitter::new(model, true, true)?.run(model)
}

struct Emitter<'a> {
    spec: &'a FunctionSpec,
    st: MachineState,
    body: Vec<Inst>,
    features: Features,
    /// Return indices per value.
    returned: Vec<Vec<usize>>,
    audit: bool,
    trace: Option<Vec<String>>,
}

fn r64(r: Reg) -> Opnd {
    Opnd::R64(r)
}

impl<'a> Emitter<'a> {
    fn new(model: &'a Model, audit: bool, trace: bool) -> Result<Self, EmitError> {
        let spec = model.spec();
        let mut st = init_state(spec, model.features())?;
        st.set_schedule(spec, model.order());
        let mut returned = vec![Vec::new(); spec.vars.len()];
        for (i, r) in spec.returns.iter().enumerate() {
            if let Operand::Var(v) = r {
                returned[v.index()].push(i);
            }
        }
        Ok(Emitter {
            spec,
            st,
            body: Vec::new(),
            features: model.features(),
            returned,
            audit,
            trace: trace.then(Vec::new),
        })
    }

    fn push(&mut self, m: Mnemonic, ops: &[Opnd]) {
        self.body.push(Inst::new(m, ops));
    }

    fn run(mut self, model: &Model) -> Result<(AsmProgram, Vec<String>), EmitError> {
        let spec = self.spec;
        self.st.begin_op(0);
        self.store_early_returns();
        self.st.end_op();
        for (pos, &op) in model.order().iter().enumerate() {
            self.st.begin_op(pos);
            self.emit_op(op, model.template_kind(op), model.shape(op));
            if self.audit {
                self.st.audit()?;
            }
            if let Some(t) = &mut self.trace {
                t.push(format!(
                    "after {}\n{}",
                    spec.describe_op(op),
                    self.st.dump(spec)
                ));
            }
        }

        let saved = self.st.used_callee_saved();
        let frame = 8 * self.st.slot_count() as i64;
        let mut insts = Vec::with_capacity(self.body.len() + 2 * saved.len() + 4);
        for &r in &saved {
            insts.push(Inst::new(Mnemonic::Push, &[r64(r)]));
        }
        if frame > 0 {
            insts.push(Inst::new(Mnemonic::Sub, &[r64(Reg::Rsp), Opnd::Imm(frame)]));
        }
        insts.extend(self.st.prologue_moves().iter().cloned());
        insts.append(&mut self.body);
        if frame > 0 {
            insts.push(Inst::new(Mnemonic::Add, &[r64(Reg::Rsp), Opnd::Imm(frame)]));
        }
        for &r in saved.iter().rev() {
            insts.push(Inst::new(Mnemonic::Pop, &[r64(r)]));
        }
        insts.push(Inst::new(Mnemonic::Ret, &[]));
        let program = AsmProgram {
            name: spec.name.clone(),
            insts,
            spill_count: self.st.spill_count,
            arg_lens: spec.args.iter().map(|a| a.elements()).collect(),
            out_len: spec.returns.len(),
        };
        Ok((program, self.trace.unwrap_or_default()))
    }

    fn out_slot(&self, i: usize) -> Opnd {
        Opnd::Mem(Mem::base(self.st.out_ptr(), 8 * i as i32))
    }

    /// Returns of literals and of input elements do not depend on the body.
    fn store_early_returns(&mut self) {
        for (i, &r) in self.spec.returns.iter().enumerate() {
            match r {
                Operand::Lit(x) => match imm32(x) {
                    Some(imm) => self.push(Mnemonic::Mov, &[self.out_slot(i), Opnd::Imm(imm)]),
                    None => {
                        let t = self.load_imm(x);
                        self.push(Mnemonic::Mov, &[self.out_slot(i), r64(t)]);
                    }
                },
                Operand::Var(v) if matches!(self.spec.vars[v.index()].def, Def::Arg { .. }) => {
                    let reg = self.ensure_reg(v);
                    self.push(Mnemonic::Mov, &[self.out_slot(i), r64(reg)]);
                    if self.st.next_use(v).is_none() {
                        self.st.release(v);
                    }
                }
                Operand::Var(_) => {}
            }
        }
    }

    // ----- operand helpers -----

    fn load_imm(&mut self, x: u64) -> Reg {
        let r = self.st.request_register(&mut self.body);
        self.push(Mnemonic::Mov, &[r64(r), Opnd::Imm(x as i64)]);
        r
    }

    /// `v` in a register, loading or copying it out of a flag if needed.
    fn ensure_reg(&mut self, v: ValueId) -> Reg {
        if let Some(r) = self.st.reg_of(v) {
            self.st.lock(r);
            return r;
        }
        if self.st.flag_of(v).is_some() {
            let r = self.st.copy_flag_to_reg(v, &mut self.body);
            self.st.lock(r);
            return r;
        }
        let m = self
            .st
            .mem_of(v)
            .unwrap_or_else(|| panic!("value {} has no location", self.spec.vars[v.index()].name));
        let r = self.st.request_register(&mut self.body);
        self.push(Mnemonic::Mov, &[r64(r), Opnd::Mem(m)]);
        self.st.bind(v, r);
        r
    }

    fn in_reg(&mut self, o: Operand) -> Reg {
        match o {
            Operand::Lit(x) => self.load_imm(x),
            Operand::Var(v) => self.ensure_reg(v),
        }
    }

    /// Source operand: register, or the memory copy when this is the value's last
    /// read, or an immediate when allowed and representable.
    fn rm(&mut self, o: Operand, imm_ok: bool) -> Opnd {
        match o {
            Operand::Lit(x) => match imm32(x) {
                Some(i) if imm_ok => Opnd::Imm(i),
                _ => r64(self.load_imm(x)),
            },
            Operand::Var(v) => {
                if self.st.reg_of(v).is_none()
                    && self.st.flag_of(v).is_none()
                    && !self.st.used_later(v)
                {
                    if let Some(m) = self.st.mem_of(v) {
                        return Opnd::Mem(m);
                    }
                }
                r64(self.ensure_reg(v))
            }
        }
    }

    /// A scratch register holding `o` that the caller may overwrite. Reuses the
    /// register of a value read for the last time unless `others` still reads it.
    fn dst_from(&mut self, o: Operand, others: &[Operand]) -> Reg {
        let v = match o {
            Operand::Lit(x) => return self.load_imm(x),
            Operand::Var(v) => v,
        };
        if self.st.reg_of(v).is_none() && self.st.flag_of(v).is_some() {
            self.ensure_reg(v);
        }
        if let Some(r) = self.st.reg_of(v) {
            self.st.lock(r);
            if !self.st.used_later(v) && !others.contains(&o) {
                self.st.detach(v);
                return r;
            }
            let d = self.st.request_register(&mut self.body);
            self.push(Mnemonic::Mov, &[r64(d), r64(r)]);
            return d;
        }
        let m = self.st.mem_of(v).expect("value has a location");
        let d = self.st.request_register(&mut self.body);
        self.push(Mnemonic::Mov, &[r64(d), Opnd::Mem(m)]);
        d
    }

    /// Destination for a result computed from already-prepared operands: the register
    /// of an input read for the last time, else a fresh one.
    fn fresh_or_reuse(&mut self, inputs: &[Operand]) -> Reg {
        for (i, &o) in inputs.iter().enumerate() {
            if let Operand::Var(v) = o {
                if inputs[i + 1..].contains(&o) {
                    continue;
                }
                if self.st.reg_of(v).is_some() && !self.st.used_later(v) {
                    return self.st.detach(v).unwrap();
                }
            }
        }
        self.st.request_register(&mut self.body)
    }

    /// Puts the operand worth overwriting first; literals go second.
    fn commutative(&self, a: Operand, b: Operand) -> (Operand, Operand) {
        let reusable = |o: Operand| {
            o.var()
                .is_some_and(|v| self.st.reg_of(v).is_some() && !self.st.used_later(v))
        };
        if a.lit().is_some() && b.lit().is_none() {
            return (b, a);
        }
        if a != b && !reusable(a) && reusable(b) && b.lit().is_none() {
            return (b, a);
        }
        (a, b)
    }

    /// Register `r` for exclusive use, evicting its occupant unless it is still needed
    /// by `pending` operands or later operations.
    fn claim_for(&mut self, r: Reg, pending: &[Operand]) -> Reg {
        if let Some(v) = (0..self.spec.vars.len())
            .map(|i| ValueId(i as u32))
            .find(|&v| self.st.reg_of(v) == Some(r))
        {
            if !pending.contains(&Operand::Var(v)) && !self.st.used_later(v) {
                self.st.release(v);
            }
        }
        self.st.claim(r, &mut self.body)
    }

    fn clobber(&mut self, flags: Flags) {
        self.st.clobber_flags(flags, None, &mut self.body);
    }

    /// Saves live values out of `writes`, then loads `c` into flag `f`.
    /// `zero_reg` is any register the caller has locked; `test zero_reg, zero_reg`
    /// produces a literal 0 carry.
    fn load_carry(&mut self, c: Operand, f: Flag, writes: Flags, zero_reg: Reg) {
        let fast = self.features.bmi2 && self.features.adx;
        let already = matches!(c, Operand::Var(v) if self.st.flag_of(v) == Some(f));
        let route = match c {
            _ if already => Flags::NONE,
            Operand::Lit(0) => Flags::CF_OF,
            _ if fast => f.set(),
            _ => Flags::CF_OF,
        };
        let keep = if already {
            c.var().map(|v| (v, f))
        } else {
            None
        };
        if let Some((v, _)) = keep {
            if self.st.used_later(v) && self.st.reg_of(v).is_none() && self.st.mem_of(v).is_none() {
                self.st.copy_flag_to_reg(v, &mut self.body);
            }
        }
        self.st
            .clobber_flags(writes.union(route).union(f.set()), keep, &mut self.body);
        if already {
            return;
        }
        if c == Operand::Lit(0) {
            self.push(Mnemonic::Test, &[r64(zero_reg), r64(zero_reg)]);
            return;
        }
        let r = self.in_reg(c);
        if fast {
            let s = self.st.request_register(&mut self.body);
            self.push(Mnemonic::Rorx, &[r64(s), r64(r), Opnd::Imm(1)]);
            let m = if f == Flag::CF {
                Mnemonic::Adcx
            } else {
                Mnemonic::Adox
            };
            self.push(m, &[r64(s), r64(s)]);
        } else if f == Flag::CF {
            self.push(Mnemonic::Bt, &[r64(r), Opnd::Imm(0)]);
        } else {
            let s = self.st.request_register(&mut self.body);
            self.push(Mnemonic::Mov, &[r64(s), r64(r)]);
            self.push(Mnemonic::Shl, &[r64(s), Opnd::Imm(63)]);
            self.push(Mnemonic::Add, &[r64(s), r64(s)]);
        }
        if let Operand::Var(v) = c {
            self.st.bind_flag(v, f);
        }
    }

    // ----- per-operation emission -----

    fn emit_op(&mut self, op: usize, kind: TemplateKind, shape: Shape) {
        let spec = self.spec;
        let operation = &spec.body[op];
        let ins = operation.inputs.clone();
        let outs = operation.outputs.clone();
        if outs
            .iter()
            .all(|&v| self.st.next_use(v).is_none() && self.returned[v.index()].is_empty())
        {
            for v in ins.iter().filter_map(|o| o.var()) {
                self.st.retire(v);
            }
            self.st.end_op();
            return;
        }
        for v in ins.iter().filter_map(|o| o.var()) {
            if let Some(r) = self.st.reg_of(v) {
                self.st.lock(r);
            }
        }

        use TemplateKind as T;
        match kind {
            T::AddAdd | T::And | T::Or => {
                let (a, b) = self.commutative(ins[0], ins[1]);
                let d = self.dst_from(a, &[b]);
                let s = self.rm(b, true);
                self.clobber(Flags::CF_OF);
                let m = match kind {
                    T::AddAdd => Mnemonic::Add,
                    T::And => Mnemonic::And,
                    _ => Mnemonic::Or,
                };
                self.push(m, &[r64(d), s]);
                self.st.flags_written(Flags::CF_OF);
                self.st.bind(outs[0], d);
            }
            T::AddLea => {
                let (a, b) = self.commutative(ins[0], ins[1]);
                let ra = self.in_reg(a);
                let mem = match b {
                    Operand::Lit(x) if imm32(x).is_some() => {
                        Mem::base(ra, imm32(x).unwrap() as i32)
                    }
                    _ => {
                        let rb = self.in_reg(b);
                        Mem {
                            base: Some(ra),
                            index: Some((rb, 1)),
                            disp: 0,
                        }
                    }
                };
                let d = self.fresh_or_reuse(&[a, b]);
                self.push(Mnemonic::Lea, &[r64(d), Opnd::Mem(mem)]);
                self.st.bind(outs[0], d);
            }
            T::SubSub => {
                let d = self.dst_from(ins[0], &[ins[1]]);
                let s = self.rm(ins[1], true);
                self.clobber(Flags::CF_OF);
                self.push(Mnemonic::Sub, &[r64(d), s]);
                self.st.flags_written(Flags::CF_OF);
                self.st.bind(outs[0], d);
            }
            T::MulImul | T::MulxImul => {
                let d = self.emit_imul(ins[0], ins[1]);
                self.st.bind(outs[0], d);
            }
            T::MulShl => {
                let (x, c) = split_const(&ins);
                let d = self.dst_from(x, &[]);
                self.clobber(Flags::CF_OF);
                self.push(
                    Mnemonic::Shl,
                    &[r64(d), Opnd::Imm(c.trailing_zeros() as i64)],
                );
                self.st.flags_written(Flags::CF_OF);
                self.st.bind(outs[0], d);
            }
            T::MulLea | T::ShlLea => {
                let (x, k) = match shape {
                    Shape::Shl(k) => (ins[0], k),
                    _ => {
                        let (x, c) = split_const(&ins);
                        (x, c.trailing_zeros())
                    }
                };
                let rx = self.in_reg(x);
                let mem = if k == 1 {
                    Mem {
                        base: Some(rx),
                        index: Some((rx, 1)),
                        disp: 0,
                    }
                } else {
                    Mem {
                        base: None,
                        index: Some((rx, 1 << k)),
                        disp: 0,
                    }
                };
                let d = self.fresh_or_reuse(&[x]);
                self.push(Mnemonic::Lea, &[r64(d), Opnd::Mem(mem)]);
                self.st.bind(outs[0], d);
            }
            T::MulShiftAdd => {
                let (x, c) = split_const(&ins);
                let rx = self.in_reg(x);
                let d = if matches!(c, 3 | 5 | 9) {
                    let d = self.fresh_or_reuse(&[x]);
                    let mem = Mem {
                        base: Some(rx),
                        index: Some((rx, (c - 1) as u8)),
                        disp: 0,
                    };
                    self.push(Mnemonic::Lea, &[r64(d), Opnd::Mem(mem)]);
                    d
                } else {
                    // Horner over the set bits, highest first
                    let mut bits = shift_add_terms(c);
                    bits.reverse();
                    let d = self.st.request_register(&mut self.body);
                    self.push(Mnemonic::Mov, &[r64(d), r64(rx)]);
                    self.clobber(Flags::CF_OF);
                    for w in bits.windows(2) {
                        self.push(Mnemonic::Shl, &[r64(d), Opnd::Imm((w[0] - w[1]) as i64)]);
                        self.push(Mnemonic::Add, &[r64(d), r64(rx)]);
                    }
                    let low = *bits.last().unwrap();
                    if low > 0 {
                        self.push(Mnemonic::Shl, &[r64(d), Opnd::Imm(low as i64)]);
                    }
                    self.st.flags_written(Flags::CF_OF);
                    d
                };
                self.st.bind(outs[0], d);
            }
            T::MulxMulx => self.emit_mulx(ins[0], ins[1], outs[0], outs[1]),
            T::MulxMul => self.emit_mul(ins[0], ins[1], outs[0], outs[1]),
            T::CarryAdd | T::CarryAdc | T::CarryAdcx | T::CarryAdox => {
                let (a, b) = self.commutative(ins[1], ins[2]);
                let d = self.dst_from(a, &[b, ins[0]]);
                let s = self.rm(b, matches!(kind, T::CarryAdd | T::CarryAdc));
                let (m, f, writes) = match kind {
                    T::CarryAdd => (Mnemonic::Add, Flag::CF, Flags::CF_OF),
                    T::CarryAdc => (Mnemonic::Adc, Flag::CF, Flags::CF_OF),
                    T::CarryAdcx => (Mnemonic::Adcx, Flag::CF, Flags::CF),
                    _ => (Mnemonic::Adox, Flag::OF, Flags::OF),
                };
                if kind == T::CarryAdd {
                    self.clobber(writes);
                } else {
                    self.load_carry(ins[0], f, writes, d);
                }
                self.push(m, &[r64(d), s]);
                self.st.flags_written(writes);
                self.st.bind(outs[0], d);
                self.st.bind_flag(outs[1], f);
            }
            T::BorrowSub | T::BorrowSbb => {
                let d = self.dst_from(ins[1], &[ins[2], ins[0]]);
                let s = self.rm(ins[2], true);
                if kind == T::BorrowSub {
                    self.clobber(Flags::CF_OF);
                    self.push(Mnemonic::Sub, &[r64(d), s]);
                } else {
                    self.load_carry(ins[0], Flag::CF, Flags::CF_OF, d);
                    self.push(Mnemonic::Sbb, &[r64(d), s]);
                }
                self.st.flags_written(Flags::CF_OF);
                self.st.bind(outs[0], d);
                self.st.bind_flag(outs[1], Flag::CF);
            }
            T::ShiftImm => {
                let (m, k) = match shape {
                    Shape::Shl(k) => (Mnemonic::Shl, k),
                    Shape::Shr(k) => (Mnemonic::Shr, k),
                    _ => unreachable!("shift template on {shape:?}"),
                };
                let d = self.dst_from(ins[0], &[]);
                self.clobber(Flags::CF_OF);
                self.push(m, &[r64(d), Opnd::Imm(k as i64)]);
                self.st.flags_written(Flags::CF_OF);
                self.st.bind(outs[0], d);
            }
            T::ShiftDouble | T::ShiftDoubleSplit => {
                let (lo, hi) = (ins[0], ins[1]);
                let (left, k) = match shape {
                    Shape::ShlDouble(k) => (true, k),
                    Shape::ShrDouble(k) => (false, k),
                    _ => unreachable!("double shift template on {shape:?}"),
                };
                // shrd keeps the low limb of (hi:lo) >> k; shld the high limb of (hi:lo) << k
                let (keep, feed) = if left { (hi, lo) } else { (lo, hi) };
                let d = self.dst_from(keep, &[feed]);
                if kind == T::ShiftDouble {
                    let rf = self.in_reg(feed);
                    self.clobber(Flags::CF_OF);
                    let m = if left { Mnemonic::Shld } else { Mnemonic::Shrd };
                    self.push(m, &[r64(d), r64(rf), Opnd::Imm(k as i64)]);
                } else {
                    let src = self.rm(feed, false);
                    let t = self.st.request_register(&mut self.body);
                    self.push(Mnemonic::Mov, &[r64(t), src]);
                    self.clobber(Flags::CF_OF);
                    let (m1, m2) = if left {
                        (Mnemonic::Shl, Mnemonic::Shr)
                    } else {
                        (Mnemonic::Shr, Mnemonic::Shl)
                    };
                    self.push(m1, &[r64(d), Opnd::Imm(k as i64)]);
                    self.push(m2, &[r64(t), Opnd::Imm(64 - k as i64)]);
                    self.push(Mnemonic::Or, &[r64(d), r64(t)]);
                }
                self.st.flags_written(Flags::CF_OF);
                self.st.bind(outs[0], d);
            }
            T::Not => {
                let d = self.dst_from(ins[0], &[]);
                self.push(Mnemonic::Not, &[r64(d)]);
                self.st.bind(outs[0], d);
            }
            T::LogicalNot | T::CastSetc => {
                let r = self.in_reg(ins[0]);
                let d = self.fresh_or_reuse(&[ins[0]]);
                self.clobber(Flags::CF_OF);
                let set = if kind == T::LogicalNot {
                    self.push(Mnemonic::Test, &[r64(r), r64(r)]);
                    Mnemonic::Setz
                } else {
                    self.push(Mnemonic::Bt, &[r64(r), Opnd::Imm(0)]);
                    Mnemonic::Setc
                };
                self.push(set, &[Opnd::R8(d)]);
                self.push(Mnemonic::Movzx, &[Opnd::R32(d), Opnd::R8(d)]);
                self.st.flags_written(Flags::CF_OF);
                self.st.bind(outs[0], d);
            }
            T::Mov => {
                let d = self.dst_from(ins[0], &[]);
                self.st.bind(outs[0], d);
            }
            T::CastAnd => {
                let d = self.dst_from(ins[0], &[]);
                self.clobber(Flags::CF_OF);
                self.push(Mnemonic::And, &[r64(d), Opnd::Imm(1)]);
                self.st.flags_written(Flags::CF_OF);
                self.st.bind(outs[0], d);
            }
            T::CmovTest => {
                let (cond, z, nz) = (ins[0], ins[1], ins[2]);
                let d = self.dst_from(z, &[cond, nz]);
                let s = self.rm(nz, false);
                let rc = self.in_reg(cond);
                self.clobber(Flags::CF_OF);
                self.push(Mnemonic::Test, &[r64(rc), r64(rc)]);
                self.push(Mnemonic::Cmovnz, &[r64(d), s]);
                self.st.flags_written(Flags::CF_OF);
                self.st.bind(outs[0], d);
            }
        }

        for &v in &outs {
            for i in self.returned[v.index()].clone() {
                let r = self.ensure_reg(v);
                self.push(Mnemonic::Mov, &[self.out_slot(i), r64(r)]);
            }
        }
        for v in ins
            .iter()
            .filter_map(|o| o.var())
            .chain(outs.iter().copied())
        {
            self.st.retire(v);
        }
        self.st.end_op();
    }

    fn emit_imul(&mut self, a: Operand, b: Operand) -> Reg {
        let (a, b) = if a.lit().is_some() { (b, a) } else { (a, b) };
        if let (None, Some(c)) = (a.lit(), b.lit()) {
            if let Some(imm) = imm32(c) {
                let s = self.rm(a, false);
                let d = self.fresh_or_reuse(&[a]);
                self.clobber(Flags::CF_OF);
                self.push(Mnemonic::Imul, &[r64(d), s, Opnd::Imm(imm)]);
                self.st.flags_written(Flags::CF_OF);
                return d;
            }
        }
        let (a, b) = self.commutative(a, b);
        let d = self.dst_from(a, &[b]);
        let s = self.rm(b, false);
        self.clobber(Flags::CF_OF);
        self.push(Mnemonic::Imul, &[r64(d), s]);
        self.st.flags_written(Flags::CF_OF);
        d
    }

    fn emit_mulx(&mut self, a: Operand, b: Operand, lo: ValueId, hi: ValueId) {
        let in_rdx =
            |st: &MachineState, o: Operand| o.var().is_some_and(|v| st.reg_of(v) == Some(Reg::Rdx));
        let (a, b) = if in_rdx(&self.st, b) && !in_rdx(&self.st, a) {
            (b, a)
        } else {
            (a, b)
        };
        let (a, b) = if b.lit().is_some() && !in_rdx(&self.st, a) {
            (b, a)
        } else {
            (a, b)
        };
        if in_rdx(&self.st, a) {
            self.st.lock(Reg::Rdx);
        } else {
            let rdx = self.claim_for(Reg::Rdx, &[a, b]);
            match a {
                Operand::Lit(x) => self.push(Mnemonic::Mov, &[r64(rdx), Opnd::Imm(x as i64)]),
                Operand::Var(v) => {
                    let src = self.rm(a, false);
                    self.push(Mnemonic::Mov, &[r64(rdx), src]);
                    if self.st.reg_of(v).is_none() && self.st.used_later(v) {
                        self.st.bind(v, rdx);
                    }
                }
            }
        }
        let s = self.rm(b, false);
        let rh = self.st.request_register(&mut self.body);
        let rl = self.st.request_register(&mut self.body);
        self.push(Mnemonic::Mulx, &[r64(rh), r64(rl), s]);
        self.st.bind(lo, rl);
        self.st.bind(hi, rh);
    }

    fn emit_mul(&mut self, a: Operand, b: Operand, lo: ValueId, hi: ValueId) {
        let in_rax =
            |st: &MachineState, o: Operand| o.var().is_some_and(|v| st.reg_of(v) == Some(Reg::Rax));
        let (a, b) = if in_rax(&self.st, b) && !in_rax(&self.st, a) {
            (b, a)
        } else {
            (a, b)
        };
        let (a, b) = if a.lit().is_none() && b.lit().is_some() && !in_rax(&self.st, a) {
            (b, a)
        } else {
            (a, b)
        };
        let reuse = match a {
            Operand::Var(v) => in_rax(&self.st, a) && a != b && !self.st.used_later(v),
            _ => false,
        };
        if reuse {
            self.st.detach(a.var().unwrap());
        } else {
            let rax = self.claim_for(Reg::Rax, &[a, b]);
            let src = match a {
                Operand::Lit(x) => Opnd::Imm(x as i64),
                _ => self.rm(a, false),
            };
            self.push(Mnemonic::Mov, &[r64(rax), src]);
        }
        self.claim_for(Reg::Rdx, &[b]);
        let s = self.rm(b, false);
        self.clobber(Flags::CF_OF);
        self.push(Mnemonic::Mul, &[s]);
        self.st.flags_written(Flags::CF_OF);
        self.st.bind(lo, Reg::Rax);
        self.st.bind(hi, Reg::Rdx);
    }
}

/// `(variable side, constant)` of a multiplication by a literal.
fn split_const(ins: &[Operand]) -> (Operand, u64) {
    match (ins[0], ins[1]) {
        (x, Operand::Lit(c)) => (x, c),
        (Operand::Lit(c), x) => (x, c),
        _ => unreachable!("multiplication without a literal"),
    }
}
