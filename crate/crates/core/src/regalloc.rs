//! Virtual CPU state used while emitting: which value lives in which register,
//! carry flag or stack slot, plus the spill policy.
//!
//! Allocation is greedy in emission order. When no register is free the value
//! whose next use lies farthest ahead in the current operation order is evicted
//! (Belady); values that already have a copy in memory are preferred on ties since
//! evicting them costs no store.

use std::fmt::Write as _;

use thiserror::Error;

use crate::catalog::Features;
use crate::ir::{Def, FunctionSpec, ValueId};
use crate::x86::{Flags, Inst, Mem, Mnemonic, Opnd, Reg};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegallocError {
    #[error(
        "unsupported signature: {0} pointer arguments (at most 5 inputs plus the output pointer)"
    )]
    UnsupportedSignature(usize),
    #[error("flag {0:?} holds no live value")]
    NotLive(Flag),
    #[error("state audit failed: {0}")]
    Audit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flag {
    CF,
    OF,
}

impl Flag {
    pub const BOTH: [Flag; 2] = [Flag::CF, Flag::OF];

    fn idx(self) -> usize {
        self as usize
    }

    pub fn set(self) -> Flags {
        match self {
            Flag::CF => Flags::CF,
            Flag::OF => Flags::OF,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemHome {
    /// Element `index` of the input array whose pointer lives in `ptr`.
    Arg {
        ptr: Reg,
        index: usize,
    },
    Slot(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    Reg(Reg),
    StackSlot(usize),
    ArgMem { arg: usize, index: usize },
    FlagCF,
    FlagOF,
    Immediate(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RegUse {
    Free,
    /// rsp and argument pointers.
    Reserved,
    Value(ValueId),
    /// Scratch or not-yet-bound result of the operation being emitted.
    Temp,
}

#[derive(Debug, Clone, Copy, Default)]
struct ValueLoc {
    reg: Option<Reg>,
    flag: Option<Flag>,
    mem: Option<MemHome>,
    released: bool,
}

/// Allocation preference: caller-saved first so short functions need no push/pop.
const PREFERENCE: [Reg; 15] = [
    Reg::Rax,
    Reg::Rcx,
    Reg::R8,
    Reg::R9,
    Reg::R10,
    Reg::R11,
    Reg::Rsi,
    Reg::Rdi,
    Reg::Rdx,
    Reg::Rbx,
    Reg::Rbp,
    Reg::R12,
    Reg::R13,
    Reg::R14,
    Reg::R15,
];

#[derive(Debug, Clone)]
pub struct MachineState {
    regs: [RegUse; 16],
    flags: [Option<ValueId>; 2],
    slots: Vec<Option<ValueId>>,
    values: Vec<ValueLoc>,
    arg_ptrs: Vec<Reg>,
    out_ptr: Reg,
    locked: u16,
    written: u16,
    uses: Vec<Vec<usize>>,
    current: usize,
    features: Features,
    prologue_moves: Vec<Inst>,
    pub spill_count: usize,
}

/// Farthest-next-use choice among `(value, next use position, has memory copy)`.
/// `None` as next use means the value is never read again.
pub fn choose_spill_victim(candidates: &[(ValueId, Option<usize>, bool)]) -> Option<ValueId> {
    let mut best: Option<(ValueId, usize, bool)> = None;
    for &(v, next, mirrored) in candidates {
        let dist = next.unwrap_or(usize::MAX);
        let better = match best {
            None => true,
            Some((_, bd, bm)) => dist > bd || (dist == bd && mirrored && !bm),
        };
        if better {
            best = Some((v, dist, mirrored));
        }
    }
    best.map(|b| b.0)
}

fn mem_of(home: MemHome) -> Mem {
    match home {
        MemHome::Arg { ptr, index } => Mem::base(ptr, 8 * index as i32),
        MemHome::Slot(s) => Mem::base(Reg::Rsp, 8 * s as i32),
    }
}

/// Binds the calling convention: `rdi` is the output pointer and the i-th argument
/// pointer arrives in the (i+1)-th integer argument register. A pointer arriving in
/// `rdx` is moved away at entry because `mulx`/`mul` use `rdx` implicitly.
pub fn init_state(spec: &FunctionSpec, features: Features) -> Result<MachineState, RegallocError> {
    let n = spec.args.len();
    if n > 5 {
        return Err(RegallocError::UnsupportedSignature(n + 1));
    }
    let mut regs = [RegUse::Free; 16];
    regs[Reg::Rsp as usize] = RegUse::Reserved;
    regs[Reg::Rdi as usize] = RegUse::Reserved;
    let mut arg_ptrs = Vec::with_capacity(n);
    let mut prologue_moves = Vec::new();
    let incoming: Vec<Reg> = Reg::ARGS[1..=n].to_vec();
    for &r in &incoming {
        let target = if r == Reg::Rdx {
            let t = [Reg::R11, Reg::R10, Reg::R9, Reg::R8, Reg::Rcx, Reg::Rax]
                .into_iter()
                .find(|t| !incoming.contains(t))
                .expect("a free register for the rdx pointer");
            prologue_moves.push(Inst::new(
                Mnemonic::Mov,
                &[Opnd::R64(t), Opnd::R64(Reg::Rdx)],
            ));
            t
        } else {
            r
        };
        regs[target as usize] = RegUse::Reserved;
        arg_ptrs.push(target);
    }
    let mut values = vec![ValueLoc::default(); spec.vars.len()];
    for (i, var) in spec.vars.iter().enumerate() {
        if let Def::Arg { arg, index } = var.def {
            values[i].mem = Some(MemHome::Arg {
                ptr: arg_ptrs[arg],
                index,
            });
        }
    }
    Ok(MachineState {
        regs,
        flags: [None; 2],
        slots: Vec::new(),
        values,
        arg_ptrs,
        out_ptr: Reg::Rdi,
        locked: 0,
        written: 0,
        uses: vec![Vec::new(); spec.vars.len()],
        current: 0,
        features,
        prologue_moves,
        spill_count: 0,
    })
}

impl MachineState {
    /// Records where each value is read, given the operation order being emitted.
    pub fn set_schedule(&mut self, spec: &FunctionSpec, order: &[usize]) {
        for u in &mut self.uses {
            u.clear();
        }
        for (pos, &op) in order.iter().enumerate() {
            for v in spec.body[op].inputs.iter().filter_map(|o| o.var()) {
                self.uses[v.index()].push(pos);
            }
        }
    }

    pub fn begin_op(&mut self, pos: usize) {
        self.current = pos;
    }

    pub fn out_ptr(&self) -> Reg {
        self.out_ptr
    }

    pub fn arg_ptrs(&self) -> &[Reg] {
        &self.arg_ptrs
    }

    pub fn features(&self) -> Features {
        self.features
    }

    pub fn prologue_moves(&self) -> &[Inst] {
        &self.prologue_moves
    }

    pub fn free_registers(&self) -> usize {
        self.regs.iter().filter(|r| **r == RegUse::Free).count()
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Callee-saved registers written so far.
    pub fn used_callee_saved(&self) -> Vec<Reg> {
        Reg::CALLEE_SAVED
            .into_iter()
            .filter(|r| self.written & (1 << r.code()) != 0)
            .collect()
    }

    /// First read of `v` at or after the current position.
    pub fn next_use(&self, v: ValueId) -> Option<usize> {
        let u = &self.uses[v.index()];
        u.get(u.partition_point(|&p| p < self.current)).copied()
    }

    /// Whether `v` is read by any operation after the current one.
    pub fn used_later(&self, v: ValueId) -> bool {
        let u = &self.uses[v.index()];
        u.partition_point(|&p| p <= self.current) < u.len()
    }

    pub fn reg_of(&self, v: ValueId) -> Option<Reg> {
        self.values[v.index()].reg
    }

    pub fn flag_of(&self, v: ValueId) -> Option<Flag> {
        self.values[v.index()].flag
    }

    pub fn mem_of(&self, v: ValueId) -> Option<Mem> {
        self.values[v.index()].mem.map(mem_of)
    }

    pub fn flag_holder(&self, f: Flag) -> Option<ValueId> {
        self.flags[f.idx()]
    }

    pub fn is_released(&self, v: ValueId) -> bool {
        self.values[v.index()].released
    }

    pub fn location(&self, v: ValueId) -> Option<Location> {
        let loc = &self.values[v.index()];
        if let Some(r) = loc.reg {
            return Some(Location::Reg(r));
        }
        match loc.flag {
            Some(Flag::CF) => return Some(Location::FlagCF),
            Some(Flag::OF) => return Some(Location::FlagOF),
            None => {}
        }
        match loc.mem? {
            MemHome::Slot(s) => Some(Location::StackSlot(s)),
            MemHome::Arg { ptr, index } => {
                let arg = self.arg_ptrs.iter().position(|&p| p == ptr)?;
                Some(Location::ArgMem { arg, index })
            }
        }
    }

    pub fn lock(&mut self, r: Reg) {
        self.locked |= 1 << r.code();
    }

    pub fn is_locked(&self, r: Reg) -> bool {
        self.locked & (1 << r.code()) != 0
    }

    /// Ends the current operation: unlocks everything and frees unbound scratch registers.
    pub fn end_op(&mut self) {
        self.locked = 0;
        for r in &mut self.regs {
            if *r == RegUse::Temp {
                *r = RegUse::Free;
            }
        }
    }

    fn take(&mut self, r: Reg) -> Reg {
        self.regs[r as usize] = RegUse::Temp;
        self.lock(r);
        self.written |= 1 << r.code();
        r
    }

    /// A free register, spilling the Belady victim if necessary. The register is
    /// returned locked and unbound.
    pub fn request_register(&mut self, sink: &mut Vec<Inst>) -> Reg {
        if let Some(r) = PREFERENCE
            .into_iter()
            .find(|&r| self.regs[r as usize] == RegUse::Free && !self.is_locked(r))
        {
            return self.take(r);
        }
        let candidates: Vec<(ValueId, Option<usize>, bool)> = PREFERENCE
            .into_iter()
            .filter(|&r| !self.is_locked(r))
            .filter_map(|r| match self.regs[r as usize] {
                RegUse::Value(v) => {
                    Some((v, self.next_use(v), self.values[v.index()].mem.is_some()))
                }
                _ => None,
            })
            .collect();
        let victim = choose_spill_victim(&candidates).expect("every register is locked");
        let r = self.values[victim.index()].reg.unwrap();
        if self.next_use(victim).is_none() {
            self.release(victim);
        } else {
            self.spill(victim, sink);
        }
        self.take(r)
    }

    /// Current victim choice, exposed for inspection and tests.
    pub fn spill_victim(&self) -> Option<ValueId> {
        let candidates: Vec<_> = PREFERENCE
            .into_iter()
            .filter(|&r| !self.is_locked(r))
            .filter_map(|r| match self.regs[r as usize] {
                RegUse::Value(v) => {
                    Some((v, self.next_use(v), self.values[v.index()].mem.is_some()))
                }
                _ => None,
            })
            .collect();
        choose_spill_victim(&candidates)
    }

    /// Moves `v` out of its register into memory (storing only if it has no memory copy yet).
    pub fn spill(&mut self, v: ValueId, sink: &mut Vec<Inst>) {
        let Some(r) = self.values[v.index()].reg else {
            return;
        };
        if self.values[v.index()].mem.is_none() {
            let slot = match self.slots.iter().position(Option::is_none) {
                Some(s) => s,
                None => {
                    self.slots.push(None);
                    self.slots.len() - 1
                }
            };
            self.slots[slot] = Some(v);
            self.values[v.index()].mem = Some(MemHome::Slot(slot));
            sink.push(Inst::new(
                Mnemonic::Mov,
                &[Opnd::Mem(mem_of(MemHome::Slot(slot))), Opnd::R64(r)],
            ));
            self.spill_count += 1;
        }
        self.values[v.index()].reg = None;
        self.regs[r as usize] = RegUse::Free;
    }

    /// Frees every resource held by `v`; it must not be read again.
    pub fn release(&mut self, v: ValueId) {
        let loc = &mut self.values[v.index()];
        if let Some(r) = loc.reg.take() {
            self.regs[r as usize] = RegUse::Free;
        }
        if let Some(f) = loc.flag.take() {
            self.flags[f.idx()] = None;
        }
        if let Some(MemHome::Slot(s)) = loc.mem {
            self.slots[s] = None;
            loc.mem = None;
        }
        loc.released = true;
    }

    /// Releases `v` if nothing after the current operation reads it.
    pub fn retire(&mut self, v: ValueId) {
        if !self.values[v.index()].released && !self.used_later(v) {
            self.release(v);
        }
    }

    /// Binds a scratch register to a freshly computed value.
    pub fn bind(&mut self, v: ValueId, r: Reg) {
        debug_assert!(matches!(self.regs[r as usize], RegUse::Temp | RegUse::Free));
        debug_assert!(self.values[v.index()].reg.is_none());
        self.regs[r as usize] = RegUse::Value(v);
        self.values[v.index()].reg = Some(r);
        self.values[v.index()].released = false;
        self.written |= 1 << r.code();
    }

    /// Records that `f` now holds `v`.
    pub fn bind_flag(&mut self, v: ValueId, f: Flag) {
        if let Some(old) = self.flags[f.idx()] {
            self.values[old.index()].flag = None;
        }
        if let Some(of) = self.values[v.index()].flag {
            self.flags[of.idx()] = None;
        }
        self.flags[f.idx()] = Some(v);
        self.values[v.index()].flag = Some(f);
        self.values[v.index()].released = false;
    }

    /// Detaches `v` from its register, turning the register into scratch the caller may
    /// overwrite. `v` keeps any flag or memory copy.
    pub fn detach(&mut self, v: ValueId) -> Option<Reg> {
        let r = self.values[v.index()].reg.take()?;
        self.regs[r as usize] = RegUse::Temp;
        self.lock(r);
        Some(r)
    }

    /// Copies a flag-resident value into a fresh register, keeping the flag binding.
    pub fn copy_flag_to_reg(&mut self, v: ValueId, sink: &mut Vec<Inst>) -> Reg {
        if let Some(r) = self.values[v.index()].reg {
            return r;
        }
        let f = self.values[v.index()].flag.expect("value is in a flag");
        let r = self.request_register(sink);
        let set = match f {
            Flag::CF => Mnemonic::Setc,
            Flag::OF => Mnemonic::Seto,
        };
        sink.push(Inst::new(set, &[Opnd::R8(r)]));
        sink.push(Inst::new(Mnemonic::Movzx, &[Opnd::R32(r), Opnd::R8(r)]));
        self.bind(v, r);
        r
    }

    /// Saves the value held in `f` to a register and frees the flag.
    pub fn materialize_flag(
        &mut self,
        f: Flag,
        sink: &mut Vec<Inst>,
    ) -> Result<Reg, RegallocError> {
        let v = self.flags[f.idx()].ok_or(RegallocError::NotLive(f))?;
        let r = self.copy_flag_to_reg(v, sink);
        self.flags[f.idx()] = None;
        self.values[v.index()].flag = None;
        Ok(r)
    }

    /// Prepares for an instruction sequence that clobbers `flags`: any live value held
    /// there without another copy is saved first, then the bindings are dropped.
    /// `keep` names a flag binding the caller consumes itself.
    pub fn clobber_flags(
        &mut self,
        flags: Flags,
        keep: Option<(ValueId, Flag)>,
        sink: &mut Vec<Inst>,
    ) {
        for f in Flag::BOTH {
            if !flags.contains(f.set()) {
                continue;
            }
            let Some(v) = self.flags[f.idx()] else {
                continue;
            };
            if keep == Some((v, f)) {
                continue;
            }
            let loc = self.values[v.index()];
            if loc.reg.is_none() && loc.mem.is_none() && self.next_use(v).is_some() {
                self.copy_flag_to_reg(v, sink);
            }
            self.flags[f.idx()] = None;
            self.values[v.index()].flag = None;
        }
    }

    /// Drops flag bindings after an instruction wrote `flags` (callers saved them before).
    pub fn flags_written(&mut self, flags: Flags) {
        for f in Flag::BOTH {
            if flags.contains(f.set()) {
                if let Some(v) = self.flags[f.idx()].take() {
                    self.values[v.index()].flag = None;
                }
            }
        }
    }

    /// Makes register `r` free for the caller's exclusive use (returned locked, unbound).
    /// The occupant is moved to another register, or dropped to memory, or released if dead.
    pub fn claim(&mut self, r: Reg, sink: &mut Vec<Inst>) -> Reg {
        match self.regs[r as usize] {
            RegUse::Free => self.take(r),
            RegUse::Reserved | RegUse::Temp => {
                panic!("cannot claim {r}: reserved or in use as scratch")
            }
            RegUse::Value(v) => {
                let needed = self.is_locked(r) || self.next_use(v).is_some();
                let was_locked = self.is_locked(r);
                // keep `r` out of the search for a new home
                self.lock(r);
                if !needed {
                    self.release(v);
                } else if let Some(t) = PREFERENCE
                    .into_iter()
                    .find(|&t| self.regs[t as usize] == RegUse::Free && !self.is_locked(t))
                {
                    sink.push(Inst::new(Mnemonic::Mov, &[Opnd::R64(t), Opnd::R64(r)]));
                    self.values[v.index()].reg = None;
                    self.regs[r as usize] = RegUse::Free;
                    self.take(t);
                    self.bind(v, t);
                    if !was_locked {
                        self.locked &= !(1 << t.code());
                    }
                } else {
                    self.spill(v, sink);
                }
                self.take(r)
            }
        }
    }

    /// Cross-checks the forward and reverse maps.
    pub fn audit(&self) -> Result<(), RegallocError> {
        let err = |m: String| Err(RegallocError::Audit(m));
        for r in Reg::ALL {
            if let RegUse::Value(v) = self.regs[r as usize] {
                if self.values[v.index()].reg != Some(r) {
                    return err(format!("{r} claims value {} which is elsewhere", v.0));
                }
            }
        }
        for (i, loc) in self.values.iter().enumerate() {
            let v = ValueId(i as u32);
            if let Some(r) = loc.reg {
                if self.regs[r as usize] != RegUse::Value(v) {
                    return err(format!("value {i} thinks it is in {r}"));
                }
            }
            if let Some(f) = loc.flag {
                if self.flags[f.idx()] != Some(v) {
                    return err(format!("value {i} thinks it is in {f:?}"));
                }
            }
            if let Some(MemHome::Slot(s)) = loc.mem {
                if self.slots.get(s) != Some(&Some(v)) {
                    return err(format!("value {i} thinks it is in slot {s}"));
                }
            }
            if loc.released && (loc.reg.is_some() || loc.flag.is_some()) {
                return err(format!("released value {i} still holds a location"));
            }
        }
        for f in Flag::BOTH {
            if let Some(v) = self.flags[f.idx()] {
                if self.values[v.index()].flag != Some(f) {
                    return err(format!("{f:?} claims value {}", v.0));
                }
            }
        }
        for (s, occ) in self.slots.iter().enumerate() {
            if let Some(v) = occ {
                if self.values[v.index()].mem != Some(MemHome::Slot(s)) {
                    return err(format!("slot {s} claims value {}", v.0));
                }
            }
        }
        if self.regs[Reg::Rsp as usize] != RegUse::Reserved {
            return err("rsp allocated".into());
        }
        Ok(())
    }

    /// Human-readable dump of registers, flags and stack slots.
    pub fn dump(&self, spec: &FunctionSpec) -> String {
        let name = |v: ValueId| spec.vars[v.index()].name.clone();
        let mut out = String::from("registers:");
        for r in Reg::ALL {
            let what = match self.regs[r as usize] {
                RegUse::Free => continue,
                RegUse::Reserved if r == Reg::Rsp => "stack pointer".to_string(),
                RegUse::Reserved if r == self.out_ptr => "out pointer".to_string(),
                RegUse::Reserved => match self.arg_ptrs.iter().position(|&p| p == r) {
                    Some(a) => format!("&{}", spec.args[a].name),
                    None => "reserved".to_string(),
                },
                RegUse::Value(v) => name(v),
                RegUse::Temp => "scratch".to_string(),
            };
            let _ = write!(out, " {r}={what}");
        }
        out.push_str("\nflags:");
        for f in Flag::BOTH {
            let _ = write!(
                out,
                " {f:?}={}",
                self.flags[f.idx()].map(name).unwrap_or_else(|| "-".into())
            );
        }
        out.push_str("\nmemory:");
        for (s, occ) in self.slots.iter().enumerate() {
            let _ = write!(
                out,
                " [rsp+{}]={}",
                8 * s,
                occ.map(name).unwrap_or_else(|| "-".into())
            );
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_function;
    use proptest::prelude::*;

    fn spec_with_args(n: usize) -> FunctionSpec {
        let args: Vec<String> = (0..n)
            .map(|i| format!(r#"{{"name":"a{i}","type":"u64[2]"}}"#))
            .collect();
        parse_function(&format!(
            r#"{{"name":"t","args":[{}],"returns":["a0[0]"],"body":[]}}"#,
            args.join(",")
        ))
        .unwrap()
    }

    #[test]
    fn calling_convention() {
        let st = init_state(&spec_with_args(2), Features::ALL).unwrap();
        assert_eq!(st.out_ptr(), Reg::Rdi);
        assert_eq!(st.arg_ptrs()[0], Reg::Rsi);
        // rdx pointer relocated for mulx
        assert_eq!(st.arg_ptrs()[1], Reg::R11);
        assert_eq!(st.prologue_moves().len(), 1);
        assert_eq!(st.free_registers(), 12);

        let sq = init_state(&spec_with_args(1), Features::ALL).unwrap();
        assert_eq!(sq.arg_ptrs(), &[Reg::Rsi]);
        assert_eq!(sq.free_registers(), 13);

        assert_eq!(
            init_state(&spec_with_args(6), Features::ALL).unwrap_err(),
            RegallocError::UnsupportedSignature(7)
        );
        let five = init_state(&spec_with_args(5), Features::ALL).unwrap();
        assert!(!five.arg_ptrs().contains(&Reg::Rdx));
    }

    /// A state with `n` produced values, each bound to a register.
    fn crowded(n: usize) -> (FunctionSpec, MachineState, Vec<ValueId>) {
        let body: Vec<String> = (0..n)
            .map(|i| format!(r#"{{"out":["x{i}"],"op":"~","in":["a0[0]"]}}"#))
            .collect();
        let spec = parse_function(&format!(
            r#"{{"name":"t","args":[{{"name":"a0","type":"u64[1]"}}],"returns":["a0[0]"],"body":[{}]}}"#,
            body.join(",")
        ))
        .unwrap();
        let mut st = init_state(&spec, Features::ALL).unwrap();
        let mut sink = Vec::new();
        let vals: Vec<ValueId> = spec.body.iter().map(|o| o.outputs[0]).collect();
        for &v in &vals {
            let r = st.request_register(&mut sink);
            st.bind(v, r);
        }
        st.end_op();
        assert!(sink.is_empty());
        (spec, st, vals)
    }

    #[test]
    fn request_without_spill_when_free() {
        let (_, mut st, _) = crowded(12);
        assert_eq!(st.free_registers(), 1);
        let mut sink = Vec::new();
        st.request_register(&mut sink);
        assert!(sink.is_empty());
        assert_eq!(st.spill_count, 0);
    }

    #[test]
    fn dead_value_dropped_silently() {
        let (_, mut st, vals) = crowded(13);
        // all uses empty: every value is dead
        st.uses[vals[0].index()] = vec![5];
        let mut sink = Vec::new();
        let r = st.request_register(&mut sink);
        assert!(sink.is_empty());
        assert_ne!(Some(r), st.reg_of(vals[0]));
        st.audit().unwrap();
    }

    #[test]
    fn belady_spill_emits_store() {
        let (_, mut st, vals) = crowded(13);
        for (i, &v) in vals.iter().enumerate() {
            st.uses[v.index()] = vec![10 + i];
        }
        st.uses[vals[4].index()] = vec![99];
        let mut sink = Vec::new();
        let r = st.request_register(&mut sink);
        assert_eq!(sink.len(), 1);
        assert_eq!(st.spill_count, 1);
        assert_eq!(st.reg_of(vals[4]), None);
        assert_eq!(st.location(vals[4]), Some(Location::StackSlot(0)));
        assert_eq!(sink[0].to_string(), format!("mov qword ptr [rsp], {r}"));
        st.audit().unwrap();
    }

    #[test]
    fn victim_examples() {
        let v = |i| ValueId(i);
        assert_eq!(
            choose_spill_victim(&[
                (v(0), Some(3), false),
                (v(1), Some(9), false),
                (v(2), Some(5), false)
            ]),
            Some(v(1))
        );
        assert_eq!(
            choose_spill_victim(&[(v(0), Some(7), false), (v(1), Some(7), true)]),
            Some(v(1))
        );
        assert_eq!(
            choose_spill_victim(&[(v(0), Some(70), true), (v(1), None, false)]),
            Some(v(1))
        );
        assert_eq!(choose_spill_victim(&[]), None);
    }

    proptest! {
        #[test]
        fn victim_is_farthest_next_use(entries in proptest::collection::vec((proptest::option::of(0usize..40), any::<bool>()), 1..=15)) {
            let cands: Vec<_> = entries.iter().enumerate().map(|(i, &(n, m))| (ValueId(i as u32), n, m)).collect();
            let got = choose_spill_victim(&cands).unwrap();
            // exhaustive: the distance of the victim is maximal and, among the maximal
            // ones, it has a memory copy whenever any of them does
            let dist = |n: Option<usize>| n.unwrap_or(usize::MAX);
            let max = cands.iter().map(|c| dist(c.1)).max().unwrap();
            let chosen = cands.iter().find(|c| c.0 == got).unwrap();
            prop_assert_eq!(dist(chosen.1), max);
            let any_mirrored = cands.iter().any(|c| dist(c.1) == max && c.2);
            prop_assert_eq!(chosen.2, any_mirrored);
        }
    }

    #[test]
    fn flag_materialization() {
        let spec = parse_function(
            r#"{"name":"t","args":[{"name":"a","type":"u64[1]"}],"returns":["s"],
                "body":[{"out":["s","c"],"op":"addcarryx","in":["0x0","a[0]","a[0]"]},
                        {"out":["t","d"],"op":"addcarryx","in":["c","a[0]","a[0]"]}]}"#,
        )
        .unwrap();
        let mut st = init_state(&spec, Features::ALL).unwrap();
        st.set_schedule(&spec, &[0, 1]);
        let c = spec.body[0].outputs[1];
        let mut sink = Vec::new();
        assert_eq!(
            st.materialize_flag(Flag::CF, &mut sink),
            Err(RegallocError::NotLive(Flag::CF))
        );
        st.bind_flag(c, Flag::CF);
        let r = st.materialize_flag(Flag::CF, &mut sink).unwrap();
        assert_eq!(sink[0].mnemonic, Mnemonic::Setc);
        assert_eq!(
            sink[1].to_string(),
            format!("movzx {}, {}", r.name32(), r.name8())
        );
        assert_eq!(st.flag_holder(Flag::CF), None);
        assert_eq!(st.reg_of(c), Some(r));

        let d = spec.body[1].outputs[1];
        st.bind_flag(d, Flag::OF);
        st.uses[d.index()] = vec![3];
        let mut sink = Vec::new();
        st.clobber_flags(Flags::CF_OF, None, &mut sink);
        assert_eq!(sink[0].mnemonic, Mnemonic::Seto);
        assert_eq!(st.flag_holder(Flag::OF), None);
        st.audit().unwrap();
    }

    #[test]
    fn claim_moves_live_occupant() {
        let (_, mut st, vals) = crowded(3);
        for &v in &vals {
            st.uses[v.index()] = vec![4];
        }
        let occupant = vals[0];
        let r = st.reg_of(occupant).unwrap();
        let mut sink = Vec::new();
        let got = st.claim(r, &mut sink);
        assert_eq!(got, r);
        assert_eq!(sink.len(), 1);
        assert_ne!(st.reg_of(occupant), Some(r));
        assert!(st.reg_of(occupant).is_some());
        st.audit().unwrap();
    }
}
