//! Random generator of valid straightline functions, for property tests and benches.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::json;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::catalog::{Catalog, Features};
use crate::emit::{assemble_ir, AsmProgram};
use crate::encode::form_signature;
use crate::ir::{parse_function, FunctionSpec};
use crate::model::{Model, ModelState};
use crate::selftest::single_op_cases;
use crate::x86::{Inst, Mnemonic, Opnd, Reg};

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub min_ops: usize,
    pub max_ops: usize,
    pub max_args: usize,
    pub max_arg_len: usize,
    pub max_returns: usize,
    /// Probability that an operand is picked among the most recent definitions
    /// instead of uniformly; lower values keep more values live at once.
    pub locality: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            min_ops: 4,
            max_ops: 24,
            max_args: 3,
            max_arg_len: 4,
            max_returns: 4,
            locality: 0.6,
        }
    }
}

const OPS: &[&str] = &[
    "+",
    "-",
    "*",
    "&",
    "or",
    "~",
    "!",
    "=",
    "<<",
    ">>",
    "addcarryx",
    "subborrowx",
    "mulx",
    "cmovznz",
    "static_cast",
];

fn literal<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    match rng.random_range(0..6) {
        0 => rng.random_range(0..4),
        1 => 1u64 << rng.random_range(0..64),
        2 => u64::MAX,
        3 => rng.random_range(0..1 << 31),
        _ => rng.random(),
    }
}

struct Pool {
    names: Vec<String>,
    u1: Vec<bool>,
}

impl Pool {
    fn pick<R: Rng + ?Sized>(&self, rng: &mut R, locality: f64) -> String {
        let n = self.names.len();
        let i = if rng.random_bool(locality) {
            n - 1 - rng.random_range(0..n.min(6))
        } else {
            rng.random_range(0..n)
        };
        self.names[i].clone()
    }

    fn operand<R: Rng + ?Sized>(&self, rng: &mut R, locality: f64) -> String {
        if rng.random_bool(0.12) {
            format!("{:#x}", literal(rng))
        } else {
            self.pick(rng, locality)
        }
    }

    fn carry<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let bits: Vec<usize> = (0..self.names.len()).filter(|&i| self.u1[i]).collect();
        if bits.is_empty() || rng.random_bool(0.25) {
            if rng.random_bool(0.8) { "0x0" } else { "0x1" }.to_string()
        } else {
            // prefer the most recent carry, as in a real carry chain
            let i = if rng.random_bool(0.7) {
                *bits.last().unwrap()
            } else {
                *bits.choose(rng).unwrap()
            };
            self.names[i].clone()
        }
    }

    fn push(&mut self, name: String, u1: bool) {
        self.names.push(name);
        self.u1.push(u1);
    }
}

/// JSON text of a random valid function.
pub fn random_spec_json<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> String {
    let mut pool = Pool {
        names: Vec::new(),
        u1: Vec::new(),
    };
    let mut args = Vec::new();
    let n_args = rng.random_range(1..=cfg.max_args.max(1));
    for a in 0..n_args {
        let name = format!("a{a}");
        let len = rng.random_range(1..=cfg.max_arg_len.max(1));
        args.push(json!({"name": name, "type": format!("u64[{len}]")}));
        for i in 0..len {
            pool.push(format!("{name}[{i}]"), false);
        }
    }
    if rng.random_bool(0.3) {
        args.push(json!({"name": "c", "type": "u1"}));
        pool.push("c".into(), true);
    }

    let n_ops = rng.random_range(cfg.min_ops..=cfg.max_ops.max(cfg.min_ops));
    let mut body = Vec::with_capacity(n_ops);
    let mut produced = Vec::new();
    let loc = cfg.locality;
    for k in 0..n_ops {
        let op = *OPS.choose(rng).unwrap();
        let x = format!("x{k}");
        let y = format!("y{k}");
        let mut width = None;
        let (outs, ins, u1_outs): (Vec<String>, Vec<String>, Vec<bool>) = match op {
            "addcarryx" | "subborrowx" => (
                vec![x, y],
                vec![
                    pool.carry(rng),
                    pool.operand(rng, loc),
                    pool.operand(rng, loc),
                ],
                vec![false, true],
            ),
            "mulx" => (
                vec![x, y],
                vec![pool.operand(rng, loc), pool.operand(rng, loc)],
                vec![false, false],
            ),
            "cmovznz" => {
                let cond = if rng.random_bool(0.5) {
                    pool.carry(rng)
                } else {
                    pool.pick(rng, loc)
                };
                (
                    vec![x],
                    vec![cond, pool.operand(rng, loc), pool.operand(rng, loc)],
                    vec![false],
                )
            }
            "<<" | ">>" => {
                let k = rng.random_range(0..64u32).to_string();
                if rng.random_bool(0.35) {
                    (
                        vec![x],
                        vec![pool.pick(rng, loc), pool.pick(rng, loc), k],
                        vec![false],
                    )
                } else {
                    (vec![x], vec![pool.pick(rng, loc), k], vec![false])
                }
            }
            "*" => {
                let rhs = match rng.random_range(0..3) {
                    0 => (1u64 << rng.random_range(0..8)).to_string(),
                    1 => [3u64, 5, 9, 10, 19, 38, 0x13, 977]
                        .choose(rng)
                        .unwrap()
                        .to_string(),
                    _ => pool.operand(rng, loc),
                };
                (vec![x], vec![pool.pick(rng, loc), rhs], vec![false])
            }
            "~" | "=" => (vec![x], vec![pool.pick(rng, loc)], vec![false]),
            "!" => (vec![x], vec![pool.pick(rng, loc)], vec![true]),
            "static_cast" => {
                let to_u1 = rng.random_bool(0.5);
                width = Some(if to_u1 { "u1" } else { "u64" });
                (vec![x], vec![pool.pick(rng, loc)], vec![to_u1])
            }
            _ => (
                vec![x],
                vec![pool.operand(rng, loc), pool.operand(rng, loc)],
                vec![false],
            ),
        };
        let mut entry = json!({"out": outs, "op": op, "in": ins});
        if let Some(w) = width {
            entry["width"] = json!(w);
        }
        body.push(entry);
        for (name, u1) in outs.into_iter().zip(u1_outs) {
            produced.push(name.clone());
            pool.push(name, u1);
        }
    }

    let n_ret = rng.random_range(1..=cfg.max_returns.max(1));
    let mut returns = Vec::with_capacity(n_ret);
    for i in 0..n_ret {
        if i == 0 && !produced.is_empty() {
            returns.push(produced.last().unwrap().clone());
        } else if !produced.is_empty() && rng.random_bool(0.85) {
            returns.push(produced.choose(rng).unwrap().clone());
        } else {
            returns.push(pool.names[rng.random_range(0..pool.names.len())].clone());
        }
    }
    let spec = json!({"name": "random", "args": args, "returns": returns, "body": body});
    serde_json::to_string(&spec).unwrap()
}

pub fn random_spec<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> FunctionSpec {
    let text = random_spec_json(rng, cfg);
    parse_function(&text)
        .unwrap_or_else(|e| panic!("generator produced an invalid spec: {e}\n{text}"))
}

/// Distinct instructions the emitter produces: every single-operation template under
/// each feature set, plus `random_programs` random functions (some under register
/// pressure) after random mutations. Sorted by text.
pub fn emitted_instructions(seed: u64, random_programs: usize) -> Vec<Inst> {
    let mut seen = BTreeMap::new();
    let mut add = |p: &AsmProgram| {
        for i in &p.insts {
            seen.entry(i.to_string()).or_insert_with(|| i.clone());
        }
    };
    let feature_sets = [
        Features::ALL,
        Features::BASELINE,
        Features {
            adx: true,
            bmi2: false,
        },
        Features {
            adx: false,
            bmi2: true,
        },
    ];
    for features in feature_sets {
        let catalog = Catalog::new(features);
        for case in single_op_cases() {
            let m =
                Model::new(case.spec.clone(), &catalog).expect("single-op cases have templates");
            for v in 0..m.variants(0).len() {
                let state = ModelState {
                    order: vec![0],
                    variants: vec![v as u8],
                };
                let m =
                    Model::from_state(case.spec.clone(), &catalog, &state).expect("valid state");
                add(&assemble_ir(&m).expect("single-op cases emit"));
            }
        }
    }
    let mut rng = crate::oracle::rng_from_seed(seed);
    let pressure = GenConfig {
        min_ops: 40,
        max_ops: 80,
        max_args: 4,
        max_arg_len: 6,
        max_returns: 8,
        locality: 0.1,
    };
    for n in 0..random_programs {
        let cfg = if n % 4 == 3 {
            pressure.clone()
        } else {
            GenConfig::default()
        };
        let spec = Arc::new(random_spec(&mut rng, &cfg));
        let features = feature_sets[n % feature_sets.len()];
        let mut m = Model::new(spec, &Catalog::new(features)).expect("random specs have templates");
        for _ in 0..rng.random_range(0..100) {
            let r = m.mutate(&mut rng);
            m.commit(&r);
        }
        add(&assemble_ir(&m).expect("random specs emit"));
    }
    seen.into_values().collect()
}

/// For the first instruction of each encoding form, copies with the register in each
/// register or base position replaced by every general-purpose register.
pub fn register_sweep(insts: &[Inst]) -> Vec<Inst> {
    let mut forms = BTreeMap::new();
    for i in insts {
        forms.entry(form_signature(i)).or_insert_with(|| i.clone());
    }
    let mut out = BTreeMap::new();
    for inst in forms.values() {
        for pos in 0..inst.operands.len() {
            for r in Reg::ALL {
                let mut v = inst.clone();
                match &mut v.operands[pos] {
                    Opnd::R64(x) | Opnd::R32(x) | Opnd::R8(x) => *x = r,
                    Opnd::Mem(m) if m.base.is_some() => m.base = Some(r),
                    _ => continue,
                }
                if v.mnemonic == Mnemonic::Mulx && pos < 2 && v.operands[0] == v.operands[1] {
                    continue;
                }
                out.entry(v.to_string()).or_insert(v);
            }
        }
    }
    out.into_values().collect()
}
