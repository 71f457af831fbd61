//! Reference interpreter for the input language.
//!
//! Operator conventions follow the C code that field-arithmetic generators emit:
//!
//! * `addcarryx(c, a, b) -> (sum, carry)` with the carry-in first,
//! * `subborrowx(b, x, y) -> (diff, borrow)` computing `x - y - b`,
//! * `mulx(a, b) -> (lo, hi)` with the low limb first,
//! * `cmovznz(c, z, nz)` returns `z` when `c == 0` and `nz` otherwise,
//! * `x >> k` / `x << k` on a `(lo, hi, k)` triple shift the 128-bit value
//!   `hi:lo` and return the low limb for `>>` and the high limb for `<<`.
//!
//! Every downstream component is checked against this module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ir::{FunctionSpec, Operand, Operator, Width};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("{op} expects {expected:?} inputs, got {got}")]
    Arity {
        op: Operator,
        expected: &'static [usize],
        got: usize,
    },
    #[error("{op}: input {index} = {value:#x} exceeds {width:?}")]
    Width {
        op: Operator,
        index: usize,
        value: u64,
        width: Width,
    },
    #[error("shift amount {0} out of range")]
    ShiftAmount(u64),
    #[error("function takes {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
}

/// Up to two result limbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outputs {
    vals: [u64; 2],
    len: u8,
}

impl Outputs {
    fn one(v: u64) -> Self {
        Outputs {
            vals: [v, 0],
            len: 1,
        }
    }

    fn two(a: u64, b: u64) -> Self {
        Outputs {
            vals: [a, b],
            len: 2,
        }
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.vals[..self.len as usize]
    }
}

fn check_u1(op: Operator, index: usize, value: u64) -> Result<(), EvalError> {
    if value > 1 {
        Err(EvalError::Width {
            op,
            index,
            value,
            width: Width::U1,
        })
    } else {
        Ok(())
    }
}

/// Evaluates a single operator. `cast` is the target width of `static_cast`.
pub fn eval_op(op: Operator, cast: Option<Width>, inputs: &[u64]) -> Result<Outputs, EvalError> {
    if !op.input_arity().contains(&inputs.len()) {
        return Err(EvalError::Arity {
            op,
            expected: op.input_arity(),
            got: inputs.len(),
        });
    }
    let out = match op {
        Operator::Not => Outputs::one((inputs[0] == 0) as u64),
        Operator::And => Outputs::one(inputs[0] & inputs[1]),
        Operator::Or => Outputs::one(inputs[0] | inputs[1]),
        Operator::Mul => Outputs::one(inputs[0].wrapping_mul(inputs[1])),
        Operator::Add => Outputs::one(inputs[0].wrapping_add(inputs[1])),
        Operator::Sub => Outputs::one(inputs[0].wrapping_sub(inputs[1])),
        Operator::Assign => Outputs::one(inputs[0]),
        Operator::BitNot => Outputs::one(!inputs[0]),
        Operator::Shl | Operator::Shr => {
            let k = *inputs.last().unwrap();
            if k >= 64 {
                return Err(EvalError::ShiftAmount(k));
            }
            let v = match (op, inputs.len()) {
                (Operator::Shl, 2) => inputs[0] << k,
                (Operator::Shr, 2) => inputs[0] >> k,
                (Operator::Shl, _) => {
                    let wide = ((inputs[1] as u128) << 64) | inputs[0] as u128;
                    ((wide << k) >> 64) as u64
                }
                _ => {
                    let wide = ((inputs[1] as u128) << 64) | inputs[0] as u128;
                    (wide >> k) as u64
                }
            };
            Outputs::one(v)
        }
        Operator::AddCarryX => {
            check_u1(op, 0, inputs[0])?;
            let wide = inputs[0] as u128 + inputs[1] as u128 + inputs[2] as u128;
            Outputs::two(wide as u64, (wide >> 64) as u64)
        }
        Operator::SubBorrowX => {
            check_u1(op, 0, inputs[0])?;
            let (d1, b1) = inputs[1].overflowing_sub(inputs[2]);
            let (d2, b2) = d1.overflowing_sub(inputs[0]);
            Outputs::two(d2, (b1 | b2) as u64)
        }
        Operator::MulX => {
            let wide = inputs[0] as u128 * inputs[1] as u128;
            Outputs::two(wide as u64, (wide >> 64) as u64)
        }
        Operator::CmovZnz => Outputs::one(if inputs[0] == 0 { inputs[1] } else { inputs[2] }),
        Operator::StaticCast => match cast.unwrap_or(Width::U64) {
            Width::U1 => Outputs::one(inputs[0] & 1),
            _ => Outputs::one(inputs[0]),
        },
    };
    Ok(out)
}

/// Evaluates `spec` on a flattened input vector (all argument elements in order).
pub fn run(spec: &FunctionSpec, inputs: &[u64]) -> Result<Vec<u64>, EvalError> {
    let order: Vec<usize> = (0..spec.body.len()).collect();
    run_in_order(spec, &order, inputs)
}

/// Same as [`run`] but evaluating the body in `order`, which must be topological.
pub fn run_in_order(
    spec: &FunctionSpec,
    order: &[usize],
    inputs: &[u64],
) -> Result<Vec<u64>, EvalError> {
    let expected = spec.input_len();
    if inputs.len() != expected {
        return Err(EvalError::InputCount {
            expected,
            got: inputs.len(),
        });
    }
    let mut env = vec![0u64; spec.vars.len()];
    for (i, (&v, w)) in inputs.iter().zip(spec.input_widths()).enumerate() {
        if v > w.max_value() {
            return Err(EvalError::Width {
                op: Operator::Assign,
                index: i,
                value: v,
                width: w,
            });
        }
        env[i] = v;
    }
    let read = |env: &[u64], o: Operand| match o {
        Operand::Var(v) => env[v.index()],
        Operand::Lit(x) => x,
    };
    let mut buf = [0u64; 3];
    for &i in order {
        let op = &spec.body[i];
        for (slot, &o) in buf.iter_mut().zip(&op.inputs) {
            *slot = read(&env, o);
        }
        let out = eval_op(op.operator, op.cast, &buf[..op.inputs.len()])?;
        for (&v, &x) in op.outputs.iter().zip(out.as_slice()) {
            env[v.index()] = x;
        }
    }
    Ok(spec.returns.iter().map(|&o| read(&env, o)).collect())
}

/// The PRNG used for every seeded stream in the crate: ChaCha8 (`rand_chacha`)
/// seeded through `SeedableRng::seed_from_u64`.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fills a flattened input vector: uniform 64-bit words, uniform bits for `u1` arguments.
pub fn random_inputs_with<R: Rng + ?Sized>(rng: &mut R, spec: &FunctionSpec) -> Vec<u64> {
    spec.input_widths()
        .into_iter()
        .map(|w| match w {
            Width::U1 => rng.random::<u64>() & 1,
            _ => rng.random::<u64>(),
        })
        .collect()
}

pub fn random_inputs(seed: u64, spec: &FunctionSpec) -> Vec<u64> {
    random_inputs_with(&mut rng_from_seed(seed), spec)
}
