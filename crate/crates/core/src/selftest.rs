//! Template differential suite: every catalog variant of every operation shape is
//! emitted as a one-operation function, run (natively or in the emulator) and checked
//! against the operator semantics.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::batch;
use crate::catalog::{Catalog, Features, TemplateKind};
use crate::emit::{assemble_ir, conditional_branches, AsmProgram};
use crate::emulate::emulate_program;
use crate::exec::{check_host, ExecError, Executable};
use crate::ir::{parse_function, FunctionSpec, Operand, Width};
use crate::model::{Model, ModelState};
use crate::oracle::{eval_op, rng_from_seed};

#[derive(Debug, Error)]
pub enum SelftestError {
    #[error(transparent)]
    Platform(#[from] ExecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Executor {
    Native,
    Emulated,
}

pub struct SelftestCase {
    pub name: String,
    pub spec: Arc<FunctionSpec>,
}

fn case(
    name: &str,
    args: &[(&str, &str)],
    returns: &[&str],
    op: &str,
    ins: &[&str],
    width: Option<&str>,
) -> SelftestCase {
    let outs: Vec<&str> = returns
        .iter()
        .copied()
        .filter(|r| !r.starts_with('_'))
        .collect();
    let all_outs: Vec<String> = returns
        .iter()
        .map(|r| r.trim_start_matches('_').to_string())
        .collect();
    let json = serde_json::json!({
        "name": name,
        "args": args.iter().map(|(n, t)| serde_json::json!({"name": n, "type": t})).collect::<Vec<_>>(),
        "returns": outs,
        "body": [match width {
            Some(w) => serde_json::json!({"out": all_outs, "op": op, "in": ins, "width": w}),
            None => serde_json::json!({"out": all_outs, "op": op, "in": ins}),
        }],
    });
    let spec =
        parse_function(&json.to_string()).unwrap_or_else(|e| panic!("selftest case {name}: {e}"));
    SelftestCase {
        name: name.to_string(),
        spec: Arc::new(spec),
    }
}

/// One-operation functions covering every shape and the operand forms the emitter
/// distinguishes (registers, 8/32/64-bit literals, literal carries). Output names
/// starting with `_` are computed but not returned.
pub fn single_op_cases() -> Vec<SelftestCase> {
    let ab = [("a", "u64"), ("b", "u64")];
    let a = [("a", "u64")];
    let cab = [("c", "u1"), ("a", "u64"), ("b", "u64")];
    let mut v = vec![
        case("add", &ab, &["x"], "+", &["a", "b"], None),
        case("add_same", &a, &["x"], "+", &["a", "a"], None),
        case("add_imm8", &a, &["x"], "+", &["a", "0x7f"], None),
        case("add_imm32", &a, &["x"], "+", &["0x12345678", "a"], None),
        case(
            "add_imm64",
            &a,
            &["x"],
            "+",
            &["a", "0x123456789abcdef"],
            None,
        ),
        case("sub", &ab, &["x"], "-", &["a", "b"], None),
        case("sub_imm", &a, &["x"], "-", &["a", "0x10"], None),
        case("sub_from_lit", &a, &["x"], "-", &["0x5", "a"], None),
        case(
            "sub_from_big_lit",
            &a,
            &["x"],
            "-",
            &["0xfedcba9876543210", "a"],
            None,
        ),
        case("mul", &ab, &["x"], "*", &["a", "b"], None),
        case("mul_imm32", &a, &["x"], "*", &["a", "0x7fffffff"], None),
        case(
            "mul_imm64",
            &a,
            &["x"],
            "*",
            &["0xffffffff00000001", "a"],
            None,
        ),
        case("mul_one", &a, &["x"], "*", &["a", "0x1"], None),
        case("mul_zero", &a, &["x"], "*", &["a", "0x0"], None),
        case("mul_lit_first", &a, &["x"], "*", &["0x8", "a"], None),
        case(
            "mul_max",
            &a,
            &["x"],
            "*",
            &["a", "0xffffffffffffffff"],
            None,
        ),
        case("mulx", &ab, &["lo", "hi"], "mulx", &["a", "b"], None),
        case("mulx_square", &a, &["lo", "hi"], "mulx", &["a", "a"], None),
        case(
            "mulx_lo_only",
            &ab,
            &["lo", "_hi"],
            "mulx",
            &["a", "b"],
            None,
        ),
        case(
            "mulx_hi_only",
            &ab,
            &["_lo", "hi"],
            "mulx",
            &["a", "b"],
            None,
        ),
        case("mulx_imm", &a, &["lo", "hi"], "mulx", &["a", "0x13"], None),
        case(
            "mulx_imm64",
            &a,
            &["lo", "hi"],
            "mulx",
            &["0xfffffffffffffffb", "a"],
            None,
        ),
        case(
            "addcarryx",
            &cab,
            &["s", "k"],
            "addcarryx",
            &["c", "a", "b"],
            None,
        ),
        case(
            "addcarryx_c0",
            &ab,
            &["s", "k"],
            "addcarryx",
            &["0x0", "a", "b"],
            None,
        ),
        case(
            "addcarryx_c1",
            &ab,
            &["s", "k"],
            "addcarryx",
            &["0x1", "a", "b"],
            None,
        ),
        case(
            "addcarryx_imm",
            &[("c", "u1"), ("a", "u64")],
            &["s", "k"],
            "addcarryx",
            &["c", "a", "0x26"],
            None,
        ),
        case(
            "addcarryx_sum_only",
            &cab,
            &["s", "_k"],
            "addcarryx",
            &["c", "a", "b"],
            None,
        ),
        case(
            "addcarryx_carry_only",
            &cab,
            &["_s", "k"],
            "addcarryx",
            &["c", "a", "b"],
            None,
        ),
        case(
            "subborrowx",
            &cab,
            &["d", "k"],
            "subborrowx",
            &["c", "a", "b"],
            None,
        ),
        case(
            "subborrowx_c0",
            &ab,
            &["d", "k"],
            "subborrowx",
            &["0x0", "a", "b"],
            None,
        ),
        case(
            "subborrowx_c1",
            &ab,
            &["d", "k"],
            "subborrowx",
            &["0x1", "a", "b"],
            None,
        ),
        case(
            "subborrowx_from_lit",
            &[("c", "u1"), ("b", "u64")],
            &["d", "k"],
            "subborrowx",
            &["c", "0x0", "b"],
            None,
        ),
        case(
            "subborrowx_imm",
            &[("c", "u1"), ("a", "u64")],
            &["d", "k"],
            "subborrowx",
            &["c", "a", "0xffffffffffffffed"],
            None,
        ),
        case("and", &ab, &["x"], "&", &["a", "b"], None),
        case("and_imm", &a, &["x"], "&", &["a", "0x7ffffffffffff"], None),
        case("and_imm8", &a, &["x"], "&", &["0x1", "a"], None),
        case("or", &ab, &["x"], "or", &["a", "b"], None),
        case(
            "or_imm",
            &a,
            &["x"],
            "|",
            &["a", "0x8000000000000000"],
            None,
        ),
        case("bitnot", &a, &["x"], "~", &["a"], None),
        case("not", &a, &["x"], "!", &["a"], None),
        case("not_u1", &[("c", "u1")], &["x"], "!", &["c"], None),
        case("assign", &a, &["x"], "=", &["a"], None),
        case("assign_lit", &a, &["x"], "=", &["0xdeadbeefcafe"], None),
        case("cast_u1", &a, &["x"], "static_cast", &["a"], Some("u1")),
        case(
            "cast_u64",
            &[("c", "u1")],
            &["x"],
            "static_cast",
            &["c"],
            Some("u64"),
        ),
        case("cmovznz", &cab, &["x"], "cmovznz", &["c", "a", "b"], None),
        case(
            "cmovznz_u64",
            &[("c", "u64"), ("a", "u64"), ("b", "u64")],
            &["x"],
            "cmovznz",
            &["c", "a", "b"],
            None,
        ),
        case(
            "cmovznz_lit_z",
            &[("c", "u1"), ("b", "u64")],
            &["x"],
            "cmovznz",
            &["c", "0x0", "b"],
            None,
        ),
        case(
            "cmovznz_lit_nz",
            &[("c", "u1"), ("a", "u64")],
            &["x"],
            "cmovznz",
            &["c", "a", "0xffffffffffffffff"],
            None,
        ),
    ];
    for m in [
        2u64,
        4,
        8,
        1 << 40,
        1 << 63,
        3,
        5,
        9,
        19,
        0x13,
        0x26,
        0x1000001,
        0x80000003,
    ] {
        v.push(case(
            &format!("mul_{m:#x}"),
            &a,
            &["x"],
            "*",
            &["a", &format!("{m:#x}")],
            None,
        ));
    }
    for k in [0u32, 1, 2, 3, 13, 32, 63] {
        v.push(case(
            &format!("shl_{k}"),
            &a,
            &["x"],
            "<<",
            &["a", &k.to_string()],
            None,
        ));
        v.push(case(
            &format!("shr_{k}"),
            &a,
            &["x"],
            ">>",
            &["a", &k.to_string()],
            None,
        ));
        v.push(case(
            &format!("shld_{k}"),
            &ab,
            &["x"],
            "<<",
            &["a", "b", &k.to_string()],
            None,
        ));
        v.push(case(
            &format!("shrd_{k}"),
            &ab,
            &["x"],
            ">>",
            &["a", "b", &k.to_string()],
            None,
        ));
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantResult {
    pub case: String,
    pub template: TemplateKind,
    pub inputs_checked: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SelftestReport {
    pub results: Vec<VariantResult>,
}

impl SelftestReport {
    pub fn failures(&self) -> impl Iterator<Item = &VariantResult> {
        self.results.iter().filter(|r| r.failure.is_some())
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

const EDGE_VALUES: [u64; 10] = [
    0,
    1,
    2,
    u64::MAX,
    u64::MAX - 1,
    1 << 63,
    (1 << 63) - 1,
    0xffff_ffff,
    1 << 32,
    0x8000_0000,
];

/// Uniform words with edge values mixed in (one element in four).
pub fn biased_inputs<R: Rng + ?Sized>(rng: &mut R, spec: &FunctionSpec) -> Vec<u64> {
    spec.input_widths()
        .into_iter()
        .map(|w| match w {
            Width::U1 => rng.random::<u64>() & 1,
            _ if rng.random_ratio(1, 4) => EDGE_VALUES[rng.random_range(0..EDGE_VALUES.len())],
            _ => rng.random(),
        })
        .collect()
}

/// Expected returns of a one-operation function straight from the operator semantics.
fn expected(spec: &FunctionSpec, inputs: &[u64]) -> Vec<u64> {
    let op = &spec.body[0];
    let vals: Vec<u64> = op
        .inputs
        .iter()
        .map(|o| match *o {
            Operand::Lit(c) => c,
            Operand::Var(id) => {
                inputs[spec
                    .flat_input_index(id)
                    .expect("single-op inputs are arguments")]
            }
        })
        .collect();
    let outs = eval_op(op.operator, op.cast, &vals).expect("valid operands");
    spec.returns
        .iter()
        .map(|r| match *r {
            Operand::Lit(c) => c,
            Operand::Var(id) => outs.as_slice()[op
                .outputs
                .iter()
                .position(|&o| o == id)
                .expect("returns are outputs")],
        })
        .collect()
}

fn check_variant(
    case: &SelftestCase,
    program: &AsmProgram,
    executor: Executor,
    inputs_per_variant: usize,
    seed: u64,
) -> Result<(), String> {
    let listing = program.listing(&[]);
    if !conditional_branches(&listing).is_empty() {
        return Err(format!("conditional branch emitted\n{listing}"));
    }
    let exe = match executor {
        Executor::Native => Some(Executable::new(program).map_err(|e| e.to_string())?),
        Executor::Emulated => None,
    };
    let mut rng = rng_from_seed(seed);
    for n in 0..inputs_per_variant {
        let inputs = biased_inputs(&mut rng, &case.spec);
        let want = expected(&case.spec, &inputs);
        let got = match &exe {
            // the first run goes through guard pages to catch out-of-bounds accesses
            Some(exe) if n == 0 => exe.run_guarded(&inputs).map_err(|e| e.to_string())?,
            Some(exe) => exe.run(&inputs),
            None => emulate_program(program, &inputs).map_err(|e| format!("{e}\n{listing}"))?,
        };
        if got != want {
            return Err(format!(
                "inputs {inputs:#x?}: expected {want:#x?}, got {got:#x?}\n{listing}"
            ));
        }
    }
    Ok(())
}

/// Runs every variant available under `features` on `inputs_per_variant` inputs.
pub fn run_selftest(
    features: Features,
    executor: Executor,
    inputs_per_variant: usize,
    seed: u64,
) -> Result<SelftestReport, SelftestError> {
    if executor == Executor::Native {
        check_host(features)?;
    }
    let catalog = Catalog::new(features);
    let mut jobs = Vec::new();
    for case in single_op_cases() {
        let model =
            Model::new(case.spec.clone(), &catalog).expect("single-op cases have templates");
        for (i, &kind) in model.variants(0).iter().enumerate() {
            jobs.push((case.name.clone(), case.spec.clone(), kind, i as u8));
        }
    }
    let results = batch::map(&jobs, |(name, spec, kind, variant)| {
        let case = SelftestCase {
            name: name.clone(),
            spec: spec.clone(),
        };
        let state = ModelState {
            order: vec![0],
            variants: vec![*variant],
        };
        let outcome = Model::from_state(spec.clone(), &catalog, &state)
            .map_err(|e| e.to_string())
            .and_then(|m| assemble_ir(&m).map_err(|e| e.to_string()))
            .and_then(|p| {
                check_variant(
                    &case,
                    &p,
                    executor,
                    inputs_per_variant,
                    seed ^ *variant as u64,
                )
            });
        VariantResult {
            case: name.clone(),
            template: *kind,
            inputs_checked: if outcome.is_ok() {
                inputs_per_variant
            } else {
                0
            },
            failure: outcome.err(),
        }
    });
    Ok(SelftestReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_template_kind_is_covered() {
        let catalog = Catalog::new(Features::ALL);
        let mut seen = std::collections::HashSet::new();
        for c in single_op_cases() {
            let m = Model::new(c.spec.clone(), &catalog).unwrap();
            seen.extend(m.variants(0).iter().copied());
        }
        let missing: Vec<_> = [
            TemplateKind::AddAdd,
            TemplateKind::AddLea,
            TemplateKind::SubSub,
            TemplateKind::MulImul,
            TemplateKind::MulShl,
            TemplateKind::MulLea,
            TemplateKind::MulShiftAdd,
            TemplateKind::MulxMulx,
            TemplateKind::MulxMul,
            TemplateKind::MulxImul,
            TemplateKind::CarryAdd,
            TemplateKind::CarryAdc,
            TemplateKind::CarryAdcx,
            TemplateKind::CarryAdox,
            TemplateKind::BorrowSub,
            TemplateKind::BorrowSbb,
            TemplateKind::ShiftImm,
            TemplateKind::ShlLea,
            TemplateKind::ShiftDouble,
            TemplateKind::ShiftDoubleSplit,
            TemplateKind::And,
            TemplateKind::Or,
            TemplateKind::Not,
            TemplateKind::LogicalNot,
            TemplateKind::Mov,
            TemplateKind::CmovTest,
            TemplateKind::CastAnd,
            TemplateKind::CastSetc,
        ]
        .into_iter()
        .filter(|k| !seen.contains(k))
        .collect();
        assert!(missing.is_empty(), "{missing:?}");
    }

    #[test]
    fn emulated_suite_passes() {
        for features in [Features::ALL, Features::BASELINE] {
            let r = run_selftest(features, Executor::Emulated, 200, 3).unwrap();
            let failures: Vec<_> = r.failures().collect();
            assert!(failures.is_empty(), "{failures:#?}");
        }
    }
}
