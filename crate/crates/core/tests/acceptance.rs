//! Acceptance suite. One line per criterion: PASS, FAIL or SKIP, with timing and the
//! measured quantity. Hardware criteria (7, 8) are environment-sensitive: they are
//! skipped when `SLOPT_BACKEND=simulate` or on non-x86-64 hosts, and a FAIL there does
//! not fail the process. Any other FAIL exits nonzero.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::Rng;
use slopt::catalog::{Catalog, Features};
use slopt::emit::{assemble_ir, conditional_branches};
use slopt::emulate::emulate_program;
use slopt::encode::{encode, form_signature, to_hex};
use slopt::exec::{check_host, Executable};
use slopt::ir::{dependency_graph, parse_function, DepGraph, FunctionSpec, Operator};
use slopt::measure::{Backend, MeasurementConfig, Measurer};
use slopt::model::{Model, ModelState};
use slopt::optimizer::{optimize, write_history, OptimizerConfig};
use slopt::oracle::{self, eval_op, rng_from_seed};
use slopt::selftest::{run_selftest, Executor};
use slopt::testgen::{emitted_instructions, random_spec, GenConfig};
use slopt::x86::{Inst, Mnemonic};

const FIXTURES: [&str; 8] = [
    "add1",
    "identity",
    "mul8",
    "mulmod61",
    "add4",
    "sub4",
    "select4",
    "p25519_mul",
];

/// Repetitions for the end-to-end run; the default 31 drifts on noisy virtualized hosts.
const E2E_REPETITIONS: usize = 101;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn fixture(name: &str) -> Arc<FunctionSpec> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(format!("{name}.json"));
    Arc::new(parse_function(&std::fs::read_to_string(path).unwrap()).unwrap())
}

fn big(limbs: &[u64]) -> BigUint {
    BigUint::from_slice(
        &limbs
            .iter()
            .flat_map(|&l| [l as u32, (l >> 32) as u32])
            .collect::<Vec<_>>(),
    )
}

fn native_features() -> Option<Features> {
    if !cfg!(target_arch = "x86_64") {
        return None;
    }
    [Features::ALL, Features::BASELINE]
        .into_iter()
        .find(|&f| check_host(f).is_ok())
}

/// Reason to skip a hardware criterion, if any.
fn hardware_skip() -> Option<String> {
    if !cfg!(target_arch = "x86_64") {
        return Some("hardware counter needs an x86-64 host".into());
    }
    if Backend::from_env() == Some(Backend::SimulatedCost) {
        return Some("SLOPT_BACKEND=simulate".into());
    }
    None
}

fn c1_oracle_soundness() -> Outcome {
    let mut rng = rng_from_seed(1);
    let modulus = BigUint::from(1u8) << 256u32;
    for case in 0..10_000 {
        let a: [u64; 4] = rng.random();
        let b: [u64; 4] = rng.random();
        let (mut sum, mut diff) = ([0u64; 4], [0u64; 4]);
        let (mut carry, mut borrow) = (0, 0);
        for i in 0..4 {
            let s = eval_op(Operator::AddCarryX, None, &[carry, a[i], b[i]]).unwrap();
            (sum[i], carry) = (s.as_slice()[0], s.as_slice()[1]);
            let d = eval_op(Operator::SubBorrowX, None, &[borrow, a[i], b[i]]).unwrap();
            (diff[i], borrow) = (d.as_slice()[0], d.as_slice()[1]);
        }
        let (wa, wb) = (big(&a), big(&b));
        let want_sum = &wa + &wb;
        if big(&sum) + (BigUint::from(carry) << 256u32) != want_sum {
            return Fail(format!("add case {case}: {a:x?} + {b:x?}"));
        }
        let want_diff = (&wa + &modulus - &wb) % &modulus;
        if big(&diff) != want_diff || (borrow == 1) != (wa < wb) {
            return Fail(format!("sub case {case}: {a:x?} - {b:x?}"));
        }
        let (x, y): (u64, u64) = (rng.random(), rng.random());
        let p = eval_op(Operator::MulX, None, &[x, y]).unwrap();
        let got = BigUint::from(p.as_slice()[0]) + (BigUint::from(p.as_slice()[1]) << 64u32);
        if got != BigUint::from(x) * BigUint::from(y) {
            return Fail(format!("mulx case {case}: {x:#x} * {y:#x}"));
        }
    }
    Pass("10000 add/sub chains and 10000 products exact".into())
}

fn c2_template_suite() -> Outcome {
    let Some(features) = native_features() else {
        return Skip("native execution needs an x86-64 host".into());
    };
    let report = match run_selftest(features, Executor::Native, 10_000, 2) {
        Ok(r) => r,
        Err(e) => return Skip(e.to_string()),
    };
    let failures: Vec<String> = report
        .failures()
        .map(|f| format!("{} / {}", f.case, f.template.name()))
        .collect();
    verdict(
        failures.is_empty(),
        format!(
            "{} variants x 10000 inputs, {} failed {}",
            report.results.len(),
            failures.len(),
            failures.join(", ")
        ),
    )
}

fn c3_golden_corpus() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/encodings.txt");
    let text = std::fs::read_to_string(path).unwrap();
    let mut forms = std::collections::BTreeSet::new();
    let mut n = 0;
    for line in text
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (hex, src) = line.split_once('\t').unwrap();
        let inst = match Inst::parse(src) {
            Ok(i) => i,
            Err(e) => return Fail(format!("{src}: {e}")),
        };
        let got = encode(&inst).map(|b| to_hex(&b));
        if got.as_deref() != Ok(hex) {
            return Fail(format!("{src}: expected {hex}, got {got:?}"));
        }
        forms.insert(form_signature(&inst));
        n += 1;
    }
    let missing: Vec<String> = emitted_instructions(7, 100)
        .iter()
        .map(form_signature)
        .filter(|f| !forms.contains(f))
        .collect();
    verdict(
        missing.is_empty(),
        format!(
            "{n} instructions byte-identical, {} forms, {} emitted forms missing",
            forms.len(),
            missing.len()
        ),
    )
}

fn c4_mutation_legality() -> Outcome {
    let mut rng = rng_from_seed(4);
    let cfg = GenConfig {
        min_ops: 10,
        max_ops: 60,
        ..GenConfig::default()
    };
    let catalog = Catalog::new(Features::ALL);
    let (specs, per_spec) = (20, 500);
    for s in 0..specs {
        let spec = Arc::new(random_spec(&mut rng, &cfg));
        let mut model = Model::new(spec, &catalog).unwrap();
        let dep = dependency_graph(model.spec());
        for k in 0..per_spec {
            let before = model.state();
            let record = model.mutate(&mut rng);
            if !dep.is_topological(model.order()) {
                return Fail(format!("spec {s}, mutation {k}: order not topological"));
            }
            if rng.random_bool(0.5) {
                model.commit(&record);
            } else {
                if let Err(e) = model.revert(&record) {
                    return Fail(format!("spec {s}, mutation {k}: {e}"));
                }
                if model.state() != before {
                    return Fail(format!("spec {s}, mutation {k}: revert not exact"));
                }
            }
        }
    }
    Pass(format!("{} mutations over {specs} specs", specs * per_spec))
}

fn random_topological_order<R: Rng>(dep: &DepGraph, rng: &mut R) -> Vec<usize> {
    let mut indeg: Vec<usize> = dep.preds.iter().map(Vec::len).collect();
    let mut ready: Vec<usize> = (0..dep.len()).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(dep.len());
    while !ready.is_empty() {
        let pick = rng.random_range(0..ready.len());
        let op = ready.swap_remove(pick);
        order.push(op);
        for &s in &dep.succs[op] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(s);
            }
        }
    }
    order
}

fn c5_reorder_neutrality() -> Outcome {
    let native = native_features();
    let features = native.unwrap_or(Features::ALL);
    let catalog = Catalog::new(features);
    let mut rng = rng_from_seed(5);
    for name in FIXTURES {
        let spec = fixture(name);
        let base = Model::new(spec.clone(), &catalog).unwrap();
        let dep = dependency_graph(&spec);
        for n in 0..100 {
            let state = ModelState {
                order: random_topological_order(&dep, &mut rng),
                variants: base.state().variants,
            };
            let model = Model::from_state(spec.clone(), &catalog, &state).unwrap();
            let p = assemble_ir(&model).unwrap();
            let exe = native.map(|_| Executable::new(&p).unwrap());
            for _ in 0..100 {
                let inputs = oracle::random_inputs_with(&mut rng, &spec);
                let want = oracle::run(&spec, &inputs).unwrap();
                let got = match &exe {
                    Some(exe) => Ok(exe.run(&inputs)),
                    None => emulate_program(&p, &inputs).map_err(|e| e.to_string()),
                };
                if got.as_ref() != Ok(&want) {
                    return Fail(format!("{name}, order {n}: {inputs:x?} gave {got:x?}"));
                }
            }
        }
    }
    Pass(format!(
        "{} fixtures x 100 orders x 100 inputs ({})",
        FIXTURES.len(),
        if native.is_some() {
            "native"
        } else {
            "emulated"
        }
    ))
}

fn c6_rls_simulated() -> Outcome {
    let spec = fixture("mul8");
    let config = OptimizerConfig {
        evals: 1000,
        seed: 0,
        measurement: MeasurementConfig {
            backend: Backend::SimulatedCost,
            ..MeasurementConfig::default()
        },
        ..OptimizerConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let r = optimize(spec.clone(), &config, |_| {}).unwrap();
        let path = dir.path().join(format!("history{k}.csv"));
        write_history(&r.history, &path).unwrap();
        runs.push((r, std::fs::read(&path).unwrap()));
    }
    let (r, bytes) = &runs[0];
    let monotone = r
        .history
        .windows(2)
        .all(|w| w[1].incumbent_cycles <= w[0].incumbent_cycles);
    let identical = *bytes == runs[1].1 && r.program.insts == runs[1].0.program.insts;
    verdict(
        monotone && identical && r.final_cycles < r.initial_cycles && r.history.len() == 1000,
        format!(
            "cost {} -> {}, non-increasing {monotone}, replay identical {identical}",
            r.initial_cycles, r.final_cycles
        ),
    )
}

fn c7_measurement_protocol() -> Outcome {
    if let Some(why) = hardware_skip() {
        return Skip(why);
    }
    let spec = fixture("p25519_mul");
    let model = Model::new(spec.clone(), &Catalog::new(Features::detect())).unwrap();
    let p = assemble_ir(&model).unwrap();
    let config = MeasurementConfig {
        seed: 7,
        ..MeasurementConfig::default()
    };
    let mut m = match Measurer::new(spec, &p, config) {
        Ok(m) => m,
        Err(e) => return Skip(e.to_string()),
    };
    let a = m.prepare(&p).unwrap();
    let b = m.prepare(&p).unwrap();
    let mut stable = 0;
    let mut totals = Vec::new();
    for _ in 0..100 {
        let r = m.compare(&a, &b).unwrap();
        if (r.median_a / r.median_b - 1.0).abs() < 0.02 {
            stable += 1;
        }
        totals.extend(
            r.samples
                .iter()
                .map(|s| s.cycles_per_iteration * s.iterations as f64),
        );
    }
    let total = slopt::measure::median(&mut totals);
    let in_band = (5_000.0..=20_000.0).contains(&total);
    verdict(
        stable >= 95 && in_band,
        format!("{stable}/100 self-compares within 2%, median loop total {total:.0} cycles"),
    )
}

fn c8_end_to_end() -> Outcome {
    if let Some(why) = hardware_skip() {
        return Skip(why);
    }
    let spec = fixture("p25519_mul");
    let config = OptimizerConfig {
        evals: 10_000,
        seed: 0,
        catalog: Catalog::new(Features::detect()),
        measurement: MeasurementConfig {
            repetitions: E2E_REPETITIONS,
            ..MeasurementConfig::default()
        },
        ..OptimizerConfig::default()
    };
    let r = match optimize(spec.clone(), &config, |_| {}) {
        Ok(r) => r,
        Err(e) => return Fail(e.to_string()),
    };
    // independent head-to-head of the initial and final programs
    let verify = MeasurementConfig {
        seed: 8,
        ..MeasurementConfig::default()
    };
    let mut m = Measurer::new(spec, &r.initial_program, verify).unwrap();
    let initial = m.prepare(&r.initial_program).unwrap();
    let last = m.prepare(&r.program).unwrap();
    let mut ratios: Vec<f64> = (0..11)
        .map(|_| {
            let c = m.compare(&initial, &last).unwrap();
            assert!(c.b_correct.is_ok(), "final program is incorrect");
            c.median_a / c.median_b
        })
        .collect();
    let speedup = slopt::measure::median(&mut ratios);
    let n = r.initial_program.instruction_count();
    verdict(
        speedup >= 1.05 && (80..=170).contains(&n),
        format!(
            "{n} instructions, final {} instructions, speedup {speedup:.3}x over initial \
             ({E2E_REPETITIONS} repetitions)",
            r.program.instruction_count()
        ),
    )
}

/// Operations whose results reach a return value.
fn live_ops(spec: &FunctionSpec) -> Vec<bool> {
    let mut needed = vec![false; spec.vars.len()];
    for r in spec.returns.iter().filter_map(|r| r.var()) {
        needed[r.index()] = true;
    }
    let mut live = vec![false; spec.body.len()];
    for (i, op) in spec.body.iter().enumerate().rev() {
        if op.outputs.iter().any(|o| needed[o.index()]) {
            live[i] = true;
            for v in op.inputs.iter().filter_map(|o| o.var()) {
                needed[v.index()] = true;
            }
        }
    }
    live
}

fn c9_side_channel() -> Outcome {
    let mut programs = 0;
    let mut cmovs = 0;
    let catalog = Catalog::new(Features::ALL);
    let mut rng = rng_from_seed(9);
    let mut specs: Vec<Arc<FunctionSpec>> = FIXTURES.iter().map(|n| fixture(n)).collect();
    specs.extend((0..200).map(|_| Arc::new(random_spec(&mut rng, &GenConfig::default()))));
    for spec in &specs {
        let mut model = Model::new(spec.clone(), &catalog).unwrap();
        let live = live_ops(spec);
        let selects = spec
            .body
            .iter()
            .zip(&live)
            .filter(|(o, &l)| l && o.operator == Operator::CmovZnz)
            .count();
        for _ in 0..20 {
            let record = model.mutate(&mut rng);
            model.commit(&record);
            let p = assemble_ir(&model).unwrap();
            let branches = conditional_branches(&p.listing(&[]));
            if !branches.is_empty() {
                return Fail(format!("conditional branch {branches:?} in {}", spec.name));
            }
            let n = p
                .insts
                .iter()
                .filter(|i| i.mnemonic == Mnemonic::Cmovnz)
                .count();
            if n < selects {
                return Fail(format!("{}: cmovznz emitted without cmovCC", spec.name));
            }
            cmovs += n;
            programs += 1;
        }
    }
    Pass(format!(
        "{programs} programs without conditional branches, {cmovs} cmovCC"
    ))
}

fn main() {
    type Criterion = (u32, &'static str, bool, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        (1, "oracle soundness", false, c1_oracle_soundness),
        (2, "template differential suite", false, c2_template_suite),
        (3, "encoding golden corpus", false, c3_golden_corpus),
        (4, "mutation legality", false, c4_mutation_legality),
        (
            5,
            "reordering semantic neutrality",
            false,
            c5_reorder_neutrality,
        ),
        (
            6,
            "RLS monotonicity and determinism (simulated)",
            false,
            c6_rls_simulated,
        ),
        (
            7,
            "measurement protocol (hardware)",
            true,
            c7_measurement_protocol,
        ),
        (8, "end-to-end improvement (hardware)", true, c8_end_to_end),
        (9, "side-channel discipline", false, c9_side_channel),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut hard_failures = 0;
    for (n, name, env_sensitive, f) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        });
        let t = fmt_secs(start.elapsed());
        match outcome {
            Pass(d) => println!("PASS {n} {name} [{t}]: {d}"),
            Skip(d) => println!("SKIP {n} {name} [{t}]: {d}"),
            Fail(d) => {
                let note = if env_sensitive {
                    " (environment-sensitive)"
                } else {
                    hard_failures += 1;
                    ""
                };
                println!("FAIL {n} {name}{note} [{t}]: {d}");
            }
        }
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}

fn fmt_secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}
