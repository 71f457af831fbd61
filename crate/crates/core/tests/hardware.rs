//! Native execution and cycle-counter measurement. Each test returns early on hosts
//! without x86-64 or with `SLOPT_BACKEND=simulate`.

use std::path::PathBuf;
use std::sync::Arc;

use slopt::catalog::{Catalog, Features};
use slopt::emit::assemble_ir;
use slopt::exec::Executable;
use slopt::ir::{parse_function, FunctionSpec};
use slopt::measure::{Backend, MeasurementConfig, Measurer, Winner};
use slopt::model::Model;
use slopt::optimizer::{optimize, OptimizerConfig};
use slopt::oracle;
use slopt::selftest::{run_selftest, Executor};
use slopt::x86::Mnemonic;

fn fixture(name: &str) -> Arc<FunctionSpec> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(format!("{name}.json"));
    Arc::new(parse_function(&std::fs::read_to_string(path).unwrap()).unwrap())
}

fn hardware() -> bool {
    let ok = cfg!(target_arch = "x86_64") && Backend::from_env() != Some(Backend::SimulatedCost);
    if !ok {
        eprintln!("SKIP: no hardware backend");
    }
    ok
}

#[test]
fn native_selftest() {
    if !hardware() {
        return;
    }
    let report = run_selftest(Features::detect(), Executor::Native, 1000, 9).unwrap();
    let failed: Vec<_> = report.failures().collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn incorrect_candidate_loses_on_hardware() {
    if !hardware() {
        return;
    }
    let spec = fixture("add4");
    let model = Model::new(spec.clone(), &Catalog::new(Features::detect())).unwrap();
    let good = assemble_ir(&model).unwrap();
    let mut bad = good.clone();
    let i = bad
        .insts
        .iter()
        .position(|i| i.mnemonic == Mnemonic::Add)
        .unwrap();
    bad.insts[i].mnemonic = Mnemonic::Sub;

    let mut m = Measurer::new(spec, &good, MeasurementConfig::default()).unwrap();
    let a = m.prepare(&good).unwrap();
    let b = m.prepare(&bad).unwrap();
    let r = m.compare(&a, &b).unwrap();
    assert!(r.a_correct.is_ok());
    assert!(r.b_correct.is_err());
    assert_eq!(r.winner, Winner::A);
    // the incorrect candidate is still timed
    assert!(r.median_b > 0.0);
}

#[test]
fn short_hardware_run_stays_correct() {
    if !hardware() {
        return;
    }
    let spec = fixture("mulmod61");
    let config = OptimizerConfig {
        evals: 300,
        seed: 3,
        catalog: Catalog::new(Features::detect()),
        ..OptimizerConfig::default()
    };
    let r = optimize(spec.clone(), &config, |_| {}).unwrap();
    assert_eq!(r.history.len(), 300);
    let exe = Executable::new(&r.program).unwrap();
    let mut rng = oracle::rng_from_seed(1);
    for _ in 0..1000 {
        let inputs = oracle::random_inputs_with(&mut rng, &spec);
        assert_eq!(exe.run(&inputs), oracle::run(&spec, &inputs).unwrap());
    }
    assert!(r.history.iter().all(|h| h.incumbent_cycles > 0.0));
}
