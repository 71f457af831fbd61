use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slopt::catalog::{Catalog, Features};
use slopt::emit::{assemble_traced, conditional_branches};
use slopt::emulate::emulate_program;
use slopt::exec::{check_host, Executable};
use slopt::model::Model;
use slopt::oracle;
use slopt::testgen::{random_spec, GenConfig};

fn shuffled_model(
    spec: Arc<slopt::ir::FunctionSpec>,
    features: Features,
    rng: &mut ChaCha8Rng,
) -> Model {
    let mut m = Model::new(spec, &Catalog::new(features)).unwrap();
    let steps = rng.random_range(0..200);
    for _ in 0..steps {
        let rec = m.mutate(rng);
        m.commit(&rec);
    }
    m
}

/// Returns the total number of spill stores across the cases.
fn check_features(features: Features, cases: usize, cfg: &GenConfig, seed: u64) -> usize {
    let native = check_host(features).is_ok();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spills = 0;
    for case in 0..cases {
        let spec = Arc::new(random_spec(&mut rng, cfg));
        let model = shuffled_model(spec.clone(), features, &mut rng);
        let (program, _) = assemble_traced(&model)
            .unwrap_or_else(|e| panic!("case {case}: {e}\n{}", spec.to_json()));
        assert!(conditional_branches(&program.listing(&[])).is_empty());
        spills += program.spill_count;
        let exe = native.then(|| Executable::new(&program).unwrap());
        for _ in 0..8 {
            let inputs = oracle::random_inputs_with(&mut rng, &spec);
            let want = oracle::run(&spec, &inputs).unwrap();
            let got = emulate_program(&program, &inputs).unwrap_or_else(|e| {
                panic!(
                    "case {case}: {e}\n{}\n{}",
                    spec.to_json(),
                    program.listing(&[])
                )
            });
            assert_eq!(
                got,
                want,
                "case {case} emulated\n{}\n{}",
                spec.to_json(),
                program.listing(&[])
            );
            if let Some(exe) = &exe {
                assert_eq!(
                    exe.run_guarded(&inputs).unwrap(),
                    want,
                    "case {case} native"
                );
            }
        }
    }
    spills
}

#[test]
fn random_functions_all_features() {
    check_features(Features::ALL, 400, &GenConfig::default(), 1);
}

#[test]
fn random_functions_baseline_isa() {
    check_features(Features::BASELINE, 300, &GenConfig::default(), 2);
}

#[test]
fn random_functions_adx_without_bmi2() {
    check_features(
        Features {
            adx: true,
            bmi2: false,
        },
        200,
        &GenConfig::default(),
        3,
    );
}

#[test]
fn register_pressure_forces_spills() {
    let cfg = GenConfig {
        min_ops: 40,
        max_ops: 80,
        max_args: 4,
        max_arg_len: 6,
        max_returns: 8,
        locality: 0.1,
    };
    assert!(check_features(Features::ALL, 60, &cfg, 4) > 0);
}
