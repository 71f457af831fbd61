use std::path::PathBuf;
use std::sync::Arc;

use num_bigint::BigUint;
use slopt::catalog::{Catalog, Features};
use slopt::emit::{assemble_ir, conditional_branches};
use slopt::emulate::emulate_program;
use slopt::exec::{check_host, Executable};
use slopt::ir::{parse_function, FunctionSpec};
use slopt::model::Model;
use slopt::oracle;
use slopt::x86::Mnemonic;

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

#[test]
fn p25519_mul_is_modular_multiplication() {
    let spec = fixture("p25519_mul");
    let p = (BigUint::from(1u8) << 255u32) - BigUint::from(19u8);
    let mut rng = oracle::rng_from_seed(3);
    for _ in 0..2000 {
        let inputs = oracle::random_inputs_with(&mut rng, &spec);
        let out = oracle::run(&spec, &inputs).unwrap();
        let (a, b) = (big(&inputs[..4]), big(&inputs[4..]));
        assert_eq!(big(&out) % &p, (a * b) % &p);
    }
}

#[test]
fn p25519_mul_size() {
    let spec = fixture("p25519_mul");
    let m = Model::new(spec, &Catalog::new(Features::ALL)).unwrap();
    let p = assemble_ir(&m).unwrap();
    let n = p.instruction_count();
    assert!((80..=170).contains(&n), "{n} instructions");
}

#[test]
fn select4_uses_cmov_only() {
    let m = Model::new(fixture("select4"), &Catalog::new(Features::ALL)).unwrap();
    let p = assemble_ir(&m).unwrap();
    assert!(
        p.insts
            .iter()
            .filter(|i| i.mnemonic == Mnemonic::Cmovnz)
            .count()
            >= 4
    );
    assert!(conditional_branches(&p.listing(&[])).is_empty());
}

#[test]
fn fixtures_emit_correct_code() {
    let native = check_host(Features::ALL).is_ok();
    for name in [
        "add1",
        "identity",
        "mul8",
        "mulmod61",
        "add4",
        "sub4",
        "select4",
        "p25519_mul",
    ] {
        let spec = fixture(name);
        let m = Model::new(spec.clone(), &Catalog::new(Features::ALL)).unwrap();
        let p = assemble_ir(&m).unwrap();
        let exe = native.then(|| Executable::new(&p).unwrap());
        let mut rng = oracle::rng_from_seed(1);
        for _ in 0..200 {
            let inputs = oracle::random_inputs_with(&mut rng, &spec);
            let want = oracle::run(&spec, &inputs).unwrap();
            assert_eq!(emulate_program(&p, &inputs).unwrap(), want, "{name}");
            if let Some(exe) = &exe {
                assert_eq!(exe.run_guarded(&inputs).unwrap(), want, "{name}");
            }
        }
    }
}
