use std::hint::black_box;
use std::path::PathBuf;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use slopt::batch;
use slopt::catalog::{Catalog, Features};
use slopt::emit::assemble_ir;
use slopt::emulate::emulate_program;
use slopt::ir::parse_function;
use slopt::model::Model;
use slopt::oracle;

fn p25519() -> Arc<slopt::ir::FunctionSpec> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/p25519_mul.json");
    Arc::new(parse_function(&std::fs::read_to_string(path).unwrap()).unwrap())
}

fn inputs(spec: &slopt::ir::FunctionSpec, n: usize) -> Vec<Vec<u64>> {
    let mut rng = oracle::rng_from_seed(0);
    (0..n)
        .map(|_| oracle::random_inputs_with(&mut rng, spec))
        .collect()
}

fn oracle_batch(c: &mut Criterion) {
    let spec = p25519();
    let mut g = c.benchmark_group("oracle");
    for n in [64, 1024, 16384] {
        let xs = inputs(&spec, n);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::new("sequential", n), &xs, |b, xs| {
            b.iter(|| batch::map_sequential(xs, |i| oracle::run(&spec, black_box(i))))
        });
        g.bench_with_input(BenchmarkId::new("parallel", n), &xs, |b, xs| {
            b.iter(|| batch::map(xs, |i| oracle::run(&spec, black_box(i))))
        });
    }
    g.finish();
}

fn emulation_batch(c: &mut Criterion) {
    let spec = p25519();
    let model = Model::new(spec.clone(), &Catalog::new(Features::ALL)).unwrap();
    let program = assemble_ir(&model).unwrap();
    let mut g = c.benchmark_group("emulate");
    for n in [64, 1024, 16384] {
        let xs = inputs(&spec, n);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::new("sequential", n), &xs, |b, xs| {
            b.iter(|| batch::map_sequential(xs, |i| emulate_program(&program, black_box(i))))
        });
        g.bench_with_input(BenchmarkId::new("parallel", n), &xs, |b, xs| {
            b.iter(|| batch::map(xs, |i| emulate_program(&program, black_box(i))))
        });
    }
    g.finish();
}

criterion_group!(benches, oracle_batch, emulation_batch);
criterion_main!(benches);
