//! Data-parallel helpers for batch work that has no timing component: oracle runs,
//! emulation, differential checks, order sweeps.
//!
//! With the `parallel` feature (default) [`map`] runs on the rayon pool; without it,
//! or when called through [`map_sequential`], items are processed in order on the
//! calling thread. Results always come back in input order. Timing measurements
//! never go through here.

use crate::emit::AsmProgram;
use crate::emulate::{emulate_program, EmuError};
use crate::ir::FunctionSpec;
use crate::oracle::{self, EvalError};

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_sequential(items, f)
}

/// Whether [`map`] uses the thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Oracle outputs for each input vector.
pub fn eval_batch(spec: &FunctionSpec, inputs: &[Vec<u64>]) -> Vec<Result<Vec<u64>, EvalError>> {
    map(inputs, |i| oracle::run(spec, i))
}

/// Emulated outputs for each input vector.
pub fn emulate_batch(program: &AsmProgram, inputs: &[Vec<u64>]) -> Vec<Result<Vec<u64>, EmuError>> {
    map(inputs, |i| emulate_program(program, i))
}

/// Index of the first input where the emulated program disagrees with the oracle.
pub fn first_mismatch(
    spec: &FunctionSpec,
    program: &AsmProgram,
    inputs: &[Vec<u64>],
) -> Option<usize> {
    map(inputs, |i| {
        oracle::run(spec, i).ok() != emulate_program(program, i).ok()
    })
    .into_iter()
    .position(|bad| bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Catalog, Features};
    use crate::emit::assemble_ir;
    use crate::model::Model;
    use crate::testgen::{random_spec, GenConfig};
    use std::sync::Arc;

    #[test]
    fn parallel_matches_sequential() {
        let xs: Vec<u64> = (0..1000).collect();
        let f = |x: &u64| x.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
        assert_eq!(map(&xs, f), map_sequential(&xs, f));
    }

    #[test]
    fn emulated_batch_agrees() {
        let mut rng = oracle::rng_from_seed(11);
        let spec = Arc::new(random_spec(&mut rng, &GenConfig::default()));
        let m = Model::new(spec.clone(), &Catalog::new(Features::ALL)).unwrap();
        let p = assemble_ir(&m).unwrap();
        let inputs: Vec<Vec<u64>> = (0..64)
            .map(|_| oracle::random_inputs_with(&mut rng, &spec))
            .collect();
        let want: Vec<_> = eval_batch(&spec, &inputs)
            .into_iter()
            .map(Result::unwrap)
            .collect();
        let got: Vec<_> = emulate_batch(&p, &inputs)
            .into_iter()
            .map(Result::unwrap)
            .collect();
        assert_eq!(got, want);
        assert_eq!(first_mismatch(&spec, &p, &inputs), None);
    }
}
