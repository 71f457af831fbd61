//! Deciding which of two candidates is faster.
//!
//! Every comparison first checks both candidates against the oracle on fresh random
//! inputs. Timing then runs `repetitions` rounds; each round measures the incumbent
//! (A), the candidate (B) and the ground truth (the initial program) in a freshly
//! shuffled order, each in a tight loop sized to roughly `target_cycles`. Medians of
//! the per-iteration cycle counts decide; ties keep the incumbent.
//!
//! Two backends exist: the timestamp counter of the running x86-64 core, and a
//! deterministic cost model that sums per-mnemonic costs (used for tests, CI and
//! non-x86 hosts, with the emulator as executor).

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emit::AsmProgram;
use crate::emulate::emulate_program;
use crate::exec::{call_code, ExecError, Executable, StagingArea};
use crate::ir::FunctionSpec;
use crate::oracle;
use crate::x86::Mnemonic;

/// Environment variable that overrides the configured backend (`hardware` or `simulate`).
pub const BACKEND_ENV: &str = "SLOPT_BACKEND";

const MAX_ITERATIONS: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("timestamp counter unavailable: {0}")]
    CounterUnavailable(&'static str),
    #[error("no cost for mnemonic `{0}` in the latency table")]
    UnknownMnemonic(String),
    #[error("invalid measurement config: {0}")]
    Config(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("sample log: {0}")]
    SampleLog(#[from] csv::Error),
    #[error("sample log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[serde(rename = "hardware")]
    HardwareCounter,
    #[serde(rename = "simulate")]
    SimulatedCost,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::HardwareCounter => "hardware",
            Backend::SimulatedCost => "simulate",
        }
    }

    pub fn parse(s: &str) -> Option<Backend> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hardware" | "hw" | "rdtsc" => Some(Backend::HardwareCounter),
            "simulate" | "simulated" | "sim" => Some(Backend::SimulatedCost),
            _ => None,
        }
    }

    /// Backend forced through [`BACKEND_ENV`], if set to a known value.
    pub fn from_env() -> Option<Backend> {
        std::env::var(BACKEND_ENV)
            .ok()
            .and_then(|v| Backend::parse(&v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementConfig {
    pub target_cycles: u64,
    pub repetitions: usize,
    pub check_inputs_count: usize,
    pub backend: Backend,
    pub seed: u64,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        MeasurementConfig {
            target_cycles: 10_000,
            repetitions: 31,
            check_inputs_count: 8,
            backend: Backend::HardwareCounter,
            seed: 0,
        }
    }
}

impl MeasurementConfig {
    pub fn validate(&self) -> Result<(), MeasureError> {
        if self.repetitions.is_multiple_of(2) {
            return Err(MeasureError::Config(format!(
                "repetitions must be odd, got {}",
                self.repetitions
            )));
        }
        if self.target_cycles < 1000 {
            return Err(MeasureError::Config(format!(
                "target_cycles must be at least 1000, got {}",
                self.target_cycles
            )));
        }
        Ok(())
    }
}

/// Abstract cost per mnemonic for the simulated backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub costs: BTreeMap<Mnemonic, u32>,
}

impl Default for LatencyTable {
    /// Multiplies and double-word shifts are the expensive operations; everything
    /// else costs one cycle.
    fn default() -> Self {
        let costs = Mnemonic::ALL
            .iter()
            .map(|&m| {
                let c = match m {
                    Mnemonic::Imul => 3,
                    Mnemonic::Mul | Mnemonic::Mulx => 4,
                    Mnemonic::Shld | Mnemonic::Shrd => 3,
                    _ => 1,
                };
                (m, c)
            })
            .collect();
        LatencyTable { costs }
    }
}

impl LatencyTable {
    pub fn uniform(cost: u32) -> LatencyTable {
        LatencyTable {
            costs: Mnemonic::ALL.iter().map(|&m| (m, cost.max(1))).collect(),
        }
    }

    pub fn cost(&self, m: Mnemonic) -> Option<u32> {
        self.costs.get(&m).copied()
    }
}

/// Sum of the per-instruction costs of `program`.
pub fn simulated_cost(program: &AsmProgram, table: &LatencyTable) -> Result<u64, MeasureError> {
    program.insts.iter().try_fold(0u64, |acc, i| {
        let c = table
            .cost(i.mnemonic)
            .ok_or_else(|| MeasureError::UnknownMnemonic(i.mnemonic.name().into()))?;
        Ok(acc + c as u64)
    })
}

/// Loop length that makes one timed batch last about `target` cycles.
pub fn iterations_for(target_cycles: u64, single_run_cycles: f64) -> u64 {
    if single_run_cycles.is_nan() || single_run_cycles <= 0.0 {
        return MAX_ITERATIONS;
    }
    ((target_cycles as f64 / single_run_cycles).round() as u64).clamp(1, MAX_ITERATIONS)
}

#[cfg(target_arch = "x86_64")]
#[inline(always)]
fn fenced_tsc() -> u64 {
    use std::arch::x86_64::{_mm_lfence, _rdtsc};
    // SAFETY: lfence and rdtsc are available on every x86-64 CPU.
    unsafe {
        _mm_lfence();
        let t = _rdtsc();
        _mm_lfence();
        t
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn fenced_tsc() -> u64 {
    0
}

/// Output and input arrays for timed calls, laid out back to back in one buffer so
/// every candidate sees the same addresses.
struct CallFrame {
    buf: Vec<u64>,
    out_len: usize,
    arg_lens: Vec<usize>,
}

impl CallFrame {
    fn new(arg_lens: &[usize], out_len: usize) -> CallFrame {
        let total = out_len + arg_lens.iter().sum::<usize>();
        CallFrame {
            buf: vec![0; total.max(1)],
            out_len,
            arg_lens: arg_lens.to_vec(),
        }
    }

    fn load(&mut self, flat: &[u64]) {
        self.buf[self.out_len..self.out_len + flat.len()].copy_from_slice(flat);
    }
}

/// Untimed calls before every timed batch.
const WARMUP_CALLS: u64 = 16;

/// Total cycles for `iterations` back-to-back calls of the code at `code`.
///
/// # Safety
/// `code` must be a function compiled for `frame`'s array lengths.
unsafe fn time_loop(code: *const u8, frame: &mut CallFrame, iterations: u64) -> u64 {
    let base = frame.buf.as_mut_ptr();
    let mut ptrs = [std::ptr::null::<u64>(); 5];
    let mut off = frame.out_len;
    for (p, &n) in ptrs.iter_mut().zip(&frame.arg_lens) {
        // SAFETY: offsets stay within buf.
        *p = unsafe { base.add(off) };
        off += n;
    }
    let ptrs = &ptrs[..frame.arg_lens.len()];
    for _ in 0..WARMUP_CALLS {
        call_code(code, base, ptrs);
    }
    let t0 = fenced_tsc();
    for _ in 0..iterations {
        call_code(code, base, ptrs);
    }
    let t1 = fenced_tsc();
    t1.wrapping_sub(t0)
}

/// A program ready to be measured: loaded natively for the hardware backend, costed
/// for the simulated one.
pub struct Candidate {
    pub program: Arc<AsmProgram>,
    exe: Option<Executable>,
    sim_cost: Option<u64>,
    pub iterations: u64,
}

impl Candidate {
    pub fn simulated_cost(&self) -> Option<u64> {
        self.sim_cost
    }

    fn execute(&self, inputs: &[u64]) -> Result<Vec<u64>, String> {
        match &self.exe {
            Some(exe) => Ok(exe.run(inputs)),
            None => emulate_program(&self.program, inputs).map_err(|e| e.to_string()),
        }
    }
}

/// First input on which a candidate disagreed with the oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessFailure {
    pub inputs: Vec<u64>,
    pub expected: Vec<u64>,
    pub got: Result<Vec<u64>, String>,
}

impl std::fmt::Display for CorrectnessFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "inputs {:x?}: expected {:x?}, ",
            self.inputs, self.expected
        )?;
        match &self.got {
            Ok(v) => write!(f, "got {v:x?}"),
            Err(e) => write!(f, "failed: {e}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Winner {
    A,
    B,
    IncumbentOnTie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Slot {
    A,
    B,
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub round: usize,
    pub position: usize,
    pub slot: Slot,
    pub iterations: u64,
    pub cycles_per_iteration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonResult {
    pub median_a: f64,
    pub median_b: f64,
    pub median_truth: f64,
    pub a_correct: Result<(), CorrectnessFailure>,
    pub b_correct: Result<(), CorrectnessFailure>,
    pub winner: Winner,
    pub samples: Vec<Sample>,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Winner from medians and correctness. A is the incumbent.
pub fn decide(median_a: f64, median_b: f64, a_ok: bool, b_ok: bool) -> Winner {
    match (a_ok, b_ok) {
        (_, false) => Winner::A,
        (false, true) => Winner::B,
        (true, true) if median_b < median_a => Winner::B,
        (true, true) if median_a < median_b => Winner::A,
        _ => Winner::IncumbentOnTie,
    }
}

/// A freshly shuffled measurement order of the three slots.
pub fn round_order(rng: &mut ChaCha8Rng) -> [Slot; 3] {
    let mut order = [Slot::A, Slot::B, Slot::Truth];
    order.shuffle(rng);
    order
}

#[derive(Serialize)]
struct SampleRow<'a> {
    compare: u64,
    round: usize,
    position: usize,
    slot: &'a str,
    iterations: u64,
    cycles_per_iteration: f64,
}

pub struct Measurer {
    config: MeasurementConfig,
    spec: Arc<FunctionSpec>,
    table: LatencyTable,
    rng: ChaCha8Rng,
    truth: Candidate,
    compares: u64,
    sample_log: Option<csv::Writer<File>>,
    frame: CallFrame,
    stage: Option<StagingArea>,
}

impl Measurer {
    /// `truth` is the ground-truth program measured in every round (normally the
    /// initial candidate).
    pub fn new(
        spec: Arc<FunctionSpec>,
        truth: &AsmProgram,
        config: MeasurementConfig,
    ) -> Result<Measurer, MeasureError> {
        Measurer::with_table(spec, truth, config, LatencyTable::default())
    }

    pub fn with_table(
        spec: Arc<FunctionSpec>,
        truth: &AsmProgram,
        config: MeasurementConfig,
        table: LatencyTable,
    ) -> Result<Measurer, MeasureError> {
        config.validate()?;
        if config.backend == Backend::HardwareCounter && !cfg!(target_arch = "x86_64") {
            return Err(MeasureError::CounterUnavailable(
                "the hardware backend needs an x86-64 host",
            ));
        }
        let mut m = Measurer {
            config,
            spec,
            table,
            rng: oracle::rng_from_seed(config.seed),
            truth: Candidate {
                program: Arc::new(truth.clone()),
                exe: None,
                sim_cost: None,
                iterations: 1,
            },
            compares: 0,
            sample_log: None,
            frame: CallFrame::new(&truth.arg_lens, truth.out_len),
            stage: None,
        };
        if config.backend == Backend::HardwareCounter {
            m.stage = Some(StagingArea::new(4096)?);
        }
        m.truth = m.prepare(truth)?;
        Ok(m)
    }

    pub fn config(&self) -> &MeasurementConfig {
        &self.config
    }

    pub fn table(&self) -> &LatencyTable {
        &self.table
    }

    pub fn truth(&self) -> &Candidate {
        &self.truth
    }

    /// Writes every raw timing sample to `path` as CSV from now on.
    pub fn log_samples(&mut self, path: &Path) -> Result<(), MeasureError> {
        self.sample_log = Some(csv::Writer::from_path(path)?);
        Ok(())
    }

    /// Loads (hardware) or costs (simulated) a program and calibrates its batch size.
    pub fn prepare(&mut self, program: &AsmProgram) -> Result<Candidate, MeasureError> {
        let program = Arc::new(program.clone());
        let mut c = match self.config.backend {
            Backend::HardwareCounter => Candidate {
                exe: Some(Executable::new(&program)?),
                program,
                sim_cost: None,
                iterations: 1,
            },
            Backend::SimulatedCost => {
                let cost = simulated_cost(&program, &self.table)?;
                Candidate {
                    program,
                    exe: None,
                    sim_cost: Some(cost),
                    iterations: 1,
                }
            }
        };
        c.iterations = self.calibrate_batch(&c)?;
        Ok(c)
    }

    /// Batch size for `candidate`: a warm-up run estimates the cost of one call.
    pub fn calibrate_batch(&mut self, candidate: &Candidate) -> Result<u64, MeasureError> {
        Ok(match (&candidate.exe, candidate.sim_cost) {
            (_, Some(cost)) => iterations_for(self.config.target_cycles, cost as f64),
            (Some(exe), None) => {
                let inputs = oracle::random_inputs(self.config.seed, &self.spec);
                self.frame.load(&inputs);
                let code = Self::stage_code(&mut self.stage, exe)?;
                // SAFETY: the staged code is `exe`, built for the spec's arrays.
                unsafe { time_loop(code, &mut self.frame, 1000) };
                // estimate from the median of a few short batches
                let mut est: Vec<f64> = (0..5)
                    .map(|_| unsafe { time_loop(code, &mut self.frame, 200) } as f64 / 200.0)
                    .collect();
                iterations_for(self.config.target_cycles, median(&mut est))
            }
            (None, None) => 1,
        })
    }

    fn stage_code(
        stage: &mut Option<StagingArea>,
        exe: &Executable,
    ) -> Result<*const u8, MeasureError> {
        let stage = stage
            .as_mut()
            .expect("hardware measurers own a staging area");
        stage.load(exe)?;
        Ok(stage.as_ptr())
    }

    fn check(
        &self,
        c: &Candidate,
        inputs: &[Vec<u64>],
        expected: &[Vec<u64>],
    ) -> Result<(), CorrectnessFailure> {
        for (i, want) in inputs.iter().zip(expected) {
            let got = c.execute(i);
            if got.as_ref() != Ok(want) {
                return Err(CorrectnessFailure {
                    inputs: i.clone(),
                    expected: want.clone(),
                    got,
                });
            }
        }
        Ok(())
    }

    /// Compares incumbent `a` with candidate `b`.
    pub fn compare(
        &mut self,
        a: &Candidate,
        b: &Candidate,
    ) -> Result<ComparisonResult, MeasureError> {
        self.compares += 1;
        let inputs: Vec<Vec<u64>> = (0..self.config.check_inputs_count)
            .map(|_| oracle::random_inputs_with(&mut self.rng, &self.spec))
            .collect();
        let expected: Vec<Vec<u64>> = inputs
            .iter()
            .map(|i| oracle::run(&self.spec, i).expect("inputs match the signature"))
            .collect();
        let a_correct = self.check(a, &inputs, &expected);
        let b_correct = self.check(b, &inputs, &expected);

        let mut per_slot: [Vec<f64>; 3] = Default::default();
        let mut samples = Vec::with_capacity(3 * self.config.repetitions);
        for round in 0..self.config.repetitions {
            let order = round_order(&mut self.rng);
            if self.config.backend == Backend::HardwareCounter {
                let round_inputs = oracle::random_inputs_with(&mut self.rng, &self.spec);
                self.frame.load(&round_inputs);
            }
            for (position, slot) in order.into_iter().enumerate() {
                let (c, idx) = match slot {
                    Slot::A => (a, 0),
                    Slot::B => (b, 1),
                    Slot::Truth => (&self.truth, 2),
                };
                let cycles = match (&c.exe, c.sim_cost) {
                    (_, Some(cost)) => cost as f64,
                    (Some(exe), None) => {
                        let code = Self::stage_code(&mut self.stage, exe)?;
                        // SAFETY: the staged code is `exe`, built for the spec's arrays.
                        let total = unsafe { time_loop(code, &mut self.frame, c.iterations) };
                        total as f64 / c.iterations as f64
                    }
                    (None, None) => unreachable!("candidates are prepared for a backend"),
                };
                per_slot[idx].push(cycles);
                samples.push(Sample {
                    round,
                    position,
                    slot,
                    iterations: c.iterations,
                    cycles_per_iteration: cycles,
                });
            }
        }
        let median_a = median(&mut per_slot[0]);
        let median_b = median(&mut per_slot[1]);
        let median_truth = median(&mut per_slot[2]);
        let winner = decide(median_a, median_b, a_correct.is_ok(), b_correct.is_ok());

        if let Some(log) = &mut self.sample_log {
            for s in &samples {
                log.serialize(SampleRow {
                    compare: self.compares,
                    round: s.round,
                    position: s.position,
                    slot: match s.slot {
                        Slot::A => "A",
                        Slot::B => "B",
                        Slot::Truth => "truth",
                    },
                    iterations: s.iterations,
                    cycles_per_iteration: s.cycles_per_iteration,
                })?;
            }
            log.flush()?;
        }
        Ok(ComparisonResult {
            median_a,
            median_b,
            median_truth,
            a_correct,
            b_correct,
            winner,
            samples,
        })
    }

    /// Number of compare calls so far.
    pub fn compares(&self) -> u64 {
        self.compares
    }
}
