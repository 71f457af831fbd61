//! Random local search: mutate, emit, compare, keep the mutant only if it is correct
//! and strictly faster.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::emit::{assemble_ir, AsmProgram, EmitError};
use crate::ir::{parse_function, FunctionSpec, IrError};
use crate::measure::{Backend, Candidate, MeasureError, MeasurementConfig, Measurer, Winner};
use crate::model::{Model, ModelError, ModelState, MutationKind};
use crate::oracle::rng_from_seed;

/// Offset between the mutation stream and the measurement stream seeds.
const MEASURE_SEED_SALT: u64 = 0x6d65_6173_7572_6521;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Emit(#[from] EmitError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("mutation {mutation}: {source}")]
    AtMutation {
        mutation: u64,
        #[source]
        source: Box<OptimizeError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("history: {0}")]
    Csv(#[from] csv::Error),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model file: {0}")]
    Spec(#[from] IrError),
}

impl OptimizeError {
    fn at(mutation: u64) -> impl FnOnce(OptimizeError) -> OptimizeError {
        move |e| OptimizeError::AtMutation {
            mutation,
            source: Box::new(e),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub evals: u64,
    /// Seeds the mutation stream; the measurement stream is derived from it.
    pub seed: u64,
    pub measurement: MeasurementConfig,
    pub catalog: Catalog,
    /// Report progress every this many mutations (0 disables).
    pub status_interval: u64,
    pub reorder_probability: Option<f64>,
    /// Raw timing samples are appended here as CSV when set.
    pub sample_log: Option<PathBuf>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            evals: 10_000,
            seed: 0,
            measurement: MeasurementConfig::default(),
            catalog: Catalog::default(),
            status_interval: 0,
            reorder_probability: None,
            sample_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub mutation: u64,
    pub accepted: bool,
    pub kind: MutationKind,
    pub incumbent_cycles: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Status {
    pub mutation: u64,
    pub evals: u64,
    pub instructions: usize,
    pub spills: usize,
    pub incumbent_cycles: f64,
    pub ratio: f64,
    pub accepted: u64,
}

pub fn status_line(s: &Status) -> String {
    format!(
        "[{}/{}] {} instructions, {} spills, {:.1} cycles, ratio {:.2} ({} accepted)",
        s.mutation, s.evals, s.instructions, s.spills, s.incumbent_cycles, s.ratio, s.accepted
    )
}

pub struct OptimizeResult {
    pub spec: Arc<FunctionSpec>,
    pub catalog: Catalog,
    pub model: Model,
    pub program: AsmProgram,
    pub initial_program: AsmProgram,
    pub history: Vec<HistoryPoint>,
    pub initial_cycles: f64,
    pub final_cycles: f64,
    pub seed: u64,
    pub evals: u64,
    pub backend: Backend,
}

impl OptimizeResult {
    /// Initial over final cycles (above 1 means the search found something faster).
    pub fn speedup(&self) -> f64 {
        if self.final_cycles > 0.0 {
            self.initial_cycles / self.final_cycles
        } else {
            1.0
        }
    }

    pub fn saved_model(&self) -> SavedModel {
        SavedModel {
            format: 1,
            name: self.spec.name.clone(),
            seed: self.seed,
            evals: self.evals,
            backend: self.backend,
            initial_cycles: self.initial_cycles,
            final_cycles: self.final_cycles,
            catalog: self.catalog.clone(),
            state: self.model.state(),
            spec: serde_json::from_str(&self.spec.to_json()).expect("spec json is valid"),
        }
    }
}

pub fn optimize(
    spec: Arc<FunctionSpec>,
    config: &OptimizerConfig,
    mut on_status: impl FnMut(&Status),
) -> Result<OptimizeResult, OptimizeError> {
    let mut model = Model::new(spec.clone(), &config.catalog)?;
    if let Some(p) = config.reorder_probability {
        model.set_reorder_probability(p);
    }
    let initial_program = assemble_ir(&model)?;
    let measure_config = MeasurementConfig {
        seed: config.seed ^ MEASURE_SEED_SALT,
        ..config.measurement
    };
    let mut measurer = Measurer::new(spec.clone(), &initial_program, measure_config)?;
    if let Some(path) = &config.sample_log {
        measurer.log_samples(path)?;
    }
    let mut rng = rng_from_seed(config.seed);

    let mut incumbent: Candidate = measurer.prepare(&initial_program)?;
    let mut initial_cycles = incumbent.simulated_cost().map_or(f64::NAN, |c| c as f64);
    let mut incumbent_cycles = initial_cycles;
    let mut ratio = 1.0;
    let mut accepted_total = 0;
    let mut history = Vec::with_capacity(config.evals as usize);

    let status = |mutation: u64, p: &AsmProgram, cycles: f64, ratio: f64, accepted: u64| Status {
        mutation,
        evals: config.evals,
        instructions: p.instruction_count(),
        spills: p.spill_count,
        incumbent_cycles: cycles,
        ratio,
        accepted,
    };
    if config.status_interval > 0 {
        on_status(&status(0, &incumbent.program, incumbent_cycles, ratio, 0));
    }

    for i in 1..=config.evals {
        let record = model.mutate(&mut rng);
        let step =
            (|| -> Result<(Option<Candidate>, crate::measure::ComparisonResult), OptimizeError> {
                let program = assemble_ir(&model)?;
                if program.insts == incumbent.program.insts {
                    let r = measurer.compare(&incumbent, &incumbent)?;
                    return Ok((None, r));
                }
                let mutant = measurer.prepare(&program)?;
                let r = measurer.compare(&incumbent, &mutant)?;
                Ok((Some(mutant), r))
            })();
        let (mutant, result) = step.map_err(OptimizeError::at(i))?;

        // the ground truth is the initial program, measured in the same rounds
        initial_cycles = result.median_truth;
        let accepted = result.winner == Winner::B && mutant.is_some();
        if accepted {
            model.commit(&record);
            incumbent = mutant.unwrap();
            incumbent_cycles = result.median_b;
            accepted_total += 1;
        } else {
            model
                .revert(&record)
                .map_err(|e| OptimizeError::at(i)(e.into()))?;
            incumbent_cycles = result.median_a;
        }
        ratio = incumbent_cycles / result.median_truth;
        history.push(HistoryPoint {
            mutation: i,
            accepted,
            kind: record.kind(),
            incumbent_cycles,
            ratio,
        });
        if config.status_interval > 0 && (i % config.status_interval == 0 || i == config.evals) {
            on_status(&status(
                i,
                &incumbent.program,
                incumbent_cycles,
                ratio,
                accepted_total,
            ));
        }
    }

    if initial_cycles.is_nan() {
        // no compare ran (evals = 0 on hardware)
        initial_cycles = 0.0;
        incumbent_cycles = 0.0;
    }
    let program = Arc::unwrap_or_clone(incumbent.program);
    Ok(OptimizeResult {
        spec,
        catalog: config.catalog.clone(),
        model,
        program,
        initial_program,
        history,
        initial_cycles,
        final_cycles: incumbent_cycles,
        seed: config.seed,
        evals: config.evals,
        backend: config.measurement.backend,
    })
}

/// Everything needed to re-emit the final candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub format: u32,
    pub name: String,
    pub seed: u64,
    pub evals: u64,
    pub backend: Backend,
    pub initial_cycles: f64,
    pub final_cycles: f64,
    pub catalog: Catalog,
    pub state: ModelState,
    pub spec: serde_json::Value,
}

impl SavedModel {
    pub fn load(path: &Path) -> Result<SavedModel, OptimizeError> {
        let text = fs::read_to_string(path).map_err(|source| OptimizeError::Io {
            path: path.into(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("saved model serializes")
    }

    pub fn function_spec(&self) -> Result<FunctionSpec, OptimizeError> {
        Ok(parse_function(&self.spec.to_string())?)
    }

    pub fn model(&self) -> Result<Model, OptimizeError> {
        let spec = Arc::new(self.function_spec()?);
        Ok(Model::from_state(spec, &self.catalog, &self.state)?)
    }

    /// Comment lines placed above the listing.
    pub fn header(&self, program: &AsmProgram) -> Vec<String> {
        let speedup = if self.final_cycles > 0.0 {
            self.initial_cycles / self.final_cycles
        } else {
            1.0
        };
        vec![
            format!("{}: generated by slopt", self.name),
            format!(
                "seed {}, {} mutations, {} backend",
                self.seed,
                self.evals,
                self.backend.name()
            ),
            format!(
                "cycles: initial {:.1}, final {:.1}, speedup {:.3}x",
                self.initial_cycles, self.final_cycles, speedup
            ),
            format!(
                "{} instructions, {} spills",
                program.instruction_count(),
                program.spill_count
            ),
            format!(
                "features: adx={} bmi2={}",
                self.catalog.features.adx, self.catalog.features.bmi2
            ),
        ]
    }

    /// Re-emits the saved candidate and its annotated listing.
    pub fn emit(&self) -> Result<(AsmProgram, String), OptimizeError> {
        let program = assemble_ir(&self.model()?)?;
        let listing = program.listing(&self.header(&program));
        Ok((program, listing))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFiles {
    pub asm: PathBuf,
    pub history: PathBuf,
    pub svg: PathBuf,
    pub model: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<(), OptimizeError> {
    fs::write(path, contents).map_err(|source| OptimizeError::Io {
        path: path.into(),
        source,
    })
}

pub fn write_history(history: &[HistoryPoint], path: &Path) -> Result<(), OptimizeError> {
    let mut w = csv::Writer::from_path(path)?;
    if history.is_empty() {
        w.write_record(["mutation", "accepted", "kind", "incumbent_cycles", "ratio"])?;
    }
    for h in history {
        w.serialize(h)?;
    }
    w.flush().map_err(|source| OptimizeError::Io {
        path: path.into(),
        source,
    })?;
    Ok(())
}

/// Writes `<name>.asm`, `history.csv`, `convergence.svg` and `model.json` into `dir`.
pub fn write_outputs(result: &OptimizeResult, dir: &Path) -> Result<OutputFiles, OptimizeError> {
    fs::create_dir_all(dir).map_err(|source| OptimizeError::Io {
        path: dir.into(),
        source,
    })?;
    let files = OutputFiles {
        asm: dir.join(format!("{}.asm", result.spec.name)),
        history: dir.join("history.csv"),
        svg: dir.join("convergence.svg"),
        model: dir.join("model.json"),
    };
    let saved = result.saved_model();
    write_file(
        &files.asm,
        &result.program.listing(&saved.header(&result.program)),
    )?;
    write_history(&result.history, &files.history)?;
    write_file(
        &files.svg,
        &convergence_svg(&result.spec.name, &result.history),
    )?;
    write_file(&files.model, &saved.to_json())?;
    Ok(files)
}

/// Speedup over the initial candidate against the number of tested mutations, with a
/// logarithmic mutation axis.
pub fn convergence_svg(title: &str, history: &[HistoryPoint]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let n = history.last().map_or(1, |h| h.mutation).max(10);
    let decades = (n as f64).log10().ceil().max(1.0);
    let speedups: Vec<f64> = history
        .iter()
        .map(|h| if h.ratio > 0.0 { 1.0 / h.ratio } else { 1.0 })
        .collect();
    let y_max = speedups.iter().copied().fold(1.0f64, f64::max);
    let y_min = speedups.iter().copied().fold(1.0f64, f64::min);
    let pad = ((y_max - y_min) * 0.1).max(0.02);
    let (y_lo, y_hi) = (y_min - pad, y_max + pad);

    let x = |m: f64| L + (m.max(1.0).log10() / decades) * (W - L - R);
    let y = |s: f64| T + (y_hi - s) / (y_hi - y_lo) * (H - T - B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    );
    let (x0, x1, y0, y1) = (L, W - R, T, H - B);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black"/>"#
    );
    for d in 0..=decades as u32 {
        let m = 10f64.powi(d as i32);
        let px = x(m);
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.1}" y1="{y0}" x2="{px:.1}" y2="{y1}" stroke="#ddd"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text x="{px:.1}" y="{}" text-anchor="middle">{}</text>"#,
            y1 + 16.0,
            m as u64
        );
    }
    for k in 0..=4 {
        let s = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
        let py = y(s);
        let _ = writeln!(
            svg,
            r##"<line x1="{x0}" y1="{py:.1}" x2="{x1}" y2="{py:.1}" stroke="#eee"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{s:.3}</text>"#,
            x0 - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">number of tested mutations</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">speedup over initial</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    if !history.is_empty() {
        let mut d = format!("M{:.1},{:.1}", x(1.0), y(1.0));
        let mut prev = 1.0;
        for (h, &s) in history.iter().zip(&speedups) {
            let px = x(h.mutation as f64);
            let _ = write!(d, " L{px:.1},{:.1} L{px:.1},{:.1}", y(prev), y(s));
            prev = s;
        }
        let _ = writeln!(
            svg,
            r##"<path d="{d}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##
        );
        for (h, &s) in history.iter().zip(&speedups).filter(|(h, _)| h.accepted) {
            let _ = writeln!(
                svg,
                r##"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="#d62728"/>"##,
                x(h.mutation as f64),
                y(s)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Features;

    fn mul8() -> Arc<FunctionSpec> {
        Arc::new(
            parse_function(
                r#"{"name":"mul8","args":[{"name":"a","type":"u64[2]"}],"returns":["y","z"],
                    "body":[{"out":["x"],"op":"*","in":["a[0]","0x8"]},
                            {"out":["y"],"op":"+","in":["x","a[1]"]},
                            {"out":["z"],"op":"&","in":["a[0]","a[1]"]}]}"#,
            )
            .unwrap(),
        )
    }

    fn sim(evals: u64, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            evals,
            seed,
            measurement: MeasurementConfig {
                backend: Backend::SimulatedCost,
                ..Default::default()
            },
            catalog: Catalog::new(Features::ALL),
            ..Default::default()
        }
    }

    #[test]
    fn zero_evals_returns_initial() {
        let r = optimize(mul8(), &sim(0, 0), |_| {}).unwrap();
        assert_eq!(r.program, r.initial_program);
        assert!(r.history.is_empty());
        assert_eq!(r.speedup(), 1.0);
    }

    #[test]
    fn monotonic_and_deterministic() {
        let a = optimize(mul8(), &sim(300, 5), |_| {}).unwrap();
        let b = optimize(mul8(), &sim(300, 5), |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.program, b.program);
        assert_eq!(a.history.len(), 300);
        assert!(a
            .history
            .windows(2)
            .all(|w| w[1].incumbent_cycles <= w[0].incumbent_cycles));
        for w in a.history.windows(2) {
            if w[1].accepted {
                assert!(w[1].ratio < w[0].ratio);
            }
        }
    }

    #[test]
    fn status_lines() {
        let mut lines = Vec::new();
        let cfg = OptimizerConfig {
            status_interval: 50,
            ..sim(200, 0)
        };
        let r = optimize(mul8(), &cfg, |s| lines.push(s.clone())).unwrap();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0].ratio, 1.0);
        assert!(status_line(&lines[0]).contains("ratio 1.00"));
        let last = lines.last().unwrap();
        assert_eq!(last.spills, r.program.spill_count);
        assert_eq!(last.instructions, r.program.instruction_count());
    }

    #[test]
    fn outputs_round_trip() {
        let r = optimize(mul8(), &sim(100, 1), |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_outputs(&r, dir.path()).unwrap();
        let asm = fs::read_to_string(&files.asm).unwrap();
        let saved = SavedModel::load(&files.model).unwrap();
        assert_eq!(saved, r.saved_model());
        let (program, listing) = saved.emit().unwrap();
        assert_eq!(program, r.program);
        assert_eq!(listing, asm);
        let rows = csv::Reader::from_path(&files.history)
            .unwrap()
            .records()
            .count();
        assert_eq!(rows, 100);
        let svg = fs::read_to_string(&files.svg).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("number of tested mutations"));
    }
}
