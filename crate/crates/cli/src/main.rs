use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use slopt::catalog::{Catalog, Features};
use slopt::emit::assemble_traced;
use slopt::encode::{encode_all, to_hex};
use slopt::exec::ExecError;
use slopt::external::{assemble_listing, ExternalError};
use slopt::ir::{parse_function_with_warnings, stats, FunctionSpec};
use slopt::measure::{Backend, MeasureError, MeasurementConfig};
use slopt::optimizer::{
    optimize, status_line, write_outputs, OptimizeError, OptimizerConfig, SavedModel,
};
use slopt::selftest::{run_selftest, Executor, SelftestError};

#[derive(Parser)]
#[command(
    name = "slopt",
    version,
    about = "Random local search over x86-64 code for straightline arithmetic"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a function and write <name>.asm, history.csv, convergence.svg and model.json
    Optimize(OptimizeArgs),
    /// Re-emit the assembly for a saved model.json
    Emit(EmitArgs),
    /// Run a function through the reference interpreter
    Eval(EvalArgs),
    /// Check every instruction template against the operator semantics
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Hardware,
    Simulate,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Backend {
        match b {
            BackendArg::Hardware => Backend::HardwareCounter,
            BackendArg::Simulate => Backend::SimulatedCost,
        }
    }
}

#[derive(Args)]
struct FeatureArgs {
    /// Do not use ADCX/ADOX
    #[arg(long)]
    no_adx: bool,
    /// Do not use MULX/RORX
    #[arg(long)]
    no_bmi2: bool,
}

impl FeatureArgs {
    /// Requested features, limited to what the host supports when running natively.
    fn features(&self, native: bool) -> Features {
        let requested = Features {
            adx: !self.no_adx,
            bmi2: !self.no_bmi2,
        };
        if native {
            requested.intersect(Features::detect())
        } else {
            requested
        }
    }
}

#[derive(Args)]
struct OptimizeArgs {
    /// Function to optimize (JSON)
    #[arg(long = "jsonFile", visible_alias = "json-file", value_name = "PATH")]
    json_file: PathBuf,
    /// Number of mutations to try
    #[arg(long, default_value_t = 10_000)]
    evals: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cycle source for comparisons
    #[arg(long, value_enum, env = "SLOPT_BACKEND", default_value = "hardware")]
    backend: BackendArg,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Only parse and validate the function
    #[arg(long)]
    validate_only: bool,
    /// Measurement rounds per comparison (odd)
    #[arg(long, default_value_t = 31)]
    repetitions: usize,
    /// Cycles per timed batch
    #[arg(long, default_value_t = 10_000)]
    target_cycles: u64,
    /// Random inputs checked against the interpreter per comparison
    #[arg(long, default_value_t = 8)]
    check_inputs: usize,
    #[command(flatten)]
    features: FeatureArgs,
    /// Cross-check the final machine code against this assembler (e.g. /usr/bin/as)
    #[arg(long, value_name = "PATH")]
    external_assembler: Option<PathBuf>,
    /// Print a status line every N mutations (0 for none)
    #[arg(long, default_value_t = 1000)]
    status_interval: u64,
    /// Write raw timing samples to this CSV file
    #[arg(long, value_name = "PATH")]
    samples: Option<PathBuf>,
    /// Probability of proposing a reorder rather than a template switch
    #[arg(long)]
    reorder_probability: Option<f64>,
}

#[derive(Args)]
struct EmitArgs {
    /// model.json written by `optimize`
    model: PathBuf,
    /// Write the listing here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the machine state after every operation
    #[arg(long)]
    dump_state: bool,
    /// Also print the machine code in hex
    #[arg(long)]
    hex: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "jsonFile", visible_alias = "json-file", value_name = "PATH")]
    json_file: PathBuf,
    /// Input words in argument order (hex with 0x, or decimal); random when omitted
    #[arg(long = "input", value_name = "WORD", num_args = 1.., value_delimiter = ',')]
    inputs: Vec<String>,
    /// Seed for random inputs
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SelftestArgs {
    /// hardware runs the templates natively, simulate runs them in the emulator
    #[arg(long, value_enum, env = "SLOPT_BACKEND", default_value = "hardware")]
    backend: BackendArg,
    /// Random inputs per template variant
    #[arg(long, default_value_t = 10_000)]
    inputs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    features: FeatureArgs,
    /// Also compare each template's machine code with this assembler
    #[arg(long, value_name = "PATH")]
    external_assembler: Option<PathBuf>,
}

#[derive(Clone, Copy)]
enum Class {
    Other = 1,
    Validation = 3,
    Platform = 4,
    Io = 5,
}

struct Failure {
    class: Class,
    message: String,
}

impl Failure {
    fn new(class: Class, message: impl Into<String>) -> Failure {
        Failure {
            class,
            message: message.into(),
        }
    }
}

fn exec_class(e: &ExecError) -> Class {
    match e {
        ExecError::PlatformUnsupported | ExecError::MissingFeature(_) => Class::Platform,
        ExecError::Map(_) => Class::Io,
        _ => Class::Other,
    }
}

fn measure_class(e: &MeasureError) -> Class {
    match e {
        MeasureError::CounterUnavailable(_) => Class::Platform,
        MeasureError::Exec(e) => exec_class(e),
        MeasureError::Config(_) => Class::Validation,
        MeasureError::Io(_) | MeasureError::SampleLog(_) => Class::Io,
        MeasureError::UnknownMnemonic(_) => Class::Other,
    }
}

fn optimize_class(e: &OptimizeError) -> Class {
    match e {
        OptimizeError::AtMutation { source, .. } => optimize_class(source),
        OptimizeError::Measure(m) => measure_class(m),
        OptimizeError::Io { .. } | OptimizeError::Csv(_) => Class::Io,
        OptimizeError::Json(_) | OptimizeError::Spec(_) | OptimizeError::Model(_) => {
            Class::Validation
        }
        OptimizeError::Emit(_) => Class::Other,
    }
}

impl From<ExecError> for Failure {
    fn from(e: ExecError) -> Self {
        Failure::new(exec_class(&e), e.to_string())
    }
}

impl From<MeasureError> for Failure {
    fn from(e: MeasureError) -> Self {
        Failure::new(measure_class(&e), e.to_string())
    }
}

impl From<OptimizeError> for Failure {
    fn from(e: OptimizeError) -> Self {
        Failure::new(optimize_class(&e), e.to_string())
    }
}

impl From<SelftestError> for Failure {
    fn from(e: SelftestError) -> Self {
        match e {
            SelftestError::Platform(e) => e.into(),
        }
    }
}

impl From<ExternalError> for Failure {
    fn from(e: ExternalError) -> Self {
        let class = match e {
            ExternalError::Spawn { .. } | ExternalError::Io(_) => Class::Io,
            _ => Class::Other,
        };
        Failure::new(class, e.to_string())
    }
}

fn other(e: impl std::fmt::Display) -> Failure {
    Failure::new(Class::Other, e.to_string())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::new(Class::Io, format!("cannot read {}: {e}", path.display())))
}

fn load_spec(path: &Path) -> Result<FunctionSpec, Failure> {
    let text = read_text(path)?;
    let (spec, warnings) = parse_function_with_warnings(&text)
        .map_err(|e| Failure::new(Class::Validation, format!("{}: {e}", path.display())))?;
    for w in warnings {
        eprintln!("{}: {w}", path.display());
    }
    Ok(spec)
}

fn cmd_optimize(a: OptimizeArgs) -> Result<(), Failure> {
    let spec = load_spec(&a.json_file)?;
    if a.validate_only {
        let s = stats(&spec);
        println!("{}: valid", a.json_file.display());
        println!(
            "{} operations, {} arguments, {} returns",
            s.op_count,
            spec.args.len(),
            spec.returns.len()
        );
        for (op, n) in &s.per_operator {
            println!("  {op:<12} {n}");
        }
        return Ok(());
    }
    let backend: Backend = a.backend.into();
    let native = backend == Backend::HardwareCounter;
    if native {
        slopt::exec::check_host(Features::BASELINE)?;
    }
    let features = a.features.features(native);
    let config = OptimizerConfig {
        evals: a.evals,
        seed: a.seed,
        measurement: MeasurementConfig {
            target_cycles: a.target_cycles,
            repetitions: a.repetitions,
            check_inputs_count: a.check_inputs,
            backend,
            seed: a.seed,
        },
        catalog: Catalog::new(features),
        status_interval: a.status_interval,
        reorder_probability: a.reorder_probability,
        sample_log: a.samples.clone(),
    };
    config.measurement.validate()?;
    if let Some(p) = config.reorder_probability {
        if !(0.0..=1.0).contains(&p) {
            return Err(Failure::new(
                Class::Validation,
                format!("--reorder-probability must be in [0, 1], got {p}"),
            ));
        }
    }
    let spec = Arc::new(spec);
    eprintln!(
        "optimizing {} ({} operations) with {} mutations, {} backend, seed {}",
        spec.name,
        spec.body.len(),
        a.evals,
        backend.name(),
        a.seed
    );
    let result = optimize(spec, &config, |s| eprintln!("{}", status_line(s)))?;

    if let Some(assembler) = &a.external_assembler {
        let ours = encode_all(&result.program.insts).map_err(other)?;
        let theirs = assemble_listing(assembler, &result.program.listing(&[]))?;
        if ours != theirs {
            return Err(Failure::new(
                Class::Other,
                format!(
                    "machine code differs from {}:\n  ours   {}\n  theirs {}",
                    assembler.display(),
                    to_hex(&ours),
                    to_hex(&theirs)
                ),
            ));
        }
        eprintln!("machine code matches {}", assembler.display());
    }

    let files = write_outputs(&result, &a.out)?;
    println!(
        "{}: {:.1} -> {:.1} cycles (speedup {:.3}x), {} instructions, {} spills",
        result.spec.name,
        result.initial_cycles,
        result.final_cycles,
        result.speedup(),
        result.program.instruction_count(),
        result.program.spill_count
    );
    for f in [&files.asm, &files.history, &files.svg, &files.model] {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_emit(a: EmitArgs) -> Result<(), Failure> {
    read_text(&a.model)?;
    let saved = SavedModel::load(&a.model)?;
    let (program, listing) = saved.emit()?;
    if a.dump_state {
        let (_, dumps) = assemble_traced(&saved.model()?).map_err(other)?;
        for d in dumps {
            eprintln!("{d}");
        }
    }
    match &a.out {
        Some(path) => std::fs::write(path, &listing).map_err(|e| {
            Failure::new(Class::Io, format!("cannot write {}: {e}", path.display()))
        })?,
        None => print!("{listing}"),
    }
    if a.hex {
        let bytes = encode_all(&program.insts).map_err(other)?;
        println!("# {}", to_hex(&bytes));
    }
    Ok(())
}

fn parse_word(s: &str) -> Result<u64, Failure> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    parsed.map_err(|_| Failure::new(Class::Validation, format!("bad input word `{s}`")))
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let spec = load_spec(&a.json_file)?;
    let inputs: Vec<u64> = if a.inputs.is_empty() {
        slopt::oracle::random_inputs(a.seed, &spec)
    } else {
        a.inputs
            .iter()
            .map(|s| parse_word(s))
            .collect::<Result<_, _>>()?
    };
    let outputs = slopt::oracle::run(&spec, &inputs)
        .map_err(|e| Failure::new(Class::Validation, e.to_string()))?;
    let fmt = |v: &[u64]| {
        v.iter()
            .map(|w| format!("{w:#018x}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("inputs:  {}", fmt(&inputs));
    println!("outputs: {}", fmt(&outputs));
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> Result<(), Failure> {
    let executor = match Backend::from(a.backend) {
        Backend::HardwareCounter => Executor::Native,
        Backend::SimulatedCost => Executor::Emulated,
    };
    if executor == Executor::Native {
        slopt::exec::check_host(Features::BASELINE)?;
    }
    let features = a.features.features(executor == Executor::Native);
    let report = run_selftest(features, executor, a.inputs, a.seed)?;
    let mut failed = 0;
    for r in &report.results {
        match &r.failure {
            None => println!("ok    {:<24} {}", r.case, r.template.name()),
            Some(f) => {
                failed += 1;
                println!("FAIL  {:<24} {}\n{f}", r.case, r.template.name());
            }
        }
    }
    if let Some(assembler) = &a.external_assembler {
        let catalog = Catalog::new(features);
        let mut mismatches = 0;
        for case in slopt::selftest::single_op_cases() {
            let m = slopt::model::Model::new(case.spec.clone(), &catalog).map_err(other)?;
            for v in 0..m.variants(0).len() {
                let state = slopt::model::ModelState {
                    order: vec![0],
                    variants: vec![v as u8],
                };
                let m = slopt::model::Model::from_state(case.spec.clone(), &catalog, &state)
                    .map_err(other)?;
                let p = slopt::emit::assemble_ir(&m).map_err(other)?;
                let ours = encode_all(&p.insts).map_err(other)?;
                if ours != assemble_listing(assembler, &p.listing(&[]))? {
                    mismatches += 1;
                    println!(
                        "FAIL  {:<24} variant {v}: machine code differs from {}",
                        case.name,
                        assembler.display()
                    );
                }
            }
        }
        failed += mismatches;
    }
    println!(
        "{} variants, {} inputs each, {} failed ({})",
        report.results.len(),
        a.inputs,
        failed,
        if executor == Executor::Native {
            "native"
        } else {
            "emulated"
        }
    );
    if failed > 0 {
        return Err(Failure::new(
            Class::Other,
            format!("{failed} template checks failed"),
        ));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Optimize(a) => cmd_optimize(a),
        Command::Emit(a) => cmd_emit(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.class as u8)
        }
    }
}
