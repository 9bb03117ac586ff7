//! The `fxflow` command line: convert, emulate, estimate and fifo-opt.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use crate::cmvm::CmvmError;
use crate::codegen::{self, CodegenError, EmitOptions};
use crate::frontend::{self, FrontendError};
use crate::ir::{resolve_config, split_graph, IoType, IrError, ModelGraph, Role, Strategy, UserConfig};
use crate::kernels::{KernelError, Program};
use crate::passes::{self, PassError};
use crate::perf::{self, PerfError};

/// Stable exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const MISMATCH: u8 = 1;
    pub const IO: u8 = 2;
    pub const UNSUPPORTED_MODEL: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const INTERNAL: u8 = 5;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        CliError { code, kind, message: message.into() }
    }

    fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::new(exit::IO, "io", format!("{}: {e}", path.display()))
    }

    fn config(e: impl fmt::Display) -> Self {
        CliError::new(exit::CONFIG, "config", e.to_string())
    }

    fn unsupported(e: impl fmt::Display) -> Self {
        CliError::new(exit::UNSUPPORTED_MODEL, "unsupported_model", e.to_string())
    }

    fn internal(e: impl fmt::Display) -> Self {
        CliError::new(exit::INTERNAL, "internal", e.to_string())
    }

    /// The single machine-parsable line.
    pub fn line(&self) -> String {
        format!("error code={} kind={} message={:?}", self.code, self.kind, self.message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<IrError> for CliError {
    fn from(e: IrError) -> Self {
        match e {
            IrError::UnsupportedOp { .. } | IrError::ShapeMismatch { .. } | IrError::BadGeometry { .. } => CliError::unsupported(e),
            IrError::Cycle(_) | IrError::DanglingEdge { .. } | IrError::DuplicateName(_) | IrError::Arity { .. } | IrError::MissingWeight { .. } => {
                CliError::unsupported(e)
            }
            IrError::Schema(_) => CliError::unsupported(e),
            _ => CliError::config(e),
        }
    }
}

impl From<FrontendError> for CliError {
    fn from(e: FrontendError) -> Self {
        match e {
            FrontendError::Ir(e) => e.into(),
            e => CliError::unsupported(e),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match &e {
            KernelError::Unsupported { .. } | KernelError::BadGeometry { .. } | KernelError::Custom { .. } => CliError::unsupported(e),
            KernelError::IndivisiblePF { .. } | KernelError::UnresolvedPrecision(_) => CliError::config(e),
            KernelError::Cmvm { source: CmvmError::IndivisibleRF { .. } | CmvmError::DAWithReuse(_), .. } => CliError::config(e),
            KernelError::MissingInput(_) | KernelError::InputShape { .. } => CliError::config(e),
            _ => CliError::internal(e),
        }
    }
}

impl From<PassError> for CliError {
    fn from(e: PassError) -> Self {
        match e {
            PassError::Ir(e) => e.into(),
            PassError::UnboundedInput(_) | PassError::NotFullyQuantized(_) => CliError::config(e),
            PassError::UnknownFlow(_) => CliError::config(e),
            e => CliError::internal(e),
        }
    }
}

impl From<PerfError> for CliError {
    fn from(e: PerfError) -> Self {
        match e {
            PerfError::Kernel(k) => k.into(),
            PerfError::NoFifos => CliError::config(e),
            e => CliError::internal(e),
        }
    }
}

impl From<CodegenError> for CliError {
    fn from(e: CodegenError) -> Self {
        match e {
            CodegenError::Kernel(k) => k.into(),
            CodegenError::Perf(p) => p.into(),
            CodegenError::UnsupportedOpForBackend { .. } | CodegenError::MissingTemplate { .. } => CliError::unsupported(e),
            CodegenError::UnresolvedPrecision(_) | CodegenError::BadSamples(_) => CliError::config(e),
            CodegenError::Io { ref path, ref source } => CliError::io(path, source),
            CodegenError::Mismatch { .. } => CliError::new(exit::MISMATCH, "mismatch", e.to_string()),
            e => CliError::internal(e),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "fxflow", version, about = "Compile quantized neural-network graphs into bit-exact fixed-point firmware plans")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse, optimize and quantize a model, then emit a firmware project.
    Convert(ConvertArgs),
    /// Bit-exact emulation of a batch of samples.
    Emulate(EmulateArgs),
    /// Resource, II and latency estimates.
    Estimate(EstimateArgs),
    /// Calibrate io_stream FIFO depths.
    FifoOpt(FifoOptArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model file (JSON).
    pub model: PathBuf,
    /// Configuration file (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_io)]
    pub io_type: Option<IoType>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub reuse_factor: Option<usize>,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

fn parse_io(s: &str) -> Result<IoType, String> {
    s.parse()
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory.
    #[arg(long, short, default_value = "fxflow_prj")]
    pub out: PathBuf,
    /// Seed for testbench inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Testbench samples.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Write every lookup table as JSON into this directory.
    #[arg(long)]
    pub dump_tables: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input samples (JSON array of objects).
    #[arg(long)]
    pub inputs: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Expected outputs; any difference exits with code 1.
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct FifoOptArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Calibration samples file; only the sample count matters to the
    /// rate-based simulator.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Calibration samples when no file is given.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// FIFO occupancy per cycle under the optimized depths, as CSV.
    #[arg(long)]
    pub trace_csv: Option<PathBuf>,
    /// Write the configuration with the optimized depths here.
    #[arg(long)]
    pub write_config: Option<PathBuf>,
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// The user config from `--config` with command-line overrides applied.
pub fn user_config(args: &ModelArgs) -> Result<UserConfig, CliError> {
    let mut user = match &args.config {
        Some(p) => {
            let text = String::from_utf8(read(p)?).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            UserConfig::from_json(&text).map_err(CliError::config)?
        }
        None => UserConfig::new(),
    };
    if args.io_type.is_some() {
        user.io_type = args.io_type;
    }
    if args.strategy.is_some() {
        user.model.strategy = args.strategy;
    }
    if args.reuse_factor.is_some() {
        user.model.reuse_factor = args.reuse_factor;
    }
    Ok(user)
}

/// Parse, clean, configure and run every built-in flow.
pub fn compile(model: &[u8], user: &UserConfig) -> Result<ModelGraph, CliError> {
    let g = frontend::load_model(model)?;
    let g = resolve_config(&g, user)?;
    let (g, log) = passes::run_flow(&g, "quantize")?;
    info!("{} pass log entries", log.entries.len());
    Ok(g)
}

fn load(args: &ModelArgs) -> Result<(ModelGraph, UserConfig), CliError> {
    let user = user_config(args)?;
    let bytes = read(&args.model)?;
    Ok((compile(&bytes, &user)?, user))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(CliError::internal)
}

/// Summary rows: layer, op, strategy, RF/PF, II, result precision.
pub fn summary_table(g: &ModelGraph) -> Result<String, CliError> {
    let mut rows = vec![["layer", "op", "strategy", "rf", "pf", "ii", "result"].map(String::from).to_vec()];
    for name in g.topo_order() {
        let node = g.node(name).expect("node exists");
        let cfg = g.config.layer(name);
        let cmvm = node.op.is_cmvm();
        rows.push(vec![
            name.clone(),
            node.op.type_name().to_string(),
            if cmvm { cfg.strategy.to_string() } else { "-".into() },
            if cmvm { cfg.reuse_factor.to_string() } else { "-".into() },
            if cmvm { cfg.parallelization_factor.to_string() } else { "-".into() },
            perf::layer_ii(g, name)?.to_string(),
            node.precision(Role::Result).to_string(),
        ]);
    }
    Ok(perf::render_rows(&rows))
}

pub fn cmd_convert(args: &ConvertArgs, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let (g, _) = load(&args.model)?;
    let parts = split_graph(&g, &g.config.split_after)?;
    let opts = EmitOptions { samples: args.samples, seed: args.seed };
    let projects = pool(args.model.jobs)?.install(|| {
        parts.par_iter().map(|p| codegen::build_project(p, opts)).collect::<Result<Vec<_>, _>>()
    })?;
    for (k, (part, project)) in parts.iter().zip(&projects).enumerate() {
        let dir = if parts.len() == 1 { args.out.clone() } else { args.out.join(format!("part{k}")) };
        project.write(&dir)?;
        writeln!(out, "{}", dir.display()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
        write!(out, "{}", summary_table(part)?).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    }
    if let Some(dir) = &args.dump_tables {
        for part in &parts {
            let program = Program::new(part)?;
            for (key, t) in program.tables() {
                let text = serde_json::to_string_pretty(&t.to_json()).expect("table serializes") + "\n";
                write(&dir.join(format!("{key}.json")), &text)?;
            }
        }
    }
    Ok(())
}

pub fn cmd_emulate(args: &EmulateArgs, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let (g, _) = load(&args.model)?;
    let text = String::from_utf8(read(&args.inputs)?).map_err(|e| CliError::config(format!("{}: {e}", args.inputs.display())))?;
    let inputs = codegen::testbench::parse_samples(&g, &text)?;
    let program = Program::new(&g)?;
    let results = pool(args.model.jobs)?.install(|| program.run_batch(&inputs))?;
    let results: Vec<_> = results.into_iter().map(|m| m.into_iter().filter(|(k, _)| g.outputs().contains(k)).collect()).collect();
    let json = codegen::testbench::samples_to_json(&results);
    match &args.output {
        Some(p) => write(p, &json)?,
        None if args.compare.is_none() => out.write_all(json.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?,
        None => {}
    }
    if let Some(p) = &args.compare {
        let expected = String::from_utf8(read(p)?).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
        codegen::testbench::compare(&expected, &results)?;
        writeln!(out, "ok: {} samples match", results.len()).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

pub fn cmd_estimate(args: &EstimateArgs, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let (g, _) = load(&args.model)?;
    let report = perf::estimate(&g)?;
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        Format::Table => report.to_table(),
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn cmd_fifo_opt(args: &FifoOptArgs, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let (g, mut user) = load(&args.model)?;
    let samples = match &args.calibration {
        Some(p) => {
            let text = String::from_utf8(read(p)?).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            codegen::testbench::parse_samples(&g, &text)?.len()
        }
        None => codegen::random_inputs(&g, args.samples, args.seed)?.len(),
    };
    let depths = perf::optimize_fifo_depths(&g, samples)?;
    if let Some(p) = &args.trace_csv {
        let mut tuned = g.clone();
        tuned.config.fifo_depths = depths.clone();
        write(p, &perf::simulate(&tuned, samples.max(1))?.to_csv())?;
    }
    if let Some(p) = &args.write_config {
        user.fifo_depths = depths.clone();
        write(p, &(user.to_json() + "\n"))?;
    }
    let text = serde_json::to_string_pretty(&depths).expect("depths serialize") + "\n";
    out.write_all(text.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Convert(a) => cmd_convert(a, out),
        Command::Emulate(a) => cmd_emulate(a, out),
        Command::Estimate(a) => cmd_estimate(a, out),
        Command::FifoOpt(a) => cmd_fifo_opt(a, out),
    }
}

/// Runs a command line and returns the exit code, printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(&cli, &mut stdout) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("{}", e.line());
            eprintln!("fxflow: {e}");
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_one_line() {
        let e = CliError::unsupported("unsupported op 'Lstm' at 'lstm0'\nmore");
        assert_eq!(e.line().lines().count(), 1);
        assert!(e.line().starts_with("error code=3 kind=unsupported_model"));
    }

    #[test]
    fn codes_are_classified() {
        assert_eq!(CliError::from(IrError::UnknownLayerName("x".into())).code, exit::CONFIG);
        assert_eq!(CliError::from(FrontendError::UnsupportedOp { node: "n".into(), op: "Lstm".into() }).code, exit::UNSUPPORTED_MODEL);
        assert_eq!(CliError::from(PerfError::NoFifos).code, exit::CONFIG);
        assert_eq!(CliError::from(PerfError::DeadlockDetected(3)).code, exit::INTERNAL);
    }

    #[test]
    fn bad_flags_are_config_errors() {
        assert_eq!(main_with_args(["fxflow", "estimate", "m.json", "--strategy", "fast"]), exit::CONFIG);
    }

    #[test]
    fn missing_model_is_io() {
        assert_eq!(main_with_args(["fxflow", "estimate", "/nonexistent/model.json"]), exit::IO);
    }

    #[test]
    fn parses_every_subcommand() {
        for args in [
            vec!["fxflow", "convert", "m.json", "--out", "o", "--jobs", "2", "--seed", "4", "--dump-tables", "t"],
            vec!["fxflow", "emulate", "m.json", "--inputs", "i.json", "--compare", "e.json"],
            vec!["fxflow", "estimate", "m.json", "--format", "table", "--io-type", "io_stream"],
            vec!["fxflow", "fifo-opt", "m.json", "--trace-csv", "t.csv", "--strategy", "resource", "--reuse-factor", "2"],
        ] {
            Cli::try_parse_from(&args).unwrap();
        }
    }
}
