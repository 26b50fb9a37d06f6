//! Command-line surface: synthesis, analysis, planning, simulation and
//! policy comparison. Every command writes a run manifest next to its
//! outputs; `replay` re-runs a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{
    baseline_config, estimate_offline, plan_online, AllocError, BudgetSpec, OfflineMethod, Policy,
    PrefixConfiguration, DEFAULT_DELTA_TOL, DEFAULT_MAX_STEPS,
};
use crate::cachesim::{
    disturbance, replay_trace, MergePolicy, SimError, SimOptions, StepRecord,
    DEFAULT_PROTECT_DISTANCE,
};
use crate::importance::{compute_importance, priority_sequence, ImportanceError, PrioritySequence};
use crate::lorenz::layer_stats;
use crate::toymodel::{self, forward_trace, random_prompt, ToyConfig, ToyError, ToyModel};
use crate::trace::{load_trace, save_trace, synth_trace, AttentionTrace, TraceError};

pub const SEED_ENV: &str = "KVBUDGET_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) | CliError::Io { .. } => EXIT_VALIDATION,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Argument(m) => CliError::Usage(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<AllocError> for CliError {
    fn from(e: AllocError) -> Self {
        match e {
            AllocError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
            AllocError::InvalidBudget(_) | AllocError::InvalidPolicy(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Alloc(a) => a.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ImportanceError> for CliError {
    fn from(e: ImportanceError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ToyError> for CliError {
    fn from(e: ToyError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses `50%` or `0.5` into a fraction in `(0, 1]`.
pub fn parse_budget(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let value = match s.strip_suffix('%') {
        Some(pct) => {
            pct.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad percentage `{s}`: {e}"))?
                / 100.0
        }
        None => s
            .parse::<f64>()
            .map_err(|e| format!("bad budget `{s}`: {e}"))?,
    };
    if value > 0.0 && value <= 1.0 {
        Ok(value)
    } else {
        Err(format!("budget must be in (0, 1], got {s}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "kvbudget", version, about = "Layer-adaptive KV-cache budgets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(untagged)]
pub enum Command {
    /// Generate a trace from the Dirichlet generator or the toy model.
    Synth(SynthArgs),
    /// Lorenz curves and Gini coefficients per layer.
    Analyze(AnalyzeArgs),
    /// Derive a retention configuration for a budget.
    Plan(PlanArgs),
    /// Prefill compression followed by decode-time cache maintenance.
    Simulate(SimulateArgs),
    /// Sweep budgets, policies and merge modes.
    Compare(CompareArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Analyze(_) => "analyze",
            Command::Plan(_) => "plan",
            Command::Simulate(_) => "simulate",
            Command::Compare(_) => "compare",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    Toy,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyArg {
    Prefixkv,
    Uniform,
    Pyramid,
    Local,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Prefixkv => Policy::PrefixKv,
            PolicyArg::Uniform => Policy::Uniform,
            PolicyArg::Pyramid => Policy::Pyramid,
            PolicyArg::Local => Policy::Local,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeArg {
    None,
    Position,
    Feature,
}

impl From<MergeArg> for MergePolicy {
    fn from(m: MergeArg) -> Self {
        match m {
            MergeArg::None => MergePolicy::None,
            MergeArg::Position => MergePolicy::Position,
            MergeArg::Feature => MergePolicy::Feature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Mean,
    Pooled,
}

/// Toy model architecture flags shared by several commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    /// Weight seed; defaults to the run seed.
    #[arg(long)]
    pub model_seed: Option<u64>,
}

impl ToyArgs {
    fn model(&self, seed: u64) -> Result<ToyModel, CliError> {
        Ok(ToyModel::new(ToyConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            vocab: self.vocab,
            seed: self.model_seed.unwrap_or(seed),
        })?)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthMode::Dirichlet)]
    pub mode: SynthMode,
    #[command(flatten)]
    pub toy: ToyArgs,
    /// Sequence length.
    #[arg(long, default_value_t = 64)]
    pub seq: usize,
    /// Comma-separated per-layer concentrations (Dirichlet mode). A single
    /// value applies to all `--layers` layers.
    #[arg(long, value_delimiter = ',')]
    pub concentration: Vec<f64>,
    /// Attach seeded key/value vectors (Dirichlet mode).
    #[arg(long)]
    pub kv: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    /// Restrict the output to one layer.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BudgetArgs {
    /// Fraction or percentage of the full cache to keep.
    #[arg(long, value_parser = parse_budget)]
    pub budget: f64,
    #[arg(long, default_value_t = DEFAULT_DELTA_TOL)]
    pub delta_tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    pub max_steps: usize,
    /// Minimum tokens kept in every layer.
    #[arg(long = "layers-min", default_value_t = 1)]
    pub layers_min: usize,
}

impl BudgetArgs {
    fn spec(&self, r: f64) -> Result<BudgetSpec, CliError> {
        let spec = BudgetSpec::new(r)?
            .with_delta_tol(self.delta_tol)
            .with_max_steps(self.max_steps)
            .with_min_tokens(self.layers_min);
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[arg(long, value_enum, default_value_t = PolicyArg::Prefixkv)]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 4)]
    pub sink_count: usize,
    /// Estimate one configuration from all traces.
    #[arg(long)]
    pub offline: bool,
    #[arg(long, value_enum, default_value_t = MethodArg::Mean)]
    pub method: MethodArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Configuration document; alternatively pass --budget.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trace to replay. Without it the toy model generates the run.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_parser = parse_budget)]
    pub budget: Option<f64>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Prefixkv)]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 4)]
    pub sink_count: usize,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = MergeArg::None)]
    pub merge: MergeArg,
    #[arg(long, default_value_t = DEFAULT_PROTECT_DISTANCE)]
    pub protect: usize,
    /// Also measure feature disturbance against a full-cache run (toy mode).
    #[arg(long)]
    pub disturb: bool,
    #[command(flatten)]
    pub toy: ToyArgs,
    #[arg(long, default_value_t = 64)]
    pub prompt_len: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    /// Traces to compare on; omit for toy mode.
    pub traces: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_budget,
          default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    pub budgets: Vec<f64>,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "prefixkv,uniform,pyramid,local"
    )]
    pub policies: Vec<PolicyArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "none")]
    pub merges: Vec<MergeArg>,
    /// Decode steps replayed after prefill.
    #[arg(long, default_value_t = 0)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub sink_count: usize,
    #[arg(long, default_value_t = DEFAULT_PROTECT_DISTANCE)]
    pub protect: usize,
    #[arg(long, default_value_t = DEFAULT_DELTA_TOL)]
    pub delta_tol: f64,
    /// Toy-mode sample count.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub prompt_len: usize,
    #[command(flatten)]
    pub toy: ToyArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<String>,
    pub params: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub tool_version: String,
    /// Arguments after the program name, for replay.
    pub argv: Vec<String>,
}

fn flatten_params(value: &serde_json::Value, prefix: &str, out: &mut BTreeMap<String, String>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_params(v, &key, out);
            }
        }
        serde_json::Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn resolve_seed(flag: Option<u64>, override_seed: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = override_seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))
        }),
        Err(_) => Ok(0),
    }
}

struct Outputs {
    files: Vec<PathBuf>,
    manifest: PathBuf,
}

impl Outputs {
    fn file(out: &Path) -> Self {
        let mut name = out.as_os_str().to_owned();
        name.push(".manifest.json");
        Self {
            files: Vec::new(),
            manifest: PathBuf::from(name),
        }
    }

    fn dir(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out).map_err(io_err(out))?;
        Ok(Self {
            files: Vec::new(),
            manifest: out.join("manifest.json"),
        })
    }

    fn write(&mut self, path: PathBuf, contents: &str) -> Result<(), CliError> {
        fs::write(&path, contents).map_err(io_err(&path))?;
        self.files.push(path);
        Ok(())
    }
}

/// Entry point used by the binary: parses `args` (program name first) and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let argv: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match run(cli, argv, None) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Executes a parsed command. `seed_override` takes precedence over the
/// environment when the command has no explicit `--seed`.
pub fn run(cli: Cli, argv: Vec<String>, seed_override: Option<u64>) -> Result<(), CliError> {
    let name = cli.command.name();
    let mut params = BTreeMap::new();
    if let Ok(v) = serde_json::to_value(&cli.command) {
        flatten_params(&v, "", &mut params);
    }
    let (inputs, seed, outputs) = match cli.command {
        Command::Synth(a) => {
            let seed = resolve_seed(a.seed, seed_override)?;
            (Vec::new(), seed, cmd_synth(&a, seed)?)
        }
        Command::Analyze(a) => (a.traces.clone(), 0, cmd_analyze(&a)?),
        Command::Plan(a) => (a.traces.clone(), 0, cmd_plan(&a)?),
        Command::Simulate(a) => {
            let seed = resolve_seed(a.seed, seed_override)?;
            let inputs = a.config.iter().chain(&a.trace).cloned().collect();
            (inputs, seed, cmd_simulate(&a, seed)?)
        }
        Command::Compare(a) => {
            let seed = resolve_seed(a.seed, seed_override)?;
            (a.traces.clone(), seed, cmd_compare(&a, seed)?)
        }
        Command::Replay(a) => return cmd_replay(&a),
    };
    let manifest = RunManifest {
        command: name.to_string(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        params,
        outputs: outputs
            .files
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        argv,
    };
    let text =
        serde_json::to_string_pretty(&manifest).expect("manifest serialization is infallible");
    fs::write(&outputs.manifest, text).map_err(io_err(&outputs.manifest))
}

fn cmd_replay(args: &ReplayArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.manifest).map_err(io_err(&args.manifest))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad manifest: {e}")))?;
    let full = std::iter::once("kvbudget".to_string()).chain(manifest.argv.iter().cloned());
    let cli = Cli::try_parse_from(full).map_err(|e| CliError::Usage(e.to_string()))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Usage(
            "a manifest cannot replay another replay".into(),
        ));
    }
    run(cli, manifest.argv, Some(manifest.seed))
}

fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<Outputs, CliError> {
    let trace = match args.mode {
        SynthMode::Dirichlet => {
            if args.concentration.is_empty() {
                return Err(CliError::Usage(
                    "dirichlet mode needs --concentration".into(),
                ));
            }
            let concentration = if args.concentration.len() == 1 {
                vec![args.concentration[0]; args.toy.layers]
            } else {
                args.concentration.clone()
            };
            synth_trace(
                concentration.len(),
                args.toy.heads,
                args.seq,
                &concentration,
                seed,
                args.kv,
            )?
        }
        SynthMode::Toy => {
            if !args.concentration.is_empty() {
                return Err(CliError::Usage(
                    "--concentration only applies to dirichlet mode".into(),
                ));
            }
            let model = args.toy.model(seed)?;
            let prompt = random_prompt(args.toy.vocab, args.seq, seed);
            forward_trace(&model, &prompt)?
        }
    };
    let mut out = Outputs::file(&args.out);
    save_trace(&trace, &args.out)?;
    out.files.push(args.out.clone());
    Ok(out)
}

fn load_sequences(paths: &[PathBuf]) -> Result<Vec<(AttentionTrace, PrioritySequence)>, CliError> {
    paths
        .iter()
        .map(|p| {
            let trace = load_trace(p)?;
            let seq = priority_sequence(&compute_importance(&trace)?);
            Ok((trace, seq))
        })
        .collect()
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<Outputs, CliError> {
    let loaded = load_sequences(&args.traces)?;
    let mut out = Outputs::dir(&args.out)?;
    let many = loaded.len() > 1;
    for (i, (trace, seq)) in loaded.iter().enumerate() {
        if let Some(l) = args.layer {
            if l >= trace.meta.layers {
                return Err(CliError::Usage(format!(
                    "--layer {l} but {} has {} layers",
                    args.traces[i].display(),
                    trace.meta.layers
                )));
            }
        }
        let mut curves = String::from("layer,x,y\n");
        let mut stats = String::from("layer,gini\n");
        for s in layer_stats(seq)
            .into_iter()
            .filter(|s| args.layer.is_none_or(|l| l == s.layer))
        {
            for (x, y) in &s.curve.points {
                let _ = writeln!(curves, "{},{x},{y}", s.layer);
            }
            let _ = writeln!(stats, "{},{}", s.layer, s.gini);
        }
        let suffix = if many { format!("_{i}") } else { String::new() };
        out.write(args.out.join(format!("lorenz{suffix}.csv")), &curves)?;
        out.write(args.out.join(format!("stats{suffix}.csv")), &stats)?;
    }
    Ok(out)
}

fn build_config(
    policy: Policy,
    trace: &AttentionTrace,
    seq: &PrioritySequence,
    budget: &BudgetSpec,
    sink_count: usize,
) -> Result<PrefixConfiguration, CliError> {
    Ok(match policy {
        Policy::PrefixKv => plan_online(seq, budget)?,
        Policy::Local => baseline_config(policy, budget, &trace.meta, Some(sink_count))?,
        other => baseline_config(other, budget, &trace.meta, None)?,
    })
}

fn cmd_plan(args: &PlanArgs) -> Result<Outputs, CliError> {
    let budget = args.budget.spec(args.budget.budget)?;
    let loaded = load_sequences(&args.traces)?;
    let policy = Policy::from(args.policy);
    let config = if args.offline {
        if policy != Policy::PrefixKv {
            return Err(CliError::Usage(
                "--offline applies to the prefixkv policy".into(),
            ));
        }
        let method = match args.method {
            MethodArg::Mean => OfflineMethod::PerSampleMean,
            MethodArg::Pooled => OfflineMethod::PooledCurve,
        };
        let seqs: Vec<PrioritySequence> = loaded.iter().map(|(_, s)| s.clone()).collect();
        estimate_offline(&seqs, &budget, method)?
    } else {
        if loaded.len() > 1 {
            return Err(CliError::Usage(
                "several traces given; pass --offline to combine them".into(),
            ));
        }
        let (trace, seq) = &loaded[0];
        build_config(policy, trace, seq, &budget, args.sink_count)?
    };
    let mut out = Outputs::file(&args.out);
    fs::write(&args.out, config.to_json()).map_err(io_err(&args.out))?;
    out.files.push(args.out.clone());
    Ok(out)
}

fn log_lines(log: &[StepRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("log serialization is infallible") + "\n")
        .collect()
}

fn retained_csv(initial: &[f64], log: &[StepRecord]) -> String {
    let mut csv = String::from("step,layer,retained_info\n");
    for (l, v) in initial.iter().enumerate() {
        let _ = writeln!(csv, "0,{l},{v}");
    }
    for r in log {
        for (l, v) in r.retained_info.iter().enumerate() {
            let _ = writeln!(csv, "{},{l},{v}", r.step);
        }
    }
    csv
}

fn load_config(path: &Path) -> Result<PrefixConfiguration, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    PrefixConfiguration::from_json(&text)
        .map_err(|e| CliError::Validation(format!("bad configuration {}: {e}", path.display())))
}

fn check_layers(config: &PrefixConfiguration, layers: usize) -> Result<(), CliError> {
    if config.layers() != layers {
        return Err(CliError::Validation(format!(
            "configuration has {} layers, trace has {layers}",
            config.layers()
        )));
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, seed: u64) -> Result<Outputs, CliError> {
    let options = SimOptions {
        protect_distance: args.protect,
        merge: args.merge.into(),
    };
    let policy = Policy::from(args.policy);
    let given = args.config.as_deref().map(load_config).transpose()?;
    if given.is_none() && args.budget.is_none() {
        return Err(CliError::Usage("pass --config or --budget".into()));
    }
    let budget_spec = |r: f64| -> Result<BudgetSpec, CliError> { Ok(BudgetSpec::new(r)?) };

    let mut out = Outputs::dir(&args.out)?;
    match &args.trace {
        Some(path) => {
            if args.disturb {
                return Err(CliError::Usage(
                    "--disturb needs the toy model (omit --trace)".into(),
                ));
            }
            let trace = load_trace(path)?;
            let n = trace.meta.seq_len;
            if args.steps >= n {
                return Err(CliError::Usage(format!(
                    "--steps {} leaves no prefill tokens in a {n}-token trace",
                    args.steps
                )));
            }
            let prefill_len = n - args.steps;
            let prompt = trace.prefix(prefill_len)?;
            let config = match given {
                Some(c) => c,
                None => {
                    let seq = priority_sequence(&compute_importance(&prompt)?);
                    let b = budget_spec(args.budget.expect("checked above"))?;
                    build_config(policy, &prompt, &seq, &b, args.sink_count)?
                }
            };
            check_layers(&config, trace.meta.layers)?;
            let replay = replay_trace(&trace, prefill_len, &config, &options)?;
            out.write(args.out.join("log.jsonl"), &log_lines(&replay.log))?;
            out.write(
                args.out.join("retained_info.csv"),
                &retained_csv(&replay.prefill_retained, &replay.log),
            )?;
        }
        None => {
            let model = args.toy.model(seed)?;
            let prompt = random_prompt(args.toy.vocab, args.prompt_len, seed);
            let trace = forward_trace(&model, &prompt)?;
            let config = match given {
                Some(c) => c,
                None => {
                    let seq = priority_sequence(&compute_importance(&trace)?);
                    let b = budget_spec(args.budget.expect("checked above"))?;
                    build_config(policy, &trace, &seq, &b, args.sink_count)?
                }
            };
            check_layers(&config, trace.meta.layers)?;
            if args.steps == 0 {
                return Err(CliError::Usage("toy simulation needs --steps >= 1".into()));
            }
            let run = toymodel::decode(&model, &prompt, args.steps, Some(&config), &options)?;
            let prefill = crate::cachesim::prefill_compress(
                &run.prompt_trace,
                &if config.seq_len == prompt.len() {
                    config.clone()
                } else {
                    config.realize(prompt.len())?
                },
                &options,
            )?;
            let initial = prefill.running_retained_info();
            out.write(args.out.join("log.jsonl"), &log_lines(&run.log))?;
            out.write(
                args.out.join("retained_info.csv"),
                &retained_csv(&initial, &run.log),
            )?;
            if args.disturb {
                let report = disturbance(&model, &prompt, args.steps, &config, &options)?;
                out.write(args.out.join("disturbance.csv"), &report.to_csv())?;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Default, Clone, Copy)]
struct Cell {
    min_sum: f64,
    mean_sum: f64,
    mae_sum: f64,
    runs: usize,
}

fn cmd_compare(args: &CompareArgs, seed: u64) -> Result<Outputs, CliError> {
    if args.budgets.is_empty() || args.policies.is_empty() || args.merges.is_empty() {
        return Err(CliError::Usage(
            "budgets, policies and merges must be non-empty".into(),
        ));
    }
    let options_for = |merge: MergeArg| SimOptions {
        protect_distance: args.protect,
        merge: merge.into(),
    };
    let toy_mode = args.traces.is_empty();
    let model = if toy_mode {
        Some(args.toy.model(seed)?)
    } else {
        None
    };
    let runs: Vec<(AttentionTrace, Option<Vec<usize>>)> = match &model {
        Some(m) => (0..args.samples as u64)
            .map(|s| {
                let prompt = random_prompt(args.toy.vocab, args.prompt_len, seed.wrapping_add(s));
                Ok((forward_trace(m, &prompt)?, Some(prompt)))
            })
            .collect::<Result<_, CliError>>()?,
        None => args
            .traces
            .iter()
            .map(|p| Ok((load_trace(p)?, None)))
            .collect::<Result<_, CliError>>()?,
    };

    let mut cells: BTreeMap<(usize, usize, usize), Cell> = BTreeMap::new();
    for (trace, prompt) in &runs {
        let n = trace.meta.seq_len;
        let decode_steps = if toy_mode { 0 } else { args.steps };
        if decode_steps >= n {
            return Err(CliError::Usage(format!(
                "--steps {} leaves no prefill tokens in a {n}-token trace",
                args.steps
            )));
        }
        let prefill = trace.prefix(n - decode_steps)?;
        let seq = priority_sequence(&compute_importance(&prefill)?);
        for (bi, &r) in args.budgets.iter().enumerate() {
            let budget = BudgetSpec::new(r)?.with_delta_tol(args.delta_tol);
            for (pi, &policy) in args.policies.iter().enumerate() {
                let config = build_config(policy.into(), &prefill, &seq, &budget, args.sink_count)?;
                for (mi, &merge) in args.merges.iter().enumerate() {
                    let options = options_for(merge);
                    let replay = replay_trace(trace, n - decode_steps, &config, &options)?;
                    let info = replay.state.running_retained_info();
                    let cell = cells.entry((bi, pi, mi)).or_default();
                    cell.min_sum += info.iter().copied().fold(f64::INFINITY, f64::min);
                    cell.mean_sum += info.iter().sum::<f64>() / info.len() as f64;
                    if let (Some(m), Some(p)) = (&model, prompt) {
                        if args.steps > 0 {
                            cell.mae_sum +=
                                disturbance(m, p, args.steps, &config, &options)?.mean();
                        }
                    }
                    cell.runs += 1;
                }
            }
        }
    }

    let with_mae = toy_mode && args.steps > 0;
    let mut csv = String::from("budget,policy,merge,min_retained,mean_retained,mae\n");
    for (&(bi, pi, mi), cell) in &cells {
        let k = cell.runs as f64;
        let mae = if with_mae {
            (cell.mae_sum / k).to_string()
        } else {
            String::new()
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{mae}",
            args.budgets[bi],
            Policy::from(args.policies[pi]).name(),
            MergePolicy::from(args.merges[mi]).name(),
            cell.min_sum / k,
            cell.mean_sum / k,
        );
    }
    let mut matrix = String::from("budget");
    for &p in &args.policies {
        let _ = write!(matrix, ",{}", Policy::from(p).name());
    }
    matrix.push('\n');
    for (bi, r) in args.budgets.iter().enumerate() {
        let _ = write!(matrix, "{r}");
        for pi in 0..args.policies.len() {
            let cell = cells[&(bi, pi, 0)];
            let _ = write!(matrix, ",{}", cell.min_sum / cell.runs as f64);
        }
        matrix.push('\n');
    }
    let mut out = Outputs::dir(&args.out)?;
    out.write(args.out.join("compare.csv"), &csv)?;
    out.write(args.out.join("retained_matrix.csv"), &matrix)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_parsing() {
        assert_eq!(parse_budget("50%"), Ok(0.5));
        assert_eq!(parse_budget("0.5"), Ok(0.5));
        assert_eq!(parse_budget("100%"), Ok(1.0));
        assert!(parse_budget("0").is_err());
        assert!(parse_budget("120%").is_err());
        assert!(parse_budget("half").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 1);
        assert_eq!(CliError::Validation(String::new()).exit_code(), 2);
        let infeasible: CliError = AllocError::Infeasible {
            budget_tokens: 0,
            layers: 2,
            min_tokens: 1,
        }
        .into();
        assert_eq!(infeasible.exit_code(), 3);
    }

    #[test]
    fn params_flatten() {
        let v = serde_json::json!({"a": {"b": 1, "c": "x"}, "d": [1, 2]});
        let mut out = BTreeMap::new();
        flatten_params(&v, "", &mut out);
        assert_eq!(out["a.b"], "1");
        assert_eq!(out["a.c"], "x");
        assert_eq!(out["d"], "[1,2]");
    }
}
