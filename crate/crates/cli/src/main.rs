use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hybridplan::pipesim::{self, SimOptions};
use hybridplan::profiles::{self, LinkSpec, ProfileDocument};
use hybridplan::report::build_report;
use hybridplan::search::{self, load_plan, validate_plan, Plan, SearchConfig};
use hybridplan::{ClusterProfile, Error, ModelProfile, TrainingConfig};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;
const EXIT_INVALID_PLAN: u8 = 5;

#[derive(Parser)]
#[command(
    name = "hybridplan",
    version,
    about = "Hybrid-parallelism planner for transformer training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cluster or model profile.
    SynthProfile(SynthArgs),
    /// Search for the fastest plan that fits in device memory.
    Search(SearchArgs),
    /// Replay a plan on the 1F1B pipeline simulator.
    Simulate(SimulateArgs),
    /// Emit per-layer and per-stage cost breakdowns of a plan.
    Report(ReportArgs),
    /// Check a plan against the profiles; exits 5 on any violation.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synthesize a model profile.
    #[arg(long, conflicts_with = "cluster")]
    model: bool,
    /// Synthesize a cluster profile.
    #[arg(long)]
    cluster: bool,
    #[arg(long)]
    layers: Option<u64>,
    #[arg(long)]
    hidden: Option<u64>,
    #[arg(long)]
    seq: Option<u64>,
    /// Also write a training section with this global batch.
    #[arg(long)]
    global_batch: Option<u64>,
    #[arg(long)]
    devices: Option<u64>,
    #[arg(long)]
    devices_per_node: Option<u64>,
    /// FLOP/s per device.
    #[arg(long, default_value_t = 1e14)]
    flops: f64,
    /// Bytes per device.
    #[arg(long, default_value_t = 80 << 30)]
    memory: u64,
    /// Bytes per second.
    #[arg(long, default_value_t = 2e11)]
    intra_bw: f64,
    #[arg(long, default_value_t = 5e-6)]
    intra_latency: f64,
    #[arg(long, default_value_t = 2.5e10)]
    inter_bw: f64,
    #[arg(long, default_value_t = 2e-5)]
    inter_latency: f64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    cluster: PathBuf,
    /// Model profile; may also carry the training section.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    training: Option<PathBuf>,
    /// Ignore unknown keys in profile files.
    #[arg(long)]
    lenient: bool,
    /// Charge layout transitions between adjacent layers.
    #[arg(long, value_enum, default_value = "on")]
    transitions: Switch,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    profiles: ProfileArgs,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    memory_buckets: usize,
    #[arg(long)]
    max_pp: Option<u64>,
    /// Stop evaluating new candidates after this many seconds.
    #[arg(long)]
    time_limit: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    profiles: ProfileArgs,
    #[arg(long)]
    plan: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the event trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Let transfers overlap with compute.
    #[arg(long)]
    overlap_p2p: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    profiles: ProfileArgs,
    #[arg(long)]
    plan: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    overlap_p2p: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    profiles: ProfileArgs,
    #[arg(long)]
    plan: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn prefixed(self, at: &str) -> Self {
        Failure::new(self.code, format!("{at}: {}", self.message))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Exit code for errors raised while reading profiles or searching.
fn profile_failure(e: Error) -> Failure {
    let code = match e {
        Error::Io(_) => EXIT_IO,
        Error::NoFeasiblePlan(_) | Error::Infeasible { .. } => EXIT_INFEASIBLE,
        _ => EXIT_USAGE,
    };
    Failure::new(code, e.to_string())
}

/// Exit code for errors raised while reading or replaying a plan.
fn plan_failure(e: Error) -> Failure {
    match e {
        Error::Io(_) => Failure::new(EXIT_IO, e.to_string()),
        e => Failure::new(EXIT_INVALID_PLAN, e.to_string()),
    }
}

struct Inputs {
    cluster: ClusterProfile,
    model: ModelProfile,
    training: TrainingConfig,
    transitions: bool,
}

fn read_doc(path: &Path, strict: bool) -> CliResult<ProfileDocument> {
    profiles::load_profile_document(path, strict).map_err(|e| profile_failure(e).prefixed(&path.display().to_string()))
}

fn load_inputs(args: &ProfileArgs) -> CliResult<Inputs> {
    let strict = !args.lenient;
    let cluster = read_doc(&args.cluster, strict)?
        .cluster
        .ok_or_else(|| Failure::new(EXIT_USAGE, format!("{}: no `cluster` object", args.cluster.display())))?;
    let model_doc = read_doc(&args.model, strict)?;
    let model = model_doc
        .model
        .ok_or_else(|| Failure::new(EXIT_USAGE, format!("{}: no `model` object", args.model.display())))?;
    let training = match &args.training {
        Some(path) => read_doc(path, strict)?
            .training
            .ok_or_else(|| Failure::new(EXIT_USAGE, format!("{}: no `training` object", path.display())))?,
        None => model_doc.training.ok_or_else(|| {
            Failure::new(
                EXIT_USAGE,
                "no training config: pass --training or add `training` to the model file",
            )
        })?,
    };
    Ok(Inputs {
        cluster,
        model,
        training,
        transitions: args.transitions == Switch::On,
    })
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", p.display()))),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::new(EXIT_IO, format!("stdout: {e}"))),
    }
}

fn require(value: Option<u64>, flag: &str, what: &str) -> CliResult<u64> {
    value.ok_or_else(|| Failure::new(EXIT_USAGE, format!("--{what} requires --{flag}")))
}

fn cmd_synth_profile(a: &SynthArgs) -> CliResult {
    let doc = if a.model {
        let layers = require(a.layers, "layers", "model")?;
        let hidden = require(a.hidden, "hidden", "model")?;
        let seq = require(a.seq, "seq", "model")?;
        let model = profiles::synth_transformer_profile(layers, hidden, seq).map_err(profile_failure)?;
        let training = a.global_batch.map(TrainingConfig::new);
        if let Some(t) = &training {
            t.validate().map_err(profile_failure)?;
        }
        ProfileDocument {
            model: Some(model),
            training,
            ..Default::default()
        }
    } else if a.cluster {
        let devices = require(a.devices, "devices", "cluster")?;
        let per_node = a.devices_per_node.unwrap_or(devices);
        let intra = LinkSpec {
            bus_bandwidth: a.intra_bw,
            latency: a.intra_latency,
        };
        let inter = LinkSpec {
            bus_bandwidth: a.inter_bw,
            latency: a.inter_latency,
        };
        let cluster =
            profiles::synth_cluster(devices, per_node, a.flops, a.memory, intra, inter).map_err(profile_failure)?;
        ProfileDocument {
            cluster: Some(cluster),
            ..Default::default()
        }
    } else {
        return Err(Failure::new(EXIT_USAGE, "synth-profile needs --model or --cluster"));
    };
    let text = profiles::to_json(&doc).map_err(profile_failure)?;
    write_output(a.output.as_deref(), &text)
}

fn cmd_search(a: &SearchArgs) -> CliResult {
    let inputs = load_inputs(&a.profiles)?;
    let cfg = SearchConfig {
        memory_buckets: a.memory_buckets,
        transitions: inputs.transitions,
        max_pp: a.max_pp,
        time_limit_s: a.time_limit,
        jobs: a.jobs,
        ..Default::default()
    };
    let outcome = search::search(&inputs.model, &inputs.cluster, &inputs.training, &cfg).map_err(profile_failure)?;
    let plan = &outcome.plan;
    write_output(a.output.as_deref(), &plan.to_json().map_err(profile_failure)?)?;
    let summary = format!(
        "time={} pp={} microbatch={}",
        plan.predicted_iteration_time, plan.pp, plan.microbatch
    );
    if a.output.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    if outcome.memory_binding {
        eprintln!("note: the memory budget constrains this plan");
    }
    if !outcome.completed {
        eprintln!("warning: time limit reached, plan is the best found so far");
    }
    Ok(())
}

fn read_plan(path: &Path) -> CliResult<Plan> {
    load_plan(path).map_err(|e| plan_failure(e).prefixed(&path.display().to_string()))
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult {
    let inputs = load_inputs(&a.profiles)?;
    let plan = read_plan(&a.plan)?;
    let opts = SimOptions {
        transitions: inputs.transitions,
        overlap_p2p: a.overlap_p2p,
    };
    let result =
        pipesim::simulate(&plan, &inputs.model, &inputs.cluster, &inputs.training, opts).map_err(plan_failure)?;
    if let Some(path) = &a.trace {
        let io_err = |e: io::Error| Failure::new(EXIT_IO, format!("{}: {e}", path.display()));
        let file = fs::File::create(path).map_err(io_err)?;
        let mut out = BufWriter::new(file);
        pipesim::write_trace(&result.trace, &mut out).map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
        out.flush().map_err(io_err)?;
    }
    let text = hybridplan::canon::to_canonical_string(&result).map_err(plan_failure)?;
    write_output(a.output.as_deref(), &text)
}

fn cmd_report(a: &ReportArgs) -> CliResult {
    let inputs = load_inputs(&a.profiles)?;
    let plan = read_plan(&a.plan)?;
    let opts = SimOptions {
        transitions: inputs.transitions,
        overlap_p2p: a.overlap_p2p,
    };
    let bundle = build_report(&plan, &inputs.model, &inputs.cluster, &inputs.training, opts).map_err(plan_failure)?;
    if let Some(path) = &a.csv {
        fs::write(path, bundle.to_csv()).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    }
    write_output(a.output.as_deref(), &bundle.to_json().map_err(plan_failure)?)
}

fn cmd_validate(a: &ValidateArgs) -> CliResult {
    let inputs = load_inputs(&a.profiles)?;
    let plan = read_plan(&a.plan)?;
    let violations = validate_plan(
        &plan,
        &inputs.model,
        &inputs.cluster,
        &inputs.training,
        inputs.transitions,
    );
    if violations.is_empty() {
        println!("ok");
        return Ok(());
    }
    let listed: Vec<String> = violations.iter().map(|v| format!("  {v}")).collect();
    Err(Failure::new(
        EXIT_INVALID_PLAN,
        format!("{} violation(s):\n{}", violations.len(), listed.join("\n")),
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SynthProfile(a) => cmd_synth_profile(a),
        Command::Search(a) => cmd_search(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
