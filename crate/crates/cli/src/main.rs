//! `clueseek` command-line entry point.
//!
//! Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.

mod commands;
mod io;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "clueseek", version, about = "Simulator, scorer and tooling for interleaved video clue seeking")]
pub struct Cli {
    /// Settings file, or `default`. `CLUESEEK_<SECTION>_<FIELD>` variables override it.
    #[arg(long, global = true, default_value = "default")]
    pub config: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a policy over samples and write trajectories plus a metrics report.
    Simulate(SimulateArgs),
    /// Score trajectories against their samples.
    Score(ScoreArgs),
    /// Attention mask tools.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Group-relative advantages with completion masking.
    Advantage(AdvantageArgs),
    /// Visual token quota arithmetic.
    #[command(subcommand)]
    Quota(QuotaCommand),
    /// Check a trajectory JSON-lines file.
    ValidateTrajectory(ValidateArgs),
    /// Candidate filtering pipeline and dataset tools.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Start the VideoCrop tool server.
    Serve(ServeArgs),
    /// Metrics over recorded trajectories.
    Eval(EvalArgs),
    /// Generate a synthetic manifest and samples.
    Gen(GenArgs),
    /// Print the effective settings.
    DumpConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Eval,
    Train,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Samples, JSON lines.
    #[arg(long)]
    pub samples: std::path::PathBuf,
    /// Manifests, a JSON document or JSON lines.
    #[arg(long)]
    pub manifests: std::path::PathBuf,
    /// oracle, random, scripted:FILE or remote:URL.
    #[arg(long, value_parser = io::parse_policy)]
    pub policy: io::PolicyArg,
    #[arg(long, value_enum, default_value = "eval")]
    pub mode: Mode,
    #[arg(long)]
    pub turn_limit: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    /// Trajectories, JSON lines.
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Also write the report here.
    #[arg(long)]
    pub report: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub trajectories: std::path::PathBuf,
    #[arg(long)]
    pub samples: std::path::PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum MaskCommand {
    /// Build the mask of an annotated sequence.
    Build {
        #[arg(long)]
        input: std::path::PathBuf,
        #[arg(long, value_enum, default_value = "dense01")]
        format: MaskFormatArg,
    },
    /// Whether masking applies to a sample at the given ratio.
    Select {
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = clueseek_core::tdam::DEFAULT_APPLY_RATIO)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskFormatArg {
    #[value(name = "dense01")]
    Dense01,
    #[value(name = "blocked_ranges")]
    BlockedRanges,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Sequence,
    Token,
}

#[derive(Debug, Args)]
pub struct AdvantageArgs {
    /// One group per line: `{rewards, turn_counts, context_tokens[, token_ratios]}` or an array of samples.
    #[arg(long)]
    pub groups: std::path::PathBuf,
    /// Also print the clipped surrogate value for each group.
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Finish with the indices of groups that survive dynamic sampling.
    #[arg(long)]
    pub dynamic_sampling: bool,
}

#[derive(Debug, Subcommand)]
pub enum QuotaCommand {
    /// Sampling plan for one crop.
    Plan {
        #[arg(long, num_args = 2, value_names = ["START", "END"])]
        segment: Vec<String>,
        #[arg(long)]
        strategy: clueseek_core::protocol::SamplingStrategy,
        /// Video duration in seconds; defaults to the segment end.
        #[arg(long)]
        duration: Option<String>,
    },
    /// Overview frame count and density for a video.
    Overview {
        #[arg(long)]
        duration: String,
    },
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub input: std::path::PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    /// Run the four filtering stages.
    Run(PipelineRunArgs),
    /// Export a seeded percentage of records for manual review.
    Sample {
        #[arg(long)]
        input: std::path::PathBuf,
        #[arg(long)]
        percent: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Histograms by task type, source, clue count and clue span.
    Stats {
        #[arg(long)]
        input: std::path::PathBuf,
    },
    /// Recompute task types from clue saliency.
    Classify {
        #[arg(long)]
        input: std::path::PathBuf,
        #[arg(long)]
        manifests: std::path::PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct PipelineRunArgs {
    /// Samples or candidate records, JSON lines.
    #[arg(long)]
    pub input: std::path::PathBuf,
    #[arg(long)]
    pub manifests: std::path::PathBuf,
    /// JSON object mapping each stage name to a rule name or an http(s) URL.
    #[arg(long)]
    pub stage_judges: std::path::PathBuf,
    #[arg(long)]
    pub checkpoint_dir: Option<std::path::PathBuf>,
    /// Continue from existing checkpoints.
    #[arg(long, requires = "checkpoint_dir")]
    pub resume: bool,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 50)]
    pub backoff_ms: u64,
    /// Survivors, JSON lines.
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long)]
    pub rejected: Option<std::path::PathBuf>,
    #[arg(long)]
    pub report: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Manifests to register at start-up.
    #[arg(long)]
    pub manifests: Option<std::path::PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Speak newline-delimited JSON on stdin/stdout instead of HTTP.
    #[arg(long)]
    pub stdio: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub trajectories: std::path::PathBuf,
    #[arg(long)]
    pub samples: std::path::PathBuf,
    #[arg(long)]
    pub report: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub samples: usize,
    /// Only this task type, e.g. SingleClueTool; all six otherwise.
    #[arg(long)]
    pub task_type: Option<String>,
    #[arg(long)]
    pub manifests_out: std::path::PathBuf,
    #[arg(long)]
    pub samples_out: std::path::PathBuf,
}

fn main() {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let code = match commands::run(cli) {
        Ok(code) => code,
        Err(e) if is_broken_pipe(&e) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<io::UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    };
    std::process::exit(code);
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

/// Error chain joined by `: `, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if parts.last().is_some_and(|prev| prev.ends_with(&text)) {
            continue;
        }
        parts.push(text);
    }
    parts.join(": ")
}
