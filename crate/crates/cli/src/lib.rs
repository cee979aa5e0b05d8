//! `icseg` command line. `run` parses arguments, executes one subcommand and
//! returns the process exit code.

mod commands;
mod manifest;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use icseg::inference::Strategy;
use icseg::protocol::RunConfig;
use icseg::segmap::TaskKind;
use icseg::train::config::{apply_kv, parse_kv, render_kv, ConfigError};

pub use manifest::{checkpoint_hash, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub(crate) fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "icseg", version, about = "In-context segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub(crate) struct Common {
    /// Flat `key = value` config file; any key can also be given as `--key value`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the run manifest (default `<out>/manifest.json`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset (and optionally videos).
    Gen(GenArgs),
    /// Train a model from scratch on the synthetic mixture.
    Train(TrainArgs),
    /// Score a checkpoint on the example-based benchmark, or score mask directories.
    Eval(EvalArgs),
    /// Segment one query image from example pairs.
    Predict(PredictArgs),
    /// Learn one prompt pair per category with the model frozen.
    Tune(TuneArgs),
    /// Propagate first-frame instance masks through videos.
    Vos(VosArgs),
    /// Run the REST service.
    Serve(ServeArgs),
    /// Ensemble-strategy and frame-count sweeps as CSV.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub(crate) struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes (default: config `n_train`).
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of video sequences to write under `<out>/videos`.
    #[arg(long, default_value_t = 0)]
    pub videos: usize,
}

#[derive(Args, Debug)]
pub(crate) struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint path (default `<out>/model.ckpt`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub(crate) struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, required_unless_present = "pred")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "single")]
    pub strategy: Strategy,
    /// Support examples per episode.
    #[arg(long, default_value_t = 1)]
    pub examples: usize,
    /// Directory of predicted 16-bit masks; scored against `--gt` without a model.
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub(crate) struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated `source.png:mask.png` pairs.
    #[arg(long, value_delimiter = ',', required = true)]
    pub examples: Vec<String>,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "feature")]
    pub strategy: Strategy,
    /// Spatial grid side (default: smallest square holding all examples).
    #[arg(long)]
    pub grid_n: Option<u32>,
    #[arg(long, default_value = "category")]
    pub task_kind: TaskKind,
}

#[derive(Args, Debug)]
pub(crate) struct TuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Task images per category used for tuning.
    #[arg(long, default_value_t = 8)]
    pub examples: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
}

#[derive(Args, Debug)]
pub(crate) struct VosArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = icseg::inference::DEFAULT_K)]
    pub k_frames: usize,
    #[arg(long, default_value = "feature")]
    pub strategy: Strategy,
    /// A video directory written by `gen --videos`; synthetic videos otherwise.
    #[arg(long)]
    pub video: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub(crate) struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Untrained model from the config when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

#[derive(Args, Debug)]
pub(crate) struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Untrained model from the config when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Frame-count sweep, e.g. `1,4,8,12,16`.
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
    /// Run the ensemble-strategy sweep.
    #[arg(long)]
    pub ensembles: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Config keys accepted as `--key value` (or `--key=value`), with `-` and
/// `_` interchangeable. `seed` is a regular flag.
fn config_keys() -> Vec<String> {
    let text = render_kv(&RunConfig::default().sections());
    parse_kv(&text)
        .expect("rendered config parses")
        .into_keys()
        .filter(|k| k != "seed")
        .collect()
}

/// Splits config overrides out of `args` so clap only sees its own flags.
fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, BTreeMap<String, String>), CliError> {
    let keys = config_keys();
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = BTreeMap::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.replace('-', "_"), Some(v.to_string())),
            None => (flag.replace('-', "_"), None),
        };
        if !keys.contains(&name) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::Config(format!("--{name} needs a value")))?,
        };
        overrides.insert(name, value);
    }
    Ok((rest, overrides))
}

/// Resolves defaults, then the config file, then `--key value` overrides,
/// then `--seed`. The model seed follows the run seed unless `model_seed`
/// is set explicitly.
pub(crate) fn resolve_config(common: &Common, overrides: &BTreeMap<String, String>) -> Result<RunConfig, CliError> {
    let mut entries = match &common.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            parse_kv(&text)?
        }
        None => BTreeMap::new(),
    };
    entries.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
    let mut run = RunConfig::toy();
    apply_kv(&entries, &mut run.sections_mut())?;
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    if !entries.contains_key("model_seed") {
        run.model.seed = run.train.seed;
    }
    run.validate()?;
    Ok(run)
}

/// Runs the CLI on `args` (including the program name). Diagnostics go to
/// `stderr` as a single `error[<kind>]: <message>` line.
pub fn run(args: Vec<String>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let (args, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(e) => return report(e, stderr),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{text}");
            } else {
                let _ = write!(stdout, "{text}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a, &overrides, stdout),
        Command::Train(a) => commands::train(&a, &overrides, stdout),
        Command::Eval(a) => commands::eval(&a, &overrides, stdout),
        Command::Predict(a) => commands::predict(&a, &overrides, stdout),
        Command::Tune(a) => commands::tune(&a, &overrides, stdout),
        Command::Vos(a) => commands::vos(&a, &overrides, stdout),
        Command::Serve(a) => commands::serve(&a, &overrides, stderr),
        Command::Ablate(a) => commands::ablate(&a, &overrides, stdout, stderr),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => report(e, stderr),
    }
}

fn report(e: CliError, stderr: &mut dyn Write) -> i32 {
    let _ = writeln!(stderr, "error[{}]: {}", e.kind(), e.message());
    e.exit_code()
}
