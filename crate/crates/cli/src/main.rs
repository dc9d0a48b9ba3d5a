//! `trajcons`: train, evaluate, predict, plot and synthesize trajectory data.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trajcons_core::Error;

#[derive(Parser)]
#[command(name = "trajcons", version, about = "Multi-candidate pedestrian trajectory prediction")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; config keys can be overridden with `--key value`.
    Train(TrainArgs),
    /// Best-of-K ADE/FDE of a checkpoint on the test windows of a config.
    Eval(EvalArgs),
    /// Write K candidate trajectories for every observation window of a track file.
    Predict(PredictArgs),
    /// Render a prediction file or a training log as SVG.
    Plot(PlotArgs),
    /// Write synthetic scenes as canonical track files plus a manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Config overrides as `--key value` pairs, e.g. `--model.d_model 32`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// Config whose data section names the test windows.
    #[arg(long)]
    config: PathBuf,

    /// Candidates to score; must equal the checkpoint's K.
    #[arg(long)]
    k: Option<usize>,

    /// Horizon; must equal the checkpoint's.
    #[arg(long)]
    t_pred: Option<usize>,

    /// Take the minimum over whole candidates for ADE and FDE together.
    #[arg(long)]
    joint: bool,

    /// Where `eval.json` and `eval.txt` go; defaults to the checkpoint's directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,

    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// Track file, `frame agent x y` per line.
    #[arg(long)]
    input: PathBuf,

    #[arg(long)]
    output: PathBuf,

    #[arg(long, default_value = "ethucy_txt")]
    format: String,

    /// Window stride in steps; defaults to the observed length.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ColorMode {
    Uniform,
    Speed,
}

#[derive(Args)]
struct PlotArgs {
    /// Prediction file or training log; the schema is detected from the content.
    #[arg(long)]
    input: PathBuf,

    /// Output image (SVG).
    #[arg(long)]
    output: PathBuf,

    /// Track file the predictions were made from; adds observed and actual paths.
    #[arg(long)]
    tracks: Option<PathBuf>,

    #[arg(long, default_value = "ethucy_txt")]
    format: String,

    #[arg(long, default_value_t = 0)]
    window: usize,

    #[arg(long, value_enum, default_value_t = ColorMode::Uniform)]
    color: ColorMode,
}

#[derive(Args)]
struct SynthArgs {
    /// Motion kinds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "constant_velocity,constant_accel,turn,stop")]
    kind: Vec<String>,

    /// Windows per kind.
    #[arg(long, default_value_t = 20)]
    count: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, default_value_t = 3)]
    agents: usize,

    /// Standard deviation of Gaussian position noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,

    #[arg(long, default_value_t = 8)]
    t_obs: usize,

    #[arg(long, default_value_t = 12)]
    t_pred: usize,

    #[arg(long)]
    output_dir: PathBuf,
}

/// A command-line mistake, reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NumericalAbort { .. }) => 3,
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

/// The error chain joined by `: `, skipping causes already spelled out by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Train(a) => commands::train(a.config.as_deref(), &a.overrides),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Plot(a) => plot::run(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
