mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowpose::error::Error;

/// Video pose estimation: heatmap regression, flow warping and temporal pooling.
#[derive(Parser, Debug)]
#[command(name = "flowpose", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic puppet sequence with labels and exact flows.
    GenData(GenDataArgs),
    /// Train a heatmap network or the coordinate baseline.
    Train(TrainArgs),
    /// Per-frame heatmaps and decoded poses from a checkpoint.
    Infer(InferArgs),
    /// Horn-Schunck flow between each frame and its neighbours.
    EstimateFlow(EstimateFlowArgs),
    /// Warp neighbouring heatmaps onto each frame.
    Warp(WarpArgs),
    /// Pool warped heatmaps and decode poses.
    Pool(PoolArgs),
    /// Fit parametric pooling weights to labelled frames.
    LearnPool(LearnPoolArgs),
    /// Accuracy-vs-distance curves of predictions against labels.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Puppet spec (`key = value`); defaults to the upper-body puppet.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 600)]
    pub frames: usize,
    /// Also write exact flows to every neighbour within this many frames.
    #[arg(long, default_value_t = 0)]
    pub flow_range: usize,
    /// Gaussian jitter (pixels) added to the written labels.
    #[arg(long, default_value_t = 0.0)]
    pub label_jitter: f64,
    /// Fraction of labels replaced by uniform outliers.
    #[arg(long, default_value_t = 0.0)]
    pub label_outliers: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config (`key = value`); defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Frame files, or directories of `frame_*.tns`.
    #[arg(required = true)]
    pub frames: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EstimateFlowArgs {
    /// Directory of `frame_*.tns`.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub range: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
}

#[derive(Args, Debug)]
pub struct WarpArgs {
    #[arg(long)]
    pub heatmaps: PathBuf,
    #[arg(long)]
    pub flows: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PoolArgs {
    #[arg(long)]
    pub warped: PathBuf,
    #[arg(long, default_value = "parametric")]
    pub mode: String,
    /// Weights CSV, required for parametric pooling.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Input pixels per heatmap pixel.
    #[arg(long, default_value_t = 4.0)]
    pub scale: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LearnPoolArgs {
    #[arg(long)]
    pub warped: PathBuf,
    /// Labels (`poses.csv`) for the warped frames, in input pixels.
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    pub scale: f64,
    #[arg(long, default_value_t = flowpose::heatmap::DEFAULT_SIGMA)]
    pub sigma: f64,
    #[arg(long, default_value_t = 20_000)]
    pub iterations: usize,
    /// Starting weights: `center` or `uniform`.
    #[arg(long, default_value = "center")]
    pub init: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted poses; `method=path` names the curve, otherwise the
    /// parent directory name is used.
    #[arg(long = "pred", required = true)]
    pub preds: Vec<String>,
    #[arg(long)]
    pub gt: PathBuf,
    /// Largest threshold, input pixels.
    #[arg(long, default_value_t = 20.0)]
    pub d_max: f64,
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::Invalid(_) => "invalid",
        Error::Format { .. } => "format",
        Error::Config { .. } => "config",
        Error::Diverged { .. } => "diverged",
        Error::BackwardTwice => "internal",
        Error::Io { .. } => "io",
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn init_threads() -> flowpose::Result<()> {
    let Ok(v) = std::env::var("FLOWPOSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config {
            key: "FLOWPOSE_THREADS".into(),
            msg: format!("expected a positive integer, got `{v}`"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Invalid(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let result = init_threads().and_then(|()| match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::EstimateFlow(a) => commands::estimate_flow(a),
        Command::Warp(a) => commands::warp(a),
        Command::Pool(a) => commands::pool(a),
        Command::LearnPool(a) => commands::learn_pool(a),
        Command::Eval(a) => commands::eval(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", kind(&e), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
