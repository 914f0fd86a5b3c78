//! `healswin`: grid inspection, shift plans, synthetic data, resampling,
//! training, evaluation, prediction and plots.

mod commands;
mod config;
mod outputs;
mod plot;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use healswin_core::Interp;
use healswin_grid::ShiftStrategy;
use serde_json::json;

#[derive(Parser)]
#[command(name = "healswin", version, about = "HEAL-SWIN on the HEALPix grid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pixel counts, and with --patch and --window the UNet layer chain.
    GridInfo(GridInfoArgs),
    /// Writes a shift plan and its attention-mask sidecar.
    MakePlan(MakePlanArgs),
    /// Generates synthetic samples as HEALPix maps, optionally with fisheye rasters.
    GenData(GenDataArgs),
    /// Resamples a fisheye raster onto the HEALPix subset.
    Resample(ResampleArgs),
    /// Trains a model and writes a checkpoint and loss curve.
    Train(TrainArgs),
    /// Evaluates a checkpoint and writes a metrics report.
    Eval(EvalArgs),
    /// Runs a checkpoint on one map.
    Predict(PredictArgs),
    /// Renders a map as a per-face montage, optionally with a fisheye view.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct GridInfoArgs {
    #[arg(long)]
    pub nside: u32,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Encoder stages including the bottleneck.
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    #[arg(long, default_value_t = 8)]
    pub faces: usize,
}

#[derive(Args)]
pub struct MakePlanArgs {
    #[arg(long)]
    pub nside: u32,
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    #[arg(long, default_value_t = 4)]
    pub shift: usize,
    #[arg(long, default_value = "spiral")]
    pub strategy: ShiftStrategy,
    #[arg(long, default_value_t = 8)]
    pub faces: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Mask sidecar path; defaults to `<out>.mask`.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long)]
    pub nside: u32,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub objects: usize,
    /// Also render each scene through the camera.
    #[arg(long)]
    pub raster: bool,
    /// Camera calibration JSON; defaults to a 256-pixel equidistant lens.
    #[arg(long)]
    pub calib: Option<PathBuf>,
}

#[derive(Args)]
pub struct ResampleArgs {
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub nside: u32,
    #[arg(long, default_value = "bilinear")]
    pub interp: Interp,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Report path; defaults to io.metrics of the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Map whose first three channels are RGB.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PlotArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Plot one channel instead of RGB.
    #[arg(long)]
    pub channel: Option<usize>,
    /// Color the chosen channel as class labels.
    #[arg(long)]
    pub labels: bool,
    /// Also write the map seen through this camera.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub fisheye_out: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GridInfo(_) => "grid-info",
            Command::MakePlan(_) => "make-plan",
            Command::GenData(_) => "gen-data",
            Command::Resample(_) => "resample",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Predict(_) => "predict",
            Command::Plot(_) => "plot",
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("HEALSWIN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("HEALSWIN_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> Result<serde_json::Value> {
    init_threads()?;
    match cmd {
        Command::GridInfo(a) => commands::grid_info(&a),
        Command::MakePlan(a) => commands::make_plan(&a),
        Command::GenData(a) => commands::gen_data(&a),
        Command::Resample(a) => commands::resample(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Plot(a) => plot::plot(&a),
    }
}

/// The error chain on one line; causes already quoted by their wrapper are skipped.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out.replace('\n', " ")
}

fn fail(command: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "status": "error", "command": command, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            return fail("usage", first);
        }
    };
    let name = cli.command.name();
    match run(cli.command) {
        Ok(summary) => {
            // a closed stdout is not worth a panic
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(name, message(&e)),
    }
}
