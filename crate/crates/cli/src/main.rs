mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Panoramic video diffusion lab: synthetic data, two-phase training,
/// enhanced sampling and seam evaluation. Angles are in radians.
#[derive(Debug, Parser)]
#[command(name = "panolab", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic panoramic clips with exact optical flow.
    GenData(GenDataArgs),
    /// Train the denoiser (backbone) or the motion adapter.
    Train(TrainArgs),
    /// Sample a clip with the DDIM sampler and the seam enhancements.
    Sample(SampleArgs),
    /// Seam metric, perspective projection or side-by-side duplication.
    Eval(EvalArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Backbone,
    Adapter,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub scenes: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Clip height in pixels (even); the width is twice the height.
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub phase: PhaseArg,
    #[arg(long)]
    pub steps: usize,
    /// Probability of replacing a sample's flow with zeros (adapter phase).
    #[arg(long, default_value_t = 0.2)]
    pub p_zero: f64,
    #[arg(long, value_enum, default_value = "on")]
    pub latitude_loss: Switch,
    #[arg(long, value_enum, default_value = "on")]
    pub rotate_augment: Switch,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint to resume from; required for the adapter phase.
    #[arg(long)]
    pub ckpt_in: Option<PathBuf>,
    #[arg(long)]
    pub ckpt_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Flow container (pixel displacements on the condition grid).
    #[arg(long)]
    pub flow: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    /// Rotation per denoising step in radians (1.570796 rad = 90°).
    #[arg(long, default_value_t = 1.570796, allow_negative_numbers = true)]
    pub theta: f64,
    #[arg(long, value_enum, default_value = "on")]
    pub rotate: Switch,
    #[arg(long, value_enum, default_value = "on")]
    pub circular_late: Switch,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub adapter_weight: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clip height when no flow is given (default 32).
    #[arg(long)]
    pub height: Option<usize>,
    /// Clip length when no flow is given (default: the checkpoint's).
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Video container or directory of PPM frames.
    #[arg(long)]
    pub input: PathBuf,
    #[command(subcommand)]
    pub action: EvalAction,
}

#[derive(Debug, Subcommand)]
pub enum EvalAction {
    /// Print seam_gap, interior_gap and ratio.
    Seam {
        /// Also write seam.txt and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cut a perspective view (angles in radians; 1.570796 rad = 90°).
    Project {
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        yaw: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        pitch: f64,
        #[arg(long, default_value_t = 1.570796)]
        fov: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Place each frame twice side by side so the seam sits in the middle.
    Duplicate {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse_from(std::iter::once("panolab".to_string()).chain(args.iter().cloned())) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
