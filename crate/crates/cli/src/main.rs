//! `mvdd`: generate toy data, train the denoiser, sample, complete, fuse and evaluate.

mod commands;
mod config;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit codes.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISMATCH: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.to_string(),
        }
    }

    pub fn mismatch(msg: impl Display) -> Self {
        Self {
            code: EXIT_MISMATCH,
            message: msg.to_string(),
        }
    }

    pub fn io(msg: impl Display) -> Self {
        Self {
            code: EXIT_IO,
            message: msg.to_string(),
        }
    }
}

impl From<mvdd::Error> for CliError {
    fn from(e: mvdd::Error) -> Self {
        use mvdd::Error as E;
        let code = match &e {
            E::InvalidArgument(_) | E::UnknownName { .. } => EXIT_USAGE,
            E::ShapeMismatch(_) | E::BehindCamera(_) | E::Format(_) | E::Json(_) => EXIT_MISMATCH,
            E::Io(_) => EXIT_IO,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "mvdd", version, about = "Multi-view depth diffusion toolkit")]
struct Cli {
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads. Results never depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view depth dataset.
    GenData(GenDataArgs),
    /// Train the denoiser on a dataset.
    Train(TrainArgs),
    /// Unconditional multi-view generation.
    Sample(SampleArgs),
    /// Complete the remaining views from one input depth map.
    Complete(CompleteArgs),
    /// MMD / COV / 1-NNA between two sets of point clouds.
    Eval(EvalArgs),
    /// Depth-filter one sample and write the surviving points as PLY.
    Fuse(FuseArgs),
    /// Back-project every foreground pixel of one sample to PLY.
    ExportPly(ExportPlyArgs),
    /// Write one view of one sample as a PFM map.
    ExtractView(ExtractViewArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub res: Option<usize>,
    /// Rig layout: fixed or dynamic.
    #[arg(long)]
    pub rig: Option<String>,
    /// First camera center for the dynamic rig, `x,y,z`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub first_camera: Option<Vec<f64>>,
    /// Comma-separated shape kinds (sphere, box, cylinder, union).
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Diffusion steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub channel_multipliers: Option<Vec<usize>>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Levels with epipolar attention; pass an empty string for none.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub attention_levels: Option<Vec<usize>>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long = "neighbors")]
    pub r: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Expected views; a dataset with a different count is rejected.
    #[arg(long)]
    pub views: Option<usize>,
    /// Expected resolution; a dataset with a different size is rejected.
    #[arg(long)]
    pub res: Option<usize>,
}

#[derive(Args)]
pub struct FusionArgs {
    #[arg(long)]
    pub fusion_window: Option<usize>,
    #[arg(long)]
    pub psi_max: Option<f64>,
    #[arg(long)]
    pub epsilon_rel: Option<f64>,
    #[arg(long)]
    pub min_views: Option<usize>,
    /// Use the literal reverse update without clamping the clean estimate.
    #[arg(long)]
    pub no_clip: bool,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also fuse the samples into PLY point clouds.
    #[arg(long)]
    pub ply: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rig JSON to sample with instead of the training rig.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[command(flatten)]
    pub fusion: FusionArgs,
}

#[derive(Args)]
pub struct CompleteArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Normalized depth map (PFM) of the known view.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub view: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ply: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[command(flatten)]
    pub fusion: FusionArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Generated clouds: a container, a PLY file or a directory of PLY files.
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Distances to report (cd, emd); repeatable.
    #[arg(long = "metric")]
    pub metrics: Option<Vec<String>>,
    /// Subsample every cloud to this many points.
    #[arg(long)]
    pub subsample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cross-check against the exhaustive reference implementation.
    #[arg(long)]
    pub oracle: bool,
    /// JSON report path; the report is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sample: Option<usize>,
    /// Apply one round of depth averaging before filtering.
    #[arg(long)]
    pub average: bool,
    #[command(flatten)]
    pub fusion: FusionArgs,
}

#[derive(Args)]
pub struct ExportPlyArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sample: Option<usize>,
    /// Keep only pixels set in the container's stored mask.
    #[arg(long)]
    pub masked: bool,
}

#[derive(Args)]
pub struct ExtractViewArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub view: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    log::debug!("threads = {}", cli.threads);
    let file = cli.config.as_deref();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, file),
        Command::Train(a) => commands::train(a, file),
        Command::Sample(a) => commands::sample(a, file),
        Command::Complete(a) => commands::complete(a, file),
        Command::Eval(a) => commands::eval(a, file),
        Command::Fuse(a) => commands::fuse(a, file),
        Command::ExportPly(a) => commands::export_ply(a, file),
        Command::ExtractView(a) => commands::extract_view(a, file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
