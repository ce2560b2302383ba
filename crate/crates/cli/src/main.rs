//! `voxsynth` — volumetric cross-modal synthesis pipeline: phantom data
//! generation, training for both synthesis methods, volume synthesis, metric
//! evaluation, and the downstream classification experiment.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{resolve_common, CommonSettings, Resolver};
use voxsynth::error::Result;

#[derive(Parser)]
#[command(
    name = "voxsynth",
    version,
    about = "Volumetric cross-modal synthesis toolkit",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset with a known input→target map
    Phantom(PhantomArgs),
    /// Train a synthesis model and write checkpoint plus training log
    Train(TrainArgs),
    /// Apply a trained checkpoint to every input volume in a dataset
    Synthesize(SynthesizeArgs),
    /// Score predictions against targets (MAE, PSNR, SSIM, optional ROI table)
    Evaluate(EvaluateArgs),
    /// Run the four-column classification experiment with a paired t-test
    Classify(ClassifyArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// key=value config file; explicit flags override its entries
    #[arg(long, global = false)]
    pub config: Option<PathBuf>,
    /// Master seed for all randomness in this run
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-subject parallel stages
    #[arg(long)]
    pub threads: Option<usize>,
    /// Require the bit-exact deterministic configuration (single thread)
    #[arg(long)]
    pub strict: bool,
    /// Scale profile: 'desk' (32³, depth 3, base 8) or 'paper' (64³, depth 4, base 32)
    #[arg(long)]
    pub profile: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(&self, resolver: &Resolver) -> Result<CommonSettings> {
        resolve_common(
            resolver,
            self.seed,
            self.threads,
            self.strict,
            self.profile.clone(),
            self.out.clone(),
        )
    }
}

#[derive(Args)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of subjects
    #[arg(long)]
    pub n: Option<usize>,
    /// Cubic volume edge length in voxels
    #[arg(long)]
    pub size: Option<usize>,
    /// Generator mode: 'local' or 'nonlocal'
    #[arg(long)]
    pub mode: Option<String>,
    /// Class-effect amplitude in [0, 1]
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Class balance: 'strict' (even n required) or 'loose'
    #[arg(long)]
    pub balance: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Synthesis method: 'unet' or 'patch'
    #[arg(long)]
    pub method: Option<String>,
    /// Dataset manifest path
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Total target epochs (a resumed run trains the remainder)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training loss: 'bce' or 'mse'
    #[arg(long)]
    pub loss: Option<String>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// U-Net depth (defaults to the profile's)
    #[arg(long)]
    pub depth: Option<usize>,
    /// U-Net base channels (defaults to the profile's)
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Use a k-fold rotation split instead of the tail holdout
    #[arg(long)]
    pub folds: Option<usize>,
    /// Which rotation round to train (with --folds)
    #[arg(long)]
    pub fold: Option<usize>,
    /// Tail-holdout validation subject count (without --folds)
    #[arg(long)]
    pub val_count: Option<usize>,
    /// Continue training from an existing checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Patch method: random window centers per volume per epoch
    #[arg(long)]
    pub centers: Option<usize>,
    /// Patch method: windows per optimizer step
    #[arg(long)]
    pub batch: Option<usize>,
    /// Patch method: fixed validation windows per volume
    #[arg(long)]
    pub val_patches: Option<usize>,
}

#[derive(Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trained checkpoint (either method)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest providing the input volumes
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Patch method: reconstruction stride (1..=3)
    #[arg(long)]
    pub stride: Option<usize>,
    /// Also export mid-slice PGM triplets (axial and sagittal views)
    #[arg(long)]
    pub slices: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory of `<id>_synth.rvol` predictions
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Dataset manifest providing the targets
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Peak intensity for PSNR
    #[arg(long)]
    pub max_intensity: Option<f64>,
    /// Integer label volume (RVOL) for ROI metrics
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// ROI list as 'id=name,id=name'; defaults to every nonzero label
    #[arg(long)]
    pub roi: Option<String>,
}

#[derive(Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset manifest with class labels
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of `<id>_synth.rvol` synthesized volumes
    #[arg(long)]
    pub synth: Option<PathBuf>,
    /// Fold count for the stratified rotation
    #[arg(long)]
    pub k: Option<usize>,
    /// Feature grid: block-mean blocks per axis
    #[arg(long)]
    pub grid: Option<usize>,
    /// Ridge penalty grid as comma-separated values
    #[arg(long)]
    pub lambdas: Option<String>,
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(args) => commands::run_phantom(args),
        Command::Train(args) => commands::run_train(args),
        Command::Synthesize(args) => commands::run_synthesize(args),
        Command::Evaluate(args) => commands::run_evaluate(args),
        Command::Classify(args) => commands::run_classify(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let first = e.to_string();
                let line = first.lines().next().unwrap_or("invalid command line");
                eprintln!("ERROR:config:{line}");
                return ExitCode::from(2);
            }
            // --help / --version render on stdout and exit cleanly.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR:{}:{e}", e.category());
            ExitCode::FAILURE
        }
    }
}
