//! Command-line driver. `dispatch` parses argv, runs one subcommand and
//! maps the outcome to an exit code: 0 success, 1 invalid usage or
//! options, 2 runtime failure.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use depthseg::pseudolabel::{Polarity, ThresholdRule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Raised for option values that parse but are out of range. Reported with
/// exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

pub(crate) fn ensure(ok: bool, msg: impl FnOnce() -> String) -> anyhow::Result<()> {
    if ok { Ok(()) } else { Err(Invalid(msg()).into()) }
}

#[derive(Debug, Parser)]
#[command(name = "depthseg", version, about = "Depth-guided crop pseudo-labelling toolkit")]
pub struct Cli {
    /// Log filter: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn depth maps into binary crop masks.
    Pseudolabel(PseudolabelArgs),
    /// Build trimaps from pseudo-masks and model predictions.
    Trimap(TrimapArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Coverage histogram and status counts for a manifest.
    Stats(StatsArgs),
    /// Two-stage self-training on a manifest.
    Selftrain(SelftrainArgs),
    /// Compare analytic and numeric gradients of the upsampling operator.
    FadeCheck(FadeCheckArgs),
    /// Run the screening service.
    Serve(ServeArgs),
    /// Write a synthetic two-plane corpus with known ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PseudolabelArgs {
    /// Directory of depth rasters (.pgm, .pfm, .png).
    #[arg(long)]
    pub depth_dir: PathBuf,
    /// Optional RGB images with matching file stems; only dimensions are checked.
    #[arg(long)]
    pub rgb_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub bins: usize,
    /// Gradient weight in the histogram.
    #[arg(long, default_value_t = 1000.0)]
    pub lambda: f64,
    /// Exponent applied to the normalized gradient in the histogram weight.
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    /// Gaussian sigma applied before the histogram is built; 0 disables it.
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f64,
    #[arg(long, default_value = "max-curvature-auto", value_parser = parse_rule)]
    pub rule: ThresholdRule,
    #[arg(long, default_value = "closer-is-larger", value_parser = parse_polarity)]
    pub polarity: Polarity,
    #[arg(long, default_value_t = 1.0)]
    pub p_lo: f64,
    #[arg(long, default_value_t = 99.0)]
    pub p_hi: f64,
    /// Worker threads; defaults to available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrimapArgs {
    /// Pseudo-mask file or directory.
    #[arg(long)]
    pub pseudo: PathBuf,
    /// Prediction file or directory, paired with `--pseudo` by file stem.
    #[arg(long)]
    pub pred: PathBuf,
    /// Output file, or directory when the inputs are directories.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted mask file or directory.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth file or directory (0, 1, 255 = ignore).
    #[arg(long)]
    pub gt: PathBuf,
    /// Boundary band radius in pixels; defaults to 2% of each image diagonal.
    #[arg(long)]
    pub biou_radius: Option<usize>,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Row label in the printed table.
    #[arg(long, default_value = "depthseg")]
    pub method: String,
    /// Column label in the printed table.
    #[arg(long, default_value = "Test")]
    pub subset: String,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Replay this screening journal before counting.
    #[arg(long)]
    pub journal: Option<PathBuf>,
    /// Write JSON here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON file receiving both stage reports.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2.0)]
    pub lr: f64,
    /// Seeds the per-image pixel subsampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Supervised pixels sampled per image; 0 uses all of them.
    #[arg(long, default_value_t = 4096)]
    pub max_pixels: usize,
    #[arg(long, default_value = "closer-is-larger", value_parser = parse_polarity)]
    pub polarity: Polarity,
}

#[derive(Debug, Args)]
pub struct FadeCheckArgs {
    #[arg(long, default_value_t = 3)]
    pub c: usize,
    #[arg(long, default_value_t = 16)]
    pub cm: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub h: usize,
    #[arg(long, default_value_t = 4)]
    pub w: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Exit with a runtime failure when any relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub journal: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Mask tint opacity in overlays.
    #[arg(long, default_value_t = depthseg_review::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value = "closer-is-larger", value_parser = parse_polarity)]
    pub polarity: Polarity,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub train: usize,
    #[arg(long, default_value_t = 10)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of pixels flipped in the train pseudo-masks.
    #[arg(long, default_value_t = 0.2)]
    pub flip: f64,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

fn parse_rule(s: &str) -> Result<ThresholdRule, String> {
    s.parse()
}

fn parse_polarity(s: &str) -> Result<Polarity, String> {
    s.parse()
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).try_init();
    match commands::run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() { EXIT_INVALID } else { EXIT_RUNTIME }
        }
    }
}
