use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kms_core::kernels::{Bandwidth, BandwidthConvention, KernelSpec};
use kms_core::kms::KmsConfig;
use kms_core::rankred::ReductionMode;
use kms_core::sdr::{Accuracy, ScaleRule, SolverConfig};

#[derive(Debug, Parser)]
#[command(
    name = "kms",
    version,
    about = "Kernel max-sliced Wasserstein distances and two-sample tests"
)]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true, value_parser = positive_usize)]
    pub threads: Option<usize>,
    /// Add wall-clock timings to JSON output. Timings vary between runs, so
    /// they are off by default to keep outputs reproducible.
    #[arg(long, global = true)]
    pub timings: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the distance between two samples.
    Distance(DistanceArgs),
    /// Two-sample test.
    Test(TestArgs),
    /// Compare solution ranks before and after reduction with the bound.
    Rankcheck(RankcheckArgs),
    /// Mean distance against sample size under the null, with a log-log slope.
    Sweep(SweepArgs),
    /// Write the two samples of a dataset spec as CSV files.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelKind {
    Gaussian,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    /// exp(-|x - y|^2 / (2 sigma^2))
    TwoSigmaSquared,
    /// exp(-|x - y|^2 / sigma^2)
    SigmaSquared,
}

#[derive(Debug, Args)]
pub struct KernelArgs {
    /// Kernel (default: gaussian, or dot for `sweep`).
    #[arg(long, value_enum)]
    pub kernel: Option<KernelKind>,
    /// Fixed gaussian bandwidth.
    #[arg(long, value_parser = positive_f64, conflicts_with = "median")]
    pub sigma: Option<f64>,
    /// Median-heuristic bandwidth (the default).
    #[arg(long)]
    pub median: bool,
    #[arg(long, value_enum, default_value_t = ConventionArg::TwoSigmaSquared)]
    pub convention: ConventionArg,
}

impl KernelArgs {
    pub fn spec(&self, default: KernelKind) -> KernelSpec {
        match self.kernel.unwrap_or(default) {
            KernelKind::Dot => KernelSpec::DotProduct,
            KernelKind::Gaussian => KernelSpec::Gaussian {
                bandwidth: self.sigma.map_or(Bandwidth::Median, Bandwidth::Fixed),
                convention: match self.convention {
                    ConventionArg::TwoSigmaSquared => BandwidthConvention::TwoSigmaSquared,
                    ConventionArg::SigmaSquared => BandwidthConvention::SigmaSquared,
                },
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Spectral,
    Bound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReductionArg {
    Fixed,
    Guarded,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Relaxation accuracy, relative to the objective's scale.
    #[arg(long, value_parser = positive_f64, default_value_t = 0.01)]
    pub delta: f64,
    /// Read --delta as an absolute accuracy.
    #[arg(long)]
    pub absolute: bool,
    /// Iteration cap for mirror ascent; 0 runs the full worst-case recipe.
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long, value_enum, default_value_t = ScaleArg::Spectral)]
    pub scale: ScaleArg,
    #[arg(long, value_enum, default_value_t = ReductionArg::Fixed)]
    pub reduction: ReductionArg,
}

impl SolverArgs {
    pub fn config(&self, seed: u64) -> KmsConfig {
        let solver = SolverConfig {
            accuracy: if self.absolute {
                Accuracy::Absolute(self.delta)
            } else {
                Accuracy::Relative(self.delta)
            },
            scale: match self.scale {
                ScaleArg::Spectral => ScaleRule::Spectral,
                ScaleArg::Bound => ScaleRule::Bound,
            },
            max_iterations: (self.max_iter > 0).then_some(self.max_iter),
            ..SolverConfig::default()
        };
        KmsConfig {
            solver,
            reduction: match self.reduction {
                ReductionArg::Fixed => ReductionMode::Fixed,
                ReductionArg::Guarded => ReductionMode::Guarded,
            },
        }
        .with_seed(seed)
    }
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    /// CSV of the first sample, one point per line.
    pub x: PathBuf,
    /// CSV of the second sample.
    pub y: PathBuf,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TestMode {
    /// Train/test split with a permutation null.
    Bootstrap,
    /// Compare the distance with the finite-sample critical value.
    Theorem,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    pub x: PathBuf,
    pub y: PathBuf,
    #[arg(long, value_parser = unit_interval, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_parser = positive_usize, default_value_t = 500)]
    pub permutations: usize,
    #[arg(long, value_enum, default_value_t = TestMode::Bootstrap)]
    pub mode: TestMode,
    /// Wasserstein order of the statistic.
    #[arg(long, value_parser = order_p, default_value_t = 2.0)]
    pub p: f64,
    /// Universal constant of the critical value (theorem mode).
    #[arg(long, default_value_t = 1.0)]
    pub c_univ: f64,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankcheckArgs {
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', value_parser = positive_usize, required = true)]
    pub n_list: Vec<usize>,
    /// Dataset kind, or a JSON object with `kind` and parameters.
    #[arg(long, default_value = "gauss_mixture")]
    pub dataset: String,
    #[arg(long, value_parser = positive_usize, default_value_t = 1)]
    pub trials: usize,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Dataset kind, or a JSON object with `kind` and parameters.
    #[arg(long, default_value = "two_point_1d")]
    pub dataset: String,
    /// Comma-separated sample sizes (at least two).
    #[arg(long, value_delimiter = ',', value_parser = positive_usize, required = true)]
    pub sizes: Vec<usize>,
    #[arg(long, value_parser = positive_usize, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, value_parser = order_p, default_value_t = 2.0)]
    pub p: f64,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-trial CSV (n, trial, statistic).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// JSON summary (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON dataset spec, e.g. {"kind": "circle", "n": 100, "seed": 1}.
    #[arg(long)]
    pub spec: PathBuf,
    /// Writes `<prefix>_x.csv` and `<prefix>_y.csv`.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("expected a number in (0, 1), got {s:?}")),
    }
}

fn order_p(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 1.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected an order p >= 1, got {s:?}")),
    }
}
