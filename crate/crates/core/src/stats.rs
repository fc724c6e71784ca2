//! Two-sample tests and the sample-complexity sweep.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::datagen::{generate, Dataset, DatasetSpec};
use crate::error::{KmsError, Result};
use crate::kernels::{Kernel, KernelSpec, PointCloud};
use crate::kms::{kms2, projected_wasserstein_p, KmsConfig, KmsResult};
use crate::rng::{child_seed, stream, Stream};

/// Inputs of the finite-sample critical value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CriticalValueParams {
    /// Kernel bound `A >= sqrt(K(z, z))`.
    pub a: f64,
    /// Universal constant `C >= 1`.
    pub c_univ: f64,
    /// Wasserstein order `p >= 1`.
    pub p: f64,
    /// Level in `(0, 1)`.
    pub alpha: f64,
}

impl CriticalValueParams {
    pub fn new(a: f64, p: f64, alpha: f64) -> Self {
        Self {
            a,
            c_univ: 1.0,
            p,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KmsError::InvalidParameter(m));
        if !(self.a > 0.0 && self.a.is_finite()) {
            return bad(format!("kernel bound must be positive, got {}", self.a));
        }
        if !(self.c_univ >= 1.0 && self.c_univ.is_finite()) {
            return bad(format!(
                "universal constant must be at least 1, got {}",
                self.c_univ
            ));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return bad(format!("order p must be at least 1, got {}", self.p));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        Ok(())
    }
}

/// `4 A (C + 4 sqrt(ln(2/alpha)))^(1/p) n^(-1/(2p))`.
pub fn critical_value(n: usize, params: &CriticalValueParams) -> Result<f64> {
    params.validate()?;
    if n == 0 {
        return Err(KmsError::InvalidParameter(
            "sample size must be positive".into(),
        ));
    }
    let p = params.p;
    let inner = params.c_univ + 4.0 * (2.0 / params.alpha).ln().sqrt();
    Ok(4.0 * params.a * inner.powf(1.0 / p) * (n as f64).powf(-1.0 / (2.0 * p)))
}

/// Outcome of a test.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub threshold: f64,
    pub reject: bool,
    pub permutation_stats: Vec<f64>,
    pub p_value: f64,
}

/// Settings of the permutation test.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationTestConfig {
    pub alpha: f64,
    pub permutations: usize,
    /// Order of the projected Wasserstein statistic.
    pub p: f64,
    pub kms: KmsConfig,
}

impl Default for PermutationTestConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            permutations: 500,
            p: 2.0,
            kms: KmsConfig::default(),
        }
    }
}

/// A permutation test together with the fitted projector.
#[derive(Clone, Debug)]
pub struct PermutationTestOutcome {
    pub result: TestResult,
    pub fit: KmsResult,
    /// The kernel after resolving the bandwidth on the training half.
    pub kernel: Kernel,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(KmsError::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Random halves of `0..n`: the first `n / 2` shuffled indices train, the
/// rest test.
fn split(n: usize, rng: &mut rand_chacha::ChaCha20Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let test = idx.split_off(n / 2);
    (idx, test)
}

/// Train/test permutation test.
///
/// Each sample is split in half at random; the projector is fitted on the
/// training halves, the statistic is the projected Wasserstein distance of
/// the test halves, and its null distribution comes from reshuffling the
/// pooled projected test values `permutations` times.
pub fn two_sample_test(
    x: &PointCloud,
    y: &PointCloud,
    kernel: &KernelSpec,
    cfg: &PermutationTestConfig,
    seed: u64,
) -> Result<PermutationTestOutcome> {
    check_alpha(cfg.alpha)?;
    if x.n() != y.n() {
        return Err(KmsError::SampleSizeMismatch {
            nx: x.n(),
            ny: y.n(),
        });
    }
    if x.n() < 4 {
        return Err(KmsError::InvalidParameter(format!(
            "need at least 4 points per sample to split, got {}",
            x.n()
        )));
    }
    if cfg.permutations == 0 {
        return Err(KmsError::InvalidParameter(
            "need at least one permutation".into(),
        ));
    }
    let mut split_rng = stream(seed, Stream::Split);
    let (x_tr, x_te) = split(x.n(), &mut split_rng);
    let (y_tr, y_te) = split(y.n(), &mut split_rng);
    let (x_train, x_test) = (x.select(&x_tr)?, x.select(&x_te)?);
    let (y_train, y_test) = (y.select(&y_tr)?, y.select(&y_te)?);

    let k = kernel.resolve(&x_train, &y_train)?;
    let kms_cfg = cfg.kms.clone().with_seed(seed);
    let fit = kms2(&x_train, &y_train, &k, &kms_cfg)?;
    let fx = fit.projector.project(&x_test)?;
    let fy = fit.projector.project(&y_test)?;
    let statistic = projected_wasserstein_p(&fx, &fy, cfg.p)?;

    let m = fx.len();
    let mut pooled: Vec<f64> = fx.iter().chain(&fy).copied().collect();
    let mut perm_rng = stream(seed, Stream::Permutation);
    let mut permutation_stats = Vec::with_capacity(cfg.permutations);
    for _ in 0..cfg.permutations {
        pooled.shuffle(&mut perm_rng);
        permutation_stats.push(projected_wasserstein_p(&pooled[..m], &pooled[m..], cfg.p)?);
    }
    let result = permutation_decision(statistic, permutation_stats, cfg.alpha);
    Ok(PermutationTestOutcome {
        result,
        fit,
        kernel: k,
    })
}

/// Threshold at the `ceil((1 - alpha) L)`-th smallest permutation statistic,
/// p-value `(1 + #{perm >= stat}) / (L + 1)`.
pub fn permutation_decision(statistic: f64, permutation_stats: Vec<f64>, alpha: f64) -> TestResult {
    let l = permutation_stats.len();
    let mut sorted = permutation_stats.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = (((1.0 - alpha) * l as f64).ceil() as usize).clamp(1, l);
    let threshold = sorted[rank - 1];
    let exceed = permutation_stats
        .iter()
        .filter(|&&s| s >= statistic)
        .count();
    TestResult {
        statistic,
        threshold,
        reject: statistic > threshold,
        p_value: (1 + exceed) as f64 / (l + 1) as f64,
        permutation_stats,
    }
}

/// A test against the finite-sample critical value.
#[derive(Clone, Debug)]
pub struct TheoremTestOutcome {
    pub result: TestResult,
    pub fit: KmsResult,
}

/// Reject when the estimated distance exceeds the critical value. For
/// `p = 2` the statistic is the pipeline's distance; for other `p` it is the
/// projected `p`-Wasserstein distance under the fitted direction.
pub fn theorem_test(
    x: &PointCloud,
    y: &PointCloud,
    kernel: &Kernel,
    params: &CriticalValueParams,
    kms_cfg: &KmsConfig,
) -> Result<TheoremTestOutcome> {
    params.validate()?;
    let fit = kms2(x, y, kernel, kms_cfg)?;
    let statistic = if params.p == 2.0 {
        fit.distance
    } else {
        let fx = fit.projector.project(x)?;
        let fy = fit.projector.project(y)?;
        projected_wasserstein_p(&fx, &fy, params.p)?
    };
    let threshold = critical_value(x.n(), params)?;
    Ok(TheoremTestOutcome {
        result: TestResult {
            statistic,
            threshold,
            reject: statistic > threshold,
            permutation_stats: Vec::new(),
            p_value: if statistic > threshold { 0.0 } else { 1.0 },
        },
        fit,
    })
}

/// How sweep statistics were computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPath {
    /// The relaxation pipeline (`p = 2`).
    Relaxation,
    /// Projected `p`-Wasserstein under the direction fitted for `p = 2`.
    FittedProjection,
    /// One-dimensional data with the dot-product kernel: the distance is the
    /// classical Wasserstein distance of the raw samples.
    Analytic1d,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub trial: usize,
    pub statistic: f64,
}

/// Output of [`rate_sweep`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub sizes: Vec<usize>,
    pub means: Vec<f64>,
    /// Least-squares slope of `ln(mean)` against `ln(n)`; `None` when some
    /// mean is not positive.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// Standard error of the slope (`None` with fewer than three sizes).
    pub slope_se: Option<f64>,
    pub degenerate: bool,
    pub path: SweepPath,
    pub p: f64,
}

/// Settings of [`rate_sweep`].
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub dataset: Dataset,
    pub kernel: KernelSpec,
    pub p: f64,
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub kms: KmsConfig,
}

/// Mean estimated distance per sample size and the fitted log-log slope.
///
/// Trial `t` at size index `s` uses seed `child_seed(seed, s * trials + t)`
/// for both data and solver, so results do not depend on scheduling.
pub fn rate_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    if cfg.sizes.len() < 2 {
        return Err(KmsError::InvalidParameter(
            "a slope needs at least two sizes".into(),
        ));
    }
    if cfg.trials == 0 {
        return Err(KmsError::InvalidParameter("need at least one trial".into()));
    }
    if !(cfg.p >= 1.0 && cfg.p.is_finite()) {
        return Err(KmsError::InvalidParameter(format!(
            "order p must be at least 1, got {}",
            cfg.p
        )));
    }
    if let Some(&bad) = cfg.sizes.iter().find(|&&n| n < 1) {
        return Err(KmsError::InvalidParameter(format!(
            "invalid sample size {bad}"
        )));
    }
    let probe = DatasetSpec::new(cfg.dataset.clone(), 1, 0);
    probe.validate()?;
    let one_dim_linear = probe.dim() == 1 && cfg.kernel == KernelSpec::DotProduct;
    let path = if cfg.p == 2.0 {
        SweepPath::Relaxation
    } else if one_dim_linear {
        SweepPath::Analytic1d
    } else {
        SweepPath::FittedProjection
    };

    let jobs: Vec<(usize, usize, usize)> = cfg
        .sizes
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| (0..cfg.trials).map(move |t| (s, n, t)))
        .collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(s, n, t)| {
            let seed = child_seed(cfg.seed, (s * cfg.trials + t) as u64);
            let spec = DatasetSpec::new(cfg.dataset.clone(), n, seed);
            let (x, y) = generate(&spec)?;
            let statistic = sweep_statistic(&x, &y, cfg, path, seed)?;
            Ok(SweepRow {
                n,
                trial: t,
                statistic,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let means: Vec<f64> = cfg
        .sizes
        .iter()
        .enumerate()
        .map(|(s, _)| {
            let chunk = &rows[s * cfg.trials..(s + 1) * cfg.trials];
            chunk.iter().map(|r| r.statistic).sum::<f64>() / cfg.trials as f64
        })
        .collect();
    let degenerate = means.iter().any(|&m| !(m > 1e-12));
    let (slope, intercept, slope_se) = if degenerate {
        (None, None, None)
    } else {
        let xs: Vec<f64> = cfg.sizes.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = means.iter().map(|m| m.ln()).collect();
        let (b, a, se) = least_squares(&xs, &ys);
        (Some(b), Some(a), se)
    };
    Ok(SweepResult {
        rows,
        sizes: cfg.sizes.clone(),
        means,
        slope,
        intercept,
        slope_se,
        degenerate,
        path,
        p: cfg.p,
    })
}

fn sweep_statistic(
    x: &PointCloud,
    y: &PointCloud,
    cfg: &SweepConfig,
    path: SweepPath,
    seed: u64,
) -> Result<f64> {
    if path == SweepPath::Analytic1d {
        return projected_wasserstein_p(x.as_slice(), y.as_slice(), cfg.p);
    }
    let kernel = cfg.kernel.resolve(x, y)?;
    let fit = match kms2(x, y, &kernel, &cfg.kms.clone().with_seed(seed)) {
        Ok(fit) => fit,
        // both samples concentrated at the origin: every projection vanishes
        Err(KmsError::Degenerate(_)) if kernel == Kernel::DotProduct => return Ok(0.0),
        Err(e) => return Err(e),
    };
    if path == SweepPath::Relaxation {
        return Ok(fit.distance);
    }
    let fx = fit.projector.project(x)?;
    let fy = fit.projector.project(y)?;
    projected_wasserstein_p(&fx, &fy, cfg.p)
}

/// Slope, intercept and slope standard error of `y = a + b x`.
fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, Option<f64>) {
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let se = (xs.len() > 2).then(|| {
        let rss: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (y - a - b * x).powi(2))
            .sum();
        (rss / (m - 2.0) / sxx).sqrt()
    });
    (b, a, se)
}
