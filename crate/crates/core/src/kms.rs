//! The kernel max-sliced 2-Wasserstein pipeline: assemble, relax, reduce,
//! round to a single direction and recover the projector.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{KmsError, Result};
use crate::kernels::{assemble, GramAssembly, Kernel, PointCloud};
use crate::rankred::{self, ReducedSolution, ReductionMode};
use crate::sdr::{self, rank1_value, ResolvedParams, SdrSolution, SolverConfig};

/// `f(z) = sum_i a_x[i] K(z, x_i) - sum_i a_y[i] K(z, y_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub a_x: DVector<f64>,
    pub a_y: DVector<f64>,
    pub kernel: Kernel,
    pub anchors_x: PointCloud,
    pub anchors_y: PointCloud,
}

impl Projector {
    /// Coefficients `s = U w` of a unit direction `w`.
    pub fn from_direction(
        ga: &GramAssembly,
        w: &DVector<f64>,
        x: &PointCloud,
        y: &PointCloud,
    ) -> Self {
        let n = ga.n();
        let s = ga.factor() * w;
        Self {
            a_x: s.rows(0, n).into_owned(),
            a_y: s.rows(n, n).into_owned(),
            kernel: *ga.kernel(),
            anchors_x: x.clone(),
            anchors_y: y.clone(),
        }
    }

    /// `|f|_H^2 = s^T G s` with `s = (a_x; a_y)`.
    pub fn rkhs_norm_sq(&self) -> f64 {
        let n = self.a_x.len();
        let coef: Vec<f64> = self.a_x.iter().chain(self.a_y.iter()).copied().collect();
        let point = |k: usize| {
            if k < n {
                self.anchors_x.row(k)
            } else {
                self.anchors_y.row(k - n)
            }
        };
        let mut total = 0.0;
        for i in 0..2 * n {
            for j in 0..2 * n {
                let sign = if (i < n) == (j < n) { 1.0 } else { -1.0 };
                total += coef[i] * coef[j] * sign * self.kernel.eval_unchecked(point(i), point(j));
            }
        }
        total
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        let d = self.anchors_x.d();
        if z.len() != d {
            return Err(KmsError::DimensionMismatch {
                expected: d,
                actual: z.len(),
            });
        }
        let plus: f64 = self
            .anchors_x
            .rows()
            .zip(self.a_x.iter())
            .map(|(x, a)| a * self.kernel.eval_unchecked(z, x))
            .sum();
        let minus: f64 = self
            .anchors_y
            .rows()
            .zip(self.a_y.iter())
            .map(|(y, a)| a * self.kernel.eval_unchecked(z, y))
            .sum();
        Ok(plus - minus)
    }

    /// `f` at every row of `cloud`.
    pub fn project(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        cloud.rows().map(|z| self.eval(z)).collect()
    }
}

/// `f(z)` for a projector.
pub fn evaluate_projector(p: &Projector, z: &[f64]) -> Result<f64> {
    p.eval(z)
}

/// `(mean |u_(i) - v_(i)|^p)^(1/p)` over the sorted samples: the
/// p-Wasserstein distance between two uniform empirical measures on R.
pub fn projected_wasserstein_p(u: &[f64], v: &[f64], p: f64) -> Result<f64> {
    if u.is_empty() {
        return Err(KmsError::InvalidParameter("empty sample".into()));
    }
    if u.len() != v.len() {
        return Err(KmsError::SampleSizeMismatch {
            nx: u.len(),
            ny: v.len(),
        });
    }
    if !(p >= 1.0) || !p.is_finite() {
        return Err(KmsError::InvalidParameter(format!(
            "order p must be >= 1, got {p}"
        )));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(KmsError::InvalidParameter(
            "non-finite projected value".into(),
        ));
    }
    let mut a = u.to_vec();
    let mut b = v.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    let mean = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs().powf(p))
        .sum::<f64>()
        / n;
    Ok(mean.powf(1.0 / p))
}

/// Pipeline settings.
#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct KmsConfig {
    pub solver: SolverConfig,
    pub reduction: ReductionMode,
}


impl KmsConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.solver.seed = seed;
        self
    }
}

/// Solver bookkeeping attached to a [`KmsResult`].
#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    pub params: ResolvedParams,
    pub iterations: usize,
    /// Certified upper bound on the relaxation value.
    pub sdr_upper_bound: f64,
    pub rank_before_reduction: usize,
    pub reduction_loops: usize,
    pub reduction_pivots: usize,
    /// `F` at the reduced matrix.
    pub reduced_value: f64,
    /// Where the rank-one direction came from.
    pub direction_source: DirectionSource,
    pub jitter: f64,
    pub c_bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSource {
    /// Top eigenvector of the rank-reduced matrix.
    Reduced,
    /// Top eigenvector of the averaged mirror-ascent iterate.
    Averaged,
}

/// Output of [`kms2`].
#[derive(Clone, Debug)]
pub struct KmsResult {
    /// `sqrt(value)`.
    pub distance: f64,
    /// Squared projected 2-Wasserstein distance of the extracted direction.
    pub value: f64,
    /// `F` at the averaged relaxation iterate.
    pub sdr_value: f64,
    /// Rank of the reduced relaxation solution.
    pub rank: usize,
    pub k_bound: usize,
    pub n: usize,
    pub d: usize,
    pub kernel: Kernel,
    pub seed: u64,
    /// Unit direction in the transformed coordinates.
    pub direction: DVector<f64>,
    pub projector: Projector,
    pub diagnostics: Diagnostics,
}

impl KmsResult {
    /// Projected samples `f(x_i)`, `f(y_j)` on the anchors.
    pub fn projected(&self, ga: &GramAssembly) -> (Vec<f64>, Vec<f64>) {
        ga.projections(&self.direction)
    }
}

/// Intermediate products of the pipeline, for callers that want to inspect
/// them.
pub struct Pipeline {
    pub assembly: GramAssembly,
    pub sdr: SdrSolution,
    pub reduced: ReducedSolution,
    pub result: KmsResult,
}

/// Squared kernel max-sliced 2-Wasserstein estimate between `x` and `y`.
pub fn kms2(x: &PointCloud, y: &PointCloud, kernel: &Kernel, cfg: &KmsConfig) -> Result<KmsResult> {
    Ok(kms2_pipeline(x, y, kernel, cfg)?.result)
}

/// Max-sliced 2-Wasserstein: [`kms2`] with the dot-product kernel.
pub fn ms2(x: &PointCloud, y: &PointCloud, cfg: &KmsConfig) -> Result<KmsResult> {
    kms2(x, y, &Kernel::DotProduct, cfg)
}

pub fn kms2_pipeline(
    x: &PointCloud,
    y: &PointCloud,
    kernel: &Kernel,
    cfg: &KmsConfig,
) -> Result<Pipeline> {
    let ga = assemble(kernel, x, y)?;
    kms2_assembled(ga, x, y, cfg)
}

/// Run the pipeline on an existing assembly of `x` and `y`.
pub fn kms2_assembled(
    ga: GramAssembly,
    x: &PointCloud,
    y: &PointCloud,
    cfg: &KmsConfig,
) -> Result<Pipeline> {
    let sdr = sdr::solve_sdr(&ga, &cfg.solver)?;
    let reduced = rankred::reduce(&sdr.s_avg, &ga, cfg.reduction)?;

    let mut best = (
        rank1_value(&ga, &canonical_sign(reduced.top_direction())),
        canonical_sign(reduced.top_direction()),
        DirectionSource::Reduced,
    );
    let (_, top_avg) = crate::linalg::top_eigenpair(sdr.s_avg.matrix())?;
    let top_avg = canonical_sign(top_avg);
    let avg_value = rank1_value(&ga, &top_avg);
    if avg_value > best.0 {
        best = (avg_value, top_avg, DirectionSource::Averaged);
    }
    let (value, direction, source) = best;
    let projector = Projector::from_direction(&ga, &direction, x, y);
    let result = KmsResult {
        distance: value.max(0.0).sqrt(),
        value,
        sdr_value: sdr.value,
        rank: reduced.rank,
        k_bound: reduced.k_bound,
        n: ga.n(),
        d: x.d(),
        kernel: *ga.kernel(),
        seed: cfg.solver.seed,
        direction,
        projector,
        diagnostics: Diagnostics {
            params: sdr.params,
            iterations: sdr.iterations,
            sdr_upper_bound: sdr.upper_bound,
            rank_before_reduction: reduced.rank_before,
            reduction_loops: reduced.loops,
            reduction_pivots: reduced.pivots,
            reduced_value: reduced.value,
            direction_source: source,
            jitter: ga.jitter(),
            c_bound: ga.c_bound(),
        },
    };
    Ok(Pipeline {
        assembly: ga,
        sdr,
        reduced,
        result,
    })
}

/// Flip `w` so its largest-magnitude entry is positive.
fn canonical_sign(mut w: DVector<f64>) -> DVector<f64> {
    let lead = w
        .iter()
        .copied()
        .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
    if lead < 0.0 {
        w.neg_mut();
    }
    w
}
