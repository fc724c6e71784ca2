//! Kernels, point clouds and the gram-matrix assembly behind the KMS program.
//!
//! For samples `x_1..x_n` and `y_1..y_n` the signed gram matrix is
//!
//! ```text
//! G = [ K(x,x)  -K(x,y) ]
//!     [ -K(y,x)  K(y,y) ]
//! ```
//!
//! and a factor `U` with `G^-1 = U U^T` turns the RKHS-norm constraint into
//! the unit sphere. The difference vectors `M'_{ij}` are the sums of two
//! columns of `G` (`G e_i + G e_{n+j}`), so the transformed vectors split as
//! `M_{ij} = a_i + b_j` with `a_i = U^T G e_i` and `b_j = U^T G e_{n+j}`.
//! Only the `2 x n` vectors `a_i`, `b_j` are stored; every `M_{ij}` is
//! rebuilt on demand.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KmsError, Result};
use crate::linalg::{sym_eigen, SymEigen};
use crate::ot::CostMatrix;

/// How the gaussian bandwidth enters the exponent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthConvention {
    /// `exp(-|x-y|^2 / (2 sigma^2))`
    #[default]
    TwoSigmaSquared,
    /// `exp(-|x-y|^2 / sigma^2)`
    SigmaSquared,
}

/// A positive definite kernel on R^d.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Gaussian {
        bandwidth: f64,
        convention: BandwidthConvention,
    },
    DotProduct,
}

impl Kernel {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::gaussian_with(bandwidth, BandwidthConvention::default())
    }

    pub fn gaussian_with(bandwidth: f64, convention: BandwidthConvention) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(KmsError::InvalidParameter(format!(
                "gaussian bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Kernel::Gaussian {
            bandwidth,
            convention,
        })
    }

    /// `K(x, y)`; errors on a dimension mismatch or an invalid bandwidth.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(KmsError::DimensionMismatch {
                expected: x.len(),
                actual: y.len(),
            });
        }
        if let Kernel::Gaussian { bandwidth, .. } = self {
            if !(*bandwidth > 0.0) {
                return Err(KmsError::InvalidParameter(format!(
                    "gaussian bandwidth must be positive, got {bandwidth}"
                )));
            }
        }
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            Kernel::Gaussian {
                bandwidth,
                convention,
            } => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let denom = match convention {
                    BandwidthConvention::TwoSigmaSquared => 2.0 * bandwidth * bandwidth,
                    BandwidthConvention::SigmaSquared => bandwidth * bandwidth,
                };
                (-sq / denom).exp()
            }
            Kernel::DotProduct => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        }
    }

    /// The constant `A` with `sqrt(K(z, z)) <= A` over the given samples.
    /// Exactly 1 for the gaussian kernel; the largest norm for dot products.
    pub fn bound(&self, clouds: &[&PointCloud]) -> f64 {
        match self {
            Kernel::Gaussian { .. } => 1.0,
            Kernel::DotProduct => clouds
                .iter()
                .flat_map(|c| c.rows())
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Gaussian { .. } => "gaussian",
            Kernel::DotProduct => "dot_product",
        }
    }
}

/// Bandwidth choice for a gaussian kernel that is resolved against data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled samples.
    Median,
    Fixed(f64),
}

/// A kernel whose bandwidth may still depend on the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Gaussian {
        bandwidth: Bandwidth,
        convention: BandwidthConvention,
    },
    DotProduct,
}

impl KernelSpec {
    pub fn gaussian_median() -> Self {
        KernelSpec::Gaussian {
            bandwidth: Bandwidth::Median,
            convention: BandwidthConvention::default(),
        }
    }

    pub fn resolve(&self, x: &PointCloud, y: &PointCloud) -> Result<Kernel> {
        match *self {
            KernelSpec::DotProduct => Ok(Kernel::DotProduct),
            KernelSpec::Gaussian {
                bandwidth,
                convention,
            } => {
                let sigma = match bandwidth {
                    Bandwidth::Fixed(s) => s,
                    Bandwidth::Median => median_bandwidth(x, y)?,
                };
                Kernel::gaussian_with(sigma, convention)
            }
        }
    }
}

impl From<Kernel> for KernelSpec {
    fn from(k: Kernel) -> Self {
        match k {
            Kernel::Gaussian {
                bandwidth,
                convention,
            } => KernelSpec::Gaussian {
                bandwidth: Bandwidth::Fixed(bandwidth),
                convention,
            },
            Kernel::DotProduct => KernelSpec::DotProduct,
        }
    }
}

/// `n` points in R^d, stored row-major. Every point carries weight `1/n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl PointCloud {
    pub fn new(data: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if n == 0 {
            return Err(KmsError::InvalidParameter(
                "point cloud needs at least one point".into(),
            ));
        }
        if d == 0 {
            return Err(KmsError::InvalidParameter(
                "point dimension must be positive".into(),
            ));
        }
        if data.len() != n * d {
            return Err(KmsError::DimensionMismatch {
                expected: n * d,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(KmsError::InvalidParameter(format!(
                "non-finite coordinate in row {}",
                pos / d
            )));
        }
        Ok(Self { data, n, d })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(KmsError::DimensionMismatch {
                expected: d,
                actual: bad.len(),
            });
        }
        Self::new(rows.concat(), n, d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The cloud made of the listed rows, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::new(data, idx.len(), self.d)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &PointCloud) -> Result<Self> {
        if self.d != other.d {
            return Err(KmsError::DimensionMismatch {
                expected: self.d,
                actual: other.d,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(data, self.n + other.n, self.d)
    }
}

/// Median of the Euclidean distances over all unordered pairs of the pooled
/// samples.
pub fn median_bandwidth(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    if x.d() != y.d() {
        return Err(KmsError::DimensionMismatch {
            expected: x.d(),
            actual: y.d(),
        });
    }
    let pooled: Vec<&[f64]> = x.rows().chain(y.rows()).collect();
    if pooled.len() < 2 {
        return Err(KmsError::Degenerate(
            "median bandwidth needs two points".into(),
        ));
    }
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            let sq: f64 = pooled[i]
                .iter()
                .zip(pooled[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(sq.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median <= 0.0 {
        return Err(KmsError::Degenerate(
            "median pairwise distance is zero; bandwidth would vanish".into(),
        ));
    }
    Ok(median)
}

/// True iff the smallest eigenvalue of the symmetric matrix `g` exceeds `tol`.
pub fn check_pd(g: &DMatrix<f64>, tol: f64) -> bool {
    match sym_eigen(g) {
        Ok(e) => e.values.len() == g.nrows() && e.min() > tol,
        Err(_) => false,
    }
}

/// How the factor `U` was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    /// `G` positive definite (possibly after a diagonal jitter); `U` is square.
    Full,
    /// Dot-product kernel: `U` spans the range of `G` only, `U U^T = G^+`.
    Range,
}

/// The signed gram matrix, its inverse factor and the difference vectors.
#[derive(Clone, Debug)]
pub struct GramAssembly {
    n: usize,
    kernel: Kernel,
    gram: DMatrix<f64>,
    jitter: f64,
    factor: DMatrix<f64>,
    factor_kind: FactorKind,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    base: DMatrix<f64>,
    c_bound: f64,
}

const PD_REL_TOL: f64 = 1e-10;
const JITTER_REL: f64 = 1e-8;
const RANGE_REL_TOL: f64 = 1e-12;

/// Assemble `G`, `U` and the vectors `M_{ij}` for two equal-size samples.
pub fn assemble(kernel: &Kernel, x: &PointCloud, y: &PointCloud) -> Result<GramAssembly> {
    if x.n() != y.n() {
        return Err(KmsError::SampleSizeMismatch {
            nx: x.n(),
            ny: y.n(),
        });
    }
    if x.d() != y.d() {
        return Err(KmsError::DimensionMismatch {
            expected: x.d(),
            actual: y.d(),
        });
    }
    if let Kernel::Gaussian { bandwidth, .. } = kernel {
        if !(*bandwidth > 0.0) {
            return Err(KmsError::InvalidParameter(
                "gaussian bandwidth must be positive".into(),
            ));
        }
        if let Some((i, j)) = find_duplicate(x, y) {
            return Err(KmsError::DuplicatePoints {
                first: i,
                second: j,
            });
        }
    }
    let n = x.n();
    let gram = signed_gram(kernel, x, y);
    let eig = sym_eigen(&gram)?;
    let trace: f64 = gram.diagonal().sum();

    let (factor, jitter, kind) = match kernel {
        Kernel::Gaussian { .. } => {
            let (u, jitter) = full_factor(&eig, trace, n)?;
            (u, jitter, FactorKind::Full)
        }
        Kernel::DotProduct => (range_factor(&eig, trace)?, 0.0, FactorKind::Range),
    };

    let w = factor.transpose() * &gram;
    let a = w.columns(0, n).into_owned();
    let b = w.columns(n, n).into_owned();
    let base = (&a * a.transpose() + &b * b.transpose()) / n as f64;

    let a_sq: Vec<f64> = a.column_iter().map(|c| c.norm_squared()).collect();
    let b_sq: Vec<f64> = b.column_iter().map(|c| c.norm_squared()).collect();
    let cross = a.transpose() * &b;
    let mut c_bound = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            c_bound = c_bound.max(a_sq[i] + b_sq[j] + 2.0 * cross[(i, j)]);
        }
    }

    Ok(GramAssembly {
        n,
        kernel: *kernel,
        gram,
        jitter,
        factor,
        factor_kind: kind,
        a,
        b,
        base,
        c_bound,
    })
}

fn signed_gram(kernel: &Kernel, x: &PointCloud, y: &PointCloud) -> DMatrix<f64> {
    let n = x.n();
    let mut g = DMatrix::zeros(2 * n, 2 * n);
    let point = |k: usize| if k < n { x.row(k) } else { y.row(k - n) };
    for i in 0..2 * n {
        for j in 0..=i {
            let mut v = kernel.eval_unchecked(point(i), point(j));
            if (i < n) != (j < n) {
                v = -v;
            }
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// `U = V diag(lambda^-1/2)`, adding the diagonal jitter once if needed.
fn full_factor(eig: &SymEigen, trace: f64, n: usize) -> Result<(DMatrix<f64>, f64)> {
    let scale = trace / (2 * n) as f64;
    let threshold = PD_REL_TOL * scale;
    let mut jitter = 0.0;
    if !(eig.min() > threshold) {
        jitter = JITTER_REL * scale;
        log::debug!(
            "gram matrix near singular (min eigenvalue {:e}); adding jitter {:e}",
            eig.min(),
            jitter
        );
        if !(eig.min() + jitter > threshold) {
            return Err(KmsError::NotPositiveDefinite {
                min_eigenvalue: eig.min(),
            });
        }
    }
    let mut u = eig.vectors.clone();
    for (k, mut col) in u.column_iter_mut().enumerate() {
        col /= (eig.values[k] + jitter).sqrt();
    }
    Ok((u, jitter))
}

/// Factor restricted to the numerical range of a positive semidefinite `G`.
fn range_factor(eig: &SymEigen, trace: f64) -> Result<DMatrix<f64>> {
    let threshold = RANGE_REL_TOL * trace.max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..eig.values.len())
        .filter(|&k| eig.values[k] > threshold)
        .collect();
    if keep.is_empty() {
        return Err(KmsError::Degenerate(
            "gram matrix is zero; every linear projection is constant".into(),
        ));
    }
    let rows = eig.vectors.nrows();
    Ok(DMatrix::from_fn(rows, keep.len(), |i, c| {
        eig.vectors[(i, keep[c])] / eig.values[keep[c]].sqrt()
    }))
}

/// First pair of exactly coincident points in the pooled sample, indexed
/// into the pooled order (`x` first, then `y`).
fn find_duplicate(x: &PointCloud, y: &PointCloud) -> Option<(usize, usize)> {
    let n = x.n();
    let point = |k: usize| if k < n { x.row(k) } else { y.row(k - n) };
    let mut order: Vec<usize> = (0..2 * n).collect();
    let cmp = |a: &usize, b: &usize| {
        point(*a)
            .iter()
            .zip(point(*b))
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    order.sort_by(cmp);
    order.windows(2).find_map(|w| {
        let same = point(w[0]).iter().zip(point(w[1])).all(|(u, v)| u == v);
        same.then(|| (w[0].min(w[1]), w[0].max(w[1])))
    })
}

/// A transport plan in the form the supgradient accepts.
#[derive(Clone, Copy, Debug)]
pub enum PlanRef<'a> {
    /// Deterministic plan `pi_{i, perm[i]} = 1/n`.
    Permutation(&'a [usize]),
    Dense(&'a DMatrix<f64>),
}

impl GramAssembly {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Side length of the matrices `S` the relaxation optimizes over
    /// (`2n` for a full factor, the rank of `G` for a range factor).
    pub fn dim(&self) -> usize {
        self.factor.ncols()
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `U` with `(G + jitter I)^-1 = U U^T` (or the pseudo-inverse for a
    /// range factor).
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn factor_kind(&self) -> FactorKind {
        self.factor_kind
    }

    /// Diagonal jitter added to `G` before factorizing (0 when none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `C = max_{ij} |M_{ij}|^2`.
    pub fn c_bound(&self) -> f64 {
        self.c_bound
    }

    /// `M'_{ij}` rebuilt from the columns of `G`.
    pub fn m_prime(&self, i: usize, j: usize) -> DVector<f64> {
        self.gram.column(i) + self.gram.column(self.n + j)
    }

    /// `M_{ij} = U^T M'_{ij}`.
    pub fn m(&self, i: usize, j: usize) -> DVector<f64> {
        self.a.column(i) + self.b.column(j)
    }

    /// Costs `c_{ij} = M_{ij}^T S M_{ij}`.
    pub fn cost_matrix(&self, s: &DMatrix<f64>) -> CostMatrix {
        let n = self.n;
        let sa = s * &self.a;
        let sb = s * &self.b;
        let da: Vec<f64> = (0..n)
            .map(|i| self.a.column(i).dot(&sa.column(i)))
            .collect();
        let db: Vec<f64> = (0..n)
            .map(|j| self.b.column(j).dot(&sb.column(j)))
            .collect();
        let cross = self.a.transpose() * sb;
        let c = DMatrix::from_fn(n, n, |i, j| (da[i] + db[j] + 2.0 * cross[(i, j)]).max(0.0));
        CostMatrix::new_unchecked(c)
    }

    /// Costs `(M_{ij}^T w)^2` for a direction `w`.
    pub fn rank1_costs(&self, w: &DVector<f64>) -> CostMatrix {
        let pa = self.a.tr_mul(w);
        let pb = self.b.tr_mul(w);
        let c = DMatrix::from_fn(self.n, self.n, |i, j| {
            let v = pa[i] + pb[j];
            v * v
        });
        CostMatrix::new_unchecked(c)
    }

    /// The values `w^T a_i` and `-w^T b_j`; their pairwise differences are
    /// `M_{ij}^T w`.
    pub fn projections(&self, w: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let pa = self.a.tr_mul(w);
        let pb = self.b.tr_mul(w);
        (
            pa.iter().copied().collect(),
            pb.iter().map(|v| -v).collect(),
        )
    }

    /// `v = sum_{ij} pi_{ij} M_{ij} M_{ij}^T` for a plan in the transport
    /// polytope (uniform marginals are assumed).
    pub fn supgradient(&self, plan: PlanRef<'_>) -> DMatrix<f64> {
        let n = self.n;
        let k = match plan {
            PlanRef::Permutation(perm) => {
                let bp = DMatrix::from_fn(self.dim(), n, |r, i| self.b[(r, perm[i])]);
                (&self.a * bp.transpose()) / n as f64
            }
            PlanRef::Dense(pi) => &self.a * (pi * self.b.transpose()),
        };
        let mut v = &self.base + &k + k.transpose();
        crate::linalg::symmetrize(&mut v);
        v
    }

    pub(crate) fn a_vectors(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub(crate) fn b_vectors(&self) -> &DMatrix<f64> {
        &self.b
    }
}
