//! Optimal transport between two uniform n-point measures.
//!
//! The feasible set is the transport polytope of nonnegative `n x n`
//! matrices whose rows and columns all sum to `1/n`. Because the marginals
//! are uniform, an optimal plan is always a permutation scaled by `1/n`,
//! which the Hungarian solver returns. The entropic solver runs an
//! accelerated stochastic method on the smoothed dual and rounds its output
//! back onto the polytope.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{KmsError, Result};

/// Tolerance for row and column sums of a [`TransportPlan`].
pub const MARGINAL_TOL: f64 = 1e-9;

/// A finite `n x n` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    c: DMatrix<f64>,
    c_max: f64,
}

impl CostMatrix {
    pub fn new(c: DMatrix<f64>) -> Result<Self> {
        if c.nrows() != c.ncols() {
            return Err(KmsError::DimensionMismatch {
                expected: c.nrows(),
                actual: c.ncols(),
            });
        }
        if c.nrows() == 0 {
            return Err(KmsError::InvalidParameter("empty cost matrix".into()));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(KmsError::InvalidParameter(
                "cost matrix has a non-finite entry".into(),
            ));
        }
        Ok(Self::new_unchecked(c))
    }

    pub(crate) fn new_unchecked(c: DMatrix<f64>) -> Self {
        let c_max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { c, c_max }
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(DMatrix::from_fn(n, n, f))
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    /// `max_{ij} c_{ij}`.
    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.c[(i, j)]
    }

    /// `sum_{ij} pi_{ij} c_{ij}`.
    pub fn cost_of(&self, pi: &DMatrix<f64>) -> f64 {
        self.c.iter().zip(pi.iter()).map(|(c, p)| c * p).sum()
    }

    /// `(1/n) sum_i c_{i, perm[i]}`.
    pub fn cost_of_permutation(&self, perm: &[usize]) -> f64 {
        let n = self.n();
        perm.iter()
            .enumerate()
            .map(|(i, &j)| self.c[(i, j)])
            .sum::<f64>()
            / n as f64
    }
}

/// A point of the transport polytope.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pi: DMatrix<f64>,
}

impl TransportPlan {
    /// Validates nonnegativity and the uniform marginals.
    pub fn new(pi: DMatrix<f64>) -> Result<Self> {
        let n = pi.nrows();
        if pi.ncols() != n || n == 0 {
            return Err(KmsError::DimensionMismatch {
                expected: n,
                actual: pi.ncols(),
            });
        }
        if pi.iter().any(|v| !(*v >= 0.0)) {
            return Err(KmsError::InvalidParameter(
                "transport plan has a negative entry".into(),
            ));
        }
        let err = marginal_error(&pi);
        if err > MARGINAL_TOL {
            return Err(KmsError::InvalidParameter(format!(
                "transport plan marginals off by {err:e}"
            )));
        }
        Ok(Self { pi })
    }

    pub fn from_permutation(perm: &[usize]) -> Self {
        let n = perm.len();
        let mut pi = DMatrix::zeros(n, n);
        for (i, &j) in perm.iter().enumerate() {
            pi[(i, j)] = 1.0 / n as f64;
        }
        Self { pi }
    }

    pub fn n(&self) -> usize {
        self.pi.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.pi
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.pi
    }

    /// The permutation when the plan puts all mass `1/n` on one entry per row
    /// and column.
    pub fn as_permutation(&self) -> Option<Vec<usize>> {
        let n = self.n();
        let target = 1.0 / n as f64;
        let mut perm = Vec::with_capacity(n);
        let mut used = vec![false; n];
        for i in 0..n {
            let row = self.pi.row(i);
            let (j, &v) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
            if (v - target).abs() > MARGINAL_TOL || used[j] {
                return None;
            }
            used[j] = true;
            perm.push(j);
        }
        Some(perm)
    }
}

/// Largest deviation of any row or column sum from `1/n`.
pub fn marginal_error(pi: &DMatrix<f64>) -> f64 {
    let n = pi.nrows();
    let target = 1.0 / n as f64;
    let rows = pi.row_iter().map(|r| (r.sum() - target).abs());
    let cols = pi.column_iter().map(|c| (c.sum() - target).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// An optimal permutation with optimal dual potentials.
///
/// `dual_f[i] + dual_g[j] <= c_{ij}` everywhere, with equality on the
/// matched pairs `(i, sigma[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub sigma: Vec<usize>,
    pub dual_f: DVector<f64>,
    pub dual_g: DVector<f64>,
}

impl Assignment {
    /// `(1/n) sum_i (f_i + g_i)`, equal to the primal value at optimality.
    pub fn dual_value(&self) -> f64 {
        let n = self.sigma.len() as f64;
        (self.dual_f.sum() + self.dual_g.sum()) / n
    }
}

/// Result of [`solve_exact`].
#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub assignment: Assignment,
    /// `(1/n) sum_i c_{i, sigma(i)}`.
    pub value: f64,
}

impl ExactSolution {
    pub fn plan(&self) -> TransportPlan {
        TransportPlan::from_permutation(&self.assignment.sigma)
    }
}

/// Hungarian algorithm with potentials, O(n^3).
///
/// Ties are broken towards the smallest column index, so the result is a
/// deterministic function of the costs.
pub fn solve_exact(c: &CostMatrix) -> ExactSolution {
    let n = c.n();
    // 1-based arrays; index 0 is the virtual row/column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    let cm = c.matrix();

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cm[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut sigma = vec![0usize; n];
    for j in 1..=n {
        sigma[p[j] - 1] = j - 1;
    }
    let dual_f = DVector::from_fn(n, |i, _| u[i + 1]);
    let dual_g = DVector::from_fn(n, |j, _| v[j + 1]);
    let value = c.cost_of_permutation(&sigma);
    ExactSolution {
        assignment: Assignment {
            sigma,
            dual_f,
            dual_g,
        },
        value,
    }
}

/// Settings for [`solve_entropic`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropicConfig {
    /// Target suboptimality `eps > 0`.
    pub epsilon: f64,
    /// Constant in the outer iteration count `ceil(kappa |C|_inf sqrt(ln n) / eps)`.
    pub kappa: f64,
    /// Stop as soon as the certified duality gap of the rounded plan is at
    /// most `epsilon`.
    pub early_exit: bool,
}

impl EntropicConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            kappa: 4.0,
            early_exit: true,
        }
    }
}

/// Output of [`solve_entropic`].
#[derive(Clone, Debug)]
pub struct EntropicSolution {
    pub plan: TransportPlan,
    /// `sum pi c` of the rounded plan.
    pub value: f64,
    /// A lower bound on the optimal value from the final dual iterate.
    pub lower_bound: f64,
    pub outer_iterations: usize,
}

impl EntropicSolution {
    /// Certified suboptimality bound `value - lower_bound`.
    pub fn gap(&self) -> f64 {
        self.value - self.lower_bound
    }
}

/// Smoothing parameter `eta = eps / (8 ln n)`.
pub fn entropic_eta(epsilon: f64, n: usize) -> f64 {
    epsilon / (8.0 * (n as f64).ln())
}

/// Approximate OT by accelerated variance-reduced stochastic ascent on the
/// entropic dual, followed by rounding onto the polytope.
///
/// The per-row dual pieces are
/// `h_i(v) = eta log sum_j exp((v_j - c_ij - eta)/eta) - mean(v) + eta (1 + ln n)`;
/// their gradients are a row softmax minus `1/n`. Each outer epoch runs `n`
/// inner steps, then folds the plan of a randomly chosen inner iterate into a
/// `1/tau`-weighted average.
pub fn solve_entropic(
    c: &CostMatrix,
    cfg: &EntropicConfig,
    rng: &mut ChaCha20Rng,
) -> Result<EntropicSolution> {
    let eps = cfg.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(KmsError::InvalidParameter(format!(
            "entropic accuracy must be positive, got {eps}"
        )));
    }
    let n = c.n();
    if n < 2 {
        let sol = solve_exact(c);
        return Ok(EntropicSolution {
            plan: sol.plan(),
            value: sol.value,
            lower_bound: sol.value,
            outer_iterations: 0,
        });
    }
    let eta = entropic_eta(eps, n);
    let c_inf = c.matrix().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let t_out = ((cfg.kappa * c_inf * (n as f64).ln().sqrt() / eps).ceil() as usize).max(1);
    let inner = n;
    let nf = n as f64;

    let mut y = DVector::<f64>::zeros(n);
    let mut z = DVector::<f64>::zeros(n);
    let mut snapshot = DVector::<f64>::zeros(n);
    let mut lam = DVector::<f64>::zeros(n);
    let mut avg_plan = DMatrix::<f64>::zeros(n, n);
    let mut weight_total = 0.0;
    // softmax rows at the snapshot, one per row of c
    let mut snap_rows = DMatrix::<f64>::zeros(n, n);
    let mut h = DVector::<f64>::zeros(n);
    let mut row_buf = DVector::<f64>::zeros(n);
    let mut y_sum = DVector::<f64>::zeros(n);

    let mut best: Option<EntropicSolution> = None;
    let mut outer_done = 0;

    for t in 0..t_out {
        let tau = 2.0 / (t as f64 + 4.0);
        let gamma = eta / (9.0 * tau);

        // full gradient at the snapshot
        for i in 0..n {
            row_softmax(c, i, &snapshot, eta, &mut row_buf);
            snap_rows.set_row(i, &row_buf.transpose());
        }
        let mut u = DVector::<f64>::zeros(n);
        for i in 0..n {
            u += snap_rows.row(i).transpose();
        }
        u /= nf;
        u.add_scalar_mut(-1.0 / nf);

        let pick = rng.random_range(0..inner);
        let mut picked = DVector::<f64>::zeros(n);
        y_sum.fill(0.0);

        for j in 0..inner {
            lam.copy_from(&(&z * tau + &snapshot * 0.5 + &y * (0.5 - tau)));
            let i = rng.random_range(0..n);
            row_softmax(c, i, &lam, eta, &mut row_buf);
            // H = u + grad h_i(lam) - grad h_i(snapshot); the -1/n terms cancel
            for k in 0..n {
                h[k] = u[k] + row_buf[k] - snap_rows[(i, k)];
            }
            z.axpy(-gamma / 2.0, &h, 1.0);
            y.copy_from(&lam);
            y.axpy(-eta / 9.0, &h, 1.0);
            y_sum += &y;
            if j == pick {
                picked.copy_from(&lam);
            }
        }
        snapshot = &y_sum / inner as f64;

        avg_plan += dual_to_plan(&picked, c, eta)? / tau;
        weight_total += 1.0 / tau;
        outer_done = t + 1;

        let last = t + 1 == t_out;
        if cfg.early_exit || last {
            let plan = round_to_polytope(&(&avg_plan / weight_total))?;
            let value = c.cost_of(plan.matrix());
            let lower_bound = dual_lower_bound(c, &snapshot);
            let cand = EntropicSolution {
                plan,
                value,
                lower_bound,
                outer_iterations: outer_done,
            };
            let done = cand.gap() <= eps;
            if best.as_ref().is_none_or(|b| cand.value < b.value) {
                best = Some(cand);
            }
            if done {
                break;
            }
        }
    }
    let mut sol = best.expect("at least one outer iteration");
    sol.outer_iterations = outer_done;
    if sol.gap() > eps {
        log::debug!(
            "entropic OT stopped after {} epochs with certified gap {:e} > {:e}",
            outer_done,
            sol.gap(),
            eps
        );
    }
    Ok(sol)
}

/// Row `i` of `n * pi(v)`: softmax of `(v - c_i) / eta`.
fn row_softmax(c: &CostMatrix, i: usize, v: &DVector<f64>, eta: f64, out: &mut DVector<f64>) {
    let n = c.n();
    let mut top = f64::NEG_INFINITY;
    for j in 0..n {
        let s = (v[j] - c.get(i, j)) / eta;
        out[j] = s;
        top = top.max(s);
    }
    let mut total = 0.0;
    for j in 0..n {
        let e = (out[j] - top).exp();
        out[j] = e;
        total += e;
    }
    *out /= total;
}

/// Weak-duality bound `(1/n) sum_i min_j (c_ij - v_j) + (1/n) sum_j v_j`.
pub fn dual_lower_bound(c: &CostMatrix, v: &DVector<f64>) -> f64 {
    let n = c.n();
    let mut total = 0.0;
    for i in 0..n {
        let m = (0..n)
            .map(|j| c.get(i, j) - v[j])
            .fold(f64::INFINITY, f64::min);
        total += m;
    }
    (total + v.sum()) / n as f64
}

/// Primal plan of the smoothed dual at `v`; each row sums to `1/n`.
pub fn dual_to_plan(v: &DVector<f64>, c: &CostMatrix, eta: f64) -> Result<DMatrix<f64>> {
    if !(eta > 0.0) {
        return Err(KmsError::InvalidParameter(format!(
            "eta must be positive, got {eta}"
        )));
    }
    let n = c.n();
    if v.len() != n {
        return Err(KmsError::DimensionMismatch {
            expected: n,
            actual: v.len(),
        });
    }
    let mut pi = DMatrix::zeros(n, n);
    let mut row = DVector::zeros(n);
    for i in 0..n {
        row_softmax(c, i, v, eta, &mut row);
        for j in 0..n {
            pi[(i, j)] = row[j] / n as f64;
        }
    }
    Ok(pi)
}

/// Project a nonnegative matrix onto the transport polytope: shrink rows
/// and columns that carry too much mass, then add the rank-one correction
/// `e_r e_c^T / |e_r|_1`.
pub fn round_to_polytope(pi: &DMatrix<f64>) -> Result<TransportPlan> {
    let n = pi.nrows();
    if pi.ncols() != n || n == 0 {
        return Err(KmsError::DimensionMismatch {
            expected: n,
            actual: pi.ncols(),
        });
    }
    if pi.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(KmsError::InvalidParameter(
            "rounding needs a finite nonnegative matrix".into(),
        ));
    }
    let target = 1.0 / n as f64;
    let mut out = pi.clone();
    for i in 0..n {
        let r = out.row(i).sum();
        if r > target {
            let x = target / r;
            out.row_mut(i).iter_mut().for_each(|v| *v *= x);
        }
    }
    for j in 0..n {
        let s = out.column(j).sum();
        if s > target {
            let y = target / s;
            out.column_mut(j).iter_mut().for_each(|v| *v *= y);
        }
    }
    let e_r = DVector::from_fn(n, |i, _| (target - out.row(i).sum()).max(0.0));
    let e_c = DVector::from_fn(n, |j, _| (target - out.column(j).sum()).max(0.0));
    let l1 = e_r.sum();
    if l1 > 0.0 {
        out += &e_r * e_c.transpose() / l1;
    }
    Ok(TransportPlan { pi: out })
}

/// Solver choice for the inner transport problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerSolver {
    /// Use the Hungarian solver for `n <= exact_threshold`.
    pub exact_threshold: usize,
    pub kappa: f64,
}

impl Default for InnerSolver {
    fn default() -> Self {
        Self {
            exact_threshold: 200,
            kappa: 4.0,
        }
    }
}

impl InnerSolver {
    pub fn uses_exact(&self, n: usize) -> bool {
        n <= self.exact_threshold
    }
}
