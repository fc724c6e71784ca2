//! The semidefinite relaxation
//!
//! ```text
//! max_{S >= 0, tr S = 1}  F(S) = min_{pi in Gamma_n} sum_ij pi_ij <M_ij M_ij^T, S>
//! ```
//!
//! solved by inexact mirror ascent under the von Neumann entropy. Each step
//! solves the inner transport problem at the current iterate (exactly or to a
//! given accuracy), forms the supgradient `v = sum pi_ij M_ij M_ij^T`, and
//! applies the matrix-exponentiated update `S <- exp(log S + gamma v)` with
//! trace normalization. The averaged iterate is returned.
//!
//! Since `F(S) = min_pi <V(pi), S>` with `V` linear in the plan, the value of
//! the relaxation never exceeds `lambda_max(V(pi))` for any plan. Averaging
//! the supgradients gives such a plan for free, so every run carries a
//! certified upper bound next to its lower bound `F(S_avg)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{KmsError, Result};
use crate::kernels::{GramAssembly, PlanRef};
use crate::linalg::{self, softmax_weights, sym_eigen, SymEigen};
use crate::ot::{self, CostMatrix, EntropicConfig, ExactSolution, InnerSolver, TransportPlan};
use crate::rng::{stream, Stream};

/// A symmetric positive semidefinite matrix with unit trace.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrahedronPoint(DMatrix<f64>);

impl SpectrahedronPoint {
    pub const TOL: f64 = 1e-9;

    pub fn new(s: DMatrix<f64>) -> Result<Self> {
        if s.nrows() != s.ncols() || s.nrows() == 0 {
            return Err(KmsError::DimensionMismatch {
                expected: s.nrows(),
                actual: s.ncols(),
            });
        }
        if linalg::asymmetry(&s) > Self::TOL {
            return Err(KmsError::InvalidParameter("matrix is not symmetric".into()));
        }
        let tr = s.trace();
        if (tr - 1.0).abs() > Self::TOL {
            return Err(KmsError::InvalidParameter(format!(
                "trace is {tr}, expected 1"
            )));
        }
        let min = sym_eigen(&s)?.min();
        if min < -Self::TOL {
            return Err(KmsError::InvalidParameter(format!(
                "matrix is not positive semidefinite (min eigenvalue {min:e})"
            )));
        }
        Ok(Self(s))
    }

    /// `I / dim`, the maximum-entropy point.
    pub fn center(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim) / dim as f64)
    }

    /// `w w^T / |w|^2`.
    pub fn rank_one(w: &DVector<f64>) -> Result<Self> {
        let norm = w.norm();
        if !(norm > 0.0) {
            return Err(KmsError::InvalidParameter("zero direction".into()));
        }
        let u = w / norm;
        Ok(Self(&u * u.transpose()))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Target accuracy of the relaxation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Accuracy {
    /// Fraction of `C = max |M_ij|^2`, the natural scale of the objective.
    Relative(f64),
    Absolute(f64),
}

/// The constant `C` that sets the step size and the scale of relative
/// accuracies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// `C = max_ij |M_ij|^2`, a bound on the trace of every supgradient.
    Bound,
    /// `C = lambda_max(v(S_1))`, the spectral norm of the first supgradient.
    /// It upper-bounds the optimal value and is usually far below the trace
    /// bound, which makes the worst-case step size needlessly timid.
    #[default]
    Spectral,
}

/// Mirror-ascent settings. Unset fields follow the worst-case recipe
/// `T = ceil(16 C^2 ln(dim) / delta^2)`, `eps_inner = delta / 4`,
/// `gamma = ln(dim) / (C sqrt(T))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub accuracy: Accuracy,
    pub scale: ScaleRule,
    /// Upper limit on iterations; the recipe's `T` is usually far larger than
    /// needed and is capped here. `None` runs the full recipe.
    pub max_iterations: Option<usize>,
    pub step_size: Option<f64>,
    pub epsilon_inner: Option<f64>,
    pub seed: u64,
    pub inner: InnerSolver,
    /// Evaluate the certified gap every this many iterations and stop once it
    /// is at most `delta`. Zero disables the check.
    pub check_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            accuracy: Accuracy::Relative(0.01),
            scale: ScaleRule::default(),
            max_iterations: Some(300),
            step_size: None,
            epsilon_inner: None,
            seed: 0,
            inner: InnerSolver::default(),
            check_every: 10,
        }
    }
}

/// Concrete parameters of one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResolvedParams {
    pub delta: f64,
    /// Iteration count of the worst-case recipe.
    pub recipe_iterations: u64,
    /// Iteration budget actually used.
    pub iterations: usize,
    pub step_size: f64,
    pub epsilon_inner: f64,
    /// The constant `C` in the recipe.
    pub scale: f64,
    pub dim: usize,
}

impl SolverConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn resolve(&self, scale: f64, dim: usize) -> Result<ResolvedParams> {
        let delta = match self.accuracy {
            Accuracy::Relative(r) => r * scale,
            Accuracy::Absolute(a) => a,
        };
        let scale_ok = scale > 0.0 && scale.is_finite();
        if !(delta > 0.0 && delta.is_finite()) || !scale_ok {
            return Err(KmsError::InvalidParameter(format!(
                "accuracy must be positive (delta = {delta}, C = {scale})"
            )));
        }
        if let Some(g) = self.step_size {
            if !(g > 0.0 && g.is_finite()) {
                return Err(KmsError::InvalidParameter(format!(
                    "step size must be positive, got {g}"
                )));
            }
        }
        if let Some(e) = self.epsilon_inner {
            if !(e > 0.0 && e.is_finite()) {
                return Err(KmsError::InvalidParameter(format!(
                    "inner accuracy must be positive, got {e}"
                )));
            }
        }
        if self.max_iterations == Some(0) {
            return Err(KmsError::InvalidParameter(
                "iteration cap must be positive".into(),
            ));
        }
        let log_dim = (dim as f64).ln();
        let recipe = (16.0 * scale * scale * log_dim / (delta * delta))
            .ceil()
            .max(1.0);
        let recipe_iterations = if recipe >= u64::MAX as f64 {
            u64::MAX
        } else {
            recipe as u64
        };
        let mut iterations = usize::try_from(recipe_iterations).unwrap_or(usize::MAX);
        if let Some(cap) = self.max_iterations {
            iterations = iterations.min(cap);
        }
        if dim <= 1 {
            iterations = 0;
        }
        let step_size = self.step_size.unwrap_or_else(|| {
            log_dim.max(f64::MIN_POSITIVE) / (scale * (iterations.max(1) as f64).sqrt())
        });
        Ok(ResolvedParams {
            delta,
            recipe_iterations,
            iterations,
            step_size,
            epsilon_inner: self.epsilon_inner.unwrap_or(delta / 4.0),
            scale,
            dim,
        })
    }
}

/// One row of the iteration log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Inner transport cost at the current iterate (the inexact objective).
    pub inexact_value: f64,
    /// `|S_{k+1} - S_k|_F`.
    pub step_norm: f64,
}

/// Output of [`solve_sdr`].
#[derive(Clone, Debug)]
pub struct SdrSolution {
    /// The averaged iterate.
    pub s_avg: SpectrahedronPoint,
    /// `F(s_avg)` with the exact inner solver.
    pub value: f64,
    /// Optimal plan at `s_avg`.
    pub assignment: ExactSolution,
    /// Certified upper bound on the relaxation's optimal value.
    pub upper_bound: f64,
    pub iterations: usize,
    pub params: ResolvedParams,
    pub trace_log: Vec<TraceEntry>,
}

impl SdrSolution {
    /// `upper_bound - value`; the true optimum lies in between.
    pub fn gap(&self) -> f64 {
        (self.upper_bound - self.value).max(0.0)
    }
}

/// Costs `c_ij = <M_ij M_ij^T, S>`.
pub fn costs(ga: &GramAssembly, s: &DMatrix<f64>) -> CostMatrix {
    ga.cost_matrix(s)
}

/// `F(S)` with the Hungarian solver.
pub fn objective_exact(ga: &GramAssembly, s: &DMatrix<f64>) -> (f64, ExactSolution) {
    let sol = ot::solve_exact(&ga.cost_matrix(s));
    (sol.value, sol)
}

/// `F(S)` with either the exact or the entropic inner solver.
pub fn objective_f(
    ga: &GramAssembly,
    s: &SpectrahedronPoint,
    exact: bool,
    epsilon: f64,
    rng: &mut ChaCha20Rng,
) -> Result<(f64, TransportPlan)> {
    if exact {
        let (v, sol) = objective_exact(ga, s.matrix());
        return Ok((v, sol.plan()));
    }
    let c = ga.cost_matrix(s.matrix());
    let sol = ot::solve_entropic(&c, &EntropicConfig::new(epsilon), rng)?;
    Ok((sol.value, sol.plan))
}

/// Inner plan at `S` as used by the supgradient oracle.
enum InnerPlan {
    Permutation(Vec<usize>),
    Dense(DMatrix<f64>),
}

impl InnerPlan {
    fn as_ref(&self) -> PlanRef<'_> {
        match self {
            InnerPlan::Permutation(p) => PlanRef::Permutation(p),
            InnerPlan::Dense(m) => PlanRef::Dense(m),
        }
    }
}

fn inner_plan(
    ga: &GramAssembly,
    s: &DMatrix<f64>,
    inner: &InnerSolver,
    epsilon: f64,
    rng: &mut ChaCha20Rng,
) -> Result<(f64, InnerPlan)> {
    let c = ga.cost_matrix(s);
    if inner.uses_exact(ga.n()) {
        let sol = ot::solve_exact(&c);
        Ok((sol.value, InnerPlan::Permutation(sol.assignment.sigma)))
    } else {
        let cfg = EntropicConfig {
            epsilon,
            kappa: inner.kappa,
            early_exit: true,
        };
        let sol = ot::solve_entropic(&c, &cfg, rng)?;
        Ok((sol.value, InnerPlan::Dense(sol.plan.into_matrix())))
    }
}

/// `v(S) = sum pi_ij M_ij M_ij^T` for an `epsilon`-optimal plan at `S`.
/// Returns the matrix and the plan's cost.
pub fn supgradient(
    ga: &GramAssembly,
    s: &SpectrahedronPoint,
    epsilon: f64,
    inner: &InnerSolver,
    rng: &mut ChaCha20Rng,
) -> Result<(DMatrix<f64>, f64)> {
    if !(epsilon >= 0.0) {
        return Err(KmsError::InvalidParameter(
            "inner accuracy must be nonnegative".into(),
        ));
    }
    let inner = if epsilon == 0.0 {
        InnerSolver {
            exact_threshold: usize::MAX,
            ..*inner
        }
    } else {
        *inner
    };
    let (value, plan) = inner_plan(ga, s.matrix(), &inner, epsilon, rng)?;
    Ok((ga.supgradient(plan.as_ref()), value))
}

/// `exp(log S + gamma v) / tr(...)`.
pub fn mirror_step(
    s: &SpectrahedronPoint,
    v: &DMatrix<f64>,
    gamma: f64,
) -> Result<SpectrahedronPoint> {
    if !(gamma > 0.0) {
        return Err(KmsError::InvalidParameter(format!(
            "step size must be positive, got {gamma}"
        )));
    }
    if v.shape() != s.0.shape() {
        return Err(KmsError::DimensionMismatch {
            expected: s.dim(),
            actual: v.nrows(),
        });
    }
    if linalg::asymmetry(v) > 1e-8 * (1.0 + v.abs().max()) {
        return Err(KmsError::InvalidParameter(
            "supgradient is not symmetric".into(),
        ));
    }
    let log_s = linalg::sym_logm(&s.0)?;
    let (next, _) = linalg::sym_softmax(&(log_s + v * gamma))?;
    Ok(SpectrahedronPoint(next))
}

/// Inexact mirror ascent on the spectrahedron, started at `I / dim`.
///
/// The iterate is kept in the accumulated form `L_k = gamma sum_{t<k} v_t`,
/// `S_k = exp(L_k) / tr exp(L_k)`, which equals the step-by-step update but
/// needs one eigendecomposition per iteration and never takes a logarithm.
pub fn solve_sdr(ga: &GramAssembly, cfg: &SolverConfig) -> Result<SdrSolution> {
    let dim = ga.dim();
    let scale = match cfg.scale {
        ScaleRule::Bound => ga.c_bound(),
        ScaleRule::Spectral if dim > 1 => {
            let center = DMatrix::<f64>::identity(dim, dim) / dim as f64;
            let (_, sol) = objective_exact(ga, &center);
            let top =
                sym_eigen(&ga.supgradient(PlanRef::Permutation(&sol.assignment.sigma)))?.max();
            if top > 0.0 {
                top
            } else {
                ga.c_bound()
            }
        }
        ScaleRule::Spectral => ga.c_bound(),
    };
    let params = cfg.resolve(scale, dim)?;
    let mut rng = stream(cfg.seed, Stream::Solver);

    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    let mut s = DMatrix::<f64>::identity(dim, dim) / dim as f64;
    let mut s_sum = DMatrix::<f64>::zeros(dim, dim);
    let mut v_sum = DMatrix::<f64>::zeros(dim, dim);
    let mut trace_log = Vec::with_capacity(params.iterations.min(100_000));
    let mut best_upper = f64::INFINITY;
    let mut done = 0;

    for k in 0..params.iterations {
        let (value, plan) = inner_plan(ga, &s, &cfg.inner, params.epsilon_inner, &mut rng)?;
        let v = ga.supgradient(plan.as_ref());
        s_sum += &s;
        v_sum += &v;
        acc += &v * params.step_size;
        linalg::symmetrize(&mut acc);
        let next = exp_normalized(&acc)?;
        let step_norm = (&next - &s).norm();
        trace_log.push(TraceEntry {
            iteration: k + 1,
            inexact_value: value,
            step_norm,
        });
        s = next;
        done = k + 1;

        if cfg.check_every > 0 && done % cfg.check_every == 0 && done < params.iterations {
            let avg = &s_sum / done as f64;
            let (lower, _) = objective_exact(ga, &avg);
            let upper = sym_eigen(&(&v_sum / done as f64))?.max();
            best_upper = best_upper.min(upper);
            log::trace!(
                "iteration {done}: F(avg) = {lower:.6e}, certified upper = {best_upper:.6e}"
            );
            if best_upper - lower <= params.delta {
                break;
            }
        }
    }

    let s_avg = if done == 0 {
        s
    } else {
        let mut m = s_sum / done as f64;
        linalg::symmetrize(&mut m);
        m /= m.trace();
        m
    };
    let (value, assignment) = objective_exact(ga, &s_avg);
    let upper = if done == 0 {
        // nothing to average: the only feasible point (dim 1) or no budget
        if dim == 1 {
            value
        } else {
            sym_eigen(&ga.supgradient(PlanRef::Permutation(&assignment.assignment.sigma)))?.max()
        }
    } else {
        sym_eigen(&(&v_sum / done as f64))?.max()
    };
    best_upper = best_upper.min(upper).max(value);
    Ok(SdrSolution {
        s_avg: SpectrahedronPoint(s_avg),
        value,
        assignment,
        upper_bound: best_upper,
        iterations: done,
        params,
        trace_log,
    })
}

fn exp_normalized(acc: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = sym_eigen(acc)?;
    let w = softmax_weights(&e.values);
    let spectral = SymEigen {
        values: w,
        vectors: e.vectors,
    };
    Ok(spectral.reconstruct_with(|v| v))
}

/// `F(w w^T)` for a unit direction `w`.
///
/// The costs `(M_ij^T w)^2 = (p_i - q_j)^2` come from two scalar samples, so
/// the inner problem is a one-dimensional transport solved by sorting.
pub fn rank1_value(ga: &GramAssembly, w: &DVector<f64>) -> f64 {
    let (p, q) = ga.projections(w);
    sorted_squared_cost(p, q)
}

pub(crate) fn sorted_squared_cost(mut p: Vec<f64>, mut q: Vec<f64>) -> f64 {
    p.sort_by(f64::total_cmp);
    q.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    p.iter()
        .zip(&q)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Best `F(w w^T)` over `trials` uniformly random unit directions.
pub fn best_random_rank1(
    ga: &GramAssembly,
    trials: usize,
    rng: &mut ChaCha20Rng,
) -> (f64, DVector<f64>) {
    let dim = ga.dim();
    let mut best = (f64::NEG_INFINITY, DVector::zeros(dim));
    for _ in 0..trials {
        let mut w = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = w.norm();
        if norm == 0.0 {
            continue;
        }
        w /= norm;
        let v = rank1_value(ga, &w);
        if v > best.0 {
            best = (v, w);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_step_zero_direction_is_identity() {
        let s = SpectrahedronPoint::center(4);
        let out = mirror_step(&s, &DMatrix::zeros(4, 4), 0.7).unwrap();
        assert!((out.matrix() - s.matrix()).abs().max() < 1e-14);
    }

    #[test]
    fn mirror_step_diagonal_closed_form() {
        let n = 2;
        let dim = 2 * n;
        let s = SpectrahedronPoint::center(dim);
        let mut v = DMatrix::zeros(dim, dim);
        v[(0, 0)] = 1.0;
        let out = mirror_step(&s, &v, 1.0).unwrap();
        let e = std::f64::consts::E;
        let z = e + (dim as f64) - 1.0;
        for i in 0..dim {
            let expected = if i == 0 { e / z } else { 1.0 / z };
            assert!((out.matrix()[(i, i)] - expected).abs() < 1e-14);
        }
        assert!((out.matrix().trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resolve_follows_recipe() {
        let cfg = SolverConfig {
            accuracy: Accuracy::Absolute(0.5),
            scale: ScaleRule::Bound,
            max_iterations: None,
            ..SolverConfig::default()
        };
        let p = cfg.resolve(2.0, 4).unwrap();
        let t = (16.0 * 4.0 * 4f64.ln() / 0.25).ceil() as usize;
        assert_eq!(p.iterations, t);
        assert!((p.step_size - 4f64.ln() / (2.0 * (t as f64).sqrt())).abs() < 1e-15);
        assert_eq!(p.epsilon_inner, 0.125);
    }

    #[test]
    fn spectrahedron_validation() {
        assert!(SpectrahedronPoint::new(DMatrix::identity(2, 2)).is_err());
        assert!(
            SpectrahedronPoint::new(DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, -0.5])).is_err()
        );
        assert!(SpectrahedronPoint::new(DMatrix::identity(2, 2) / 2.0).is_ok());
    }
}
