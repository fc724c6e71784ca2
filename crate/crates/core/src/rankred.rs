//! Rank reduction of relaxation solutions.
//!
//! Fix the optimal assignment `sigma` at the input point `S = Q Lambda Q^T`.
//! Any symmetric `Delta` with `tr Delta = 0` and
//! `<Q^T M_{i,sigma(i)} M_{i,sigma(i)}^T Q, Delta> = 0` for every `i` moves
//! `S` along `Y = Q Delta Q^T` without changing the trace or the cost of the
//! matched pairs. Walking along `Y` until an eigenvalue reaches zero drops
//! the rank. Such a direction exists while `r(r+1)/2 > n + 1`, so the loop
//! ends at rank at most `1 + floor(sqrt(2n + 9/4) - 3/2)`.
//!
//! Holding only the matched pairs fixed can make other pairs cheaper, so
//! the objective may drop. [`ReductionMode::Guarded`] instead moves the
//! transport duals together with the matrix: every tight pair stays tight,
//! the objective's directional derivative is held at zero, and the step is
//! capped before a slack pair would go negative; the loop then pivots on the
//! newly tight pair and walks on. The objective is preserved exactly, at the
//! price of a larger final rank.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{KmsError, Result};
use crate::kernels::GramAssembly;
use crate::linalg::{null_vector, sym_eigen};
use crate::ot::{self, Assignment, CostMatrix};
use crate::sdr::SpectrahedronPoint;

/// Eigenvalues above this count towards the reported rank.
pub const RANK_TOL: f64 = 1e-6;
/// Eigenvalues at or below this are removed from the working factorization.
const DROP_TOL: f64 = 1e-14;
/// Relative singular-value cutoff for the constraint system.
const SVD_REL_TOL: f64 = 1e-9;

/// `1 + floor(sqrt(2n + 9/4) - 3/2)`, the largest `r` with
/// `r(r+1)/2 <= n + 1`.
pub fn rank_bound(n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let approx = 1 + ((2.0 * n as f64 + 2.25).sqrt() - 1.5).floor() as usize;
    // correct for floating point at perfect squares
    let mut r = approx.saturating_sub(1).max(1);
    while (r + 1) * (r + 2) / 2 <= n + 1 {
        r += 1;
    }
    r
}

/// The matched pairs of an optimal assignment together with optimal duals.
#[derive(Clone, Debug, PartialEq)]
pub struct BindingSet {
    pub assignment: Assignment,
    /// `F(S)` at the point the assignment was computed for.
    pub value: f64,
}

impl BindingSet {
    pub fn sigma(&self) -> &[usize] {
        &self.assignment.sigma
    }
}

/// Exact optimal transport at `S`; the matched pairs are the binding
/// constraints.
pub fn find_binding(s: &SpectrahedronPoint, ga: &GramAssembly) -> Result<BindingSet> {
    let c = ga.cost_matrix(s.matrix());
    let sol = ot::solve_exact(&c);
    let gap = (sol.assignment.dual_value() - sol.value).abs();
    if gap > 1e-8 * (1.0 + sol.value.abs()) {
        return Err(KmsError::Numerical(format!(
            "assignment duality gap {gap:e}"
        )));
    }
    Ok(BindingSet {
        assignment: sol.assignment,
        value: sol.value,
    })
}

/// Largest `t >= 0` with `Lambda + t Delta` positive semidefinite, for
/// diagonal `Lambda` with positive entries; 0 when `Delta` never leaves
/// the cone in the positive direction.
pub fn step_to_boundary(lambda: &DVector<f64>, delta: &DMatrix<f64>) -> f64 {
    let r = lambda.len();
    if r == 0 {
        return 0.0;
    }
    let inv_sqrt: Vec<f64> = lambda.iter().map(|l| 1.0 / l.sqrt()).collect();
    let scaled = DMatrix::from_fn(r, r, |i, j| inv_sqrt[i] * delta[(i, j)] * inv_sqrt[j]);
    match sym_eigen(&scaled) {
        Ok(e) if e.min() < 0.0 => -1.0 / e.min(),
        _ => 0.0,
    }
}

/// How far a reduction step may go.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionMode {
    /// Keep only the matched pairs fixed and step to the cone boundary.
    #[default]
    Fixed,
    /// Also keep every dual inequality satisfied (exact objective preservation).
    Guarded,
}

/// One pass of the reduction loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReductionStep {
    pub iteration: usize,
    /// Eigenvalues above [`RANK_TOL`] after the step.
    pub rank: usize,
    /// Eigenvalues kept in the working factorization after the step.
    pub support: usize,
    pub step: f64,
    /// True when the step was capped by a dual inequality rather than the cone.
    pub dual_capped: bool,
    /// Smallest eigenvalue mass remaining.
    pub min_eigenvalue: f64,
}

/// Output of [`reduce`].
#[derive(Clone, Debug)]
pub struct ReducedSolution {
    pub s: SpectrahedronPoint,
    /// Eigenvalues above [`RANK_TOL`].
    pub rank: usize,
    /// Rank of the input at the same tolerance.
    pub rank_before: usize,
    pub k_bound: usize,
    /// Completed reduction loops; each one ends with an eigenvalue at zero.
    pub loops: usize,
    /// Guarded mode only: steps cut short by a pair becoming tight. The loop
    /// then continues from that point with the enlarged constraint set.
    pub pivots: usize,
    pub binding: BindingSet,
    /// `F` at the reduced point with the exact inner solver.
    pub value: f64,
    /// `F` at the input point.
    pub value_before: f64,
    /// Largest violation of the matched-pair equalities at the output.
    pub binding_residual: f64,
    /// Largest violation of the dual inequalities at the output.
    pub dual_violation: f64,
    /// Eigenvectors (columns) and eigenvalues of the output, descending.
    pub eigenvectors: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub history: Vec<ReductionStep>,
}

impl ReducedSolution {
    /// Unit top eigenvector of the reduced matrix.
    pub fn top_direction(&self) -> DVector<f64> {
        self.eigenvectors.column(0).into_owned()
    }
}

/// Working state: `S = Q diag(lambda) Q^T` with the projections
/// `pa = Q^T A`, `pb = Q^T B` of the difference vectors.
struct State {
    q: DMatrix<f64>,
    lambda: DVector<f64>,
    pa: DMatrix<f64>,
    pb: DMatrix<f64>,
}

impl State {
    fn new(ga: &GramAssembly, s: &DMatrix<f64>) -> Result<Self> {
        let e = sym_eigen(s)?;
        let keep: Vec<usize> = (0..e.values.len())
            .filter(|&k| e.values[k] > DROP_TOL)
            .collect();
        if keep.is_empty() {
            return Err(KmsError::Degenerate(
                "input matrix has no positive eigenvalue".into(),
            ));
        }
        let q = DMatrix::from_fn(s.nrows(), keep.len(), |i, c| e.vectors[(i, keep[c])]);
        let lambda = DVector::from_fn(keep.len(), |c, _| e.values[keep[c]]);
        let pa = q.tr_mul(ga.a_vectors());
        let pb = q.tr_mul(ga.b_vectors());
        Ok(Self { q, lambda, pa, pb })
    }

    fn r(&self) -> usize {
        self.lambda.len()
    }

    fn cost(&self, i: usize, j: usize) -> f64 {
        (0..self.r())
            .map(|p| {
                let m = self.pa[(p, i)] + self.pb[(p, j)];
                self.lambda[p] * m * m
            })
            .sum()
    }

    fn costs(&self, n: usize) -> CostMatrix {
        CostMatrix::new_unchecked(DMatrix::from_fn(n, n, |i, j| self.cost(i, j)))
    }

    fn rank(&self) -> usize {
        self.lambda.iter().filter(|&&l| l > RANK_TOL).count()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let mut scaled = self.q.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.lambda[k];
        }
        let mut s = scaled * self.q.transpose();
        crate::linalg::symmetrize(&mut s);
        s
    }

    /// Sort eigenpairs by descending eigenvalue.
    fn sort(&mut self) {
        let r = self.r();
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&a, &b| self.lambda[b].total_cmp(&self.lambda[a]));
        self.q = DMatrix::from_fn(self.q.nrows(), r, |i, c| self.q[(i, order[c])]);
        self.lambda = DVector::from_fn(r, |c, _| self.lambda[order[c]]);
        self.pa = DMatrix::from_fn(r, self.pa.ncols(), |c, i| self.pa[(order[c], i)]);
        self.pb = DMatrix::from_fn(r, self.pb.ncols(), |c, i| self.pb[(order[c], i)]);
    }
}

/// Number of free parameters of a symmetric `k x k` matrix.
fn sym_vars(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Coefficients of `<m m^T, Delta>` in the isometric parameterization:
/// diagonal entries first, then `sqrt 2` times the strict upper triangle.
fn quad_row(m: &[f64]) -> Vec<f64> {
    let k = m.len();
    let mut row = Vec::with_capacity(sym_vars(k));
    row.extend(m.iter().map(|v| v * v));
    for p in 0..k {
        for q in (p + 1)..k {
            row.push(std::f64::consts::SQRT_2 * m[p] * m[q]);
        }
    }
    row
}

fn unpack(d: &DVector<f64>, k: usize) -> DMatrix<f64> {
    let mut delta = DMatrix::zeros(k, k);
    for p in 0..k {
        delta[(p, p)] = d[p];
    }
    let mut idx = k;
    for p in 0..k {
        for q in (p + 1)..k {
            let v = d[idx] / std::f64::consts::SQRT_2;
            delta[(p, q)] = v;
            delta[(q, p)] = v;
            idx += 1;
        }
    }
    delta
}

/// Solve the homogeneous system on the block of the `k` smallest
/// eigenvalues (the last `k` columns of the state). Returns unit-Frobenius
/// `Delta` or `None`.
fn block_direction(state: &State, pairs: &[(usize, usize)], k: usize) -> Option<DMatrix<f64>> {
    let r = state.r();
    let start = r - k;
    let vars = sym_vars(k);
    let mut a = DMatrix::zeros(pairs.len() + 1, vars);
    for p in 0..k {
        a[(0, p)] = 1.0 / (k as f64).sqrt();
    }
    let mut m = vec![0.0; k];
    for (row, &(i, j)) in pairs.iter().enumerate() {
        for (p, slot) in m.iter_mut().enumerate() {
            *slot = state.pa[(start + p, i)] + state.pb[(start + p, j)];
        }
        let coeffs = quad_row(&m);
        let norm = coeffs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-300 {
            continue;
        }
        for (c, v) in coeffs.iter().enumerate() {
            a[(row + 1, c)] = v / norm;
        }
    }
    let preferred: Vec<usize> = (0..k).collect();
    null_vector(&a, SVD_REL_TOL, &preferred).map(|d| unpack(&d, k))
}

/// Smallest block size whose unknowns outnumber `constraints + 1`.
fn block_size(constraints: usize, r: usize) -> usize {
    let mut k = 1;
    while sym_vars(k) < constraints + 2 && k < r {
        k += 1;
    }
    k
}

/// A direction `Y = Q Delta Q^T` keeping the trace and every matched-pair
/// cost fixed, or `None`. `Delta` lives on the smallest eigenvalues of `S`
/// and has unit Frobenius norm.
pub fn null_direction(
    s: &SpectrahedronPoint,
    binding: &BindingSet,
    ga: &GramAssembly,
) -> Result<Option<DMatrix<f64>>> {
    let state = State::new(ga, s.matrix())?;
    let pairs: Vec<(usize, usize)> = binding.sigma().iter().copied().enumerate().collect();
    let r = state.r();
    let k = block_size(pairs.len(), r);
    let delta = match block_direction(&state, &pairs, k) {
        Some(d) => d,
        None if k < r => match block_direction(&state, &pairs, r) {
            Some(d) => d,
            None => return Ok(None),
        },
        None => return Ok(None),
    };
    let kk = delta.nrows();
    let qb = state.q.columns(r - kk, kk);
    Ok(Some(qb * delta * qb.transpose()))
}

/// Union-find over the `2n` row and column nodes of the tight-pair graph.
struct Forest {
    parent: Vec<usize>,
}

impl Forest {
    fn new(nodes: usize) -> Self {
        Self {
            parent: (0..nodes).collect(),
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    /// False when `a` and `b` were already connected.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Pairs `(i, j)` whose dual inequality `f_i + g_j <= c_ij` is tight,
/// matched pairs first.
struct TightSet {
    n: usize,
    pairs: Vec<(usize, usize)>,
    member: Vec<bool>,
}

impl TightSet {
    fn new(n: usize, sigma: &[usize]) -> Self {
        let mut t = Self {
            n,
            pairs: Vec::new(),
            member: vec![false; n * n],
        };
        for (i, &j) in sigma.iter().enumerate() {
            t.insert(i, j);
        }
        t
    }

    fn insert(&mut self, i: usize, j: usize) {
        if !self.member[i * self.n + j] {
            self.member[i * self.n + j] = true;
            self.pairs.push((i, j));
        }
    }

    fn contains(&self, i: usize, j: usize) -> bool {
        self.member[i * self.n + j]
    }

    /// Independent cycles of the bipartite graph: `|E| - |V| + components`.
    fn cycles(&self) -> usize {
        let mut forest = Forest::new(2 * self.n);
        self.pairs
            .iter()
            .filter(|&&(i, j)| !forest.union(i, self.n + j))
            .count()
    }
}

/// Difference vector `m_ij` restricted to the block starting at `start`.
fn block_vector(state: &State, start: usize, k: usize, i: usize, j: usize, out: &mut [f64]) {
    for (p, slot) in out.iter_mut().enumerate().take(k) {
        *slot = state.pa[(start + p, i)] + state.pb[(start + p, j)];
    }
}

/// A direction for the guarded reduction: `Delta` on the block of the `k`
/// smallest eigenvalues together with dual moves `(df, dg)` such that every
/// tight pair stays tight, the trace is unchanged, and the matched-pair
/// total (the objective) is unchanged.
///
/// On a spanning forest of the tight graph the dual moves are determined by
/// `Delta` (up to one free shift per component, fixed to zero at the root);
/// each remaining tight pair closes a cycle and contributes one equation.
fn guarded_direction(
    state: &State,
    tight: &TightSet,
    sigma: &[usize],
    k: usize,
) -> Option<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    let n = tight.n;
    let r = state.r();
    let start = r - k;
    let vars = sym_vars(k);
    let mut m = vec![0.0; k];
    let q = |i: usize, j: usize, m: &mut Vec<f64>| {
        block_vector(state, start, k, i, j, m);
        DVector::from_vec(quad_row(m))
    };

    let mut forest = Forest::new(2 * n);
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 2 * n];
    let mut chords = Vec::new();
    for &(i, j) in &tight.pairs {
        if forest.union(i, n + j) {
            adjacency[i].push((n + j, j));
            adjacency[n + j].push((i, i));
        } else {
            chords.push((i, j));
        }
    }
    // potentials as linear functionals of the direction coordinates:
    // pot[i] + pot[n + j] = q_ij on every tree edge
    let mut pot: Vec<Option<DVector<f64>>> = vec![None; 2 * n];
    for root in 0..2 * n {
        if pot[root].is_some() {
            continue;
        }
        pot[root] = Some(DVector::zeros(vars));
        let mut stack = vec![root];
        while let Some(u) = stack.pop() {
            let pu = pot[u].clone().expect("visited");
            for &(v, _) in &adjacency[u] {
                if pot[v].is_some() {
                    continue;
                }
                let (i, j) = if u < n { (u, v - n) } else { (v, u - n) };
                pot[v] = Some(q(i, j, &mut m) - &pu);
                stack.push(v);
            }
        }
    }
    let pot: Vec<DVector<f64>> = pot
        .into_iter()
        .map(|p| p.expect("all nodes visited"))
        .collect();

    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(chords.len() + 2);
    let mut trace = DVector::zeros(vars);
    trace.rows_mut(0, k).fill(1.0);
    rows.push(trace);
    let mut objective = DVector::zeros(vars);
    for (i, &j) in sigma.iter().enumerate() {
        objective += q(i, j, &mut m);
    }
    rows.push(objective);
    for &(i, j) in &chords {
        rows.push(q(i, j, &mut m) - &pot[i] - &pot[n + j]);
    }
    let mut a = DMatrix::zeros(rows.len(), vars);
    for (r_idx, row) in rows.iter().enumerate() {
        let norm = row.norm();
        if norm > 1e-300 {
            a.row_mut(r_idx).copy_from(&(row / norm).transpose());
        }
    }
    let preferred: Vec<usize> = (0..k).collect();
    let d = null_vector(&a, SVD_REL_TOL, &preferred)?;
    let df = DVector::from_fn(n, |i, _| pot[i].dot(&d));
    let dg = DVector::from_fn(n, |j, _| pot[n + j].dot(&d));
    Some((unpack(&d, k), df, dg))
}

/// Rates `m_ij^T Delta m_ij` for all pairs, with `Delta` on the block
/// starting at `start`.
fn rate_matrix(state: &State, start: usize, delta: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let k = delta.nrows();
    let pa = state.pa.rows(start, k);
    let pb = state.pb.rows(start, k);
    let da = delta * pa;
    let db = delta * pb;
    let aa: Vec<f64> = (0..n).map(|i| pa.column(i).dot(&da.column(i))).collect();
    let bb: Vec<f64> = (0..n).map(|j| pb.column(j).dot(&db.column(j))).collect();
    let ab = pa.tr_mul(&db);
    DMatrix::from_fn(n, n, |i, j| aa[i] + bb[j] + 2.0 * ab[(i, j)])
}

/// Reduce the rank of `s`.
///
/// Each loop picks a direction on the block of the smallest eigenvalues and
/// walks until an eigenvalue vanishes (or, in guarded mode, until another
/// dual inequality becomes tight).
pub fn reduce(
    s: &SpectrahedronPoint,
    ga: &GramAssembly,
    mode: ReductionMode,
) -> Result<ReducedSolution> {
    let n = ga.n();
    let binding = find_binding(s, ga)?;
    let sigma = binding.sigma().to_vec();
    let mut state = State::new(ga, s.matrix())?;
    state.sort();
    let rank_before = state.rank();
    let value_before = binding.value;
    let mut f = binding.assignment.dual_f.clone();
    let mut g = binding.assignment.dual_g.clone();
    let mut costs = state.costs(n).matrix().clone();
    let scale = 1.0 + costs.max();
    let tight_tol = 1e-10 * scale;

    let mut tight = TightSet::new(n, &sigma);
    if mode == ReductionMode::Guarded {
        for i in 0..n {
            for j in 0..n {
                if costs[(i, j)] - f[i] - g[j] <= tight_tol {
                    tight.insert(i, j);
                }
            }
        }
    }
    let matched: Vec<(usize, usize)> = sigma.iter().copied().enumerate().collect();
    log::debug!(
        "initial tight pairs {} cycles {}",
        tight.pairs.len(),
        tight.cycles()
    );

    let max_loops = 2 * state.r() + 2 * n * n + 8;
    let mut history = Vec::new();
    let (mut loops, mut pivots) = (0, 0);
    while loops + pivots < max_loops {
        let r = state.r();
        if r <= 1 {
            break;
        }
        let (delta, dual_move) = match mode {
            ReductionMode::Fixed => {
                let k = block_size(matched.len(), r);
                let d = block_direction(&state, &matched, k).or_else(|| {
                    if k < r {
                        block_direction(&state, &matched, r)
                    } else {
                        None
                    }
                });
                match d {
                    Some(d) => (d, None),
                    None => break,
                }
            }
            ReductionMode::Guarded => {
                let k = block_size(tight.cycles() + 1, r).max(2.min(r));
                let d = guarded_direction(&state, &tight, &sigma, k).or_else(|| {
                    if k < r {
                        guarded_direction(&state, &tight, &sigma, r)
                    } else {
                        None
                    }
                });
                match d {
                    Some((d, df, dg)) => (d, Some((df, dg))),
                    None => break,
                }
            }
        };
        let kk = delta.nrows();
        let start = state.r() - kk;
        let lam_b = state.lambda.rows(start, kk).into_owned();
        let mut step = step_to_boundary(&lam_b, &delta);
        if !(step > 0.0 && step.is_finite()) {
            break;
        }
        let rates = rate_matrix(&state, start, &delta, n);
        let mut newly_tight = None;
        if let Some((df, dg)) = &dual_move {
            for i in 0..n {
                for j in 0..n {
                    if tight.contains(i, j) {
                        continue;
                    }
                    let rate = rates[(i, j)] - df[i] - dg[j];
                    if rate < 0.0 {
                        let slack = (costs[(i, j)] - f[i] - g[j]).max(0.0);
                        let t = slack / -rate;
                        if t < step {
                            step = t;
                            newly_tight = Some((i, j));
                        }
                    }
                }
            }
            f.axpy(step, df, 1.0);
            g.axpy(step, dg, 1.0);
        }
        costs += &rates * step;

        let mut block = DMatrix::from_diagonal(&lam_b) + &delta * step;
        crate::linalg::symmetrize(&mut block);
        let e = sym_eigen(&block)?;
        let q_b = state.q.columns(start, kk) * &e.vectors;
        let pa_b = e.vectors.tr_mul(&state.pa.rows(start, kk));
        let pb_b = e.vectors.tr_mul(&state.pb.rows(start, kk));
        state.q.columns_mut(start, kk).copy_from(&q_b);
        state.pa.rows_mut(start, kk).copy_from(&pa_b);
        state.pb.rows_mut(start, kk).copy_from(&pb_b);
        for p in 0..kk {
            state.lambda[start + p] = e.values[p];
        }
        if newly_tight.is_none() {
            // the smallest block eigenvalue is zero up to rounding
            state.lambda[start + kk - 1] = 0.0;
        }
        drop_small(&mut state);
        state.sort();
        if let Some((i, j)) = newly_tight {
            tight.insert(i, j);
        }
        if newly_tight.is_some() {
            pivots += 1;
        } else {
            loops += 1;
        }
        history.push(ReductionStep {
            iteration: loops + pivots,
            rank: state.rank(),
            support: state.r(),
            step,
            dual_capped: newly_tight.is_some(),
            min_eigenvalue: state.lambda.min(),
        });
    }

    log::debug!(
        "final tight pairs {} cycles {} r {}",
        tight.pairs.len(),
        tight.cycles(),
        state.r()
    );
    // renormalize the trace against accumulated rounding
    let tr = state.lambda.sum();
    state.lambda /= tr;
    let s_out = state.matrix();
    let costs = state.costs(n);
    let value = ot::solve_exact(&costs).value;
    let mut binding_residual = 0.0f64;
    for (i, &j) in sigma.iter().enumerate() {
        binding_residual = binding_residual.max((costs.get(i, j) - f[i] - g[j]).abs());
    }
    let mut dual_violation = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            dual_violation = dual_violation.max(f[i] + g[j] - costs.get(i, j));
        }
    }
    let s = SpectrahedronPoint::new(s_out)
        .map_err(|_| KmsError::Numerical("reduced matrix left the spectrahedron".into()))?;
    Ok(ReducedSolution {
        s,
        rank: state.rank(),
        rank_before,
        k_bound: rank_bound(n),
        loops,
        pivots,
        binding: BindingSet {
            assignment: Assignment {
                sigma,
                dual_f: f,
                dual_g: g,
            },
            value: binding.value,
        },
        value,
        value_before,
        binding_residual,
        dual_violation,
        eigenvectors: state.q,
        eigenvalues: state.lambda,
        history,
    })
}

fn drop_small(state: &mut State) {
    let keep: Vec<usize> = (0..state.r())
        .filter(|&k| state.lambda[k] > DROP_TOL)
        .collect();
    if keep.len() == state.r() {
        return;
    }
    state.q = DMatrix::from_fn(state.q.nrows(), keep.len(), |i, c| state.q[(i, keep[c])]);
    state.lambda = DVector::from_fn(keep.len(), |c, _| state.lambda[keep[c]]);
    state.pa = DMatrix::from_fn(keep.len(), state.pa.ncols(), |c, i| state.pa[(keep[c], i)]);
    state.pb = DMatrix::from_fn(keep.len(), state.pb.ncols(), |c, i| state.pb[(keep[c], i)]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_bound_table() {
        let table = [
            (200, 19),
            (250, 21),
            (300, 24),
            (350, 26),
            (400, 27),
            (450, 29),
            (500, 31),
        ];
        for (n, k) in table {
            assert_eq!(rank_bound(n), k, "n = {n}");
        }
        assert_eq!(rank_bound(1), 1);
        for n in 1..2000 {
            let k = rank_bound(n);
            assert!(k * (k + 1) / 2 <= n + 1 && (k + 1) * (k + 2) / 2 > n + 1);
        }
    }

    #[test]
    fn step_to_boundary_diagonal() {
        let lambda = DVector::from_vec(vec![1.0, 1.0]);
        let s = 1.0 / std::f64::consts::SQRT_2;
        let delta = DMatrix::from_diagonal(&DVector::from_vec(vec![s, -s]));
        let t = step_to_boundary(&lambda, &delta);
        assert!((t - std::f64::consts::SQRT_2).abs() < 1e-12);
        let after = DVector::from_vec(vec![1.0 + t * s, 1.0 - t * s]);
        assert!(after[1].abs() < 1e-12);
    }

    #[test]
    fn quad_row_is_inner_product() {
        let m = [0.3, -1.2, 0.7];
        let d = DVector::from_vec(vec![0.1, 0.5, -0.6, 0.2, -0.3, 0.9]);
        let delta = unpack(&d, 3);
        let mv = DVector::from_row_slice(&m);
        let direct = (mv.transpose() * &delta * &mv)[(0, 0)];
        let via_row: f64 = quad_row(&m).iter().zip(d.iter()).map(|(a, b)| a * b).sum();
        assert!((direct - via_row).abs() < 1e-14);
        assert!((delta.norm() - d.norm()).abs() < 1e-14);
    }
}
