//! Dense symmetric linear algebra used throughout the solvers.
//!
//! Matrices are `nalgebra` types; the symmetric eigensolver is delegated to
//! `faer`, which is markedly faster on the 2n x 2n matrices that dominate the
//! mirror-ascent loop.

use nalgebra::{DMatrix, DVector};

use crate::error::{KmsError, Result};

/// Eigendecomposition `A = V diag(values) V^T` with eigenvalues sorted in
/// descending order.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    /// Rebuild `V diag(f(values)) V^T`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[k]);
        }
        let mut out = scaled * self.vectors.transpose();
        symmetrize(&mut out);
        out
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Symmetric eigendecomposition. Only the lower triangle of `a` is read.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(KmsError::DimensionMismatch {
            expected: n,
            actual: a.ncols(),
        });
    }
    if n == 0 {
        return Ok(SymEigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(KmsError::Numerical(
            "non-finite entry in symmetric eigenproblem".into(),
        ));
    }
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| a[(i, j)]);
    let evd = m
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| KmsError::Numerical(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    // faer sorts ascending; flip to descending.
    let values = DVector::from_fn(n, |k, _| s[n - 1 - k]);
    let vectors = DMatrix::from_fn(n, n, |i, k| u[(i, n - 1 - k)]);
    Ok(SymEigen { values, vectors })
}

/// Largest eigenvalue together with a unit eigenvector.
pub fn top_eigenpair(a: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let e = sym_eigen(a)?;
    if e.values.is_empty() {
        return Err(KmsError::Degenerate("empty matrix".into()));
    }
    Ok((e.values[0], e.vectors.column(0).into_owned()))
}

/// In-place `(A + A^T) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Frobenius inner product `<A, B> = trace(A^T B)`.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Matrix logarithm of a symmetric positive definite matrix. Eigenvalues
/// are clamped at `1e-300` before taking the log.
pub fn sym_logm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = sym_eigen(a)?;
    Ok(e.reconstruct_with(|v| v.max(1e-300).ln()))
}

/// `exp(A) / trace(exp(A))` for symmetric `A`, evaluated with the largest
/// eigenvalue shifted out so the exponentials cannot overflow.
pub fn sym_softmax(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, SymEigen)> {
    let e = sym_eigen(a)?;
    let weights = softmax_weights(&e.values);
    let spectral = SymEigen {
        values: weights,
        vectors: e.vectors,
    };
    let s = spectral.reconstruct_with(|v| v);
    Ok((s, spectral))
}

pub(crate) fn softmax_weights(values: &DVector<f64>) -> DVector<f64> {
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w = values.map(|v| (v - top).exp());
    let total: f64 = w.iter().sum();
    w /= total;
    w
}

/// A unit vector in the null space of `a`, or `None` when `a` has full
/// column rank. Singular values below `rel_tol * sigma_max` count as zero.
///
/// Candidates are the coordinate vectors projected onto the orthogonal
/// complement of the row space; the one with the largest residual wins,
/// restricted to `preferred` coordinates when any of those qualify.
pub fn null_vector(a: &DMatrix<f64>, rel_tol: f64, preferred: &[usize]) -> Option<DVector<f64>> {
    let cols = a.ncols();
    if cols == 0 {
        return None;
    }
    let basis = row_space_basis(a, rel_tol);
    let rank = basis.nrows();
    if rank >= cols {
        return None;
    }
    // residual norm^2 of e_l after removing the row space = 1 - sum_k V[k,l]^2
    let residual = |l: usize| -> f64 {
        let s: f64 = (0..rank).map(|k| basis[(k, l)] * basis[(k, l)]).sum();
        1.0 - s
    };
    let pick = |cands: &mut dyn Iterator<Item = usize>| -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for l in cands {
            let r = residual(l);
            if best.is_none_or(|(_, b)| r > b + 1e-12) {
                best = Some((l, r));
            }
        }
        best
    };
    let floor = 1e-6 / cols as f64;
    let choice = match pick(&mut preferred.iter().copied()) {
        Some((l, r)) if r > floor => l,
        _ => pick(&mut (0..cols))?.0,
    };
    let mut d = DVector::zeros(cols);
    d[choice] = 1.0;
    for k in 0..rank {
        let coef = basis[(k, choice)];
        for l in 0..cols {
            d[l] -= coef * basis[(k, l)];
        }
    }
    let norm = d.norm();
    if norm < 1e-12 {
        return None;
    }
    Some(d / norm)
}

/// Orthonormal basis (as rows) of the row space of `a`.
fn row_space_basis(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let cols = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::zeros(0, cols);
    }
    // Work with the smaller Gram side: rows of `a` span the row space, and an
    // SVD of `a` (thin) gives V^T with min(rows, cols) rows.
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return DMatrix::zeros(0, cols);
    }
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > rel_tol * smax)
        .map(|(k, _)| k)
        .collect();
    DMatrix::from_fn(keep.len(), cols, |r, c| v_t[(keep[r], c)])
}
