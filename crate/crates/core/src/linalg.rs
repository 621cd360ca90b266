//! Dense solvers shared by the ridge estimators.

use std::sync::Once;

use faer::linalg::solvers::Solve;
use faer::{Mat, Par, Side};

use crate::error::{Error, Result};

/// Jitter ladder bounds, as multiples of `trace / n`.
pub const JITTER_START: f64 = 1e-10;
pub const JITTER_STOP: f64 = 1e-6;
/// Relative eigenvalue cutoff for the minimum-norm fallback.
pub const PINV_CUTOFF: f64 = 1e-10;

static SEQUENTIAL: Once = Once::new();

/// Pins faer to sequential kernels so factorizations are bitwise
/// reproducible whatever the thread count. Parallelism lives one level up.
pub fn ensure_sequential() {
    SEQUENTIAL.call_once(|| faer::set_global_parallelism(Par::Seq));
}

pub fn trace(a: &Mat<f64>) -> f64 {
    (0..a.nrows()).map(|i| a[(i, i)]).sum()
}

pub fn matvec(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), x.len());
    let mut out = vec![0.0; a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = a.col(j);
        for (o, &aij) in out.iter_mut().zip(col.iter()) {
            *o += aij * xj;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn column(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

/// `||a x - b|| / max(||b||, tiny)`.
pub fn relative_residual(a: &Mat<f64>, x: &[f64], b: &[f64]) -> f64 {
    let ax = matvec(a, x);
    let r: Vec<f64> = ax.iter().zip(b).map(|(p, q)| p - q).collect();
    norm(&r) / norm(b).max(f64::MIN_POSITIVE)
}

pub fn symmetrize(a: &mut Mat<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = s;
            a[(j, i)] = s;
        }
    }
}

/// How a symmetric system ended up being solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolvePath {
    Cholesky { jitter: f64 },
    MinimumNorm,
}

/// Solves `a x = b` for symmetric positive (semi)definite `a`.
///
/// Tries a Cholesky factorization, then adds diagonal jitter starting at
/// `1e-10 * trace / n` and growing tenfold up to `1e-6 * trace / n`. When
/// `residual_tol` is given, a factorization only counts as successful if the
/// relative residual against the unjittered matrix is within it. With
/// `allow_min_norm`, the last resort is a spectral minimum-norm solve.
pub fn solve_psd(
    a: &Mat<f64>,
    b: &[f64],
    residual_tol: Option<f64>,
    allow_min_norm: bool,
) -> Result<(Vec<f64>, SolvePath)> {
    ensure_sequential();
    let n = a.nrows();
    if n == 0 {
        return Ok((Vec::new(), SolvePath::Cholesky { jitter: 0.0 }));
    }
    let scale = (trace(a) / n as f64).abs().max(f64::MIN_POSITIVE);
    let rhs = column(b);
    let mut jitter = 0.0;
    loop {
        let shifted;
        let m = if jitter == 0.0 {
            a
        } else {
            shifted = Mat::from_fn(n, n, |i, j| a[(i, j)] + if i == j { jitter } else { 0.0 });
            &shifted
        };
        if let Ok(llt) = m.llt(Side::Lower) {
            let x = llt.solve(&rhs);
            let x: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
            let ok = x.iter().all(|v| v.is_finite())
                && residual_tol.is_none_or(|tol| relative_residual(a, &x, b) <= tol);
            if ok {
                return Ok((x, SolvePath::Cholesky { jitter }));
            }
        }
        jitter = if jitter == 0.0 {
            JITTER_START * scale
        } else {
            jitter * 10.0
        };
        if jitter > JITTER_STOP * scale * (1.0 + 1e-9) {
            break;
        }
    }
    if allow_min_norm {
        let spec = Spectral::new(a)?;
        let x = spec.pinv_solve(b, PINV_CUTOFF);
        return Ok((x, SolvePath::MinimumNorm));
    }
    Err(Error::numerical(format!(
        "{n}x{n} system is singular after jitter up to {:.1e} x trace/n",
        JITTER_STOP
    )))
}

/// Eigendecomposition `a = Q diag(values) Q'` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct Spectral {
    pub vectors: Mat<f64>,
    pub values: Vec<f64>,
}

impl Spectral {
    pub fn new(a: &Mat<f64>) -> Result<Self> {
        ensure_sequential();
        let evd = a
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::numerical(format!("eigendecomposition failed: {e:?}")))?;
        let values: Vec<f64> = evd.S().column_vector().iter().copied().collect();
        Ok(Self {
            vectors: evd.U().to_owned(),
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `Q' b`.
    pub fn project(&self, b: &[f64]) -> Vec<f64> {
        let q = &self.vectors;
        (0..self.dim()).map(|k| dot(q.col(k).try_as_col_major().unwrap().as_slice(), b)).collect()
    }

    /// `Q c`.
    pub fn expand(&self, c: &[f64]) -> Vec<f64> {
        matvec(&self.vectors, c)
    }

    /// Solves `(a + shift I) x = b` for a PSD `a`, clamping rounding-level
    /// negative eigenvalues to zero.
    pub fn solve_shifted(&self, shift: f64, b: &[f64]) -> Vec<f64> {
        let proj = self.project(b);
        let scaled: Vec<f64> = proj
            .iter()
            .zip(&self.values)
            .map(|(p, &l)| p / (l.max(0.0) + shift))
            .collect();
        self.expand(&scaled)
    }

    /// Minimum-norm least-squares solution, discarding eigenvalues below
    /// `rel_cutoff` times the largest one.
    pub fn pinv_solve(&self, b: &[f64], rel_cutoff: f64) -> Vec<f64> {
        let top = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cut = rel_cutoff * top;
        let proj = self.project(b);
        let scaled: Vec<f64> = proj
            .iter()
            .zip(&self.values)
            .map(|(p, &l)| if l.abs() > cut { p / l } else { 0.0 })
            .collect();
        self.expand(&scaled)
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Mat<f64>) -> Result<f64> {
    ensure_sequential();
    let vals = a
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::numerical(format!("eigenvalue computation failed: {e:?}")))?;
    Ok(vals.into_iter().fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_path_on_pd_matrix() {
        let a = Mat::from_fn(2, 2, |i, j| if i == j { 2.0 } else { 1.0 });
        let (x, path) = solve_psd(&a, &[3.0, 3.0], Some(1e-12), false).unwrap();
        assert_eq!(path, SolvePath::Cholesky { jitter: 0.0 });
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_system_falls_back_to_minimum_norm() {
        // Rank one: [1 1; 1 1] x = [2; 2] has minimum-norm solution (1, 1).
        let a = Mat::from_fn(2, 2, |_, _| 1.0);
        let (x, path) = solve_psd(&a, &[2.0, 2.0], Some(1e-14), true).unwrap();
        assert_eq!(path, SolvePath::MinimumNorm);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_without_fallback_errors() {
        let a = Mat::from_fn(2, 2, |i, j| if i == 0 && j == 0 { 1.0 } else { 0.0 });
        let a = {
            let mut m = a;
            m[(1, 1)] = -1.0;
            m
        };
        assert!(matches!(solve_psd(&a, &[1.0, 1.0], None, false), Err(Error::Numerical(_))));
    }

    #[test]
    fn spectral_shifted_solve_matches_direct() {
        let a = Mat::from_fn(3, 3, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let s = Spectral::new(&a).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = s.solve_shifted(0.3, &b);
        let shifted = Mat::from_fn(3, 3, |i, j| a[(i, j)] + if i == j { 0.3 } else { 0.0 });
        assert!(relative_residual(&shifted, &x, &b) < 1e-13);
    }
}
