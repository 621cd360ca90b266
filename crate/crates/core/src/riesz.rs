//! The kernel ridge Riesz representer, its trimming, and cross-validation.
//!
//! The estimator minimizes the empirical Riesz loss
//!
//! ```text
//! L(alpha) = -2 <alpha, M* mu_hat> + <alpha, T_hat alpha> + lambda |alpha|^2
//! ```
//!
//! whose solution `alpha_hat = (T_hat + lambda)^{-1} M* mu_hat` lies in the
//! span of the features `phi(W_i)` and the transformed features
//! `M* phi(r_j)` of the moment rows. Two routes compute its coefficients:
//!
//! * [`RieszSolver::Reduced`] (default) uses the resolvent identity
//!   `alpha = (M* mu_hat - T_hat alpha) / lambda`, which gives
//!   `rho = [-beta / lambda ; 1 / (n~ lambda)]` with `(K1 + n lambda) beta = h`
//!   and `h_i = (K2 1)_i / n~`. This is an exact solution of the extended
//!   system `(Omega + n lambda K) rho = v` from an `n x n` positive definite
//!   solve, further merged over identical rows.
//! * [`RieszSolver::Extended`] factors the `(n + n~)`-dimensional extended
//!   system directly, falling back to a spectral minimum-norm solve when it
//!   is numerically singular (which it always is in exact arithmetic, since
//!   the transformed features are linear combinations of kernel sections
//!   whenever rows repeat).
//!
//! Both routes give the same function `alpha_hat`; the coefficient vectors
//! may differ by an element of the null space.

use faer::Mat;

use crate::dml::{FoldPlan, Nuisance};
use crate::error::{Error, Result};
use crate::functionals::{BoundFunctional, FunctionalSpec};
use crate::kernels::KernelSpec;
use crate::krr::{check_grid, check_lambda, CompressedSystem, FoldPath, TuningResult};
use crate::linalg::{self, SolvePath};
use crate::table::{Dataset, FeatureTable, UniqueRows};

/// Relative residual accepted from a factorization of the extended system.
pub const EXTENDED_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RieszSolver {
    #[default]
    Reduced,
    Extended,
}

/// A fitted Riesz representer
/// `alpha(w) = sum_g a_g k(s_g, w) + sum_q b_q k~(r_q, w)`.
#[derive(Debug, Clone)]
pub struct RieszEstimate {
    bound: BoundFunctional,
    lambda: f64,
    trim: Option<f64>,
    basis: FeatureTable,
    basis_coef: Vec<f64>,
    moments: FeatureTable,
    moment_coef: Vec<f64>,
    rho: Vec<f64>,
    solver: RieszSolver,
    path: Option<SolvePath>,
}

/// Fits the Riesz representer of `f` with the default reduced solver.
pub fn fit_riesz(data: &FeatureTable, f: &FunctionalSpec, spec: &KernelSpec, lambda: f64) -> Result<RieszEstimate> {
    fit_riesz_with(data, &f.bind(spec)?, lambda, RieszSolver::Reduced)
}

pub fn fit_riesz_with(data: &FeatureTable, bound: &BoundFunctional, lambda: f64, solver: RieszSolver) -> Result<RieszEstimate> {
    check_lambda(lambda)?;
    if data.nrows() == 0 {
        return Err(Error::input("Riesz representer needs at least one row"));
    }
    bound.kernel().check_table(data)?;
    match solver {
        RieszSolver::Reduced => fit_reduced(data, bound, lambda),
        RieszSolver::Extended => fit_extended(data, bound, lambda),
    }
}

/// `h_g = (1/n~) sum_q cnt_q k~(r_q, s_g)` for every distinct training row.
fn moment_embedding(bound: &BoundFunctional, basis: &FeatureTable, moments: &UniqueRows, n_moments: usize) -> Vec<f64> {
    let scale = 1.0 / n_moments as f64;
    basis
        .rows()
        .map(|s| {
            // k~(r, s) = gate(r) e(s) k_rest(r, s); e(s) does not depend on r.
            let e = bound.embed(s);
            if e == 0.0 {
                return 0.0;
            }
            let acc: f64 = moments
                .rows
                .rows()
                .zip(&moments.counts)
                .map(|(r, &c)| {
                    let g = bound.gate(r);
                    if g == 0.0 {
                        0.0
                    } else {
                        c as f64 * g * bound.k_rest(r, s)
                    }
                })
                .sum();
            acc * e * scale
        })
        .collect()
}

fn fit_reduced(data: &FeatureTable, bound: &BoundFunctional, lambda: f64) -> Result<RieszEstimate> {
    let n = data.nrows();
    let moment_rows = bound.functional().moment_rows(data);
    let n_moments = moment_rows.nrows();
    let groups = UniqueRows::new(data);
    let moments = UniqueRows::new(moment_rows);
    let h = moment_embedding(bound, &groups.rows, &moments, n_moments);
    let sums: Vec<f64> = h.iter().zip(&groups.counts).map(|(h, &c)| h * c as f64).collect();
    let ks = bound.kernel().gram_sym_unchecked(&groups.rows);
    let coef = CompressedSystem::new(&ks, &groups.counts, n).solve(&sums, lambda)?;

    let mut rho: Vec<f64> = groups
        .group_of
        .iter()
        .map(|&g| -coef[g] / (groups.counts[g] as f64 * lambda))
        .collect();
    let tail = 1.0 / (n_moments as f64 * lambda);
    rho.extend(std::iter::repeat_n(tail, n_moments));
    Ok(RieszEstimate {
        bound: bound.clone(),
        lambda,
        trim: None,
        basis_coef: coef.iter().map(|b| -b / lambda).collect(),
        basis: groups.rows,
        moment_coef: moments.counts.iter().map(|&c| c as f64 * tail).collect(),
        moments: moments.rows,
        rho,
        solver: RieszSolver::Reduced,
        path: None,
    })
}

fn fit_extended(data: &FeatureTable, bound: &BoundFunctional, lambda: f64) -> Result<RieszEstimate> {
    let n = data.nrows();
    let ext = bound.extended_kernel(data)?;
    let dim = ext.dim();
    let nl = n as f64 * lambda;
    let mut a = Mat::from_fn(dim, dim, |i, j| ext.omega[(i, j)] + nl * ext.k[(i, j)]);
    linalg::symmetrize(&mut a);
    let (rho, path) = linalg::solve_psd(&a, &ext.v, Some(EXTENDED_RESIDUAL_TOL), true)?;
    if rho.iter().any(|r| !r.is_finite()) {
        return Err(Error::numerical("extended Riesz system produced non-finite coefficients"));
    }
    Ok(RieszEstimate {
        bound: bound.clone(),
        lambda,
        trim: None,
        basis: data.clone(),
        basis_coef: rho[..n].to_vec(),
        moments: bound.functional().moment_rows(data).clone(),
        moment_coef: rho[n..].to_vec(),
        rho,
        solver: RieszSolver::Extended,
        path: Some(path),
    })
}

impl RieszEstimate {
    /// Clips every evaluation to `[-bound, bound]`.
    pub fn with_trim(mut self, bound: Option<f64>) -> Result<Self> {
        if let Some(b) = bound {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::config(format!("trim bound must be positive and finite, got {b}")));
            }
        }
        self.trim = bound;
        Ok(self)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn trim(&self) -> Option<f64> {
        self.trim
    }

    pub fn solver(&self) -> RieszSolver {
        self.solver
    }

    /// How the extended system was solved, for the extended route.
    pub fn solve_path(&self) -> Option<SolvePath> {
        self.path
    }

    pub fn bound(&self) -> &BoundFunctional {
        &self.bound
    }

    /// Coefficients over `[phi(W_1..W_n), M* phi(r_1..r_n~)]`.
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// Replaces the coefficients by `rho + delta` (used to check that the
    /// verification suite notices perturbations).
    pub fn perturbed(&self, data: &FeatureTable, delta: f64) -> Self {
        let n = data.nrows();
        let rho: Vec<f64> = self.rho.iter().map(|r| r + delta).collect();
        Self {
            basis: data.clone(),
            basis_coef: rho[..n].to_vec(),
            moments: self.bound.functional().moment_rows(data).clone(),
            moment_coef: rho[n..].to_vec(),
            rho,
            ..self.clone()
        }
    }

    /// `alpha_hat(w)`, clipped when a trim bound is set.
    pub fn alpha_at(&self, w: &[f64]) -> Result<f64> {
        self.bound.kernel().check_row(w)?;
        Ok(self.alpha_unchecked(w))
    }

    pub fn alpha_unchecked(&self, w: &[f64]) -> f64 {
        let raw = self.raw_alpha(w);
        match self.trim {
            Some(b) => raw.clamp(-b, b),
            None => raw,
        }
    }

    /// Untrimmed `alpha_hat(w)`.
    pub fn raw_alpha(&self, w: &[f64]) -> f64 {
        let k = self.bound.kernel();
        let a: f64 = self
            .basis
            .rows()
            .zip(&self.basis_coef)
            .map(|(s, c)| c * k.eval_unchecked(s, w))
            .sum();
        let e = self.bound.embed(w);
        if e == 0.0 {
            return a;
        }
        let b: f64 = self
            .moments
            .rows()
            .zip(&self.moment_coef)
            .map(|(r, c)| {
                let g = self.bound.gate(r);
                if g == 0.0 {
                    0.0
                } else {
                    c * g * self.bound.k_rest(r, w)
                }
            })
            .sum();
        a + e * b
    }

    /// `m(row, alpha_hat)` for the untrimmed estimate, from the blocks.
    pub fn m_alpha(&self, row: &[f64]) -> f64 {
        let a: f64 = self
            .basis
            .rows()
            .zip(&self.basis_coef)
            .map(|(s, c)| c * self.bound.ktilde(row, s))
            .sum();
        let b: f64 = self
            .moments
            .rows()
            .zip(&self.moment_coef)
            .map(|(r, c)| c * self.bound.k4(row, r))
            .sum();
        a + b
    }
}

impl Nuisance for RieszEstimate {
    fn value(&self, w: &[f64]) -> f64 {
        self.alpha_unchecked(w)
    }
}

/// Picks `lambda` by the cross-validated Riesz loss
/// `(1/n) sum_l sum_{i in I_l} { -2 m(W_i, alpha_l) + alpha_l(W_i)^2 }`.
///
/// Under distribution shift the moment term is the average over the
/// alternative population, weighted by the fold's share of the sample.
pub fn tune_riesz(data: &FeatureTable, bound: &BoundFunctional, grid: &[f64], plan: &FoldPlan) -> Result<TuningResult> {
    check_grid(grid)?;
    plan.check_len(data.nrows())?;
    bound.kernel().check_table(data)?;
    let mut totals = vec![0.0; grid.len()];
    for fold in plan.fold_ids() {
        let losses = FoldPath::new(data, bound.kernel(), plan, fold)
            .map(|fp| riesz_fold_losses(&fp, data, bound, grid, plan, fold))
            .map_err(|e| e.in_fold(fold))?;
        for (t, l) in totals.iter_mut().zip(losses) {
            *t += l;
        }
    }
    let n = data.nrows() as f64;
    Ok(TuningResult::from_losses(grid, totals.into_iter().map(|t| t / n).collect()))
}

/// Tunes the outcome regression and the Riesz representer on the same
/// folds, decomposing each training fold's Gram matrix once. Returns the
/// same results as [`tune_krr`](crate::krr::tune_krr) and [`tune_riesz`].
pub fn tune_joint(data: &Dataset, bound: &BoundFunctional, grid: &[f64], plan: &FoldPlan) -> Result<(TuningResult, TuningResult)> {
    check_grid(grid)?;
    plan.check_len(data.len())?;
    bound.kernel().check_table(&data.x)?;
    let mut gamma = vec![0.0; grid.len()];
    let mut alpha = vec![0.0; grid.len()];
    for fold in plan.fold_ids() {
        let (lg, la) = FoldPath::new(&data.x, bound.kernel(), plan, fold)
            .map(|fp| {
                (
                    fp.krr_losses(data, bound.kernel(), grid, plan, fold),
                    riesz_fold_losses(&fp, &data.x, bound, grid, plan, fold),
                )
            })
            .map_err(|e| e.in_fold(fold))?;
        gamma.iter_mut().zip(lg).for_each(|(t, l)| *t += l);
        alpha.iter_mut().zip(la).for_each(|(t, l)| *t += l);
    }
    let n = data.len() as f64;
    let finish = |v: Vec<f64>| TuningResult::from_losses(grid, v.into_iter().map(|t| t / n).collect());
    Ok((finish(gamma), finish(alpha)))
}

fn riesz_fold_losses(fp: &FoldPath, data: &FeatureTable, bound: &BoundFunctional, grid: &[f64], plan: &FoldPlan, fold: usize) -> Vec<f64> {
    let k = bound.kernel();
    let train = data.select_rows(&plan.complement(fold));
    let held = data.select_rows(&plan.indices(fold));
    let moment_rows = bound.functional().moment_rows(&train);
    let n_moments = moment_rows.nrows();
    let groups = &fp.groups;
    let path = &fp.path;
    let moments = UniqueRows::new(moment_rows);
    let h = moment_embedding(bound, &groups.rows, &moments, n_moments);
    let sums: Vec<f64> = h.iter().zip(&groups.counts).map(|(h, &c)| h * c as f64).collect();

    // alpha(w) = (-(k(w, s) . B) + e(w)) / lambda, with e(w) the moment embedding at w.
    let held_groups = UniqueRows::new(&held);
    let cross = k.gram_unchecked(&held_groups.rows, &groups.rows);
    let e_held = moment_embedding(bound, &held_groups.rows, &moments, n_moments);

    // m(a, alpha) = (-(k~(a, s) . B) + f(a)) / lambda over the rows where m is averaged.
    let shifted = bound.functional().population().is_some();
    let (m_rows, m_weight) = if shifted {
        let pop = UniqueRows::new(bound.functional().moment_rows(&train));
        let total = bound.functional().moment_rows(&train).nrows() as f64;
        let weights: Vec<f64> = pop.counts.iter().map(|&c| c as f64 * held.nrows() as f64 / total).collect();
        (pop.rows, weights)
    } else {
        let weights = held_groups.counts.iter().map(|&c| c as f64).collect();
        (held_groups.rows.clone(), weights)
    };
    let e_train: Vec<f64> = groups.rows.rows().map(|s| bound.embed(s)).collect();
    let m_cross = Mat::from_fn(m_rows.nrows(), groups.len(), |i, j| {
        let a = m_rows.row(i);
        let g = bound.gate(a);
        if g == 0.0 || e_train[j] == 0.0 {
            0.0
        } else {
            g * e_train[j] * bound.k_rest(a, groups.rows.row(j))
        }
    });
    let scale = 1.0 / n_moments as f64;
    let m_free: Vec<f64> = m_rows
        .rows()
        .map(|a| {
            moments
                .rows
                .rows()
                .zip(&moments.counts)
                .map(|(r, &c)| c as f64 * bound.k4(a, r))
                .sum::<f64>()
                * scale
        })
        .collect();

    grid
        .iter()
        .map(|&lambda| {
            let coef = path.solve(&sums, lambda);
            let fit = linalg::matvec(&cross, &coef);
            let sq: f64 = fit
                .iter()
                .zip(&e_held)
                .zip(&held_groups.counts)
                .map(|((f, e), &c)| c as f64 * ((e - f) / lambda).powi(2))
                .sum();
            let mfit = linalg::matvec(&m_cross, &coef);
            let lin: f64 = mfit
                .iter()
                .zip(&m_free)
                .zip(&m_weight)
                .map(|((f, e), w)| w * (e - f) / lambda)
                .sum();
            -2.0 * lin + sq
        })
        .collect()
}
