//! Kernel ridge regression, the default outcome-regression nuisance.
//!
//! The fit solves `(K + n lambda I) beta = Y` and predicts with
//! `gamma(w) = sum_i beta_i k(W_i, w)`. Identical feature rows are merged
//! first (see [`UniqueRows`]): with group counts `N` and the Gram matrix `K_s`
//! of the distinct rows, the group totals `B_g = sum_{i in g} beta_i` solve
//!
//! ```text
//! (N^{1/2} K_s N^{1/2} + n lambda I) C = N^{-1/2} Ysum,   B = N^{1/2} C
//! ```
//!
//! which is the same estimator on a system the size of the support.

use faer::Mat;

use crate::dml::{FoldPlan, Nuisance};
use crate::error::{Error, Result};
use crate::functionals::BoundFunctional;
use crate::kernels::KernelSpec;
use crate::linalg::{self, Spectral};
use crate::table::{Dataset, FeatureTable, UniqueRows};

/// Number of points in the default regularization grid.
pub const DEFAULT_GRID_POINTS: usize = 10;
pub const DEFAULT_GRID_MIN: f64 = 1e-6;
pub const DEFAULT_GRID_MAX: f64 = 1e2;
pub const DEFAULT_TUNING_FOLDS: usize = 5;

/// `points` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..points)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (points - 1) as f64))
                .collect()
        }
    }
}

/// Ten log-spaced values in `[1e-6, 1e2]`.
pub fn default_grid() -> Vec<f64> {
    log_grid(DEFAULT_GRID_MIN, DEFAULT_GRID_MAX, DEFAULT_GRID_POINTS)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("regularization must be positive and finite, got {lambda}")))
    }
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config("regularization grid is empty"));
    }
    grid.iter().try_for_each(|&l| check_lambda(l))
}

/// Index of the smallest loss; exact ties go to the largest lambda.
pub(crate) fn select_lambda(grid: &[f64], losses: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..grid.len() {
        let better = losses[i] < losses[best] || (losses[i] == losses[best] && grid[i] > grid[best]);
        if better {
            best = i;
        }
    }
    best
}

/// Cross-validation outcome over a regularization grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningResult {
    pub lambda: f64,
    pub grid: Vec<f64>,
    pub losses: Vec<f64>,
}

impl TuningResult {
    pub(crate) fn from_losses(grid: &[f64], losses: Vec<f64>) -> Self {
        let best = select_lambda(grid, &losses);
        Self {
            lambda: grid[best],
            grid: grid.to_vec(),
            losses,
        }
    }
}

/// Merged-row ridge system `(N^{1/2} K_s N^{1/2} + n lambda) C = rhs`.
pub(crate) struct CompressedSystem {
    sym: Mat<f64>,
    sqrt_counts: Vec<f64>,
    n: usize,
}

impl CompressedSystem {
    pub(crate) fn new(ks: &Mat<f64>, counts: &[usize], n: usize) -> Self {
        let sqrt_counts: Vec<f64> = counts.iter().map(|&c| (c as f64).sqrt()).collect();
        let m = counts.len();
        let sym = Mat::from_fn(m, m, |i, j| sqrt_counts[i] * ks[(i, j)] * sqrt_counts[j]);
        Self { sym, sqrt_counts, n }
    }

    fn rhs(&self, group_sums: &[f64]) -> Vec<f64> {
        group_sums.iter().zip(&self.sqrt_counts).map(|(s, r)| s / r).collect()
    }

    fn unscale(&self, c: Vec<f64>) -> Vec<f64> {
        c.into_iter().zip(&self.sqrt_counts).map(|(c, r)| c * r).collect()
    }

    /// Group totals `B` by a jittered Cholesky solve.
    pub(crate) fn solve(&self, group_sums: &[f64], lambda: f64) -> Result<Vec<f64>> {
        let m = self.sym.nrows();
        let shift = self.n as f64 * lambda;
        let a = Mat::from_fn(m, m, |i, j| self.sym[(i, j)] + if i == j { shift } else { 0.0 });
        let (c, _) = linalg::solve_psd(&a, &self.rhs(group_sums), None, false)?;
        Ok(self.unscale(c))
    }

    /// Eigendecomposition for solving at many regularization levels.
    pub(crate) fn path(self) -> Result<RidgePath> {
        let spectral = Spectral::new(&self.sym)?;
        Ok(RidgePath { system: self, spectral })
    }
}

pub(crate) struct RidgePath {
    system: CompressedSystem,
    spectral: Spectral,
}

impl RidgePath {
    pub(crate) fn solve(&self, group_sums: &[f64], lambda: f64) -> Vec<f64> {
        let rhs = self.system.rhs(group_sums);
        let c = self.spectral.solve_shifted(self.system.n as f64 * lambda, &rhs);
        self.system.unscale(c)
    }
}

/// A fitted kernel ridge regression.
#[derive(Debug, Clone)]
pub struct KrrEstimate {
    spec: KernelSpec,
    lambda: f64,
    /// Distinct training rows.
    basis: FeatureTable,
    /// Summed coefficients of each distinct row.
    coef: Vec<f64>,
    /// Per-observation coefficients of the uncompressed system.
    beta: Vec<f64>,
}

/// Fits `gamma` by kernel ridge regression.
pub fn fit_krr(features: &FeatureTable, outcomes: &[f64], spec: &KernelSpec, lambda: f64) -> Result<KrrEstimate> {
    check_lambda(lambda)?;
    let n = features.nrows();
    if n == 0 {
        return Err(Error::input("kernel ridge regression needs at least one row"));
    }
    if outcomes.len() != n {
        return Err(Error::input(format!("{} outcomes for {n} feature rows", outcomes.len())));
    }
    if outcomes.iter().any(|y| !y.is_finite()) {
        return Err(Error::input("outcomes must be finite"));
    }
    spec.check_table(features)?;
    let groups = UniqueRows::new(features);
    let ks = spec.gram_sym_unchecked(&groups.rows);
    let system = CompressedSystem::new(&ks, &groups.counts, n);
    let coef = system.solve(&groups.group_sums(outcomes), lambda)?;
    let fitted = linalg::matvec(&ks, &coef);
    let nl = n as f64 * lambda;
    let beta = outcomes
        .iter()
        .zip(&groups.group_of)
        .map(|(y, &g)| (y - fitted[g]) / nl)
        .collect();
    Ok(KrrEstimate {
        spec: spec.clone(),
        lambda,
        basis: groups.rows,
        coef,
        beta,
    })
}

impl KrrEstimate {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// Coefficients `beta` of `(K + n lambda I) beta = Y`, one per training row.
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn predict(&self, w: &[f64]) -> Result<f64> {
        self.spec.check_row(w)?;
        Ok(self.predict_unchecked(w))
    }

    pub fn predict_unchecked(&self, w: &[f64]) -> f64 {
        self.basis
            .rows()
            .zip(&self.coef)
            .map(|(s, c)| c * self.spec.eval_unchecked(s, w))
            .sum()
    }

    /// `m(row, gamma_hat)` through the kernel sections, avoiding repeated
    /// evaluation of `gamma_hat` at every queried point.
    pub fn m_value(&self, f: &BoundFunctional, row: &[f64]) -> f64 {
        if f.kernel() != &self.spec {
            return f.functional().m_value(row, &|z: &[f64]| self.predict_unchecked(z));
        }
        self.basis
            .rows()
            .zip(&self.coef)
            .map(|(s, c)| c * f.ktilde(row, s))
            .sum()
    }
}

impl Nuisance for KrrEstimate {
    fn value(&self, w: &[f64]) -> f64 {
        self.predict_unchecked(w)
    }

    fn m_value(&self, f: &BoundFunctional, row: &[f64]) -> f64 {
        KrrEstimate::m_value(self, f, row)
    }
}

/// Picks `lambda` from `grid` by out-of-fold mean squared prediction error.
pub fn tune_krr(data: &Dataset, spec: &KernelSpec, grid: &[f64], plan: &FoldPlan) -> Result<TuningResult> {
    check_grid(grid)?;
    plan.check_len(data.len())?;
    spec.check_table(&data.x)?;
    let mut totals = vec![0.0; grid.len()];
    for fold in plan.fold_ids() {
        let losses = FoldPath::new(&data.x, spec, plan, fold)
            .map(|fp| fp.krr_losses(data, spec, grid, plan, fold))
            .map_err(|e| e.in_fold(fold))?;
        for (t, l) in totals.iter_mut().zip(losses) {
            *t += l;
        }
    }
    let n = data.len() as f64;
    Ok(TuningResult::from_losses(grid, totals.into_iter().map(|t| t / n).collect()))
}

/// The training side of one tuning fold: unique rows and the spectral
/// path of their compressed Gram matrix. Both nuisances share it, since
/// their systems differ only in the right-hand side.
pub(crate) struct FoldPath {
    pub(crate) groups: UniqueRows,
    pub(crate) path: RidgePath,
}

impl FoldPath {
    pub(crate) fn new(x: &FeatureTable, spec: &KernelSpec, plan: &FoldPlan, fold: usize) -> Result<Self> {
        let train = x.select_rows(&plan.complement(fold));
        let groups = UniqueRows::new(&train);
        let ks = spec.gram_sym_unchecked(&groups.rows);
        let path = CompressedSystem::new(&ks, &groups.counts, train.nrows()).path()?;
        Ok(Self { groups, path })
    }

    pub(crate) fn krr_losses(&self, data: &Dataset, spec: &KernelSpec, grid: &[f64], plan: &FoldPlan, fold: usize) -> Vec<f64> {
        let train_y: Vec<f64> = plan.complement(fold).iter().map(|&i| data.y[i]).collect();
        let held = data.select(&plan.indices(fold));
        let sums = self.groups.group_sums(&train_y);
        let held_groups = UniqueRows::new(&held.x);
        let cross = spec.gram_unchecked(&held_groups.rows, &self.groups.rows);
        grid.iter()
            .map(|&lambda| {
                let coef = self.path.solve(&sums, lambda);
                let pred = linalg::matvec(&cross, &coef);
                held.y
                    .iter()
                    .zip(&held_groups.group_of)
                    .map(|(y, &g)| (y - pred[g]).powi(2))
                    .sum()
            })
            .collect()
    }
}
