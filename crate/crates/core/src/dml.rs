//! Cross-fitted debiased estimation.
//!
//! For each fold `I_l` the nuisances `gamma_l` and `alpha_l` are fitted on
//! the complement, and every held-out row contributes the doubly robust score
//!
//! ```text
//! psi_i = m(W_i, gamma_l) + alpha_l(W_i) (Y_i - gamma_l(W_i))
//! ```
//!
//! The estimate is the mean score, the variance its empirical variance, and
//! the interval the usual Gaussian one. Ratio targets (the treated effect
//! normalised by `P(D = d)`, the subgroup effect normalised by `P(V = v)`)
//! are handled by the delta method.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::functionals::{BoundFunctional, FunctionalSpec};
use crate::kernels::KernelSpec;
use crate::krr::{self, fit_krr, tune_krr};
use crate::riesz::{self, fit_riesz_with, tune_riesz, RieszSolver};
use crate::table::Dataset;

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_LEVEL: f64 = 0.95;
/// Offset separating the tuning partition's seed from the estimation one.
const TUNING_SEED_OFFSET: u64 = 0x7475_6e65;

/// Seed of the tuning partition used by [`estimate`] for a given run seed,
/// kept separate from the cross-fitting partition.
pub fn tuning_seed(seed: u64) -> u64 {
    seed.wrapping_add(TUNING_SEED_OFFSET)
}

/// A nuisance function: a regression or a Riesz representer.
///
/// Estimation only needs point evaluations and `m(row, .)`; the default
/// `m_value` composes the functional with `value`, so any black-box
/// predictor can be plugged in.
pub trait Nuisance: Send + Sync {
    fn value(&self, w: &[f64]) -> f64;

    fn m_value(&self, f: &BoundFunctional, row: &[f64]) -> f64 {
        f.functional().m_value(row, &|z: &[f64]| self.value(z))
    }
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Nuisance for F {
    fn value(&self, w: &[f64]) -> f64 {
        self(w)
    }
}

/// Random partition of `0..n` into `L` folds labelled `1..=L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    folds: usize,
    assignment: Vec<usize>,
}

/// Shuffles the rows under `seed` and deals them round-robin, so fold sizes
/// differ by at most one.
pub fn make_folds(n: usize, folds: usize, seed: u64) -> Result<FoldPlan> {
    if folds < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n {
        return Err(Error::config(format!("{folds} folds requested for {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % folds + 1;
    }
    Ok(FoldPlan { folds, assignment })
}

impl FoldPlan {
    pub fn new(n: usize, folds: usize, seed: u64) -> Result<Self> {
        make_folds(n, folds, seed)
    }

    /// A plan from explicit labels in `1..=folds`.
    pub fn from_assignment(assignment: Vec<usize>, folds: usize) -> Result<Self> {
        if folds < 2 {
            return Err(Error::config(format!("need at least 2 folds, got {folds}")));
        }
        let mut sizes = vec![0usize; folds];
        for &a in &assignment {
            if a == 0 || a > folds {
                return Err(Error::config(format!("fold label {a} outside 1..={folds}")));
            }
            sizes[a - 1] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::config(format!("fold {} is empty", empty + 1)));
        }
        Ok(Self { folds, assignment })
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn fold_ids(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.folds
    }

    pub fn indices(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub(crate) fn check_len(&self, n: usize) -> Result<()> {
        if self.n() == n {
            Ok(())
        } else {
            Err(Error::config(format!("fold plan covers {} rows but the data has {n}", self.n())))
        }
    }
}

/// Regularization choice for one nuisance.
#[derive(Debug, Clone, PartialEq)]
pub enum Lambda {
    Fixed(f64),
    /// One value per fold, in fold order.
    PerFold(Vec<f64>),
    /// Cross-validated over the configured grid.
    Cv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub folds: usize,
    pub level: f64,
    pub trim: Option<f64>,
    pub lambda_gamma: Lambda,
    pub lambda_alpha: Lambda,
    pub grid: Vec<f64>,
    pub tuning_folds: usize,
    /// Tune inside every fold's training set instead of once on the sample.
    pub strict_tuning: bool,
    pub solver: RieszSolver,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            folds: DEFAULT_FOLDS,
            level: DEFAULT_LEVEL,
            trim: None,
            lambda_gamma: Lambda::Cv,
            lambda_alpha: Lambda::Cv,
            grid: krr::default_grid(),
            tuning_folds: krr::DEFAULT_TUNING_FOLDS,
            strict_tuning: false,
            solver: RieszSolver::Reduced,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub size: usize,
    pub lambda_gamma: Option<f64>,
    pub lambda_alpha: Option<f64>,
    pub mean_psi: f64,
}

/// Delta-method inference for `beta = theta / p`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioEstimate {
    pub beta_hat: f64,
    /// Standard deviation of the ratio's influence scores.
    pub sigma: f64,
    /// `sigma / sqrt(n)`.
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmlResult {
    pub theta_hat: f64,
    pub sigma_hat: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    pub n: usize,
    pub lambda_gamma: Option<f64>,
    pub lambda_alpha: Option<f64>,
    pub per_fold: Vec<FoldDiagnostics>,
    pub ratio: Option<RatioEstimate>,
    /// Per-observation scores, in data order.
    pub psi: Vec<f64>,
}

impl DmlResult {
    pub fn ci_width(&self) -> f64 {
        self.ci_upper - self.ci_lower
    }

    pub fn covers(&self, theta: f64) -> bool {
        self.ci_lower <= theta && theta <= self.ci_upper
    }
}

/// Standard Gaussian `(1 - a/2)`-quantile for a `level = 1 - a` interval.
pub fn critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// Point estimate, variance and interval from the scores alone.
pub fn from_scores(psi: Vec<f64>, level: f64) -> Result<DmlResult> {
    let c = critical_value(level)?;
    let n = psi.len();
    if n == 0 {
        return Err(Error::input("no scores to aggregate"));
    }
    if psi.iter().any(|p| !p.is_finite()) {
        return Err(Error::numerical("non-finite score"));
    }
    let nf = n as f64;
    let theta = psi.iter().sum::<f64>() / nf;
    let var = psi.iter().map(|p| (p - theta).powi(2)).sum::<f64>() / nf;
    let sigma = var.sqrt();
    let half = c * sigma / nf.sqrt();
    Ok(DmlResult {
        theta_hat: theta,
        sigma_hat: sigma,
        ci_lower: theta - half,
        ci_upper: theta + half,
        level,
        n,
        lambda_gamma: None,
        lambda_alpha: None,
        per_fold: Vec::new(),
        ratio: None,
        psi,
    })
}

/// Adds delta-method inference for `theta / mean(indicator)`.
pub fn delta_ratio(result: &DmlResult, indicator: &[f64]) -> Result<DmlResult> {
    let n = result.psi.len();
    if indicator.len() != n {
        return Err(Error::input(format!("{} indicator values for {n} scores", indicator.len())));
    }
    let nf = n as f64;
    let p_hat = indicator.iter().sum::<f64>() / nf;
    if p_hat <= 0.0 {
        return Err(Error::degenerate("ratio denominator has zero sample mean"));
    }
    let beta = result.theta_hat / p_hat;
    let scores: Vec<f64> = result
        .psi
        .iter()
        .zip(indicator)
        .map(|(psi, ind)| (psi - beta * (ind - p_hat)) / p_hat)
        .collect();
    let mean = scores.iter().sum::<f64>() / nf;
    let sigma = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / nf).sqrt();
    let se = sigma / nf.sqrt();
    let half = critical_value(result.level)? * se;
    let mut out = result.clone();
    out.ratio = Some(RatioEstimate {
        beta_hat: beta,
        sigma,
        se,
        ci_lower: beta - half,
        ci_upper: beta + half,
        p_hat,
    });
    Ok(out)
}

/// Nuisances fitted on one fold's training rows.
pub struct FoldNuisances {
    pub gamma: Box<dyn Nuisance>,
    pub alpha: Box<dyn Nuisance>,
    pub lambda_gamma: Option<f64>,
    pub lambda_alpha: Option<f64>,
}

/// Generic cross-fitting: `fit(fold, training rows)` supplies the nuisances
/// for each fold. Folds run in parallel; the aggregation is in data order.
pub fn cross_fit<F>(data: &Dataset, f: &BoundFunctional, plan: &FoldPlan, level: f64, fit: F) -> Result<DmlResult>
where
    F: Fn(usize, &Dataset) -> Result<FoldNuisances> + Sync,
{
    critical_value(level)?;
    plan.check_len(data.len())?;
    let folds: Vec<usize> = plan.fold_ids().collect();
    let outputs: Vec<Result<(Vec<usize>, Vec<f64>, FoldDiagnostics)>> = folds
        .par_iter()
        .map(|&fold| {
            let run = || -> Result<_> {
                let held = plan.indices(fold);
                let nuis = fit(fold, &data.select(&plan.complement(fold)))?;
                let psi = scores(data, f, &held, nuis.gamma.as_ref(), nuis.alpha.as_ref());
                let mean_psi = psi.iter().sum::<f64>() / psi.len() as f64;
                let diag = FoldDiagnostics {
                    fold,
                    size: held.len(),
                    lambda_gamma: nuis.lambda_gamma,
                    lambda_alpha: nuis.lambda_alpha,
                    mean_psi,
                };
                Ok((held, psi, diag))
            };
            run().map_err(|e| e.in_fold(fold))
        })
        .collect();
    let mut psi = vec![0.0; data.len()];
    let mut per_fold = Vec::with_capacity(folds.len());
    for out in outputs {
        let (held, values, diag) = out?;
        for (i, v) in held.into_iter().zip(values) {
            psi[i] = v;
        }
        per_fold.push(diag);
    }
    let mut result = from_scores(psi, level)?;
    result.per_fold = per_fold;
    Ok(result)
}

/// Scores of the rows `held` under fixed nuisances.
pub fn scores(data: &Dataset, f: &BoundFunctional, held: &[usize], gamma: &dyn Nuisance, alpha: &dyn Nuisance) -> Vec<f64> {
    // Under distribution shift the m-term is the average over the alternative
    // population and is shared by every row.
    let shared = f.functional().population().map(|pop| {
        pop.rows().map(|r| gamma.m_value(f, r)).sum::<f64>() / pop.nrows() as f64
    });
    held.iter()
        .map(|&i| {
            let w = data.x.row(i);
            let m = shared.unwrap_or_else(|| gamma.m_value(f, w));
            m + alpha.value(w) * (data.y[i] - gamma.value(w))
        })
        .collect()
}

/// Debiased estimate with the same (for example, known) nuisances on every
/// fold.
pub fn estimate_fixed(data: &Dataset, f: &BoundFunctional, gamma: &dyn Nuisance, alpha: &dyn Nuisance, level: f64) -> Result<DmlResult> {
    let all: Vec<usize> = (0..data.len()).collect();
    from_scores(scores(data, f, &all, gamma, alpha), level)
}

fn fold_lambda(choice: &Lambda, fold: usize, global: Option<f64>) -> Result<Option<f64>> {
    Ok(match choice {
        Lambda::Fixed(l) => Some(*l),
        Lambda::PerFold(values) => Some(*values.get(fold - 1).ok_or_else(|| {
            Error::config(format!("no per-fold lambda for fold {fold} ({} given)", values.len()))
        })?),
        Lambda::Cv => global,
    })
}

/// Tuned regularization for both nuisances on the given sample.
pub fn tune_both(data: &Dataset, f: &BoundFunctional, cfg: &EstimatorConfig, seed: u64) -> Result<(Option<krr::TuningResult>, Option<krr::TuningResult>)> {
    let needs = |l: &Lambda| matches!(l, Lambda::Cv);
    if !needs(&cfg.lambda_gamma) && !needs(&cfg.lambda_alpha) {
        return Ok((None, None));
    }
    let plan = make_folds(data.len(), cfg.tuning_folds, seed)?;
    if needs(&cfg.lambda_gamma) && needs(&cfg.lambda_alpha) {
        let (g, a) = riesz::tune_joint(data, f, &cfg.grid, &plan)?;
        return Ok((Some(g), Some(a)));
    }
    let g = if needs(&cfg.lambda_gamma) {
        Some(tune_krr(data, f.kernel(), &cfg.grid, &plan)?)
    } else {
        None
    };
    let a = if needs(&cfg.lambda_alpha) {
        Some(tune_riesz(&data.x, f, &cfg.grid, &plan)?)
    } else {
        None
    };
    Ok((g, a))
}

fn validate_config(cfg: &EstimatorConfig) -> Result<()> {
    critical_value(cfg.level)?;
    for l in [&cfg.lambda_gamma, &cfg.lambda_alpha] {
        match l {
            Lambda::Fixed(v) => krr::check_lambda(*v)?,
            Lambda::PerFold(vs) => {
                if vs.len() != cfg.folds {
                    return Err(Error::config(format!("{} per-fold lambdas for {} folds", vs.len(), cfg.folds)));
                }
                vs.iter().try_for_each(|&v| krr::check_lambda(v))?;
            }
            Lambda::Cv => krr::check_grid(&cfg.grid)?,
        }
    }
    if let Some(t) = cfg.trim {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::config(format!("trim bound must be positive and finite, got {t}")));
        }
    }
    Ok(())
}

/// Cross-fitted estimate with kernel ridge nuisances on a given partition.
pub fn estimate(data: &Dataset, f: &FunctionalSpec, spec: &KernelSpec, plan: &FoldPlan, cfg: &EstimatorConfig) -> Result<DmlResult> {
    validate_config(cfg)?;
    let bound = f.bind(spec)?;
    spec.check_table(&data.x)?;
    plan.check_len(data.len())?;
    let tune_seed = tuning_seed(cfg.seed);
    let (global_g, global_a) = if cfg.strict_tuning {
        (None, None)
    } else {
        tune_both(data, &bound, cfg, tune_seed)?
    };
    let lg = global_g.as_ref().map(|t| t.lambda);
    let la = global_a.as_ref().map(|t| t.lambda);

    let mut result = cross_fit(data, &bound, plan, cfg.level, |fold, train| {
        let (local_g, local_a) = if cfg.strict_tuning {
            let (g, a) = tune_both(train, &bound, cfg, tune_seed.wrapping_add(fold as u64))?;
            (g.map(|t| t.lambda), a.map(|t| t.lambda))
        } else {
            (lg, la)
        };
        let lambda_g = fold_lambda(&cfg.lambda_gamma, fold, local_g)?.expect("resolved above");
        let lambda_a = fold_lambda(&cfg.lambda_alpha, fold, local_a)?.expect("resolved above");
        let gamma = fit_krr(&train.x, &train.y, spec, lambda_g)?;
        let alpha = fit_riesz_with(&train.x, &bound, lambda_a, cfg.solver)?.with_trim(cfg.trim)?;
        Ok(FoldNuisances {
            gamma: Box::new(gamma),
            alpha: Box::new(alpha),
            lambda_gamma: Some(lambda_g),
            lambda_alpha: Some(lambda_a),
        })
    })?;

    let global = |choice: &Lambda, tuned: Option<f64>| match choice {
        Lambda::Fixed(l) => Some(*l),
        Lambda::Cv if !cfg.strict_tuning => tuned,
        _ => None,
    };
    result.lambda_gamma = global(&cfg.lambda_gamma, lg);
    result.lambda_alpha = global(&cfg.lambda_alpha, la);
    if let Some(ind) = ratio_indicators(f, data) {
        result = delta_ratio(&result, &ind)?;
    }
    Ok(result)
}

/// Partition from `cfg.folds` and `cfg.seed`, then [`estimate`].
pub fn estimate_seeded(data: &Dataset, f: &FunctionalSpec, spec: &KernelSpec, cfg: &EstimatorConfig) -> Result<DmlResult> {
    let plan = make_folds(data.len(), cfg.folds, cfg.seed)?;
    estimate(data, f, spec, &plan, cfg)
}

/// Denominator indicators of a ratio target, if the functional has one.
pub fn ratio_indicators(f: &FunctionalSpec, data: &Dataset) -> Option<Vec<f64>> {
    data.x.rows().map(|r| f.ratio_indicator(r)).collect()
}
