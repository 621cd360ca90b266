//! Synthetic data generating processes and the Monte Carlo coverage harness.
//!
//! Three families are built in:
//!
//! * a finite-support process, where every population quantity is exact by
//!   enumeration;
//! * a binary treatment with Gaussian covariates, a clipped logistic
//!   propensity and a nonlinear outcome;
//! * a continuous treatment for incremental effects.
//!
//! Replication `r` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream
//! `r`, so every replication is reproducible on its own and the report does
//! not depend on scheduling.

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dml::{self, estimate_fixed, DmlResult, EstimatorConfig, Nuisance};
use crate::error::{Error, Result};
use crate::functionals::{FunctionalKind, FunctionalSpec};
use crate::kernels::{self, KernelComponent, KernelSpec};
use crate::oracle::{brute_force_riesz, true_quantities, DiscreteDgp};
use crate::table::{Dataset, FeatureTable};

/// Monte Carlo draws for targets without a closed form.
pub const TARGET_MC_DRAWS: usize = 1_000_000;
const TARGET_MC_SEED: u64 = 0x7461_7267_6574;
/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Binary treatment `D`, covariates `X ~ N(0, I_p)`, propensity
/// `clip(logistic(coefs . x), clip, 1 - clip)` and outcome
/// `gamma0(d, x) = d tau + sin(x1) + 0.5 x2^2 - 0.5`. Columns: `[d, x1..xp]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryAteDgp {
    pub coefs: Vec<f64>,
    pub clip: f64,
    pub tau: f64,
    pub noise: f64,
}

impl Default for BinaryAteDgp {
    fn default() -> Self {
        Self {
            coefs: vec![0.4, 0.3, -0.3, 0.2, 0.0],
            clip: 0.05,
            tau: 1.0,
            noise: 1.0,
        }
    }
}

impl BinaryAteDgp {
    pub fn p(&self) -> usize {
        self.coefs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p() < 2 {
            return Err(Error::config("binary-treatment DGP needs at least two covariates"));
        }
        if !(self.clip >= 0.05 && self.clip < 0.5) {
            return Err(Error::config(format!("propensity clip must lie in [0.05, 0.5), got {}", self.clip)));
        }
        if self.coefs.iter().any(|c| !c.is_finite()) || !self.tau.is_finite() || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("binary-treatment DGP parameters must be finite, noise nonnegative"));
        }
        Ok(())
    }

    /// `P(D = 1 | x)` for covariates `x = [x1..xp]`.
    pub fn propensity(&self, x: &[f64]) -> f64 {
        let z: f64 = self.coefs.iter().zip(x).map(|(c, x)| c * x).sum();
        (1.0 / (1.0 + (-z).exp())).clamp(self.clip, 1.0 - self.clip)
    }

    fn baseline(x: &[f64]) -> f64 {
        x[0].sin() + 0.5 * x[1] * x[1] - 0.5
    }

    pub fn gamma0(&self, w: &[f64]) -> f64 {
        w[0] * self.tau + Self::baseline(&w[1..])
    }

    fn prob_of(&self, d: f64, x: &[f64]) -> f64 {
        let p = self.propensity(x);
        if d == 1.0 {
            p
        } else {
            1.0 - p
        }
    }
}

/// Continuous treatment `D = slope X + sd e`, `X ~ N(0, 1)`, outcome
/// `gamma0(d, x) = tau d + sin(x) + 0.5 d x`. Columns: `[d, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalDgp {
    pub tau: f64,
    pub slope: f64,
    pub treatment_sd: f64,
    pub noise: f64,
}

impl Default for IncrementalDgp {
    fn default() -> Self {
        Self {
            tau: 1.0,
            slope: 0.5,
            treatment_sd: 1.0,
            noise: 1.0,
        }
    }
}

impl IncrementalDgp {
    pub fn gamma0(&self, w: &[f64]) -> f64 {
        self.tau * w[0] + w[1].sin() + 0.5 * w[0] * w[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DgpSpec {
    DiscreteEval(DiscreteDgp),
    BinaryAte(BinaryAteDgp),
    Incremental(IncrementalDgp),
}

/// The shipped finite-support process: `D in {0, 1}`, `X in {0, 1, 2, 3}`.
pub fn default_discrete_dgp() -> DiscreteDgp {
    let px = [0.3, 0.3, 0.2, 0.2];
    let pi = [0.35, 0.5, 0.6, 0.7];
    let mut rows = Vec::new();
    let mut probs = Vec::new();
    let mut gamma0 = Vec::new();
    for d in 0..2 {
        for x in 0..4 {
            let (df, xf) = (d as f64, x as f64);
            rows.push(vec![df, xf]);
            probs.push(px[x] * if d == 1 { pi[x] } else { 1.0 - pi[x] });
            gamma0.push(1.5 * df + 0.5 * xf - 0.2 * xf * xf + 0.25 * df * xf);
        }
    }
    DiscreteDgp::new(FeatureTable::from_rows(&rows).expect("rectangular"), probs, gamma0, 1.0)
        .expect("valid default DGP")
}

/// Evaluation point of the shipped finite-support process.
pub fn default_evaluation_point() -> Vec<f64> {
    vec![1.0, 2.0]
}

/// The true target of a functional under a process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub theta0: f64,
    /// `theta0 / P(denominator)` for ratio targets.
    pub beta0: Option<f64>,
}

impl DgpSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DgpSpec::DiscreteEval(_) => "discrete_eval",
            DgpSpec::BinaryAte(_) => "binary_ate",
            DgpSpec::Incremental(_) => "incremental",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DgpSpec::DiscreteEval(_) => Ok(()),
            DgpSpec::BinaryAte(b) => b.validate(),
            DgpSpec::Incremental(i) => {
                if [i.tau, i.slope].iter().all(|v| v.is_finite())
                    && i.treatment_sd.is_finite()
                    && i.treatment_sd > 0.0
                    && i.noise.is_finite()
                    && i.noise >= 0.0
                {
                    Ok(())
                } else {
                    Err(Error::config("incremental DGP needs finite parameters and positive treatment sd"))
                }
            }
        }
    }

    /// `n` i.i.d. draws of `(Y, W)`.
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::config("sample size must be positive"));
        }
        self.validate()?;
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        match self {
            DgpSpec::DiscreteEval(d) => Ok(d.sample(n, rng)),
            DgpSpec::BinaryAte(b) => {
                let p = b.p();
                let mut x = Vec::with_capacity(n * (p + 1));
                let mut y = Vec::with_capacity(n);
                let mut row = vec![0.0; p + 1];
                for _ in 0..n {
                    for v in row[1..].iter_mut() {
                        *v = StandardNormal.sample(rng);
                    }
                    let u: f64 = rng.random();
                    row[0] = f64::from(u < b.propensity(&row[1..]));
                    let e: f64 = StandardNormal.sample(rng);
                    y.push(b.gamma0(&row) + b.noise * e);
                    x.extend_from_slice(&row);
                }
                Dataset::new(y, FeatureTable::new(x, p + 1)?)
            }
            DgpSpec::Incremental(i) => {
                let mut x = Vec::with_capacity(n * 2);
                let mut y = Vec::with_capacity(n);
                for _ in 0..n {
                    let xv = normal();
                    let d = i.slope * xv + i.treatment_sd * normal();
                    let w = [d, xv];
                    y.push(i.gamma0(&w) + i.noise * normal());
                    x.extend_from_slice(&w);
                }
                Dataset::new(y, FeatureTable::new(x, 2)?)
            }
        }
    }

    /// The kernel used by the harness: discrete identity kernels on
    /// discrete columns, Gaussian kernels with the median heuristic
    /// (computed on the sample) on continuous ones.
    pub fn default_kernel(&self, sample: &FeatureTable) -> Result<KernelSpec> {
        match self {
            DgpSpec::DiscreteEval(d) => {
                let comps = (0..d.support().ncols())
                    .map(|c| {
                        let mut levels = d.support().column_values(c);
                        levels.sort_by(f64::total_cmp);
                        levels.dedup();
                        KernelComponent::discrete(c, levels)
                    })
                    .collect::<Result<Vec<_>>>()?;
                KernelSpec::new(comps)
            }
            DgpSpec::BinaryAte(b) => {
                let cols: Vec<usize> = (1..=b.p()).collect();
                let h = kernels::median_bandwidth(sample, &cols)?;
                KernelSpec::new(vec![
                    KernelComponent::discrete(0, vec![0.0, 1.0])?,
                    KernelComponent::gaussian(cols, h)?,
                ])
            }
            DgpSpec::Incremental(_) => KernelSpec::new(vec![
                KernelComponent::gaussian(vec![0], kernels::median_bandwidth(sample, &[0])?)?,
                KernelComponent::gaussian(vec![1], kernels::median_bandwidth(sample, &[1])?)?,
            ]),
        }
    }

    /// The exact (or high-precision Monte Carlo) target.
    pub fn target(&self, f: &FunctionalSpec) -> Result<Target> {
        match (self, f.kind()) {
            (DgpSpec::DiscreteEval(d), _) => {
                let q = true_quantities(d, f)?;
                let beta0 = match f.kind() {
                    FunctionalKind::Att { treatment, treated, .. } => Some(denominator(d, *treatment, *treated)),
                    FunctionalKind::Cate {
                        subgroup,
                        subgroup_level,
                        ..
                    } => Some(denominator(d, *subgroup, *subgroup_level)),
                    _ => None,
                }
                .map(|p| q.theta0 / p);
                Ok(Target {
                    theta0: q.theta0,
                    beta0,
                })
            }
            (DgpSpec::BinaryAte(b), FunctionalKind::Ate { treatment: 0, level }) => Ok(Target {
                // E[sin X1] = 0 and E[0.5 X2^2 - 0.5] = 0.
                theta0: level * b.tau,
                beta0: None,
            }),
            (
                DgpSpec::BinaryAte(b),
                FunctionalKind::Att {
                    treatment: 0,
                    counterfactual,
                    treated,
                },
            ) => {
                let mut rng = ChaCha8Rng::seed_from_u64(TARGET_MC_SEED);
                let mut x = vec![0.0; b.p()];
                let (mut num, mut den) = (0.0, 0.0);
                for _ in 0..TARGET_MC_DRAWS {
                    for v in x.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    let p = b.prob_of(*treated, &x);
                    num += (counterfactual * b.tau + BinaryAteDgp::baseline(&x)) * p;
                    den += p;
                }
                let m = TARGET_MC_DRAWS as f64;
                Ok(Target {
                    theta0: num / m,
                    beta0: Some(num / den),
                })
            }
            (DgpSpec::Incremental(i), FunctionalKind::Incremental { treatment: 0, .. }) => {
                // E[sin X] = E[X] = 0, so only the tau d term survives.
                let draws = f.draws().expect("incremental functional");
                let mean: f64 = draws.iter().map(|(u, s)| s * u).sum::<f64>() / draws.len() as f64;
                Ok(Target {
                    theta0: i.tau * mean,
                    beta0: None,
                })
            }
            _ => Err(Error::config(format!(
                "no known target for functional {} under the {} process",
                f.name(),
                self.name()
            ))),
        }
    }

    /// The true outcome regression.
    pub fn oracle_gamma(&self) -> Box<dyn Nuisance + '_> {
        match self {
            DgpSpec::DiscreteEval(d) => Box::new(move |w: &[f64]| d.index_of(w).map_or(0.0, |i| d.gamma0()[i])),
            DgpSpec::BinaryAte(b) => Box::new(move |w: &[f64]| b.gamma0(w)),
            DgpSpec::Incremental(i) => Box::new(move |w: &[f64]| i.gamma0(w)),
        }
    }

    /// The true Riesz representer, when it is available in closed form.
    pub fn oracle_alpha(&self, f: &FunctionalSpec) -> Result<Box<dyn Nuisance + '_>> {
        match (self, f.kind()) {
            (DgpSpec::DiscreteEval(d), _) => {
                let alpha0 = brute_force_riesz(d, f)?;
                Ok(Box::new(move |w: &[f64]| d.index_of(w).map_or(0.0, |i| alpha0[i])))
            }
            (DgpSpec::BinaryAte(b), FunctionalKind::Ate { treatment: 0, level }) => {
                let level = *level;
                Ok(Box::new(move |w: &[f64]| {
                    if w[0] == level {
                        1.0 / b.prob_of(level, &w[1..])
                    } else {
                        0.0
                    }
                }))
            }
            (
                DgpSpec::BinaryAte(b),
                FunctionalKind::Att {
                    treatment: 0,
                    counterfactual,
                    treated,
                },
            ) => {
                let (dc, dt) = (*counterfactual, *treated);
                Ok(Box::new(move |w: &[f64]| {
                    if w[0] == dc {
                        b.prob_of(dt, &w[1..]) / b.prob_of(dc, &w[1..])
                    } else {
                        0.0
                    }
                }))
            }
            _ => Err(Error::config(format!(
                "no closed-form Riesz representer for {} under the {} process",
                f.name(),
                self.name()
            ))),
        }
    }
}

fn denominator(d: &DiscreteDgp, col: usize, level: f64) -> f64 {
    d.support()
        .rows()
        .zip(d.probs())
        .filter(|(r, _)| r[col] == level)
        .map(|(_, p)| p)
        .sum()
}

/// `n` draws under `seed`.
pub fn draw_sample(dgp: &DgpSpec, n: usize, seed: u64) -> Result<Dataset> {
    dgp.draw(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The random stream of replication `r`.
pub fn replication_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NuisanceMode {
    #[default]
    Estimated,
    /// The true `gamma0` and `alpha0` on the full sample.
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageConfig {
    pub n: usize,
    pub replications: usize,
    pub estimator: EstimatorConfig,
    /// Fixed kernel; when absent the process's default kernel is built on
    /// each sample.
    pub kernel: Option<KernelSpec>,
    pub mode: NuisanceMode,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub replication: usize,
    pub theta_hat: f64,
    pub sigma_hat: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub covered: bool,
    pub lambda_gamma: Option<f64>,
    pub lambda_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub dgp: String,
    pub functional: String,
    pub mode: NuisanceMode,
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub level: f64,
    pub theta0: f64,
    pub coverage: f64,
    pub mean_bias: f64,
    pub rmse: f64,
    pub median_width: f64,
    /// Wall-clock seconds per replication; not part of any emitted file.
    pub mean_runtime: f64,
    pub outcomes: Vec<ReplicationOutcome>,
    pub failure_messages: Vec<(usize, String)>,
}

/// One replication: draw, estimate, compare with the target.
pub fn run_replication(dgp: &DgpSpec, f: &FunctionalSpec, cfg: &CoverageConfig, theta0: f64, r: usize) -> Result<ReplicationOutcome> {
    let mut rng = replication_rng(cfg.seed, r);
    let data = dgp.draw(cfg.n, &mut rng)?;
    let res: DmlResult = match cfg.mode {
        NuisanceMode::Estimated => {
            let spec = match &cfg.kernel {
                Some(k) => k.clone(),
                None => dgp.default_kernel(&data.x)?,
            };
            let est = EstimatorConfig {
                seed: rng.next_u64(),
                ..cfg.estimator.clone()
            };
            dml::estimate_seeded(&data, f, &spec, &est)?
        }
        NuisanceMode::Oracle => {
            let spec = match &cfg.kernel {
                Some(k) => k.clone(),
                None => dgp.default_kernel(&data.x)?,
            };
            let bound = f.bind(&spec)?;
            let gamma = dgp.oracle_gamma();
            let alpha = dgp.oracle_alpha(f)?;
            estimate_fixed(&data, &bound, gamma.as_ref(), alpha.as_ref(), cfg.estimator.level)?
        }
    };
    Ok(ReplicationOutcome {
        replication: r,
        theta_hat: res.theta_hat,
        sigma_hat: res.sigma_hat,
        ci_lower: res.ci_lower,
        ci_upper: res.ci_upper,
        covered: res.covers(theta0),
        lambda_gamma: res.lambda_gamma,
        lambda_alpha: res.lambda_alpha,
    })
}

/// Runs `cfg.replications` seeded replications and summarizes them.
pub fn run_coverage(dgp: &DgpSpec, f: &FunctionalSpec, cfg: &CoverageConfig) -> Result<CoverageReport> {
    if cfg.replications == 0 {
        return Err(Error::config("need at least one replication"));
    }
    dml::critical_value(cfg.estimator.level)?;
    dgp.validate()?;
    let target = dgp.target(f)?;
    let work = || -> Vec<(Result<ReplicationOutcome>, f64)> {
        (0..cfg.replications)
            .into_par_iter()
            .map(|r| {
                let start = Instant::now();
                let out = run_replication(dgp, f, cfg, target.theta0, r);
                (out, start.elapsed().as_secs_f64())
            })
            .collect()
    };
    let results = if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(work)
    } else {
        work()
    };

    let mut outcomes = Vec::new();
    let mut failure_messages = Vec::new();
    let mut runtime = 0.0;
    for (r, (res, secs)) in results.into_iter().enumerate() {
        runtime += secs;
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) => failure_messages.push((r, e.to_string())),
        }
    }
    let failures = failure_messages.len();
    if failures as f64 > MAX_FAILURE_RATE * cfg.replications as f64 {
        let first = failure_messages.first().map(|(r, m)| format!(" (replication {r}: {m})")).unwrap_or_default();
        return Err(Error::numerical(format!(
            "{failures} of {} replications failed{first}",
            cfg.replications
        )));
    }
    let k = outcomes.len() as f64;
    let coverage = outcomes.iter().filter(|o| o.covered).count() as f64 / k;
    let mean_bias = outcomes.iter().map(|o| o.theta_hat - target.theta0).sum::<f64>() / k;
    let rmse = (outcomes.iter().map(|o| (o.theta_hat - target.theta0).powi(2)).sum::<f64>() / k).sqrt();
    let widths: Vec<f64> = outcomes.iter().map(|o| o.ci_upper - o.ci_lower).collect();
    Ok(CoverageReport {
        dgp: dgp.name().to_string(),
        functional: f.name().to_string(),
        mode: cfg.mode,
        n: cfg.n,
        replications: cfg.replications,
        failures,
        level: cfg.estimator.level,
        theta0: target.theta0,
        coverage,
        mean_bias,
        rmse,
        median_width: kernels::median(&widths),
        mean_runtime: runtime / cfg.replications as f64,
        outcomes,
        failure_messages,
    })
}

/// Two-sided binomial band containing the empirical coverage of `r`
/// replications with probability at least `confidence` when the true
/// coverage is `p`, by exact binomial tails.
pub fn binomial_band(p: f64, r: usize, confidence: f64) -> (f64, f64) {
    use statrs::distribution::{Binomial, DiscreteCDF};
    let dist = Binomial::new(p, r as u64).expect("valid binomial");
    let tail = (1.0 - confidence) / 2.0;
    let lo = dist.inverse_cdf(tail);
    let hi = dist.inverse_cdf(1.0 - tail);
    (lo as f64 / r as f64, hi as f64 / r as f64)
}
