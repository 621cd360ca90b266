//! The four subcommands, written against the library so they can be driven
//! from tests without spawning processes.

use std::path::Path;

use riesz_core::dml::{self, Lambda};
use riesz_core::functionals::FunctionalSpec;
use riesz_core::kernels::{self, KernelComponent, KernelSpec};
use riesz_core::oracle::{self, Check, DiscreteDgp};
use riesz_core::sim::{self, BinaryAteDgp, CoverageConfig, DgpSpec, IncrementalDgp, NuisanceMode};
use riesz_core::table::FeatureTable;
use riesz_core::Error;

use crate::config::{self, Bandwidth, DgpConfig, FunctionalConfig, GroupKind, KernelGroup, RunConfig, SimulateConfig};
use crate::data::{self, Frame};
use crate::output::{CoverageOut, EstimateOut, TuneOut};

type Result<T> = std::result::Result<T, Error>;

fn column(names: &[String], name: &str, key: &str) -> Result<usize> {
    names.iter().position(|n| n == name).ok_or_else(|| {
        Error::input(format!(
            "{key} refers to column {name:?}, which is not in the data (columns: {})",
            names.join(", ")
        ))
    })
}

/// Kernel from the configured column groups. Median bandwidths and
/// unspecified discrete levels are taken from `x`.
pub fn build_kernel(groups: &[KernelGroup], names: &[String], x: &FeatureTable) -> Result<KernelSpec> {
    let mut comps = Vec::with_capacity(groups.len());
    for g in groups {
        let key = format!("{}.columns", g.key);
        let cols = g.columns.iter().map(|c| column(names, c, &key)).collect::<Result<Vec<_>>>()?;
        let comp = match &g.kind {
            GroupKind::Gaussian(Bandwidth::Fixed(h)) => KernelComponent::gaussian(cols, *h),
            GroupKind::Gaussian(Bandwidth::Median) => {
                let h = kernels::median_bandwidth(x, &cols).map_err(|e| Error::input(format!("{}.bandwidth: {e}", g.key)))?;
                KernelComponent::gaussian(cols, h)
            }
            GroupKind::Discrete(levels) => {
                let levels = match levels {
                    Some(l) => l.clone(),
                    None => {
                        let mut l = x.column_values(cols[0]);
                        l.sort_by(f64::total_cmp);
                        l.dedup();
                        l
                    }
                };
                KernelComponent::discrete(cols[0], levels)
            }
        }
        .map_err(|e| Error::config(format!("{}: {e}", g.key)))?;
        comps.push(comp);
    }
    KernelSpec::new(comps).map_err(|e| Error::config(format!("kernel.groups: {e}")))
}

/// Functional with column names resolved against `names`.
pub fn build_functional(cfg: &FunctionalConfig, names: &[String], population: Option<&Frame>, seed: u64) -> Result<FunctionalSpec> {
    let col = |name: &str| column(names, name, "functional.treatment");
    match cfg {
        FunctionalConfig::Evaluation { point } => {
            for (k, _) in point {
                column(names, k, &format!("functional.point.{k}"))?;
            }
            let row = names
                .iter()
                .map(|n| {
                    point
                        .iter()
                        .find(|(k, _)| k == n)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| Error::config(format!("functional.point: missing value for column {n:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            FunctionalSpec::evaluation(row)
        }
        FunctionalConfig::Ate { treatment, level } => Ok(FunctionalSpec::ate(col(treatment)?, *level)),
        FunctionalConfig::AteDs { treatment, level } => {
            let pop = population.ok_or_else(|| Error::config("io.population: ate_ds needs an alternative population file"))?;
            let idx = names
                .iter()
                .map(|n| column(&pop.names, n, "io.population"))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<Vec<f64>> = pop.x.rows().map(|r| idx.iter().map(|&i| r[i]).collect()).collect();
            FunctionalSpec::ate_ds(col(treatment)?, *level, FeatureTable::from_rows(&rows)?)
        }
        FunctionalConfig::Att {
            treatment,
            counterfactual,
            treated,
        } => Ok(FunctionalSpec::att(col(treatment)?, *counterfactual, *treated)),
        FunctionalConfig::Cate {
            treatment,
            level,
            subgroup,
            subgroup_level,
        } => FunctionalSpec::cate(col(treatment)?, *level, column(names, subgroup, "functional.subgroup")?, *subgroup_level),
        FunctionalConfig::Incremental { treatment, density, draws } => {
            FunctionalSpec::incremental(col(treatment)?, config::to_density(density), *draws, seed)
        }
    }
}

struct Prepared {
    data: riesz_core::table::Dataset,
    f: FunctionalSpec,
    spec: KernelSpec,
}

fn prepare(cfg: &RunConfig, data_path: &Path) -> Result<Prepared> {
    let groups = cfg.kernel.as_ref().ok_or_else(|| Error::config("kernel: section is required"))?;
    let fcfg = cfg.functional.as_ref().ok_or_else(|| Error::config("functional: section is required"))?;
    let frame = data::read_csv(data_path)?;
    let data = frame.dataset()?;
    let population = match (fcfg, &cfg.io.population) {
        (FunctionalConfig::AteDs { .. }, Some(p)) => Some(data::read_csv(p)?),
        _ => None,
    };
    let spec = build_kernel(groups, &frame.names, &frame.x)?;
    let f = build_functional(fcfg, &frame.names, population.as_ref(), cfg.seed)?;
    // Surface kernel/functional mismatches as configuration problems
    // before any fitting starts.
    f.bind(&spec)?;
    Ok(Prepared { data, f, spec })
}

pub fn estimate(cfg: &RunConfig, data_path: &Path) -> Result<EstimateOut> {
    let p = prepare(cfg, data_path)?;
    let est = cfg.estimator();
    let res = dml::estimate_seeded(&p.data, &p.f, &p.spec, &est)?;
    Ok(EstimateOut::new(&res, est.folds, &est.lambda_gamma, &est.lambda_alpha))
}

/// Cross-validates both regularization levels on the full sample, with the
/// same partition `estimate` uses when both are set to "cv".
pub fn tune(cfg: &RunConfig, data_path: &Path) -> Result<TuneOut> {
    let p = prepare(cfg, data_path)?;
    let est = dml::EstimatorConfig {
        lambda_gamma: Lambda::Cv,
        lambda_alpha: Lambda::Cv,
        ..cfg.estimator()
    };
    let bound = p.f.bind(&p.spec)?;
    match dml::tune_both(&p.data, &bound, &est, dml::tuning_seed(est.seed))? {
        (Some(g), Some(a)) => Ok(TuneOut::new(&g, &a, est.tuning_folds, p.data.len())),
        _ => unreachable!("both levels are cross-validated"),
    }
}

fn dgp_of(cfg: &DgpConfig) -> (DgpSpec, Vec<String>) {
    match cfg {
        DgpConfig::DiscreteEval { noise } => {
            let d = sim::default_discrete_dgp();
            let d = DiscreteDgp::new(d.support().clone(), d.probs().to_vec(), d.gamma0().to_vec(), *noise).expect("valid default process");
            (DgpSpec::DiscreteEval(d), vec!["d".into(), "x1".into()])
        }
        DgpConfig::BinaryAte { coefs, clip, tau, noise } => {
            let names = std::iter::once("d".to_string()).chain((1..=coefs.len()).map(|j| format!("x{j}"))).collect();
            let b = BinaryAteDgp {
                coefs: coefs.clone(),
                clip: *clip,
                tau: *tau,
                noise: *noise,
            };
            (DgpSpec::BinaryAte(b), names)
        }
        DgpConfig::Incremental {
            tau,
            slope,
            treatment_sd,
            noise,
        } => {
            let i = IncrementalDgp {
                tau: *tau,
                slope: *slope,
                treatment_sd: *treatment_sd,
                noise: *noise,
            };
            (DgpSpec::Incremental(i), vec!["d".into(), "x1".into()])
        }
    }
}

fn default_functional(dgp: &DgpSpec, seed: u64) -> Result<FunctionalSpec> {
    match dgp {
        DgpSpec::DiscreteEval(_) => FunctionalSpec::evaluation(sim::default_evaluation_point()),
        DgpSpec::BinaryAte(_) => Ok(FunctionalSpec::ate(0, 1.0)),
        DgpSpec::Incremental(_) => FunctionalSpec::incremental(
            0,
            riesz_core::functionals::WeightDensity::Gaussian { mean: 0.0, sd: 1.0 },
            riesz_core::functionals::DEFAULT_INCREMENTAL_DRAWS,
            seed,
        ),
    }
}

/// Runs the configured coverage study. The kernel is always the process's
/// default (median bandwidths recomputed per replication).
pub fn simulate(cfg: &RunConfig) -> Result<CoverageOut> {
    let s: &SimulateConfig = cfg.simulate.as_ref().ok_or_else(|| Error::config("simulate: section is required"))?;
    let (dgp, names) = dgp_of(&s.dgp);
    let f = match &cfg.functional {
        Some(FunctionalConfig::AteDs { .. }) => {
            return Err(Error::config("functional.kind: ate_ds has no simulation process"));
        }
        Some(fc) => build_functional(fc, &names, None, cfg.seed).map_err(|e| match e {
            Error::Input(m) => Error::config(m),
            other => other,
        })?,
        None => default_functional(&dgp, cfg.seed)?,
    };
    let cc = CoverageConfig {
        n: s.n,
        replications: s.replications,
        estimator: cfg.estimator(),
        kernel: None,
        mode: if s.oracle { NuisanceMode::Oracle } else { NuisanceMode::Estimated },
        threads: 0,
        seed: cfg.seed,
    };
    let report = sim::run_coverage(&dgp, &f, &cc)?;
    for (r, msg) in &report.failure_messages {
        eprintln!("replication {r} failed: {msg}");
    }
    eprintln!("mean runtime per replication: {:.3} s", report.mean_runtime);
    Ok(CoverageOut::from(&report))
}

pub fn verify(perturb: f64, seed: u64) -> Vec<Check> {
    oracle::verify_suite(perturb, seed)
}

pub fn verify_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in checks {
        out.push_str(&format!(
            "{:<width$}  {}  {}\n",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.detail
        ));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    out.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
    out
}
