//! JSON and CSV documents written by the commands.
//!
//! Numbers are rounded to 12 significant digits and then printed in the
//! shortest form that parses back to the same double, so the files are
//! stable across platforms and re-reading them reproduces the printed
//! values exactly.

use serde::Serialize;

use riesz_core::dml::{DmlResult, Lambda};
use riesz_core::krr::TuningResult;
use riesz_core::sim::CoverageReport;

pub const SIGNIFICANT_DIGITS: usize = 12;

/// `v` rounded to [`SIGNIFICANT_DIGITS`] significant digits.
pub fn round(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v).parse().expect("formatted float parses")
}

/// A regularization level: one value, or one per fold.
#[derive(Debug, Serialize, PartialEq)]
#[serde(untagged)]
pub enum LambdaOut {
    Single(f64),
    PerFold(Vec<f64>),
}

#[derive(Debug, Serialize, PartialEq)]
pub struct RatioOut {
    pub beta_hat: f64,
    pub se: f64,
    pub ci: [f64; 2],
}

#[derive(Debug, Serialize, PartialEq)]
pub struct EstimateOut {
    pub theta_hat: f64,
    pub sigma_hat: f64,
    pub ci: [f64; 2],
    pub level: f64,
    pub n: usize,
    pub folds: usize,
    pub lambda_gamma: LambdaOut,
    pub lambda_alpha: LambdaOut,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<RatioOut>,
}

fn lambda_out(choice: &Lambda, global: Option<f64>, per_fold: impl Iterator<Item = Option<f64>>) -> LambdaOut {
    match (choice, global) {
        (Lambda::Fixed(v), _) => LambdaOut::Single(round(*v)),
        (_, Some(v)) => LambdaOut::Single(round(v)),
        _ => LambdaOut::PerFold(per_fold.map(|l| round(l.unwrap_or(f64::NAN))).collect()),
    }
}

impl EstimateOut {
    pub fn new(r: &DmlResult, folds: usize, lambda_gamma: &Lambda, lambda_alpha: &Lambda) -> Self {
        Self {
            theta_hat: round(r.theta_hat),
            sigma_hat: round(r.sigma_hat),
            ci: [round(r.ci_lower), round(r.ci_upper)],
            level: r.level,
            n: r.n,
            folds,
            lambda_gamma: lambda_out(lambda_gamma, r.lambda_gamma, r.per_fold.iter().map(|f| f.lambda_gamma)),
            lambda_alpha: lambda_out(lambda_alpha, r.lambda_alpha, r.per_fold.iter().map(|f| f.lambda_alpha)),
            ratio: r.ratio.as_ref().map(|q| RatioOut {
                beta_hat: round(q.beta_hat),
                se: round(q.se),
                ci: [round(q.ci_lower), round(q.ci_upper)],
            }),
        }
    }
}

#[derive(Debug, Serialize, PartialEq)]
pub struct CvRow {
    pub lambda: f64,
    pub loss: f64,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct CvTables {
    pub gamma: Vec<CvRow>,
    pub alpha: Vec<CvRow>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct TuneOut {
    pub lambda_gamma: f64,
    pub lambda_alpha: f64,
    pub folds: usize,
    pub n: usize,
    pub cv: CvTables,
}

fn cv_rows(t: &TuningResult) -> Vec<CvRow> {
    t.grid
        .iter()
        .zip(&t.losses)
        .map(|(&lambda, &loss)| CvRow {
            lambda: round(lambda),
            loss: round(loss),
        })
        .collect()
}

impl TuneOut {
    pub fn new(gamma: &TuningResult, alpha: &TuningResult, folds: usize, n: usize) -> Self {
        Self {
            lambda_gamma: round(gamma.lambda),
            lambda_alpha: round(alpha.lambda),
            folds,
            n,
            cv: CvTables {
                gamma: cv_rows(gamma),
                alpha: cv_rows(alpha),
            },
        }
    }
}

/// One configuration of a coverage study. Wall-clock time is deliberately
/// absent so that the document depends only on the inputs.
#[derive(Debug, Serialize, PartialEq)]
pub struct CoverageOut {
    pub dgp: String,
    pub functional: String,
    pub mode: String,
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub level: f64,
    pub theta0: f64,
    pub coverage: f64,
    pub mean_bias: f64,
    pub rmse: f64,
    pub median_width: f64,
}

impl From<&CoverageReport> for CoverageOut {
    fn from(r: &CoverageReport) -> Self {
        Self {
            dgp: r.dgp.clone(),
            functional: r.functional.clone(),
            mode: match r.mode {
                riesz_core::sim::NuisanceMode::Estimated => "estimated",
                riesz_core::sim::NuisanceMode::Oracle => "oracle",
            }
            .to_string(),
            n: r.n,
            replications: r.replications,
            failures: r.failures,
            level: r.level,
            theta0: round(r.theta0),
            coverage: round(r.coverage),
            mean_bias: round(r.mean_bias),
            rmse: round(r.rmse),
            median_width: round(r.median_width),
        }
    }
}

pub fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn coverage_csv(rows: &[CoverageOut]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
