//! Run configuration: a TOML file with `kernel`, `functional`, `dml`,
//! `tuning`, `io` and `simulate` sections plus top-level `seed` and
//! `threads`.
//!
//! Everything that can be checked without data is checked here, and every
//! error message starts with the dotted path of the offending key.

use std::path::{Path, PathBuf};

use riesz_core::dml::{self, Lambda};
use riesz_core::krr;
use riesz_core::riesz::RieszSolver;
use riesz_core::Error;
use toml::{Table, Value};

type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroupKind {
    Gaussian(Bandwidth),
    /// Levels, or `None` to take the values present in the data.
    Discrete(Option<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelGroup {
    /// Dotted key of this group, for messages.
    pub key: String,
    pub columns: Vec<String>,
    pub kind: GroupKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DensityConfig {
    Gaussian { mean: f64, sd: f64 },
    Tabulated { grid: Vec<f64>, density: Vec<f64>, derivative: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum FunctionalConfig {
    Evaluation { point: Vec<(String, f64)> },
    Ate { treatment: String, level: f64 },
    AteDs { treatment: String, level: f64 },
    Att { treatment: String, counterfactual: f64, treated: f64 },
    Cate { treatment: String, level: f64, subgroup: String, subgroup_level: f64 },
    Incremental { treatment: String, density: DensityConfig, draws: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmlConfig {
    pub folds: usize,
    pub level: f64,
    pub lambda_gamma: Lambda,
    pub lambda_alpha: Lambda,
    pub trim: Option<f64>,
    pub strict_tuning: bool,
    pub solver: RieszSolver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningConfig {
    pub grid: Vec<f64>,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IoConfig {
    pub data: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DgpConfig {
    DiscreteEval { noise: f64 },
    BinaryAte { coefs: Vec<f64>, clip: f64, tau: f64, noise: f64 },
    Incremental { tau: f64, slope: f64, treatment_sd: f64, noise: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateConfig {
    pub dgp: DgpConfig,
    pub n: usize,
    pub replications: usize,
    pub oracle: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub kernel: Option<Vec<KernelGroup>>,
    pub functional: Option<FunctionalConfig>,
    pub dml: DmlConfig,
    pub tuning: TuningConfig,
    pub io: IoConfig,
    pub simulate: Option<SimulateConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &base)
    }

    /// Parses a config; relative `io` paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| Error::config(format!("invalid TOML: {}", e.message())))?;
        let top = Section::new("", &root);
        top.allow(&["seed", "threads", "kernel", "functional", "dml", "tuning", "io", "simulate"])?;
        let seed = top.opt_uint("seed")?.unwrap_or(0);
        let threads = top.opt_uint("threads")?.unwrap_or(0) as usize;
        let kernel = top.opt_table("kernel")?.map(|t| parse_kernel(&t)).transpose()?;
        let functional = top.opt_table("functional")?.map(|t| parse_functional(&t)).transpose()?;
        let dml = parse_dml(&top.opt_table("dml")?.unwrap_or_else(|| Section::empty("dml")))?;
        let tuning = parse_tuning(&top.opt_table("tuning")?.unwrap_or_else(|| Section::empty("tuning")))?;
        let io = top.opt_table("io")?.map(|t| parse_io(&t, base)).transpose()?.unwrap_or_default();
        let simulate = top.opt_table("simulate")?.map(|t| parse_simulate(&t)).transpose()?;
        Ok(Self {
            seed,
            threads,
            kernel,
            functional,
            dml,
            tuning,
            io,
            simulate,
        })
    }

    pub fn estimator(&self) -> dml::EstimatorConfig {
        dml::EstimatorConfig {
            folds: self.dml.folds,
            level: self.dml.level,
            trim: self.dml.trim,
            lambda_gamma: self.dml.lambda_gamma.clone(),
            lambda_alpha: self.dml.lambda_alpha.clone(),
            grid: self.tuning.grid.clone(),
            tuning_folds: self.tuning.folds,
            strict_tuning: self.dml.strict_tuning,
            solver: self.dml.solver,
            seed: self.seed,
        }
    }
}

/// A TOML table together with its dotted path.
struct Section<'a> {
    path: String,
    table: std::borrow::Cow<'a, Table>,
}

impl<'a> Section<'a> {
    fn new(path: &str, table: &'a Table) -> Self {
        Self {
            path: path.to_string(),
            table: std::borrow::Cow::Borrowed(table),
        }
    }

    fn empty(path: &str) -> Section<'static> {
        Section {
            path: path.to_string(),
            table: std::borrow::Cow::Owned(Table::new()),
        }
    }

    fn key(&self, k: &str) -> String {
        if self.path.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.path)
        }
    }

    fn err(&self, k: &str, msg: impl std::fmt::Display) -> Error {
        Error::config(format!("{}: {msg}", self.key(k)))
    }

    fn allow(&self, keys: &[&str]) -> Result<()> {
        match self.table.keys().find(|k| !keys.contains(&k.as_str())) {
            Some(k) => Err(self.err(k, format!("unknown key (expected one of: {})", keys.join(", ")))),
            None => Ok(()),
        }
    }

    fn get(&self, k: &str) -> Option<&Value> {
        self.table.get(k)
    }

    fn opt_table(&self, k: &str) -> Result<Option<Section<'_>>> {
        match self.get(k) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(Some(Section::new(&self.key(k), t))),
            Some(_) => Err(self.err(k, "expected a table")),
        }
    }

    fn opt_float(&self, k: &str) -> Result<Option<f64>> {
        match self.get(k) {
            None => Ok(None),
            Some(v) => as_float(v).map(Some).ok_or_else(|| self.err(k, "expected a number")),
        }
    }

    fn finite(&self, k: &str, default: Option<f64>) -> Result<f64> {
        let v = match (self.opt_float(k)?, default) {
            (Some(v), _) => v,
            (None, Some(d)) => d,
            (None, None) => return Err(self.err(k, "missing required key")),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(k, format!("must be finite, got {v}")))
        }
    }

    fn opt_uint(&self, k: &str) -> Result<Option<u64>> {
        match self.get(k) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(_) => Err(self.err(k, "expected a nonnegative integer")),
        }
    }

    fn opt_bool(&self, k: &str) -> Result<Option<bool>> {
        match self.get(k) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(*b)),
            Some(_) => Err(self.err(k, "expected true or false")),
        }
    }

    fn opt_str(&self, k: &str) -> Result<Option<&str>> {
        match self.get(k) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.err(k, "expected a string")),
        }
    }

    fn str(&self, k: &str) -> Result<&str> {
        self.opt_str(k)?.ok_or_else(|| self.err(k, "missing required key"))
    }

    fn opt_floats(&self, k: &str) -> Result<Option<Vec<f64>>> {
        match self.get(k) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(as_float)
                .collect::<Option<Vec<_>>>()
                .map(Some)
                .ok_or_else(|| self.err(k, "expected an array of numbers")),
            Some(_) => Err(self.err(k, "expected an array of numbers")),
        }
    }
}

fn as_float(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn parse_kernel(s: &Section) -> Result<Vec<KernelGroup>> {
    s.allow(&["groups"])?;
    let groups = match s.get("groups") {
        Some(Value::Array(a)) if !a.is_empty() => a,
        Some(Value::Array(_)) | None => return Err(s.err("groups", "at least one kernel group is required")),
        Some(_) => return Err(s.err("groups", "expected an array of tables ([[kernel.groups]])")),
    };
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let key = format!("{}[{i}]", s.key("groups"));
            let Value::Table(t) = g else {
                return Err(Error::config(format!("{key}: expected a table")));
            };
            let g = Section::new(&key, t);
            g.allow(&["columns", "kind", "bandwidth", "levels"])?;
            let columns: Vec<String> = match g.get("columns") {
                Some(Value::Array(a)) if !a.is_empty() => a
                    .iter()
                    .map(|v| v.as_str().map(str::to_string))
                    .collect::<Option<_>>()
                    .ok_or_else(|| g.err("columns", "expected an array of column names"))?,
                Some(Value::String(c)) => vec![c.clone()],
                Some(_) => return Err(g.err("columns", "expected a non-empty array of column names")),
                None => return Err(g.err("columns", "missing required key")),
            };
            let kind = match g.str("kind")? {
                "gaussian" => {
                    if g.get("levels").is_some() {
                        return Err(g.err("levels", "only discrete groups take levels"));
                    }
                    let bw = match g.get("bandwidth") {
                        None => Bandwidth::Median,
                        Some(Value::String(m)) if m == "median" => Bandwidth::Median,
                        Some(v) => match as_float(v) {
                            Some(h) if h.is_finite() && h > 0.0 => Bandwidth::Fixed(h),
                            _ => return Err(g.err("bandwidth", "expected \"median\" or a positive number")),
                        },
                    };
                    GroupKind::Gaussian(bw)
                }
                "discrete" => {
                    if g.get("bandwidth").is_some() {
                        return Err(g.err("bandwidth", "only gaussian groups take a bandwidth"));
                    }
                    if columns.len() != 1 {
                        return Err(g.err("columns", "a discrete group covers exactly one column"));
                    }
                    let levels = g.opt_floats("levels")?;
                    if let Some(l) = &levels {
                        if l.is_empty() || l.iter().any(|v| !v.is_finite()) {
                            return Err(g.err("levels", "expected a non-empty array of finite numbers"));
                        }
                    }
                    GroupKind::Discrete(levels)
                }
                other => return Err(g.err("kind", format!("unknown kernel kind {other:?} (expected \"gaussian\" or \"discrete\")"))),
            };
            Ok(KernelGroup { key, columns, kind })
        })
        .collect()
}

fn parse_functional(s: &Section) -> Result<FunctionalConfig> {
    let kind = s.str("kind")?;
    let treatment = || s.opt_str("treatment").map(|t| t.unwrap_or("d").to_string());
    let f = match kind {
        "evaluation" => {
            s.allow(&["kind", "point"])?;
            let t = s.opt_table("point")?.ok_or_else(|| s.err("point", "missing required key"))?;
            let point = t
                .table
                .iter()
                .map(|(k, v)| as_float(v).filter(|x| x.is_finite()).map(|x| (k.clone(), x)).ok_or_else(|| t.err(k, "expected a finite number")))
                .collect::<Result<Vec<_>>>()?;
            if point.is_empty() {
                return Err(s.err("point", "needs one value per feature column"));
            }
            FunctionalConfig::Evaluation { point }
        }
        "ate" | "ate_ds" => {
            s.allow(&["kind", "treatment", "level"])?;
            let (treatment, level) = (treatment()?, s.finite("level", Some(1.0))?);
            if kind == "ate" {
                FunctionalConfig::Ate { treatment, level }
            } else {
                FunctionalConfig::AteDs { treatment, level }
            }
        }
        "att" => {
            s.allow(&["kind", "treatment", "counterfactual", "treated"])?;
            FunctionalConfig::Att {
                treatment: treatment()?,
                counterfactual: s.finite("counterfactual", Some(1.0))?,
                treated: s.finite("treated", Some(1.0))?,
            }
        }
        "cate" => {
            s.allow(&["kind", "treatment", "level", "subgroup", "subgroup_level"])?;
            FunctionalConfig::Cate {
                treatment: treatment()?,
                level: s.finite("level", Some(1.0))?,
                subgroup: s.opt_str("subgroup")?.unwrap_or("v").to_string(),
                subgroup_level: s.finite("subgroup_level", None)?,
            }
        }
        "incremental" => {
            s.allow(&["kind", "treatment", "density", "draws"])?;
            let draws = s.opt_uint("draws")?.unwrap_or(riesz_core::functionals::DEFAULT_INCREMENTAL_DRAWS as u64) as usize;
            if draws == 0 {
                return Err(s.err("draws", "must be positive"));
            }
            let d = s.opt_table("density")?.unwrap_or_else(|| Section::empty(&s.key("density")));
            let density = match d.opt_str("kind")?.unwrap_or("gaussian") {
                "gaussian" => {
                    d.allow(&["kind", "mean", "sd"])?;
                    let sd = d.finite("sd", Some(1.0))?;
                    if sd <= 0.0 {
                        return Err(d.err("sd", "must be positive"));
                    }
                    DensityConfig::Gaussian {
                        mean: d.finite("mean", Some(0.0))?,
                        sd,
                    }
                }
                "tabulated" => {
                    d.allow(&["kind", "grid", "density", "derivative"])?;
                    let get = |k: &str| d.opt_floats(k)?.ok_or_else(|| d.err(k, "missing required key"));
                    let density = DensityConfig::Tabulated {
                        grid: get("grid")?,
                        density: get("density")?,
                        derivative: get("derivative")?,
                    };
                    to_density(&density).validate().map_err(|e| d.err("grid", e))?;
                    density
                }
                other => return Err(d.err("kind", format!("unknown density {other:?} (expected \"gaussian\" or \"tabulated\")"))),
            };
            FunctionalConfig::Incremental {
                treatment: treatment()?,
                density,
                draws,
            }
        }
        other => {
            return Err(s.err(
                "kind",
                format!("unknown functional {other:?} (expected evaluation, ate, ate_ds, att, cate or incremental)"),
            ))
        }
    };
    Ok(f)
}

pub fn to_density(d: &DensityConfig) -> riesz_core::functionals::WeightDensity {
    use riesz_core::functionals::WeightDensity;
    match d {
        DensityConfig::Gaussian { mean, sd } => WeightDensity::Gaussian { mean: *mean, sd: *sd },
        DensityConfig::Tabulated { grid, density, derivative } => WeightDensity::Tabulated {
            grid: grid.clone(),
            density: density.clone(),
            derivative: derivative.clone(),
        },
    }
}

fn parse_lambda(s: &Section, k: &str, folds: usize) -> Result<Lambda> {
    let check = |v: f64| {
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(s.err(k, format!("regularization must be positive and finite, got {v}")))
        }
    };
    match s.get(k) {
        None => Ok(Lambda::Cv),
        Some(Value::String(c)) if c == "cv" => Ok(Lambda::Cv),
        Some(Value::Array(_)) => {
            let vs = s.opt_floats(k)?.expect("present");
            if vs.len() != folds {
                return Err(s.err(k, format!("{} per-fold values for {folds} folds", vs.len())));
            }
            Ok(Lambda::PerFold(vs.into_iter().map(check).collect::<Result<_>>()?))
        }
        Some(v) => match as_float(v) {
            Some(x) => Ok(Lambda::Fixed(check(x)?)),
            None => Err(s.err(k, "expected \"cv\", a positive number, or one number per fold")),
        },
    }
}

fn parse_dml(s: &Section) -> Result<DmlConfig> {
    s.allow(&["folds", "level", "lambda_gamma", "lambda_alpha", "trim", "strict_tuning", "solver"])?;
    let folds = s.opt_uint("folds")?.unwrap_or(dml::DEFAULT_FOLDS as u64) as usize;
    if folds < 2 {
        return Err(s.err("folds", format!("need at least 2 folds, got {folds}")));
    }
    let level = s.opt_float("level")?.unwrap_or(dml::DEFAULT_LEVEL);
    dml::critical_value(level).map_err(|_| s.err("level", format!("must lie strictly between 0 and 1, got {level}")))?;
    let trim = match s.opt_float("trim")? {
        Some(t) if !(t.is_finite() && t > 0.0) => return Err(s.err("trim", format!("must be positive and finite, got {t}"))),
        t => t,
    };
    let solver = match s.opt_str("solver")?.unwrap_or("reduced") {
        "reduced" => RieszSolver::Reduced,
        "extended" => RieszSolver::Extended,
        other => return Err(s.err("solver", format!("unknown solver {other:?} (expected \"reduced\" or \"extended\")"))),
    };
    Ok(DmlConfig {
        folds,
        level,
        lambda_gamma: parse_lambda(s, "lambda_gamma", folds)?,
        lambda_alpha: parse_lambda(s, "lambda_alpha", folds)?,
        trim,
        strict_tuning: s.opt_bool("strict_tuning")?.unwrap_or(false),
        solver,
    })
}

fn parse_tuning(s: &Section) -> Result<TuningConfig> {
    s.allow(&["grid", "grid_min", "grid_max", "grid_points", "folds"])?;
    let grid = match s.opt_floats("grid")? {
        Some(g) => {
            if ["grid_min", "grid_max", "grid_points"].iter().any(|k| s.get(k).is_some()) {
                return Err(s.err("grid", "give either an explicit grid or grid_min/grid_max/grid_points, not both"));
            }
            g
        }
        None => {
            let lo = s.opt_float("grid_min")?.unwrap_or(krr::DEFAULT_GRID_MIN);
            let hi = s.opt_float("grid_max")?.unwrap_or(krr::DEFAULT_GRID_MAX);
            let points = s.opt_uint("grid_points")?.unwrap_or(krr::DEFAULT_GRID_POINTS as u64) as usize;
            if !(lo.is_finite() && lo > 0.0) {
                return Err(s.err("grid_min", format!("must be positive, got {lo}")));
            }
            if !(hi.is_finite() && hi >= lo) {
                return Err(s.err("grid_max", format!("must be at least grid_min, got {hi}")));
            }
            if points == 0 {
                return Err(s.err("grid_points", "must be positive"));
            }
            krr::log_grid(lo, hi, points)
        }
    };
    if grid.is_empty() {
        return Err(s.err("grid", "must not be empty"));
    }
    if let Some(bad) = grid.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
        return Err(s.err("grid", format!("values must be positive and finite, got {bad}")));
    }
    let folds = s.opt_uint("folds")?.unwrap_or(krr::DEFAULT_TUNING_FOLDS as u64) as usize;
    if folds < 2 {
        return Err(s.err("folds", format!("need at least 2 folds, got {folds}")));
    }
    Ok(TuningConfig { grid, folds })
}

fn parse_io(s: &Section, base: &Path) -> Result<IoConfig> {
    s.allow(&["data", "population", "out"])?;
    let path = |k: &str| -> Result<Option<PathBuf>> { Ok(s.opt_str(k)?.map(|p| base.join(p))) };
    Ok(IoConfig {
        data: path("data")?,
        population: path("population")?,
        out: path("out")?,
    })
}

fn parse_simulate(s: &Section) -> Result<SimulateConfig> {
    fn with(extra: &[&'static str]) -> Vec<&'static str> {
        ["dgp", "n", "replications", "mode"].iter().chain(extra).copied().collect()
    }
    let noise = |s: &Section| -> Result<f64> {
        let v = s.finite("noise", Some(1.0))?;
        if v < 0.0 {
            return Err(s.err("noise", "must be nonnegative"));
        }
        Ok(v)
    };
    let dgp = match s.opt_str("dgp")?.unwrap_or("binary_ate") {
        "discrete_eval" => {
            s.allow(&with(&["noise"]))?;
            DgpConfig::DiscreteEval { noise: noise(s)? }
        }
        "binary_ate" => {
            s.allow(&with(&["coefs", "clip", "tau", "noise"]))?;
            let defaults = riesz_core::sim::BinaryAteDgp::default();
            let coefs = s.opt_floats("coefs")?.unwrap_or(defaults.coefs);
            if coefs.len() < 2 || coefs.iter().any(|c| !c.is_finite()) {
                return Err(s.err("coefs", "need at least two finite coefficients"));
            }
            let clip = s.finite("clip", Some(defaults.clip))?;
            if !(0.05..0.5).contains(&clip) {
                return Err(s.err("clip", format!("must lie in [0.05, 0.5), got {clip}")));
            }
            DgpConfig::BinaryAte {
                coefs,
                clip,
                tau: s.finite("tau", Some(defaults.tau))?,
                noise: noise(s)?,
            }
        }
        "incremental" => {
            s.allow(&with(&["tau", "slope", "treatment_sd", "noise"]))?;
            let d = riesz_core::sim::IncrementalDgp::default();
            let treatment_sd = s.finite("treatment_sd", Some(d.treatment_sd))?;
            if treatment_sd <= 0.0 {
                return Err(s.err("treatment_sd", "must be positive"));
            }
            DgpConfig::Incremental {
                tau: s.finite("tau", Some(d.tau))?,
                slope: s.finite("slope", Some(d.slope))?,
                treatment_sd,
                noise: noise(s)?,
            }
        }
        other => {
            return Err(s.err(
                "dgp",
                format!("unknown process {other:?} (expected discrete_eval, binary_ate or incremental)"),
            ))
        }
    };
    let n = s.opt_uint("n")?.unwrap_or(1000) as usize;
    if n < 2 {
        return Err(s.err("n", "need at least two observations"));
    }
    let replications = s.opt_uint("replications")?.unwrap_or(100) as usize;
    if replications == 0 {
        return Err(s.err("replications", "must be positive"));
    }
    let oracle = match s.opt_str("mode")?.unwrap_or("estimated") {
        "estimated" => false,
        "oracle" => true,
        other => return Err(s.err("mode", format!("unknown mode {other:?} (expected \"estimated\" or \"oracle\")"))),
    };
    Ok(SimulateConfig {
        dgp,
        n,
        replications,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/cfg"))
    }

    fn config_message(text: &str) -> String {
        match parse(text) {
            Err(Error::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_config_takes_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.dml.folds, 5);
        assert_eq!(c.dml.level, 0.95);
        assert_eq!(c.dml.lambda_gamma, Lambda::Cv);
        assert_eq!(c.tuning.grid, krr::default_grid());
        assert!(c.kernel.is_none() && c.functional.is_none());
    }

    #[test]
    fn errors_name_the_key() {
        assert!(config_message("[dml]\nlevel = 1.5").starts_with("dml.level:"));
        assert!(config_message("[dml]\nfolds = 1").starts_with("dml.folds:"));
        assert!(config_message("[dml]\nlambda_alpha = -1").starts_with("dml.lambda_alpha:"));
        assert!(config_message("[dml]\nlambda_gamma = [1e-3]").starts_with("dml.lambda_gamma:"));
        assert!(config_message("[tuning]\ngrid = [1, 0]").starts_with("tuning.grid:"));
        assert!(config_message("[dml]\nbogus = 1").starts_with("dml.bogus:"));
        assert!(config_message("colour = 1").starts_with("colour:"));
        assert!(config_message("[functional]\nkind = \"late\"").starts_with("functional.kind:"));
        assert!(config_message("[simulate]\ndgp = \"nope\"").starts_with("simulate.dgp:"));
        assert!(config_message("[[kernel.groups]]\ncolumns = [\"x1\"]\nkind = \"laplace\"").starts_with("kernel.groups[0].kind:"));
        assert!(config_message("[[kernel.groups]]\ncolumns = [\"x1\", \"x2\"]\nkind = \"discrete\"").starts_with("kernel.groups[0].columns:"));
        assert!(config_message("[functional]\nkind = \"cate\"").starts_with("functional.subgroup_level:"));
    }

    #[test]
    fn full_config_round_trip() {
        let c = parse(
            r#"
            seed = 11
            threads = 2
            [[kernel.groups]]
            columns = ["d"]
            kind = "discrete"
            [[kernel.groups]]
            columns = ["x1", "x2"]
            kind = "gaussian"
            bandwidth = 0.7
            [functional]
            kind = "att"
            counterfactual = 0
            [dml]
            lambda_gamma = 1e-3
            lambda_alpha = [1, 2, 3]
            folds = 3
            trim = 20
            [tuning]
            grid_min = 1e-4
            grid_max = 1
            grid_points = 5
            [io]
            data = "sample.csv"
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 11);
        let groups = c.kernel.unwrap();
        assert_eq!(groups[1].kind, GroupKind::Gaussian(Bandwidth::Fixed(0.7)));
        assert_eq!(groups[0].kind, GroupKind::Discrete(None));
        assert_eq!(
            c.functional.unwrap(),
            FunctionalConfig::Att {
                treatment: "d".into(),
                counterfactual: 0.0,
                treated: 1.0
            }
        );
        assert_eq!(c.dml.lambda_alpha, Lambda::PerFold(vec![1.0, 2.0, 3.0]));
        assert_eq!(c.tuning.grid.len(), 5);
        assert_eq!(c.io.data.unwrap(), PathBuf::from("/cfg/sample.csv"));
    }
}
