//! Linear functionals `m(w, gamma)` and the extended kernel geometry.
//!
//! Every supported functional has the same shape: it replaces a fixed set of
//! "intervened" columns of the row by one or more atoms `z_t` with weights
//! `c_t`, optionally gated by an indicator on the row, and sums:
//!
//! ```text
//! m(a, gamma) = gate(a) * sum_t c_t * gamma(z_t, a_rest)
//! ```
//!
//! With a product kernel split as `k = k_int * k_rest` (components touching
//! the intervened columns, and the others), the adjoint feature
//! `M* phi(a)` has closed-form inner products:
//!
//! ```text
//! <phi(b), M* phi(a)>      = gate(a) * e(b) * k_rest(a, b),   e(b) = sum_t c_t k_int(z_t, b)
//! <M* phi(a), M* phi(b)>   = gate(a) gate(b) * C * k_rest(a, b),   C = sum_st c_s c_t k_int(z_s, z_t)
//! ```
//!
//! These fill the blocks `K2 = K3'` and `K4` of the extended kernel matrix.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg;
use crate::table::FeatureTable;

/// Default number of Monte Carlo draws for incremental effects.
pub const DEFAULT_INCREMENTAL_DRAWS: usize = 100;

/// Weight density `omega` over treatment values for incremental effects.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightDensity {
    /// Normal density; score `S(u) = (u - mean) / sd^2`.
    Gaussian { mean: f64, sd: f64 },
    /// Piecewise-linear density tabulated as `(u, omega(u), omega'(u))`.
    Tabulated {
        grid: Vec<f64>,
        density: Vec<f64>,
        derivative: Vec<f64>,
    },
}

impl WeightDensity {
    pub fn validate(&self) -> Result<()> {
        match self {
            WeightDensity::Gaussian { mean, sd } => {
                if !mean.is_finite() || !(sd.is_finite() && *sd > 0.0) {
                    return Err(Error::config(format!(
                        "gaussian weight density needs finite mean and positive sd, got ({mean}, {sd})"
                    )));
                }
            }
            WeightDensity::Tabulated {
                grid,
                density,
                derivative,
            } => {
                if grid.len() < 2 || density.len() != grid.len() || derivative.len() != grid.len() {
                    return Err(Error::config(
                        "tabulated weight density needs at least two (u, omega, omega') rows of equal length",
                    ));
                }
                if grid.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::config("tabulated weight density grid must be strictly increasing"));
                }
                if density.iter().any(|&d| !(d.is_finite() && d > 0.0))
                    || derivative.iter().any(|d| !d.is_finite())
                    || grid.iter().any(|u| !u.is_finite())
                {
                    // omega > 0 on the grid keeps the score bounded there.
                    return Err(Error::config(
                        "tabulated weight density must be finite with omega > 0 at every grid point",
                    ));
                }
            }
        }
        Ok(())
    }

    /// `S(u) = -omega'(u) / omega(u)`.
    pub fn score(&self, u: f64) -> f64 {
        match self {
            WeightDensity::Gaussian { mean, sd } => (u - mean) / (sd * sd),
            WeightDensity::Tabulated {
                grid,
                density,
                derivative,
            } => {
                let (i, t) = locate(grid, u);
                let w = density[i] + t * (density[i + 1] - density[i]);
                let dw = derivative[i] + t * (derivative[i + 1] - derivative[i]);
                -dw / w
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            WeightDensity::Gaussian { mean, sd } => Normal::new(*mean, *sd).expect("validated").sample(rng),
            WeightDensity::Tabulated { grid, density, .. } => {
                let masses: Vec<f64> = grid
                    .windows(2)
                    .zip(density.windows(2))
                    .map(|(g, d)| 0.5 * (d[0] + d[1]) * (g[1] - g[0]))
                    .collect();
                let total: f64 = masses.iter().sum();
                let mut target = rng.random::<f64>() * total;
                let mut cell = masses.len() - 1;
                for (i, &m) in masses.iter().enumerate() {
                    if target < m {
                        cell = i;
                        break;
                    }
                    target -= m;
                }
                let target = target.min(masses[cell]);
                let (a, b) = (grid[cell], grid[cell + 1]);
                let (fa, fb) = (density[cell], density[cell + 1]);
                let width = b - a;
                let slope = (fb - fa) / width;
                // Invert fa t + slope t^2 / 2 = target on [0, width].
                let t = if slope.abs() < 1e-14 * fa.max(fb) / width {
                    target / fa
                } else {
                    (-fa + (fa * fa + 2.0 * slope * target).max(0.0).sqrt()) / slope
                };
                a + t.clamp(0.0, width)
            }
        }
    }
}

/// Cell index and fractional position of `u` on a sorted grid, clamped.
fn locate(grid: &[f64], u: f64) -> (usize, f64) {
    let last = grid.len() - 2;
    let i = match grid.binary_search_by(|g| g.total_cmp(&u)) {
        Ok(i) => i.min(last),
        Err(0) => 0,
        Err(i) => (i - 1).min(last),
    };
    let t = ((u - grid[i]) / (grid[i + 1] - grid[i])).clamp(0.0, 1.0);
    (i, t)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FunctionalKind {
    /// `theta = gamma(w*)` at a full feature row.
    Evaluation { point: Vec<f64> },
    /// `theta = E[gamma(d, X)]`.
    Ate { treatment: usize, level: f64 },
    /// `theta = E~[gamma(d, X)]` over an alternative covariate population.
    AteDs {
        treatment: usize,
        level: f64,
        population: FeatureTable,
    },
    /// `theta = E[gamma(d', X) 1{D = d}]`; the ratio target divides by `P(d)`.
    Att {
        treatment: usize,
        counterfactual: f64,
        treated: f64,
    },
    /// `theta = E[gamma(d, v, X) 1{V = v}]`; the ratio target divides by `P(v)`.
    Cate {
        treatment: usize,
        level: f64,
        subgroup: usize,
        subgroup_level: f64,
    },
    /// `theta = E[S(U) gamma(U, X)]` with `U ~ omega` independent of `X`.
    Incremental {
        treatment: usize,
        density: WeightDensity,
        draws: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Atom {
    values: Vec<f64>,
    weight: f64,
}

/// A targeted functional, with Monte Carlo draws fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSpec {
    kind: FunctionalKind,
    /// Intervened columns; empty for evaluation, which replaces the whole row.
    columns: Vec<usize>,
    atoms: Vec<Atom>,
    gate: Option<(usize, f64)>,
}

impl FunctionalSpec {
    pub fn evaluation(point: Vec<f64>) -> Result<Self> {
        if point.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("evaluation point must be finite"));
        }
        Ok(Self {
            atoms: vec![Atom {
                values: point.clone(),
                weight: 1.0,
            }],
            kind: FunctionalKind::Evaluation { point },
            columns: Vec::new(),
            gate: None,
        })
    }

    pub fn ate(treatment: usize, level: f64) -> Self {
        Self {
            kind: FunctionalKind::Ate { treatment, level },
            columns: vec![treatment],
            atoms: vec![Atom {
                values: vec![level],
                weight: 1.0,
            }],
            gate: None,
        }
    }

    pub fn ate_ds(treatment: usize, level: f64, population: FeatureTable) -> Result<Self> {
        if population.nrows() == 0 {
            return Err(Error::config("alternative population table is empty"));
        }
        Ok(Self {
            kind: FunctionalKind::AteDs {
                treatment,
                level,
                population,
            },
            columns: vec![treatment],
            atoms: vec![Atom {
                values: vec![level],
                weight: 1.0,
            }],
            gate: None,
        })
    }

    pub fn att(treatment: usize, counterfactual: f64, treated: f64) -> Self {
        Self {
            kind: FunctionalKind::Att {
                treatment,
                counterfactual,
                treated,
            },
            columns: vec![treatment],
            atoms: vec![Atom {
                values: vec![counterfactual],
                weight: 1.0,
            }],
            gate: Some((treatment, treated)),
        }
    }

    pub fn cate(treatment: usize, level: f64, subgroup: usize, subgroup_level: f64) -> Result<Self> {
        if treatment == subgroup {
            return Err(Error::config("CATE treatment and subgroup columns must differ"));
        }
        Ok(Self {
            kind: FunctionalKind::Cate {
                treatment,
                level,
                subgroup,
                subgroup_level,
            },
            columns: vec![treatment, subgroup],
            atoms: vec![Atom {
                values: vec![level, subgroup_level],
                weight: 1.0,
            }],
            gate: Some((subgroup, subgroup_level)),
        })
    }

    /// Draws `u_1..u_R` from `omega` once; every row reuses them.
    pub fn incremental(treatment: usize, density: WeightDensity, draws: usize, seed: u64) -> Result<Self> {
        density.validate()?;
        if draws == 0 {
            return Err(Error::config("incremental effect needs at least one draw"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let atoms = (0..draws)
            .map(|_| {
                let u = density.sample(&mut rng);
                Atom {
                    values: vec![u],
                    weight: density.score(u) / draws as f64,
                }
            })
            .collect();
        Ok(Self {
            kind: FunctionalKind::Incremental {
                treatment,
                density,
                draws,
                seed,
            },
            columns: vec![treatment],
            atoms,
            gate: None,
        })
    }

    pub fn kind(&self) -> &FunctionalKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            FunctionalKind::Evaluation { .. } => "evaluation",
            FunctionalKind::Ate { .. } => "ate",
            FunctionalKind::AteDs { .. } => "ate_ds",
            FunctionalKind::Att { .. } => "att",
            FunctionalKind::Cate { .. } => "cate",
            FunctionalKind::Incremental { .. } => "incremental",
        }
    }

    /// Monte Carlo draws `(u_r, S(u_r))` of an incremental functional.
    pub fn draws(&self) -> Option<Vec<(f64, f64)>> {
        match &self.kind {
            FunctionalKind::Incremental { density, .. } => Some(
                self.atoms
                    .iter()
                    .map(|a| (a.values[0], density.score(a.values[0])))
                    .collect(),
            ),
            _ => None,
        }
    }

    /// The alternative population of a distribution-shift functional.
    pub fn population(&self) -> Option<&FeatureTable> {
        match &self.kind {
            FunctionalKind::AteDs { population, .. } => Some(population),
            _ => None,
        }
    }

    /// Rows whose transformed features `M* phi(r)` enter the Riesz problem:
    /// the alternative population under distribution shift, the training
    /// rows otherwise.
    pub fn moment_rows<'a>(&'a self, train: &'a FeatureTable) -> &'a FeatureTable {
        self.population().unwrap_or(train)
    }

    /// Indicator whose mean is the denominator of the ratio target.
    pub fn ratio_indicator(&self, row: &[f64]) -> Option<f64> {
        match self.kind {
            FunctionalKind::Att { treatment, treated, .. } => Some(f64::from(row[treatment] == treated)),
            FunctionalKind::Cate {
                subgroup,
                subgroup_level,
                ..
            } => Some(f64::from(row[subgroup] == subgroup_level)),
            _ => None,
        }
    }

    #[inline]
    fn gate(&self, row: &[f64]) -> f64 {
        match self.gate {
            Some((c, level)) => f64::from(row[c] == level),
            None => 1.0,
        }
    }

    /// Row with the intervened columns replaced by an atom.
    fn substitute(&self, row: &[f64], atom: &Atom) -> Vec<f64> {
        if self.columns.is_empty() {
            return atom.values.clone();
        }
        let mut out = row.to_vec();
        for (&c, &v) in self.columns.iter().zip(&atom.values) {
            out[c] = v;
        }
        out
    }

    /// Every point at which `m(row, .)` queries its argument, with weights.
    pub fn query_points(&self, row: &[f64]) -> Vec<(Vec<f64>, f64)> {
        let g = self.gate(row);
        self.atoms
            .iter()
            .map(|a| (self.substitute(row, a), g * a.weight))
            .collect()
    }

    /// `m(row, gamma)`.
    pub fn m_value<G: Fn(&[f64]) -> f64 + ?Sized>(&self, row: &[f64], gamma: &G) -> f64 {
        let g = self.gate(row);
        if g == 0.0 {
            return 0.0;
        }
        let mut buf = row.to_vec();
        let mut acc = 0.0;
        for atom in &self.atoms {
            if self.columns.is_empty() {
                acc += atom.weight * gamma(&atom.values);
            } else {
                for (&c, &v) in self.columns.iter().zip(&atom.values) {
                    buf[c] = v;
                }
                acc += atom.weight * gamma(&buf);
            }
        }
        g * acc
    }

    /// Checks compatibility with a kernel and precomputes the split of the
    /// kernel into intervened and remaining components.
    pub fn bind(&self, spec: &KernelSpec) -> Result<BoundFunctional> {
        let intervened: Vec<usize> = match &self.kind {
            FunctionalKind::Evaluation { point } => {
                let cols = spec.columns();
                if let Some(&c) = cols.iter().find(|&&c| c >= point.len()) {
                    return Err(Error::config(format!(
                        "evaluation point has {} entries but the kernel uses column {c}",
                        point.len()
                    )));
                }
                if let Some(comp) = spec.components().iter().find(|c| !c.is_discrete()) {
                    return Err(Error::config(format!(
                        "evaluation requires discrete kernels on every column; columns {:?} are continuous",
                        comp.columns()
                    )));
                }
                spec.check_row(point)
                    .map_err(|e| Error::config(format!("evaluation point: {e}")))?;
                cols
            }
            _ => self.columns.clone(),
        };

        for &c in &intervened {
            let comp = spec.component_of(c).ok_or_else(|| {
                Error::config(format!("functional column {c} is not covered by any kernel component"))
            })?;
            if comp.columns().iter().any(|cc| !intervened.contains(cc)) {
                return Err(Error::config(format!(
                    "kernel component on columns {:?} mixes intervened and free columns",
                    comp.columns()
                )));
            }
        }

        let discrete_at = |col: usize, what: &str, level: f64| -> Result<()> {
            let comp = spec.component_of(col).expect("checked above");
            match comp.levels() {
                None => Err(Error::config(format!(
                    "{} requires a discrete kernel on {what} column {col}",
                    self.name()
                ))),
                Some(levels) if !levels.contains(&level) => Err(Error::config(format!(
                    "{what} level {level} is not among the kernel levels {levels:?}"
                ))),
                Some(_) => Ok(()),
            }
        };
        match &self.kind {
            FunctionalKind::Ate { treatment, level } | FunctionalKind::AteDs { treatment, level, .. } => {
                discrete_at(*treatment, "treatment", *level)?;
            }
            FunctionalKind::Att {
                treatment,
                counterfactual,
                treated,
            } => {
                discrete_at(*treatment, "treatment", *counterfactual)?;
                discrete_at(*treatment, "treatment", *treated)?;
            }
            FunctionalKind::Cate {
                treatment,
                level,
                subgroup,
                subgroup_level,
            } => {
                discrete_at(*treatment, "treatment", *level)?;
                discrete_at(*subgroup, "subgroup", *subgroup_level)?;
            }
            FunctionalKind::Evaluation { .. } | FunctionalKind::Incremental { .. } => {}
        }
        if let Some(pop) = self.population() {
            spec.check_table(pop)
                .map_err(|e| Error::input(format!("alternative population: {e}")))?;
        }

        let is_int = |c: &crate::kernels::KernelComponent| c.columns().iter().any(|x| intervened.contains(x));
        let int = spec.restrict(is_int);
        let rest = spec.restrict(|c| !is_int(c));
        let width = spec.columns().last().map_or(0, |&c| c + 1).max(
            self.columns.iter().copied().max().map_or(0, |c| c + 1),
        );
        let atom_rows: Vec<Vec<f64>> = self
            .atoms
            .iter()
            .map(|a| {
                if self.columns.is_empty() {
                    a.values.clone()
                } else {
                    let mut r = vec![f64::NAN; width];
                    for (&c, &v) in self.columns.iter().zip(&a.values) {
                        r[c] = v;
                    }
                    r
                }
            })
            .collect();
        let weights: Vec<f64> = self.atoms.iter().map(|a| a.weight).collect();
        let mut self_inner = 0.0;
        for (s, ws) in atom_rows.iter().zip(&weights) {
            for (t, wt) in atom_rows.iter().zip(&weights) {
                self_inner += ws * wt * int.eval_unchecked(s, t);
            }
        }
        Ok(BoundFunctional {
            functional: self.clone(),
            kernel: spec.clone(),
            int,
            rest,
            atom_rows,
            weights,
            self_inner,
        })
    }
}

/// A functional paired with a kernel: evaluates the extended kernel blocks.
#[derive(Debug, Clone)]
pub struct BoundFunctional {
    functional: FunctionalSpec,
    kernel: KernelSpec,
    int: KernelSpec,
    rest: KernelSpec,
    atom_rows: Vec<Vec<f64>>,
    weights: Vec<f64>,
    /// `C = sum_st c_s c_t k_int(z_s, z_t)`.
    self_inner: f64,
}

impl BoundFunctional {
    pub fn functional(&self) -> &FunctionalSpec {
        &self.functional
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    /// `e(b) = sum_t c_t k_int(z_t, b)`.
    #[inline]
    pub fn embed(&self, b: &[f64]) -> f64 {
        self.atom_rows
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * self.int.eval_unchecked(z, b))
            .sum()
    }

    #[inline]
    pub fn gate(&self, a: &[f64]) -> f64 {
        self.functional.gate(a)
    }

    #[inline]
    pub fn k_rest(&self, a: &[f64], b: &[f64]) -> f64 {
        self.rest.eval_unchecked(a, b)
    }

    /// `C = <M* phi(a), M* phi(b)>` for ungated rows sharing the free part.
    pub fn self_inner(&self) -> f64 {
        self.self_inner
    }

    /// `<phi(b), M* phi(a)> = m(a, k(., b))`: the transformed feature of
    /// moment row `a` evaluated at `b`.
    #[inline]
    pub fn ktilde(&self, a: &[f64], b: &[f64]) -> f64 {
        let g = self.gate(a);
        if g == 0.0 {
            return 0.0;
        }
        g * self.embed(b) * self.k_rest(a, b)
    }

    /// `<M* phi(a), M* phi(b)>`.
    #[inline]
    pub fn k4(&self, a: &[f64], b: &[f64]) -> f64 {
        let g = self.gate(a) * self.gate(b);
        if g == 0.0 {
            return 0.0;
        }
        g * self.self_inner * self.k_rest(a, b)
    }

    /// Extended kernel matrix over training rows and the functional's
    /// moment rows.
    pub fn extended_kernel(&self, train: &FeatureTable) -> Result<ExtendedKernel> {
        self.kernel.check_table(train)?;
        let moments = self.functional.moment_rows(train);
        let n = train.nrows();
        let r = moments.nrows();
        let k1 = self.kernel.gram_sym_unchecked(train);
        let embed: Vec<f64> = train.rows().map(|b| self.embed(b)).collect();
        let k2 = Mat::from_fn(n, r, |i, j| {
            let a = moments.row(j);
            let g = self.gate(a);
            if g == 0.0 {
                0.0
            } else {
                g * embed[i] * self.k_rest(a, train.row(i))
            }
        });
        let k3 = k2.transpose().to_owned();
        let k4 = Mat::from_fn(r, r, |i, j| self.k4(moments.row(i), moments.row(j)));
        ExtendedKernel::assemble(k1, k2, k3, k4, n)
    }
}

/// The `(n + r) x (n + r)` extended kernel matrix and the quantities built
/// from it, where `r` is the number of moment rows (`r = n` unless the
/// functional averages over an alternative population).
#[derive(Debug, Clone)]
pub struct ExtendedKernel {
    pub k1: Mat<f64>,
    pub k2: Mat<f64>,
    pub k3: Mat<f64>,
    pub k4: Mat<f64>,
    /// `[K1; K3] [K1; K3]'`.
    pub omega: Mat<f64>,
    /// `(n / r) [K2; K4] 1_r`.
    pub v: Vec<f64>,
    /// `[[K1, K2], [K3, K4]]`.
    pub k: Mat<f64>,
    pub n: usize,
}

impl ExtendedKernel {
    fn assemble(k1: Mat<f64>, k2: Mat<f64>, k3: Mat<f64>, k4: Mat<f64>, n: usize) -> Result<Self> {
        linalg::ensure_sequential();
        let r = k4.nrows();
        let dim = n + r;
        let mut k = Mat::<f64>::zeros(dim, dim);
        for j in 0..dim {
            for i in 0..dim {
                k[(i, j)] = match (i < n, j < n) {
                    (true, true) => k1[(i, j)],
                    (true, false) => k2[(i, j - n)],
                    (false, true) => k3[(i - n, j)],
                    (false, false) => k4[(i - n, j - n)],
                };
            }
        }
        let stacked = Mat::from_fn(dim, n, |i, j| if i < n { k1[(i, j)] } else { k3[(i - n, j)] });
        let mut omega = &stacked * stacked.transpose();
        linalg::symmetrize(&mut omega);
        linalg::symmetrize(&mut k);
        let scale = if r == 0 { 0.0 } else { n as f64 / r as f64 };
        let v = (0..dim)
            .map(|i| {
                let s: f64 = if i < n {
                    (0..r).map(|j| k2[(i, j)]).sum()
                } else {
                    (0..r).map(|j| k4[(i - n, j)]).sum()
                };
                scale * s
            })
            .collect();
        Ok(Self {
            k1,
            k2,
            k3,
            k4,
            omega,
            v,
            k,
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }
}

/// Free-function form of [`FunctionalSpec::m_value`].
pub fn m_value<G: Fn(&[f64]) -> f64 + ?Sized>(f: &FunctionalSpec, row: &[f64], gamma: &G) -> f64 {
    f.m_value(row, gamma)
}

/// Free-function form of [`BoundFunctional::extended_kernel`].
pub fn build_extended_kernel(f: &FunctionalSpec, spec: &KernelSpec, data: &FeatureTable) -> Result<ExtendedKernel> {
    f.bind(spec)?.extended_kernel(data)
}

/// `<phi(w_train), M phi(w_eval)>`, i.e. `m(w_train, k(., w_eval))`.
pub fn ktilde(f: &FunctionalSpec, spec: &KernelSpec, w_train: &[f64], w_eval: &[f64]) -> Result<f64> {
    spec.check_row(w_train)?;
    spec.check_row(w_eval)?;
    Ok(f.bind(spec)?.ktilde(w_train, w_eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelComponent;

    fn binary_discrete() -> KernelSpec {
        KernelSpec::new(vec![KernelComponent::discrete(0, vec![0.0, 1.0]).unwrap()]).unwrap()
    }

    fn d_x_spec(h: f64) -> KernelSpec {
        KernelSpec::new(vec![
            KernelComponent::discrete(0, vec![0.0, 1.0]).unwrap(),
            KernelComponent::gaussian(vec![1], h).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn ate_of_constant_function() {
        let f = FunctionalSpec::ate(0, 1.0);
        assert_eq!(f.m_value(&[0.0, 3.0], &|_: &[f64]| 7.0), 7.0);
    }

    #[test]
    fn att_indicator_kills_untreated_rows() {
        // Conditioning on D = 0; a row with D = 1 contributes nothing.
        let f = FunctionalSpec::att(0, 1.0, 0.0);
        assert_eq!(f.m_value(&[1.0, 0.4], &|w: &[f64]| 5.0 + w[1]), 0.0);
        assert_eq!(f.m_value(&[0.0, 0.4], &|w: &[f64]| w[0] + w[1]), 1.4);
    }

    #[test]
    fn evaluation_substitutes_point() {
        let f = FunctionalSpec::evaluation(vec![1.0, 2.0]).unwrap();
        let gamma = |w: &[f64]| if w == [1.0, 2.0] { 2.5 } else { -1.0 };
        assert_eq!(f.m_value(&[0.0, 0.0], &gamma), 2.5);
    }

    #[test]
    fn single_row_evaluation_blocks() {
        // Identity kernel on two levels, one observation at w* = 1.
        let f = FunctionalSpec::evaluation(vec![1.0]).unwrap();
        let ext = build_extended_kernel(&f, &binary_discrete(), &FeatureTable::column(&[1.0])).unwrap();
        assert_eq!(ext.k1[(0, 0)], 1.0);
        assert_eq!(ext.k2[(0, 0)], 1.0);
        assert_eq!(ext.k3[(0, 0)], 1.0);
        // <M* phi(a), M* phi(b)> = <phi(w*), phi(w*)> = k(w*, w*) = 1.
        assert_eq!(ext.k4[(0, 0)], 1.0);
        assert_eq!(ext.v, vec![1.0, 1.0]);
    }

    #[test]
    fn ate_blocks_with_binary_treatment() {
        let h = 0.8;
        let spec = d_x_spec(h);
        let data = FeatureTable::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.5], vec![1.0, 1.1]]).unwrap();
        let f = FunctionalSpec::ate(0, 1.0);
        let ext = build_extended_kernel(&f, &spec, &data).unwrap();
        let kx = |a: f64, b: f64| (-(a - b) * (a - b) / (2.0 * h * h)).exp();
        for i in 0..3 {
            for j in 0..3 {
                let (di, xi) = (data.row(i)[0], data.row(i)[1]);
                let xj = data.row(j)[1];
                let k2 = f64::from(di == 1.0) * kx(xi, xj);
                assert!((ext.k2[(i, j)] - k2).abs() < 1e-15);
                assert_eq!(ext.k2[(i, j)], ext.k3[(j, i)]);
                assert!((ext.k4[(i, j)] - kx(xi, xj)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ktilde_evaluation_and_ate() {
        let f = FunctionalSpec::evaluation(vec![1.0]).unwrap();
        let spec = binary_discrete();
        // m(W_i, k(., w)) = k(w*, w), whatever the training row.
        assert_eq!(ktilde(&f, &spec, &[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(ktilde(&f, &spec, &[1.0], &[0.0]).unwrap(), 0.0);

        let h = 1.0;
        let spec = d_x_spec(h);
        let f = FunctionalSpec::ate(0, 1.0);
        let v = ktilde(&f, &spec, &[0.0, 0.3], &[1.0, 1.3]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(ktilde(&f, &spec, &[1.0, 0.3], &[0.0, 0.3]).unwrap(), 0.0);
    }

    #[test]
    fn ktilde_reproduces_k3_columns() {
        let spec = d_x_spec(0.6);
        let data = FeatureTable::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.5], vec![0.0, -0.2]]).unwrap();
        for f in [FunctionalSpec::ate(0, 0.0), FunctionalSpec::att(0, 1.0, 0.0)] {
            let b = f.bind(&spec).unwrap();
            let ext = b.extended_kernel(&data).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(b.ktilde(data.row(i), data.row(j)), ext.k3[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn evaluation_rejects_continuous_components() {
        let f = FunctionalSpec::evaluation(vec![1.0, 0.0]).unwrap();
        assert!(matches!(f.bind(&d_x_spec(1.0)), Err(Error::Config(_))));
    }

    #[test]
    fn ate_rejects_continuous_treatment_and_unknown_level() {
        let spec = KernelSpec::new(vec![KernelComponent::gaussian(vec![0], 1.0).unwrap()]).unwrap();
        assert!(matches!(FunctionalSpec::ate(0, 1.0).bind(&spec), Err(Error::Config(_))));
        assert!(matches!(FunctionalSpec::ate(0, 2.0).bind(&d_x_spec(1.0)), Err(Error::Config(_))));
        assert!(matches!(FunctionalSpec::ate(5, 1.0).bind(&d_x_spec(1.0)), Err(Error::Config(_))));
    }

    #[test]
    fn mixed_component_rejected() {
        let spec = KernelSpec::new(vec![KernelComponent::gaussian(vec![0, 1], 1.0).unwrap()]).unwrap();
        let f = FunctionalSpec::incremental(0, WeightDensity::Gaussian { mean: 0.0, sd: 1.0 }, 10, 1).unwrap();
        assert!(matches!(f.bind(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn incremental_draws_are_seeded() {
        let dens = WeightDensity::Gaussian { mean: 0.5, sd: 2.0 };
        let a = FunctionalSpec::incremental(0, dens.clone(), 50, 9).unwrap();
        let b = FunctionalSpec::incremental(0, dens.clone(), 50, 9).unwrap();
        let c = FunctionalSpec::incremental(0, dens, 50, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let draws = a.draws().unwrap();
        assert_eq!(draws.len(), 50);
        for (u, s) in draws {
            assert!((s - (u - 0.5) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn incremental_m_value_averages_scores() {
        let dens = WeightDensity::Gaussian { mean: 0.0, sd: 1.0 };
        let f = FunctionalSpec::incremental(0, dens, 20, 3).unwrap();
        let draws = f.draws().unwrap();
        let expect: f64 = draws.iter().map(|(u, s)| s * (u * 2.0 + 0.7)).sum::<f64>() / 20.0;
        let got = f.m_value(&[9.0, 0.7], &|w: &[f64]| 2.0 * w[0] + w[1]);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn tabulated_density_samples_inside_grid() {
        let dens = WeightDensity::Tabulated {
            grid: vec![0.0, 1.0, 2.0],
            density: vec![0.2, 0.6, 0.2],
            derivative: vec![0.4, 0.0, -0.4],
        };
        dens.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<f64> = (0..2000).map(|_| dens.sample(&mut rng)).collect();
        assert!(draws.iter().all(|&u| (0.0..=2.0).contains(&u)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
        assert!((dens.score(0.5) - (-(0.2) / 0.4)).abs() < 1e-12);
    }

    #[test]
    fn invalid_densities() {
        assert!(WeightDensity::Gaussian { mean: 0.0, sd: 0.0 }.validate().is_err());
        let bad = WeightDensity::Tabulated {
            grid: vec![0.0, 1.0],
            density: vec![0.0, 1.0],
            derivative: vec![1.0, 1.0],
        };
        assert!(bad.validate().is_err());
    }
}
