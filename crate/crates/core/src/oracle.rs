//! Reference implementations used to check the estimators.
//!
//! Nothing here shares code with the closed forms it checks: the
//! brute-force Riesz representer enumerates a finite support, and the
//! direct loss minimizers build their Gram matrices purely from black-box
//! compositions of kernel evaluations and `m_value`, then run conjugate
//! gradients on the loss. They are slow by design and meant for small
//! instances.

use std::collections::HashMap;

use faer::Mat;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::functionals::{FunctionalKind, FunctionalSpec, WeightDensity};
use crate::kernels::{c_max_of, KernelComponent, KernelSpec};
use crate::krr::fit_krr;
use crate::linalg::{self, Spectral};
use crate::riesz::{fit_riesz_with, RieszSolver};
use crate::table::{Dataset, FeatureTable};

/// Largest sample accepted by the direct minimizers.
pub const DIRECT_MAX_ROWS: usize = 50;
/// First-order tolerance of the direct minimizers, relative to the linear term.
pub const DIRECT_TOL: f64 = 1e-10;
/// Largest support the enumeration routines accept.
pub const MAX_SUPPORT: usize = 10_000;

fn row_key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// A finite-support data generating process: `W` takes the rows of
/// `support` with probabilities `probs`, and `Y = gamma0(W) + noise * e`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDgp {
    support: FeatureTable,
    probs: Vec<f64>,
    gamma0: Vec<f64>,
    noise: f64,
    index: HashMap<Vec<u64>, usize>,
}

impl DiscreteDgp {
    pub fn new(support: FeatureTable, probs: Vec<f64>, gamma0: Vec<f64>, noise: f64) -> Result<Self> {
        let m = support.nrows();
        if m == 0 || m > MAX_SUPPORT {
            return Err(Error::config(format!("support size {m} outside 1..={MAX_SUPPORT}")));
        }
        if probs.len() != m || gamma0.len() != m {
            return Err(Error::config("support, probabilities and outcome table differ in length"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::config("support probabilities must be positive"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("support probabilities sum to {total}, not 1")));
        }
        if gamma0.iter().any(|g| !g.is_finite()) || !(noise.is_finite() && noise >= 0.0) {
            return Err(Error::config("outcome table must be finite and noise nonnegative"));
        }
        let mut index = HashMap::with_capacity(m);
        for (i, row) in support.rows().enumerate() {
            if index.insert(row_key(row), i).is_some() {
                return Err(Error::config(format!("support row {i} is duplicated")));
            }
        }
        Ok(Self {
            support,
            probs,
            gamma0,
            noise,
            index,
        })
    }

    pub fn support(&self) -> &FeatureTable {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn gamma0(&self) -> &[f64] {
        &self.gamma0
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn index_of(&self, row: &[f64]) -> Option<usize> {
        self.index.get(&row_key(row)).copied()
    }

    /// `E[gamma0(W)^2]`.
    pub fn second_moment(&self) -> f64 {
        self.probs.iter().zip(&self.gamma0).map(|(p, g)| p * g * g).sum()
    }

    /// A function on the support given by its table of values; zero off it.
    pub fn table_fn<'a>(&'a self, values: &'a [f64]) -> impl Fn(&[f64]) -> f64 + Send + Sync + 'a {
        move |w: &[f64]| self.index_of(w).map_or(0.0, |i| values[i])
    }

    /// `n` i.i.d. draws.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let dist = WeightedIndex::new(&self.probs).expect("validated probabilities");
        let ncols = self.support.ncols();
        let mut x = Vec::with_capacity(n * ncols);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let i = dist.sample(rng);
            x.extend_from_slice(self.support.row(i));
            let e: f64 = StandardNormal.sample(rng);
            y.push(self.gamma0[i] + self.noise * e);
        }
        Dataset::new(y, FeatureTable::new(x, ncols).expect("rectangular")).expect("matching lengths")
    }

    /// `m(row, g)` for `g` given by its support table; errors when `m`
    /// reaches outside the support with nonzero weight.
    pub fn m_table(&self, f: &FunctionalSpec, row: &[f64], values: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (q, c) in f.query_points(row) {
            if c == 0.0 {
                continue;
            }
            let i = self.index_of(&q).ok_or_else(|| {
                Error::degenerate(format!("functional queries {q:?}, which has zero probability"))
            })?;
            acc += c * values[i];
        }
        Ok(acc)
    }

    /// Rows and weights of the distribution the functional averages over.
    fn moment_measure<'a>(&'a self, f: &'a FunctionalSpec) -> (Vec<&'a [f64]>, Vec<f64>) {
        match f.population() {
            Some(pop) => {
                let w = 1.0 / pop.nrows() as f64;
                (pop.rows().collect(), vec![w; pop.nrows()])
            }
            None => (self.support.rows().collect(), self.probs.clone()),
        }
    }

    /// Matrix `A` with `m(row_a, g) = (A g)_a` over the moment rows.
    fn m_matrix(&self, f: &FunctionalSpec) -> Result<(Mat<f64>, Vec<f64>)> {
        let (rows, weights) = self.moment_measure(f);
        let mut a = Mat::<f64>::zeros(rows.len(), self.len());
        for (r, row) in rows.iter().enumerate() {
            for (q, c) in f.query_points(row) {
                if c == 0.0 {
                    continue;
                }
                let i = self.index_of(&q).ok_or_else(|| {
                    Error::degenerate(format!("functional queries {q:?}, which has zero probability"))
                })?;
                a[(r, i)] += c;
            }
        }
        Ok((a, weights))
    }
}

/// The minimal Riesz representer over the support.
///
/// Solves `sum_w P(w) alpha(w) delta_s(w) = sum_w P(w) m(w, delta_s)` for
/// every point mass `delta_s`, i.e. `diag(P) alpha = b`. With strictly
/// positive probabilities the system is nonsingular and its solution is the
/// minimal-norm one.
pub fn brute_force_riesz(dgp: &DiscreteDgp, f: &FunctionalSpec) -> Result<Vec<f64>> {
    let (a, weights) = dgp.m_matrix(f)?;
    let mut b = vec![0.0; dgp.len()];
    for (r, w) in weights.iter().enumerate() {
        for (s, bs) in b.iter_mut().enumerate() {
            *bs += w * a[(r, s)];
        }
    }
    Ok(b.iter().zip(dgp.probs()).map(|(b, p)| b / p).collect())
}

/// Exact population quantities of a functional under a finite-support DGP.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueQuantities {
    pub theta0: f64,
    /// Variance of the doubly robust score at the true nuisances.
    pub sigma2: f64,
    /// Mean-square continuity constant from the closed-form bounds.
    pub l_bar_m: f64,
    /// Smallest valid continuity constant, by generalized eigenvalues.
    pub l_m_exact: f64,
    /// `max |alpha0|`.
    pub alpha_bar: f64,
    pub alpha0: Vec<f64>,
    pub e_gamma0_sq: f64,
    pub noise: f64,
}

impl TrueQuantities {
    /// Right-hand side of `sigma^2 <= 3 (L E[gamma0^2] + alpha_bar^2 noise^2 + theta0^2)`.
    pub fn variance_bound(&self) -> f64 {
        3.0 * (self.l_bar_m * self.e_gamma0_sq + self.alpha_bar.powi(2) * self.noise.powi(2) + self.theta0.powi(2))
    }
}

pub fn true_quantities(dgp: &DiscreteDgp, f: &FunctionalSpec) -> Result<TrueQuantities> {
    let alpha0 = brute_force_riesz(dgp, f)?;
    let (a, weights) = dgp.m_matrix(f)?;
    let m_gamma = linalg::matvec(&a, dgp.gamma0());
    let theta0: f64 = weights.iter().zip(&m_gamma).map(|(w, m)| w * m).sum();
    let noise2 = dgp.noise().powi(2);
    let correction: f64 = dgp.probs().iter().zip(&alpha0).map(|(p, a)| p * a * a * noise2).sum();
    let sigma2 = if f.population().is_some() {
        // The m-term is a fixed average over the alternative population.
        correction
    } else {
        weights.iter().zip(&m_gamma).map(|(w, m)| w * (m - theta0).powi(2)).sum::<f64>() + correction
    };
    let l_m_exact = exact_continuity(dgp, &a, &weights)?;
    let l_bar_m = closed_form_continuity(dgp, f)?.unwrap_or(l_m_exact);
    Ok(TrueQuantities {
        theta0,
        sigma2,
        l_bar_m,
        l_m_exact,
        alpha_bar: alpha0.iter().fold(0.0, |m, a| m.max(a.abs())),
        alpha0,
        e_gamma0_sq: dgp.second_moment(),
        noise: dgp.noise(),
    })
}

/// `max_g E[m(W, g)^2] / E[g(W)^2]`.
fn exact_continuity(dgp: &DiscreteDgp, a: &Mat<f64>, weights: &[f64]) -> Result<f64> {
    let m = dgp.len();
    let inv_sqrt: Vec<f64> = dgp.probs().iter().map(|p| 1.0 / p.sqrt()).collect();
    let mut q = Mat::<f64>::zeros(m, m);
    for (r, w) in weights.iter().enumerate() {
        for i in 0..m {
            let ai = a[(r, i)];
            if ai == 0.0 {
                continue;
            }
            for j in 0..m {
                q[(i, j)] += w * ai * a[(r, j)] * inv_sqrt[i] * inv_sqrt[j];
            }
        }
    }
    linalg::symmetrize(&mut q);
    Ok(Spectral::new(&q)?.max_value().max(0.0))
}

/// Probability mass grouped by the row with `drop` columns removed.
fn marginal(dgp: &DiscreteDgp, drop: &[usize]) -> HashMap<Vec<u64>, f64> {
    let mut out = HashMap::new();
    for (row, p) in dgp.support().rows().zip(dgp.probs()) {
        *out.entry(free_key(row, drop)).or_insert(0.0) += p;
    }
    out
}

fn free_key(row: &[f64], drop: &[usize]) -> Vec<u64> {
    row.iter()
        .enumerate()
        .filter(|(c, _)| !drop.contains(c))
        .map(|(_, v)| (v + 0.0).to_bits())
        .collect()
}

/// Mass of each free-column key at which the fixed columns take `values`.
fn joint_at(dgp: &DiscreteDgp, cols: &[usize], values: &[f64]) -> HashMap<Vec<u64>, f64> {
    let mut out = HashMap::new();
    for (row, p) in dgp.support().rows().zip(dgp.probs()) {
        if cols.iter().zip(values).all(|(&c, &v)| row[c] == v) {
            *out.entry(free_key(row, cols)).or_insert(0.0) += p;
        }
    }
    out
}

/// `1 / min_x P(fixed = values | x, given)`, over `x` with positive mass.
fn inverse_min_conditional(dgp: &DiscreteDgp, fixed: &[usize], values: &[f64], given: Option<(usize, f64)>) -> Result<f64> {
    let mut cols = fixed.to_vec();
    let mut vals = values.to_vec();
    if let Some((c, v)) = given {
        cols.push(c);
        vals.push(v);
    }
    // Keys drop every fixed column (and the conditioning one).
    let denom_cols: Vec<usize> = given.map(|(c, _)| vec![c]).unwrap_or_default();
    let denom_vals: Vec<f64> = given.map(|(_, v)| vec![v]).unwrap_or_default();
    let denom = if given.is_some() {
        let mut all = HashMap::new();
        for (row, p) in dgp.support().rows().zip(dgp.probs()) {
            if denom_cols.iter().zip(&denom_vals).all(|(&c, &v)| row[c] == v) {
                *all.entry(free_key(row, &cols)).or_insert(0.0) += p;
            }
        }
        all
    } else {
        marginal(dgp, &cols)
    };
    let num = joint_at(dgp, &cols, &vals);
    let mut worst = f64::INFINITY;
    for (key, px) in &denom {
        let p = num.get(key).copied().unwrap_or(0.0) / px;
        worst = worst.min(p);
    }
    if !(worst > 0.0) {
        return Err(Error::degenerate("overlap fails: a conditional probability is zero"));
    }
    Ok(1.0 / worst)
}

fn closed_form_continuity(dgp: &DiscreteDgp, f: &FunctionalSpec) -> Result<Option<f64>> {
    Ok(match f.kind() {
        FunctionalKind::Evaluation { point } => {
            let i = dgp
                .index_of(point)
                .ok_or_else(|| Error::degenerate("evaluation point has zero probability"))?;
            Some(dgp.probs()[i].powi(-2))
        }
        FunctionalKind::Ate { treatment, level } => Some(inverse_min_conditional(dgp, &[*treatment], &[*level], None)?),
        FunctionalKind::Att {
            treatment,
            counterfactual,
            ..
        } => Some(inverse_min_conditional(dgp, &[*treatment], &[*counterfactual], None)?),
        FunctionalKind::Cate {
            treatment,
            level,
            subgroup,
            subgroup_level,
        } => Some(inverse_min_conditional(
            dgp,
            &[*treatment],
            &[*level],
            Some((*subgroup, *subgroup_level)),
        )?),
        FunctionalKind::AteDs {
            treatment,
            level,
            population,
        } => {
            // sup_x p~(x) / (p(x) P(d | x)) = sup_x p~(x) / P(d, x).
            let joint = joint_at(dgp, &[*treatment], &[*level]);
            let mut alt: HashMap<Vec<u64>, f64> = HashMap::new();
            let w = 1.0 / population.nrows() as f64;
            for row in population.rows() {
                *alt.entry(free_key(row, &[*treatment])).or_insert(0.0) += w;
            }
            let mut worst = 0.0f64;
            for (key, pt) in alt {
                let pd = joint.get(&key).copied().unwrap_or(0.0);
                if pd <= 0.0 {
                    return Err(Error::degenerate("alternative population leaves the treated support"));
                }
                worst = worst.max(pt / pd);
            }
            Some(worst)
        }
        FunctionalKind::Incremental { .. } => None,
    })
}

/// Population moment `E[m(W, g) + a(W)(gamma0(W) - g(W))] - theta` by
/// enumeration, with `g` and `a` given by support tables.
pub fn population_moment(dgp: &DiscreteDgp, f: &FunctionalSpec, gamma: &[f64], alpha: &[f64], theta: f64) -> Result<f64> {
    let (a, weights) = dgp.m_matrix(f)?;
    let m = linalg::matvec(&a, gamma);
    let m_term: f64 = weights.iter().zip(&m).map(|(w, m)| w * m).sum();
    let corr: f64 = dgp
        .probs()
        .iter()
        .zip(alpha)
        .zip(gamma.iter().zip(dgp.gamma0()))
        .map(|((p, a), (g, g0))| p * a * (g0 - g))
        .sum();
    Ok(m_term + corr - theta)
}

/// Minimizes the quadratic `x' H x / 2 - g' x` by conjugate gradients, from
/// zero, until `|H x - g| <= tol |g|`.
pub fn conjugate_gradient(h: &Mat<f64>, g: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let dim = g.len();
    let gnorm = linalg::norm(g);
    let mut x = vec![0.0; dim];
    if gnorm == 0.0 {
        return Ok(x);
    }
    let target = tol * gnorm;
    let mut iter = 0;
    // Restarts recompute the residual exactly, which keeps the recursion
    // honest on ill-conditioned problems.
    while iter < max_iter {
        let hx = linalg::matvec(h, &x);
        let mut r: Vec<f64> = g.iter().zip(&hx).map(|(g, h)| g - h).collect();
        let mut rr = linalg::dot(&r, &r);
        if rr.sqrt() <= target {
            return Ok(x);
        }
        let mut p = r.clone();
        for _ in 0..dim.max(1) {
            iter += 1;
            let hp = linalg::matvec(h, &p);
            let php = linalg::dot(&p, &hp);
            if !(php > 0.0) {
                break;
            }
            let step = rr / php;
            for i in 0..dim {
                x[i] += step * p[i];
                r[i] -= step * hp[i];
            }
            let rr_new = linalg::dot(&r, &r);
            if rr_new.sqrt() <= target {
                break;
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..dim {
                p[i] = r[i] + beta * p[i];
            }
        }
    }
    let hx = linalg::matvec(h, &x);
    let res = g.iter().zip(&hx).map(|(g, h)| (g - h).powi(2)).sum::<f64>().sqrt();
    if res <= target {
        Ok(x)
    } else {
        Err(Error::Oracle(format!(
            "conjugate gradients stalled at relative gradient {:.3e} after {iter} iterations",
            res / gnorm
        )))
    }
}

/// Relative eigenvalue cutoff when orthonormalizing representer features.
const GRAM_CUTOFF: f64 = 1e-13;

/// Minimizes `-2 l' rho + (1/n) |E rho|^2 + lambda rho' G rho`, where `G` is
/// the Gram matrix of some features and `E` their values at the `n`
/// training rows.
///
/// Gradient descent directly in `rho` is hopeless when `G` is nearly
/// singular, so the search runs over coordinates `z` of an orthonormal basis
/// of the features' span (`rho = U diag(s^{-1/2}) z`), where the Hessian is
/// `2 ((1/n) (EV)'(EV) + lambda I)`. Directions with relative Gram
/// eigenvalue below `GRAM_CUTOFF` carry no function and are dropped. The
/// stopping rule is on the gradient in these coordinates, which is the
/// gradient of the loss as a function on the RKHS.
fn minimize_representer_loss(g: &Mat<f64>, e: &Mat<f64>, l: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = e.nrows() as f64;
    let spectral = Spectral::new(g)?;
    let top = spectral.max_value();
    let keep: Vec<usize> = (0..spectral.dim())
        .filter(|&k| spectral.values[k] > GRAM_CUTOFF * top)
        .collect();
    let dim = g.nrows();
    let v = Mat::from_fn(dim, keep.len(), |i, k| {
        spectral.vectors[(i, keep[k])] / spectral.values[keep[k]].sqrt()
    });
    let ev = e * &v;
    let r = keep.len();
    let evt = ev.transpose() * &ev;
    let h = Mat::from_fn(r, r, |a, b| 2.0 * (evt[(a, b)] / n + if a == b { lambda } else { 0.0 }));
    let lin: Vec<f64> = (0..r).map(|k| 2.0 * (0..dim).map(|i| v[(i, k)] * l[i]).sum::<f64>()).collect();
    let z = conjugate_gradient(&h, &lin, DIRECT_TOL, 200 * r.max(1))?;
    Ok(linalg::matvec(&v, &z))
}

/// Kernel ridge regression by minimizing
/// `(1/n) |Y - K beta|^2 + lambda beta' K beta` directly.
pub fn direct_krr(features: &FeatureTable, outcomes: &[f64], spec: &KernelSpec, lambda: f64) -> Result<Vec<f64>> {
    let n = features.nrows();
    if n == 0 || n > DIRECT_MAX_ROWS {
        return Err(Error::Oracle(format!("direct minimizer takes 1..={DIRECT_MAX_ROWS} rows, got {n}")));
    }
    let k = Mat::from_fn(n, n, |i, j| spec.eval_unchecked(features.row(i), features.row(j)));
    let l: Vec<f64> = (0..n)
        .map(|b| (0..n).map(|i| k[(i, b)] * outcomes[i]).sum::<f64>() / n as f64)
        .collect();
    minimize_representer_loss(&k, &k, &l, lambda)
}

/// Representer features of the Riesz problem: `phi(W_i)` then `M* phi(r_j)`.
/// Every inner product is formed from kernel evaluations and `m_value`.
struct BlackBoxFeatures<'a> {
    f: &'a FunctionalSpec,
    spec: &'a KernelSpec,
    train: &'a FeatureTable,
    moments: &'a FeatureTable,
}

impl BlackBoxFeatures<'_> {
    fn n(&self) -> usize {
        self.train.nrows()
    }

    fn dim(&self) -> usize {
        self.train.nrows() + self.moments.nrows()
    }

    /// Value of feature `b` at `w`.
    fn eval(&self, b: usize, w: &[f64]) -> f64 {
        if b < self.n() {
            self.spec.eval_unchecked(self.train.row(b), w)
        } else {
            let r = self.moments.row(b - self.n());
            self.f.m_value(r, &|z: &[f64]| self.spec.eval_unchecked(z, w))
        }
    }

    /// `m(r_j, feature b)`.
    fn m_of(&self, j: usize, b: usize) -> f64 {
        self.f.m_value(self.moments.row(j), &|z: &[f64]| self.eval(b, z))
    }

    fn gram(&self) -> Mat<f64> {
        let (n, dim) = (self.n(), self.dim());
        let mut g = Mat::<f64>::zeros(dim, dim);
        for a in 0..dim {
            for b in 0..=a {
                let v = if a < n {
                    self.eval(b, self.train.row(a))
                } else {
                    self.m_of(a - n, b)
                };
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        g
    }
}

/// Minimizes the empirical Riesz loss over `rho` directly; returns `rho`
/// over `[phi(W_1..W_n), M* phi(r_1..r_n~)]`.
pub fn direct_loss_minimizer(data: &FeatureTable, f: &FunctionalSpec, spec: &KernelSpec, lambda: f64) -> Result<Vec<f64>> {
    let n = data.nrows();
    if n == 0 || n > DIRECT_MAX_ROWS {
        return Err(Error::Oracle(format!("direct minimizer takes 1..={DIRECT_MAX_ROWS} rows, got {n}")));
    }
    let feats = BlackBoxFeatures {
        f,
        spec,
        train: data,
        moments: f.moment_rows(data),
    };
    let dim = feats.dim();
    let n_moments = feats.moments.nrows();
    let g = feats.gram();
    // L(rho) = -(2/n~) 1' G_M rho + (1/n) |G_W rho|^2 + lambda rho' G rho.
    let e = Mat::from_fn(n, dim, |i, b| g[(i, b)]);
    let l: Vec<f64> = (0..dim)
        .map(|b| (0..n_moments).map(|j| g[(n + j, b)]).sum::<f64>() / n_moments as f64)
        .collect();
    minimize_representer_loss(&g, &e, &l, lambda)
}

/// `alpha(w) = sum_b rho_b feature_b(w)` through the black-box features.
pub fn direct_alpha(data: &FeatureTable, f: &FunctionalSpec, spec: &KernelSpec, rho: &[f64], w: &[f64]) -> f64 {
    let feats = BlackBoxFeatures {
        f,
        spec,
        train: data,
        moments: f.moment_rows(data),
    };
    rho.iter().enumerate().map(|(b, r)| r * feats.eval(b, w)).sum()
}

/// Functional families exercised by the randomized checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceKind {
    Evaluation,
    Ate,
    AteDs,
    Att,
    Cate,
    Incremental,
}

impl InstanceKind {
    pub const ALL: [InstanceKind; 6] = [
        InstanceKind::Evaluation,
        InstanceKind::Ate,
        InstanceKind::AteDs,
        InstanceKind::Att,
        InstanceKind::Cate,
        InstanceKind::Incremental,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstanceKind::Evaluation => "evaluation",
            InstanceKind::Ate => "ate",
            InstanceKind::AteDs => "ate_ds",
            InstanceKind::Att => "att",
            InstanceKind::Cate => "cate",
            InstanceKind::Incremental => "incremental",
        }
    }
}

/// A small random estimation problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub data: Dataset,
    pub f: FunctionalSpec,
    pub spec: KernelSpec,
    pub lambda: f64,
    /// Points at which to compare fitted functions.
    pub probes: Vec<Vec<f64>>,
}

fn binary(col: usize) -> KernelComponent {
    KernelComponent::discrete(col, vec![0.0, 1.0]).expect("valid levels")
}

fn bern<R: Rng + ?Sized>(rng: &mut R, p: f64) -> f64 {
    f64::from(rng.random::<f64>() < p)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws a random instance of the given kind with `n` in `[min_n, max_n]`.
pub fn random_instance<R: Rng + ?Sized>(kind: InstanceKind, min_n: usize, max_n: usize, rng: &mut R) -> Result<Instance> {
    let n = rng.random_range(min_n..=max_n);
    let lambda = 10f64.powf(rng.random_range(-2.0..0.0));
    let h = rng.random_range(0.5..2.0);
    let mut rows = Vec::with_capacity(n);
    let (spec, f) = match kind {
        InstanceKind::Evaluation => {
            let levels = vec![0.0, 1.0, 2.0];
            let spec = KernelSpec::new(vec![binary(0), KernelComponent::discrete(1, levels)?])?;
            for _ in 0..n {
                rows.push(vec![bern(rng, 0.5), rng.random_range(0..3) as f64]);
            }
            let point = vec![bern(rng, 0.5), rng.random_range(0..3) as f64];
            (spec, FunctionalSpec::evaluation(point)?)
        }
        InstanceKind::Ate | InstanceKind::Att | InstanceKind::AteDs => {
            let spec = KernelSpec::new(vec![binary(0), KernelComponent::gaussian(vec![1], h)?])?;
            for _ in 0..n {
                let x = normal(rng);
                rows.push(vec![bern(rng, 1.0 / (1.0 + (-x).exp())), x]);
            }
            let d = bern(rng, 0.5);
            let f = match kind {
                InstanceKind::Ate => FunctionalSpec::ate(0, d),
                InstanceKind::Att => FunctionalSpec::att(0, d, 1.0 - d),
                _ => {
                    let m = rng.random_range(3..=n.max(3));
                    let pop: Vec<Vec<f64>> = (0..m).map(|_| vec![0.0, 0.5 + normal(rng)]).collect();
                    FunctionalSpec::ate_ds(0, d, FeatureTable::from_rows(&pop)?)?
                }
            };
            (spec, f)
        }
        InstanceKind::Cate => {
            let spec = KernelSpec::new(vec![binary(0), binary(1), KernelComponent::gaussian(vec![2], h)?])?;
            for _ in 0..n {
                let x = normal(rng);
                rows.push(vec![bern(rng, 0.5), bern(rng, 0.5), x]);
            }
            (spec, FunctionalSpec::cate(0, bern(rng, 0.5), 1, bern(rng, 0.5))?)
        }
        InstanceKind::Incremental => {
            let spec = KernelSpec::new(vec![
                KernelComponent::gaussian(vec![0], h)?,
                KernelComponent::gaussian(vec![1], rng.random_range(0.5..2.0))?,
            ])?;
            for _ in 0..n {
                let x = normal(rng);
                rows.push(vec![0.5 * x + normal(rng), x]);
            }
            let density = WeightDensity::Gaussian {
                mean: rng.random_range(-0.5..0.5),
                sd: rng.random_range(0.7..1.5),
            };
            (spec, FunctionalSpec::incremental(0, density, 20, rng.random())?)
        }
    };
    let x = FeatureTable::from_rows(&rows)?;
    let y = rows.iter().map(|r| r.iter().sum::<f64>() + normal(rng)).collect();
    let mut probes: Vec<Vec<f64>> = rows.iter().take(3).cloned().collect();
    for _ in 0..3 {
        let mut p = rows[rng.random_range(0..n)].clone();
        if matches!(kind, InstanceKind::Incremental) {
            p[0] += normal(rng);
        }
        if let Some(last) = p.last_mut() {
            if !matches!(kind, InstanceKind::Evaluation) {
                *last += 0.3 * normal(rng);
            }
        }
        probes.push(p);
    }
    Ok(Instance {
        data: Dataset::new(y, x)?,
        f,
        spec,
        lambda,
        probes,
    })
}

/// A random finite-support DGP paired with a functional of the given kind.
pub fn random_discrete_dgp<R: Rng + ?Sized>(kind: InstanceKind, rng: &mut R) -> Result<(DiscreteDgp, FunctionalSpec)> {
    let x_levels = rng.random_range(2..=4usize);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let f = match kind {
        InstanceKind::Evaluation | InstanceKind::Ate | InstanceKind::Att | InstanceKind::AteDs => {
            for d in 0..2 {
                for x in 0..x_levels {
                    rows.push(vec![d as f64, x as f64]);
                }
            }
            let d = bern(rng, 0.5);
            match kind {
                InstanceKind::Evaluation => {
                    let pick = rows[rng.random_range(0..rows.len())].clone();
                    FunctionalSpec::evaluation(pick)?
                }
                InstanceKind::Ate => FunctionalSpec::ate(0, d),
                InstanceKind::Att => FunctionalSpec::att(0, d, 1.0 - d),
                _ => {
                    let pop: Vec<Vec<f64>> = (0..2 * x_levels)
                        .map(|_| vec![0.0, rng.random_range(0..x_levels) as f64])
                        .collect();
                    FunctionalSpec::ate_ds(0, d, FeatureTable::from_rows(&pop)?)?
                }
            }
        }
        InstanceKind::Cate => {
            for d in 0..2 {
                for v in 0..2 {
                    for x in 0..x_levels {
                        rows.push(vec![d as f64, v as f64, x as f64]);
                    }
                }
            }
            FunctionalSpec::cate(0, bern(rng, 0.5), 1, bern(rng, 0.5))?
        }
        InstanceKind::Incremental => {
            let density = WeightDensity::Gaussian {
                mean: rng.random_range(-0.5..0.5),
                sd: rng.random_range(0.7..1.5),
            };
            let f = FunctionalSpec::incremental(0, density, 6, rng.random())?;
            // The support is built on the draws so that every query lands on it.
            for (u, _) in f.draws().expect("incremental") {
                for x in 0..x_levels {
                    rows.push(vec![u, x as f64]);
                }
            }
            f
        }
    };
    let raw: Vec<f64> = rows.iter().map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
    // Put the rounding remainder on the largest entry so the sum is exact.
    let drift = 1.0 - probs.iter().sum::<f64>();
    let big = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap_or(0);
    probs[big] += drift;
    let gamma0 = rows.iter().map(|_| 2.0 * normal(rng)).collect();
    let noise = rng.random_range(0.5..2.0);
    Ok((DiscreteDgp::new(FeatureTable::from_rows(&rows)?, probs, gamma0, noise)?, f))
}

/// Largest relative disagreement `|a - b| / max(1, |b|)`.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Closed-form versus direct minimization for one Riesz instance; returns
/// the largest relative difference in `alpha` over training rows and probes.
/// `perturb` is added to every closed-form coefficient first.
pub fn riesz_discrepancy(inst: &Instance, solver: RieszSolver, perturb: f64) -> Result<f64> {
    let bound = inst.f.bind(&inst.spec)?;
    let mut est = fit_riesz_with(&inst.data.x, &bound, inst.lambda, solver)?;
    if perturb != 0.0 {
        est = est.perturbed(&inst.data.x, perturb);
    }
    let rho = direct_loss_minimizer(&inst.data.x, &inst.f, &inst.spec, inst.lambda)?;
    let points: Vec<&[f64]> = inst.data.x.rows().chain(inst.probes.iter().map(Vec::as_slice)).collect();
    let closed: Vec<f64> = points.iter().map(|w| est.raw_alpha(w)).collect();
    let direct: Vec<f64> = points
        .iter()
        .map(|w| direct_alpha(&inst.data.x, &inst.f, &inst.spec, &rho, w))
        .collect();
    Ok(max_rel_diff(&closed, &direct))
}

/// Closed-form versus direct minimization for kernel ridge regression.
pub fn krr_discrepancy(inst: &Instance) -> Result<f64> {
    let est = fit_krr(&inst.data.x, &inst.data.y, &inst.spec, inst.lambda)?;
    let beta = direct_krr(&inst.data.x, &inst.data.y, &inst.spec, inst.lambda)?;
    let points: Vec<&[f64]> = inst.data.x.rows().chain(inst.probes.iter().map(Vec::as_slice)).collect();
    let closed: Vec<f64> = points.iter().map(|w| est.predict_unchecked(w)).collect();
    let direct: Vec<f64> = points
        .iter()
        .map(|w| {
            inst.data
                .x
                .rows()
                .zip(&beta)
                .map(|(r, b)| b * inst.spec.eval_unchecked(r, w))
                .sum()
        })
        .collect();
    Ok(max_rel_diff(&closed, &direct))
}

/// Largest violation of the Riesz identity over `draws` random functions.
pub fn riesz_identity_violation<R: Rng + ?Sized>(dgp: &DiscreteDgp, f: &FunctionalSpec, draws: usize, rng: &mut R) -> Result<f64> {
    let alpha0 = brute_force_riesz(dgp, f)?;
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let g: Vec<f64> = (0..dgp.len()).map(|_| normal(rng)).collect();
        let zero = vec![0.0; dgp.len()];
        // E[m(W, g)] from the moment with a zero representer and zero target.
        let lhs = population_moment(dgp, f, &g, &zero, 0.0)?;
        let rhs: f64 = dgp.probs().iter().zip(&alpha0).zip(&g).map(|((p, a), g)| p * a * g).sum();
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// One line of the verification table.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

const VERIFY_TOL: f64 = 1e-6;

/// The fast self-check suite: `c_max` table, closed forms against direct
/// minimizers, and the Riesz identity by enumeration. `perturb` shifts the
/// closed-form Riesz coefficients, which the suite must detect.
pub fn verify_suite(perturb: f64, seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name: String, res: Result<(bool, String)>| {
        let (passed, detail) = res.unwrap_or_else(|e| (false, e.to_string()));
        out.push(Check { name, passed, detail });
    };

    push("c_max table".into(), (|| {
        let mut worst = 0.0f64;
        for m in 1..=10 {
            let levels: Vec<f64> = (0..m).map(|i| i as f64).collect();
            worst = worst.max((c_max_of(&levels)? - 1.0 / (m as f64).sqrt()).abs());
        }
        Ok((worst <= 1e-12, format!("max error {worst:.2e}")))
    })());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    push("krr closed form vs direct".into(), (|| {
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let inst = random_instance(InstanceKind::Ate, 8, 20, &mut rng)?;
            worst = worst.max(krr_discrepancy(&inst)?);
        }
        Ok((worst <= VERIFY_TOL, format!("max rel diff {worst:.2e}")))
    })());

    for kind in InstanceKind::ALL {
        push(format!("riesz closed form vs direct ({})", kind.name()), (|| {
            let mut worst = 0.0f64;
            for _ in 0..3 {
                let inst = random_instance(kind, 8, 20, &mut rng)?;
                worst = worst.max(riesz_discrepancy(&inst, RieszSolver::Reduced, perturb)?);
            }
            Ok((worst <= VERIFY_TOL, format!("max rel diff {worst:.2e}")))
        })());
    }

    for kind in InstanceKind::ALL {
        push(format!("riesz identity ({})", kind.name()), (|| {
            let (dgp, f) = random_discrete_dgp(kind, &mut rng)?;
            let worst = riesz_identity_violation(&dgp, &f, 20, &mut rng)?;
            Ok((worst <= 1e-10, format!("max violation {worst:.2e}")))
        })());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point(p: f64, g: [f64; 2]) -> DiscreteDgp {
        DiscreteDgp::new(FeatureTable::column(&[0.0, 1.0]), vec![1.0 - p, p], g.to_vec(), 1.0).unwrap()
    }

    #[test]
    fn evaluation_representer() {
        let dgp = two_point(0.25, [0.0, 3.0]);
        let f = FunctionalSpec::evaluation(vec![1.0]).unwrap();
        let a = brute_force_riesz(&dgp, &f).unwrap();
        assert_eq!(a, vec![0.0, 4.0]);
        let q = true_quantities(&dgp, &f).unwrap();
        assert_eq!(q.theta0, 3.0);
        assert_eq!(q.l_bar_m, 16.0);
        assert!(q.l_m_exact <= q.l_bar_m);
    }

    #[test]
    fn ate_representer_under_independence() {
        let mut rows = Vec::new();
        for d in 0..2 {
            for x in 0..3 {
                rows.push(vec![d as f64, x as f64]);
            }
        }
        let dgp = DiscreteDgp::new(FeatureTable::from_rows(&rows).unwrap(), vec![1.0 / 6.0; 6], vec![1.0; 6], 1.0);
        // 6 * (1/6) may not sum to one exactly; build probabilities that do.
        let dgp = dgp.unwrap_or_else(|_| {
            let probs = vec![0.125, 0.125, 0.25, 0.125, 0.125, 0.25];
            DiscreteDgp::new(FeatureTable::from_rows(&rows).unwrap(), probs, vec![1.0; 6], 1.0).unwrap()
        });
        let a = brute_force_riesz(&dgp, &FunctionalSpec::ate(0, 1.0)).unwrap();
        for (row, a) in dgp.support().rows().zip(&a) {
            let expect = if row[0] == 1.0 { 2.0 } else { 0.0 };
            assert!((a - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_outcome_zero_target() {
        let dgp = two_point(0.4, [0.0, 0.0]);
        let q = true_quantities(&dgp, &FunctionalSpec::ate(0, 1.0)).unwrap();
        assert_eq!(q.theta0, 0.0);
    }

    #[test]
    fn off_support_query_is_degenerate() {
        let dgp = two_point(0.4, [0.0, 1.0]);
        let f = FunctionalSpec::evaluation(vec![2.0]).unwrap();
        assert!(matches!(brute_force_riesz(&dgp, &f), Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_moment_direct_minimizer() {
        let data = FeatureTable::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.5]]).unwrap();
        let spec = KernelSpec::new(vec![binary(0), KernelComponent::gaussian(vec![1], 1.0).unwrap()]).unwrap();
        let rho = direct_loss_minimizer(&data, &FunctionalSpec::att(0, 1.0, 0.0), &spec, 0.1).unwrap();
        assert!(rho.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn huge_lambda_shrinks_rho() {
        let data = FeatureTable::column(&[0.0, 1.0, 1.0]);
        let spec = KernelSpec::new(vec![binary(0)]).unwrap();
        let f = FunctionalSpec::evaluation(vec![1.0]).unwrap();
        let rho = direct_loss_minimizer(&data, &f, &spec, 1e6).unwrap();
        let alpha = direct_alpha(&data, &f, &spec, &rho, &[1.0]);
        assert!(alpha.abs() < 1e-5);
    }

    #[test]
    fn verify_suite_passes_and_detects_perturbation() {
        let clean = verify_suite(0.0, 7);
        assert!(clean.iter().all(|c| c.passed), "{clean:?}");
        let dirty = verify_suite(1e-3, 7);
        assert!(dirty.iter().any(|c| !c.passed));
    }
}
