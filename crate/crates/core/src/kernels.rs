//! Product kernels over column groups.
//!
//! A [`KernelSpec`] is an ordered list of components, each owning a disjoint
//! group of feature columns. The overall kernel is the product of the
//! component kernels:
//!
//! * Gaussian: `k(a, b) = exp(-|a - b|^2 / (2 h^2))` on one or more columns.
//! * Discrete identity: `k(a, b) = 1{a = b}` on a single labelled column.
//!
//! Both kinds are bounded by one, so `k(w, w) = 1` everywhere.

use faer::{Mat, Side};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::table::FeatureTable;

/// Row cap for the median heuristic; larger inputs are subsampled.
pub const MEDIAN_MAX_ROWS: usize = 2000;
const MEDIAN_SUBSAMPLE_SEED: u64 = 0x6d65_6469_616e;

#[derive(Debug, Clone, PartialEq)]
pub enum ComponentKind {
    Gaussian { bandwidth: f64 },
    Discrete { levels: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelComponent {
    columns: Vec<usize>,
    kind: ComponentKind,
}

impl KernelComponent {
    pub fn gaussian(columns: Vec<usize>, bandwidth: f64) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::config("gaussian component needs at least one column"));
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::config(format!(
                "gaussian bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Self {
            columns,
            kind: ComponentKind::Gaussian { bandwidth },
        })
    }

    pub fn discrete(column: usize, levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::config("discrete component needs a non-empty level set"));
        }
        for (i, a) in levels.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::config(format!("discrete level {a} is not finite")));
            }
            if levels[..i].contains(a) {
                return Err(Error::config(format!("duplicate discrete level {a}")));
            }
        }
        Ok(Self {
            columns: vec![column],
            kind: ComponentKind::Discrete { levels },
        })
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn kind(&self) -> &ComponentKind {
        &self.kind
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.kind, ComponentKind::Discrete { .. })
    }

    pub fn levels(&self) -> Option<&[f64]> {
        match &self.kind {
            ComponentKind::Discrete { levels } => Some(levels),
            ComponentKind::Gaussian { .. } => None,
        }
    }

    /// Upper bound on `k(a, a)`.
    pub fn bound(&self) -> f64 {
        1.0
    }

    /// Largest `c` with `K_full - c^2 J` positive semidefinite; only defined
    /// for discrete components.
    pub fn c_max(&self) -> Option<f64> {
        self.levels().map(|l| c_max_of(l).expect("levels validated non-empty"))
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        for &c in &self.columns {
            if c >= row.len() {
                return Err(Error::input(format!(
                    "row has {} columns but the kernel references column {c}",
                    row.len()
                )));
            }
        }
        if let ComponentKind::Discrete { levels } = &self.kind {
            let v = row[self.columns[0]];
            if !levels.contains(&v) {
                return Err(Error::input(format!(
                    "label {v} in column {} is not one of the levels {levels:?}",
                    self.columns[0]
                )));
            }
        }
        Ok(())
    }

    #[inline]
    fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match &self.kind {
            ComponentKind::Gaussian { bandwidth } => {
                let d2: f64 = self
                    .columns
                    .iter()
                    .map(|&c| {
                        let d = a[c] - b[c];
                        d * d
                    })
                    .sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
            ComponentKind::Discrete { .. } => {
                let c = self.columns[0];
                if a[c] == b[c] {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Product kernel `k(w, w') = prod_j k_j(w_j, w'_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    components: Vec<KernelComponent>,
}

impl KernelSpec {
    pub fn new(components: Vec<KernelComponent>) -> Result<Self> {
        let mut seen: Vec<usize> = Vec::new();
        for comp in &components {
            for &c in comp.columns() {
                if seen.contains(&c) {
                    return Err(Error::config(format!(
                        "column {c} is claimed by more than one kernel component"
                    )));
                }
                seen.push(c);
            }
        }
        Ok(Self { components })
    }

    /// The kernel that is identically one (no components).
    pub fn constant() -> Self {
        Self {
            components: Vec::new(),
        }
    }

    pub fn components(&self) -> &[KernelComponent] {
        &self.components
    }

    /// All columns referenced by any component.
    pub fn columns(&self) -> Vec<usize> {
        let mut cols: Vec<usize> = self
            .components
            .iter()
            .flat_map(|c| c.columns().iter().copied())
            .collect();
        cols.sort_unstable();
        cols
    }

    /// The component owning `column`, if any.
    pub fn component_of(&self, column: usize) -> Option<&KernelComponent> {
        self.components.iter().find(|c| c.columns().contains(&column))
    }

    /// The product over a subset of components, selected by predicate.
    pub fn restrict(&self, keep: impl Fn(&KernelComponent) -> bool) -> Self {
        Self {
            components: self.components.iter().filter(|c| keep(c)).cloned().collect(),
        }
    }

    /// `kappa`: upper bound on `k(w, w)`.
    pub fn bound(&self) -> f64 {
        self.components.iter().map(KernelComponent::bound).product()
    }

    /// Product of per-component `c_max` over the discrete components.
    pub fn c_max(&self) -> f64 {
        self.components.iter().filter_map(KernelComponent::c_max).product()
    }

    /// RKHS norm of the constant function when every component is discrete.
    pub fn constant_norm(&self) -> Option<f64> {
        if self.components.iter().all(KernelComponent::is_discrete) {
            Some(1.0 / self.c_max())
        } else {
            None
        }
    }

    pub fn check_row(&self, row: &[f64]) -> Result<()> {
        self.components.iter().try_for_each(|c| c.check_row(row))
    }

    pub fn check_table(&self, table: &FeatureTable) -> Result<()> {
        table
            .rows()
            .enumerate()
            .try_for_each(|(i, r)| self.check_row(r).map_err(|e| Error::input(format!("row {i}: {e}"))))
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_row(a)?;
        self.check_row(b)?;
        Ok(self.eval_unchecked(a, b))
    }

    /// Kernel value without validating columns or labels.
    #[inline]
    pub fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut k = 1.0;
        for c in &self.components {
            k *= c.eval_unchecked(a, b);
            if k == 0.0 {
                break;
            }
        }
        k
    }

    /// Gram matrix between the rows of `a` and the rows of `b`.
    pub fn gram(&self, a: &FeatureTable, b: &FeatureTable) -> Result<Mat<f64>> {
        self.check_table(a)?;
        self.check_table(b)?;
        Ok(self.gram_unchecked(a, b))
    }

    pub fn gram_unchecked(&self, a: &FeatureTable, b: &FeatureTable) -> Mat<f64> {
        let (n, m) = (a.nrows(), b.nrows());
        let mut buf = vec![0.0; n * m];
        if m > 0 {
            buf.par_chunks_mut(m).enumerate().for_each(|(i, out)| {
                let ai = a.row(i);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = self.eval_unchecked(ai, b.row(j));
                }
            });
        }
        Mat::from_fn(n, m, |i, j| buf[i * m + j])
    }

    /// Symmetric Gram matrix of a table with itself; exactly symmetric.
    pub fn gram_sym_unchecked(&self, a: &FeatureTable) -> Mat<f64> {
        let n = a.nrows();
        let mut buf = vec![0.0; n * n];
        if n > 0 {
            buf.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
                let ai = a.row(i);
                for (j, o) in out.iter_mut().enumerate().take(i + 1) {
                    *o = self.eval_unchecked(ai, a.row(j));
                }
            });
        }
        Mat::from_fn(n, n, |i, j| if j <= i { buf[i * n + j] } else { buf[j * n + i] })
    }

    /// Kernel values `k(row_i, w)` for every row of `a`.
    pub fn column_against(&self, a: &FeatureTable, w: &[f64]) -> Vec<f64> {
        a.rows().map(|r| self.eval_unchecked(r, w)).collect()
    }
}

/// Largest `c` such that the identity kernel on `levels` minus `c^2 J`
/// stays positive semidefinite.
pub fn c_max_of(levels: &[f64]) -> Result<f64> {
    if levels.is_empty() {
        return Err(Error::input("c_max needs a non-empty level set"));
    }
    let comp = KernelComponent::discrete(0, levels.to_vec()).map_err(|e| Error::input(e.to_string()))?;
    let table = FeatureTable::column(levels);
    let full = KernelSpec::new(vec![comp])?.gram_sym_unchecked(&table);
    c_max_of_gram(&full)
}

/// `1 / sqrt(1' K^{-1} 1)` for a positive definite full-domain Gram matrix.
pub fn c_max_of_gram(full: &Mat<f64>) -> Result<f64> {
    linalg::ensure_sequential();
    let m = full.nrows();
    let llt = full
        .llt(Side::Lower)
        .map_err(|_| Error::numerical("full-domain Gram matrix is not positive definite"))?;
    let ones = Mat::from_fn(m, 1, |_, _| 1.0);
    let x = faer::linalg::solvers::Solve::solve(&llt, &ones);
    let q: f64 = (0..m).map(|i| x[(i, 0)]).sum();
    Ok(1.0 / q.sqrt())
}

/// Median of pairwise Euclidean distances over the given columns.
///
/// Tables with more than [`MEDIAN_MAX_ROWS`] rows are subsampled without
/// replacement under a fixed seed.
pub fn median_bandwidth(table: &FeatureTable, columns: &[usize]) -> Result<f64> {
    let n = table.nrows();
    if n < 2 {
        return Err(Error::degenerate("median heuristic needs at least two rows"));
    }
    if let Some(&c) = columns.iter().find(|&&c| c >= table.ncols()) {
        return Err(Error::input(format!("median heuristic: no column {c}")));
    }
    let rows: Vec<usize> = if n > MEDIAN_MAX_ROWS {
        let mut rng = ChaCha8Rng::seed_from_u64(MEDIAN_SUBSAMPLE_SEED);
        let mut idx = index::sample(&mut rng, n, MEDIAN_MAX_ROWS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (p, &i) in rows.iter().enumerate() {
        let a = table.row(i);
        for &j in &rows[p + 1..] {
            let b = table.row(j);
            let d2: f64 = columns.iter().map(|&c| (a[c] - b[c]).powi(2)).sum();
            dists.push(d2.sqrt());
        }
    }
    let median = median_in_place(&mut dists);
    if !(median > 0.0) {
        return Err(Error::degenerate(format!(
            "median pairwise distance over columns {columns:?} is zero"
        )));
    }
    Ok(median)
}

/// Median of a slice that is reordered in the process.
pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    let len = v.len();
    let mid = len / 2;
    let (left, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if len % 2 == 1 {
        upper
    } else {
        let lower = left.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Median of a slice without modifying it.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    median_in_place(&mut v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(h: f64) -> KernelSpec {
        KernelSpec::new(vec![KernelComponent::gaussian(vec![0], h).unwrap()]).unwrap()
    }

    fn ident(levels: &[f64]) -> KernelSpec {
        KernelSpec::new(vec![KernelComponent::discrete(0, levels.to_vec()).unwrap()]).unwrap()
    }

    #[test]
    fn gaussian_self_similarity_is_one() {
        let k = gauss(0.7);
        assert_eq!(k.eval(&[3.2], &[3.2]).unwrap(), 1.0);
    }

    #[test]
    fn gaussian_at_one_bandwidth() {
        let h = 1.3;
        let v = gauss(h).eval(&[0.0], &[h]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn discrete_mismatch_and_match() {
        let k = ident(&[0.0, 1.0]);
        assert_eq!(k.eval(&[0.0], &[1.0]).unwrap(), 0.0);
        let a = FeatureTable::column(&[1.0]);
        let b = FeatureTable::column(&[1.0]);
        let g = k.gram(&a, &b).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn unknown_label_and_missing_column() {
        let k = ident(&[0.0, 1.0]);
        assert!(matches!(k.eval(&[2.0], &[1.0]), Err(Error::Input(_))));
        let k2 = KernelSpec::new(vec![KernelComponent::gaussian(vec![3], 1.0).unwrap()]).unwrap();
        assert!(matches!(k2.eval(&[0.0], &[0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn three_point_gram() {
        let h = 0.9;
        let t = FeatureTable::column(&[0.0, h, 2.0 * h]);
        let g = gauss(h).gram(&t, &t).unwrap();
        let e = |x: f64| x.exp();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(g[(0, 1)], e(-0.5)));
        assert!(close(g[(0, 2)], e(-2.0)));
        assert!(close(g[(1, 2)], e(-0.5)));
        for i in 0..3 {
            assert_eq!(g[(i, i)], 1.0);
            for j in 0..3 {
                assert_eq!(g[(i, j)], g[(j, i)]);
            }
        }
    }

    #[test]
    fn invalid_components() {
        assert!(KernelComponent::gaussian(vec![0], 0.0).is_err());
        assert!(KernelComponent::gaussian(vec![0], -1.0).is_err());
        assert!(KernelComponent::discrete(0, vec![]).is_err());
        assert!(KernelComponent::discrete(0, vec![1.0, 1.0]).is_err());
        let a = KernelComponent::gaussian(vec![0, 1], 1.0).unwrap();
        let b = KernelComponent::discrete(1, vec![0.0]).unwrap();
        assert!(KernelSpec::new(vec![a, b]).is_err());
    }

    #[test]
    fn c_max_small_tables() {
        assert_eq!(c_max_of(&[5.0]).unwrap(), 1.0);
        assert!((c_max_of(&[0.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((c_max_of(&[0.0, 1.0, 2.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(c_max_of(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn product_kernel_constant_norm() {
        let spec = KernelSpec::new(vec![
            KernelComponent::discrete(0, vec![0.0, 1.0]).unwrap(),
            KernelComponent::discrete(1, vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
        ])
        .unwrap();
        // c_max = (1/sqrt 2)(1/2); the constant function has norm sqrt(8).
        assert!((spec.constant_norm().unwrap() - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn median_heuristic_examples() {
        let t = FeatureTable::column(&[0.0, 1.0]);
        assert_eq!(median_bandwidth(&t, &[0]).unwrap(), 1.0);
        let t = FeatureTable::column(&[0.0, 1.0, 2.0]);
        assert_eq!(median_bandwidth(&t, &[0]).unwrap(), 1.0);
        let t = FeatureTable::column(&[0.0, 0.0, 0.0]);
        assert!(matches!(median_bandwidth(&t, &[0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn median_even_count_averages() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[4.0, 1.0, 3.0]), 3.0);
    }

    #[test]
    fn median_multicolumn_uses_euclidean_distance() {
        let t = FeatureTable::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(median_bandwidth(&t, &[0, 1]).unwrap(), 5.0);
    }

    #[test]
    fn median_subsamples_large_tables_deterministically() {
        let vals: Vec<f64> = (0..2500).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = FeatureTable::column(&vals);
        let a = median_bandwidth(&t, &[0]).unwrap();
        let b = median_bandwidth(&t, &[0]).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }
}
