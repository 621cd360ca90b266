//! Row-major feature tables and datasets.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// A dense row-major table of real-valued features.
///
/// Discrete columns store their labels as reals; a kernel component decides
/// how a column is interpreted.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    data: Vec<f64>,
    ncols: usize,
}

impl FeatureTable {
    pub fn new(data: Vec<f64>, ncols: usize) -> Result<Self> {
        if ncols == 0 {
            if !data.is_empty() {
                return Err(Error::input("zero-column table with data"));
            }
        } else if data.len() % ncols != 0 {
            return Err(Error::input(format!(
                "table data length {} is not a multiple of {ncols} columns",
                data.len()
            )));
        }
        Ok(Self { data, ncols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != ncols {
                return Err(Error::input(format!(
                    "row {i} has {} columns, expected {ncols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { data, ncols })
    }

    /// A single-column table.
    pub fn column(values: &[f64]) -> Self {
        Self {
            data: values.to_vec(),
            ncols: 1,
        }
    }

    pub fn nrows(&self) -> usize {
        if self.ncols == 0 {
            0
        } else {
            self.data.len() / self.ncols
        }
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.nrows()).map(move |i| self.row(i))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.ncols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            ncols: self.ncols,
        }
    }

    pub fn column_values(&self, col: usize) -> Vec<f64> {
        self.rows().map(|r| r[col]).collect()
    }
}

/// Outcomes paired with features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub x: FeatureTable,
}

impl Dataset {
    pub fn new(y: Vec<f64>, x: FeatureTable) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(Error::input(format!(
                "{} outcomes for {} feature rows",
                y.len(),
                x.nrows()
            )));
        }
        Ok(Self { y, x })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            x: self.x.select_rows(idx),
        }
    }
}

/// Distinct rows of a table with multiplicities, in order of first
/// appearance.
///
/// Kernel estimators only see the data through kernel evaluations, so
/// identical rows can be merged into one basis point with a count. For
/// discrete designs this shrinks every linear system to the support size.
#[derive(Debug, Clone)]
pub struct UniqueRows {
    pub rows: FeatureTable,
    pub counts: Vec<usize>,
    /// Group index of every original row.
    pub group_of: Vec<usize>,
}

impl UniqueRows {
    pub fn new(table: &FeatureTable) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut data = Vec::new();
        let mut counts = Vec::new();
        let mut group_of = Vec::with_capacity(table.nrows());
        for row in table.rows() {
            // -0.0 and 0.0 compare equal and must land in the same group.
            let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            let g = *index.entry(key).or_insert_with(|| {
                data.extend_from_slice(row);
                counts.push(0);
                counts.len() - 1
            });
            counts[g] += 1;
            group_of.push(g);
        }
        Self {
            rows: FeatureTable {
                data,
                ncols: table.ncols(),
            },
            counts,
            group_of,
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Sums a per-row quantity within each group.
    pub fn group_sums(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (&g, &v) in self.group_of.iter().zip(values) {
            out[g] += v;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_rows_rejected() {
        let err = FeatureTable::from_rows(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn unique_rows_groups_in_first_seen_order() {
        let t = FeatureTable::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, -0.0],
            vec![0.0, 1.0],
            vec![2.0, 2.0],
        ])
        .unwrap();
        let u = UniqueRows::new(&t);
        assert_eq!(u.len(), 3);
        assert_eq!(u.counts, vec![2, 2, 1]);
        assert_eq!(u.group_of, vec![0, 1, 0, 1, 2]);
        assert_eq!(u.rows.row(2), &[2.0, 2.0]);
        assert_eq!(u.group_sums(&[1.0, 2.0, 3.0, 4.0, 5.0]), vec![4.0, 6.0, 5.0]);
    }

    #[test]
    fn dataset_length_mismatch() {
        let x = FeatureTable::column(&[1.0, 2.0]);
        assert!(Dataset::new(vec![1.0], x).is_err());
    }
}
