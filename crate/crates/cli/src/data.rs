//! CSV input. The header names the columns: `y` is the outcome and every
//! other column is a feature, kept in header order.

use std::path::Path;

use riesz_core::table::{Dataset, FeatureTable};
use riesz_core::Error;

type Result<T> = std::result::Result<T, Error>;

pub const OUTCOME: &str = "y";

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Feature column names, in table order.
    pub names: Vec<String>,
    pub y: Option<Vec<f64>>,
    pub x: FeatureTable,
}

impl Frame {
    pub fn dataset(&self) -> Result<Dataset> {
        let y = self
            .y
            .clone()
            .ok_or_else(|| Error::input(format!("data has no outcome column {OUTCOME:?}")))?;
        Dataset::new(y, self.x.clone())
    }
}

pub fn read_csv(path: &Path) -> Result<Frame> {
    let file = std::fs::File::open(path).map_err(|e| Error::input(format!("cannot open {}: {e}", path.display())))?;
    parse_csv(file, &path.display().to_string())
}

pub fn parse_csv<R: std::io::Read>(reader: R, label: &str) -> Result<Frame> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::input(format!("{label}: cannot read header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::input(format!("{label}: missing header row")));
    }
    for (i, h) in header.iter().enumerate() {
        if h.is_empty() {
            return Err(Error::input(format!("{label}: header column {} is empty", i + 1)));
        }
        if header[..i].contains(h) {
            return Err(Error::input(format!("{label}: duplicate column {h:?}")));
        }
    }
    let y_col = header.iter().position(|h| h == OUTCOME);
    let names: Vec<String> = header.iter().filter(|h| *h != OUTCOME).cloned().collect();
    if names.is_empty() {
        return Err(Error::input(format!("{label}: no feature columns")));
    }

    let mut y = Vec::new();
    let mut x = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        // Line numbers count the header as line 1.
        let line = r + 2;
        let rec = rec.map_err(|e| Error::input(format!("{label}: line {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::input(format!("{label}: line {line}: expected {} fields, found {}", header.len(), rec.len())));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::input(format!("{label}: line {line}, column {:?}: {field:?} is not a finite number", header[c])))?;
            if Some(c) == y_col {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    if x.is_empty() {
        return Err(Error::input(format!("{label}: no data rows")));
    }
    Ok(Frame {
        x: FeatureTable::new(x, names.len())?,
        names,
        y: y_col.map(|_| y),
    })
}
