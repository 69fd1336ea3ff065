//! Multivariate spatial datasets: locations, an outcome matrix with a
//! missingness mask, and per-outcome predictor blocks.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SfError};
use crate::geometry::{LocationSet, Point};

/// Predictor block shared by one or more outcomes. `x` is row-major `n×p`.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    /// Column names; the intercept column, if any, is named `(intercept)`.
    pub names: Vec<String>,
    pub x: Vec<f64>,
}

pub const INTERCEPT: &str = "(intercept)";

impl Design {
    pub fn p(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.x[i * p..(i + 1) * p]
    }

    fn subset(&self, rows: &[usize]) -> Self {
        let mut x = Vec::with_capacity(rows.len() * self.p());
        for &r in rows {
            x.extend_from_slice(self.row(r));
        }
        Self {
            names: self.names.clone(),
            x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialDataset {
    pub locs: LocationSet,
    pub outcome_names: Vec<String>,
    /// Row-major `n×h`; NaN where missing.
    pub values: Vec<f64>,
    pub designs: Vec<Design>,
    /// Index into `designs` for each outcome.
    pub design_of: Vec<usize>,
}

/// Which CSV columns are outcomes and which are predictors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSchema {
    /// Outcome columns; `None` means every column that is not a predictor.
    pub outcomes: Option<Vec<String>>,
    /// Predictors shared by all outcomes.
    pub predictors: Vec<String>,
    pub intercept: bool,
    /// Outcome-specific predictor lists overriding `predictors`.
    pub per_outcome: Vec<(String, Vec<String>)>,
}

impl DatasetSchema {
    pub fn intercept_only() -> Self {
        Self {
            intercept: true,
            ..Self::default()
        }
    }

    fn predictors_for(&self, outcome: &str) -> &[String] {
        self.per_outcome
            .iter()
            .find(|(o, _)| o == outcome)
            .map(|(_, p)| p.as_slice())
            .unwrap_or(&self.predictors)
    }
}

impl SpatialDataset {
    pub fn new(
        locs: LocationSet,
        outcome_names: Vec<String>,
        values: Vec<f64>,
        designs: Vec<Design>,
        design_of: Vec<usize>,
    ) -> Result<Self> {
        let n = locs.len();
        let h = outcome_names.len();
        if values.len() != n * h {
            return Err(SfError::Dimension(format!(
                "outcome matrix has {} cells, expected {n}×{h}",
                values.len()
            )));
        }
        if design_of.len() != h {
            return Err(SfError::Dimension(format!(
                "{} design assignments for {h} outcomes",
                design_of.len()
            )));
        }
        for (k, d) in designs.iter().enumerate() {
            if d.x.len() != n * d.p() {
                return Err(SfError::Dimension(format!(
                    "predictor block {k} has {} cells, expected {n}×{}",
                    d.x.len(),
                    d.p()
                )));
            }
            if let Some(pos) = d.x.iter().position(|v| !v.is_finite()) {
                return Err(SfError::ingest(format!(
                    "predictor '{}' is not finite for id '{}'",
                    d.names[pos % d.p()],
                    locs.ids()[pos / d.p()]
                )));
            }
        }
        if let Some(&bad) = design_of.iter().find(|&&k| k >= designs.len()) {
            return Err(SfError::Dimension(format!("design index {bad} out of range")));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(SfError::ingest("infinite outcome value"));
        }
        Ok(Self {
            locs,
            outcome_names,
            values,
            designs,
            design_of,
        })
    }

    pub fn n(&self) -> usize {
        self.locs.len()
    }

    pub fn h(&self) -> usize {
        self.outcome_names.len()
    }

    pub fn p(&self, j: usize) -> usize {
        self.designs[self.design_of[j]].p()
    }

    pub fn p_list(&self) -> Vec<usize> {
        (0..self.h()).map(|j| self.p(j)).collect()
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.h() + j]
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        !self.value(i, j).is_nan()
    }

    #[inline]
    pub fn x_row(&self, j: usize, i: usize) -> &[f64] {
        self.designs[self.design_of[j]].row(i)
    }

    pub fn design(&self, j: usize) -> &Design {
        &self.designs[self.design_of[j]]
    }

    pub fn observed_count(&self, j: usize) -> usize {
        (0..self.n()).filter(|&i| self.is_observed(i, j)).count()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Missing cells as `(row, outcome)` in row-major order.
    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let h = self.h();
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_nan())
            .map(|(k, _)| (k / h, k % h))
            .collect()
    }

    pub fn coords(&self) -> &[Point] {
        self.locs.coords()
    }

    /// Restrict to the given storage rows.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let h = self.h();
        let mut values = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            values.extend_from_slice(&self.values[r * h..(r + 1) * h]);
        }
        Self::new(
            self.locs.subset(rows)?,
            self.outcome_names.clone(),
            values,
            self.designs.iter().map(|d| d.subset(rows)).collect(),
            self.design_of.clone(),
        )
    }

    /// Predictor column names (intercept excluded) in first-appearance order.
    pub fn predictor_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for d in &self.designs {
            for name in &d.names {
                if name != INTERCEPT && !out.contains(name) {
                    out.push(name.clone());
                }
            }
        }
        out
    }

    /// Value of a named predictor column at row `i`.
    fn predictor_value(&self, name: &str, i: usize) -> Option<f64> {
        self.designs
            .iter()
            .find_map(|d| d.names.iter().position(|c| c == name).map(|k| d.row(i)[k]))
    }

    /// Write `id,x,y,<outcomes>,<predictors>`; missing cells as `NA`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let preds = self.predictor_columns();
        out.push_str("id,x,y");
        for name in self.outcome_names.iter().chain(&preds) {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for i in 0..self.n() {
            let c = self.locs.coords()[i];
            out.push_str(&format!("{},{},{}", self.locs.ids()[i], c[0], c[1]));
            for j in 0..self.h() {
                let v = self.value(i, j);
                if v.is_nan() {
                    out.push_str(",NA");
                } else {
                    out.push_str(&format!(",{v}"));
                }
            }
            for name in &preds {
                out.push_str(&format!(",{}", self.predictor_value(name, i).unwrap()));
            }
            out.push('\n');
        }
        let mut f = File::create(path).map_err(|e| SfError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| SfError::io(path, e))
    }
}

fn parse_cell(cell: &str, line: usize, col: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| SfError::ingest_at(line, format!("column '{col}': '{cell}' is not a number")))
}

/// Parse a dataset CSV with header `id,x,y,<outcome columns>,<predictor columns>`.
///
/// The literal `NA` in an outcome cell marks it missing; `NA` in a predictor
/// is rejected. With `require_outcomes = false`, outcome columns absent from
/// the header are read as entirely missing (query files).
pub fn ingest_csv_with(path: &Path, schema: &DatasetSchema, require_outcomes: bool) -> Result<SpatialDataset> {
    let file = File::open(path).map_err(|e| SfError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| SfError::ingest_at(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 3 || header[0] != "id" || header[1] != "x" || header[2] != "y" {
        return Err(SfError::ingest_at(1, "header must start with id,x,y"));
    }
    let col_of: HashMap<&str, usize> = header.iter().enumerate().map(|(k, c)| (c.as_str(), k)).collect();
    if col_of.len() != header.len() {
        return Err(SfError::ingest_at(1, "repeated column name in header"));
    }

    let mut pred_cols: Vec<&String> = schema.predictors.iter().collect();
    for (_, list) in &schema.per_outcome {
        for c in list {
            if !pred_cols.contains(&c) {
                pred_cols.push(c);
            }
        }
    }
    for c in &pred_cols {
        if !col_of.contains_key(c.as_str()) {
            return Err(SfError::ingest_at(1, format!("predictor column '{c}' not found")));
        }
    }
    let outcome_names: Vec<String> = match &schema.outcomes {
        Some(list) => list.clone(),
        None => header[3..]
            .iter()
            .filter(|c| !pred_cols.contains(c))
            .cloned()
            .collect(),
    };
    if outcome_names.is_empty() {
        return Err(SfError::ingest_at(1, "no outcome columns"));
    }
    let outcome_idx: Vec<Option<usize>> = outcome_names
        .iter()
        .map(|o| match col_of.get(o.as_str()) {
            Some(&k) => Ok(Some(k)),
            None if !require_outcomes => Ok(None),
            None => Err(SfError::ingest_at(1, format!("outcome column '{o}' not found"))),
        })
        .collect::<Result<_>>()?;

    let mut ids = Vec::new();
    let mut coords = Vec::new();
    let mut values = Vec::new();
    let mut raw_preds: Vec<Vec<f64>> = vec![Vec::new(); pred_cols.len()];
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| SfError::ingest_at(line, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(SfError::ingest_at(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        ids.push(rec[0].to_string());
        coords.push([parse_cell(&rec[1], line, "x")?, parse_cell(&rec[2], line, "y")?]);
        for (o, k) in outcome_names.iter().zip(&outcome_idx) {
            match k {
                Some(k) if &rec[*k] == "NA" => values.push(f64::NAN),
                Some(k) => {
                    let v = parse_cell(&rec[*k], line, o)?;
                    if !v.is_finite() {
                        return Err(SfError::ingest_at(line, format!("column '{o}' is not finite")));
                    }
                    values.push(v)
                }
                None => values.push(f64::NAN),
            }
        }
        for (c, buf) in pred_cols.iter().zip(raw_preds.iter_mut()) {
            let cell = &rec[col_of[c.as_str()]];
            if cell == "NA" {
                return Err(SfError::ingest_at(line, format!("predictor '{c}' is NA")));
            }
            let v = parse_cell(cell, line, c)?;
            if !v.is_finite() {
                return Err(SfError::ingest_at(line, format!("predictor '{c}' is not finite")));
            }
            buf.push(v);
        }
    }
    let n = ids.len();
    if n == 0 {
        return Err(SfError::ingest("no data rows"));
    }
    let locs = LocationSet::new(coords, ids)?;

    // one design per distinct predictor list
    let mut designs: Vec<Design> = Vec::new();
    let mut design_of = Vec::with_capacity(outcome_names.len());
    for o in &outcome_names {
        let list = schema.predictors_for(o);
        let mut names: Vec<String> = Vec::new();
        if schema.intercept {
            names.push(INTERCEPT.to_string());
        }
        names.extend(list.iter().cloned());
        if names.is_empty() {
            return Err(SfError::Config(format!("outcome '{o}' has no predictors and no intercept")));
        }
        let k = match designs.iter().position(|d| d.names == names) {
            Some(k) => k,
            None => {
                let mut x = Vec::with_capacity(n * names.len());
                for i in 0..n {
                    for name in &names {
                        if name == INTERCEPT {
                            x.push(1.0);
                        } else {
                            let c = pred_cols.iter().position(|c| *c == name).unwrap();
                            x.push(raw_preds[c][i]);
                        }
                    }
                }
                designs.push(Design { names, x });
                designs.len() - 1
            }
        };
        design_of.push(k);
    }
    SpatialDataset::new(locs, outcome_names, values, designs, design_of)
}

pub fn ingest_csv(path: &Path, schema: &DatasetSchema) -> Result<SpatialDataset> {
    ingest_csv_with(path, schema, true)
}
