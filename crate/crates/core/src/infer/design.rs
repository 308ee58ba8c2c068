//! Difference-coded design matrix with per-column z-scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::ChoiceDataset;

/// Column means and population SDs of the raw difference regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(columns: Vec<String>) -> Self {
        let n = columns.len();
        Self { columns, mean: vec![0.0; n], scale: vec![1.0; n] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.columns.len() || self.scale.len() != self.columns.len() {
            return Err(Error::contract("standardization vectors disagree in length"));
        }
        if let Some(i) = self.scale.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::data(format!(
                "column `{}` has non-positive scale {}",
                self.columns[i], self.scale[i]
            )));
        }
        Ok(())
    }
}

/// Rows are `encode(a) - encode(b)`, standardized, grouped by respondent.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    x: Vec<f64>,
    n_cols: usize,
    /// Half-open row range for each respondent.
    rows_of: Vec<(usize, usize)>,
    respondent_ids: Vec<u32>,
    price_column: usize,
    standardization: Standardization,
}

impl Design {
    /// Assemble a design from already-standardized rows.
    ///
    /// `row_respondent[r]` indexes into `respondent_ids` and must be
    /// non-decreasing. Respondents with no rows are allowed.
    pub fn from_parts(
        x: Vec<f64>,
        row_respondent: &[usize],
        respondent_ids: Vec<u32>,
        price_column: usize,
        standardization: Standardization,
    ) -> Result<Self> {
        let n_cols = standardization.columns.len();
        standardization.validate()?;
        if n_cols == 0 || price_column >= n_cols {
            return Err(Error::contract("design needs a price column inside the column range"));
        }
        if x.len() != row_respondent.len() * n_cols {
            return Err(Error::contract(format!(
                "design has {} values for {} rows of {n_cols} columns",
                x.len(),
                row_respondent.len()
            )));
        }
        let mut rows_of = vec![(0usize, 0usize); respondent_ids.len()];
        let mut prev = 0usize;
        for (r, &i) in row_respondent.iter().enumerate() {
            if i >= respondent_ids.len() || i < prev {
                return Err(Error::contract("rows must be grouped by respondent in index order"));
            }
            if r == 0 || i != prev {
                rows_of[i].0 = r;
            }
            rows_of[i].1 = r + 1;
            prev = i;
        }
        Ok(Self { x, n_cols, rows_of, respondent_ids, price_column, standardization })
    }

    pub fn n_rows(&self) -> usize {
        self.x.len() / self.n_cols
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_respondents(&self) -> usize {
        self.respondent_ids.len()
    }

    pub fn respondent_ids(&self) -> &[u32] {
        &self.respondent_ids
    }

    pub fn price_column(&self) -> usize {
        self.price_column
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.x[r * self.n_cols..(r + 1) * self.n_cols]
    }

    /// Row range for respondent index `i`.
    pub fn rows_of(&self, i: usize) -> std::ops::Range<usize> {
        let (a, b) = self.rows_of[i];
        a..b
    }

    /// Same design with every row repeated `times` times, for likelihood tests.
    pub fn repeated(&self, times: usize) -> Self {
        let mut x = Vec::with_capacity(self.x.len() * times);
        let mut row_respondent = Vec::new();
        for i in 0..self.n_respondents() {
            for _ in 0..times {
                for r in self.rows_of(i) {
                    x.extend_from_slice(self.row(r));
                    row_respondent.push(i);
                }
            }
        }
        Self::from_parts(
            x,
            &row_respondent,
            self.respondent_ids.clone(),
            self.price_column,
            self.standardization.clone(),
        )
        .expect("repeating a valid design keeps it valid")
    }
}

/// Build the standardized difference design and the 0/1 choice vector.
pub fn build_design(dataset: &ChoiceDataset) -> Result<(Design, Vec<f64>)> {
    build_design_with(dataset, true)
}

/// As [`build_design`]; with `standardize = false` the identity
/// standardization is recorded and the raw differences are kept.
pub fn build_design_with(dataset: &ChoiceDataset, standardize: bool) -> Result<(Design, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot build a design from an empty dataset"));
    }
    let scheme = &dataset.scheme;
    let n_cols = scheme.n_columns();
    let columns = scheme.column_names();
    let ids = dataset.respondent_ids();
    let mut x = Vec::with_capacity(dataset.len() * n_cols);
    let mut row_respondent = Vec::with_capacity(dataset.len());
    let mut choices = Vec::with_capacity(dataset.len());
    let mut idx = 0usize;
    for rec in &dataset.records {
        if ids[idx] != rec.task.respondent_id {
            idx += 1;
        }
        let a = scheme.encode(&rec.task.profile_a)?;
        let b = scheme.encode(&rec.task.profile_b)?;
        x.extend(a.difference(&b));
        row_respondent.push(idx);
        choices.push(if rec.chose_a { 1.0 } else { 0.0 });
    }
    let n = dataset.len() as f64;
    let mut mean = vec![0.0; n_cols];
    let mut scale = vec![1.0; n_cols];
    for c in 0..n_cols {
        let col = || x.iter().skip(c).step_by(n_cols);
        let m = col().sum::<f64>() / n;
        let var = col().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        if !(var > 1e-24) {
            return Err(Error::data(format!(
                "difference column `{}` is constant; its coefficient is not identified",
                columns[c]
            )));
        }
        if standardize {
            mean[c] = m;
            scale[c] = var.sqrt();
        }
    }
    if standardize {
        for row in x.chunks_mut(n_cols) {
            for c in 0..n_cols {
                row[c] = (row[c] - mean[c]) / scale[c];
            }
        }
    }
    let standardization = Standardization { columns, mean, scale };
    let design = Design::from_parts(x, &row_respondent, ids, scheme.price_column(), standardization)?;
    Ok((design, choices))
}
