//! Query CSV parsing: same layout as a stored sample, except the target
//! column may be left empty on the future rows. When every future target
//! cell is present it becomes ground truth for deviation reporting.

use std::path::Path;

use rafter_core::error::{Error, Result};
use rafter_core::matrix::{parse_value, Matrix};
use rafter_core::schema::VariableSchema;

pub struct QueryFile {
    pub history: Matrix,
    pub future_covariates: Matrix,
    pub truth: Option<Vec<f64>>,
}

pub fn read_query_csv(
    path: &Path,
    schema: &VariableSchema,
    history_len: usize,
    regime_len: usize,
) -> Result<QueryFile> {
    let bad = |msg: String| Error::InvalidConfig(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let expected: Vec<&str> = std::iter::once("timestamp").chain(schema.names()).collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(bad(format!("header {got:?}, expected {expected:?}")));
    }
    let target = schema.target_index();
    let cov_idx = schema.covariate_indices();
    let mut history_rows = Vec::new();
    let mut future_rows = Vec::new();
    let mut truth = Vec::new();
    let mut missing_truth = false;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != expected.len() {
            return Err(bad(format!("row {i} has {} fields", record.len())));
        }
        let cell = |c: usize| -> Result<f64> {
            parse_value(&record[c + 1]).map_err(|_| bad(format!("row {i}, column {}", expected[c + 1])))
        };
        if i < history_len {
            let mut row = Vec::with_capacity(schema.var_count());
            for c in 0..schema.var_count() {
                row.push(cell(c)?);
            }
            history_rows.push(row);
        } else {
            let mut row = Vec::with_capacity(cov_idx.len());
            for &c in &cov_idx {
                row.push(cell(c)?);
            }
            future_rows.push(row);
            if record[target + 1].is_empty() {
                missing_truth = true;
            } else {
                truth.push(cell(target)?);
            }
        }
    }
    let rows = history_rows.len() + future_rows.len();
    if rows != regime_len {
        return Err(bad(format!("{rows} rows, expected the regime length {regime_len}")));
    }
    Ok(QueryFile {
        history: Matrix::from_rows(history_rows)?,
        future_covariates: Matrix::from_rows(future_rows)?,
        truth: if missing_truth { None } else { Some(truth) },
    })
}
