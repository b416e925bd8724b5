//! Pluggable forecaster backends. The built-ins are training-free functions
//! of the spliced context; the external adapter drives a real model over a
//! child process's standard streams with an optional replay cache for
//! deterministic CI.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::schema::VariableSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMetric {
    Mse,
    Mae,
}

impl FromStr for LossMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossMetric::Mse),
            "mae" => Ok(LossMetric::Mae),
            other => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for LossMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossMetric::Mse => write!(f, "mse"),
            LossMetric::Mae => write!(f, "mae"),
        }
    }
}

/// Prediction loss over the horizon.
pub fn loss(prediction: &[f64], truth: &[f64], metric: LossMetric) -> Result<f64> {
    if prediction.len() != truth.len() {
        return Err(Error::LengthMismatch(format!(
            "prediction of {} against truth of {}",
            prediction.len(),
            truth.len()
        )));
    }
    if prediction.is_empty() {
        return Err(Error::LengthMismatch("empty prediction".into()));
    }
    let n = prediction.len() as f64;
    let total: f64 = prediction
        .iter()
        .zip(truth)
        .map(|(p, t)| match metric {
            LossMetric::Mse => (p - t) * (p - t),
            LossMetric::Mae => (p - t).abs(),
        })
        .sum();
    Ok(total / n)
}

/// Loss in z-scored target units so reported numbers are scale-free.
pub fn normalized_loss(
    prediction: &[f64],
    truth: &[f64],
    mean: f64,
    std: f64,
    metric: LossMetric,
) -> Result<f64> {
    let s = if std > 0.0 { std } else { 1.0 };
    let p: Vec<f64> = prediction.iter().map(|v| (v - mean) / s).collect();
    let t: Vec<f64> = truth.iter().map(|v| (v - mean) / s).collect();
    loss(&p, &t, metric)
}

/// Input to a forecast call: the spliced raw context (whole regimes followed
/// by the query history), the known future covariates, and the window split.
#[derive(Debug, Clone)]
pub struct ForecastInput {
    pub context: Matrix,
    pub future_covariates: Matrix,
    pub schema: VariableSchema,
    pub history_len: usize,
    pub horizon: usize,
    /// Per-schema-variable availability; unavailable covariates are ignored
    /// by every backend. The target is always available.
    pub available: Vec<bool>,
}

impl ForecastInput {
    pub fn new(
        context: Matrix,
        future_covariates: Matrix,
        schema: VariableSchema,
        history_len: usize,
        horizon: usize,
    ) -> Result<Self> {
        if context.cols() != schema.var_count() {
            return Err(Error::ShapeMismatch(format!(
                "context has {} variables, schema has {}",
                context.cols(),
                schema.var_count()
            )));
        }
        if future_covariates.cols() != schema.covariate_indices().len()
            || future_covariates.rows() != horizon
        {
            return Err(Error::ShapeMismatch(format!(
                "future covariates {}x{} for horizon {horizon}",
                future_covariates.rows(),
                future_covariates.cols()
            )));
        }
        if history_len == 0 || horizon == 0 || context.rows() < history_len {
            return Err(Error::InvalidConfig(format!(
                "context of {} rows with history {history_len}, horizon {horizon}",
                context.rows()
            )));
        }
        if context.has_non_finite() || future_covariates.has_non_finite() {
            return Err(Error::NonFiniteValue("forecast input".into()));
        }
        let available = vec![true; schema.var_count()];
        Ok(ForecastInput {
            context,
            future_covariates,
            schema,
            history_len,
            horizon,
            available,
        })
    }

    pub fn with_availability(mut self, available: Vec<bool>) -> Result<Self> {
        if available.len() != self.schema.var_count() {
            return Err(Error::DimensionMismatch(
                "availability mask length".into(),
            ));
        }
        if !available[self.schema.target_index()] {
            return Err(Error::InvalidConfig("target cannot be unavailable".into()));
        }
        self.available = available;
        Ok(self)
    }

    /// Number of whole spliced regimes ahead of the query history.
    pub fn spliced_blocks(&self) -> Result<usize> {
        let block = self.history_len + self.horizon;
        let extra = self.context.rows() - self.history_len;
        if extra % block != 0 {
            return Err(Error::ShapeMismatch(format!(
                "context of {} rows does not split into whole regimes of {block}",
                self.context.rows()
            )));
        }
        Ok(extra / block)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOutput {
    pub prediction: Vec<f64>,
}

pub trait Forecaster: Send + Sync {
    fn id(&self) -> &str;
    fn forecast(&self, input: &ForecastInput) -> Result<ForecastOutput>;
}

/// Repeat the last observed target value across the horizon.
pub struct Persistence;

impl Forecaster for Persistence {
    fn id(&self) -> &str {
        "persistence"
    }

    fn forecast(&self, input: &ForecastInput) -> Result<ForecastOutput> {
        let last = input
            .context
            .get(input.context.rows() - 1, input.schema.target_index());
        Ok(ForecastOutput {
            prediction: vec![last; input.horizon],
        })
    }
}

/// Least-squares fit of the target on the available covariates over the whole
/// context, applied to the known future covariates. Includes an intercept and
/// light ridge damping so rank-deficient contexts stay solvable.
pub struct CovariateRegression {
    pub ridge: f64,
}

impl Default for CovariateRegression {
    fn default() -> Self {
        CovariateRegression { ridge: 1e-8 }
    }
}

impl Forecaster for CovariateRegression {
    fn id(&self) -> &str {
        "covariate-regression"
    }

    fn forecast(&self, input: &ForecastInput) -> Result<ForecastOutput> {
        let cov_idx = input.schema.covariate_indices();
        let used: Vec<(usize, usize)> = cov_idx
            .iter()
            .enumerate()
            .filter(|(_, &c)| input.available[c])
            .map(|(j, &c)| (j, c))
            .collect();
        let n = input.context.rows();
        let mut features = Matrix::zeros(n, used.len());
        let mut y = Vec::with_capacity(n);
        for r in 0..n {
            y.push(input.context.get(r, input.schema.target_index()));
            for (f, &(_, c)) in used.iter().enumerate() {
                features.set(r, f, input.context.get(r, c));
            }
        }
        let (intercept, slopes) = fit_linear(&features, &y, self.ridge)?;
        let prediction = (0..input.horizon)
            .map(|r| {
                let mut v = intercept;
                for (f, &(j, _)) in used.iter().enumerate() {
                    v += slopes[f] * input.future_covariates.get(r, j);
                }
                v
            })
            .collect();
        Ok(ForecastOutput { prediction })
    }
}

/// Ridge least squares with intercept on standardized features. Returns the
/// intercept and per-feature slopes in raw units. Constant features get
/// slope 0.
pub fn fit_linear(features: &Matrix, y: &[f64], ridge: f64) -> Result<(f64, Vec<f64>)> {
    let n = features.rows();
    let p = features.cols();
    if y.len() != n || n == 0 {
        return Err(Error::LengthMismatch(format!(
            "{n} feature rows against {} targets",
            y.len()
        )));
    }
    let ybar = y.iter().sum::<f64>() / n as f64;
    if p == 0 {
        return Ok((ybar, Vec::new()));
    }
    let mut mean = vec![0.0; p];
    for r in 0..n {
        for c in 0..p {
            mean[c] += features.get(r, c);
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut std = vec![0.0; p];
    for r in 0..n {
        for c in 0..p {
            let d = features.get(r, c) - mean[c];
            std[c] += d * d;
        }
    }
    let inv_std: Vec<f64> = std
        .iter()
        .map(|&s| {
            let s = (s / n as f64).sqrt();
            if s > 0.0 {
                1.0 / s
            } else {
                0.0
            }
        })
        .collect();
    // Normal equations in standardized space: (Z'Z + ridge*I) beta = Z'(y - ybar).
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for r in 0..n {
        let yc = y[r] - ybar;
        for i in 0..p {
            let zi = (features.get(r, i) - mean[i]) * inv_std[i];
            b[i] += zi * yc;
            for j in i..p {
                let zj = (features.get(r, j) - mean[j]) * inv_std[j];
                a[i][j] += zi * zj;
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            a[i][j] = a[j][i];
        }
        a[i][i] += ridge.max(f64::MIN_POSITIVE);
    }
    let beta = gaussian_solve(a, b)?;
    let slopes: Vec<f64> = beta.iter().zip(&inv_std).map(|(b, inv)| b * inv).collect();
    let intercept = ybar
        - slopes
            .iter()
            .zip(&mean)
            .map(|(s, m)| s * m)
            .sum::<f64>();
    Ok((intercept, slopes))
}

fn gaussian_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() == 0.0 {
            return Err(Error::InvalidConfig("singular normal equations".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut v = b[col];
        for k in col + 1..n {
            v -= a[col][k] * x[k];
        }
        x[col] = v / a[col][col];
    }
    Ok(x)
}

/// Copy the future-target segment of the spliced regime whose weighted
/// distance to the query window is smallest. The query window is the
/// index-aligned observable information: history rows for every variable
/// plus the known future covariates; the unknown future target carries
/// weight zero.
///
/// The weight matrix is a backend parameter. Pipelines pass their retrieval
/// weights so the in-context selection agrees with the ranking that built
/// the chain; standalone use falls back to the masking-only structure.
/// Variables are z-scored over the context so psi and %rpm columns compare
/// on commensurate scales. With no spliced regimes the backend falls back to
/// persistence, which defines the zero-context baseline.
#[derive(Default)]
pub struct NearestContext {
    /// (history + horizon) x variables weight matrix; `None` selects
    /// masking-only weights.
    pub weights: Option<Matrix>,
}

impl Forecaster for NearestContext {
    fn id(&self) -> &str {
        "nearest-context"
    }

    fn forecast(&self, input: &ForecastInput) -> Result<ForecastOutput> {
        let blocks = input.spliced_blocks()?;
        if blocks == 0 {
            return Persistence.forecast(input);
        }
        let v = input.schema.var_count();
        let block_len = input.history_len + input.horizon;
        let target = input.schema.target_index();
        let weights = match &self.weights {
            Some(w) => {
                if w.rows() != block_len || w.cols() != v {
                    return Err(Error::ShapeMismatch(format!(
                        "backend weights {}x{} for a {}x{} window",
                        w.rows(),
                        w.cols(),
                        block_len,
                        v
                    )));
                }
                w.clone()
            }
            None => {
                let mut w = Matrix::zeros(block_len, v);
                for r in 0..block_len {
                    for c in 0..v {
                        let masked = r >= input.history_len && c == target;
                        w.set(r, c, if masked { 0.0 } else { 1.0 });
                    }
                }
                w
            }
        };
        // Context column statistics for scale normalization.
        let rows = input.context.rows();
        let mut mean = vec![0.0; v];
        for r in 0..rows {
            let row = input.context.row(r);
            for c in 0..v {
                mean[c] += row[c];
            }
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        let mut inv_std = vec![0.0; v];
        for r in 0..rows {
            let row = input.context.row(r);
            for c in 0..v {
                let d = row[c] - mean[c];
                inv_std[c] += d * d;
            }
        }
        for s in inv_std.iter_mut() {
            let std = (*s / rows as f64).sqrt();
            *s = if std > 0.0 { 1.0 / std } else { 1.0 };
        }
        // Assemble the query window: observed history plus known future
        // covariates; the future-target cell is inert under zero weight.
        let q_start = blocks * block_len;
        let cov_idx = input.schema.covariate_indices();
        let mut qwin = Matrix::zeros(block_len, v);
        for r in 0..input.history_len {
            let row = input.context.row(q_start + r);
            for c in 0..v {
                qwin.set(r, c, row[c]);
            }
        }
        for r in 0..input.horizon {
            let frow = input.future_covariates.row(r);
            for (fc, &c) in cov_idx.iter().enumerate() {
                qwin.set(input.history_len + r, c, frow[fc]);
            }
        }
        let mut best: Option<(f64, usize)> = None;
        // Scan from the query-adjacent end so the most relevant regime wins
        // distance ties.
        for j in (0..blocks).rev() {
            let base = j * block_len;
            let mut d = 0.0;
            for r in 0..block_len {
                let brow = input.context.row(base + r);
                let qrow = qwin.row(r);
                let wrow = weights.row(r);
                for c in 0..v {
                    if input.available[c] {
                        let diff = (brow[c] - qrow[c]) * inv_std[c];
                        d += wrow[c] * diff * diff;
                    }
                }
            }
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        let j = best.expect("blocks > 0").1;
        let prediction = (0..input.horizon)
            .map(|r| input.context.get(j * block_len + input.history_len + r, target))
            .collect();
        Ok(ForecastOutput { prediction })
    }
}

/// External adapter wiring: command, timeout, and replay-cache location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub replay_cache: Option<PathBuf>,
}

fn default_timeout() -> u64 {
    30
}

/// Which forecaster to build; parses from strings like `persistence`,
/// `covariate-regression`, `nearest-context`, or `external:cmd arg ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    Persistence,
    CovariateRegression,
    NearestContext,
    External(ExternalConfig),
}

impl FromStr for BackendSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "persistence" => Ok(BackendSpec::Persistence),
            "covariate-regression" => Ok(BackendSpec::CovariateRegression),
            "nearest-context" => Ok(BackendSpec::NearestContext),
            other => {
                if let Some(rest) = other.strip_prefix("external:") {
                    let mut parts = rest.split_whitespace();
                    let command = parts
                        .next()
                        .ok_or_else(|| Error::InvalidConfig("external: missing command".into()))?
                        .to_string();
                    Ok(BackendSpec::External(ExternalConfig {
                        command,
                        args: parts.map(str::to_string).collect(),
                        timeout_secs: default_timeout(),
                        replay_cache: None,
                    }))
                } else {
                    Err(Error::InvalidConfig(format!("unknown backend {other:?}")))
                }
            }
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(spec: BackendSpec) -> String {
        spec.to_string()
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Persistence => write!(f, "persistence"),
            BackendSpec::CovariateRegression => write!(f, "covariate-regression"),
            BackendSpec::NearestContext => write!(f, "nearest-context"),
            BackendSpec::External(cfg) => {
                write!(f, "external:{}", cfg.command)?;
                for a in &cfg.args {
                    write!(f, " {a}")?;
                }
                Ok(())
            }
        }
    }
}

/// Build a forecaster. `weights` parameterizes the nearest-context backend
/// with the pipeline's retrieval weight matrix; other backends ignore it.
pub fn build_forecaster(
    spec: &BackendSpec,
    weights: Option<&crate::weighting::FusedWeights>,
) -> Result<Box<dyn Forecaster>> {
    Ok(match spec {
        BackendSpec::Persistence => Box::new(Persistence),
        BackendSpec::CovariateRegression => Box::new(CovariateRegression::default()),
        BackendSpec::NearestContext => Box::new(NearestContext {
            weights: weights.map(|w| w.matrix().clone()),
        }),
        BackendSpec::External(cfg) => Box::new(ExternalAdapter::new(cfg.clone())?),
    })
}

#[derive(Serialize)]
struct AdapterRequest<'a> {
    schema: &'a VariableSchema,
    context: Vec<Vec<f64>>,
    future_covariates: Vec<Vec<f64>>,
    history_len: usize,
    horizon: usize,
}

#[derive(Deserialize)]
struct AdapterResponse {
    #[serde(default)]
    prediction: Option<Vec<f64>>,
    #[serde(default)]
    error: Option<String>,
}

struct AdapterChild {
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    child: Child,
}

impl Drop for AdapterChild {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// One line-delimited JSON request per forecast over a child process's
/// standard streams. Requests on one connection are serialized; a replay
/// cache keyed by request hash makes runs reproducible without the process.
pub struct ExternalAdapter {
    config: ExternalConfig,
    cache: Mutex<HashMap<String, Vec<f64>>>,
    child: Mutex<Option<AdapterChild>>,
}

impl ExternalAdapter {
    pub fn new(config: ExternalConfig) -> Result<Self> {
        let cache = match &config.replay_cache {
            Some(path) if path.exists() => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::CorruptStore(format!("replay cache: {e}")))?
            }
            _ => HashMap::new(),
        };
        Ok(ExternalAdapter {
            config,
            cache: Mutex::new(cache),
            child: Mutex::new(None),
        })
    }

    fn spawn(&self) -> Result<AdapterChild> {
        let mut child = Command::new(&self.config.command)
            .args(&self.config.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| {
                Error::BackendUnavailable(format!("spawning {}: {e}", self.config.command))
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(AdapterChild {
            stdin,
            lines: rx,
            child,
        })
    }

    fn persist_cache(&self, cache: &HashMap<String, Vec<f64>>) -> Result<()> {
        if let Some(path) = &self.config.replay_cache {
            let text = serde_json::to_string_pretty(cache)
                .map_err(|e| Error::CorruptStore(format!("replay cache: {e}")))?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

pub(crate) fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Forecaster for ExternalAdapter {
    fn id(&self) -> &str {
        "external"
    }

    fn forecast(&self, input: &ForecastInput) -> Result<ForecastOutput> {
        let request = AdapterRequest {
            schema: &input.schema,
            context: (0..input.context.rows())
                .map(|r| input.context.row(r).to_vec())
                .collect(),
            future_covariates: (0..input.future_covariates.rows())
                .map(|r| input.future_covariates.row(r).to_vec())
                .collect(),
            history_len: input.history_len,
            horizon: input.horizon,
        };
        let line = serde_json::to_string(&request)
            .map_err(|e| Error::MalformedResponse(format!("serializing request: {e}")))?;
        let key = sha256_hex(&line);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(ForecastOutput {
                prediction: hit.clone(),
            });
        }

        let mut guard = self.child.lock().expect("child lock");
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let child = guard.as_mut().expect("spawned above");
        if let Err(e) = writeln!(child.stdin, "{line}").and_then(|_| child.stdin.flush()) {
            *guard = None;
            return Err(Error::BackendUnavailable(format!("writing request: {e}")));
        }
        let reply = match child
            .lines
            .recv_timeout(Duration::from_secs(self.config.timeout_secs))
        {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => {
                *guard = None;
                return Err(Error::BackendUnavailable(format!("reading response: {e}")));
            }
            Err(RecvTimeoutError::Timeout) => {
                *guard = None;
                return Err(Error::BackendUnavailable(format!(
                    "no response within {}s",
                    self.config.timeout_secs
                )));
            }
            Err(RecvTimeoutError::Disconnected) => {
                *guard = None;
                return Err(Error::BackendUnavailable("process exited".into()));
            }
        };
        drop(guard);

        let response: AdapterResponse = serde_json::from_str(&reply)
            .map_err(|e| Error::MalformedResponse(format!("{e}: {reply:?}")))?;
        if let Some(err) = response.error {
            return Err(Error::BackendUnavailable(format!("adapter error: {err}")));
        }
        let prediction = response
            .prediction
            .ok_or_else(|| Error::MalformedResponse("missing prediction".into()))?;
        if prediction.len() != input.horizon || prediction.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedResponse(format!(
                "prediction of {} values for horizon {}",
                prediction.len(),
                input.horizon
            )));
        }
        let mut cache = self.cache.lock().expect("cache lock");
        cache.insert(key, prediction.clone());
        self.persist_cache(&cache)?;
        Ok(ForecastOutput { prediction })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Variable;

    fn schema() -> VariableSchema {
        VariableSchema::new(vec![
            Variable::target("MP", "psi"),
            Variable::covariate("IP", "psi"),
            Variable::covariate("N2", "%rpm"),
        ])
        .unwrap()
    }

    fn input_from_history(history: Vec<Vec<f64>>, future: Vec<Vec<f64>>) -> ForecastInput {
        let h = history.len();
        let hor = future.len();
        ForecastInput::new(
            Matrix::from_rows(history).unwrap(),
            Matrix::from_rows(future).unwrap(),
            schema(),
            h,
            hor,
        )
        .unwrap()
    }

    #[test]
    fn persistence_repeats_last_target() {
        let input = input_from_history(
            vec![vec![1.0, 5.0, 60.0], vec![4.2, 6.0, 61.0]],
            vec![vec![7.0, 62.0]; 3],
        );
        let out = Persistence.forecast(&input).unwrap();
        assert_eq!(out.prediction, vec![4.2, 4.2, 4.2]);
    }

    #[test]
    fn regression_recovers_exact_linear_law() {
        // MP = 2*IP exactly, N2 constant; future IP = [1,2,3]. The ridge
        // bias shrinks with context length, so a realistic spliced-context
        // row count keeps the prediction within 1e-9 of the closed form.
        let history: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let ip = i as f64 * 0.1;
                vec![2.0 * ip, ip, 70.0]
            })
            .collect();
        let input = input_from_history(
            history,
            vec![vec![1.0, 70.0], vec![2.0, 70.0], vec![3.0, 70.0]],
        );
        let out = CovariateRegression::default().forecast(&input).unwrap();
        for (got, want) in out.prediction.iter().zip([2.0, 4.0, 6.0]) {
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
    }

    #[test]
    fn regression_with_no_available_covariates_predicts_mean() {
        let history: Vec<Vec<f64>> =
            (0..6).map(|i| vec![i as f64, 1.0, 2.0]).collect();
        let input = input_from_history(history, vec![vec![0.0, 0.0]; 2])
            .with_availability(vec![true, false, false])
            .unwrap();
        let out = CovariateRegression::default().forecast(&input).unwrap();
        assert!((out.prediction[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn fit_linear_handles_constant_features() {
        let features =
            Matrix::from_rows((0..8).map(|i| vec![i as f64, 3.0]).collect()).unwrap();
        let y: Vec<f64> = (0..8).map(|i| 5.0 + 2.0 * i as f64).collect();
        let (intercept, slopes) = fit_linear(&features, &y, 1e-8).unwrap();
        assert!((slopes[0] - 2.0).abs() < 1e-6);
        assert_eq!(slopes[1], 0.0);
        assert!((intercept - 5.0).abs() < 1e-6);
    }

    #[test]
    fn nearest_context_copies_exact_match() {
        // Two spliced regimes of length 3 (history 2, horizon 1) and a query
        // history equal to the second regime's history.
        let rows = vec![
            // regime A (farther from query)
            vec![1.0, 1.0, 1.0],
            vec![2.0, 2.0, 2.0],
            vec![9.0, 3.0, 3.0],
            // regime B (adjacent to query); history matches the query
            vec![5.0, 4.0, 4.0],
            vec![6.0, 5.0, 5.0],
            vec![42.0, 6.0, 6.0],
            // query history
            vec![5.0, 4.0, 4.0],
            vec![6.0, 5.0, 5.0],
        ];
        let input = ForecastInput::new(
            Matrix::from_rows(rows).unwrap(),
            Matrix::from_rows(vec![vec![7.0, 7.0]]).unwrap(),
            schema(),
            2,
            1,
        )
        .unwrap();
        let out = NearestContext::default().forecast(&input).unwrap();
        assert_eq!(out.prediction, vec![42.0]);
    }

    #[test]
    fn nearest_context_without_blocks_falls_back_to_persistence() {
        let input = input_from_history(
            vec![vec![1.0, 5.0, 60.0], vec![3.5, 6.0, 61.0]],
            vec![vec![7.0, 62.0]; 2],
        );
        let out = NearestContext::default().forecast(&input).unwrap();
        assert_eq!(out.prediction, vec![3.5, 3.5]);
    }

    #[test]
    fn nearest_context_rejects_misaligned_context() {
        let rows: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, 0.0, 0.0]).collect();
        let input = ForecastInput::new(
            Matrix::from_rows(rows).unwrap(),
            Matrix::from_rows(vec![vec![0.0, 0.0]]).unwrap(),
            schema(),
            2,
            1,
        )
        .unwrap();
        assert!(NearestContext::default().forecast(&input).is_err());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[1.0, 2.0], &[1.0, 2.0], LossMetric::Mse).unwrap(), 0.0);
        assert_eq!(loss(&[2.0, 3.0], &[1.0, 2.0], LossMetric::Mse).unwrap(), 1.0);
        assert_eq!(loss(&[2.0, 3.0], &[1.0, 2.0], LossMetric::Mae).unwrap(), 1.0);
        assert_eq!(loss(&[0.0, 0.0], &[1.0, 3.0], LossMetric::Mse).unwrap(), 5.0);
        assert_eq!(loss(&[0.0, 0.0], &[1.0, 3.0], LossMetric::Mae).unwrap(), 2.0);
        assert!(loss(&[0.0], &[1.0, 2.0], LossMetric::Mse).is_err());
    }

    #[test]
    fn normalized_loss_is_scale_free() {
        let a = normalized_loss(&[12.0, 14.0], &[10.0, 10.0], 10.0, 2.0, LossMetric::Mse).unwrap();
        assert!((a - 2.5).abs() < 1e-12); // ((1)^2 + (2)^2)/2
    }

    #[test]
    fn backends_are_deterministic() {
        let input = input_from_history(
            (0..8).map(|i| vec![i as f64 * 0.3, i as f64, 50.0 + i as f64]).collect(),
            vec![vec![9.0, 59.0]; 4],
        );
        for backend in [
            BackendSpec::Persistence,
            BackendSpec::CovariateRegression,
            BackendSpec::NearestContext,
        ] {
            let f = build_forecaster(&backend, None).unwrap();
            let a = f.forecast(&input).unwrap();
            let b = f.forecast(&input).unwrap();
            assert_eq!(a, b, "backend {backend} not deterministic");
        }
    }

    #[test]
    fn backend_spec_parses_and_round_trips() {
        assert_eq!(
            "persistence".parse::<BackendSpec>().unwrap(),
            BackendSpec::Persistence
        );
        let ext: BackendSpec = "external:python3 adapter.py".parse().unwrap();
        match &ext {
            BackendSpec::External(cfg) => {
                assert_eq!(cfg.command, "python3");
                assert_eq!(cfg.args, vec!["adapter.py"]);
            }
            _ => panic!("expected external"),
        }
        assert!("dtw".parse::<BackendSpec>().is_err());
    }
}
