//! Hierarchical knowledge base: lossless storage, ingestion, validation, and
//! scoped iteration of raw regime samples.
//!
//! Build phase is single-writer (`KbBuilder`); a finalized
//! `KnowledgeBase` is immutable and safe to share across readers.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::schema::VariableSchema;
use crate::weighting::CovariateWeights;

pub const PATH_SEPARATOR: char = '/';

/// Path of a sample inside the hierarchy, e.g. `B777/tail017/takeoff/f00042`
/// (group / device / regime / sample-id). At least two segments are required.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HierarchicalPath {
    segments: Vec<String>,
}

impl HierarchicalPath {
    pub fn new<S: Into<String>>(segments: Vec<S>) -> Result<Self> {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        if segments.len() < 2 {
            return Err(Error::InvalidPath(format!(
                "need at least 2 segments, got {}",
                segments.len()
            )));
        }
        for s in &segments {
            if s.is_empty() {
                return Err(Error::InvalidPath("empty segment".into()));
            }
            if s.contains(PATH_SEPARATOR) || s.contains('\\') || s.contains('\0') {
                return Err(Error::InvalidPath(format!("segment {s:?} contains a separator")));
            }
            if s == "." || s == ".." {
                return Err(Error::InvalidPath(format!("segment {s:?} is reserved")));
            }
        }
        Ok(HierarchicalPath { segments })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.split(PATH_SEPARATOR).map(str::to_string).collect())
    }

    /// Parse a scope prefix: may be empty or shorter than a full path.
    pub fn parse_prefix(text: &str) -> Result<Vec<String>> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let segments: Vec<String> = text.split(PATH_SEPARATOR).map(str::to_string).collect();
        for s in &segments {
            if s.is_empty() {
                return Err(Error::InvalidPath(format!("empty segment in prefix {text:?}")));
            }
        }
        Ok(segments)
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn starts_with(&self, prefix: &[String]) -> bool {
        prefix.len() <= self.segments.len()
            && self.segments.iter().zip(prefix).all(|(a, b)| a == b)
    }

    /// The group/device prefix identifying the physical unit.
    pub fn device_prefix(&self) -> String {
        self.segments[..2.min(self.segments.len())].join(&PATH_SEPARATOR.to_string())
    }
}

impl fmt::Display for HierarchicalPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.segments.join(&PATH_SEPARATOR.to_string()))
    }
}

/// One raw multivariate operational cycle; the KB leaf unit.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSample {
    pub path: HierarchicalPath,
    pub values: Matrix,
    pub timestamps: Vec<f64>,
}

impl RegimeSample {
    pub fn start_time(&self) -> f64 {
        *self.timestamps.first().unwrap_or(&0.0)
    }

    pub fn end_time(&self) -> f64 {
        *self.timestamps.last().unwrap_or(&0.0)
    }
}

/// Per-variable mean and (population) standard deviation over all KB values.
/// Used only for retrieval-space normalization and reporting; stored values
/// are never mutated.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    pub fn compute(samples: &[RegimeSample], cols: usize) -> ColumnStats {
        let mut mean = vec![0.0; cols];
        let mut std = vec![0.0; cols];
        let n: usize = samples.iter().map(|s| s.values.rows()).sum();
        if n == 0 {
            return ColumnStats { mean, std };
        }
        for s in samples {
            for r in 0..s.values.rows() {
                let row = s.values.row(r);
                for c in 0..cols {
                    mean[c] += row[c];
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for s in samples {
            for r in 0..s.values.rows() {
                let row = s.values.row(r);
                for c in 0..cols {
                    let d = row[c] - mean[c];
                    std[c] += d * d;
                }
            }
        }
        for v in std.iter_mut() {
            *v = (*v / n as f64).sqrt();
        }
        ColumnStats { mean, std }
    }

    /// Divisors for z-scoring; zero-variance columns fall back to 1.0 so flat
    /// sensors pass through unscaled.
    pub fn inv_std(&self) -> Vec<f64> {
        self.std
            .iter()
            .map(|&s| if s > 0.0 { 1.0 / s } else { 1.0 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KbConfig {
    /// Fixed per-KB regime length; mismatched samples are rejected.
    pub regime_len: usize,
    /// Histogram bins for the cached covariate weights; `None` picks the
    /// sample-size heuristic.
    pub mi_bins: Option<usize>,
}

impl Default for KbConfig {
    fn default() -> Self {
        KbConfig {
            regime_len: 18,
            mi_bins: None,
        }
    }
}

/// Single-writer ingestion front. `finalize` computes statistics and the
/// covariate-weight cache exactly once over the final sample set.
pub struct KbBuilder {
    schema: VariableSchema,
    config: KbConfig,
    samples: Vec<RegimeSample>,
    by_path: HashMap<String, usize>,
    truncate_tail: bool,
}

impl KbBuilder {
    pub fn new(schema: VariableSchema, config: KbConfig) -> Self {
        KbBuilder {
            schema,
            config,
            samples: Vec::new(),
            by_path: HashMap::new(),
            truncate_tail: false,
        }
    }

    /// When set, over-long samples keep their trailing `regime_len` rows
    /// instead of being rejected. Off by default: whole regimes only.
    pub fn truncate_tail(mut self, yes: bool) -> Self {
        self.truncate_tail = yes;
        self
    }

    pub fn ingest(
        &mut self,
        path: HierarchicalPath,
        mut values: Matrix,
        mut timestamps: Vec<f64>,
    ) -> Result<()> {
        let key = path.to_string();
        if self.by_path.contains_key(&key) {
            return Err(Error::DuplicatePath(key));
        }
        if values.cols() != self.schema.var_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} has {} variables, schema has {}",
                key,
                values.cols(),
                self.schema.var_count()
            )));
        }
        if timestamps.len() != values.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} has {} timestamps for {} rows",
                key,
                timestamps.len(),
                values.rows()
            )));
        }
        if values.rows() > self.config.regime_len && self.truncate_tail {
            let drop = values.rows() - self.config.regime_len;
            values = values.slice_rows(drop, values.rows());
            timestamps = timestamps[drop..].to_vec();
        }
        if values.rows() != self.config.regime_len {
            return Err(Error::ShapeMismatch(format!(
                "{} has {} rows, KB regime length is {}",
                key,
                values.rows(),
                self.config.regime_len
            )));
        }
        if values.has_non_finite() {
            return Err(Error::NonFiniteValue(key));
        }
        for (i, w) in timestamps.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::NonMonotonicTimestamps { row: i + 1 });
            }
        }
        if timestamps.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteValue(format!("{key} timestamps")));
        }
        self.by_path.insert(key, self.samples.len());
        self.samples.push(RegimeSample {
            path,
            values,
            timestamps,
        });
        Ok(())
    }

    pub fn finalize(self) -> Result<KnowledgeBase> {
        self.finalize_with_cached(None)
    }

    /// Finalize with a precomputed covariate-weight cache (used by the store
    /// loader so the cached values survive a round-trip).
    pub fn finalize_with_cached(self, cached: Option<CovariateWeights>) -> Result<KnowledgeBase> {
        let stats = ColumnStats::compute(&self.samples, self.schema.var_count());
        if !self.samples.is_empty() {
            for (c, s) in stats.std.iter().enumerate() {
                if *s <= 0.0 {
                    log::warn!(
                        "variable {:?} has zero variance across the knowledge base",
                        self.schema.variables()[c].name
                    );
                }
            }
        }
        let covariate_weights = match cached {
            Some(w) => w,
            None if self.samples.is_empty() => CovariateWeights::neutral(&self.schema),
            None => {
                let matrices: Vec<&Matrix> = self.samples.iter().map(|s| &s.values).collect();
                crate::weighting::pooled_covariate_weights(
                    &self.schema,
                    &matrices,
                    self.config.mi_bins,
                )?
            }
        };
        Ok(KnowledgeBase {
            schema: self.schema,
            config: self.config,
            samples: self.samples,
            by_path: self.by_path,
            stats,
            covariate_weights,
        })
    }
}

/// Immutable, finalized knowledge base.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    schema: VariableSchema,
    config: KbConfig,
    samples: Vec<RegimeSample>,
    by_path: HashMap<String, usize>,
    stats: ColumnStats,
    covariate_weights: CovariateWeights,
}

impl KnowledgeBase {
    pub fn builder(schema: VariableSchema, config: KbConfig) -> KbBuilder {
        KbBuilder::new(schema, config)
    }

    /// Functional single-sample ingest: rebuilds statistics and the covariate
    /// weight cache over the updated sample set. Bulk loads should go through
    /// `KbBuilder` instead.
    pub fn ingest_sample(
        self,
        path: HierarchicalPath,
        values: Matrix,
        timestamps: Vec<f64>,
    ) -> Result<KnowledgeBase> {
        let mut builder = KbBuilder {
            schema: self.schema,
            config: self.config,
            samples: self.samples,
            by_path: self.by_path,
            truncate_tail: false,
        };
        builder.ingest(path, values, timestamps)?;
        builder.finalize()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn config(&self) -> &KbConfig {
        &self.config
    }

    pub fn stats(&self) -> &ColumnStats {
        &self.stats
    }

    pub fn covariate_weights(&self) -> &CovariateWeights {
        &self.covariate_weights
    }

    pub fn samples(&self) -> &[RegimeSample] {
        &self.samples
    }

    pub fn get(&self, path: &HierarchicalPath) -> Option<&RegimeSample> {
        self.by_path
            .get(&path.to_string())
            .map(|&i| &self.samples[i])
    }

    /// Samples whose path begins with `prefix`, in ingestion order. An empty
    /// prefix selects everything.
    pub fn filter_scope(&self, prefix: &[String]) -> KbView<'_> {
        let indices = (0..self.samples.len())
            .filter(|&i| self.samples[i].path.starts_with(prefix))
            .collect();
        KbView { kb: self, indices }
    }
}

/// Order-stable candidate view over a knowledge base.
#[derive(Debug, Clone)]
pub struct KbView<'a> {
    kb: &'a KnowledgeBase,
    indices: Vec<usize>,
}

impl<'a> KbView<'a> {
    pub fn kb(&self) -> &'a KnowledgeBase {
        self.kb
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn sample(&self, i: usize) -> &'a RegimeSample {
        &self.kb.samples[self.indices[i]]
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a RegimeSample> + '_ {
        self.indices.iter().map(move |&i| &self.kb.samples[i])
    }

    /// Narrow the view further, preserving order.
    pub fn filter<F: Fn(&RegimeSample) -> bool>(&self, keep: F) -> KbView<'a> {
        KbView {
            kb: self.kb,
            indices: self
                .indices
                .iter()
                .copied()
                .filter(|&i| keep(&self.kb.samples[i]))
                .collect(),
        }
    }
}
