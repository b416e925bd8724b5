//! Two-stage bi-weighted retrieval: a weighted cosine shape filter over the
//! whole candidate view, then weighted point-wise distance ranking of the
//! survivors.
//!
//! All scores are computed in KB-normalized space: the query is z-scored at
//! construction and candidates are z-scored on the fly with the same column
//! statistics, so cross-variable sums compare commensurate scales. Raw stored
//! values are never touched.
//!
//! Determinism contract: per-candidate scores are computed independently in a
//! fixed element order, the reduction is a sort on (score, path), and ties
//! break on lexicographically smaller path. Thread count cannot change the
//! result.

use crate::error::{Error, Result};
use crate::kb::{ColumnStats, HierarchicalPath, KbView, RegimeSample};
use crate::matrix::Matrix;
use crate::par::{self, PARALLEL_THRESHOLD};
use crate::schema::VariableSchema;
use crate::weighting::FusedWeights;

/// A forecasting query: observed history for every variable plus known
/// future covariates. Future-target cells are filled with an inert value
/// (their retrieval weight is 0). The query carries the column statistics it
/// was normalized with; candidate scoring uses the same statistics.
#[derive(Debug, Clone)]
pub struct Query {
    history: Matrix,
    future_covariates: Matrix,
    assembled: Matrix,
    normalized: Matrix,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Query {
    pub fn new(
        history: Matrix,
        future_covariates: Matrix,
        schema: &VariableSchema,
        stats: &ColumnStats,
    ) -> Result<Query> {
        Query::new_with_fill(history, future_covariates, schema, stats, 0.0)
    }

    /// Diagnostic constructor exposing the masked-cell fill value; any finite
    /// fill must produce identical retrieval scores (tested).
    pub fn new_with_fill(
        history: Matrix,
        future_covariates: Matrix,
        schema: &VariableSchema,
        stats: &ColumnStats,
        fill: f64,
    ) -> Result<Query> {
        let v = schema.var_count();
        if history.cols() != v {
            return Err(Error::ShapeMismatch(format!(
                "query history has {} variables, schema has {v}",
                history.cols()
            )));
        }
        let cov_idx = schema.covariate_indices();
        if future_covariates.cols() != cov_idx.len() {
            return Err(Error::ShapeMismatch(format!(
                "query future covariates have {} columns, schema has {} covariates",
                future_covariates.cols(),
                cov_idx.len()
            )));
        }
        if history.rows() == 0 || future_covariates.rows() == 0 {
            return Err(Error::InvalidConfig("empty query window".into()));
        }
        if history.has_non_finite() || future_covariates.has_non_finite() || !fill.is_finite() {
            return Err(Error::NonFiniteValue("query".into()));
        }
        if stats.mean.len() != v || stats.std.len() != v {
            return Err(Error::DimensionMismatch(
                "column statistics do not match schema".into(),
            ));
        }
        let h = history.rows();
        let horizon = future_covariates.rows();
        let mut assembled = Matrix::zeros(h + horizon, v);
        for r in 0..h {
            for c in 0..v {
                assembled.set(r, c, history.get(r, c));
            }
        }
        for r in 0..horizon {
            assembled.set(h + r, schema.target_index(), fill);
            for (j, &c) in cov_idx.iter().enumerate() {
                assembled.set(h + r, c, future_covariates.get(r, j));
            }
        }
        let mean = stats.mean.clone();
        let inv_std = stats.inv_std();
        let mut normalized = Matrix::zeros(h + horizon, v);
        for r in 0..h + horizon {
            for c in 0..v {
                normalized.set(r, c, (assembled.get(r, c) - mean[c]) * inv_std[c]);
            }
        }
        Ok(Query {
            history,
            future_covariates,
            assembled,
            normalized,
            mean,
            inv_std,
        })
    }

    /// Split a full stored regime into a query plus its ground-truth future
    /// target values.
    pub fn from_sample(
        sample: &RegimeSample,
        schema: &VariableSchema,
        stats: &ColumnStats,
        history_len: usize,
    ) -> Result<(Query, Vec<f64>)> {
        let rows = sample.values.rows();
        if history_len == 0 || history_len >= rows {
            return Err(Error::InvalidConfig(format!(
                "history length {history_len} against regime of {rows} rows"
            )));
        }
        let history = sample.values.slice_rows(0, history_len);
        let cov_idx = schema.covariate_indices();
        let horizon = rows - history_len;
        let mut fc = Matrix::zeros(horizon, cov_idx.len());
        let mut truth = Vec::with_capacity(horizon);
        for r in 0..horizon {
            truth.push(sample.values.get(history_len + r, schema.target_index()));
            for (j, &c) in cov_idx.iter().enumerate() {
                fc.set(r, j, sample.values.get(history_len + r, c));
            }
        }
        let query = Query::new(history, fc, schema, stats)?;
        Ok((query, truth))
    }

    pub fn history(&self) -> &Matrix {
        &self.history
    }

    pub fn future_covariates(&self) -> &Matrix {
        &self.future_covariates
    }

    pub fn assembled(&self) -> &Matrix {
        &self.assembled
    }

    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }

    pub fn history_len(&self) -> usize {
        self.history.rows()
    }

    pub fn horizon(&self) -> usize {
        self.future_covariates.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalEntry {
    pub path: HierarchicalPath,
    pub stage1_score: f64,
    pub stage2_distance: f64,
    pub rank: usize,
}

/// Ordered Top-K retrieval output; stage-2 distance is non-decreasing with
/// rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub entries: Vec<RetrievalEntry>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.path.to_string()).collect()
    }
}

/// Weighted cosine similarity between two equal-shape matrices. Zero weighted
/// norm on either side yields 0 (neutral), so all-flat candidates sink
/// instead of erroring.
pub fn weighted_cosine(q: &Matrix, c: &Matrix, w: &FusedWeights) -> Result<f64> {
    check_shapes(q, c, w)?;
    let (mut dot, mut qn, mut cn) = (0.0, 0.0, 0.0);
    let wd = w.matrix().data();
    let qd = q.data();
    let cd = c.data();
    for i in 0..wd.len() {
        let wi = wd[i];
        dot += wi * qd[i] * cd[i];
        qn += wi * qd[i] * qd[i];
        cn += wi * cd[i] * cd[i];
    }
    if qn == 0.0 || cn == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (qn.sqrt() * cn.sqrt())).clamp(-1.0, 1.0))
}

/// Weighted point-wise distance: sqrt of the weighted sum of squared
/// differences over every cell.
pub fn weighted_mp_distance(q: &Matrix, c: &Matrix, w: &FusedWeights) -> Result<f64> {
    check_shapes(q, c, w)?;
    let wd = w.matrix().data();
    let qd = q.data();
    let cd = c.data();
    let mut acc = 0.0;
    for i in 0..wd.len() {
        let d = qd[i] - cd[i];
        acc += wd[i] * d * d;
    }
    Ok(acc.sqrt())
}

fn check_shapes(q: &Matrix, c: &Matrix, w: &FusedWeights) -> Result<()> {
    if q.rows() != c.rows()
        || q.cols() != c.cols()
        || q.rows() != w.rows()
        || q.cols() != w.cols()
    {
        return Err(Error::ShapeMismatch(format!(
            "query {}x{}, candidate {}x{}, weights {}x{}",
            q.rows(),
            q.cols(),
            c.rows(),
            c.cols(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// Z-score a matrix with the given column statistics.
pub fn normalize_matrix(m: &Matrix, stats: &ColumnStats) -> Matrix {
    let inv = stats.inv_std();
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.set(r, c, (m.get(r, c) - stats.mean[c]) * inv[c]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMetric {
    /// Higher is better.
    WeightedCosine,
    /// Lower is better.
    WeightedDistance,
}

#[derive(Debug, Clone, Copy)]
pub struct StageSpec<'a> {
    pub metric: StageMetric,
    pub weights: &'a FusedWeights,
}

/// The primary retrieval operation: weighted-cosine stage 1 keeps the
/// `stage1_multiplier * k` best-shaped candidates, weighted distance ranks
/// them, and the k smallest distances come back in order.
pub fn retrieve(
    query: &Query,
    view: &KbView<'_>,
    weights: &FusedWeights,
    k: usize,
    stage1_multiplier: usize,
) -> Result<RetrievalResult> {
    retrieve_staged(
        query,
        view,
        StageSpec {
            metric: StageMetric::WeightedCosine,
            weights,
        },
        Some(StageSpec {
            metric: StageMetric::WeightedDistance,
            weights,
        }),
        k,
        stage1_multiplier,
        true,
    )
}

/// `retrieve` pinned to the no-threading code path. Exists for benchmarks and
/// timed single-threaded runs; output is bit-identical to `retrieve`.
pub fn retrieve_sequential(
    query: &Query,
    view: &KbView<'_>,
    weights: &FusedWeights,
    k: usize,
    stage1_multiplier: usize,
) -> Result<RetrievalResult> {
    retrieve_staged(
        query,
        view,
        StageSpec {
            metric: StageMetric::WeightedCosine,
            weights,
        },
        Some(StageSpec {
            metric: StageMetric::WeightedDistance,
            weights,
        }),
        k,
        stage1_multiplier,
        false,
    )
}

/// Generalized two-stage engine; the ablation harness swaps stage metrics
/// through here. With `stage2 = None` the stage-1 ordering is the final
/// ranking.
pub fn retrieve_staged(
    query: &Query,
    view: &KbView<'_>,
    stage1: StageSpec<'_>,
    stage2: Option<StageSpec<'_>>,
    k: usize,
    stage1_multiplier: usize,
    parallel: bool,
) -> Result<RetrievalResult> {
    if view.is_empty() {
        return Err(Error::EmptyView);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if stage1_multiplier == 0 {
        return Err(Error::InvalidConfig("stage1_multiplier must be at least 1".into()));
    }
    let rows = query.normalized.rows();
    let cols = query.normalized.cols();
    for spec in std::iter::once(&stage1).chain(stage2.as_ref()) {
        if spec.weights.rows() != rows || spec.weights.cols() != cols {
            return Err(Error::ShapeMismatch(format!(
                "weights {}x{} against query {}x{}",
                spec.weights.rows(),
                spec.weights.cols(),
                rows,
                cols
            )));
        }
    }
    let n = view.len();
    let k_eff = if k > n {
        log::warn!("k={k} exceeds view of {n} candidates; returning all {n}");
        n
    } else {
        k
    };

    let min_len = if parallel { PARALLEL_THRESHOLD } else { usize::MAX };
    let positions: Vec<u32> = (0..n as u32).collect();
    let scores1: Vec<f64> = par::map_threshold(&positions, min_len, |&i| {
        score_candidate(query, view.sample(i as usize), stage1)
    });

    let m = stage1_multiplier.saturating_mul(k).min(n);
    let mut order: Vec<u32> = positions;
    order.sort_unstable_by(|&a, &b| {
        stage_cmp(stage1.metric, scores1[a as usize], scores1[b as usize]).then_with(|| {
            view.sample(a as usize)
                .path
                .cmp(&view.sample(b as usize).path)
        })
    });
    order.truncate(m);

    let entries = match stage2 {
        Some(spec2) => {
            let mut scored: Vec<(u32, f64)> = order
                .iter()
                .map(|&i| (i, score_candidate(query, view.sample(i as usize), spec2)))
                .collect();
            scored.sort_unstable_by(|a, b| {
                stage_cmp(spec2.metric, a.1, b.1)
                    .then_with(|| view.sample(a.0 as usize).path.cmp(&view.sample(b.0 as usize).path))
            });
            scored
                .into_iter()
                .take(k_eff)
                .enumerate()
                .map(|(rank, (i, s2))| RetrievalEntry {
                    path: view.sample(i as usize).path.clone(),
                    stage1_score: scores1[i as usize],
                    stage2_distance: s2,
                    rank: rank + 1,
                })
                .collect()
        }
        None => order
            .into_iter()
            .take(k_eff)
            .enumerate()
            .map(|(rank, i)| {
                let s1 = scores1[i as usize];
                RetrievalEntry {
                    path: view.sample(i as usize).path.clone(),
                    stage1_score: s1,
                    stage2_distance: match stage1.metric {
                        StageMetric::WeightedDistance => s1,
                        StageMetric::WeightedCosine => 1.0 - s1,
                    },
                    rank: rank + 1,
                }
            })
            .collect(),
    };
    Ok(RetrievalResult { entries })
}

fn stage_cmp(metric: StageMetric, a: f64, b: f64) -> std::cmp::Ordering {
    match metric {
        StageMetric::WeightedCosine => b.total_cmp(&a),
        StageMetric::WeightedDistance => a.total_cmp(&b),
    }
}

/// Score one candidate against the query in normalized space, z-scoring the
/// candidate on the fly. Fixed row-major accumulation order keeps the result
/// independent of scheduling.
fn score_candidate(query: &Query, cand: &RegimeSample, spec: StageSpec<'_>) -> f64 {
    let qn = &query.normalized;
    let w = spec.weights.matrix();
    let mean = &query.mean;
    let inv = &query.inv_std;
    let rows = qn.rows();
    let cols = qn.cols();
    debug_assert_eq!(cand.values.rows(), rows);
    match spec.metric {
        StageMetric::WeightedCosine => {
            let (mut dot, mut qq, mut cc) = (0.0, 0.0, 0.0);
            for r in 0..rows {
                let qrow = qn.row(r);
                let crow = cand.values.row(r);
                let wrow = w.row(r);
                for c in 0..cols {
                    let wi = wrow[c];
                    let cz = (crow[c] - mean[c]) * inv[c];
                    dot += wi * qrow[c] * cz;
                    qq += wi * qrow[c] * qrow[c];
                    cc += wi * cz * cz;
                }
            }
            if qq == 0.0 || cc == 0.0 {
                0.0
            } else {
                (dot / (qq.sqrt() * cc.sqrt())).clamp(-1.0, 1.0)
            }
        }
        StageMetric::WeightedDistance => {
            let mut acc = 0.0;
            for r in 0..rows {
                let qrow = qn.row(r);
                let crow = cand.values.row(r);
                let wrow = w.row(r);
                for c in 0..cols {
                    let cz = (crow[c] - mean[c]) * inv[c];
                    let d = qrow[c] - cz;
                    acc += wrow[c] * d * d;
                }
            }
            acc.sqrt()
        }
    }
}

/// Brute-force reference: exhaustive ranking by weighted distance with no
/// stage-1 pruning (`stage1_multiplier = infinity`). Implemented naively and
/// independently of the engine's scoring loops for differential testing.
pub fn retrieve_exhaustive_oracle(
    query: &Query,
    view: &KbView<'_>,
    weights: &FusedWeights,
    k: usize,
) -> Result<RetrievalResult> {
    if view.is_empty() {
        return Err(Error::EmptyView);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let k_eff = k.min(view.len());
    let w = weights.matrix();
    let rows = query.normalized.rows();
    let cols = query.normalized.cols();
    if w.rows() != rows || w.cols() != cols {
        return Err(Error::ShapeMismatch("weights against query".into()));
    }
    let mut scored: Vec<(f64, f64, &RegimeSample)> = Vec::with_capacity(view.len());
    for sample in view.iter() {
        // Normalize the candidate with the query's statistics.
        let mut cz = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let std = if query.inv_std[c] != 0.0 {
                    1.0 / query.inv_std[c]
                } else {
                    1.0
                };
                cz.set(r, c, (sample.values.get(r, c) - query.mean[c]) / std);
            }
        }
        let mut dot = 0.0;
        let mut qq = 0.0;
        let mut cc = 0.0;
        let mut sq = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let wi = w.get(r, c);
                let qv = query.normalized.get(r, c);
                let cv = cz.get(r, c);
                dot += wi * qv * cv;
                qq += wi * qv * qv;
                cc += wi * cv * cv;
                sq += wi * (qv - cv) * (qv - cv);
            }
        }
        let cosine = if qq == 0.0 || cc == 0.0 {
            0.0
        } else {
            (dot / (qq.sqrt() * cc.sqrt())).clamp(-1.0, 1.0)
        };
        scored.push((sq.sqrt(), cosine, sample));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.2.path.cmp(&b.2.path)));
    let entries = scored
        .into_iter()
        .take(k_eff)
        .enumerate()
        .map(|(rank, (dist, cosine, sample))| RetrievalEntry {
            path: sample.path.clone(),
            stage1_score: cosine,
            stage2_distance: dist,
            rank: rank + 1,
        })
        .collect();
    Ok(RetrievalResult { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{KbBuilder, KbConfig, KnowledgeBase};
    use crate::schema::Variable;
    use crate::weighting::{build_point_weights, fuse_weights, CovariateWeights, PointWeightConfig};

    fn tiny_weights(rows: usize, cols: usize) -> FusedWeights {
        FusedWeights::from_matrix(
            Matrix::from_vec(rows, cols, vec![1.0; rows * cols]).unwrap(),
        )
        .unwrap()
    }

    fn schema3() -> VariableSchema {
        VariableSchema::new(vec![
            Variable::target("MP", "psi"),
            Variable::covariate("IP", "psi"),
            Variable::covariate("N2", "%rpm"),
        ])
        .unwrap()
    }

    fn flat_stats(v: usize) -> ColumnStats {
        ColumnStats {
            mean: vec![0.0; v],
            std: vec![1.0; v],
        }
    }

    #[test]
    fn cosine_examples() {
        let w = tiny_weights(2, 2);
        let q = Matrix::from_rows(vec![vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        assert!((weighted_cosine(&q, &q, &w).unwrap() - 1.0).abs() < 1e-12);
        let neg = Matrix::from_rows(vec![vec![-1.0, -2.0], vec![-0.5, 1.0]]).unwrap();
        assert!((weighted_cosine(&q, &neg, &w).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_hand_case_1x2() {
        // q=[[1,0]], c=[[1,1]], w=[[1,1]] -> 1/sqrt(2). Realized as the
        // history row of a 2-row masking-only window with zeros elsewhere.
        let w = tiny_weights(2, 2);
        let q = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let c = Matrix::from_rows(vec![vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let got = weighted_cosine(&q, &c, &w).unwrap();
        assert!((got - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn cosine_zero_norm_returns_zero() {
        let w = tiny_weights(2, 2);
        let q = Matrix::zeros(2, 2);
        let c = Matrix::from_rows(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(weighted_cosine(&q, &c, &w).unwrap(), 0.0);
    }

    #[test]
    fn distance_examples() {
        let w = tiny_weights(2, 2);
        let q = Matrix::from_rows(vec![vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(weighted_mp_distance(&q, &q, &w).unwrap(), 0.0);
        let c = Matrix::from_rows(vec![vec![3.0, 4.0], vec![1.0, 2.0]]).unwrap();
        assert!((weighted_mp_distance(&q, &c, &w).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn distance_zero_weights_absorb_everything() {
        let w = FusedWeights::from_matrix(Matrix::zeros(2, 2)).unwrap();
        let q = Matrix::zeros(2, 2);
        let c = Matrix::from_rows(vec![vec![3.0, -8.0], vec![1e9, 2.0]]).unwrap();
        assert_eq!(weighted_mp_distance(&q, &c, &w).unwrap(), 0.0);
    }

    #[test]
    fn distance_shape_mismatch() {
        let w = tiny_weights(2, 2);
        let q = Matrix::zeros(2, 2);
        let c = Matrix::zeros(3, 2);
        assert!(weighted_mp_distance(&q, &c, &w).is_err());
    }

    #[test]
    fn cosine_scale_behavior() {
        let w = tiny_weights(3, 2);
        let q = Matrix::from_rows(vec![vec![1.0, 2.0], vec![0.2, -0.4], vec![1.5, 0.1]]).unwrap();
        let c = Matrix::from_rows(vec![vec![0.9, 1.7], vec![0.1, -0.3], vec![1.2, 0.2]]).unwrap();
        let base = weighted_cosine(&q, &c, &w).unwrap();
        for alpha in [2.5, -3.0, 0.1] {
            let scaled = Matrix::from_vec(
                3,
                2,
                c.data().iter().map(|v| v * alpha).collect(),
            )
            .unwrap();
            let got = weighted_cosine(&q, &scaled, &w).unwrap();
            assert!((got - alpha.signum() * base).abs() < 1e-12);
        }
    }

    // --- engine tests over a real KB ---

    fn build_kb(n: usize, seed: u64) -> KnowledgeBase {
        let schema = schema3();
        let mut b = KbBuilder::new(schema, KbConfig { regime_len: 18, mi_bins: Some(4) });
        let mut state = seed;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for i in 0..n {
            let mut rows = Vec::new();
            for r in 0..18 {
                let ip = 10.0 + 30.0 * next();
                let n2 = 60.0 + 35.0 * next();
                let mp = 0.7 * ip + 0.05 * n2 + 0.5 * next() + r as f64 * 0.01;
                rows.push(vec![mp, ip, n2]);
            }
            let ts: Vec<f64> = (0..18).map(|t| i as f64 * 100.0 + t as f64 * 0.5).collect();
            b.ingest(
                HierarchicalPath::parse(&format!("B777/tail{:03}/takeoff/f{i:05}", i % 7)).unwrap(),
                Matrix::from_rows(rows).unwrap(),
                ts,
            )
            .unwrap();
        }
        b.finalize().unwrap()
    }

    fn default_weights(kb: &KnowledgeBase) -> FusedWeights {
        let point =
            build_point_weights(&PointWeightConfig::new(12, 6, 0.95), kb.schema(), 18).unwrap();
        fuse_weights(&point, kb.covariate_weights()).unwrap()
    }

    fn query_for(kb: &KnowledgeBase, idx: usize) -> (Query, Vec<f64>) {
        Query::from_sample(&kb.samples()[idx], kb.schema(), kb.stats(), 12).unwrap()
    }

    #[test]
    fn exact_match_dominates() {
        let kb = build_kb(50, 7);
        let w = default_weights(&kb);
        let (q, _) = query_for(&kb, 13);
        let view = kb.filter_scope(&[]);
        let res = retrieve(&q, &view, &w, 3, 10).unwrap();
        assert_eq!(res.entries[0].path, kb.samples()[13].path);
        assert!(res.entries[0].stage2_distance < 1e-9);
        // Masked future-target differences cannot push it off rank 1 even
        // though the query's masked cells hold zeros, not the true future.
    }

    #[test]
    fn no_pruning_equals_oracle() {
        let kb = build_kb(200, 11);
        let w = default_weights(&kb);
        let view = kb.filter_scope(&[]);
        for idx in [0, 57, 199] {
            let (q, _) = query_for(&kb, idx);
            let a = retrieve(&q, &view, &w, 5, 1000).unwrap();
            let b = retrieve_exhaustive_oracle(&q, &view, &w, 5).unwrap();
            assert_eq!(a.paths(), b.paths());
            for (x, y) in a.entries.iter().zip(&b.entries) {
                assert!((x.stage2_distance - y.stage2_distance).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn differential_two_stage_brute_force() {
        // Independent naive two-stage recomputation, pruning included.
        let kb = build_kb(1000, 23);
        let w = default_weights(&kb);
        let view = kb.filter_scope(&[]);
        let (k, mult) = (3usize, 10usize);
        for idx in [4, 321, 888] {
            let (q, _) = query_for(&kb, idx);
            let got = retrieve(&q, &view, &w, k, mult).unwrap();

            // Brute force directly from the definitions.
            let mut stage1: Vec<(f64, usize)> = Vec::new();
            for (i, s) in view.iter().enumerate() {
                let cn = normalize_matrix(&s.values, kb.stats());
                let mut dot = 0.0;
                let mut a = 0.0;
                let mut b = 0.0;
                for r in 0..18 {
                    for c in 0..3 {
                        let wi = w.matrix().get(r, c);
                        dot += wi * q.normalized().get(r, c) * cn.get(r, c);
                        a += wi * q.normalized().get(r, c).powi(2);
                        b += wi * cn.get(r, c).powi(2);
                    }
                }
                let cos = if a == 0.0 || b == 0.0 {
                    0.0
                } else {
                    dot / (a.sqrt() * b.sqrt())
                };
                stage1.push((cos, i));
            }
            stage1.sort_by(|x, y| {
                y.0.total_cmp(&x.0)
                    .then_with(|| view.sample(x.1).path.cmp(&view.sample(y.1).path))
            });
            stage1.truncate(mult * k);
            let mut stage2: Vec<(f64, usize)> = stage1
                .iter()
                .map(|&(_, i)| {
                    let cn = normalize_matrix(&view.sample(i).values, kb.stats());
                    let mut acc = 0.0;
                    for r in 0..18 {
                        for c in 0..3 {
                            let d = q.normalized().get(r, c) - cn.get(r, c);
                            acc += w.matrix().get(r, c) * d * d;
                        }
                    }
                    (acc.sqrt(), i)
                })
                .collect();
            stage2.sort_by(|x, y| {
                x.0.total_cmp(&y.0)
                    .then_with(|| view.sample(x.1).path.cmp(&view.sample(y.1).path))
            });
            let expect: Vec<String> = stage2
                .iter()
                .take(k)
                .map(|&(_, i)| view.sample(i).path.to_string())
                .collect();
            assert_eq!(got.paths(), expect);
        }
    }

    #[test]
    fn masked_fill_value_is_inert() {
        let kb = build_kb(80, 3);
        let w = default_weights(&kb);
        let view = kb.filter_scope(&[]);
        let s = &kb.samples()[17];
        let history = s.values.slice_rows(0, 12);
        let cov_idx = kb.schema().covariate_indices();
        let mut fc = Matrix::zeros(6, 2);
        for r in 0..6 {
            for (j, &c) in cov_idx.iter().enumerate() {
                fc.set(r, j, s.values.get(12 + r, c));
            }
        }
        let q0 = Query::new_with_fill(history.clone(), fc.clone(), kb.schema(), kb.stats(), 0.0)
            .unwrap();
        let q9 = Query::new_with_fill(history, fc, kb.schema(), kb.stats(), -971.25).unwrap();
        let a = retrieve(&q0, &view, &w, 5, 10).unwrap();
        let b = retrieve(&q9, &view, &w, 5, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masking_invariance_under_candidate_perturbation() {
        let kb = build_kb(60, 5);
        let w = default_weights(&kb);
        let (q, _) = query_for(&kb, 31);
        let base = retrieve(&q, &kb.filter_scope(&[]), &w, 6, 10).unwrap();

        // Perturb every candidate's future-target cells; rebuild the sample
        // set around the same schema and score with the same query (same
        // normalization space).
        let mut b = KbBuilder::new(kb.schema().clone(), kb.config().clone());
        let mut bump = 1.0;
        for s in kb.samples() {
            let mut v = s.values.clone();
            for r in 12..18 {
                bump = -bump * 1.7;
                v.set(r, 0, v.get(r, 0) + bump * 1e6);
            }
            b.ingest(s.path.clone(), v, s.timestamps.clone()).unwrap();
        }
        let poked = b.finalize().unwrap();
        let res = retrieve(&q, &poked.filter_scope(&[]), &w, 6, 10).unwrap();
        assert_eq!(base, res);
    }

    #[test]
    fn subset_property_stage2_within_stage1() {
        let kb = build_kb(300, 9);
        let w = default_weights(&kb);
        let view = kb.filter_scope(&[]);
        let (q, _) = query_for(&kb, 123);
        let k = 4;
        let mult = 3;
        let res = retrieve(&q, &view, &w, k, mult).unwrap();
        // Recompute the stage-1 selection independently via the public op.
        let mut s1: Vec<(f64, String)> = view
            .iter()
            .map(|s| {
                let cn = normalize_matrix(&s.values, kb.stats());
                (
                    weighted_cosine(q.normalized(), &cn, &w).unwrap(),
                    s.path.to_string(),
                )
            })
            .collect();
        s1.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let keep: Vec<&String> = s1.iter().take(mult * k).map(|(_, p)| p).collect();
        for e in &res.entries {
            assert!(keep.contains(&&e.path.to_string()));
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let kb = build_kb(5000, 71);
        let w = default_weights(&kb);
        let view = kb.filter_scope(&[]);
        let (q, _) = query_for(&kb, 4321);
        let a = retrieve(&q, &view, &w, 12, 10).unwrap();
        let b = retrieve_sequential(&q, &view, &w, 12, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_view_and_k_exceeding_view() {
        let kb = build_kb(5, 2);
        let w = default_weights(&kb);
        let (q, _) = query_for(&kb, 0);
        let empty = kb.filter_scope(&HierarchicalPath::parse_prefix("A320").unwrap());
        assert!(matches!(
            retrieve(&q, &empty, &w, 3, 10),
            Err(Error::EmptyView)
        ));
        let res = retrieve(&q, &kb.filter_scope(&[]), &w, 50, 10).unwrap();
        assert_eq!(res.len(), 5);
    }

    #[test]
    fn ranking_distances_non_decreasing() {
        let kb = build_kb(120, 31);
        let w = default_weights(&kb);
        let (q, _) = query_for(&kb, 60);
        let res = retrieve(&q, &kb.filter_scope(&[]), &w, 12, 10).unwrap();
        for pair in res.entries.windows(2) {
            assert!(pair[0].stage2_distance <= pair[1].stage2_distance);
        }
        let paths = res.paths();
        let mut dedup = paths.clone();
        dedup.dedup();
        assert_eq!(paths.len(), dedup.len());
    }
}
