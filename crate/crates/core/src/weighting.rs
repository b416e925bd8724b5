//! Retrieval weights: per-timestamp critical-point weights with exponential
//! history decay, mutual-information covariate weights, and their fused
//! element-wise product.
//!
//! History rows get weight `decay^(history_len - t)` on every variable
//! (1-based t, so the newest history row has weight 1). Future rows carry
//! weight 1 on covariates and exactly 0 on the target: retrieval never sees
//! the ground truth stored in a candidate's future.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::schema::{VariableSchema, VarRole};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointWeightConfig {
    pub history_len: usize,
    pub horizon: usize,
    pub decay: f64,
}

impl PointWeightConfig {
    pub fn new(history_len: usize, horizon: usize, decay: f64) -> Self {
        PointWeightConfig {
            history_len,
            horizon,
            decay,
        }
    }

    pub fn total_len(&self) -> usize {
        self.history_len + self.horizon
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPointWeights {
    matrix: Matrix,
}

impl CriticalPointWeights {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

/// Per-variable weights from normalized mutual information with the target.
/// The target entry is exactly 1; covariates are `I(X_v;Y) / max_k I(X_k;Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateWeights {
    pub vector: Vec<f64>,
    /// Raw MI scores in nats; the target entry is unset.
    pub mi_raw: Vec<Option<f64>>,
}

impl CovariateWeights {
    /// All-ones weights: fusing with these leaves point weights unchanged.
    pub fn neutral(schema: &VariableSchema) -> Self {
        CovariateWeights {
            vector: vec![1.0; schema.var_count()],
            mi_raw: vec![None; schema.var_count()],
        }
    }

    /// Normalize raw per-variable MI scores per the covariate-weight rule.
    /// `mi` holds one entry per schema variable; the target entry is ignored.
    pub fn from_raw_mi(schema: &VariableSchema, mi: &[f64]) -> Self {
        let target = schema.target_index();
        let max = schema
            .covariate_indices()
            .iter()
            .map(|&i| mi[i])
            .fold(0.0_f64, f64::max);
        if max <= 0.0 && schema.var_count() > 1 {
            log::warn!("all covariate MI scores are zero; covariate weights set to 0");
        }
        let mut vector = vec![0.0; schema.var_count()];
        let mut mi_raw = vec![None; schema.var_count()];
        for i in 0..schema.var_count() {
            if i == target {
                vector[i] = 1.0;
            } else {
                mi_raw[i] = Some(mi[i]);
                vector[i] = if max > 0.0 { mi[i] / max } else { 0.0 };
            }
        }
        CovariateWeights { vector, mi_raw }
    }
}

/// The fused L x V retrieval weight matrix (point weights times the
/// broadcast covariate vector).
#[derive(Debug, Clone, PartialEq)]
pub struct FusedWeights {
    matrix: Matrix,
}

impl FusedWeights {
    /// Wrap an explicit weight matrix. Entries must be finite and
    /// nonnegative; normal construction goes through `fuse_weights`.
    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        if matrix.data().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "weights must be finite and nonnegative".into(),
            ));
        }
        Ok(FusedWeights { matrix })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    /// CSV export (rows = time steps, columns = variables) for inspection.
    pub fn to_csv_string(&self, schema: &VariableSchema) -> String {
        let mut out = String::from("t");
        for name in schema.names() {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for r in 0..self.matrix.rows() {
            out.push_str(&(r + 1).to_string());
            for c in 0..self.matrix.cols() {
                out.push(',');
                out.push_str(&crate::matrix::format_value(self.matrix.get(r, c)));
            }
            out.push('\n');
        }
        out
    }
}

/// Build the critical-point weight matrix for one regime window.
pub fn build_point_weights(
    config: &PointWeightConfig,
    schema: &VariableSchema,
    regime_len: usize,
) -> Result<CriticalPointWeights> {
    if !(config.decay > 0.0 && config.decay <= 1.0) {
        return Err(Error::InvalidDecay(config.decay));
    }
    if config.history_len == 0 || config.horizon == 0 || config.total_len() != regime_len {
        return Err(Error::LengthMismatch(format!(
            "history {} + horizon {} must equal regime length {}",
            config.history_len, config.horizon, regime_len
        )));
    }
    let cols = schema.var_count();
    let mut m = Matrix::zeros(regime_len, cols);
    for row in 0..regime_len {
        let t = row + 1;
        if t <= config.history_len {
            let w = config.decay.powi((config.history_len - t) as i32);
            for c in 0..cols {
                m.set(row, c, w);
            }
        } else {
            for (c, var) in schema.variables().iter().enumerate() {
                let w = match var.role {
                    VarRole::Covariate => 1.0,
                    VarRole::Target => 0.0,
                };
                m.set(row, c, w);
            }
        }
    }
    Ok(CriticalPointWeights { matrix: m })
}

/// Masking-only weights: decay 1 and unit covariate weights. This is both the
/// "uniform" weighting scheme and the weight matrix behind the plain
/// Euclidean retrieval metric.
pub fn masking_only_weights(
    history_len: usize,
    horizon: usize,
    schema: &VariableSchema,
) -> Result<FusedWeights> {
    let point = build_point_weights(
        &PointWeightConfig::new(history_len, horizon, 1.0),
        schema,
        history_len + horizon,
    )?;
    fuse_weights(&point, &CovariateWeights::neutral(schema))
}

/// Histogram bin-count heuristic for n pooled points: ceil(sqrt(n/5)),
/// clamped to [2, 32].
pub fn default_bins(n: usize) -> usize {
    let b = ((n as f64) / 5.0).sqrt().ceil() as usize;
    b.clamp(2, 32)
}

/// Mutual information of two sequences in nats, estimated on an equal-width
/// 2-D histogram with `bins` cells per axis. A constant sequence carries no
/// information and yields 0 rather than an error.
pub fn estimate_mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(format!(
            "sequences of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("bins must be positive".into()));
    }
    if x.len() < 2 * bins {
        return Err(Error::InvalidConfig(format!(
            "need at least {} points for {} bins, got {}",
            2 * bins,
            bins,
            x.len()
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("MI input".into()));
    }
    let (xmin, xmax) = min_max(x);
    let (ymin, ymax) = min_max(y);
    if xmax == xmin || ymax == ymin {
        return Ok(0.0);
    }
    let x_scale = bins as f64 / (xmax - xmin);
    let y_scale = bins as f64 / (ymax - ymin);
    let mut joint = vec![0u64; bins * bins];
    let mut px = vec![0u64; bins];
    let mut py = vec![0u64; bins];
    for (&xv, &yv) in x.iter().zip(y) {
        let bx = (((xv - xmin) * x_scale) as usize).min(bins - 1);
        let by = (((yv - ymin) * y_scale) as usize).min(bins - 1);
        joint[bx * bins + by] += 1;
        px[bx] += 1;
        py[by] += 1;
    }
    let n = x.len() as f64;
    let mut mi = 0.0;
    for bx in 0..bins {
        for by in 0..bins {
            let c = joint[bx * bins + by];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            let marg = (px[bx] as f64 / n) * (py[by] as f64 / n);
            mi += pxy * (pxy / marg).ln();
        }
    }
    // Clamp floating-point underflow; MI is nonnegative by definition.
    Ok(mi.max(0.0))
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in xs {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Pool every sample's (covariate, target) point pairs into one global MI
/// estimate per covariate, then normalize. This is what the KB caches at
/// finalize time.
pub fn pooled_covariate_weights(
    schema: &VariableSchema,
    matrices: &[&Matrix],
    bins: Option<usize>,
) -> Result<CovariateWeights> {
    pooled_covariate_weights_masked(schema, matrices, bins, None)
}

/// As `pooled_covariate_weights`, but covariates not marked available get
/// weight 0 and are excluded from normalization.
pub fn pooled_covariate_weights_masked(
    schema: &VariableSchema,
    matrices: &[&Matrix],
    bins: Option<usize>,
    available: Option<&[bool]>,
) -> Result<CovariateWeights> {
    if matrices.is_empty() {
        return Err(Error::EmptyKb);
    }
    let target = schema.target_index();
    let n_points: usize = matrices.iter().map(|m| m.rows()).sum();
    let bins = bins.unwrap_or_else(|| default_bins(n_points));
    let mut y = Vec::with_capacity(n_points);
    for m in matrices {
        for r in 0..m.rows() {
            y.push(m.get(r, target));
        }
    }
    let mut mi = vec![0.0; schema.var_count()];
    for v in schema.covariate_indices() {
        if let Some(avail) = available {
            if !avail[v] {
                continue;
            }
        }
        let mut x = Vec::with_capacity(n_points);
        for m in matrices {
            for r in 0..m.rows() {
                x.push(m.get(r, v));
            }
        }
        mi[v] = estimate_mutual_information(&x, &y, bins)?;
    }
    let mut weights = CovariateWeights::from_raw_mi(schema, &mi);
    if let Some(avail) = available {
        for (v, ok) in avail.iter().enumerate() {
            if !ok && v != target {
                weights.vector[v] = 0.0;
                weights.mi_raw[v] = None;
            }
        }
    }
    Ok(weights)
}

/// Public operation mirroring the pooled computation over a finalized KB.
pub fn build_covariate_weights(
    kb: &crate::kb::KnowledgeBase,
    bins: Option<usize>,
) -> Result<CovariateWeights> {
    if kb.is_empty() {
        return Err(Error::EmptyKb);
    }
    let matrices: Vec<&Matrix> = kb.samples().iter().map(|s| &s.values).collect();
    pooled_covariate_weights(kb.schema(), &matrices, bins)
}

/// Element-wise product of the point matrix with the broadcast covariate
/// vector.
pub fn fuse_weights(
    point: &CriticalPointWeights,
    cov: &CovariateWeights,
) -> Result<FusedWeights> {
    let m = point.matrix();
    if cov.vector.len() != m.cols() {
        return Err(Error::DimensionMismatch(format!(
            "covariate vector of length {} for {} columns",
            cov.vector.len(),
            m.cols()
        )));
    }
    let mut fused = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            fused.set(r, c, m.get(r, c) * cov.vector[c]);
        }
    }
    Ok(FusedWeights { matrix: fused })
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

    #[test]
    fn unit_decay_gives_all_ones_history() {
        let w = build_point_weights(&PointWeightConfig::new(12, 6, 1.0), &schema(), 18).unwrap();
        for r in 0..12 {
            for c in 0..3 {
                assert_eq!(w.matrix().get(r, c), 1.0);
            }
        }
    }

    #[test]
    fn history_decay_matches_direct_exponentiation() {
        let w = build_point_weights(&PointWeightConfig::new(3, 2, 0.9), &schema(), 5).unwrap();
        let expected = [0.81, 0.9, 1.0];
        for (r, e) in expected.iter().enumerate() {
            for c in 0..3 {
                assert!((w.matrix().get(r, c) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn future_rows_mask_target_and_keep_covariates() {
        let w = build_point_weights(&PointWeightConfig::new(12, 6, 0.95), &schema(), 18).unwrap();
        for r in 12..18 {
            assert_eq!(w.matrix().get(r, 0), 0.0); // target
            assert_eq!(w.matrix().get(r, 1), 1.0);
            assert_eq!(w.matrix().get(r, 2), 1.0);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(
            build_point_weights(&PointWeightConfig::new(12, 6, 0.0), &schema(), 18),
            Err(Error::InvalidDecay(_))
        ));
        assert!(matches!(
            build_point_weights(&PointWeightConfig::new(12, 6, 1.5), &schema(), 18),
            Err(Error::InvalidDecay(_))
        ));
        assert!(matches!(
            build_point_weights(&PointWeightConfig::new(10, 6, 0.9), &schema(), 18),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn mi_of_identical_fair_binary_variable_is_ln2() {
        let x: Vec<f64> = (0..10_000).map(|i| (i % 2) as f64).collect();
        let mi = estimate_mutual_information(&x, &x, 2).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-9, "mi={mi}");
    }

    #[test]
    fn mi_of_independent_sequences_is_near_zero() {
        // x = first half zeros, second half ones; y = x shuffled by a fixed
        // seed, which decorrelates the pairing.
        let n = 10_000;
        let x: Vec<f64> = (0..n).map(|i| if i < n / 2 { 0.0 } else { 1.0 }).collect();
        let mut y = x.clone();
        let mut state: u64 = 0x5EED_CAFE;
        for i in (1..n).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let j = (state % (i as u64 + 1)) as usize;
            y.swap(i, j);
        }
        let mi = estimate_mutual_information(&x, &y, 2).unwrap();
        assert!(mi < 0.01, "mi={mi}");
    }

    #[test]
    fn mi_of_constant_sequence_is_zero() {
        let x = vec![3.3; 100];
        let y: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(estimate_mutual_information(&x, &y, 4).unwrap(), 0.0);
    }

    #[test]
    fn mi_rejects_mismatched_lengths_and_short_input() {
        assert!(matches!(
            estimate_mutual_information(&[1.0, 2.0], &[1.0], 1),
            Err(Error::LengthMismatch(_))
        ));
        assert!(estimate_mutual_information(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn covariate_weights_identify_the_coupled_covariate() {
        // IP equals MP exactly; N2 is independent noise.
        let schema = schema();
        let mut state: u64 = 99;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut mats = Vec::new();
        for _ in 0..600 {
            let mut rows = Vec::new();
            for _ in 0..18 {
                let mp = next() * 10.0;
                rows.push(vec![mp, mp, next() * 10.0]);
            }
            mats.push(Matrix::from_rows(rows).unwrap());
        }
        let refs: Vec<&Matrix> = mats.iter().collect();
        let w = pooled_covariate_weights(&schema, &refs, None).unwrap();
        assert_eq!(w.vector[0], 1.0);
        assert_eq!(w.vector[1], 1.0);
        assert!(w.vector[2] < 0.05, "noise weight {}", w.vector[2]);
    }

    #[test]
    fn single_covariate_self_normalizes_to_one() {
        let schema = VariableSchema::new(vec![
            Variable::target("MP", ""),
            Variable::covariate("IP", ""),
        ])
        .unwrap();
        let rows: Vec<Vec<f64>> = (0..18).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let m = Matrix::from_rows(rows).unwrap();
        let w = pooled_covariate_weights(&schema, &[&m], None).unwrap();
        assert_eq!(w.vector, vec![1.0, 1.0]);
    }

    #[test]
    fn normalization_is_log_base_invariant() {
        let schema = schema();
        let mi_nats = [0.0, 0.9, 0.3];
        let mi_bits: Vec<f64> = mi_nats.iter().map(|m| m / std::f64::consts::LN_2).collect();
        let a = CovariateWeights::from_raw_mi(&schema, &mi_nats);
        let b = CovariateWeights::from_raw_mi(&schema, &mi_bits);
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_mi_yields_zero_covariate_weights() {
        let w = CovariateWeights::from_raw_mi(&schema(), &[0.0, 0.0, 0.0]);
        assert_eq!(w.vector, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn fuse_identity_and_absorbing_zero() {
        let schema = schema();
        let point = build_point_weights(&PointWeightConfig::new(2, 1, 0.9), &schema, 3).unwrap();
        let fused = fuse_weights(&point, &CovariateWeights::neutral(&schema)).unwrap();
        assert_eq!(fused.matrix(), point.matrix());
        // Future-target row is zero regardless of covariate weight.
        let cov = CovariateWeights::from_raw_mi(&schema, &[0.0, 0.8, 0.4]);
        let fused = fuse_weights(&point, &cov).unwrap();
        assert_eq!(fused.matrix().get(2, 0), 0.0);
    }

    #[test]
    fn fuse_hand_multiplied_row() {
        let schema = schema();
        let point = build_point_weights(&PointWeightConfig::new(2, 1, 0.9), &schema, 3).unwrap();
        let cov = CovariateWeights {
            vector: vec![1.0, 0.5, 0.25],
            mi_raw: vec![None, Some(1.0), Some(0.5)],
        };
        let fused = fuse_weights(&point, &cov).unwrap();
        let row = fused.matrix().row(0); // t=1, weight 0.9
        assert!((row[0] - 0.9).abs() < 1e-15);
        assert!((row[1] - 0.45).abs() < 1e-15);
        assert!((row[2] - 0.225).abs() < 1e-15);
    }

    #[test]
    fn fuse_rejects_dimension_mismatch() {
        let schema = schema();
        let point = build_point_weights(&PointWeightConfig::new(2, 1, 0.9), &schema, 3).unwrap();
        let cov = CovariateWeights {
            vector: vec![1.0, 0.5],
            mi_raw: vec![None, Some(1.0)],
        };
        assert!(matches!(
            fuse_weights(&point, &cov),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn decay_monotonicity() {
        let w = build_point_weights(&PointWeightConfig::new(12, 6, 0.8), &schema(), 18).unwrap();
        for r in 1..12 {
            assert!(w.matrix().get(r, 0) > w.matrix().get(r - 1, 0));
        }
    }
}
