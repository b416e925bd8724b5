//! Experiment harness: temporal dataset splits, the per-query pipeline, the
//! ablation suites, and the end-to-end alerting run.
//!
//! Every table cell is reproducible bit-identically from (seed, config):
//! query selection is seeded, per-query work is order-independent, and
//! aggregation runs in a fixed order regardless of thread count.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augmentation::{
    augmented_forecast, calibrate_k, forecast_with_top_k, AgentCalibration, AugmentConfig,
    ChainOrder,
};
use crate::error::{Error, Result};
use crate::forecaster::{
    build_forecaster, normalized_loss, BackendSpec, Forecaster, LossMetric,
};
use crate::kb::{KbBuilder, KbConfig, KbView, KnowledgeBase, RegimeSample};
use crate::maintenance::{
    calibrate_policy, score_flight, DeviationRecord, PrecursorAlert, PrecursorDetector,
    PrecursorPolicy, SECONDS_PER_DAY,
};
use crate::par;
use crate::retrieval::{retrieve_staged, Query, StageMetric, StageSpec};
use crate::schema::VariableSchema;
use crate::store;
use crate::synth::{Fleet, SynthRng};
use crate::weighting::{
    build_point_weights, fuse_weights, pooled_covariate_weights_masked, CovariateWeights,
    FusedWeights, PointWeightConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    Uniform,
    Point,
    Fused,
}

impl FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightScheme::Uniform),
            "point" => Ok(WeightScheme::Point),
            "fused" => Ok(WeightScheme::Fused),
            other => Err(Error::InvalidConfig(format!("unknown scheme {other:?}"))),
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightScheme::Uniform => write!(f, "uniform"),
            WeightScheme::Point => write!(f, "point"),
            WeightScheme::Fused => write!(f, "fused"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub history_len: usize,
    pub horizon: usize,
    pub decay: f64,
    pub mi_bins: Option<usize>,
    pub k: usize,
    pub stage1_multiplier: usize,
    pub backend: BackendSpec,
    pub metric: LossMetric,
    pub include_zero_context: bool,
    pub chain_order: ChainOrder,
    pub scheme: WeightScheme,
    /// Scope prefix applied to every candidate view.
    pub scope: Vec<String>,
    /// Covariates visible to retrieval and backends; `None` means all.
    pub covariates: Option<Vec<String>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            history_len: 12,
            horizon: 6,
            decay: 0.95,
            mi_bins: None,
            k: 12,
            stage1_multiplier: 10,
            backend: BackendSpec::NearestContext,
            metric: LossMetric::Mse,
            include_zero_context: false,
            chain_order: ChainOrder::NearestLast,
            scheme: WeightScheme::Fused,
            scope: Vec::new(),
            covariates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seed: u64,
    pub queries: usize,
    pub kb_fraction: f64,
    pub healthy_kb_only: bool,
    pub pipeline: PipelineConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 42,
            queries: 200,
            kb_fraction: 0.7,
            healthy_kb_only: true,
            pipeline: PipelineConfig::default(),
        }
    }
}

/// One held-out flight with its ground truth and health label.
#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub sample: RegimeSample,
    pub device: String,
    pub start: f64,
    pub end: f64,
    pub faulty: bool,
}

pub struct EvalDataset {
    pub kb: KnowledgeBase,
    pub queries: Vec<EvalQuery>,
}

/// Split an in-memory fleet into a finalized KB and a query pool.
pub fn dataset_from_fleet(fleet: &Fleet, cfg: &EvalConfig) -> Result<EvalDataset> {
    let (kb_flights, query_flights) = fleet.split(cfg.kb_fraction, cfg.healthy_kb_only);
    let mut builder = KbBuilder::new(
        fleet.schema.clone(),
        KbConfig {
            regime_len: fleet.config.regime_len,
            mi_bins: cfg.pipeline.mi_bins,
        },
    );
    for f in kb_flights {
        builder.ingest(f.path.clone(), f.values.clone(), f.timestamps.clone())?;
    }
    let kb = builder.finalize()?;
    let queries = query_flights
        .into_iter()
        .map(|f| EvalQuery {
            sample: f.to_sample(),
            device: f.path.device_prefix(),
            start: f.timestamps[0],
            end: *f.timestamps.last().expect("non-empty"),
            faulty: f.faulty,
        })
        .collect();
    Ok(EvalDataset { kb, queries })
}

/// Split a stored fleet (full store plus `labels.csv`) the same way.
pub fn dataset_from_store(root: &Path, cfg: &EvalConfig) -> Result<EvalDataset> {
    let full = store::load_kb(root)?;
    let labels = store::read_labels(root)?;
    let mut device_counts: HashMap<String, usize> = HashMap::new();
    for s in full.samples() {
        *device_counts.entry(s.path.device_prefix()).or_default() += 1;
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut builder = KbBuilder::new(
        full.schema().clone(),
        KbConfig {
            regime_len: full.config().regime_len,
            mi_bins: cfg.pipeline.mi_bins,
        },
    );
    let mut queries = Vec::new();
    for s in full.samples() {
        let device = s.path.device_prefix();
        let idx = {
            let e = seen.entry(device.clone()).or_default();
            let v = *e;
            *e += 1;
            v
        };
        let cut = (device_counts[&device] as f64 * cfg.kb_fraction).floor() as usize;
        let faulty = labels.get(&s.path.to_string()).copied().unwrap_or(false);
        if idx < cut {
            if !(cfg.healthy_kb_only && faulty) {
                builder.ingest(s.path.clone(), s.values.clone(), s.timestamps.clone())?;
            }
        } else {
            queries.push(EvalQuery {
                sample: s.clone(),
                device,
                start: s.start_time(),
                end: s.end_time(),
                faulty,
            });
        }
    }
    Ok(EvalDataset {
        kb: builder.finalize()?,
        queries,
    })
}

/// Seeded choice of `want` query indices, returned in ascending order.
pub fn select_queries(total: usize, want: usize, seed: u64) -> Vec<usize> {
    if want >= total {
        return (0..total).collect();
    }
    let mut indices: Vec<usize> = (0..total).collect();
    let mut rng = SynthRng::derive(seed, 0x51_u64);
    rng.shuffle(&mut indices);
    let mut chosen = indices[..want].to_vec();
    chosen.sort_unstable();
    chosen
}

fn resolve_available(
    schema: &VariableSchema,
    covariates: &Option<Vec<String>>,
) -> Result<Option<Vec<bool>>> {
    match covariates {
        None => Ok(None),
        Some(names) => {
            let mut mask = vec![false; schema.var_count()];
            mask[schema.target_index()] = true;
            for name in names {
                let idx = schema
                    .index_of(name)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown covariate {name:?}")))?;
                mask[idx] = true;
            }
            Ok(Some(mask))
        }
    }
}

/// Build the weight matrix for one scheme, honoring the covariate mask.
pub fn scheme_weights(
    kb: &KnowledgeBase,
    pipeline: &PipelineConfig,
    scheme: WeightScheme,
    available: &Option<Vec<bool>>,
) -> Result<FusedWeights> {
    let decay = match scheme {
        WeightScheme::Uniform => 1.0,
        _ => pipeline.decay,
    };
    let point = build_point_weights(
        &PointWeightConfig::new(pipeline.history_len, pipeline.horizon, decay),
        kb.schema(),
        kb.config().regime_len,
    )?;
    let cov = match scheme {
        WeightScheme::Uniform | WeightScheme::Point => {
            let mut cov = CovariateWeights::neutral(kb.schema());
            if let Some(mask) = available {
                for (i, ok) in mask.iter().enumerate() {
                    if !ok {
                        cov.vector[i] = 0.0;
                    }
                }
            }
            cov
        }
        WeightScheme::Fused => match available {
            None if pipeline.mi_bins == kb.config().mi_bins => kb.covariate_weights().clone(),
            _ => {
                let matrices: Vec<&crate::matrix::Matrix> =
                    kb.samples().iter().map(|s| &s.values).collect();
                pooled_covariate_weights_masked(
                    kb.schema(),
                    &matrices,
                    pipeline.mi_bins,
                    available.as_deref(),
                )?
            }
        },
    };
    fuse_weights(&point, &cov)
}

/// Candidate view for one query: scope prefix plus exclusion of any KB
/// sample whose timestamp range overlaps the query's.
pub fn candidate_view<'a>(
    kb: &'a KnowledgeBase,
    scope: &[String],
    start: f64,
    end: f64,
) -> KbView<'a> {
    kb.filter_scope(scope)
        .filter(|s| s.end_time() < start || s.start_time() > end)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KSpec {
    Fixed(usize),
    Dynamic,
}

impl fmt::Display for KSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSpec::Fixed(k) => write!(f, "{k}"),
            KSpec::Dynamic => write!(f, "dynamic"),
        }
    }
}

/// Fixed-k rows probed by the context-length tables, capped at the retrieval
/// size, followed by the dynamic row.
pub fn standard_k_rows(max_k: usize) -> Vec<KSpec> {
    let mut rows: Vec<KSpec> = [0usize, 1, 2, 3, 6, 9, 12]
        .into_iter()
        .filter(|&k| k <= max_k)
        .map(KSpec::Fixed)
        .collect();
    rows.push(KSpec::Dynamic);
    rows
}

#[derive(Clone, Copy)]
struct Plan<'w> {
    stage1: StageSpec<'w>,
    stage2: Option<StageSpec<'w>>,
}

fn augment_config(pipeline: &PipelineConfig, available: &Option<Vec<bool>>) -> AugmentConfig {
    AugmentConfig {
        history_len: pipeline.history_len,
        horizon: pipeline.horizon,
        metric: pipeline.metric,
        include_zero_context: pipeline.include_zero_context,
        order: pipeline.chain_order,
        available: available.clone(),
    }
}

/// Losses (normalized MSE and MAE) for each requested context size on one
/// query.
fn run_query(
    kb: &KnowledgeBase,
    plan: Plan<'_>,
    pipeline: &PipelineConfig,
    aug: &AugmentConfig,
    forecaster: &dyn Forecaster,
    q: &EvalQuery,
    kspecs: &[KSpec],
) -> Result<Vec<(f64, f64)>> {
    let (query, truth) = Query::from_sample(&q.sample, kb.schema(), kb.stats(), aug.history_len)?;
    let view = candidate_view(kb, &pipeline.scope, q.start, q.end);
    if view.is_empty() {
        return Err(Error::EmptyView);
    }
    let result = retrieve_staged(
        &query,
        &view,
        plan.stage1,
        plan.stage2,
        pipeline.k,
        pipeline.stage1_multiplier,
        true,
    )?;
    let target = kb.schema().target_index();
    let (t_mean, t_std) = (kb.stats().mean[target], kb.stats().std[target]);
    let mut calibration: Option<AgentCalibration> = None;
    let mut out = Vec::with_capacity(kspecs.len());
    for spec in kspecs {
        let outcome = match spec {
            KSpec::Fixed(k) => {
                forecast_with_top_k(&query, &result, *k, kb, forecaster, None, aug)?
            }
            KSpec::Dynamic => {
                if calibration.is_none() {
                    calibration = Some(calibrate_k(&result, kb, forecaster, aug)?);
                }
                augmented_forecast(
                    &query,
                    &result,
                    calibration.as_ref().expect("set above"),
                    kb,
                    forecaster,
                    None,
                    aug,
                )?
            }
        };
        let mse = normalized_loss(&outcome.prediction, &truth, t_mean, t_std, LossMetric::Mse)?;
        let mae = normalized_loss(&outcome.prediction, &truth, t_mean, t_std, LossMetric::Mae)?;
        out.push((mse, mae));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Weighting,
    Metric,
    KbScope,
    ContextK,
    Covariate,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighting" => Ok(Suite::Weighting),
            "metric" => Ok(Suite::Metric),
            "kb-scope" => Ok(Suite::KbScope),
            "context-k" => Ok(Suite::ContextK),
            "covariate" => Ok(Suite::Covariate),
            other => Err(Error::InvalidConfig(format!("unknown suite {other:?}"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Suite::Weighting => "weighting",
            Suite::Metric => "metric",
            Suite::KbScope => "kb-scope",
            Suite::ContextK => "context-k",
            Suite::Covariate => "covariate",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub suite: Suite,
    pub row_header: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// cells[row][column]
    pub cells: Vec<Vec<Cell>>,
    pub seed: u64,
    pub config_hash: String,
}

impl AblationTable {
    pub fn cell(&self, row: &str, column: &str) -> Option<Cell> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.cells[r][c])
    }

    /// CSV with a provenance comment line, a header row, and canonical
    /// decimal cells.
    pub fn to_csv_string(&self) -> String {
        let mut out = format!("# seed={} config={}\n", self.seed, self.config_hash);
        out.push_str(&self.row_header);
        for col in &self.columns {
            out.push_str(&format!(",{col}_mse,{col}_mae"));
        }
        out.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            out.push_str(row);
            for cell in &self.cells[r] {
                out.push(',');
                out.push_str(&crate::matrix::format_value(cell.mse));
                out.push(',');
                out.push_str(&crate::matrix::format_value(cell.mae));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path, force: bool) -> Result<()> {
        if path.exists() && !force {
            return Err(Error::WouldOverwrite(path.to_path_buf()));
        }
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

fn config_hash(suite: Suite, cfg: &EvalConfig) -> String {
    #[derive(Serialize)]
    struct Hashed<'a> {
        suite: Suite,
        config: &'a EvalConfig,
    }
    let text = serde_json::to_string(&Hashed { suite, config: cfg }).expect("serializable");
    crate::forecaster::sha256_hex(&text)[..12].to_string()
}

fn mean_cells(per_query: &[Vec<(f64, f64)>], n_rows: usize) -> Vec<Cell> {
    let n = per_query.len() as f64;
    (0..n_rows)
        .map(|r| {
            let (mut mse, mut mae) = (0.0, 0.0);
            for q in per_query {
                mse += q[r].0;
                mae += q[r].1;
            }
            Cell {
                mse: mse / n,
                mae: mae / n,
            }
        })
        .collect()
}

/// Run one ablation suite over the dataset. Query selection, per-query
/// scoring, and aggregation are all deterministic per (seed, config).
pub fn run_ablation(suite: Suite, dataset: &EvalDataset, cfg: &EvalConfig) -> Result<AblationTable> {
    let kb = &dataset.kb;
    if kb.is_empty() {
        return Err(Error::EmptyKb);
    }
    if dataset.queries.is_empty() {
        return Err(Error::InvalidConfig("no queries in dataset".into()));
    }
    let selected = select_queries(dataset.queries.len(), cfg.queries, cfg.seed);
    let queries: Vec<&EvalQuery> = selected.iter().map(|&i| &dataset.queries[i]).collect();
    let available = resolve_available(kb.schema(), &cfg.pipeline.covariates)?;
    let aug = augment_config(&cfg.pipeline, &available);
    let hash = config_hash(suite, cfg);

    let table = match suite {
        Suite::Weighting | Suite::ContextK => {
            let kspecs = standard_k_rows(cfg.pipeline.k);
            let schemes: Vec<WeightScheme> = match suite {
                Suite::Weighting => {
                    vec![WeightScheme::Uniform, WeightScheme::Point, WeightScheme::Fused]
                }
                _ => vec![cfg.pipeline.scheme],
            };
            let mut columns = Vec::new();
            let mut per_scheme_cells = Vec::new();
            for scheme in schemes {
                let weights = scheme_weights(kb, &cfg.pipeline, scheme, &available)?;
                let forecaster = build_forecaster(&cfg.pipeline.backend, Some(&weights))?;
                let plan = Plan {
                    stage1: StageSpec {
                        metric: StageMetric::WeightedCosine,
                        weights: &weights,
                    },
                    stage2: Some(StageSpec {
                        metric: StageMetric::WeightedDistance,
                        weights: &weights,
                    }),
                };
                let per_query = par::try_map_threshold(&queries, 2, |q| {
                    run_query(kb, plan, &cfg.pipeline, &aug, forecaster.as_ref(), q, &kspecs)
                })?;
                columns.push(scheme.to_string());
                per_scheme_cells.push(mean_cells(&per_query, kspecs.len()));
            }
            // Transpose scheme-major cells into row-major layout.
            let cells: Vec<Vec<Cell>> = (0..kspecs.len())
                .map(|r| per_scheme_cells.iter().map(|col| col[r]).collect())
                .collect();
            AblationTable {
                suite,
                row_header: "k".into(),
                rows: kspecs.iter().map(|k| k.to_string()).collect(),
                columns,
                cells,
                seed: cfg.seed,
                config_hash: hash,
            }
        }
        Suite::Metric => {
            let fused = scheme_weights(kb, &cfg.pipeline, cfg.pipeline.scheme, &available)?;
            let masking = scheme_weights(kb, &cfg.pipeline, WeightScheme::Uniform, &available)?;
            let forecaster = build_forecaster(&cfg.pipeline.backend, Some(&fused))?;
            fn cos(w: &FusedWeights) -> StageSpec<'_> {
                StageSpec {
                    metric: StageMetric::WeightedCosine,
                    weights: w,
                }
            }
            fn dist(w: &FusedWeights) -> StageSpec<'_> {
                StageSpec {
                    metric: StageMetric::WeightedDistance,
                    weights: w,
                }
            }
            // Euclidean is the distance metric under masking-only weights;
            // matrix-profile distance uses the scheme weights.
            let rows: Vec<(String, Plan)> = vec![
                ("cosine+euclidean".into(), Plan { stage1: cos(&fused), stage2: Some(dist(&masking)) }),
                ("cosine+matrix-profile".into(), Plan { stage1: cos(&fused), stage2: Some(dist(&fused)) }),
                ("euclidean+matrix-profile".into(), Plan { stage1: dist(&masking), stage2: Some(dist(&fused)) }),
                ("cosine".into(), Plan { stage1: cos(&fused), stage2: None }),
                ("euclidean".into(), Plan { stage1: dist(&masking), stage2: None }),
                ("matrix-profile".into(), Plan { stage1: dist(&fused), stage2: None }),
            ];
            let kspecs = [KSpec::Dynamic];
            let mut cells = Vec::new();
            let mut labels = Vec::new();
            for (label, plan) in rows {
                let per_query = par::try_map_threshold(&queries, 2, |q| {
                    run_query(kb, plan, &cfg.pipeline, &aug, forecaster.as_ref(), q, &kspecs)
                })?;
                cells.push(mean_cells(&per_query, 1));
                labels.push(label);
            }
            AblationTable {
                suite,
                row_header: "metric".into(),
                rows: labels,
                columns: vec!["overall".into()],
                cells,
                seed: cfg.seed,
                config_hash: hash,
            }
        }
        Suite::KbScope => {
            let weights = scheme_weights(kb, &cfg.pipeline, cfg.pipeline.scheme, &available)?;
            let forecaster = build_forecaster(&cfg.pipeline.backend, Some(&weights))?;
            let plan = Plan {
                stage1: StageSpec {
                    metric: StageMetric::WeightedCosine,
                    weights: &weights,
                },
                stage2: Some(StageSpec {
                    metric: StageMetric::WeightedDistance,
                    weights: &weights,
                }),
            };
            let kspecs = [KSpec::Dynamic];
            let scopes: Vec<(String, ScopeRule)> = vec![
                ("same-device".into(), ScopeRule::Device),
                ("same-group".into(), ScopeRule::Group),
                ("full-kb".into(), ScopeRule::Full),
            ];
            let mut cells = Vec::new();
            let mut labels = Vec::new();
            for (label, rule) in scopes {
                let per_query = par::try_map_threshold(&queries, 2, |q| {
                    let mut pipeline = cfg.pipeline.clone();
                    pipeline.scope = rule.prefix(q);
                    run_query(kb, plan, &pipeline, &aug, forecaster.as_ref(), q, &kspecs)
                })?;
                cells.push(mean_cells(&per_query, 1));
                labels.push(label);
            }
            AblationTable {
                suite,
                row_header: "scope".into(),
                rows: labels,
                columns: vec!["overall".into()],
                cells,
                seed: cfg.seed,
                config_hash: hash,
            }
        }
        Suite::Covariate => {
            let cov_names: Vec<String> = kb
                .schema()
                .covariate_indices()
                .iter()
                .map(|&i| kb.schema().variables()[i].name.clone())
                .collect();
            let mut rows: Vec<(String, Option<Vec<String>>)> =
                vec![("none".into(), Some(Vec::new()))];
            for name in &cov_names {
                rows.push((format!("only-{name}"), Some(vec![name.clone()])));
            }
            rows.push(("full".into(), None));
            let kspecs = [KSpec::Dynamic];
            let mut cells = Vec::new();
            let mut labels = Vec::new();
            for (label, covariates) in rows {
                let mask = resolve_available(kb.schema(), &covariates)?;
                let weights = scheme_weights(kb, &cfg.pipeline, cfg.pipeline.scheme, &mask)?;
                let forecaster = build_forecaster(&cfg.pipeline.backend, Some(&weights))?;
                let plan = Plan {
                    stage1: StageSpec {
                        metric: StageMetric::WeightedCosine,
                        weights: &weights,
                    },
                    stage2: Some(StageSpec {
                        metric: StageMetric::WeightedDistance,
                        weights: &weights,
                    }),
                };
                let row_aug = augment_config(&cfg.pipeline, &mask);
                let per_query = par::try_map_threshold(&queries, 2, |q| {
                    run_query(kb, plan, &cfg.pipeline, &row_aug, forecaster.as_ref(), q, &kspecs)
                })?;
                cells.push(mean_cells(&per_query, 1));
                labels.push(label);
            }
            AblationTable {
                suite,
                row_header: "covariates".into(),
                rows: labels,
                columns: vec!["overall".into()],
                cells,
                seed: cfg.seed,
                config_hash: hash,
            }
        }
    };
    Ok(table)
}

#[derive(Clone, Copy)]
enum ScopeRule {
    Device,
    Group,
    Full,
}

impl ScopeRule {
    fn prefix(&self, q: &EvalQuery) -> Vec<String> {
        let segments = q.sample.path.segments();
        match self {
            ScopeRule::Device => segments[..2].to_vec(),
            ScopeRule::Group => segments[..1].to_vec(),
            ScopeRule::Full => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Leading fraction of each device's monitored stream used to calibrate
    /// the policy (healthy-labeled records only).
    pub calibration_fraction: f64,
    pub window_days: f64,
    pub frequency_threshold: f64,
    pub min_window_records: usize,
    /// Pin the deviation threshold instead of calibrating it.
    pub deviation_threshold: Option<f64>,
    pub baseline_rate: Option<f64>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            calibration_fraction: 0.3,
            window_days: 14.0,
            frequency_threshold: 0.3,
            min_window_records: 5,
            deviation_threshold: None,
            baseline_rate: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectReport {
    pub policy: PrecursorPolicy,
    /// All scored records in global (time, device) order.
    pub records: Vec<DeviationRecord>,
    pub alerts: Vec<PrecursorAlert>,
}

/// Score the whole monitored stream against a healthy KB, calibrate the
/// policy on the leading healthy records, and run the rolling-window
/// detector.
pub fn run_detect(
    dataset: &EvalDataset,
    cfg: &EvalConfig,
    dcfg: &DetectConfig,
) -> Result<DetectReport> {
    if dataset.queries.is_empty() {
        return Err(Error::InvalidConfig("no monitored records".into()));
    }
    let kb = &dataset.kb;
    let available = resolve_available(kb.schema(), &cfg.pipeline.covariates)?;
    let weights = scheme_weights(kb, &cfg.pipeline, cfg.pipeline.scheme, &available)?;
    let forecaster = build_forecaster(&cfg.pipeline.backend, Some(&weights))?;
    let aug = augment_config(&cfg.pipeline, &available);

    let mut order: Vec<usize> = (0..dataset.queries.len()).collect();
    order.sort_by(|&a, &b| {
        let (qa, qb) = (&dataset.queries[a], &dataset.queries[b]);
        qa.start
            .total_cmp(&qb.start)
            .then_with(|| qa.sample.path.cmp(&qb.sample.path))
    });
    let ordered: Vec<&EvalQuery> = order.iter().map(|&i| &dataset.queries[i]).collect();

    let records: Vec<DeviationRecord> = par::try_map_threshold(&ordered, 2, |q| {
        let view = candidate_view(kb, &cfg.pipeline.scope, q.start, q.end);
        if view.is_empty() {
            return Err(Error::EmptyView);
        }
        score_flight(
            kb,
            &view,
            &q.sample,
            &weights,
            forecaster.as_ref(),
            &aug,
            cfg.pipeline.k,
            cfg.pipeline.stage1_multiplier,
        )
    })?;

    let window = dcfg.window_days * SECONDS_PER_DAY;
    let policy = match dcfg.deviation_threshold {
        Some(tau) => {
            let policy = PrecursorPolicy {
                window,
                deviation_threshold: tau,
                frequency_threshold: dcfg.frequency_threshold,
                baseline_rate: dcfg.baseline_rate.unwrap_or(0.01),
                min_window_records: dcfg.min_window_records,
            };
            policy.validate()?;
            policy
        }
        None => {
            let mut device_counts: HashMap<&str, usize> = HashMap::new();
            for q in &ordered {
                *device_counts.entry(q.device.as_str()).or_default() += 1;
            }
            let mut seen: HashMap<&str, usize> = HashMap::new();
            let mut healthy = Vec::new();
            for (q, r) in ordered.iter().zip(&records) {
                let idx = seen.entry(q.device.as_str()).or_default();
                let cut = ((device_counts[q.device.as_str()] as f64
                    * dcfg.calibration_fraction)
                    .floor() as usize)
                    .max(1);
                if *idx < cut && !q.faulty {
                    healthy.push(r.deviation);
                }
                *idx += 1;
            }
            calibrate_policy(
                &healthy,
                window,
                dcfg.frequency_threshold,
                dcfg.min_window_records,
            )?
        }
    };

    let mut detector = PrecursorDetector::new(policy.clone())?;
    let mut alerts = Vec::new();
    for record in &records {
        if let Some(alert) = detector.update(record.clone())? {
            alerts.push(alert);
        }
    }
    Ok(DetectReport {
        policy,
        records,
        alerts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_fleet, FleetConfig, FlightCount};

    fn tiny_eval_cfg() -> EvalConfig {
        EvalConfig {
            seed: 42,
            queries: 24,
            ..EvalConfig::default()
        }
    }

    fn tiny_fleet() -> crate::synth::Fleet {
        generate_fleet(&FleetConfig {
            seed: 9,
            planes: 5,
            flights: FlightCount::Fixed(40),
            ..FleetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn weighting_suite_has_expected_grid() {
        let fleet = tiny_fleet();
        let cfg = tiny_eval_cfg();
        let dataset = dataset_from_fleet(&fleet, &cfg).unwrap();
        let table = run_ablation(Suite::Weighting, &dataset, &cfg).unwrap();
        assert_eq!(table.rows, vec!["0", "1", "2", "3", "6", "9", "12", "dynamic"]);
        assert_eq!(table.columns, vec!["uniform", "point", "fused"]);
        assert_eq!(table.cells.len(), 8);
        assert!(table.cells.iter().all(|r| r.len() == 3));
        // The k=0 row ignores weighting entirely, so all schemes agree.
        let z = &table.cells[0];
        assert_eq!(z[0].mse, z[1].mse);
        assert_eq!(z[1].mse, z[2].mse);
    }

    #[test]
    fn metric_suite_has_six_rows_without_dtw() {
        let fleet = tiny_fleet();
        let mut cfg = tiny_eval_cfg();
        cfg.queries = 10;
        let dataset = dataset_from_fleet(&fleet, &cfg).unwrap();
        let table = run_ablation(Suite::Metric, &dataset, &cfg).unwrap();
        assert_eq!(table.rows.len(), 6);
        assert!(table.rows.iter().all(|r| !r.contains("dtw")));
        assert!(table.rows.contains(&"cosine+matrix-profile".to_string()));
    }

    #[test]
    fn covariate_suite_rows() {
        let fleet = tiny_fleet();
        let mut cfg = tiny_eval_cfg();
        cfg.queries = 10;
        let dataset = dataset_from_fleet(&fleet, &cfg).unwrap();
        let table = run_ablation(Suite::Covariate, &dataset, &cfg).unwrap();
        assert_eq!(table.rows, vec!["none", "only-IP", "only-N2", "full"]);
    }

    #[test]
    fn tables_reproduce_bit_identically() {
        let fleet = tiny_fleet();
        let mut cfg = tiny_eval_cfg();
        cfg.queries = 12;
        let dataset = dataset_from_fleet(&fleet, &cfg).unwrap();
        let a = run_ablation(Suite::ContextK, &dataset, &cfg).unwrap();
        let b = run_ablation(Suite::ContextK, &dataset, &cfg).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
    }

    #[test]
    fn csv_has_provenance_and_header() {
        let fleet = tiny_fleet();
        let mut cfg = tiny_eval_cfg();
        cfg.queries = 6;
        let dataset = dataset_from_fleet(&fleet, &cfg).unwrap();
        let table = run_ablation(Suite::KbScope, &dataset, &cfg).unwrap();
        let csv = table.to_csv_string();
        let mut lines = csv.lines();
        let prov = lines.next().unwrap();
        assert!(prov.starts_with("# seed=42 config="));
        assert_eq!(lines.next().unwrap(), "scope,overall_mse,overall_mae");
    }

    #[test]
    fn write_csv_refuses_overwrite_without_force() {
        let fleet = tiny_fleet();
        let mut cfg = tiny_eval_cfg();
        cfg.queries = 4;
        let dataset = dataset_from_fleet(&fleet, &cfg).unwrap();
        let table = run_ablation(Suite::KbScope, &dataset, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        table.write_csv(&path, false).unwrap();
        assert!(matches!(
            table.write_csv(&path, false),
            Err(Error::WouldOverwrite(_))
        ));
        table.write_csv(&path, true).unwrap();
    }

    #[test]
    fn query_selection_is_seeded_and_stable() {
        let a = select_queries(1000, 200, 42);
        let b = select_queries(1000, 200, 42);
        let c = select_queries(1000, 200, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 200);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_queries(5, 10, 1), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn detect_fires_on_faulty_planes_only() {
        let fleet = generate_fleet(&FleetConfig {
            seed: 21,
            planes: 6,
            flights: FlightCount::Fixed(120),
            fault: Some(crate::synth::FaultSpec {
                planes: vec![2],
                onset_flight: 100,
                intermittency: 0.7,
                magnitude: 2.5,
            }),
            ..FleetConfig::default()
        })
        .unwrap();
        let cfg = tiny_eval_cfg();
        let dataset = dataset_from_fleet(&fleet, &cfg).unwrap();
        // Pin the threshold: a fleet this small cannot estimate a stable
        // 99th percentile (the calibrated path is covered at fleet scale).
        let dcfg = DetectConfig {
            deviation_threshold: Some(0.05),
            ..DetectConfig::default()
        };
        let report = run_detect(&dataset, &cfg, &dcfg).unwrap();
        assert!(!report.alerts.is_empty(), "fault plane should alert");
        for alert in &report.alerts {
            assert!(alert.device.ends_with("plane002"), "alert on {}", alert.device);
        }
    }

    #[test]
    fn dataset_from_store_round_trips_fleet_split() {
        let fleet = tiny_fleet();
        let dir = tempfile::tempdir().unwrap();
        fleet.write_store(dir.path()).unwrap();
        let kb = store::ingest_directory(
            dir.path(),
            &fleet.schema,
            KbConfig::default(),
            false,
        )
        .unwrap();
        store::write_meta(&kb, dir.path()).unwrap();
        let cfg = tiny_eval_cfg();
        let from_store = dataset_from_store(dir.path(), &cfg).unwrap();
        let from_fleet = dataset_from_fleet(&fleet, &cfg).unwrap();
        assert_eq!(from_store.kb.len(), from_fleet.kb.len());
        assert_eq!(from_store.queries.len(), from_fleet.queries.len());
    }
}
