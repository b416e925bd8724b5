//! Subcommand implementations: thin wiring from flags and the config file
//! onto the engine operations.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rafter_core::augmentation::{augmented_forecast, calibrate_k, forecast_with_top_k};
use rafter_core::error::Error;
use rafter_core::eval::{dataset_from_store, run_ablation, run_detect, scheme_weights, Suite};
use rafter_core::forecaster::build_forecaster;
use rafter_core::kb::{KbConfig, KnowledgeBase};
use rafter_core::maintenance::{
    calibrate_policy, DeviationRecord, PrecursorAlert, PrecursorDetector, PrecursorPolicy,
    SECONDS_PER_DAY,
};
use rafter_core::matrix::format_value;
use rafter_core::retrieval::{retrieve as run_retrieve, Query};
use rafter_core::schema::{Variable, VariableSchema};
use rafter_core::store;
use rafter_core::synth::{generate_fleet, FaultSpec, FlightCount};

use crate::config::AppConfig;
use crate::queryfile::read_query_csv;
use crate::CliError;

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub struct Context {
    pub config: AppConfig,
    pub seed: Option<u64>,
    pub kb_dir: Option<PathBuf>,
    pub scope: Vec<String>,
}

impl Context {
    fn kb_dir(&self) -> Result<&Path, CliError> {
        self.kb_dir
            .as_deref()
            .ok_or_else(|| usage("--kb <dir> is required for this command"))
    }

    fn eval_config(&self) -> rafter_core::eval::EvalConfig {
        let mut cfg = self.config.eval_config();
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if !self.scope.is_empty() {
            cfg.pipeline.scope = self.scope.clone();
        }
        cfg
    }

    fn load_kb(&self) -> Result<KnowledgeBase, CliError> {
        Ok(store::load_kb(self.kb_dir()?)?)
    }
}

fn guard_overwrite(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Core(Error::WouldOverwrite(path.to_path_buf())));
    }
    Ok(())
}

fn parse_flights(text: &str) -> Result<FlightCount, CliError> {
    if let Some((lo, hi)) = text.split_once("..") {
        let min = lo
            .parse()
            .map_err(|_| usage(format!("bad flight range {text:?}")))?;
        let max = hi
            .parse()
            .map_err(|_| usage(format!("bad flight range {text:?}")))?;
        Ok(FlightCount::LogUniform { min, max })
    } else {
        let n = text
            .parse()
            .map_err(|_| usage(format!("bad flight count {text:?}")))?;
        Ok(FlightCount::Fixed(n))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    ctx: Context,
    out: Option<PathBuf>,
    planes: Option<usize>,
    flights: Option<String>,
    fault_planes: Option<String>,
    fault_onset: Option<usize>,
    fault_intermittency: Option<f64>,
    fault_magnitude: Option<f64>,
) -> CliResult {
    let dir = out
        .or_else(|| ctx.kb_dir.clone())
        .ok_or_else(|| usage("synth needs --out or --kb"))?;
    let mut cfg = ctx.config.synth.clone();
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    if let Some(p) = planes {
        cfg.planes = p;
    }
    if let Some(f) = &flights {
        cfg.flights = parse_flights(f)?;
    }
    if let Some(list) = &fault_planes {
        let planes: Result<Vec<usize>, _> =
            list.split(',').map(|p| p.trim().parse::<usize>()).collect();
        let planes = planes.map_err(|_| usage(format!("bad --fault-planes {list:?}")))?;
        let base = cfg.fault.take();
        cfg.fault = Some(FaultSpec {
            planes,
            onset_flight: fault_onset
                .or(base.as_ref().map(|f| f.onset_flight))
                .ok_or_else(|| usage("--fault-onset is required with --fault-planes"))?,
            intermittency: fault_intermittency
                .or(base.as_ref().map(|f| f.intermittency))
                .unwrap_or(0.5),
            magnitude: fault_magnitude
                .or(base.as_ref().map(|f| f.magnitude))
                .ok_or_else(|| usage("--fault-magnitude is required with --fault-planes"))?,
        });
    }
    let fleet = generate_fleet(&cfg)?;
    fleet.write_store(&dir)?;
    println!(
        "wrote {} flights across {} planes to {}",
        fleet.flights.len(),
        cfg.planes,
        dir.display()
    );
    Ok(())
}

pub fn build_kb(
    ctx: Context,
    source: Option<PathBuf>,
    target: String,
    truncate_tail: bool,
    bins: Option<usize>,
    regime_len: Option<usize>,
) -> CliResult {
    let dir = source
        .or_else(|| ctx.kb_dir.clone())
        .ok_or_else(|| usage("build-kb needs --source or --kb"))?;
    let schema = infer_schema(&dir, &target)?;
    let config = KbConfig {
        regime_len: regime_len.unwrap_or(ctx.config.synth.regime_len),
        mi_bins: bins.or(ctx.config.pipeline.mi_bins),
    };
    let kb = store::ingest_directory(&dir, &schema, config, truncate_tail)?;
    store::write_meta(&kb, &dir)?;
    let w = kb.covariate_weights();
    println!(
        "indexed {} samples; covariate weights {}",
        kb.len(),
        schema
            .names()
            .iter()
            .zip(&w.vector)
            .map(|(n, v)| format!("{n}={v:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

/// Column names come from the first sample header (sorted order); the
/// `--target` flag marks the target role.
fn infer_schema(dir: &Path, target: &str) -> Result<VariableSchema, CliError> {
    let mut files = Vec::new();
    collect_csvs(dir, dir, &mut files)?;
    files.sort();
    let first = files
        .first()
        .ok_or_else(|| CliError::Core(Error::CorruptStore(format!(
            "no sample files under {}",
            dir.display()
        ))))?;
    let file = dir.join(first);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&file)
        .map_err(|e| CliError::Core(Error::CorruptStore(format!("{}: {e}", file.display()))))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Core(Error::CorruptStore(format!("{}: {e}", file.display()))))?;
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if !names.iter().any(|n| n == target) {
        return Err(usage(format!(
            "target {target:?} not among columns {names:?}"
        )));
    }
    let vars = names
        .iter()
        .map(|n| {
            if n == target {
                Variable::target(n, "")
            } else {
                Variable::covariate(n, "")
            }
        })
        .collect();
    Ok(VariableSchema::new(vars)?)
}

fn collect_csvs(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::Core(Error::io(dir, e)))? {
        let entry = entry.map_err(|e| CliError::Core(Error::io(dir, e)))?;
        let path = entry.path();
        if path.is_dir() {
            collect_csvs(root, &path, out)?;
        } else if path.extension().map_or(false, |e| e == "csv") {
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            if name == "labels.csv" && path.parent() == Some(root) {
                continue;
            }
            out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
        }
    }
    Ok(())
}

pub fn retrieve_cmd_weights(
    kb: &KnowledgeBase,
    cfg: &rafter_core::eval::EvalConfig,
) -> Result<rafter_core::weighting::FusedWeights, Error> {
    scheme_weights(kb, &cfg.pipeline, cfg.pipeline.scheme, &None)
}

pub fn retrieve(
    ctx: Context,
    query_path: PathBuf,
    k: Option<usize>,
    multiplier: Option<usize>,
    emit_regimes: Option<PathBuf>,
    emit_weights: Option<PathBuf>,
) -> CliResult {
    let kb = ctx.load_kb()?;
    let cfg = ctx.eval_config();
    let k = k.unwrap_or(cfg.pipeline.k);
    let multiplier = multiplier.unwrap_or(cfg.pipeline.stage1_multiplier);
    let qf = read_query_csv(
        &query_path,
        kb.schema(),
        cfg.pipeline.history_len,
        kb.config().regime_len,
    )?;
    let weights = retrieve_cmd_weights(&kb, &cfg)?;
    if let Some(path) = &emit_weights {
        fs::write(path, weights.to_csv_string(kb.schema())).map_err(|e| Error::io(path, e))?;
    }
    let query = Query::new(qf.history, qf.future_covariates, kb.schema(), kb.stats())?;
    let view = kb.filter_scope(&cfg.pipeline.scope);
    let result = retrieve(&query, &view, &weights, k, multiplier)?;
    println!("rank,path,stage1_cosine,stage2_distance");
    for e in &result.entries {
        println!(
            "{},{},{},{}",
            e.rank,
            e.path,
            format_value(e.stage1_score),
            format_value(e.stage2_distance)
        );
    }
    if let Some(dir) = &emit_regimes {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for e in &result.entries {
            let sample = kb
                .get(&e.path)
                .ok_or_else(|| Error::UnknownPath(e.path.to_string()))?;
            let file = dir.join(format!("rank_{:02}.csv", e.rank));
            write_regime_csv(&file, kb.schema(), &sample.timestamps, &sample.values)?;
        }
        println!("wrote {} regime dumps to {}", result.entries.len(), dir.display());
    }
    Ok(())
}

fn write_regime_csv(
    file: &Path,
    schema: &VariableSchema,
    timestamps: &[f64],
    values: &rafter_core::matrix::Matrix,
) -> Result<(), Error> {
    let mut out = String::from("timestamp");
    for name in schema.names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in 0..values.rows() {
        out.push_str(&format_value(timestamps[r]));
        for c in 0..values.cols() {
            out.push(',');
            out.push_str(&format_value(values.get(r, c)));
        }
        out.push('\n');
    }
    fs::write(file, out).map_err(|e| Error::io(file, e))
}

pub fn forecast(
    ctx: Context,
    query_path: PathBuf,
    k_flag: String,
    backend: Option<String>,
    metric: Option<String>,
    emit_chain: Option<PathBuf>,
) -> CliResult {
    let kb = ctx.load_kb()?;
    let mut cfg = ctx.eval_config();
    if let Some(b) = &backend {
        cfg.pipeline.backend = b
            .parse()
            .map_err(|e: Error| usage(e.to_string()))?;
    }
    if let Some(m) = &metric {
        cfg.pipeline.metric = m.parse().map_err(|e: Error| usage(e.to_string()))?;
    }
    let qf = read_query_csv(
        &query_path,
        kb.schema(),
        cfg.pipeline.history_len,
        kb.config().regime_len,
    )?;
    let weights = scheme_weights(&kb, &cfg.pipeline, cfg.pipeline.scheme, &None)?;
    let forecaster = build_forecaster(&cfg.pipeline.backend, Some(&weights))?;
    let query = Query::new(qf.history, qf.future_covariates, kb.schema(), kb.stats())?;
    let view = kb.filter_scope(&cfg.pipeline.scope);
    let result = retrieve(
        &query,
        &view,
        &weights,
        cfg.pipeline.k,
        cfg.pipeline.stage1_multiplier,
    )?;
    let aug = rafter_core::augmentation::AugmentConfig {
        history_len: cfg.pipeline.history_len,
        horizon: cfg.pipeline.horizon,
        metric: cfg.pipeline.metric,
        include_zero_context: cfg.pipeline.include_zero_context,
        order: cfg.pipeline.chain_order,
        available: None,
    };
    let truth = qf.truth.as_deref();
    let outcome = match k_flag.as_str() {
        "dynamic" => {
            let calibration = calibrate_k(&result, &kb, forecaster.as_ref(), &aug)?;
            augmented_forecast(
                &query,
                &result,
                &calibration,
                &kb,
                forecaster.as_ref(),
                truth,
                &aug,
            )?
        }
        other => {
            let n = other
                .strip_prefix("fixed:")
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| usage(format!("--k must be `dynamic` or `fixed:<n>`, got {other:?}")))?;
            forecast_with_top_k(&query, &result, n, &kb, forecaster.as_ref(), truth, &aug)?
        }
    };
    println!("k_star: {}", outcome.k_star);
    println!(
        "chain: {}",
        outcome
            .chain
            .paths
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    println!(
        "prediction: {}",
        outcome
            .prediction
            .iter()
            .map(|v| format_value(*v))
            .collect::<Vec<_>>()
            .join(" ")
    );
    if let Some(d) = outcome.deviation {
        println!("deviation_mse_normalized: {}", format_value(d));
    }
    if let Some(path) = &emit_chain {
        emit_chain_csv(path, &kb, &outcome, &query)?;
        println!("wrote spliced context to {}", path.display());
    }
    Ok(())
}

/// Spliced-context dump: chain regimes back to back followed by the query
/// history, timestamps as synthetic uniform steps.
fn emit_chain_csv(
    path: &Path,
    kb: &KnowledgeBase,
    outcome: &rafter_core::augmentation::ForecastOutcome,
    query: &Query,
) -> Result<(), Error> {
    let mut context = rafter_core::matrix::Matrix::zeros(0, kb.schema().var_count());
    for p in &outcome.chain.paths {
        let sample = kb.get(p).ok_or_else(|| Error::UnknownPath(p.to_string()))?;
        context = context.vstack(&sample.values)?;
    }
    context = context.vstack(query.history())?;
    let timestamps: Vec<f64> = (0..context.rows()).map(|i| i as f64 * 0.5).collect();
    write_regime_csv(path, kb.schema(), &timestamps, &context)
}

pub fn evaluate(
    ctx: Context,
    suite: String,
    out: PathBuf,
    queries: Option<usize>,
    force: bool,
) -> CliResult {
    let suite: Suite = suite.parse().map_err(|e: Error| usage(e.to_string()))?;
    guard_overwrite(&out, force)?;
    let mut cfg = ctx.eval_config();
    if let Some(q) = queries {
        cfg.queries = q;
    }
    let dataset = dataset_from_store(ctx.kb_dir()?, &cfg)?;
    let table = run_ablation(suite, &dataset, &cfg)?;
    table.write_csv(&out, force)?;
    print!("{}", table.to_csv_string());
    println!("wrote {}", out.display());
    Ok(())
}

pub fn detect(
    ctx: Context,
    records: Option<PathBuf>,
    policy: String,
    alerts_out: Option<PathBuf>,
    timeline_out: Option<PathBuf>,
    force: bool,
) -> CliResult {
    for path in alerts_out.iter().chain(timeline_out.iter()) {
        guard_overwrite(path, force)?;
    }
    let mut dcfg = ctx.config.detect.clone();
    if policy != "default" {
        let text = fs::read_to_string(&policy)
            .map_err(|e| CliError::Core(Error::io(PathBuf::from(&policy), e)))?;
        dcfg = toml::from_str(&text)
            .map_err(|e| CliError::Core(Error::InvalidConfig(format!("{policy}: {e}"))))?;
    }
    let (records, alerts, policy) = match records {
        Some(file) => detect_from_records(&file, &dcfg)?,
        None => {
            let cfg = ctx.eval_config();
            let dataset = dataset_from_store(ctx.kb_dir()?, &cfg)?;
            let report = run_detect(&dataset, &cfg, &dcfg)?;
            (report.records, report.alerts, report.policy)
        }
    };
    println!(
        "policy: window_days={} deviation_threshold={} frequency_threshold={} baseline_rate={}",
        policy.window / SECONDS_PER_DAY,
        format_value(policy.deviation_threshold),
        policy.frequency_threshold,
        format_value(policy.baseline_rate),
    );
    println!("{} records scored, {} alerts", records.len(), alerts.len());
    for a in &alerts {
        println!(
            "alert device={} fired_at={} window_rate={:.4} baseline={:.4}",
            a.device, a.fired_at, a.window_rate, a.baseline_rate
        );
    }
    if let Some(path) = &alerts_out {
        write_alerts_jsonl(path, &alerts)?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = &timeline_out {
        write_timeline_csv(path, &records)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Records mode: score nothing, just run the window over an existing
/// deviation stream. Policy calibration (when not pinned) uses the leading
/// fraction of each device's records, which are assumed healthy.
fn detect_from_records(
    file: &Path,
    dcfg: &rafter_core::eval::DetectConfig,
) -> Result<(Vec<DeviationRecord>, Vec<PrecursorAlert>, PrecursorPolicy), CliError> {
    let bad = |msg: String| CliError::Core(Error::CorruptStore(format!("{}: {msg}", file.display())));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(file)
        .map_err(|e| bad(e.to_string()))?;
    let mut records = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != 3 {
            return Err(bad(format!("expected device,timestamp,deviation; got {record:?}")));
        }
        records.push(DeviationRecord {
            device: record[0].to_string(),
            time: record[1]
                .parse()
                .map_err(|_| bad(format!("bad timestamp {:?}", &record[1])))?,
            deviation: record[2]
                .parse()
                .map_err(|_| bad(format!("bad deviation {:?}", &record[2])))?,
        });
    }
    records.sort_by(|a, b| a.time.total_cmp(&b.time).then_with(|| a.device.cmp(&b.device)));
    let window = dcfg.window_days * SECONDS_PER_DAY;
    let policy = match dcfg.deviation_threshold {
        Some(tau) => PrecursorPolicy {
            window,
            deviation_threshold: tau,
            frequency_threshold: dcfg.frequency_threshold,
            baseline_rate: dcfg.baseline_rate.unwrap_or(0.01),
            min_window_records: dcfg.min_window_records,
        },
        None => {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for r in &records {
                *counts.entry(r.device.as_str()).or_default() += 1;
            }
            let mut seen: HashMap<&str, usize> = HashMap::new();
            let mut warmup = Vec::new();
            for r in &records {
                let idx = seen.entry(r.device.as_str()).or_default();
                let cut = ((counts[r.device.as_str()] as f64 * dcfg.calibration_fraction)
                    .floor() as usize)
                    .max(1);
                if *idx < cut {
                    warmup.push(r.deviation);
                }
                *idx += 1;
            }
            calibrate_policy(&warmup, window, dcfg.frequency_threshold, dcfg.min_window_records)?
        }
    };
    let mut detector = PrecursorDetector::new(policy.clone())?;
    let mut alerts = Vec::new();
    for r in &records {
        if let Some(alert) = detector.update(r.clone())? {
            alerts.push(alert);
        }
    }
    Ok((records, alerts, policy))
}

fn write_alerts_jsonl(path: &Path, alerts: &[PrecursorAlert]) -> Result<(), Error> {
    #[derive(serde::Serialize)]
    struct Line<'a> {
        device: &'a str,
        fired_at: f64,
        window_rate: f64,
        baseline_rate: f64,
        contributing: usize,
    }
    let mut out = String::new();
    for a in alerts {
        let line = serde_json::to_string(&Line {
            device: &a.device,
            fired_at: a.fired_at,
            window_rate: a.window_rate,
            baseline_rate: a.baseline_rate,
            contributing: a.contributing.len(),
        })
        .map_err(|e| Error::InvalidConfig(format!("serializing alert: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_timeline_csv(path: &Path, records: &[DeviationRecord]) -> Result<(), Error> {
    let mut out = String::from("device,timestamp,deviation\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{}\n",
            r.device,
            format_value(r.time),
            format_value(r.deviation)
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
