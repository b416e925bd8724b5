//! Agent-driven context calibration: the top retrieval acts as a
//! self-supervised agent whose known future scores candidate context counts,
//! and the winning count is applied to the user query.
//!
//! Splicing uses raw (unnormalized) values, regimes concatenated back to
//! back with the most relevant regime adjacent to the query. A flag flips
//! that order for sensitivity runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{normalized_loss, Forecaster, ForecastInput, LossMetric};
use crate::kb::{HierarchicalPath, KnowledgeBase, RegimeSample};
use crate::matrix::Matrix;
use crate::retrieval::{Query, RetrievalResult};

/// Where rank 1 sits in the spliced context. `NearestLast` places it adjacent
/// to the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainOrder {
    NearestLast,
    NearestFirst,
}

impl FromStr for ChainOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest-last" => Ok(ChainOrder::NearestLast),
            "nearest-first" => Ok(ChainOrder::NearestFirst),
            other => Err(Error::InvalidConfig(format!("unknown chain order {other:?}"))),
        }
    }
}

impl fmt::Display for ChainOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainOrder::NearestLast => write!(f, "nearest-last"),
            ChainOrder::NearestFirst => write!(f, "nearest-first"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub history_len: usize,
    pub horizon: usize,
    pub metric: LossMetric,
    /// Probe k = 0 (no context) during calibration in addition to 1..=pool.
    pub include_zero_context: bool,
    pub order: ChainOrder,
    /// Per-schema-variable availability forwarded to the backend.
    pub available: Option<Vec<bool>>,
}

impl AugmentConfig {
    /// Defaults follow the calibration range k in 1..=pool; opting in to the
    /// zero-context probe guards against adversarial pools at the cost of
    /// occasional spurious persistence routing.
    pub fn new(history_len: usize, horizon: usize) -> Self {
        AugmentConfig {
            history_len,
            horizon,
            metric: LossMetric::Mse,
            include_zero_context: false,
            order: ChainOrder::NearestLast,
            available: None,
        }
    }
}

/// The spliced context: provenance paths in splice order (last entry is
/// adjacent to the query under `NearestLast`) and the total row count
/// including the query history.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextChain {
    pub paths: Vec<HierarchicalPath>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentCalibration {
    pub k_star: usize,
    /// (k, loss) for every probe, in evaluation order (increasing k).
    pub probe_losses: Vec<(usize, f64)>,
    pub agent_path: HierarchicalPath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOutcome {
    pub prediction: Vec<f64>,
    pub k_star: usize,
    pub chain: ContextChain,
    /// Normalized-MSE deviation against supplied ground truth.
    pub deviation: Option<f64>,
}

fn splice_order<'a>(
    ranked: &[&'a RegimeSample],
    order: ChainOrder,
) -> Vec<&'a RegimeSample> {
    match order {
        ChainOrder::NearestLast => ranked.iter().rev().copied().collect(),
        ChainOrder::NearestFirst => ranked.to_vec(),
    }
}

fn build_context(chain: &[&RegimeSample], history: &Matrix) -> Result<Matrix> {
    let mut ctx = Matrix::zeros(0, history.cols());
    for regime in chain {
        ctx = ctx.vstack(&regime.values)?;
    }
    ctx.vstack(history)
}

fn forecast_chain(
    ranked: &[&RegimeSample],
    history: &Matrix,
    future_covariates: &Matrix,
    kb: &KnowledgeBase,
    forecaster: &dyn Forecaster,
    cfg: &AugmentConfig,
) -> Result<(Vec<f64>, ContextChain)> {
    let chain = splice_order(ranked, cfg.order);
    let context = build_context(&chain, history)?;
    let rows = context.rows();
    let mut input = ForecastInput::new(
        context,
        future_covariates.clone(),
        kb.schema().clone(),
        cfg.history_len,
        cfg.horizon,
    )?;
    if let Some(avail) = &cfg.available {
        input = input.with_availability(avail.clone())?;
    }
    let out = forecaster.forecast(&input)?;
    if out.prediction.len() != cfg.horizon || out.prediction.iter().any(|v| !v.is_finite()) {
        return Err(Error::MalformedResponse(format!(
            "backend {} returned {} values for horizon {}",
            forecaster.id(),
            out.prediction.len(),
            cfg.horizon
        )));
    }
    Ok((
        out.prediction,
        ContextChain {
            paths: chain.iter().map(|r| r.path.clone()).collect(),
            rows,
        },
    ))
}

fn lookup<'a>(kb: &'a KnowledgeBase, path: &HierarchicalPath) -> Result<&'a RegimeSample> {
    kb.get(path)
        .ok_or_else(|| Error::UnknownPath(path.to_string()))
}

/// Calibrate the context count on the top-1 retrieval. For each k the pool
/// regimes ranked 2..=k+1 are spliced ahead of the agent's history and the
/// forecast is scored against the agent's known future; the smallest k wins
/// ties. A pool of size zero yields k* = 0 with a warning.
pub fn calibrate_k(
    c_final: &RetrievalResult,
    kb: &KnowledgeBase,
    forecaster: &dyn Forecaster,
    cfg: &AugmentConfig,
) -> Result<AgentCalibration> {
    let agent_entry = c_final
        .entries
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty retrieval result".into()))?;
    let agent = lookup(kb, &agent_entry.path)?;
    let (agent_query, agent_truth) =
        Query::from_sample(agent, kb.schema(), kb.stats(), cfg.history_len)?;
    if agent_truth.len() != cfg.horizon {
        return Err(Error::LengthMismatch(format!(
            "agent future of {} against horizon {}",
            agent_truth.len(),
            cfg.horizon
        )));
    }
    let pool: Vec<&RegimeSample> = c_final.entries[1..]
        .iter()
        .map(|e| lookup(kb, &e.path))
        .collect::<Result<_>>()?;
    if pool.is_empty() {
        log::warn!("calibration pool is empty; defaulting to zero context");
        return Ok(AgentCalibration {
            k_star: 0,
            probe_losses: Vec::new(),
            agent_path: agent.path.clone(),
        });
    }
    let target = kb.schema().target_index();
    let (t_mean, t_std) = (kb.stats().mean[target], kb.stats().std[target]);
    let start = if cfg.include_zero_context { 0 } else { 1 };
    let mut probe_losses = Vec::with_capacity(pool.len() + 1 - start);
    let mut best: Option<(usize, f64)> = None;
    for k in start..=pool.len() {
        let (prediction, _) = forecast_chain(
            &pool[..k],
            agent_query.history(),
            agent_query.future_covariates(),
            kb,
            forecaster,
            cfg,
        )?;
        let l = normalized_loss(&prediction, &agent_truth, t_mean, t_std, cfg.metric)?;
        probe_losses.push((k, l));
        if best.map_or(true, |(_, bl)| l < bl) {
            best = Some((k, l));
        }
    }
    let (k_star, best_loss) = best.expect("at least one probe");
    debug_assert!(probe_losses.iter().all(|&(_, l)| best_loss <= l));
    Ok(AgentCalibration {
        k_star,
        probe_losses,
        agent_path: agent.path.clone(),
    })
}

/// Forecast the query with the top `k` retrieved regimes spliced as raw
/// context. `k` is clamped to the retrieval size.
pub fn forecast_with_top_k(
    query: &Query,
    c_final: &RetrievalResult,
    k: usize,
    kb: &KnowledgeBase,
    forecaster: &dyn Forecaster,
    truth: Option<&[f64]>,
    cfg: &AugmentConfig,
) -> Result<ForecastOutcome> {
    let k = k.min(c_final.entries.len());
    let ranked: Vec<&RegimeSample> = c_final.entries[..k]
        .iter()
        .map(|e| lookup(kb, &e.path))
        .collect::<Result<_>>()?;
    let (prediction, chain) = forecast_chain(
        &ranked,
        query.history(),
        query.future_covariates(),
        kb,
        forecaster,
        cfg,
    )?;
    let target = kb.schema().target_index();
    let deviation = match truth {
        Some(t) => Some(normalized_loss(
            &prediction,
            t,
            kb.stats().mean[target],
            kb.stats().std[target],
            LossMetric::Mse,
        )?),
        None => None,
    };
    Ok(ForecastOutcome {
        prediction,
        k_star: k,
        chain,
        deviation,
    })
}

/// Apply a calibration to the user query: splice the top k* regimes with
/// rank 1 adjacent to the query history and forecast the horizon.
pub fn augmented_forecast(
    query: &Query,
    c_final: &RetrievalResult,
    calibration: &AgentCalibration,
    kb: &KnowledgeBase,
    forecaster: &dyn Forecaster,
    truth: Option<&[f64]>,
    cfg: &AugmentConfig,
) -> Result<ForecastOutcome> {
    forecast_with_top_k(
        query,
        c_final,
        calibration.k_star,
        kb,
        forecaster,
        truth,
        cfg,
    )
}
