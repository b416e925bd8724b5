//! Deviation scoring of sequential forecasts and rolling-window
//! fault-precursor detection.
//!
//! The retriever runs against a healthy-only knowledge base, so the pipeline
//! predicts ideal behavior; a sustained elevation of high-deviation forecasts
//! inside the rolling window marks a precursor. Single spikes stay silent.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::augmentation::{augmented_forecast, calibrate_k, AugmentConfig};
use crate::error::{Error, Result};
use crate::forecaster::Forecaster;
use crate::kb::{KbView, KnowledgeBase, RegimeSample};
use crate::retrieval::{retrieve, Query};
use crate::weighting::FusedWeights;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRecord {
    pub device: String,
    pub time: f64,
    /// Forecast MSE in normalized target units.
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecursorPolicy {
    /// Rolling window in seconds.
    pub window: f64,
    /// Records above this deviation count as deviant.
    pub deviation_threshold: f64,
    /// Minimum deviant fraction inside the window.
    pub frequency_threshold: f64,
    /// Healthy-calibration deviant rate the window must exceed.
    pub baseline_rate: f64,
    /// Windows with fewer records than this never fire; a lone early record
    /// is not a statistically meaningful rate.
    pub min_window_records: usize,
}

impl PrecursorPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.window > 0.0) {
            return Err(Error::InvalidConfig("window must be positive".into()));
        }
        if !(self.frequency_threshold > 0.0 && self.frequency_threshold <= 1.0) {
            return Err(Error::InvalidConfig(
                "frequency threshold must be in (0, 1]".into(),
            ));
        }
        if !self.deviation_threshold.is_finite() || self.deviation_threshold < 0.0 {
            return Err(Error::InvalidConfig(
                "deviation threshold must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for PrecursorPolicy {
    fn default() -> Self {
        PrecursorPolicy {
            window: 14.0 * SECONDS_PER_DAY,
            deviation_threshold: 1.0,
            frequency_threshold: 0.3,
            baseline_rate: 0.01,
            min_window_records: 5,
        }
    }
}

/// Calibrate the deviation threshold as the 99th percentile of a held-out
/// healthy stream; the baseline rate is the healthy deviant fraction under
/// that threshold.
pub fn calibrate_policy(
    healthy_deviations: &[f64],
    window: f64,
    frequency_threshold: f64,
    min_window_records: usize,
) -> Result<PrecursorPolicy> {
    if healthy_deviations.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot calibrate a policy from an empty healthy stream".into(),
        ));
    }
    let mut sorted = healthy_deviations.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let idx = ((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1;
    let deviation_threshold = sorted[idx];
    let baseline_rate =
        sorted.iter().filter(|&&d| d > deviation_threshold).count() as f64 / n as f64;
    let policy = PrecursorPolicy {
        window,
        deviation_threshold,
        frequency_threshold,
        baseline_rate,
        min_window_records,
    };
    policy.validate()?;
    Ok(policy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecursorAlert {
    pub device: String,
    pub fired_at: f64,
    pub window_rate: f64,
    pub baseline_rate: f64,
    pub contributing: Vec<DeviationRecord>,
}

#[derive(Debug, Default)]
struct DeviceState {
    window: VecDeque<DeviationRecord>,
    last_time: Option<f64>,
    last_alert: Option<f64>,
}

/// Per-device rolling-window state machines. Records must arrive in
/// nondecreasing time order per device.
pub struct PrecursorDetector {
    policy: PrecursorPolicy,
    device_baselines: HashMap<String, f64>,
    states: HashMap<String, DeviceState>,
}

impl PrecursorDetector {
    pub fn new(policy: PrecursorPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(PrecursorDetector {
            policy,
            device_baselines: HashMap::new(),
            states: HashMap::new(),
        })
    }

    pub fn policy(&self) -> &PrecursorPolicy {
        &self.policy
    }

    /// Per-device healthy baseline override; devices without one use the
    /// policy's fleet-wide rate.
    pub fn set_device_baseline(&mut self, device: &str, rate: f64) {
        self.device_baselines.insert(device.to_string(), rate);
    }

    fn baseline_for(&self, device: &str) -> f64 {
        self.device_baselines
            .get(device)
            .copied()
            .unwrap_or(self.policy.baseline_rate)
    }

    /// Advance one device's window and fire at most one alert per window
    /// duration when the deviant rate meets the frequency threshold and
    /// exceeds the baseline.
    pub fn update(&mut self, record: DeviationRecord) -> Result<Option<PrecursorAlert>> {
        if !record.deviation.is_finite() || record.deviation < 0.0 {
            return Err(Error::NonFiniteValue(format!(
                "deviation {} for {}",
                record.deviation, record.device
            )));
        }
        let baseline = self.baseline_for(&record.device);
        let state = self.states.entry(record.device.clone()).or_default();
        if let Some(last) = state.last_time {
            if record.time < last {
                return Err(Error::OutOfOrderRecord {
                    device: record.device,
                    time: record.time,
                    last,
                });
            }
        }
        state.last_time = Some(record.time);
        state.window.push_back(record.clone());
        let cutoff = record.time - self.policy.window;
        while state.window.front().map_or(false, |r| r.time < cutoff) {
            state.window.pop_front();
        }
        let n = state.window.len();
        if n < self.policy.min_window_records {
            return Ok(None);
        }
        let deviant: Vec<&DeviationRecord> = state
            .window
            .iter()
            .filter(|r| r.deviation > self.policy.deviation_threshold)
            .collect();
        let rate = deviant.len() as f64 / n as f64;
        let hysteresis_open = state
            .last_alert
            .map_or(true, |t| record.time - t >= self.policy.window);
        if rate >= self.policy.frequency_threshold && rate > baseline && hysteresis_open {
            state.last_alert = Some(record.time);
            return Ok(Some(PrecursorAlert {
                device: record.device,
                fired_at: record.time,
                window_rate: rate,
                baseline_rate: baseline,
                contributing: deviant.into_iter().cloned().collect(),
            }));
        }
        Ok(None)
    }

    /// Current window contents for one device, oldest first.
    pub fn window(&self, device: &str) -> Option<&VecDeque<DeviationRecord>> {
        self.states.get(device).map(|s| &s.window)
    }
}

/// Score one flight: run the full retrieve/calibrate/forecast pipeline and
/// report the deviation between the prediction and the observed future.
#[allow(clippy::too_many_arguments)]
pub fn score_flight(
    kb: &KnowledgeBase,
    view: &KbView<'_>,
    flight: &RegimeSample,
    weights: &FusedWeights,
    forecaster: &dyn Forecaster,
    cfg: &AugmentConfig,
    k: usize,
    stage1_multiplier: usize,
) -> Result<DeviationRecord> {
    let (query, truth) = Query::from_sample(flight, kb.schema(), kb.stats(), cfg.history_len)?;
    let result = retrieve(&query, view, weights, k, stage1_multiplier)?;
    let calibration = calibrate_k(&result, kb, forecaster, cfg)?;
    let outcome = augmented_forecast(
        &query,
        &result,
        &calibration,
        kb,
        forecaster,
        Some(&truth),
        cfg,
    )?;
    Ok(DeviationRecord {
        device: flight.path.device_prefix(),
        time: flight.start_time(),
        deviation: outcome.deviation.expect("truth supplied"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DAY: f64 = SECONDS_PER_DAY;

    fn policy(tau_d: f64) -> PrecursorPolicy {
        PrecursorPolicy {
            window: 14.0 * DAY,
            deviation_threshold: tau_d,
            frequency_threshold: 0.3,
            baseline_rate: 0.01,
            min_window_records: 5,
        }
    }

    fn rec(device: &str, day: f64, deviation: f64) -> DeviationRecord {
        DeviationRecord {
            device: device.to_string(),
            time: day * DAY,
            deviation,
        }
    }

    #[test]
    fn all_healthy_stream_never_fires() {
        let mut det = PrecursorDetector::new(policy(1.0)).unwrap();
        for day in 0..60 {
            let alert = det.update(rec("g/d", day as f64, 0.1)).unwrap();
            assert!(alert.is_none());
        }
    }

    #[test]
    fn single_spike_does_not_fire() {
        let mut det = PrecursorDetector::new(policy(1.0)).unwrap();
        for day in 0..40 {
            let d = if day == 20 { 50.0 } else { 0.1 };
            assert!(det.update(rec("g/d", day as f64, d)).unwrap().is_none());
        }
    }

    #[test]
    fn sustained_intermittent_fault_fires_within_window() {
        let mut det = PrecursorDetector::new(policy(1.0)).unwrap();
        let mut fired_at = None;
        // Healthy warmup, then fault flights on alternating days.
        for day in 0..40 {
            let faulty = day >= 20 && day % 2 == 0;
            let d = if faulty { 9.0 } else { 0.1 };
            if let Some(alert) = det.update(rec("g/d", day as f64, d)).unwrap() {
                fired_at = Some(alert.fired_at);
                break;
            }
        }
        let t = fired_at.expect("alert fired");
        assert!(t >= 20.0 * DAY && t <= 34.0 * DAY);
    }

    #[test]
    fn alert_rate_exceeds_baseline_and_threshold() {
        let mut det = PrecursorDetector::new(policy(1.0)).unwrap();
        let mut alert = None;
        for day in 0..30 {
            let d = if day >= 10 { 5.0 } else { 0.0 };
            if let Some(a) = det.update(rec("g/d", day as f64, d)).unwrap() {
                alert = Some(a);
                break;
            }
        }
        let a = alert.unwrap();
        assert!(a.window_rate >= 0.3);
        assert!(a.window_rate > a.baseline_rate);
        assert!(!a.contributing.is_empty());
    }

    #[test]
    fn hysteresis_allows_one_alert_per_window() {
        let mut det = PrecursorDetector::new(policy(1.0)).unwrap();
        let mut alerts = Vec::new();
        for day in 0..80 {
            if let Some(a) = det.update(rec("g/d", day as f64, 9.0)).unwrap() {
                alerts.push(a.fired_at);
            }
        }
        assert!(alerts.len() >= 2, "constant fault should re-alert");
        for pair in alerts.windows(2) {
            assert!(pair[1] - pair[0] >= 14.0 * DAY);
        }
    }

    #[test]
    fn out_of_order_record_rejected() {
        let mut det = PrecursorDetector::new(policy(1.0)).unwrap();
        det.update(rec("g/d", 5.0, 0.1)).unwrap();
        assert!(matches!(
            det.update(rec("g/d", 4.0, 0.1)),
            Err(Error::OutOfOrderRecord { .. })
        ));
        // Other devices are independent.
        det.update(rec("g/e", 1.0, 0.1)).unwrap();
    }

    #[test]
    fn window_rate_matches_brute_force() {
        // Drive one device with an uneven schedule and compare the maintained
        // window against a brute-force recomputation at every step.
        let tau = 1.0;
        let mut det = PrecursorDetector::new(policy(tau)).unwrap();
        let mut history: Vec<DeviationRecord> = Vec::new();
        let mut state = 0x7357u64;
        for i in 0..200 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let gap = (state % 3) as f64 * 0.7 + 0.1;
            let time = history.last().map_or(0.0, |r: &DeviationRecord| r.time) + gap * DAY;
            let deviation = if state % 5 == 0 { 3.0 } else { 0.2 };
            let r = DeviationRecord {
                device: "g/d".into(),
                time,
                deviation,
            };
            history.push(r.clone());
            det.update(r).unwrap();
            let window = det.window("g/d").unwrap();
            let expect: Vec<&DeviationRecord> = history
                .iter()
                .filter(|x| x.time >= time - 14.0 * DAY)
                .collect();
            assert_eq!(window.len(), expect.len(), "step {i}");
            let got_rate =
                window.iter().filter(|x| x.deviation > tau).count() as f64 / window.len() as f64;
            let want_rate =
                expect.iter().filter(|x| x.deviation > tau).count() as f64 / expect.len() as f64;
            assert_eq!(got_rate, want_rate);
        }
    }

    #[test]
    fn raising_threshold_never_adds_alerts() {
        let stream: Vec<DeviationRecord> = (0..60)
            .map(|day| {
                let d = if day % 3 == 0 { 4.0 } else { 0.3 };
                rec("g/d", day as f64, d)
            })
            .collect();
        let mut counts = Vec::new();
        for tau in [0.5, 1.0, 3.0, 10.0] {
            let mut det = PrecursorDetector::new(policy(tau)).unwrap();
            let mut n = 0;
            for r in &stream {
                if det.update(r.clone()).unwrap().is_some() {
                    n += 1;
                }
            }
            counts.push(n);
        }
        for pair in counts.windows(2) {
            assert!(pair[1] <= pair[0], "alert counts {counts:?}");
        }
    }

    #[test]
    fn per_device_baseline_override() {
        // A saturated per-device baseline suppresses alerts that fire for
        // the same stream under the fleet-wide default.
        let mut det = PrecursorDetector::new(policy(1.0)).unwrap();
        det.set_device_baseline("g/noisy", 1.0);
        let mut default_fired = false;
        for day in 0..30 {
            let d = if day >= 10 { 5.0 } else { 0.0 };
            assert!(det.update(rec("g/noisy", day as f64, d)).unwrap().is_none());
            default_fired |= det.update(rec("g/plain", day as f64, d)).unwrap().is_some();
        }
        assert!(default_fired);
    }

    #[test]
    fn calibrate_policy_picks_99th_percentile() {
        let healthy: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let p = calibrate_policy(&healthy, 14.0 * DAY, 0.3, 5).unwrap();
        assert!((p.deviation_threshold - 0.989).abs() < 1e-12);
        assert!((p.baseline_rate - 0.01).abs() < 1e-3);
        assert!(calibrate_policy(&[], 14.0 * DAY, 0.3, 5).is_err());
    }
}
