//! Seeded synthetic fleet generator: valve-regulation style regimes with a
//! logistic engine-speed ramp, a saturating upstream-pressure map, and a
//! regulated target, plus optional intermittent fault injection.
//!
//! Determinism: all randomness flows from SplitMix64 streams derived per
//! plane from `(seed, plane index)`, so parallel generation equals serial and
//! a reimplementation in any language reproduces fleets bit-for-bit from the
//! same seed (see README for the exact algorithm). Generated values are
//! rounded through the canonical decimal form so in-memory pipelines match
//! disk round-trips exactly.
//!
//! Each flight carries a pneumatic scale (bleed configuration) that
//! multiplies both the upstream-pressure saturation level and the regulation
//! setpoint, so the regulated target level is inferable from the covariates
//! rather than from the target history alone.
//!
//! Per-flight draw order (fixed): ramp rate, ramp midpoint, speed floor,
//! speed ceiling, pneumatic scale, spool-up amplitude, fault coin
//! (fault-eligible flights only), then per row one normal each for the speed
//! sensor, the upstream pressure process, and the target.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{HierarchicalPath, RegimeSample};
use crate::matrix::{canonicalize_value, Matrix};
use crate::par;
use crate::schema::{Variable, VariableSchema};
use crate::store;

/// SplitMix64 step (Steele, Lea, Flood 2014 constants).
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic simulation RNG over a SplitMix64 stream. Not for secrets.
#[derive(Debug, Clone)]
pub struct SynthRng {
    state: u64,
}

impl SynthRng {
    pub fn new(seed: u64) -> Self {
        SynthRng { state: seed }
    }

    /// Derive an independent stream for `(seed, index)`: xor the index mixed
    /// by an odd constant, then burn one output.
    pub fn derive(seed: u64, index: u64) -> Self {
        let mut state = seed ^ index.wrapping_mul(0xA24B_AED4_963E_E407);
        let _ = splitmix64(&mut state);
        SynthRng { state }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; u1 is shifted into (0, 1] so the log
    /// never sees zero.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

/// MP (target), IP, N2 in schema order.
pub fn default_schema() -> VariableSchema {
    VariableSchema::new(vec![
        Variable::target("MP", "psi"),
        Variable::covariate("IP", "psi"),
        Variable::covariate("N2", "%rpm"),
    ])
    .expect("static schema")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    /// Target gain on upstream pressure (dominant driver).
    pub ip_gain: f64,
    /// Target gain on engine speed (secondary driver).
    pub n2_gain: f64,
    /// Regulation ceiling for the target.
    pub setpoint: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        // The ceiling sits near the top of the pressure ramp so regulation
        // engages late in the window: the target is still rising at the
        // history boundary and clamps inside the forecast horizon.
        CouplingConfig {
            ip_gain: 0.8,
            n2_gain: 0.05,
            setpoint: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub planes: Vec<usize>,
    /// First flight index at which the fault can fire.
    pub onset_flight: usize,
    /// Per-flight probability that the fault is active after onset.
    pub intermittency: f64,
    /// Additive target shift on active flights (absolute units).
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlightCount {
    Fixed(usize),
    LogUniform { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    pub seed: u64,
    pub planes: usize,
    pub flights: FlightCount,
    pub regime_len: usize,
    pub group: String,
    /// Per-variable noise standard deviation in schema order.
    pub noise_std: Vec<f64>,
    pub coupling: CouplingConfig,
    pub fault: Option<FaultSpec>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            seed: 42,
            planes: 30,
            flights: FlightCount::LogUniform { min: 91, max: 1050 },
            regime_len: 18,
            group: "B777".to_string(),
            noise_std: vec![0.5, 0.4, 2.5],
            coupling: CouplingConfig::default(),
            fault: None,
        }
    }
}

impl FleetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.planes == 0 || self.regime_len < 2 {
            return Err(Error::InvalidConfig(
                "need at least one plane and regime length >= 2".into(),
            ));
        }
        if self.noise_std.len() != 3 || self.noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidConfig(
                "noise_std must hold three nonnegative values".into(),
            ));
        }
        if let FlightCount::LogUniform { min, max } = self.flights {
            if min == 0 || min > max {
                return Err(Error::InvalidConfig(format!(
                    "invalid flight range {min}..{max}"
                )));
            }
        }
        if let FlightCount::Fixed(n) = self.flights {
            if n == 0 {
                return Err(Error::InvalidConfig("need at least one flight".into()));
            }
        }
        if let Some(f) = &self.fault {
            if !(0.0..=1.0).contains(&f.intermittency) || !f.magnitude.is_finite() {
                return Err(Error::InvalidConfig("invalid fault spec".into()));
            }
            if let Some(&p) = f.planes.iter().find(|&&p| p >= self.planes) {
                return Err(Error::InvalidConfig(format!(
                    "fault plane {p} outside fleet of {}",
                    self.planes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flight {
    pub plane: usize,
    pub flight: usize,
    pub path: HierarchicalPath,
    pub timestamps: Vec<f64>,
    pub values: Matrix,
    pub faulty: bool,
    /// This flight's regulation ceiling (base setpoint times the pneumatic
    /// scale); recorded for oracle comparisons against the healthy law.
    pub setpoint: f64,
}

impl Flight {
    pub fn start_time(&self) -> f64 {
        self.timestamps[0]
    }

    pub fn to_sample(&self) -> RegimeSample {
        RegimeSample {
            path: self.path.clone(),
            values: self.values.clone(),
            timestamps: self.timestamps.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fleet {
    pub schema: VariableSchema,
    pub config: FleetConfig,
    pub flights: Vec<Flight>,
}

// Saturating upstream-pressure map: monotone in engine speed, asymptotic at
// IP_MAX times the flight's pneumatic scale.
const IP_MAX: f64 = 50.0;
const IP_RATE: f64 = 0.06;
const N2_FLOOR: f64 = 52.0;

/// Closed-form healthy law: the regulated target as a function of the
/// observed covariates and the flight's regulation ceiling. Fault deviations
/// are measured against this.
pub fn healthy_target(ip: f64, n2: f64, coupling: &CouplingConfig, setpoint: f64) -> f64 {
    (coupling.ip_gain * ip + coupling.n2_gain * n2).min(setpoint)
}

fn saturating_ip(n2: f64, scale: f64) -> f64 {
    IP_MAX * scale * (1.0 - (-IP_RATE * (n2 - N2_FLOOR).max(0.0)).exp())
}

fn flights_for_plane(cfg: &FleetConfig, rng: &mut SynthRng) -> usize {
    match cfg.flights {
        FlightCount::Fixed(n) => n,
        FlightCount::LogUniform { min, max } => {
            let lo = (min as f64).ln();
            let hi = ((max + 1) as f64).ln();
            (rng.range(lo, hi).exp().floor() as usize).clamp(min, max)
        }
    }
}

/// Generate one plane's flight history. One flight per day; plane clocks are
/// offset by ten minutes so absolute time ranges stay distinct.
fn generate_plane(cfg: &FleetConfig, plane: usize) -> Vec<Flight> {
    let mut rng = SynthRng::derive(cfg.seed, plane as u64);
    let n_flights = flights_for_plane(cfg, &mut rng);
    let len = cfg.regime_len;
    let fault = cfg.fault.as_ref().filter(|f| f.planes.contains(&plane));
    let mut flights = Vec::with_capacity(n_flights);
    for flight in 0..n_flights {
        let rate = rng.range(0.8, 1.2);
        let mid = rng.range(0.55 * len as f64, 0.68 * len as f64);
        let n2_lo = rng.range(56.0, 64.0);
        let n2_hi = rng.range(88.0, 98.0);
        // Bleed configuration of the flight: scales the pressure saturation
        // level and the regulation ceiling together.
        let scale = rng.range(0.92, 1.08);
        // Spool-up transient: a disturbance on the first few rows that dies
        // out well before the forecast window.
        let spool = rng.range(-2.5, 2.5);
        let fault_active = match fault {
            Some(f) if flight >= f.onset_flight => rng.bernoulli(f.intermittency),
            _ => false,
        };
        let setpoint = cfg.coupling.setpoint * scale;
        let start = flight as f64 * 86_400.0 + plane as f64 * 600.0;
        let mut rows = Vec::with_capacity(len);
        let mut timestamps = Vec::with_capacity(len);
        for i in 0..len {
            let s = 1.0 / (1.0 + (-rate * (i as f64 - mid)).exp());
            let n2_latent = n2_lo + (n2_hi - n2_lo) * s + spool * (-(i as f64) / 2.5).exp();
            // Speed is observed through a noisy sensor; upstream pressure
            // carries process variation that feeds the regulated target, so
            // the pressure channel is the physically dominant covariate.
            let n2 = n2_latent + cfg.noise_std[2] * rng.normal();
            let ip = saturating_ip(n2_latent, scale) + cfg.noise_std[1] * rng.normal();
            let mut mp = healthy_target(ip, n2_latent, &cfg.coupling, setpoint)
                + cfg.noise_std[0] * rng.normal();
            if fault_active {
                mp += fault.expect("fault_active implies spec").magnitude;
            }
            rows.push(vec![
                canonicalize_value(mp),
                canonicalize_value(ip),
                canonicalize_value(n2),
            ]);
            timestamps.push(canonicalize_value(start + i as f64 * 0.5));
        }
        let path = HierarchicalPath::new(vec![
            cfg.group.clone(),
            format!("plane{plane:03}"),
            "takeoff".to_string(),
            format!("f{flight:05}"),
        ])
        .expect("generated path is valid");
        flights.push(Flight {
            plane,
            flight,
            path,
            timestamps,
            values: Matrix::from_rows(rows).expect("rectangular rows"),
            faulty: fault_active,
            setpoint,
        });
    }
    flights
}

/// Generate the whole fleet. Per-plane streams make parallel generation
/// equal serial generation.
pub fn generate_fleet(config: &FleetConfig) -> Result<Fleet> {
    config.validate()?;
    let planes: Vec<usize> = (0..config.planes).collect();
    let per_plane: Vec<Vec<Flight>> =
        par::map_threshold(&planes, 4, |&p| generate_plane(config, p));
    let flights = per_plane.into_iter().flatten().collect();
    Ok(Fleet {
        schema: default_schema(),
        config: config.clone(),
        flights,
    })
}

impl Fleet {
    /// Temporal split: per plane, the leading `kb_fraction` of flights feed
    /// the knowledge base and the rest become queries. With
    /// `healthy_kb_only`, fault-active flights are curated out of the KB.
    pub fn split(&self, kb_fraction: f64, healthy_kb_only: bool) -> (Vec<&Flight>, Vec<&Flight>) {
        let mut kb = Vec::new();
        let mut queries = Vec::new();
        let mut plane_counts = vec![0usize; self.config.planes];
        for f in &self.flights {
            plane_counts[f.plane] += 1;
        }
        for f in &self.flights {
            let cut = (plane_counts[f.plane] as f64 * kb_fraction).floor() as usize;
            if f.flight < cut {
                if !(healthy_kb_only && f.faulty) {
                    kb.push(f);
                }
            } else {
                queries.push(f);
            }
        }
        (kb, queries)
    }

    /// Write all flights into the store layout plus `labels.csv`.
    pub fn write_store(&self, root: &Path) -> Result<()> {
        par::try_map_threshold(&self.flights, 64, |f| {
            store::write_sample_csv(root, &self.schema, &f.path, &f.timestamps, &f.values)
        })?;
        let labels: Vec<(String, bool)> = self
            .flights
            .iter()
            .map(|f| (f.path.to_string(), f.faulty))
            .collect();
        store::write_labels(root, &labels)
    }
}
