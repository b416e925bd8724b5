//! Structured run configuration: one TOML file feeding every subcommand,
//! with CLI flags taking precedence over file values.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use rafter_core::error::{Error, Result};
use rafter_core::eval::{DetectConfig, EvalConfig, PipelineConfig};
use rafter_core::forecaster::BackendSpec;
use rafter_core::synth::FleetConfig;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub pipeline: PipelineConfig,
    pub eval: EvalSection,
    pub synth: FleetConfig,
    pub detect: DetectConfig,
    pub external: ExternalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub queries: usize,
    pub kb_fraction: f64,
    pub healthy_kb_only: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        EvalSection {
            seed: d.seed,
            queries: d.queries,
            kb_fraction: d.kb_fraction,
            healthy_kb_only: d.healthy_kb_only,
        }
    }
}

/// Extras applied when the pipeline backend is `external:...`.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalSection {
    pub timeout_secs: Option<u64>,
    pub replay_cache: Option<PathBuf>,
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<AppConfig> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
            }
            None => AppConfig::default(),
        };
        if let BackendSpec::External(ext) = &mut config.pipeline.backend {
            if let Some(t) = config.external.timeout_secs {
                ext.timeout_secs = t;
            }
            if let Some(c) = &config.external.replay_cache {
                ext.replay_cache = Some(c.clone());
            }
        }
        Ok(config)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.eval.seed,
            queries: self.eval.queries,
            kb_fraction: self.eval.kb_fraction,
            healthy_kb_only: self.eval.healthy_kb_only,
            pipeline: self.pipeline.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_parses_with_defaults() {
        let cfg: AppConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.pipeline.history_len, 12);
        assert_eq!(cfg.eval.queries, 200);
    }

    #[test]
    fn sections_override_defaults() {
        let text = r#"
            [pipeline]
            decay = 0.9
            backend = "persistence"

            [eval]
            queries = 50

            [synth]
            planes = 4
            flights = { fixed = 10 }

            [detect]
            window_days = 7.0
        "#;
        let cfg: AppConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.pipeline.decay, 0.9);
        assert_eq!(cfg.eval.queries, 50);
        assert_eq!(cfg.synth.planes, 4);
        assert_eq!(cfg.detect.window_days, 7.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<AppConfig>("[pipeline]\nnope = 1\n").is_err());
    }
}
