//! `key = value` configuration and runtime wiring.
//!
//! Blank lines and lines starting with `#` are ignored. Values may be wrapped
//! in double quotes. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::consolidation::{ConsolidationError, Consolidator, MappingCache};
use crate::exec::{SharedClock, SystemClock};
use crate::extraction::Extractor;
use crate::gateway::{Backend, Gateway, GatewayConfig, GatewayError, HttpBackend, MockBackend, MockRules, TemplateSet};
use crate::model::ConsolidationMap;
use crate::orchestrator::{Orchestrator, PipelineConfig, TriggerPolicy};
use crate::selection::WeightingMode;
use crate::store::{FileStore, MemoryStore, Store, StoreError};
use crate::summarization::Summarizer;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Mappings(#[from] ConsolidationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub min_reviews: u32,
    pub refresh_fraction: f64,
    pub cap: usize,
    pub top_k: usize,
    pub percentile: f64,
    pub pinned_threshold: Option<u64>,
    pub seed: u64,
    pub sampling_mode: WeightingMode,
    pub half_life_days: f64,
    /// Journal file; in-memory when unset.
    pub store_path: Option<PathBuf>,
    /// Mapping log; in-memory when unset.
    pub mapping_path: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub backend: BackendKind,
    pub mock_rules: Option<PathBuf>,
    pub llm_endpoint: String,
    pub llm_model: String,
    pub max_attempts: u32,
    pub timeout_secs: u64,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    pub extraction_parallelism: usize,
    pub listen_addr: String,
    pub cors_origin: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        let p = PipelineConfig::default();
        let g = GatewayConfig::default();
        Config {
            min_reviews: p.policy.min_reviews,
            refresh_fraction: 0.10,
            cap: p.cap,
            top_k: p.top_k,
            percentile: p.percentile,
            pinned_threshold: None,
            seed: p.seed,
            sampling_mode: p.sampling_mode,
            half_life_days: p.half_life_days,
            store_path: None,
            mapping_path: None,
            templates_dir: None,
            backend: BackendKind::Mock,
            mock_rules: None,
            llm_endpoint: "https://api.openai.com/v1/chat/completions".into(),
            llm_model: "gpt-4o-mini".into(),
            max_attempts: g.max_attempts,
            timeout_secs: g.timeout.as_secs(),
            backoff_base_ms: g.backoff_base.as_millis() as u64,
            max_in_flight: g.max_in_flight,
            extraction_parallelism: p.extraction_parallelism,
            listen_addr: "127.0.0.1:8080".into(),
            cors_origin: None,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| ConfigError::Syntax {
        line,
        message: format!("{key}: {e}"),
    })
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("expected `key = value`, got {trimmed:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let value = value
                .strip_prefix('"')
                .and_then(|v| v.strip_suffix('"'))
                .unwrap_or(value);
            cfg.set(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Config::parse(&text)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key {
            "min_reviews" => self.min_reviews = parse_value(line, key, value)?,
            "refresh_fraction" => self.refresh_fraction = parse_value(line, key, value)?,
            "cap" => self.cap = parse_value(line, key, value)?,
            "top_k" => self.top_k = parse_value(line, key, value)?,
            "percentile" => self.percentile = parse_value(line, key, value)?,
            "pinned_threshold" => {
                self.pinned_threshold = if value.is_empty() {
                    None
                } else {
                    Some(parse_value(line, key, value)?)
                }
            }
            "seed" => self.seed = parse_value(line, key, value)?,
            "sampling_mode" => self.sampling_mode = parse_value(line, key, value)?,
            "half_life_days" => self.half_life_days = parse_value(line, key, value)?,
            "store_path" => self.store_path = path(),
            "mapping_path" => self.mapping_path = path(),
            "templates_dir" => self.templates_dir = path(),
            "mock_rules" => self.mock_rules = path(),
            "backend" => {
                self.backend = match value {
                    "mock" => BackendKind::Mock,
                    "http" => BackendKind::Http,
                    other => {
                        return Err(ConfigError::Syntax {
                            line,
                            message: format!("backend must be mock or http, got {other:?}"),
                        })
                    }
                }
            }
            "llm_endpoint" => self.llm_endpoint = value.to_string(),
            "llm_model" => self.llm_model = value.to_string(),
            "max_attempts" => self.max_attempts = parse_value(line, key, value)?,
            "timeout_secs" => self.timeout_secs = parse_value(line, key, value)?,
            "backoff_base_ms" => self.backoff_base_ms = parse_value(line, key, value)?,
            "max_in_flight" => self.max_in_flight = parse_value(line, key, value)?,
            "extraction_parallelism" => self.extraction_parallelism = parse_value(line, key, value)?,
            "listen_addr" => self.listen_addr = value.to_string(),
            "cors_origin" => self.cors_origin = Some(value.to_string()).filter(|v| !v.is_empty()),
            other => {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("unknown key {other:?}"),
                })
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |message: &str| {
            Err(ConfigError::Syntax {
                line: 0,
                message: message.to_string(),
            })
        };
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return bad("percentile must be in (0, 1]");
        }
        if !(self.refresh_fraction >= 0.0 && self.refresh_fraction.is_finite()) {
            return bad("refresh_fraction must be non-negative");
        }
        if self.cap == 0 || self.top_k == 0 {
            return bad("cap and top_k must be at least 1");
        }
        if self.max_attempts == 0 || self.max_in_flight == 0 {
            return bad("max_attempts and max_in_flight must be at least 1");
        }
        if self.half_life_days.is_nan() || self.half_life_days <= 0.0 {
            return bad("half_life_days must be positive");
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            policy: TriggerPolicy::new(self.min_reviews, self.refresh_fraction),
            cap: self.cap,
            top_k: self.top_k,
            seed: self.seed,
            sampling_mode: self.sampling_mode,
            half_life_days: self.half_life_days,
            percentile: self.percentile,
            pinned_threshold: self.pinned_threshold,
            extraction_parallelism: self.extraction_parallelism,
        }
    }

    pub fn gateway(&self) -> GatewayConfig {
        GatewayConfig {
            max_attempts: self.max_attempts,
            timeout: Duration::from_secs(self.timeout_secs),
            backoff_base: Duration::from_millis(self.backoff_base_ms),
            max_in_flight: self.max_in_flight,
        }
    }

    pub fn backend(&self) -> Result<Arc<dyn Backend>, ConfigError> {
        Ok(match self.backend {
            BackendKind::Mock => {
                let rules = match &self.mock_rules {
                    Some(path) => MockRules::load(path)?,
                    None => MockRules::builtin(),
                };
                Arc::new(MockBackend::new(rules))
            }
            BackendKind::Http => Arc::new(HttpBackend::from_env(&self.llm_endpoint, &self.llm_model)?),
        })
    }

    /// Wires an orchestrator with the system clock.
    pub fn build(&self) -> Result<Orchestrator, ConfigError> {
        self.build_with(self.backend()?, Arc::new(SystemClock))
    }

    /// Wires an orchestrator around the given backend and clock.
    pub fn build_with(&self, backend: Arc<dyn Backend>, clock: SharedClock) -> Result<Orchestrator, ConfigError> {
        let gateway = Arc::new(Gateway::new(backend, self.gateway()));
        let templates = Arc::new(match &self.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::builtin(),
        });
        let store: Arc<dyn Store> = match &self.store_path {
            Some(path) => Arc::new(FileStore::open(path)?),
            None => Arc::new(MemoryStore::new()),
        };
        let threshold = self.pinned_threshold.unwrap_or(0);
        let consolidator = Consolidator::new(gateway.clone(), templates.clone());
        let mappings = Arc::new(match &self.mapping_path {
            Some(path) => MappingCache::open(consolidator, path, threshold)?,
            None => MappingCache::new(consolidator, ConsolidationMap::with_threshold(threshold)),
        });
        Ok(Orchestrator::new(
            store,
            Extractor::new(gateway.clone(), templates.clone(), clock.clone()),
            mappings,
            Summarizer::new(gateway, templates, clock.clone()),
            clock,
            self.pipeline(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = Config::parse(
            "# pipeline\nmin_reviews = 12\nrefresh_fraction=0.2\nsampling_mode = recency+verified\n\
             store_path = \"/tmp/x.jsonl\"\npinned_threshold = 30\nbackend = mock\n",
        )
        .unwrap();
        assert_eq!(cfg.min_reviews, 12);
        assert_eq!(cfg.pipeline().policy.refresh_bp, 2000);
        assert_eq!(cfg.sampling_mode, WeightingMode::RecencyVerified);
        assert_eq!(cfg.store_path, Some(PathBuf::from("/tmp/x.jsonl")));
        assert_eq!(cfg.pinned_threshold, Some(30));
    }

    #[test]
    fn defaults_match_pipeline_defaults() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg.pipeline(), PipelineConfig::default());
        assert_eq!(cfg.gateway(), GatewayConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["nonsense", "colour = red", "cap = many", "percentile = 1.5", "backend = gpt"] {
            assert!(Config::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn http_backend_requires_key() {
        let cfg = Config::parse("backend = http").unwrap();
        if std::env::var(crate::gateway::API_KEY_ENV).is_err() {
            assert!(matches!(cfg.backend(), Err(ConfigError::Gateway(GatewayError::Config(_)))));
        }
    }
}
