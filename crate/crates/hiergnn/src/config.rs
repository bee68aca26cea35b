//! Run configuration: a JSON file merged with command-line overrides.

use std::path::Path;

use hiergnn_core::model::{ContextFusion, GsaSource, ModelConfig, Optimizer};
use hiergnn_core::mtc::DEFAULT_EPSILON;
use hiergnn_core::reasoning::{Mode, Phi};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Read(String, std::io::Error),
    #[error("bad config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub mode: Mode,
    pub epsilon: f64,
    /// Upper bound on the vocabulary built from text data, specials included.
    pub vocab_size: usize,
    pub phi: Phi,
    pub lir_shared_scorer: bool,
    pub gsa_source: GsaSource,
    pub context: ContextFusion,
    pub use_hiergnn: bool,
    pub lr: f64,
    pub clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between progress log lines.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 32,
            layers: 3,
            mode: Mode::Lsr,
            epsilon: DEFAULT_EPSILON,
            vocab_size: 2000,
            phi: Phi::Tanh,
            lir_shared_scorer: false,
            gsa_source: GsaSource::Last,
            context: ContextFusion::Fused,
            use_hiergnn: true,
            lr: 0.5,
            clip: 2.0,
            steps: 500,
            batch_size: 16,
            seed: 0,
            log_every: 50,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies `key=value` overrides; values are parsed as JSON, falling
    /// back to a bare string.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(&self)?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Invalid(format!("override {o:?} is not key=value")))?;
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
            obj.insert(k.to_string(), parsed);
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip {} must be positive", self.clip));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        self.model_config(self.vocab_size)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            layers: self.layers,
            mode: self.mode,
            epsilon: self.epsilon,
            vocab_size,
            phi: self.phi,
            lir_shared_scorer: self.lir_shared_scorer,
            gsa_source: self.gsa_source,
            context: self.context,
            use_hiergnn: self.use_hiergnn,
        }
    }

    pub fn optimizer(&self) -> Optimizer {
        Optimizer {
            lr: self.lr,
            clip: self.clip,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"d": 8, "depth": 2}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"d": 8, "L": 2, "mode": "lir"}"#).unwrap();
        assert_eq!((c.d, c.layers, c.mode), (8, 2, Mode::Lir));
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::default()
            .with_overrides(&["lr=0".into(), "mode=lir".into(), "gsa_source=fused".into()])
            .unwrap();
        assert_eq!((c.lr, c.mode, c.gsa_source), (0.0, Mode::Lir, GsaSource::Fused));
        assert!(RunConfig::default().with_overrides(&["nope=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["lr".into()]).is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let c = RunConfig { layers: 0, ..RunConfig::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { lr: -1.0, ..RunConfig::default() };
        assert!(c.validate().is_err());
    }
}
