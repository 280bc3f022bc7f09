use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_M: usize = 10;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 1024;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("tau must be a finite value >= 0, got {0}")]
    InvalidTau(f64),
    #[error("m must be >= 1")]
    InvalidM,
    #[error("max_new_tokens must be >= 1")]
    InvalidMaxNewTokens,
    #[error("top_p must be in (0, 1], got {0}")]
    InvalidTopP(f64),
    #[error("temperature must be > 0, got {0}")]
    InvalidTemperature(f64),
}

/// How the server samples drafts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    Nucleus {
        top_p: f64,
        temperature: f64,
        seed: u64,
    },
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Nucleus {
            top_p: DEFAULT_TOP_P,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

impl Sampling {
    pub fn nucleus(seed: u64) -> Self {
        Sampling::Nucleus {
            top_p: DEFAULT_TOP_P,
            temperature: DEFAULT_TEMPERATURE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Sampling::Nucleus {
            top_p, temperature, ..
        } = *self
        {
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(ConfigError::InvalidTopP(top_p));
            }
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(ConfigError::InvalidTemperature(temperature));
            }
        }
        Ok(())
    }
}

/// Protocol knobs. `k == 0` selects pure client-side decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub k: usize,
    pub tau: f64,
    pub m: usize,
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    #[serde(default)]
    pub allow_non_personalized: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            m: DEFAULT_M,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            sampling: Sampling::default(),
            allow_non_personalized: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(ConfigError::InvalidTau(self.tau));
        }
        if self.m == 0 {
            return Err(ConfigError::InvalidM);
        }
        if self.max_new_tokens == 0 {
            return Err(ConfigError::InvalidMaxNewTokens);
        }
        self.sampling.validate()
    }

    /// Acceptance threshold in log space; `tau == 0` maps to negative infinity.
    pub fn log_tau(&self) -> f64 {
        log_threshold(self.tau)
    }
}

pub fn log_threshold(tau: f64) -> f64 {
    if tau <= 0.0 {
        f64::NEG_INFINITY
    } else {
        tau.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_settings() {
        let c = ProtocolConfig::default();
        assert_eq!((c.k, c.tau, c.m), (10, 0.05, 10));
        assert_eq!(c.max_new_tokens, 1024);
        assert!(matches!(
            c.sampling,
            Sampling::Nucleus { temperature, top_p, .. } if temperature == 1.0 && top_p == 0.95
        ));
        c.validate().unwrap();
    }

    #[test]
    fn zero_tau_is_negative_infinity() {
        assert_eq!(log_threshold(0.0), f64::NEG_INFINITY);
        assert!((log_threshold(0.05) - 0.05f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        let mut c = ProtocolConfig {
            tau: -1.0,
            ..Default::default()
        };
        assert_eq!(c.validate(), Err(ConfigError::InvalidTau(-1.0)));
        c.tau = 0.1;
        c.m = 0;
        assert_eq!(c.validate(), Err(ConfigError::InvalidM));
        c.m = 1;
        c.sampling = Sampling::Nucleus {
            top_p: 0.0,
            temperature: 1.0,
            seed: 1,
        };
        assert_eq!(c.validate(), Err(ConfigError::InvalidTopP(0.0)));
    }

    #[test]
    fn sampling_wire_shape() {
        let s = serde_json::to_string(&Sampling::Greedy).unwrap();
        assert_eq!(s, r#"{"mode":"greedy"}"#);
        let n = serde_json::to_string(&Sampling::nucleus(7)).unwrap();
        assert_eq!(n, r#"{"mode":"nucleus","top_p":0.95,"temperature":1.0,"seed":7}"#);
    }
}
