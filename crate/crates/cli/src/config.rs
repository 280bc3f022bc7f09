//! Layered settings: flags, then `SPECRAG_*` environment, then the YAML
//! file, then built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};
use specrag_core::config::{ProtocolConfig, Sampling, DEFAULT_K, DEFAULT_M, DEFAULT_MAX_NEW_TOKENS, DEFAULT_TAU, DEFAULT_TEMPERATURE, DEFAULT_TOP_P};

pub const DEFAULT_BIND: &str = "127.0.0.1:8700";

/// One layer of optional settings. Clap fills it from flags (falling back
/// to the environment); serde fills it from the config file.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// Draft length per round (0 = client-only decoding)
    #[arg(long, env = "SPECRAG_K")]
    pub k: Option<usize>,
    /// Rejection threshold on P(draft)/P(argmax)
    #[arg(long, env = "SPECRAG_TAU")]
    pub tau: Option<f64>,
    /// Profile entries retrieved per query
    #[arg(long, env = "SPECRAG_M")]
    pub m: Option<usize>,
    #[arg(long, env = "SPECRAG_MAX_NEW_TOKENS")]
    pub max_new_tokens: Option<usize>,
    /// Seed for the server's nucleus sampler
    #[arg(long, env = "SPECRAG_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "SPECRAG_TOP_P")]
    pub top_p: Option<f64>,
    #[arg(long, env = "SPECRAG_TEMPERATURE")]
    pub temperature: Option<f64>,
    /// Server drafts greedily instead of nucleus sampling
    #[arg(long, env = "SPECRAG_GREEDY", num_args = 0..=1, default_missing_value = "true")]
    pub greedy: Option<bool>,
    /// Run even when the profile is empty
    #[arg(long, env = "SPECRAG_ALLOW_NON_PERSONALIZED", num_args = 0..=1, default_missing_value = "true")]
    pub allow_non_personalized: Option<bool>,

    /// Base URL of a running draft server
    #[arg(long, env = "SPECRAG_SERVER")]
    pub server: Option<String>,
    /// Run the draft service inside this process
    #[arg(long, env = "SPECRAG_IN_PROCESS", num_args = 0..=1, default_missing_value = "true")]
    pub in_process: Option<bool>,
    /// Table model file for the server side
    #[arg(long, env = "SPECRAG_SERVER_TABLE")]
    pub server_table: Option<PathBuf>,
    /// Completions endpoint for the server side
    #[arg(long, env = "SPECRAG_SERVER_REMOTE")]
    pub server_remote: Option<String>,
    /// Table model file for the client side
    #[arg(long, env = "SPECRAG_CLIENT_TABLE")]
    pub client_table: Option<PathBuf>,
    /// Completions endpoint for the client side
    #[arg(long, env = "SPECRAG_CLIENT_REMOTE")]
    pub client_remote: Option<String>,
    /// Model name sent to completions endpoints
    #[arg(long, env = "SPECRAG_REMOTE_MODEL")]
    pub remote_model: Option<String>,
    /// Vocabulary file (YAML/JSON) for remote models
    #[arg(long, env = "SPECRAG_REMOTE_VOCAB")]
    pub remote_vocab: Option<PathBuf>,
    #[arg(long, env = "SPECRAG_TOP_LOGPROBS")]
    pub top_logprobs: Option<usize>,

    /// Extra literal to redact (repeatable)
    #[arg(long = "deny-keyword", env = "SPECRAG_DENY_KEYWORDS", value_delimiter = ',')]
    #[serde(default)]
    pub deny_keywords: Vec<String>,
    /// PII pattern overrides (YAML, category: regex)
    #[arg(long, env = "SPECRAG_PII_PATTERNS")]
    pub pii_patterns: Option<PathBuf>,
    /// Server prompt template (must contain {query})
    #[arg(long, env = "SPECRAG_TEMPLATE_GEN")]
    pub template_gen: Option<PathBuf>,
    /// Client prompt template (must contain {context} and {query})
    #[arg(long, env = "SPECRAG_TEMPLATE_RAG")]
    pub template_rag: Option<PathBuf>,

    #[arg(long, env = "SPECRAG_TIMEOUT_SECS")]
    pub timeout_secs: Option<f64>,
    #[arg(long, env = "SPECRAG_RETRIES")]
    pub retries: Option<usize>,
    /// Listen address for `serve`
    #[arg(long, env = "SPECRAG_BIND")]
    pub bind: Option<String>,
    /// Model name reported by `serve`
    #[arg(long, env = "SPECRAG_MODEL_NAME")]
    pub model_name: Option<String>,
}

/// Every effective value after merging.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliConfig {
    pub k: usize,
    pub tau: f64,
    pub m: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub top_p: f64,
    pub temperature: f64,
    pub greedy: bool,
    pub allow_non_personalized: bool,
    pub server: Option<String>,
    pub in_process: bool,
    pub server_table: Option<PathBuf>,
    pub server_remote: Option<String>,
    pub client_table: Option<PathBuf>,
    pub client_remote: Option<String>,
    pub remote_model: String,
    pub remote_vocab: Option<PathBuf>,
    pub top_logprobs: usize,
    pub deny_keywords: Vec<String>,
    pub pii_patterns: Option<PathBuf>,
    pub template_gen: Option<PathBuf>,
    pub template_rag: Option<PathBuf>,
    pub timeout_secs: f64,
    pub retries: usize,
    pub bind: String,
    pub model_name: String,
}

impl Layer {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        serde_yaml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Settings from `self`, falling back to `lower` field by field.
    pub fn over(self, lower: Layer) -> Layer {
        macro_rules! pick {
            ($($f:ident),*) => { Layer { $($f: self.$f.or(lower.$f),)* deny_keywords: if self.deny_keywords.is_empty() { lower.deny_keywords } else { self.deny_keywords } } };
        }
        pick!(
            k, tau, m, max_new_tokens, seed, top_p, temperature, greedy, allow_non_personalized, server, in_process,
            server_table, server_remote, client_table, client_remote, remote_model, remote_vocab, top_logprobs,
            pii_patterns, template_gen, template_rag, timeout_secs, retries, bind, model_name
        )
    }

    pub fn resolve(self) -> CliConfig {
        CliConfig {
            k: self.k.unwrap_or(DEFAULT_K),
            tau: self.tau.unwrap_or(DEFAULT_TAU),
            m: self.m.unwrap_or(DEFAULT_M),
            max_new_tokens: self.max_new_tokens.unwrap_or(DEFAULT_MAX_NEW_TOKENS),
            seed: self.seed.unwrap_or(0),
            top_p: self.top_p.unwrap_or(DEFAULT_TOP_P),
            temperature: self.temperature.unwrap_or(DEFAULT_TEMPERATURE),
            greedy: self.greedy.unwrap_or(false),
            allow_non_personalized: self.allow_non_personalized.unwrap_or(false),
            server: self.server,
            in_process: self.in_process.unwrap_or(false),
            server_table: self.server_table,
            server_remote: self.server_remote,
            client_table: self.client_table,
            client_remote: self.client_remote,
            remote_model: self.remote_model.unwrap_or_else(|| "default".into()),
            remote_vocab: self.remote_vocab,
            top_logprobs: self.top_logprobs.unwrap_or(20),
            deny_keywords: self.deny_keywords,
            pii_patterns: self.pii_patterns,
            template_gen: self.template_gen,
            template_rag: self.template_rag,
            timeout_secs: self.timeout_secs.unwrap_or(30.0),
            retries: self.retries.unwrap_or(3),
            bind: self.bind.unwrap_or_else(|| DEFAULT_BIND.into()),
            model_name: self.model_name.unwrap_or_else(|| "table".into()),
        }
    }
}

impl CliConfig {
    pub fn load(flags: Layer, file: Option<&Path>) -> anyhow::Result<Self> {
        let file_layer = match file {
            Some(p) => Layer::from_file(p)?,
            None => Layer::default(),
        };
        Ok(flags.over(file_layer).resolve())
    }

    pub fn protocol(&self) -> anyhow::Result<ProtocolConfig> {
        let sampling = if self.greedy {
            Sampling::Greedy
        } else {
            Sampling::Nucleus {
                top_p: self.top_p,
                temperature: self.temperature,
                seed: self.seed,
            }
        };
        let config = ProtocolConfig {
            k: self.k,
            tau: self.tau,
            m: self.m,
            max_new_tokens: self.max_new_tokens,
            sampling,
            allow_non_personalized: self.allow_non_personalized,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn timeout(&self) -> anyhow::Result<std::time::Duration> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            bail!("timeout_secs must be positive");
        }
        Ok(std::time::Duration::from_secs_f64(self.timeout_secs))
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }
}
