use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LmBackend, LmError, LogDistribution};
use crate::config::Sampling;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteLmConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub top_logprobs: usize,
    #[serde(with = "secs")]
    pub timeout: Duration,
    /// Name of the environment variable holding a bearer token, if any.
    pub auth_token_env: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub max_context: Option<usize>,
}

fn default_in_flight() -> usize {
    8
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl RemoteLmConfig {
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            top_logprobs: 20,
            timeout: Duration::from_secs(30),
            auth_token_env: "SPECRAG_AUTH_TOKEN".into(),
            max_in_flight: default_in_flight(),
            max_context: None,
        }
    }
}

/// Completions-with-logprobs request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt_token_ids: Vec<TokenId>,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub logprobs: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token_id: TokenId,
    pub logprob: f64,
}

/// Per generated position: the sampled id and the top-K alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionChoice {
    pub token_ids: Vec<TokenId>,
    pub top_logprobs: Vec<Vec<TopLogprob>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CompletionResponse {
    Choices { choices: Vec<CompletionChoice> },
    Bare(CompletionChoice),
}

impl CompletionResponse {
    fn into_choice(self) -> Option<CompletionChoice> {
        match self {
            CompletionResponse::Choices { mut choices } => {
                (!choices.is_empty()).then(|| choices.swap_remove(0))
            }
            CompletionResponse::Bare(c) => Some(c),
        }
    }
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().unwrap_or_else(|p| p.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.count.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Backend reached over a completions-with-logprobs HTTP API. Only the
/// top-K of each distribution is visible; anything outside it scores `-inf`.
pub struct RemoteLm {
    config: RemoteLmConfig,
    vocab: Vocabulary,
    http: reqwest::blocking::Client,
    auth: Option<String>,
    in_flight: InFlight,
}

impl RemoteLm {
    pub fn new(config: RemoteLmConfig, vocab: Vocabulary) -> Result<Self, LmError> {
        if config.top_logprobs == 0 {
            return Err(LmError::InvalidTable("top_logprobs must be >= 1".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LmError::BackendUnavailable(e.to_string()))?;
        let auth = std::env::var(&config.auth_token_env).ok();
        let limit = config.max_in_flight.max(1);
        Ok(Self {
            config,
            vocab,
            http,
            auth,
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                limit,
            },
        })
    }

    pub fn config(&self) -> &RemoteLmConfig {
        &self.config
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionChoice, LmError> {
        let _slot = self.in_flight.acquire();
        let mut builder = self.http.post(&self.config.endpoint_url).json(request);
        if let Some(token) = &self.auth {
            builder = builder.bearer_auth(token);
        }
        let resp = builder
            .send()
            .map_err(|e| LmError::BackendUnavailable(e.to_string()))?;
        let status = resp.status();
        if status == reqwest::StatusCode::PAYLOAD_TOO_LARGE {
            return Err(LmError::ContextTooLong {
                len: request.prompt_token_ids.len(),
                max: self.max_context(),
            });
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(LmError::BackendUnavailable(format!("HTTP {status}: {body}")));
        }
        let parsed: CompletionResponse = resp
            .json()
            .map_err(|e| LmError::BackendUnavailable(format!("bad completion body: {e}")))?;
        let choice = parsed
            .into_choice()
            .ok_or_else(|| LmError::BackendUnavailable("empty completion".into()))?;
        self.vocab.check_ids(&choice.token_ids)?;
        Ok(choice)
    }

    fn request(&self, context: &[TokenId], max_tokens: usize, sampling: &Sampling) -> CompletionRequest {
        let (temperature, top_p, seed) = match *sampling {
            Sampling::Greedy => (0.0, 1.0, None),
            Sampling::Nucleus {
                top_p,
                temperature,
                seed,
            } => (temperature, top_p, Some(seed)),
        };
        CompletionRequest {
            model: self.config.model_name.clone(),
            prompt_token_ids: context.to_vec(),
            max_tokens,
            temperature,
            top_p,
            logprobs: self.config.top_logprobs,
            seed,
        }
    }

    fn check_len(&self, context: &[TokenId]) -> Result<(), LmError> {
        if context.len() > self.max_context() {
            return Err(LmError::ContextTooLong {
                len: context.len(),
                max: self.max_context(),
            });
        }
        Ok(())
    }
}

impl LmBackend for RemoteLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_context(&self) -> usize {
        self.config.max_context.unwrap_or(usize::MAX)
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<LogDistribution, LmError> {
        self.check_len(context)?;
        let choice = self.complete(&self.request(context, 1, &Sampling::Greedy))?;
        let first = choice
            .top_logprobs
            .into_iter()
            .next()
            .ok_or_else(|| LmError::BackendUnavailable("no logprobs returned".into()))?;
        let entries: Vec<(TokenId, f64)> = first.into_iter().map(|t| (t.token_id, t.logprob)).collect();
        let ids: Vec<TokenId> = entries.iter().map(|e| e.0).collect();
        self.vocab.check_ids(&ids)?;
        Ok(LogDistribution::TopK(entries))
    }

    fn sample_k(
        &self,
        context: &[TokenId],
        k: usize,
        sampling: &Sampling,
    ) -> Result<Vec<TokenId>, LmError> {
        self.check_len(context)?;
        let choice = self.complete(&self.request(context, k, sampling))?;
        let eos = self.vocab.eos_id();
        let mut out = Vec::with_capacity(k);
        for id in choice.token_ids.into_iter().take(k) {
            out.push(id);
            if id == eos {
                break;
            }
        }
        Ok(out)
    }
}
