//! Token-distribution interface shared by the server and client models.
//!
//! All probability math is in natural-log space. Argmax ties resolve to the
//! lowest token id everywhere so greedy decoding is reproducible.

mod remote;
mod sampling;
mod table;

pub use remote::{CompletionChoice, CompletionRequest, CompletionResponse, RemoteLm, RemoteLmConfig, TopLogprob};
pub use sampling::{sample_from, step_rng};
pub use table::{TableLm, TableLmFile, TableRow};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Sampling;
use crate::vocab::{TokenId, VocabError, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("context of {len} tokens exceeds the limit of {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("invalid table: {0}")]
    InvalidTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Server,
    Client,
}

/// Next-token log-distribution. Remote models only expose their top-K.
#[derive(Debug, Clone, PartialEq)]
pub enum LogDistribution {
    Full(Vec<f64>),
    TopK(Vec<(TokenId, f64)>),
}

impl LogDistribution {
    /// Log-probability of `token`; tokens outside a top-K list get `-inf`.
    pub fn logp(&self, token: TokenId) -> f64 {
        match self {
            LogDistribution::Full(lp) => lp.get(token as usize).copied().unwrap_or(f64::NEG_INFINITY),
            LogDistribution::TopK(entries) => entries
                .iter()
                .find(|(id, _)| *id == token)
                .map_or(f64::NEG_INFINITY, |(_, lp)| *lp),
        }
    }

    /// Most probable token, lowest id on ties.
    pub fn argmax(&self) -> (TokenId, f64) {
        let mut best: Option<(TokenId, f64)> = None;
        for (id, lp) in self.iter() {
            best = match best {
                Some((bid, blp)) if blp > lp || (blp == lp && bid < id) => Some((bid, blp)),
                _ => Some((id, lp)),
            };
        }
        best.unwrap_or((0, f64::NEG_INFINITY))
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = (TokenId, f64)> + '_> {
        match self {
            LogDistribution::Full(lp) => {
                Box::new(lp.iter().enumerate().map(|(i, &l)| (i as TokenId, l)))
            }
            LogDistribution::TopK(entries) => Box::new(entries.iter().copied()),
        }
    }

    /// Sum of probabilities over the support this distribution exposes.
    pub fn total_mass(&self) -> f64 {
        self.iter().map(|(_, lp)| lp.exp()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenScore {
    pub logp_token: f64,
    pub logp_argmax: f64,
    pub argmax_token: TokenId,
}

impl TokenScore {
    /// `log(P(token) / P(argmax))`, always `<= 0`.
    pub fn log_ratio(&self) -> f64 {
        self.logp_token - self.logp_argmax
    }
}

pub trait LmBackend: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    fn max_context(&self) -> usize;

    fn next_distribution(&self, context: &[TokenId]) -> Result<LogDistribution, LmError>;

    fn score_token(&self, context: &[TokenId], token: TokenId) -> Result<TokenScore, LmError> {
        self.vocabulary().check_ids(&[token])?;
        let dist = self.next_distribution(context)?;
        let (argmax_token, logp_argmax) = dist.argmax();
        Ok(TokenScore {
            logp_token: dist.logp(token),
            logp_argmax,
            argmax_token,
        })
    }

    /// Autoregressive sample of up to `k` tokens. Stops early only after
    /// emitting EOS.
    fn sample_k(
        &self,
        context: &[TokenId],
        k: usize,
        sampling: &Sampling,
    ) -> Result<Vec<TokenId>, LmError> {
        let eos = self.vocabulary().eos_id();
        let mut ctx = context.to_vec();
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let dist = self.next_distribution(&ctx)?;
            let next = sample_from(&dist, sampling, ctx.len());
            out.push(next);
            ctx.push(next);
            if next == eos {
                break;
            }
        }
        Ok(out)
    }
}

impl<T: LmBackend + ?Sized> LmBackend for std::sync::Arc<T> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
    fn max_context(&self) -> usize {
        (**self).max_context()
    }
    fn next_distribution(&self, context: &[TokenId]) -> Result<LogDistribution, LmError> {
        (**self).next_distribution(context)
    }
    fn score_token(&self, context: &[TokenId], token: TokenId) -> Result<TokenScore, LmError> {
        (**self).score_token(context, token)
    }
    fn sample_k(
        &self,
        context: &[TokenId],
        k: usize,
        sampling: &Sampling,
    ) -> Result<Vec<TokenId>, LmError> {
        (**self).sample_k(context, k, sampling)
    }
}

/// Greedy decode of up to `max_tokens`, stopping after EOS.
pub fn greedy_decode(
    backend: &dyn LmBackend,
    context: &[TokenId],
    max_tokens: usize,
) -> Result<Vec<TokenId>, LmError> {
    backend.sample_k(context, max_tokens, &Sampling::Greedy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        let d = LogDistribution::Full(vec![-2.0, -0.5, -0.5, -3.0]);
        assert_eq!(d.argmax(), (1, -0.5));
        let t = LogDistribution::TopK(vec![(7, -0.7), (3, -0.7), (9, -1.0)]);
        assert_eq!(t.argmax(), (3, -0.7));
    }

    #[test]
    fn topk_absent_is_neg_inf() {
        let t = LogDistribution::TopK(vec![(1, -0.1)]);
        assert_eq!(t.logp(2), f64::NEG_INFINITY);
        assert_eq!(t.logp(1), -0.1);
    }
}
