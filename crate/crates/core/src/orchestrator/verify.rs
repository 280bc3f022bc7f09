use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::log_threshold;
use crate::lm::{LmBackend, LmError};
use crate::vocab::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("draft is empty")]
    EmptyDraft,
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accepted,
    Corrected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationRecord {
    pub draft_token: TokenId,
    pub logp_token: f64,
    pub logp_argmax: f64,
    pub argmax_token: TokenId,
    pub decision: Decision,
    pub emitted_token: TokenId,
}

/// Per-round verification result. Records stop at the first correction.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationOutcome {
    pub records: Vec<VerificationRecord>,
    pub accepted_count: usize,
    pub corrected: usize,
}

impl VerificationOutcome {
    pub fn emitted(&self) -> Vec<TokenId> {
        self.records.iter().map(|r| r.emitted_token).collect()
    }
}

/// Walks the draft in order, scoring each token under the client model on
/// `client_history` plus the tokens already kept. A token is kept while
/// `log P(token) - log P(argmax) >= ln tau`; the first one that fails is
/// replaced by the client argmax and the rest of the draft is dropped.
pub fn verify_batch(
    client: &dyn LmBackend,
    client_history: &[TokenId],
    draft: &[TokenId],
    tau: f64,
) -> Result<VerificationOutcome, VerifyError> {
    if draft.is_empty() {
        return Err(VerifyError::EmptyDraft);
    }
    let log_tau = log_threshold(tau);
    let eos = client.vocabulary().eos_id();
    let mut context = client_history.to_vec();
    let mut records = Vec::with_capacity(draft.len());
    let mut corrected = 0;
    for &token in draft {
        let score = client.score_token(&context, token)?;
        let accept = score.log_ratio() >= log_tau;
        let emitted = if accept { token } else { score.argmax_token };
        records.push(VerificationRecord {
            draft_token: token,
            logp_token: score.logp_token,
            logp_argmax: score.logp_argmax,
            argmax_token: score.argmax_token,
            decision: if accept { Decision::Accepted } else { Decision::Corrected },
            emitted_token: emitted,
        });
        context.push(emitted);
        if !accept {
            corrected = 1;
            break;
        }
        if token == eos {
            break;
        }
    }
    let accepted_count = records.len() - corrected;
    Ok(VerificationOutcome {
        records,
        accepted_count,
        corrected,
    })
}
