use thiserror::Error;

use crate::config::{ConfigError, ProtocolConfig};
use crate::pii::PiiSpanSet;
use crate::vocab::{TokenId, VocabDigest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("vocabulary mismatch: client {client}, server {server}")]
    VocabularyMismatch { client: VocabDigest, server: VocabDigest },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Mutable state of one query's generation. Single writer: only the
/// orchestration loop touches it.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub query: String,
    pub config: ProtocolConfig,
    /// Client prompt tokens followed by response tokens.
    pub client_history: Vec<TokenId>,
    /// Filtered text the server conditions on.
    pub server_history_text: String,
    /// Tokens verified in the current round.
    pub verified: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub pii_spans: PiiSpanSet,
    pub rounds: u32,
    client_prompt_len: usize,
}

impl SessionState {
    pub fn client_prompt_len(&self) -> usize {
        self.client_prompt_len
    }

    pub fn init_histories(&mut self, client_prompt: Vec<TokenId>, server_text: String) {
        self.client_prompt_len = client_prompt.len();
        self.client_history = client_prompt;
        self.server_history_text = server_text;
    }

    /// Appends the round's verified buffer to the response and the client
    /// history, then clears it.
    pub fn commit_round(&mut self) {
        self.response.extend_from_slice(&self.verified);
        self.client_history.extend_from_slice(&self.verified);
        self.verified.clear();
    }

    pub fn remaining_budget(&self) -> usize {
        self.config.max_new_tokens.saturating_sub(self.response.len())
    }
}

pub fn new_session(
    query: &str,
    config: ProtocolConfig,
    vocab_digest_client: &VocabDigest,
    vocab_digest_server: &VocabDigest,
) -> Result<SessionState, SessionError> {
    if query.trim().is_empty() {
        return Err(SessionError::EmptyQuery);
    }
    config.validate()?;
    if vocab_digest_client != vocab_digest_server {
        return Err(SessionError::VocabularyMismatch {
            client: vocab_digest_client.clone(),
            server: vocab_digest_server.clone(),
        });
    }
    Ok(SessionState {
        query: query.to_string(),
        config,
        client_history: Vec::new(),
        server_history_text: String::new(),
        verified: Vec::new(),
        response: Vec::new(),
        pii_spans: PiiSpanSet::new(),
        rounds: 0,
        client_prompt_len: 0,
    })
}
