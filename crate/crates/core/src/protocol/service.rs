use std::sync::Arc;

use super::{DraftRequest, DraftResponse, Finish, ProtocolError, ServerMeta};
use crate::lm::{LmBackend, LmError};

/// Stateless draft proposer: the response depends only on the request.
pub struct DraftService {
    backend: Arc<dyn LmBackend>,
    model_name: String,
}

impl DraftService {
    pub fn new(backend: Arc<dyn LmBackend>, model_name: impl Into<String>) -> Self {
        Self {
            backend,
            model_name: model_name.into(),
        }
    }

    pub fn meta(&self) -> ServerMeta {
        ServerMeta {
            model_name: self.model_name.clone(),
            vocab_digest: self.backend.vocabulary().digest().clone(),
            max_context: self.backend.max_context() as u64,
        }
    }

    pub fn serve(&self, request: &DraftRequest) -> Result<DraftResponse, ProtocolError> {
        let vocab = self.backend.vocabulary();
        if &request.vocab_digest != vocab.digest() {
            return Err(ProtocolError::VocabularyMismatch {
                server: vocab.digest().clone(),
                request: request.vocab_digest.clone(),
            });
        }
        if request.k == 0 {
            return Err(ProtocolError::BadRequest("k must be >= 1".into()));
        }
        request
            .sampling
            .validate()
            .map_err(|e| ProtocolError::BadRequest(e.to_string()))?;
        let context = vocab
            .tokenize(&request.server_history_text)
            .map_err(|e| ProtocolError::BadRequest(e.to_string()))?;
        let max = self.backend.max_context();
        if context.len() > max {
            return Err(ProtocolError::ContextTooLong {
                detail: format!("{} tokens exceeds {max}", context.len()),
            });
        }
        let ids = self
            .backend
            .sample_k(&context, request.k, &request.sampling)
            .map_err(map_lm_error)?;
        let finish = if ids.last().is_some_and(|&id| vocab.is_eos(id)) {
            Finish::Eos
        } else {
            Finish::Length
        };
        let tokens = ids
            .into_iter()
            .map(|id| vocab.token(id))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ProtocolError::BackendUnavailable(e.to_string()))?;
        Ok(DraftResponse { tokens, finish })
    }
}

fn map_lm_error(e: LmError) -> ProtocolError {
    match e {
        LmError::ContextTooLong { .. } => ProtocolError::ContextTooLong { detail: e.to_string() },
        LmError::Vocab(v) => ProtocolError::BadRequest(v.to_string()),
        other => ProtocolError::BackendUnavailable(other.to_string()),
    }
}
