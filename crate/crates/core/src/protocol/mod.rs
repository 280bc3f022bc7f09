//! Wire schemas and the stateless server-side draft service.
//!
//! [`DraftRequest`] is the only message the client ever sends. It has no
//! field for profile documents, retrieved context or PII spans, and unknown
//! fields are rejected on decode.

mod http;
mod service;
mod transport;

pub use http::{router, serve_until, spawn_draft_server, DraftServerHandle, HttpTransport, RetryPolicy};
pub use service::DraftService;
pub use transport::{DraftTransport, InProcessTransport, TappedTransport, TransportError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Sampling;
use crate::vocab::{Token, VocabDigest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DraftRequest {
    pub session_id: String,
    pub server_history_text: String,
    pub k: usize,
    pub sampling: Sampling,
    pub vocab_digest: VocabDigest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Finish {
    Length,
    Eos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DraftResponse {
    pub tokens: Vec<Token>,
    pub finish: Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMeta {
    pub model_name: String,
    pub vocab_digest: VocabDigest,
    pub max_context: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error_kind: String,
    pub detail: String,
}

/// Errors the draft service reports to its caller.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("vocabulary mismatch: server has {server}, request has {request}")]
    VocabularyMismatch {
        server: VocabDigest,
        request: VocabDigest,
    },
    #[error("context too long: {detail}")]
    ContextTooLong { detail: String },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl ProtocolError {
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolError::VocabularyMismatch { .. } => "vocabulary_mismatch",
            ProtocolError::ContextTooLong { .. } => "context_too_long",
            ProtocolError::BackendUnavailable(_) => "backend_unavailable",
            ProtocolError::BadRequest(_) => "bad_request",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ProtocolError::VocabularyMismatch { .. } | ProtocolError::BadRequest(_) => 400,
            ProtocolError::ContextTooLong { .. } => 413,
            ProtocolError::BackendUnavailable(_) => 503,
        }
    }

    pub fn to_body(&self) -> ErrorBody {
        let detail = match self {
            ProtocolError::VocabularyMismatch { server, request } => {
                format!("server={server} request={request}")
            }
            ProtocolError::ContextTooLong { detail }
            | ProtocolError::BackendUnavailable(detail)
            | ProtocolError::BadRequest(detail) => detail.clone(),
        };
        ErrorBody {
            error_kind: self.kind().to_string(),
            detail,
        }
    }

    pub fn from_body(body: ErrorBody) -> Self {
        match body.error_kind.as_str() {
            "vocabulary_mismatch" => {
                let mut server = String::new();
                let mut request = String::new();
                for part in body.detail.split(' ') {
                    if let Some(v) = part.strip_prefix("server=") {
                        server = v.to_string();
                    } else if let Some(v) = part.strip_prefix("request=") {
                        request = v.to_string();
                    }
                }
                ProtocolError::VocabularyMismatch {
                    server: VocabDigest(server),
                    request: VocabDigest(request),
                }
            }
            "context_too_long" => ProtocolError::ContextTooLong { detail: body.detail },
            "backend_unavailable" => ProtocolError::BackendUnavailable(body.detail),
            _ => ProtocolError::BadRequest(body.detail),
        }
    }
}

/// Canonical request encoding; the in-process and HTTP transports both send
/// exactly these bytes.
pub fn encode_request(request: &DraftRequest) -> Vec<u8> {
    serde_json::to_vec(request).expect("draft request serializes")
}

pub fn decode_request(bytes: &[u8]) -> Result<DraftRequest, ProtocolError> {
    serde_json::from_slice(bytes).map_err(|e| ProtocolError::BadRequest(e.to_string()))
}

pub fn encode_response(response: &DraftResponse) -> Vec<u8> {
    serde_json::to_vec(response).expect("draft response serializes")
}

pub fn decode_response(bytes: &[u8]) -> Result<DraftResponse, serde_json::Error> {
    serde_json::from_slice(bytes)
}

/// Field names of every client-to-server message, as serialized.
pub const CLIENT_TO_SERVER_FIELDS: [&str; 5] = ["session_id", "server_history_text", "k", "sampling", "vocab_digest"];
