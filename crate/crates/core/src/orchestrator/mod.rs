//! Client-side generation loop.
//!
//! Each round the server drafts up to `k` tokens from the filtered,
//! context-free history; the client verifies them against its own
//! retrieval-conditioned history, corrects the first token it rejects, and
//! the filtered result becomes the next server history. Generation ends when
//! EOS is accepted or emitted, or when the token budget runs out.

mod bench;
mod stats;
mod templates;
mod verify;

pub use bench::{bench_sweep, BenchCase, BenchError, CellReport, SweepGrid, SweepReport, AGGREGATE_HEADER};
pub use stats::{compute_stats, round_records, stats_from_rounds, RoundRecord, SessionStats, StatsError};
pub use templates::{format_context, PromptTemplates, TemplateError, CONTEXT_SLOT, QUERY_SLOT};
pub use verify::{verify_batch, Decision, VerificationOutcome, VerificationRecord, VerifyError};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ProtocolConfig;
use crate::lm::{LmBackend, LmError};
use crate::pii::{PiiDetector, PiiSpanSet};
use crate::protocol::{DraftRequest, DraftTransport, ProtocolError, TransportError};
use crate::retrieval::{RetrievalError, RetrievedContext, Retriever, UserProfile};
use crate::session::{new_session, SessionError, SessionState};
use crate::transcript::{EventBody, Transcript, TranscriptError, TruncationReason};
use crate::vocab::{TokenId, VocabError};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("draft service: {0}")]
    Transport(#[from] TransportError),
    #[error("client model: {0}")]
    Client(#[from] LmError),
    #[error("client prompt: {0}")]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error("replay: {0}")]
    Replay(String),
}

/// Why a session stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Eos,
    MaxNewTokens,
    ContextTooLong(String),
    TransportError(String),
    BackendUnavailable(String),
}

impl Termination {
    pub fn is_failure(&self) -> bool {
        matches!(self, Termination::TransportError(_) | Termination::BackendUnavailable(_))
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub response: String,
    pub response_tokens: Vec<TokenId>,
    pub transcript: Transcript,
    pub stats: SessionStats,
    pub termination: Termination,
}

/// Everything a session needs besides the query, profile and config.
/// Shared read-only across concurrently running sessions.
#[derive(Clone, Copy)]
pub struct Orchestrator<'a> {
    pub client: &'a dyn LmBackend,
    pub transport: &'a dyn DraftTransport,
    pub retriever: &'a dyn Retriever,
    pub detector: &'a PiiDetector,
    pub templates: &'a PromptTemplates,
    pub custom_keywords: &'a [String],
}

/// Deterministic id from the query and config, so reruns log identical
/// transcripts.
pub fn derive_session_id(user_id: &str, query: &str, config: &ProtocolConfig) -> String {
    let mut h = Sha256::new();
    h.update(user_id.as_bytes());
    h.update([0]);
    h.update(query.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(config).expect("config serializes"));
    // nibbles as a..p: no digit runs for the PII patterns to trip over
    h.finalize()[..8]
        .iter()
        .flat_map(|b| [b >> 4, b & 0xf])
        .map(|n| char::from(b'a' + n))
        .collect()
}

enum RoundEnd {
    Continue,
    Stop(Termination),
}

impl Orchestrator<'_> {
    pub fn run_session(
        &self,
        session_id: &str,
        query: &str,
        profile: &UserProfile,
        config: &ProtocolConfig,
    ) -> Result<SessionOutcome, OrchestratorError> {
        config.validate().map_err(SessionError::from)?;
        let client_vocab = self.client.vocabulary();
        let server_digest = if config.k == 0 {
            client_vocab.digest().clone()
        } else {
            self.transport.meta()?.vocab_digest
        };
        let mut state = new_session(query, *config, client_vocab.digest(), &server_digest)?;

        let context = if profile.is_empty() {
            if !config.allow_non_personalized {
                return Err(RetrievalError::EmptyProfile.into());
            }
            RetrievedContext::default()
        } else {
            self.retriever.retrieve(profile, query, config.m)?
        };
        state.pii_spans = self.detector.extract_pii(&context, self.custom_keywords);

        let server_query = self.detector.filter_pii(query, &state.pii_spans);
        let server_prompt = self.templates.render_gen(&server_query);
        let client_prompt = client_vocab.tokenize(&self.templates.render_rag(&context, query))?;
        let initial_server_text = self.detector.filter_pii(&server_prompt, &state.pii_spans);
        state.init_histories(client_prompt, initial_server_text);

        let mut transcript = Transcript::new(session_id);
        transcript.record(
            0,
            EventBody::Retrieved {
                query: query.to_string(),
                user_id: profile.user_id.clone(),
                config: *config,
                doc_ids: context.docs.iter().map(|d| d.doc.doc_id).collect(),
                scores: context.docs.iter().map(|d| d.score).collect(),
            },
        )?;
        transcript.record(
            0,
            EventBody::PiiExtracted {
                spans: state.pii_spans.iter().cloned().collect(),
                server_query,
            },
        )?;

        let termination = loop {
            if state.remaining_budget() == 0 {
                break Termination::MaxNewTokens;
            }
            state.rounds += 1;
            let end = if config.k == 0 {
                self.client_only_round(&mut state, &mut transcript)?
            } else {
                self.draft_round(session_id, &mut state, &mut transcript)?
            };
            if let RoundEnd::Stop(t) = end {
                break t;
            }
            let response_text = client_vocab.detokenize(&state.response)?;
            state.server_history_text = self
                .detector
                .filter_pii(&format!("{server_prompt}{response_text}"), &state.pii_spans);
            debug_assert!(self.detector.scan(&state.server_history_text, &state.pii_spans).is_empty());
            transcript.record(
                state.rounds,
                EventBody::PiiFiltered {
                    server_history_text: state.server_history_text.clone(),
                },
            )?;
            if state.response.last().is_some_and(|&t| client_vocab.is_eos(t)) {
                break Termination::Eos;
            }
        };

        let (body, round) = match &termination {
            Termination::Eos => (EventBody::Eos {}, state.rounds),
            other => {
                let (reason, detail) = match other {
                    Termination::MaxNewTokens => (TruncationReason::MaxNewTokens, None),
                    Termination::ContextTooLong(d) => (TruncationReason::ContextTooLong, Some(d.clone())),
                    Termination::TransportError(d) => (TruncationReason::TransportError, Some(d.clone())),
                    Termination::BackendUnavailable(d) => {
                        (TruncationReason::BackendUnavailable, Some(d.clone()))
                    }
                    Termination::Eos => unreachable!(),
                };
                (EventBody::Truncated { reason, detail }, state.rounds.max(transcript.current_round()))
            }
        };
        transcript.record(round, body)?;

        let stats = compute_stats(&transcript).expect("terminal event recorded");
        Ok(SessionOutcome {
            response: client_vocab.detokenize(&state.response)?,
            response_tokens: state.response,
            transcript,
            stats,
            termination,
        })
    }

    fn client_only_round(
        &self,
        state: &mut SessionState,
        transcript: &mut Transcript,
    ) -> Result<RoundEnd, OrchestratorError> {
        let vocab = self.client.vocabulary();
        let dist = match self.client.next_distribution(&state.client_history) {
            Ok(d) => d,
            Err(e) => return Ok(RoundEnd::Stop(client_failure(e))),
        };
        let (argmax, logp) = dist.argmax();
        transcript.record(
            state.rounds,
            EventBody::TokenCorrected {
                draft: None,
                emitted: vocab.token(argmax)?,
                logp_token: f64::NEG_INFINITY,
                logp_argmax: logp,
            },
        )?;
        state.verified = vec![argmax];
        state.commit_round();
        Ok(RoundEnd::Continue)
    }

    fn draft_round(
        &self,
        session_id: &str,
        state: &mut SessionState,
        transcript: &mut Transcript,
    ) -> Result<RoundEnd, OrchestratorError> {
        let vocab = self.client.vocabulary();
        let request = DraftRequest {
            session_id: session_id.to_string(),
            server_history_text: state.server_history_text.clone(),
            k: state.config.k.min(state.remaining_budget()),
            sampling: state.config.sampling,
            vocab_digest: vocab.digest().clone(),
        };
        let response = match self.transport.request_draft(&request) {
            Ok(r) => r,
            Err(TransportError::Remote(ProtocolError::ContextTooLong { detail })) => {
                return Ok(RoundEnd::Stop(Termination::ContextTooLong(detail)))
            }
            Err(TransportError::Remote(ProtocolError::BackendUnavailable(d))) => {
                return Ok(RoundEnd::Stop(Termination::BackendUnavailable(d)))
            }
            Err(TransportError::Remote(ProtocolError::VocabularyMismatch { server, request })) => {
                return Err(SessionError::VocabularyMismatch {
                    client: request,
                    server,
                }
                .into())
            }
            Err(e) => return Ok(RoundEnd::Stop(Termination::TransportError(e.to_string()))),
        };
        let draft: Vec<TokenId> = response.tokens.iter().map(|t| t.id).collect();
        let malformed = draft.is_empty()
            || draft.len() > request.k
            || vocab.check_ids(&draft).is_err()
            || response.tokens.iter().any(|t| vocab.surface(t.id).ok() != Some(t.surface.as_str()));
        transcript.record(
            state.rounds,
            EventBody::DraftProposed {
                request,
                response: response.clone(),
            },
        )?;
        if malformed {
            return Ok(RoundEnd::Stop(Termination::TransportError(
                "draft violates the response schema".into(),
            )));
        }

        let outcome = match verify_batch(self.client, &state.client_history, &draft, state.config.tau) {
            Ok(o) => o,
            Err(VerifyError::Lm(e)) => return Ok(RoundEnd::Stop(client_failure(e))),
            Err(VerifyError::EmptyDraft) => unreachable!("checked above"),
        };
        for rec in &outcome.records {
            let body = match rec.decision {
                Decision::Accepted => EventBody::TokenAccepted {
                    token: vocab.token(rec.emitted_token)?,
                    logp_token: rec.logp_token,
                    logp_argmax: rec.logp_argmax,
                },
                Decision::Corrected => EventBody::TokenCorrected {
                    draft: Some(vocab.token(rec.draft_token)?),
                    emitted: vocab.token(rec.emitted_token)?,
                    logp_token: rec.logp_token,
                    logp_argmax: rec.logp_argmax,
                },
            };
            transcript.record(state.rounds, body)?;
        }
        state.verified = outcome.emitted();
        state.commit_round();
        Ok(RoundEnd::Continue)
    }

    /// Re-runs the session recorded in `transcript` and returns the fresh
    /// transcript. With deterministic backends it is byte-identical.
    pub fn replay(&self, transcript: &Transcript, profile: &UserProfile) -> Result<SessionOutcome, OrchestratorError> {
        let (query, config) = transcript
            .events()
            .iter()
            .find_map(|e| match &e.body {
                EventBody::Retrieved { query, config, .. } => Some((query.clone(), *config)),
                _ => None,
            })
            .ok_or_else(|| OrchestratorError::Replay("no retrieved event".into()))?;
        self.run_session(transcript.session_id(), &query, profile, &config)
    }

    pub fn spans_for(&self, profile: &UserProfile, query: &str, m: usize) -> Result<PiiSpanSet, OrchestratorError> {
        let context = self.retriever.retrieve(profile, query, m)?;
        Ok(self.detector.extract_pii(&context, self.custom_keywords))
    }
}

fn client_failure(e: LmError) -> Termination {
    match e {
        LmError::ContextTooLong { .. } => Termination::ContextTooLong(e.to_string()),
        other => Termination::BackendUnavailable(other.to_string()),
    }
}
