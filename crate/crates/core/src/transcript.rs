//! Ordered, replayable log of protocol events.
//!
//! Serialized as JSONL with a fixed key order (`session_id`, `round`, `seq`,
//! `kind`, `payload`) so two runs can be compared byte for byte. Round 0
//! carries the setup events; protocol rounds start at 1.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ProtocolConfig;
use crate::pii::PiiSpan;
use crate::protocol::{DraftRequest, DraftResponse};
use crate::vocab::{Token, TokenId};

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("event ({round}, {seq}) is out of order after ({last_round}, {last_seq})")]
    OutOfOrderEvent {
        round: u32,
        seq: u32,
        last_round: u32,
        last_seq: u32,
    },
    #[error("event belongs to session {found}, transcript is {expected}")]
    SessionMismatch { expected: String, found: String },
    #[error("event appended after terminal event")]
    AfterTerminal,
    #[error("transcript has no terminal event")]
    IncompleteTranscript,
    #[error("malformed transcript line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Log-probabilities may be `-inf`, which JSON cannot carry; it is written
/// as `null`.
pub mod logp_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            s.serialize_f64(*value)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationReason {
    MaxNewTokens,
    ContextTooLong,
    TransportError,
    BackendUnavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Retrieved {
        query: String,
        user_id: String,
        config: ProtocolConfig,
        doc_ids: Vec<usize>,
        scores: Vec<f64>,
    },
    PiiExtracted {
        spans: Vec<PiiSpan>,
        /// The query as the server sees it.
        server_query: String,
    },
    DraftProposed {
        request: DraftRequest,
        response: DraftResponse,
    },
    TokenAccepted {
        token: Token,
        #[serde(with = "logp_serde")]
        logp_token: f64,
        #[serde(with = "logp_serde")]
        logp_argmax: f64,
    },
    TokenCorrected {
        /// `None` in client-only mode, where nothing was drafted.
        draft: Option<Token>,
        emitted: Token,
        #[serde(with = "logp_serde")]
        logp_token: f64,
        #[serde(with = "logp_serde")]
        logp_argmax: f64,
    },
    PiiFiltered {
        server_history_text: String,
    },
    Eos {},
    Truncated {
        reason: TruncationReason,
        detail: Option<String>,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Retrieved { .. } => "retrieved",
            EventBody::PiiExtracted { .. } => "pii_extracted",
            EventBody::DraftProposed { .. } => "draft_proposed",
            EventBody::TokenAccepted { .. } => "token_accepted",
            EventBody::TokenCorrected { .. } => "token_corrected",
            EventBody::PiiFiltered { .. } => "pii_filtered",
            EventBody::Eos {} => "eos",
            EventBody::Truncated { .. } => "truncated",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, EventBody::Eos {} | EventBody::Truncated { .. })
    }

    /// The token this event appends to the response, if any.
    pub fn emitted_token(&self) -> Option<&Token> {
        match self {
            EventBody::TokenAccepted { token, .. } => Some(token),
            EventBody::TokenCorrected { emitted, .. } => Some(emitted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub session_id: String,
    pub round: u32,
    pub seq: u32,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    session_id: String,
    events: Vec<TranscriptEvent>,
}

impl Transcript {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            events: Vec::new(),
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn events(&self) -> &[TranscriptEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn current_round(&self) -> u32 {
        self.events.last().map_or(0, |e| e.round)
    }

    pub fn is_complete(&self) -> bool {
        self.events.last().is_some_and(|e| e.body.is_terminal())
    }

    pub fn terminal(&self) -> Option<&EventBody> {
        self.events
            .last()
            .map(|e| &e.body)
            .filter(|b| b.is_terminal())
    }

    /// Appends a fully specified event, enforcing strict `(round, seq)`
    /// order and `round <= current_round + 1`.
    pub fn append_event(&mut self, event: TranscriptEvent) -> Result<(), TranscriptError> {
        if event.session_id != self.session_id {
            return Err(TranscriptError::SessionMismatch {
                expected: self.session_id.clone(),
                found: event.session_id,
            });
        }
        if let Some(last) = self.events.last() {
            if last.body.is_terminal() {
                return Err(TranscriptError::AfterTerminal);
            }
            let in_order = (event.round == last.round && event.seq > last.seq)
                || (event.round == last.round + 1);
            if !in_order {
                return Err(TranscriptError::OutOfOrderEvent {
                    round: event.round,
                    seq: event.seq,
                    last_round: last.round,
                    last_seq: last.seq,
                });
            }
        } else if event.round > 1 {
            return Err(TranscriptError::OutOfOrderEvent {
                round: event.round,
                seq: event.seq,
                last_round: 0,
                last_seq: 0,
            });
        }
        self.events.push(event);
        Ok(())
    }

    /// Appends `body` in `round`, assigning the next intra-round sequence
    /// number.
    pub fn record(&mut self, round: u32, body: EventBody) -> Result<&TranscriptEvent, TranscriptError> {
        let seq = match self.events.last() {
            Some(last) if last.round == round => last.seq + 1,
            _ => 0,
        };
        self.append_event(TranscriptEvent {
            session_id: self.session_id.clone(),
            round,
            seq,
            body,
        })?;
        Ok(self.events.last().expect("just pushed"))
    }

    /// Response token ids in emission order, EOS included.
    pub fn response_token_ids(&self) -> Vec<TokenId> {
        self.emitted_tokens().map(|t| t.id).collect()
    }

    pub fn emitted_tokens(&self) -> impl Iterator<Item = &Token> {
        self.events.iter().filter_map(|e| e.body.emitted_token())
    }

    /// Response text rebuilt from token events; the EOS token (if emitted)
    /// is dropped by passing its id.
    pub fn response_text(&self, eos_id: TokenId) -> String {
        self.emitted_tokens()
            .filter(|t| t.id != eos_id)
            .map(|t| t.surface.as_str())
            .collect()
    }

    pub fn draft_requests(&self) -> impl Iterator<Item = &DraftRequest> {
        self.events.iter().filter_map(|e| match &e.body {
            EventBody::DraftProposed { request, .. } => Some(request),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("transcript events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }

    /// Parses a single-session transcript.
    pub fn from_jsonl(text: &str) -> Result<Self, TranscriptError> {
        let mut all = read_transcripts(text.as_bytes())?;
        match all.len() {
            0 => Ok(Transcript::new("")),
            1 => Ok(all.remove(0)),
            _ => {
                let found = all[1].session_id.clone();
                Err(TranscriptError::SessionMismatch {
                    expected: all.remove(0).session_id,
                    found,
                })
            }
        }
    }
}

/// Reads a JSONL stream that may interleave several sessions. Sessions are
/// returned in order of first appearance; ordering is validated per session.
pub fn read_transcripts<R: BufRead>(reader: R) -> Result<Vec<Transcript>, TranscriptError> {
    let mut order: Vec<Transcript> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: TranscriptEvent = serde_json::from_str(&line)
            .map_err(|source| TranscriptError::Malformed { line: i + 1, source })?;
        let idx = *by_id.entry(event.session_id.clone()).or_insert_with(|| {
            order.push(Transcript::new(event.session_id.clone()));
            order.len() - 1
        });
        order[idx].append_event(event)?;
    }
    Ok(order)
}

/// Appends whole transcripts to a shared sink; safe to share across
/// concurrently running sessions.
pub struct TranscriptWriter<W: Write> {
    inner: Mutex<W>,
}

impl<W: Write> TranscriptWriter<W> {
    pub fn new(inner: W) -> Self {
        Self {
            inner: Mutex::new(inner),
        }
    }

    pub fn write(&self, transcript: &Transcript) -> io::Result<()> {
        let text = transcript.to_jsonl();
        let mut guard = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        guard.write_all(text.as_bytes())?;
        guard.flush()
    }

    pub fn into_inner(self) -> W {
        self.inner.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(id: TokenId, s: &str) -> Token {
        Token {
            id,
            surface: s.into(),
        }
    }

    fn accepted(id: TokenId) -> EventBody {
        EventBody::TokenAccepted {
            token: tok(id, "x"),
            logp_token: -0.5,
            logp_argmax: -0.1,
        }
    }

    #[test]
    fn append_to_empty() {
        let mut t = Transcript::new("s");
        t.record(1, EventBody::PiiFiltered { server_history_text: "h".into() })
            .unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.events()[0].seq, 0);
    }

    #[test]
    fn round_jump_is_out_of_order() {
        let mut t = Transcript::new("s");
        t.record(1, accepted(0)).unwrap();
        let err = t.record(5, accepted(0)).unwrap_err();
        assert!(matches!(err, TranscriptError::OutOfOrderEvent { round: 5, .. }));
        let err = t
            .append_event(TranscriptEvent {
                session_id: "s".into(),
                round: 1,
                seq: 0,
                body: accepted(1),
            })
            .unwrap_err();
        assert!(matches!(err, TranscriptError::OutOfOrderEvent { .. }));
    }

    #[test]
    fn recount_accepted_events() {
        let mut t = Transcript::new("s");
        for id in 0..3 {
            t.record(1, accepted(id)).unwrap();
        }
        let recount = t
            .to_jsonl()
            .lines()
            .filter(|l| l.contains(r#""kind":"token_accepted""#))
            .count();
        assert_eq!(recount, 3);
    }

    #[test]
    fn nothing_after_terminal() {
        let mut t = Transcript::new("s");
        t.record(1, EventBody::Eos {}).unwrap();
        assert!(t.is_complete());
        assert!(matches!(
            t.record(1, accepted(0)),
            Err(TranscriptError::AfterTerminal)
        ));
    }

    #[test]
    fn jsonl_key_order_and_neg_inf() {
        let mut t = Transcript::new("s1");
        t.record(
            1,
            EventBody::TokenCorrected {
                draft: Some(tok(2, "c")),
                emitted: tok(0, "a"),
                logp_token: f64::NEG_INFINITY,
                logp_argmax: -0.25,
            },
        )
        .unwrap();
        let line = t.to_jsonl();
        assert!(line.starts_with(r#"{"session_id":"s1","round":1,"seq":0,"kind":"token_corrected","payload":{"#));
        assert!(line.contains(r#""logp_token":null"#));
        let back = Transcript::from_jsonl(&line).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_jsonl(), line);
    }

    #[test]
    fn interleaved_sessions_split() {
        let mut a = Transcript::new("a");
        let mut b = Transcript::new("b");
        a.record(1, accepted(0)).unwrap();
        b.record(1, accepted(1)).unwrap();
        a.record(1, EventBody::Eos {}).unwrap();
        let mut text = String::new();
        let (al, bl) = (a.to_jsonl(), b.to_jsonl());
        let al: Vec<&str> = al.lines().collect();
        text.push_str(al[0]);
        text.push('\n');
        text.push_str(&bl);
        text.push_str(al[1]);
        text.push('\n');
        let all = read_transcripts(text.as_bytes()).unwrap();
        assert_eq!(all, vec![a, b]);
    }
}
