//! What the server saw, and attacker-input exports built from it.
//!
//! Everything here works from transcripts alone. Exports carry only
//! server-visible material (the filtered query and filtered response);
//! candidate profiles are referenced by user id, never inlined.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pii::{Leak, PiiDetector, PiiSpanSet};
use crate::protocol::{encode_request, DraftRequest};
use crate::retrieval::{Bm25Index, UserProfile};
use crate::transcript::{EventBody, Transcript};

pub const ATTRIBUTE_CATEGORIES: [&str; 6] = [
    "Occupation",
    "Religion",
    "Interests",
    "Location",
    "Nationality",
    "Political Leanings",
];

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("transcript {0} has no terminal event")]
    IncompleteTranscript(String),
    #[error("PII leak in session {session_id}: {category} {text:?} ({location})")]
    PiiLeakDetected {
        session_id: String,
        location: String,
        category: String,
        text: String,
    },
    #[error("need at least {needed} profiles, have {available}")]
    InsufficientProfiles { needed: usize, available: usize },
    #[error("session {session_id} belongs to unknown user {user_id:?}")]
    UnknownUser { session_id: String, user_id: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ordered client-to-server payloads of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerView {
    pub session_id: String,
    pub messages: Vec<DraftRequest>,
    /// Filtered prompt plus response after the last round.
    pub final_visible_text: String,
}

impl ServerView {
    pub fn message_bytes(&self) -> Vec<Vec<u8>> {
        self.messages.iter().map(encode_request).collect()
    }

    /// True when the view reproduces the tapped wire bytes exactly.
    pub fn matches_tap(&self, captured: &[Vec<u8>]) -> bool {
        self.message_bytes() == captured
    }
}

fn spans_of(transcript: &Transcript) -> PiiSpanSet {
    transcript
        .events()
        .iter()
        .find_map(|e| match &e.body {
            EventBody::PiiExtracted { spans, .. } => Some(spans.iter().cloned().collect()),
            _ => None,
        })
        .unwrap_or_default()
}

fn collect_strings<'a>(value: &'a serde_json::Value, out: &mut Vec<&'a str>) {
    match value {
        serde_json::Value::String(s) => out.push(s),
        serde_json::Value::Array(items) => items.iter().for_each(|v| collect_strings(v, out)),
        serde_json::Value::Object(map) => map.values().for_each(|v| collect_strings(v, out)),
        _ => {}
    }
}

/// Leaks in every string value of a serialized payload.
pub fn scan_payload(detector: &PiiDetector, payload: &[u8], spans: &PiiSpanSet) -> Vec<Leak> {
    match serde_json::from_slice::<serde_json::Value>(payload) {
        Ok(value) => {
            let mut strings = Vec::new();
            collect_strings(&value, &mut strings);
            strings.iter().flat_map(|s| detector.scan(s, spans)).collect()
        }
        Err(_) => detector.scan(&String::from_utf8_lossy(payload), spans),
    }
}

pub fn project_server_view(transcript: &Transcript, detector: &PiiDetector) -> Result<ServerView, AuditError> {
    if !transcript.is_complete() {
        return Err(AuditError::IncompleteTranscript(transcript.session_id().to_string()));
    }
    let spans = spans_of(transcript);
    let messages: Vec<DraftRequest> = transcript.draft_requests().cloned().collect();
    let leak = |location: String, leaks: Vec<Leak>| match leaks.into_iter().next() {
        Some(l) => Err(AuditError::PiiLeakDetected {
            session_id: transcript.session_id().to_string(),
            location,
            category: l.category.to_string(),
            text: l.text,
        }),
        None => Ok(()),
    };
    for (i, msg) in messages.iter().enumerate() {
        leak(
            format!("draft request {}", i + 1),
            scan_payload(detector, &encode_request(msg), &spans),
        )?;
    }
    let final_visible_text = transcript
        .events()
        .iter()
        .rev()
        .find_map(|e| match &e.body {
            EventBody::PiiFiltered { server_history_text } => Some(server_history_text.clone()),
            _ => None,
        })
        .or_else(|| messages.last().map(|m| m.server_history_text.clone()))
        .unwrap_or_default();
    leak("final server history".into(), detector.scan(&final_visible_text, &spans))?;
    Ok(ServerView {
        session_id: transcript.session_id().to_string(),
        messages,
        final_visible_text,
    })
}

/// Server-visible summary of one finished session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub user_id: String,
    pub query: String,
    pub response: String,
}

impl SessionRecord {
    pub fn from_transcript(transcript: &Transcript, detector: &PiiDetector) -> Result<Self, AuditError> {
        let Some(terminal) = transcript.terminal() else {
            return Err(AuditError::IncompleteTranscript(transcript.session_id().to_string()));
        };
        let spans = spans_of(transcript);
        let mut tokens: Vec<&str> = transcript.emitted_tokens().map(|t| t.surface.as_str()).collect();
        if matches!(terminal, EventBody::Eos {}) {
            tokens.pop();
        }
        let raw_response: String = tokens.concat();
        let mut user_id = String::new();
        let mut query = String::new();
        for e in transcript.events() {
            match &e.body {
                EventBody::Retrieved { user_id: u, .. } => user_id = u.clone(),
                EventBody::PiiExtracted { server_query, .. } => query = server_query.clone(),
                _ => {}
            }
        }
        Ok(Self {
            session_id: transcript.session_id().to_string(),
            user_id,
            query,
            response: detector.filter_pii(&raw_response, &spans),
        })
    }
}

/// Up to `n` sessions drawn without replacement, kept in input order.
pub fn sample_sessions(records: &[SessionRecord], n: usize, seed: u64) -> Vec<SessionRecord> {
    if n >= records.len() {
        return records.to_vec();
    }
    let mut picked = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), records.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| records[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkabilityInstance {
    pub instance_id: usize,
    pub session_id: String,
    pub query: String,
    pub response: String,
    pub candidate_user_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkabilityAnswer {
    pub instance_id: usize,
    pub true_index: usize,
    pub true_user_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub kind: String,
    pub seed: Option<u64>,
    pub n_candidates: Option<usize>,
    pub n_negatives: Option<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkabilityExport {
    pub instances: Vec<LinkabilityInstance>,
    pub answers: Vec<LinkabilityAnswer>,
    pub manifest: ExportManifest,
}

/// For each session: rank every other profile by BM25 similarity to the
/// true profile's concatenated text, keep the top `n_candidates`, draw
/// `n_negatives` of them with a seeded RNG, and shuffle them together with
/// the true profile.
pub fn export_linkability_set(
    profiles: &[UserProfile],
    sessions: &[SessionRecord],
    n_candidates: usize,
    n_negatives: usize,
    seed: u64,
) -> Result<LinkabilityExport, AuditError> {
    let needed = n_candidates.max(n_negatives) + 1;
    if profiles.len() < needed {
        return Err(AuditError::InsufficientProfiles {
            needed,
            available: profiles.len(),
        });
    }
    let texts: Vec<String> = profiles.iter().map(UserProfile::concatenated_text).collect();
    let index = Bm25Index::new(&texts);
    let position: HashMap<&str, usize> = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| (p.user_id.as_str(), i))
        .collect();

    let mut instances = Vec::with_capacity(sessions.len());
    let mut answers = Vec::with_capacity(sessions.len());
    for (instance_id, session) in sessions.iter().enumerate() {
        let &true_pos = position
            .get(session.user_id.as_str())
            .ok_or_else(|| AuditError::UnknownUser {
                session_id: session.session_id.clone(),
                user_id: session.user_id.clone(),
            })?;
        let pool: Vec<usize> = index
            .rank(&texts[true_pos])
            .into_iter()
            .map(|(i, _)| i)
            .filter(|&i| i != true_pos)
            .take(n_candidates)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(instance_id as u64);
        let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), n_negatives)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        picked.push(true_pos);
        picked.shuffle(&mut rng);
        let true_index = picked.iter().position(|&i| i == true_pos).expect("true profile present");
        instances.push(LinkabilityInstance {
            instance_id,
            session_id: session.session_id.clone(),
            query: session.query.clone(),
            response: session.response.clone(),
            candidate_user_ids: picked.iter().map(|&i| profiles[i].user_id.clone()).collect(),
        });
        answers.push(LinkabilityAnswer {
            instance_id,
            true_index,
            true_user_id: session.user_id.clone(),
        });
    }
    let count = instances.len();
    Ok(LinkabilityExport {
        instances,
        answers,
        manifest: ExportManifest {
            kind: "linkability".into(),
            seed: Some(seed),
            n_candidates: Some(n_candidates),
            n_negatives: Some(n_negatives),
            count,
        },
    })
}

/// The six attribute slots, left empty for an external labeler.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeSlots {
    #[serde(rename = "Occupation")]
    pub occupation: Option<String>,
    #[serde(rename = "Religion")]
    pub religion: Option<String>,
    #[serde(rename = "Interests")]
    pub interests: Option<String>,
    #[serde(rename = "Location")]
    pub location: Option<String>,
    #[serde(rename = "Nationality")]
    pub nationality: Option<String>,
    #[serde(rename = "Political Leanings")]
    pub political_leanings: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub instance_id: usize,
    pub session_id: String,
    pub query: String,
    pub response: String,
    pub attribute_slots: AttributeSlots,
}

pub fn export_attribute_set(sessions: &[SessionRecord]) -> Vec<AttributeRecord> {
    sessions
        .iter()
        .enumerate()
        .map(|(instance_id, s)| AttributeRecord {
            instance_id,
            session_id: s.session_id.clone(),
            query: s.query.clone(),
            response: s.response.clone(),
            attribute_slots: AttributeSlots::default(),
        })
        .collect()
}

pub fn attribute_manifest(count: usize) -> ExportManifest {
    ExportManifest {
        kind: "attributes".into(),
        seed: None,
        n_candidates: None,
        n_negatives: None,
        count,
    }
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("export record serializes"));
        out.push('\n');
    }
    out
}

/// Writes `<stem>.jsonl`, optional `<stem>.answers.jsonl` and
/// `<stem>.manifest.json` into `dir`.
pub fn write_export<T: Serialize, A: Serialize>(
    dir: &Path,
    stem: &str,
    records: &[T],
    answers: Option<&[A]>,
    manifest: &ExportManifest,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.jsonl")), to_jsonl(records))?;
    if let Some(a) = answers {
        fs::write(dir.join(format!("{stem}.answers.jsonl")), to_jsonl(a))?;
    }
    let mut f = fs::File::create(dir.join(format!("{stem}.manifest.json")))?;
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n")
}
