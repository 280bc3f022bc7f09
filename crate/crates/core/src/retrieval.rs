//! Client-local profile store and lexical top-m retrieval.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("profile is empty")]
    EmptyProfile,
    #[error("m must be >= 1")]
    InvalidM,
    #[error("malformed profile line {line}: {reason}")]
    MalformedProfileLine { line: usize, reason: String },
    #[error("cannot read profile {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDoc {
    pub doc_id: usize,
    pub text: String,
}

/// A user's private documents. Lives only on the client; no server-bound
/// message type has a field that could carry it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserProfile {
    pub user_id: String,
    pub docs: Vec<ProfileDoc>,
}

impl UserProfile {
    pub fn from_texts<S: Into<String>>(user_id: impl Into<String>, texts: impl IntoIterator<Item = S>) -> Self {
        Self {
            user_id: user_id.into(),
            docs: texts
                .into_iter()
                .enumerate()
                .map(|(doc_id, t)| ProfileDoc {
                    doc_id,
                    text: t.into(),
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn concatenated_text(&self) -> String {
        self.docs
            .iter()
            .map(|d| d.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Deserialize)]
struct ProfileLine {
    text: Option<String>,
    // past-question records: the question plus its stated information need
    question: Option<String>,
    #[serde(alias = "need", alias = "description", alias = "narrative")]
    detail: Option<String>,
}

/// Reads a JSONL profile. Each line is `{"text": ...}` or a past-question
/// record `{"question": ..., "detail": ...}`; the user id is the file stem.
pub fn ingest_profile(path: impl AsRef<Path>) -> Result<UserProfile, RetrievalError> {
    let path = path.as_ref();
    let io_err = |source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let user_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().trim_end_matches(".profile").to_string())
        .unwrap_or_default();
    let mut texts = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        texts.push(parse_profile_line(&line, i + 1)?);
    }
    Ok(UserProfile::from_texts(user_id, texts))
}

pub fn parse_profile_line(line: &str, line_no: usize) -> Result<String, RetrievalError> {
    let malformed = |reason: String| RetrievalError::MalformedProfileLine {
        line: line_no,
        reason,
    };
    let rec: ProfileLine = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let text = match (rec.text, rec.question) {
        (Some(t), _) => t,
        (None, Some(q)) => match rec.detail {
            Some(d) if !d.trim().is_empty() => format!("{q} {d}"),
            _ => q,
        },
        (None, None) => return Err(malformed("missing `text` field".into())),
    };
    if text.trim().is_empty() {
        return Err(malformed("empty text".into()));
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc: ProfileDoc,
    pub score: f64,
}

/// Top-m documents in non-increasing score order, ties by ascending doc id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievedContext {
    pub docs: Vec<ScoredDoc>,
}

impl RetrievedContext {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.doc.text.as_str())
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

pub trait Retriever: Send + Sync {
    fn retrieve(&self, profile: &UserProfile, query: &str, m: usize) -> Result<RetrievedContext, RetrievalError>;
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 over an in-memory corpus.
///
/// `idf(t) = ln(1 + (N - n_t + 0.5) / (n_t + 0.5))`, which stays positive
/// for terms present in most documents. Repeated query terms count once.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    term_freqs: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn new<S: AsRef<str>>(docs: &[S]) -> Self {
        Self::with_params(docs, BM25_K1, BM25_B)
    }

    pub fn with_params<S: AsRef<str>>(docs: &[S], k1: f64, b: f64) -> Self {
        let mut term_freqs = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let terms = tokenize(doc.as_ref());
            doc_lens.push(terms.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            term_freqs.push(tf);
        }
        let total: usize = doc_lens.iter().sum();
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        Self {
            k1,
            b,
            term_freqs,
            doc_lens,
            doc_freq,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lens.is_empty()
    }

    fn idf(&self, term: &str) -> f64 {
        let n = *self.doc_freq.get(term).unwrap_or(&0) as f64;
        let total = self.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut seen = HashSet::new();
        let terms: Vec<String> = tokenize(query).into_iter().filter(|t| seen.insert(t.clone())).collect();
        let mut scores = vec![0.0; self.len()];
        if self.avg_len == 0.0 {
            return scores;
        }
        for term in &terms {
            if !self.doc_freq.contains_key(term) {
                continue;
            }
            let idf = self.idf(term);
            for (i, tf) in self.term_freqs.iter().enumerate() {
                let Some(&f) = tf.get(term) else { continue };
                let f = f as f64;
                let norm = 1.0 - self.b + self.b * self.doc_lens[i] as f64 / self.avg_len;
                scores[i] += idf * f * (self.k1 + 1.0) / (f + self.k1 * norm);
            }
        }
        scores
    }

    /// Indices sorted by descending score, ascending index on ties.
    pub fn rank(&self, query: &str) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.scores(query).into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Bm25Retriever;

impl Retriever for Bm25Retriever {
    fn retrieve(&self, profile: &UserProfile, query: &str, m: usize) -> Result<RetrievedContext, RetrievalError> {
        if m == 0 {
            return Err(RetrievalError::InvalidM);
        }
        if profile.is_empty() {
            return Err(RetrievalError::EmptyProfile);
        }
        let texts: Vec<&str> = profile.docs.iter().map(|d| d.text.as_str()).collect();
        let index = Bm25Index::new(&texts);
        let mut ranked: Vec<(usize, f64)> = index.scores(query).into_iter().enumerate().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then(profile.docs[a.0].doc_id.cmp(&profile.docs[b.0].doc_id))
        });
        Ok(RetrievedContext {
            docs: ranked
                .into_iter()
                .take(m)
                .map(|(i, score)| ScoredDoc {
                    doc: profile.docs[i].clone(),
                    score,
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Red-fish, BLUE fish!"), vec!["red", "fish", "blue", "fish"]);
    }

    #[test]
    fn ingest_assigns_positions() {
        let mut f = tempfile::Builder::new().suffix(".jsonl").tempfile().unwrap();
        writeln!(f, r#"{{"text": "one"}}"#).unwrap();
        writeln!(f, r#"{{"text": "two", "meta": {{"k": 1}}}}"#).unwrap();
        writeln!(f, r#"{{"text": "three"}}"#).unwrap();
        let p = ingest_profile(f.path()).unwrap();
        let ids: Vec<usize> = p.docs.iter().map(|d| d.doc_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn ingest_rejects_empty_text_with_line_number() {
        let mut f = tempfile::Builder::new().suffix(".jsonl").tempfile().unwrap();
        writeln!(f, r#"{{"text": "one"}}"#).unwrap();
        writeln!(f, r#"{{"text": "  "}}"#).unwrap();
        match ingest_profile(f.path()).unwrap_err() {
            RetrievalError::MalformedProfileLine { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn past_question_records_become_one_doc_each() {
        let mut f = tempfile::Builder::new().suffix(".jsonl").tempfile().unwrap();
        writeln!(f, r#"{{"question": "How to tune a violin?", "detail": "I play in an orchestra."}}"#).unwrap();
        writeln!(f, r#"{{"question": "Best rosin?"}}"#).unwrap();
        let p = ingest_profile(f.path()).unwrap();
        assert_eq!(p.docs.len(), 2);
        assert_eq!(p.docs[0].text, "How to tune a violin? I play in an orchestra.");
        assert_eq!(p.docs[1].text, "Best rosin?");
    }

    #[test]
    fn empty_profile_and_bad_m() {
        let empty = UserProfile::default();
        assert!(matches!(
            Bm25Retriever.retrieve(&empty, "q", 10),
            Err(RetrievalError::EmptyProfile)
        ));
        let p = UserProfile::from_texts("u", ["a"]);
        assert!(matches!(Bm25Retriever.retrieve(&p, "q", 0), Err(RetrievalError::InvalidM)));
    }

    #[test]
    fn zero_score_fallback_is_doc_order() {
        let p = UserProfile::from_texts("u", ["alpha", "beta", "gamma"]);
        let ctx = Bm25Retriever.retrieve(&p, "zeta", 2).unwrap();
        let ids: Vec<usize> = ctx.docs.iter().map(|d| d.doc.doc_id).collect();
        assert_eq!(ids, vec![0, 1]);
        assert!(ctx.docs.iter().all(|d| d.score == 0.0));
    }
}
