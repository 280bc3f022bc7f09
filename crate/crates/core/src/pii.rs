//! Regex-based PII extraction and masking of server-bound text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::RetrievedContext;

pub const PII_MARKER: &str = "[PII]";

const DEFAULT_PATTERNS: &str = include_str!("../patterns/pii.yaml");

#[derive(Debug, Error)]
pub enum PiiError {
    #[error("bad pattern for {category}: {source}")]
    BadPattern {
        category: PiiCategory,
        #[source]
        source: regex::Error,
    },
    #[error("bad pattern file: {0}")]
    BadPatternFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiiCategory {
    Email,
    Phone,
    Ip,
    Url,
    Ssn,
    CreditCard,
    Dob,
    CustomKeyword,
}

impl PiiCategory {
    pub const REGEX_CATEGORIES: [PiiCategory; 7] = [
        PiiCategory::Email,
        PiiCategory::Phone,
        PiiCategory::Ip,
        PiiCategory::Url,
        PiiCategory::Ssn,
        PiiCategory::CreditCard,
        PiiCategory::Dob,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PiiCategory::Email => "email",
            PiiCategory::Phone => "phone",
            PiiCategory::Ip => "ip",
            PiiCategory::Url => "url",
            PiiCategory::Ssn => "ssn",
            PiiCategory::CreditCard => "credit_card",
            PiiCategory::Dob => "dob",
            PiiCategory::CustomKeyword => "custom_keyword",
        }
    }
}

impl fmt::Display for PiiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PiiSpan {
    pub category: PiiCategory,
    pub literal: String,
}

impl PiiSpan {
    pub fn new(category: PiiCategory, literal: impl Into<String>) -> Self {
        Self {
            category,
            literal: literal.into(),
        }
    }
}

/// The set E of literal spans to mask.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PiiSpanSet {
    spans: BTreeSet<PiiSpan>,
}

impl PiiSpanSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Empty literals are ignored.
    pub fn insert(&mut self, span: PiiSpan) -> bool {
        !span.literal.is_empty() && self.spans.insert(span)
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PiiSpan> {
        self.spans.iter()
    }

    pub fn contains(&self, span: &PiiSpan) -> bool {
        self.spans.contains(span)
    }

    pub fn is_superset(&self, other: &PiiSpanSet) -> bool {
        self.spans.is_superset(&other.spans)
    }

    /// Distinct literals, longest first (ties in lexical order).
    pub fn literals_longest_first(&self) -> Vec<&str> {
        let mut lits: Vec<&str> = self.spans.iter().map(|s| s.literal.as_str()).collect();
        lits.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        lits.dedup();
        lits
    }
}

impl FromIterator<PiiSpan> for PiiSpanSet {
    fn from_iter<I: IntoIterator<Item = PiiSpan>>(iter: I) -> Self {
        let mut set = PiiSpanSet::new();
        for s in iter {
            set.insert(s);
        }
        set
    }
}

/// A finding from [`PiiDetector::scan`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leak {
    pub category: PiiCategory,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct PiiDetector {
    patterns: Vec<(PiiCategory, Regex)>,
}

impl Default for PiiDetector {
    fn default() -> Self {
        Self::from_yaml(DEFAULT_PATTERNS).expect("bundled PII patterns compile")
    }
}

impl PiiDetector {
    /// Parses a `category: regex` mapping. Categories left out of the file
    /// keep the bundled pattern.
    pub fn from_yaml(text: &str) -> Result<Self, PiiError> {
        let overrides: BTreeMap<PiiCategory, String> =
            serde_yaml::from_str(text).map_err(|e| PiiError::BadPatternFile(e.to_string()))?;
        let base: BTreeMap<PiiCategory, String> = if text == DEFAULT_PATTERNS {
            BTreeMap::new()
        } else {
            serde_yaml::from_str(DEFAULT_PATTERNS).expect("bundled patterns parse")
        };
        let mut patterns = Vec::new();
        for category in PiiCategory::REGEX_CATEGORIES {
            let src = overrides
                .get(&category)
                .or_else(|| base.get(&category))
                .ok_or_else(|| PiiError::BadPatternFile(format!("no pattern for {category}")))?;
            let re = Regex::new(src).map_err(|source| PiiError::BadPattern { category, source })?;
            patterns.push((category, re));
        }
        Ok(Self { patterns })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PiiError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PiiError::BadPatternFile(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_yaml(&text)
    }

    pub fn patterns(&self) -> impl Iterator<Item = (PiiCategory, &Regex)> {
        self.patterns.iter().map(|(c, r)| (*c, r))
    }

    /// All regex matches in `text`, by category.
    pub fn find_all(&self, text: &str) -> Vec<PiiSpan> {
        let mut out = Vec::new();
        for (category, re) in &self.patterns {
            for m in re.find_iter(text) {
                out.push(PiiSpan::new(*category, m.as_str()));
            }
        }
        out
    }

    /// Union of regex matches over the retrieved documents plus the custom
    /// keywords verbatim.
    pub fn extract_pii(&self, context: &RetrievedContext, custom_keywords: &[String]) -> PiiSpanSet {
        let mut set = PiiSpanSet::new();
        for text in context.texts() {
            for span in self.find_all(text) {
                set.insert(span);
            }
        }
        for kw in custom_keywords {
            set.insert(PiiSpan::new(PiiCategory::CustomKeyword, kw.clone()));
        }
        set
    }

    /// Replaces every span literal (longest first) and every residual
    /// category match with [`PII_MARKER`], repeating until stable. Existing
    /// markers are never rewritten, so the result is a fixed point.
    pub fn filter_pii(&self, text: &str, spans: &PiiSpanSet) -> String {
        let mut segments = split_markers(text);
        let literals = spans.literals_longest_first();
        loop {
            let mut changed = false;
            for lit in &literals {
                changed |= replace_in_segments(&mut segments, |s| literal_ranges(s, lit));
            }
            for (_, re) in &self.patterns {
                changed |= replace_in_segments(&mut segments, |s| {
                    re.find_iter(s).map(|m| (m.start(), m.end())).collect()
                });
            }
            if !changed {
                break;
            }
        }
        join_segments(&segments)
    }

    /// Leaks in `text`: any span literal or any regex match outside markers.
    pub fn scan(&self, text: &str, spans: &PiiSpanSet) -> Vec<Leak> {
        let mut leaks = Vec::new();
        for segment in split_markers(text) {
            let Segment::Text(s) = segment else { continue };
            for lit in spans.literals_longest_first() {
                if s.contains(lit) {
                    let category = spans
                        .iter()
                        .find(|sp| sp.literal == lit)
                        .map_or(PiiCategory::CustomKeyword, |sp| sp.category);
                    leaks.push(Leak {
                        category,
                        text: lit.to_string(),
                    });
                }
            }
            for (category, re) in &self.patterns {
                for m in re.find_iter(&s) {
                    leaks.push(Leak {
                        category: *category,
                        text: m.as_str().to_string(),
                    });
                }
            }
        }
        leaks
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Marker,
    Text(String),
}

fn split_markers(text: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut parts = text.split(PII_MARKER).peekable();
    while let Some(part) = parts.next() {
        if !part.is_empty() {
            out.push(Segment::Text(part.to_string()));
        }
        if parts.peek().is_some() {
            out.push(Segment::Marker);
        }
    }
    out
}

fn join_segments(segments: &[Segment]) -> String {
    let mut out = String::new();
    for s in segments {
        match s {
            Segment::Marker => out.push_str(PII_MARKER),
            Segment::Text(t) => out.push_str(t),
        }
    }
    out
}

fn literal_ranges(s: &str, lit: &str) -> Vec<(usize, usize)> {
    s.match_indices(lit).map(|(i, m)| (i, i + m.len())).collect()
}

/// Cuts the given non-overlapping, ascending, non-empty ranges out of each
/// text segment and puts a marker in their place.
fn replace_in_segments<F>(segments: &mut Vec<Segment>, mut ranges: F) -> bool
where
    F: FnMut(&str) -> Vec<(usize, usize)>,
{
    let mut changed = false;
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments.drain(..) {
        let Segment::Text(s) = seg else {
            out.push(seg);
            continue;
        };
        let found: Vec<(usize, usize)> = ranges(&s).into_iter().filter(|(a, b)| b > a).collect();
        if found.is_empty() {
            out.push(Segment::Text(s));
            continue;
        }
        changed = true;
        let mut pos = 0;
        for (start, end) in found {
            if start > pos {
                out.push(Segment::Text(s[pos..start].to_string()));
            }
            out.push(Segment::Marker);
            pos = end;
        }
        if pos < s.len() {
            out.push(Segment::Text(s[pos..].to_string()));
        }
    }
    *segments = out;
    changed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{ProfileDoc, ScoredDoc};

    fn ctx(texts: &[&str]) -> RetrievedContext {
        RetrievedContext {
            docs: texts
                .iter()
                .enumerate()
                .map(|(i, t)| ScoredDoc {
                    doc: ProfileDoc {
                        doc_id: i,
                        text: t.to_string(),
                    },
                    score: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_context_gives_empty_set() {
        assert!(PiiDetector::default().extract_pii(&ctx(&[]), &[]).is_empty());
    }

    #[test]
    fn email_and_phone() {
        let set = PiiDetector::default().extract_pii(&ctx(&["reach me at jane@example.com or 413-555-0199"]), &[]);
        let expected: PiiSpanSet = [
            PiiSpan::new(PiiCategory::Email, "jane@example.com"),
            PiiSpan::new(PiiCategory::Phone, "413-555-0199"),
        ]
        .into_iter()
        .collect();
        assert_eq!(set, expected);
    }

    #[test]
    fn keywords_pass_through() {
        let set = PiiDetector::default().extract_pii(&ctx(&["nothing here"]), &["Acme Corp".to_string()]);
        let expected: PiiSpanSet = [PiiSpan::new(PiiCategory::CustomKeyword, "Acme Corp")].into_iter().collect();
        assert_eq!(set, expected);
    }

    #[test]
    fn each_category_matches_a_sample() {
        let d = PiiDetector::default();
        let samples = [
            (PiiCategory::Email, "mail a.b+c@mail.example.org today"),
            (PiiCategory::Phone, "call (413) 555-0199 now"),
            (PiiCategory::Ip, "host 192.168.10.254 is up"),
            (PiiCategory::Url, "see https://example.com/path?q=1 for more"),
            (PiiCategory::Ssn, "ssn 078-05-1120 on file"),
            (PiiCategory::CreditCard, "card 4111 1111 1111 1111 expired"),
            (PiiCategory::Dob, "born 1987-04-12 in town"),
            (PiiCategory::Dob, "born 4/12/1987 in town"),
        ];
        for (cat, text) in samples {
            assert!(
                d.find_all(text).iter().any(|s| s.category == cat),
                "{cat} not found in {text:?}"
            );
        }
        assert!(d.find_all("plain words and 42 cats").is_empty());
    }

    #[test]
    fn substitution() {
        let d = PiiDetector::default();
        let spans: PiiSpanSet = [PiiSpan::new(PiiCategory::Email, "jane@example.com")].into_iter().collect();
        assert_eq!(d.filter_pii("email jane@example.com now", &spans), "email [PII] now");
        assert_eq!(d.filter_pii("nothing to see", &spans), "nothing to see");
        assert_eq!(d.filter_pii("already [PII] here", &spans), "already [PII] here");
    }

    #[test]
    fn longest_literal_wins() {
        let d = PiiDetector::default();
        let spans: PiiSpanSet = [
            PiiSpan::new(PiiCategory::CustomKeyword, "Acme"),
            PiiSpan::new(PiiCategory::CustomKeyword, "Acme Corp"),
        ]
        .into_iter()
        .collect();
        assert_eq!(d.filter_pii("at Acme Corp and Acme", &spans), "at [PII] and [PII]");
    }

    #[test]
    fn keyword_inside_marker_is_stable() {
        let d = PiiDetector::default();
        let spans: PiiSpanSet = [PiiSpan::new(PiiCategory::CustomKeyword, "PII")].into_iter().collect();
        let once = d.filter_pii("PII and [PII]", &spans);
        assert_eq!(once, "[PII] and [PII]");
        assert_eq!(d.filter_pii(&once, &spans), once);
    }

    #[test]
    fn residual_regex_catches_assembled_pii() {
        let d = PiiDetector::default();
        let out = d.filter_pii("write to bob@corp.io later", &PiiSpanSet::new());
        assert_eq!(out, "write to [PII] later");
    }

    #[test]
    fn scan_reports_leaks() {
        let d = PiiDetector::default();
        let spans: PiiSpanSet = [PiiSpan::new(PiiCategory::CustomKeyword, "Acme")].into_iter().collect();
        assert!(d.scan("[PII] is fine", &spans).is_empty());
        assert_eq!(d.scan("Acme", &spans).len(), 1);
        assert!(!d.scan("x 10.0.0.1", &spans).is_empty());
    }

    #[test]
    fn pattern_override_keeps_other_categories() {
        let d = PiiDetector::from_yaml("email: 'zzz'\n").unwrap();
        assert!(d.find_all("jane@example.com").is_empty());
        assert_eq!(d.find_all("zzz").len(), 1);
        assert_eq!(d.find_all("078-05-1120")[0].category, PiiCategory::Ssn);
    }
}
