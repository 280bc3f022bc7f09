//! Shared token space of the server and client models.
//!
//! Both sides of the protocol must agree on token ids, so every session
//! starts by comparing [`Vocabulary::digest`] values. Server-bound history
//! travels as text and is re-tokenized here with greedy longest-match.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("vocabulary is empty")]
    Empty,
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateEntry(String),
    #[error("empty surface at index {0}")]
    EmptySurface(usize),
    #[error("eos id {0} is out of range")]
    EosOutOfRange(TokenId),
    #[error("unknown token surface {0:?}")]
    UnknownSurface(String),
    #[error("token id {0} is out of range")]
    IdOutOfRange(TokenId),
    #[error("cannot tokenize character {ch:?} at byte offset {offset}")]
    Untokenizable { offset: usize, ch: char },
}

/// Content hash over the vocabulary entries and its EOS marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VocabDigest(pub String);

impl fmt::Display for VocabDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub surface: String,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<String>,
    eos_id: TokenId,
    unk_id: Option<TokenId>,
    digest: VocabDigest,
    index: HashMap<String, TokenId>,
    max_surface_len: usize,
}

impl Vocabulary {
    pub fn new(entries: Vec<String>, eos_id: TokenId) -> Result<Self, VocabError> {
        Self::with_unk(entries, eos_id, None)
    }

    /// Builds a vocabulary whose tokenizer maps otherwise uncovered
    /// characters to `unk_id` instead of failing.
    pub fn with_unk(
        entries: Vec<String>,
        eos_id: TokenId,
        unk_id: Option<TokenId>,
    ) -> Result<Self, VocabError> {
        if entries.is_empty() {
            return Err(VocabError::Empty);
        }
        if eos_id as usize >= entries.len() {
            return Err(VocabError::EosOutOfRange(eos_id));
        }
        if let Some(unk) = unk_id {
            if unk as usize >= entries.len() {
                return Err(VocabError::IdOutOfRange(unk));
            }
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, surface) in entries.iter().enumerate() {
            if surface.is_empty() {
                return Err(VocabError::EmptySurface(i));
            }
            if index.insert(surface.clone(), i as TokenId).is_some() {
                return Err(VocabError::DuplicateEntry(surface.clone()));
            }
        }
        let max_surface_len = entries.iter().map(String::len).max().unwrap_or(0);
        let digest = compute_digest(&entries, eos_id);
        Ok(Self {
            entries,
            eos_id,
            unk_id,
            digest,
            index,
            max_surface_len,
        })
    }

    pub fn from_surfaces<S: AsRef<str>>(
        surfaces: &[S],
        eos: &str,
        unk: Option<&str>,
    ) -> Result<Self, VocabError> {
        let entries: Vec<String> = surfaces.iter().map(|s| s.as_ref().to_string()).collect();
        let find = |needle: &str| {
            entries
                .iter()
                .position(|e| e == needle)
                .map(|p| p as TokenId)
                .ok_or_else(|| VocabError::UnknownSurface(needle.to_string()))
        };
        let eos_id = find(eos)?;
        let unk_id = unk.map(find).transpose()?;
        Self::with_unk(entries, eos_id, unk_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.unk_id
    }

    pub fn is_eos(&self, id: TokenId) -> bool {
        id == self.eos_id
    }

    pub fn digest(&self) -> &VocabDigest {
        &self.digest
    }

    pub fn surface(&self, id: TokenId) -> Result<&str, VocabError> {
        self.entries
            .get(id as usize)
            .map(String::as_str)
            .ok_or(VocabError::IdOutOfRange(id))
    }

    pub fn token(&self, id: TokenId) -> Result<Token, VocabError> {
        Ok(Token {
            id,
            surface: self.surface(id)?.to_string(),
        })
    }

    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<(), VocabError> {
        match ids.iter().find(|&&id| id as usize >= self.entries.len()) {
            Some(&bad) => Err(VocabError::IdOutOfRange(bad)),
            None => Ok(()),
        }
    }

    /// Concatenates surfaces. The EOS marker contributes no text.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let mut out = String::new();
        for &id in ids {
            if id == self.eos_id {
                continue;
            }
            out.push_str(self.surface(id)?);
        }
        Ok(out)
    }

    /// Greedy longest-match tokenization. The EOS surface is never matched
    /// inside text.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        let mut ids = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let mut matched = None;
            let mut len = self.max_surface_len.min(rest.len());
            while len > 0 {
                if rest.is_char_boundary(len) {
                    if let Some(&id) = self.index.get(&rest[..len]) {
                        if id != self.eos_id {
                            matched = Some((id, len));
                            break;
                        }
                    }
                }
                len -= 1;
            }
            match matched {
                Some((id, len)) => {
                    ids.push(id);
                    pos += len;
                }
                None => {
                    let ch = rest.chars().next().expect("non-empty remainder");
                    match self.unk_id {
                        Some(unk) => {
                            ids.push(unk);
                            pos += ch.len_utf8();
                        }
                        None => return Err(VocabError::Untokenizable { offset: pos, ch }),
                    }
                }
            }
        }
        Ok(ids)
    }
}

fn compute_digest(entries: &[String], eos_id: TokenId) -> VocabDigest {
    let mut hasher = Sha256::new();
    hasher.update((entries.len() as u64).to_le_bytes());
    for entry in entries {
        hasher.update((entry.len() as u64).to_le_bytes());
        hasher.update(entry.as_bytes());
    }
    hasher.update(eos_id.to_le_bytes());
    VocabDigest(format!("sha256:{}", hex::encode(hasher.finalize())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Vocabulary {
        Vocabulary::from_surfaces(&["a", "b", "c", "ab", "</s>"], "</s>", None).unwrap()
    }

    #[test]
    fn rejects_duplicates_and_bad_eos() {
        assert_eq!(
            Vocabulary::new(vec!["a".into(), "a".into()], 0).unwrap_err(),
            VocabError::DuplicateEntry("a".into())
        );
        assert_eq!(
            Vocabulary::new(vec!["a".into()], 3).unwrap_err(),
            VocabError::EosOutOfRange(3)
        );
    }

    #[test]
    fn digest_is_deterministic_and_content_sensitive() {
        assert_eq!(abc().digest(), abc().digest());
        let other = Vocabulary::from_surfaces(&["a", "b", "c", "ba", "</s>"], "</s>", None).unwrap();
        assert_ne!(abc().digest(), other.digest());
        // entry boundaries matter
        let v1 = Vocabulary::new(vec!["ab".into(), "c".into()], 0).unwrap();
        let v2 = Vocabulary::new(vec!["a".into(), "bc".into()], 0).unwrap();
        assert_ne!(v1.digest(), v2.digest());
    }

    #[test]
    fn greedy_longest_match() {
        let v = abc();
        assert_eq!(v.tokenize("abca").unwrap(), vec![3, 2, 0]);
        assert_eq!(v.detokenize(&[3, 2, 0, 4]).unwrap(), "abca");
    }

    #[test]
    fn eos_surface_is_not_matched_in_text() {
        let v = Vocabulary::from_surfaces(&["<", "/", "s", ">", "</s>"], "</s>", None).unwrap();
        assert_eq!(v.tokenize("</s>").unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn untokenizable_without_unk() {
        let err = abc().tokenize("az").unwrap_err();
        assert_eq!(err, VocabError::Untokenizable { offset: 1, ch: 'z' });
        let v = Vocabulary::from_surfaces(&["a", "<unk>", "</s>"], "</s>", Some("<unk>")).unwrap();
        assert_eq!(v.tokenize("aéa").unwrap(), vec![0, 1, 0]);
    }
}
