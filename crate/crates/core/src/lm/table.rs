use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LmBackend, LmError, LogDistribution};
use crate::vocab::{TokenId, Vocabulary};

/// Explicit n-gram table. The next-token distribution is keyed by the last
/// `order` context tokens (fewer at the start of a sequence); unseen keys
/// fall back to uniform.
#[derive(Debug, Clone)]
pub struct TableLm {
    vocab: Vocabulary,
    order: usize,
    rows: HashMap<Vec<TokenId>, Vec<f64>>,
    max_context: usize,
    uniform: Vec<f64>,
}

/// On-disk form, JSON or YAML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableLmFile {
    pub order: usize,
    pub vocab: Vec<String>,
    pub eos: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unk: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_context: Option<usize>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub context: Vec<String>,
    pub next: BTreeMap<String, f64>,
}

impl TableLm {
    pub fn new(vocab: Vocabulary, order: usize) -> Self {
        let n = vocab.len();
        Self {
            vocab,
            order,
            rows: HashMap::new(),
            max_context: usize::MAX,
            uniform: vec![-(n as f64).ln(); n],
        }
    }

    pub fn with_max_context(mut self, max_context: usize) -> Self {
        self.max_context = max_context;
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Installs a row from dense, unnormalized probabilities.
    pub fn set_row(&mut self, context: Vec<TokenId>, probs: &[f64]) -> Result<(), LmError> {
        if context.len() > self.order {
            return Err(LmError::InvalidTable(format!(
                "context of length {} exceeds order {}",
                context.len(),
                self.order
            )));
        }
        self.vocab.check_ids(&context)?;
        if probs.len() != self.vocab.len() {
            return Err(LmError::InvalidTable(format!(
                "row has {} entries, vocabulary has {}",
                probs.len(),
                self.vocab.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LmError::InvalidTable("probabilities must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(LmError::InvalidTable("row has zero mass".into()));
        }
        let logp = probs.iter().map(|p| (p / total).ln()).collect();
        self.rows.insert(context, logp);
        Ok(())
    }

    pub fn with_row(mut self, context: Vec<TokenId>, probs: &[f64]) -> Result<Self, LmError> {
        self.set_row(context, probs)?;
        Ok(self)
    }

    pub fn row(&self, context: &[TokenId]) -> Option<&[f64]> {
        self.rows.get(context).map(Vec::as_slice)
    }

    fn key<'a>(&self, context: &'a [TokenId]) -> &'a [TokenId] {
        &context[context.len().saturating_sub(self.order)..]
    }

    pub fn from_spec(spec: TableLmFile) -> Result<Self, LmError> {
        let vocab = Vocabulary::from_surfaces(&spec.vocab, &spec.eos, spec.unk.as_deref())?;
        let lookup = |s: &str| {
            vocab
                .id_of(s)
                .ok_or_else(|| LmError::InvalidTable(format!("unknown surface {s:?}")))
        };
        let mut rows = Vec::with_capacity(spec.rows.len());
        for row in &spec.rows {
            let context = row
                .context
                .iter()
                .map(|s| lookup(s))
                .collect::<Result<Vec<_>, _>>()?;
            let mut dense = vec![0.0; vocab.len()];
            for (surface, p) in &row.next {
                dense[lookup(surface)? as usize] = *p;
            }
            rows.push((context, dense));
        }
        let mut lm = TableLm::new(vocab, spec.order);
        if let Some(max) = spec.max_context {
            lm.max_context = max;
        }
        for (context, dense) in rows {
            lm.set_row(context, &dense)?;
        }
        Ok(lm)
    }

    pub fn to_spec(&self) -> TableLmFile {
        let surface = |id: TokenId| self.vocab.entries()[id as usize].clone();
        let mut rows: Vec<TableRow> = self
            .rows
            .iter()
            .map(|(ctx, logp)| TableRow {
                context: ctx.iter().map(|&id| surface(id)).collect(),
                next: logp
                    .iter()
                    .enumerate()
                    .filter(|(_, lp)| lp.is_finite())
                    .map(|(i, lp)| (surface(i as TokenId), lp.exp()))
                    .collect(),
            })
            .collect();
        rows.sort_by(|a, b| a.context.cmp(&b.context));
        TableLmFile {
            order: self.order,
            vocab: self.vocab.entries().to_vec(),
            eos: surface(self.vocab.eos_id()),
            unk: self.vocab.unk_id().map(surface),
            max_context: (self.max_context != usize::MAX).then_some(self.max_context),
            rows,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| LmError::InvalidTable(format!("{}: {e}", path.display())))?;
        let spec: TableLmFile = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| LmError::InvalidTable(e.to_string()))?
        } else {
            serde_yaml::from_str(&text).map_err(|e| LmError::InvalidTable(e.to_string()))?
        };
        Self::from_spec(spec)
    }
}

impl LmBackend for TableLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<LogDistribution, LmError> {
        if context.len() > self.max_context {
            return Err(LmError::ContextTooLong {
                len: context.len(),
                max: self.max_context,
            });
        }
        self.vocab.check_ids(context)?;
        let row = self.rows.get(self.key(context)).unwrap_or(&self.uniform);
        Ok(LogDistribution::Full(row.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Sampling;

    fn abc() -> TableLm {
        let vocab = Vocabulary::from_surfaces(&["a", "b", "c", "</s>"], "</s>", None).unwrap();
        TableLm::new(vocab, 1)
            .with_row(vec![0], &[0.6, 0.3, 0.1, 0.0])
            .unwrap()
    }

    #[test]
    fn reads_row_directly() {
        let d = abc().next_distribution(&[1, 0]).unwrap();
        for (id, p) in [(0, 0.6f64), (1, 0.3), (2, 0.1)] {
            assert!((d.logp(id) - p.ln()).abs() < 1e-12);
        }
        assert_eq!(d.logp(3), f64::NEG_INFINITY);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let vocab = Vocabulary::from_surfaces(&["a", "b", "c"], "c", None).unwrap();
        let lm = TableLm::new(vocab, 1);
        let d = lm.next_distribution(&[1]).unwrap();
        for id in 0..3 {
            assert!((d.logp(id).exp() - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn score_token_readout() {
        let s = abc().score_token(&[0], 1).unwrap();
        assert!((s.logp_token - 0.3f64.ln()).abs() < 1e-12);
        assert!((s.logp_argmax - 0.6f64.ln()).abs() < 1e-12);
        assert_eq!(s.argmax_token, 0);
        let same = abc().score_token(&[0], 0).unwrap();
        assert_eq!(same.log_ratio(), 0.0);
    }

    #[test]
    fn greedy_chain_and_eos_stop() {
        let lm = abc();
        assert_eq!(lm.sample_k(&[0], 3, &Sampling::Greedy).unwrap(), vec![0, 0, 0]);
        // b -> c -> </s>
        let lm = lm
            .with_row(vec![1], &[0.0, 0.0, 1.0, 0.0])
            .unwrap()
            .with_row(vec![2], &[0.1, 0.0, 0.0, 0.9])
            .unwrap();
        assert_eq!(lm.sample_k(&[1], 3, &Sampling::Greedy).unwrap(), vec![2, 3]);
    }

    #[test]
    fn normalizes_and_rejects_bad_rows() {
        let vocab = Vocabulary::from_surfaces(&["a", "b"], "b", None).unwrap();
        let lm = TableLm::new(vocab, 1).with_row(vec![0], &[2.0, 2.0]).unwrap();
        assert!((lm.next_distribution(&[0]).unwrap().total_mass() - 1.0).abs() < 1e-12);
        let mut lm = lm;
        assert!(lm.set_row(vec![0], &[0.0, 0.0]).is_err());
        assert!(lm.set_row(vec![0], &[-1.0, 2.0]).is_err());
        assert!(lm.set_row(vec![0, 1], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn context_limit() {
        let lm = abc().with_max_context(2);
        assert_eq!(
            lm.next_distribution(&[0, 0, 0]).unwrap_err(),
            LmError::ContextTooLong { len: 3, max: 2 }
        );
    }

    #[test]
    fn spec_round_trip() {
        let lm = abc();
        let spec = lm.to_spec();
        let yaml = serde_yaml::to_string(&spec).unwrap();
        let back = TableLm::from_spec(serde_yaml::from_str(&yaml).unwrap()).unwrap();
        assert_eq!(back.vocabulary().digest(), lm.vocabulary().digest());
        let (a, b) = (back.next_distribution(&[0]).unwrap(), lm.next_distribution(&[0]).unwrap());
        for id in 0..4 {
            let (x, y) = (a.logp(id), b.logp(id));
            assert!(x == y || (x - y).abs() < 1e-12, "{id}: {x} vs {y}");
        }
    }
}
