use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::{EventBody, Transcript};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("transcript has no terminal event")]
    IncompleteTranscript,
}

/// Token accounting for one protocol round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundRecord {
    pub accepted: usize,
    pub corrected: usize,
    /// Length of the server draft; `None` when nothing was drafted.
    pub drafted: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionStats {
    pub total_tokens: usize,
    pub client_tokens: usize,
    pub server_tokens: usize,
    pub rounds: usize,
    pub interventions: usize,
    pub intervention_rate: f64,
    pub mean_accepted_fraction_when_intervening: f64,
    pub client_token_fraction: f64,
}

pub fn round_records(transcript: &Transcript) -> Result<Vec<RoundRecord>, StatsError> {
    if !transcript.is_complete() {
        return Err(StatsError::IncompleteTranscript);
    }
    let mut rounds: Vec<(u32, RoundRecord)> = Vec::new();
    for event in transcript.events() {
        let entry = |rounds: &mut Vec<(u32, RoundRecord)>| -> usize {
            if rounds.last().map(|r| r.0) != Some(event.round) {
                rounds.push((event.round, RoundRecord::default()));
            }
            rounds.len() - 1
        };
        match &event.body {
            EventBody::DraftProposed { response, .. } => {
                let i = entry(&mut rounds);
                rounds[i].1.drafted = Some(response.tokens.len());
            }
            EventBody::TokenAccepted { .. } => {
                let i = entry(&mut rounds);
                rounds[i].1.accepted += 1;
            }
            EventBody::TokenCorrected { .. } => {
                let i = entry(&mut rounds);
                rounds[i].1.corrected += 1;
            }
            _ => {}
        }
    }
    Ok(rounds
        .into_iter()
        .map(|(_, r)| r)
        .filter(|r| r.accepted + r.corrected > 0)
        .collect())
}

/// Aggregates round records; usable across many sessions at once.
pub fn stats_from_rounds(rounds: &[RoundRecord]) -> SessionStats {
    let server_tokens: usize = rounds.iter().map(|r| r.accepted).sum();
    let client_tokens: usize = rounds.iter().map(|r| r.corrected).sum();
    let total_tokens = server_tokens + client_tokens;
    let interventions = rounds.iter().filter(|r| r.corrected > 0).count();
    let fractions: Vec<f64> = rounds
        .iter()
        .filter(|r| r.corrected > 0)
        .filter_map(|r| match r.drafted {
            Some(n) if n > 0 => Some(r.accepted as f64 / n as f64),
            _ => None,
        })
        .collect();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    SessionStats {
        total_tokens,
        client_tokens,
        server_tokens,
        rounds: rounds.len(),
        interventions,
        intervention_rate: ratio(interventions, rounds.len()),
        mean_accepted_fraction_when_intervening: if fractions.is_empty() {
            0.0
        } else {
            fractions.iter().sum::<f64>() / fractions.len() as f64
        },
        client_token_fraction: ratio(client_tokens, total_tokens),
    }
}

pub fn compute_stats(transcript: &Transcript) -> Result<SessionStats, StatsError> {
    Ok(stats_from_rounds(&round_records(transcript)?))
}
