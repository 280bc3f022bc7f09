use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LogDistribution;
use crate::config::Sampling;
use crate::vocab::TokenId;

/// RNG for the token at absolute `position` of a sequence. Keying the stream
/// on position makes sampling a pure function of `(seed, context)`, so a
/// stateless server that re-samples from a resent history draws the same
/// tokens as one continuous decode.
pub fn step_rng(seed: u64, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(position as u64);
    rng
}

pub fn sample_from(dist: &LogDistribution, sampling: &Sampling, position: usize) -> TokenId {
    match *sampling {
        Sampling::Greedy => dist.argmax().0,
        Sampling::Nucleus {
            top_p,
            temperature,
            seed,
        } => nucleus(dist, top_p, temperature, &mut step_rng(seed, position)),
    }
}

fn nucleus<R: Rng>(dist: &LogDistribution, top_p: f64, temperature: f64, rng: &mut R) -> TokenId {
    let mut support: Vec<(TokenId, f64)> = dist
        .iter()
        .filter(|(_, lp)| lp.is_finite())
        .map(|(id, lp)| (id, lp / temperature))
        .collect();
    if support.is_empty() {
        return dist.argmax().0;
    }
    let max = support.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
    for entry in &mut support {
        entry.1 = (entry.1 - max).exp();
    }
    let z: f64 = support.iter().map(|&(_, p)| p).sum();
    support.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut kept = 0;
    let mut cum = 0.0;
    for &(_, p) in &support {
        kept += 1;
        cum += p / z;
        if cum >= top_p {
            break;
        }
    }
    let nucleus = &support[..kept];
    let mass: f64 = nucleus.iter().map(|&(_, p)| p).sum();
    let mut target = rng.random::<f64>() * mass;
    for &(id, p) in nucleus {
        if target < p {
            return id;
        }
        target -= p;
    }
    nucleus[kept - 1].0
}
