//! Seeded synthetic worlds: vocabularies, table models, profiles and queries.
//!
//! Word tokens carry a leading space and tables only ever emit word tokens
//! (or EOS), so re-tokenizing `prompt + response` reproduces the prompt
//! tokens followed by the response tokens exactly.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lm::{TableLm, TableLmFile};
use crate::pii::PiiCategory;
use crate::retrieval::UserProfile;
use crate::vocab::{TokenId, Vocabulary};

pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

pub const WORDS: [&str; 48] = [
    "garden", "soil", "water", "plant", "light", "seed", "root", "leaf", "grow", "sun", "rain", "tree",
    "bloom", "the", "and", "with", "for", "more", "each", "week", "cook", "bread", "flour", "oven",
    "salt", "bake", "run", "shoe", "trail", "pace", "mile", "rest", "book", "read", "page", "story",
    "music", "song", "tune", "note", "travel", "map", "road", "city", "coast", "river", "hill", "camp",
];

const NAMES: [&str; 12] = [
    "mara", "tobin", "lisel", "orrin", "vesna", "kalif", "dunya", "perrin", "isolde", "fenwick", "ximena", "jory",
];

const KEYWORDS: [&str; 8] = [
    "Quillonby", "Veradine", "Marrowgate", "Tessaly", "Brindlewick", "Okonraft", "Halvorsk", "Penmarrow",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Word tokens (leading space), every printable ASCII character, newline,
/// extra whole-literal tokens, unk and EOS.
pub fn vocabulary_with(extra: &[String]) -> Vocabulary {
    let mut surfaces: Vec<String> = WORDS.iter().map(|w| format!(" {w}")).collect();
    surfaces.extend((b' '..=b'~').map(|b| char::from(b).to_string()));
    surfaces.push("\n".into());
    for e in extra {
        if !surfaces.contains(e) {
            surfaces.push(e.clone());
        }
    }
    surfaces.push(UNK.into());
    surfaces.push(EOS.into());
    Vocabulary::from_surfaces(&surfaces, EOS, Some(UNK)).expect("synthetic vocabulary is valid")
}

pub fn vocabulary() -> Vocabulary {
    vocabulary_with(&[])
}

/// Ids of the word tokens, plus any extra surfaces that begin with a space.
pub fn word_ids(vocab: &Vocabulary) -> Vec<TokenId> {
    vocab
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.len() > 1 && s.starts_with(' '))
        .map(|(i, _)| i as TokenId)
        .collect()
}

/// One dense row: random weights on `support`, `eos_p` on EOS. With
/// `quantized`, weights are small integers so exact ties are common.
pub fn random_row(
    rng: &mut impl Rng,
    vocab_len: usize,
    support: &[TokenId],
    eos: TokenId,
    eos_p: f64,
    quantized: bool,
) -> Vec<f64> {
    let mut row = vec![0.0; vocab_len];
    for &id in support {
        row[id as usize] = if quantized {
            rng.random_range(0..4) as f64
        } else {
            rng.random::<f64>().powi(3)
        };
    }
    let mass: f64 = row.iter().sum();
    if mass == 0.0 {
        row[support[0] as usize] = 1.0;
    }
    let mass: f64 = row.iter().sum();
    for p in &mut row {
        *p *= (1.0 - eos_p) / mass;
    }
    row[eos as usize] += eos_p;
    row
}

/// Order-1 table with a row for every possible previous token (and the
/// empty context), drawing only from `support` and EOS.
pub fn random_table(vocab: &Vocabulary, support: &[TokenId], eos_p: f64, quantized: bool, seed: u64) -> TableLm {
    let mut r = rng(seed);
    let mut lm = TableLm::new(vocab.clone(), 1);
    let n = vocab.len();
    let eos = vocab.eos_id();
    for prev in std::iter::once(None).chain((0..n as TokenId).map(Some)) {
        let row = random_row(&mut r, n, support, eos, eos_p, quantized);
        lm.set_row(prev.into_iter().collect(), &row).expect("row is valid");
    }
    lm
}

/// A random sentence of `len` words.
pub fn sentence(rng: &mut impl Rng, len: usize) -> String {
    (0..len)
        .map(|_| *WORDS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn query(rng: &mut impl Rng) -> String {
    let n = rng.random_range(3..7);
    format!("how do I {}?", sentence(rng, n))
}

pub fn plain_profile(rng: &mut impl Rng, user_id: &str, docs: usize) -> UserProfile {
    let texts: Vec<String> = (0..docs)
        .map(|_| {
            let n = rng.random_range(4..10);
            format!("I asked about {}", sentence(rng, n))
        })
        .collect();
    UserProfile::from_texts(user_id, texts)
}

/// Server and client tables for the plain (PII-free) world.
pub fn table_pair(vocab: &Vocabulary, seed: u64) -> (TableLm, TableLm) {
    let words = word_ids(vocab);
    let server = random_table(vocab, &words, 0.04, false, seed.wrapping_mul(2).wrapping_add(1));
    let client = random_table(vocab, &words, 0.04, false, seed.wrapping_mul(2).wrapping_add(2));
    (server, client)
}

pub fn pii_literal(rng: &mut impl Rng, category: PiiCategory) -> String {
    let name = *NAMES.choose(rng).expect("non-empty");
    let d = |rng: &mut ChaCha8Rng, n: usize| -> String { (0..n).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect() };
    let mut r = ChaCha8Rng::seed_from_u64(rng.random());
    match category {
        PiiCategory::Email => format!("{name}.{}@{}mail.org", d(&mut r, 2), NAMES.choose(&mut r).unwrap()),
        PiiCategory::Phone => {
            if r.random() {
                format!("({}) {}-{}", d(&mut r, 3), d(&mut r, 3), d(&mut r, 4))
            } else {
                format!("{}-{}-{}", d(&mut r, 3), d(&mut r, 3), d(&mut r, 4))
            }
        }
        PiiCategory::Ip => format!(
            "{}.{}.{}.{}",
            r.random_range(1..=255),
            r.random_range(0..=255),
            r.random_range(0..=255),
            r.random_range(1..=255)
        ),
        PiiCategory::Url => format!("https://{name}.example.net/{}", d(&mut r, 3)),
        PiiCategory::Ssn => format!("{}-{}-{}", d(&mut r, 3), d(&mut r, 2), d(&mut r, 4)),
        PiiCategory::CreditCard => {
            let sep = if r.random() { " " } else { "-" };
            format!("4{}{sep}{}{sep}{}{sep}{}", d(&mut r, 3), d(&mut r, 4), d(&mut r, 4), d(&mut r, 4))
        }
        PiiCategory::Dob => {
            let (y, m, day) = (r.random_range(1940..2005), r.random_range(1..=12), r.random_range(1..=28));
            if r.random() {
                format!("{m}/{day}/{y}")
            } else {
                format!("{y}-{m:02}-{day:02}")
            }
        }
        PiiCategory::CustomKeyword => KEYWORDS.choose(&mut r).unwrap().to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct PiiCase {
    pub query: String,
    pub profile: UserProfile,
    pub literals: Vec<String>,
}

/// Profiles and queries seeded with PII literals of every category, plus a
/// vocabulary holding each literal as one token and tables that favor them.
#[derive(Debug, Clone)]
pub struct PiiWorld {
    pub cases: Vec<PiiCase>,
    pub keywords: Vec<String>,
    pub vocab: Vocabulary,
    pub server: TableLm,
    pub client: TableLm,
}

pub fn pii_world(n_cases: usize, seed: u64) -> PiiWorld {
    let mut r = rng(seed);
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let n_docs = r.random_range(2..=8);
        let mut docs = Vec::with_capacity(n_docs);
        let mut literals = Vec::new();
        for _ in 0..n_docs {
            let n = r.random_range(3..8);
            let mut text = format!("I asked about {}", sentence(&mut r, n));
            for _ in 0..r.random_range(1..=3) {
                let cat = *[
                    PiiCategory::Email,
                    PiiCategory::Phone,
                    PiiCategory::Ip,
                    PiiCategory::Url,
                    PiiCategory::Ssn,
                    PiiCategory::CreditCard,
                    PiiCategory::Dob,
                    PiiCategory::CustomKeyword,
                ]
                .choose(&mut r)
                .unwrap();
                let lit = pii_literal(&mut r, cat);
                let n = r.random_range(1..4);
                text.push_str(&format!(" {lit} {}", sentence(&mut r, n)));
                literals.push(lit);
            }
            docs.push(text);
        }
        let mut q = query(&mut r);
        if r.random_bool(0.3) {
            let lit = literals.choose(&mut r).unwrap().clone();
            q = format!("{} near {lit}?", q.trim_end_matches('?'));
        }
        cases.push(PiiCase {
            query: q,
            profile: UserProfile::from_texts(format!("user{i:04}"), docs),
            literals,
        });
    }
    let mut literal_tokens: Vec<String> = cases
        .iter()
        .flat_map(|c| c.literals.iter().map(|l| format!(" {l}")))
        .collect();
    literal_tokens.sort();
    literal_tokens.dedup();
    let vocab = vocabulary_with(&literal_tokens);
    let lit_ids: Vec<TokenId> = literal_tokens.iter().map(|s| vocab.id_of(s).unwrap()).collect();
    let support = word_ids(&vocab);

    let mut client = TableLm::new(vocab.clone(), 1);
    let n = vocab.len();
    let eos = vocab.eos_id();
    for prev in std::iter::once(None).chain((0..n as TokenId).map(Some)) {
        let mut row = random_row(&mut r, n, &support, eos, 0.03, false);
        for _ in 0..3 {
            row[*lit_ids.choose(&mut r).unwrap() as usize] += 0.5;
        }
        client.set_row(prev.into_iter().collect(), &row).unwrap();
    }
    let server = random_table(&vocab, &support, 0.03, false, r.random());
    PiiWorld {
        cases,
        keywords: KEYWORDS.iter().map(|s| s.to_string()).collect(),
        vocab,
        server,
        client,
    }
}

/// Words `w0..w5` and a table pair where the server greedily cycles
/// `w0 -> w1 -> ... -> w5 -> w0` and the context-free client prefers `w0`
/// with ratios 1, .3, .15, .07, .03, .01. The client share of tokens then
/// rises strictly across 0, .025, .05, .1, .2, .4.
pub fn divergent_pair() -> (TableLm, TableLm) {
    let cycle: Vec<String> = (0..6).map(|i| format!(" w{i}")).collect();
    let vocab = vocabulary_with(&cycle);
    let ids: Vec<TokenId> = cycle.iter().map(|s| vocab.id_of(s).unwrap()).collect();
    let n = vocab.len();

    let mut server = TableLm::new(vocab.clone(), 1);
    for prev in std::iter::once(None).chain((0..n as TokenId).map(Some)) {
        let next = match prev.and_then(|p| ids.iter().position(|&w| w == p)) {
            Some(i) => ids[(i + 1) % ids.len()],
            None => ids[0],
        };
        let mut row = vec![0.0; n];
        row[next as usize] = 1.0;
        server.set_row(prev.into_iter().collect(), &row).unwrap();
    }

    let mut row = vec![0.0; n];
    for (&id, p) in ids.iter().zip([1.0, 0.3, 0.15, 0.07, 0.03, 0.01]) {
        row[id as usize] = p;
    }
    let client = TableLm::new(vocab, 0).with_row(vec![], &row).unwrap();
    (server, client)
}

/// Plain profiles with `docs_per_user` entries each.
pub fn plain_profiles(n_users: usize, docs_per_user: usize, seed: u64) -> Vec<UserProfile> {
    let mut r = rng(seed);
    (0..n_users)
        .map(|i| plain_profile(&mut r, &format!("user{i:03}"), docs_per_user))
        .collect()
}

/// Writes a small demo setup: `profiles/*.jsonl`, `queries.txt`,
/// `server_table.yaml` and `client_table.yaml`.
pub fn write_demo(dir: &Path, seed: u64) -> io::Result<()> {
    let mut r = rng(seed);
    let vocab = vocabulary();
    let (server, client) = table_pair(&vocab, seed);
    fs::create_dir_all(dir.join("profiles"))?;
    for i in 0..4 {
        let profile = plain_profile(&mut r, &format!("user{i}"), 6);
        let mut lines = String::new();
        for (j, doc) in profile.docs.iter().enumerate() {
            let text = if j == 0 {
                format!("{} and mail me at {}", doc.text, pii_literal(&mut r, PiiCategory::Email))
            } else {
                doc.text.clone()
            };
            lines.push_str(&serde_json::json!({ "text": text }).to_string());
            lines.push('\n');
        }
        fs::write(dir.join("profiles").join(format!("user{i}.jsonl")), lines)?;
    }
    let queries: Vec<String> = (0..3).map(|_| query(&mut r)).collect();
    fs::write(dir.join("queries.txt"), queries.join("\n") + "\n")?;
    let dump = |lm: &TableLm| -> io::Result<String> {
        let spec: TableLmFile = lm.to_spec();
        serde_yaml::to_string(&spec).map_err(io::Error::other)
    };
    fs::write(dir.join("server_table.yaml"), dump(&server)?)?;
    fs::write(dir.join("client_table.yaml"), dump(&client)?)?;
    Ok(())
}

pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut rng(seed));
    v
}
