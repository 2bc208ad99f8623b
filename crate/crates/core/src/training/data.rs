//! Byte-level corpora and MLM/CLM batch construction.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::model::{Batch, Objective};

/// Bytes map to ids 0..=255; two specials follow.
pub const PAD_ID: usize = 256;
pub const MASK_ID: usize = 257;
pub const VOCAB_SIZE: usize = 258;

/// A tokenized corpus cut into windows of `seq_len` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusDataset {
    ids: Vec<usize>,
    seq_len: usize,
}

impl CorpusDataset {
    pub fn from_bytes(bytes: &[u8], seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::config("model.max_seq_len", "must be >= 1"));
        }
        // CLM windows need one extra token for the final target.
        if bytes.len() < seq_len + 1 {
            return Err(Error::Data(format!(
                "corpus has {} bytes, need at least {} for sequence length {seq_len}",
                bytes.len(),
                seq_len + 1
            )));
        }
        Ok(CorpusDataset {
            ids: bytes.iter().map(|&b| b as usize).collect(),
            seq_len,
        })
    }

    pub fn from_file(path: &Path, seq_len: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, seq_len)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Splits off the trailing `eval_fraction` of tokens as a held-out set.
    pub fn split(&self, eval_fraction: f64) -> Result<(Self, Self)> {
        if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
            return Err(Error::config("data.eval_fraction", "must lie in (0, 1)"));
        }
        let cut = ((1.0 - eval_fraction) * self.ids.len() as f64) as usize;
        let train = Self::from_ids(self.ids[..cut].to_vec(), self.seq_len)?;
        let eval = Self::from_ids(self.ids[cut..].to_vec(), self.seq_len)?;
        Ok((train, eval))
    }

    fn from_ids(ids: Vec<usize>, seq_len: usize) -> Result<Self> {
        if ids.len() < seq_len + 1 {
            return Err(Error::Data(format!("split of {} tokens is shorter than one window", ids.len())));
        }
        Ok(CorpusDataset { ids, seq_len })
    }

    /// `seq_len + 1` tokens starting at a uniform random offset.
    fn window<R: Rng + ?Sized>(&self, rng: &mut R) -> &[usize] {
        let start = rng.random_range(0..=self.ids.len() - self.seq_len - 1);
        &self.ids[start..start + self.seq_len + 1]
    }
}

/// Replaces Bernoulli(`mask_prob`) positions by [`MASK_ID`]; targets hold
/// the original ids there and `None` elsewhere. Every sequence gets at
/// least one masked position (the draw is repeated until it does).
pub fn make_mlm_batch<R: Rng + ?Sized>(data: &CorpusDataset, rng: &mut R, mask_prob: f64, batch_size: usize) -> Batch {
    let mut inputs = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size * data.seq_len);
    for _ in 0..batch_size {
        let window = &data.window(rng)[..data.seq_len];
        let mask = loop {
            let m: Vec<bool> = (0..window.len()).map(|_| rng.random::<f64>() < mask_prob).collect();
            if m.iter().any(|&b| b) {
                break m;
            }
        };
        inputs.push(window.iter().zip(&mask).map(|(&t, &m)| if m { MASK_ID } else { t }).collect());
        targets.extend(window.iter().zip(&mask).map(|(&t, &m)| m.then_some(t)));
    }
    Batch { inputs, targets }
}

/// Next-token batch: every position predicts the following byte.
pub fn make_clm_batch<R: Rng + ?Sized>(data: &CorpusDataset, rng: &mut R, batch_size: usize) -> Batch {
    let mut inputs = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size * data.seq_len);
    for _ in 0..batch_size {
        let window = data.window(rng);
        inputs.push(window[..data.seq_len].to_vec());
        targets.extend(window[1..].iter().map(|&t| Some(t)));
    }
    Batch { inputs, targets }
}

pub fn make_batch<R: Rng + ?Sized>(data: &CorpusDataset, rng: &mut R, objective: Objective, batch_size: usize) -> Batch {
    match objective {
        Objective::Mlm { mask_prob } => make_mlm_batch(data, rng, mask_prob, batch_size),
        Objective::Clm => make_clm_batch(data, rng, batch_size),
    }
}

/// `n_batches` fixed batches, reproducible from `seed`.
pub fn fixed_batches(
    data: &CorpusDataset,
    objective: Objective,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if n_batches == 0 || batch_size == 0 {
        return Err(Error::Data("requested an empty evaluation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_batches).map(|_| make_batch(data, &mut rng, objective, batch_size)).collect())
}

const DETERMINERS: &[&str] = &["the", "a", "this", "every", "one", "that", "no", "some"];
const ADJECTIVES: &[&str] = &[
    "small", "large", "early", "quiet", "bright", "old", "new", "strange", "simple", "narrow", "green", "distant",
];
const NOUNS: &[&str] = &[
    "river", "city", "model", "signal", "garden", "letter", "engine", "village", "teacher", "window", "story",
    "mountain", "network", "market", "song", "bridge", "island", "machine", "painter", "harbor",
];
const VERBS: &[&str] = &[
    "crossed", "followed", "carried", "found", "built", "watched", "opened", "described", "reached", "changed",
    "measured", "remembered", "joined", "left",
];
const PREPOSITIONS: &[&str] = &["near", "under", "beyond", "with", "across", "behind", "inside", "toward"];

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, words: &[&'a str]) -> &'a str {
    // Zipf-like preference for earlier entries.
    let weights: Vec<f64> = (0..words.len()).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (w, word) in weights.iter().zip(words) {
        if u < *w {
            return word;
        }
        u -= w;
    }
    words.choose(rng).copied().unwrap_or_default()
}

fn noun_phrase<R: Rng + ?Sized>(rng: &mut R, out: &mut String) {
    out.push_str(pick(rng, DETERMINERS));
    out.push(' ');
    if rng.random::<f64>() < 0.4 {
        out.push_str(pick(rng, ADJECTIVES));
        out.push(' ');
    }
    out.push_str(pick(rng, NOUNS));
}

/// Deterministic English-like text of exactly `n_bytes` bytes, built from
/// a small grammar so that a byte model has structure to learn.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(n_bytes + 128);
    while text.len() < n_bytes {
        let start = text.len();
        noun_phrase(&mut rng, &mut text);
        text.push(' ');
        text.push_str(pick(&mut rng, VERBS));
        text.push(' ');
        noun_phrase(&mut rng, &mut text);
        if rng.random::<f64>() < 0.5 {
            text.push(' ');
            text.push_str(pick(&mut rng, PREPOSITIONS));
            text.push(' ');
            noun_phrase(&mut rng, &mut text);
        }
        if rng.random::<f64>() < 0.25 {
            text.push_str(" and ");
            noun_phrase(&mut rng, &mut text);
        }
        text.push('.');
        text.push(if rng.random::<f64>() < 0.15 { '\n' } else { ' ' });
        // Capitalize the sentence start.
        let first = text[start..start + 1].to_ascii_uppercase();
        text.replace_range(start..start + 1, &first);
    }
    text.truncate(n_bytes);
    text.into_bytes()
}
