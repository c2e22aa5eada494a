//! Greedy search and temperature/nucleus sampling.
//!
//! Sampling draws from a ChaCha8 generator. A run-level seed is mixed with
//! the example index by [`example_seed`]; each sample of that example then
//! reads its own ChaCha stream (`set_stream(sample_index)`), so any single
//! sample can be reproduced in isolation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::softmax;
use crate::seq2seq::{Seq2SeqError, Seq2SeqModel, TokenSequence, BOS, EOS};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f32),
    #[error("nucleus mass must be in (0, 1], got {0}")]
    TopP(f32),
    #[error("sample_decode needs a sampling config")]
    NotSampling,
    #[error(transparent)]
    Model(#[from] Seq2SeqError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f32,
    pub top_p: f32,
    /// Cap on generated tokens, `EOS` included. `None` means up to the
    /// model's target length.
    pub max_new_tokens: Option<usize>,
    pub seed: u64,
    /// ChaCha stream within `seed`; the sample index.
    pub stream: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: None,
            seed: 0,
            stream: 0,
        }
    }
}

impl DecodeConfig {
    pub fn sampling(temperature: f32, top_p: f32, seed: u64, stream: u64) -> Self {
        Self {
            mode: DecodeMode::Sample,
            temperature,
            top_p,
            max_new_tokens: None,
            seed,
            stream,
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DecodeError::Temperature(self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DecodeError::TopP(self.top_p));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer applied to `seed` offset by `index`.
pub fn example_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Keeps the smallest set of most probable tokens whose mass reaches `p`
/// (the token that crosses `p` is kept), zeroes the rest and renormalizes.
/// Equal probabilities are ranked by lower token id first.
pub fn nucleus_filter(probs: &[f32], p: f32) -> Vec<f32> {
    if p >= 1.0 {
        return probs.to_vec();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0.0f32;
    let mut cut = order.len();
    for (rank, &i) in order.iter().enumerate() {
        kept += probs[i];
        if kept >= p {
            cut = rank + 1;
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    for &i in &order[..cut] {
        out[i] = probs[i] / kept;
    }
    out
}

/// Next-token distribution after temperature scaling and nucleus filtering.
pub fn filtered_distribution(logits: &[f32], temperature: f32, top_p: f32) -> Vec<f32> {
    let scaled: Vec<f32> = logits.iter().map(|&l| l / temperature).collect();
    nucleus_filter(&softmax(&scaled), top_p)
}

pub fn sample_token(logits: &[f32], temperature: f32, top_p: f32, rng: &mut impl Rng) -> usize {
    let dist = filtered_distribution(logits, temperature, top_p);
    match WeightedIndex::new(&dist) {
        Ok(w) => w.sample(rng),
        Err(_) => argmax(logits),
    }
}

fn run(
    model: &Seq2SeqModel,
    source: &TokenSequence,
    max_new: Option<usize>,
    mut choose: impl FnMut(&[f32]) -> usize,
) -> Result<TokenSequence, DecodeError> {
    let limit = model.arch.max_target_len - 1;
    let max_new = max_new.unwrap_or(limit).clamp(1, limit);
    let mut dec = model.decoder(source)?;
    let mut ids = vec![BOS];
    loop {
        if ids.len() == max_new {
            ids.push(EOS);
            break;
        }
        let logits = dec.step(*ids.last().expect("non-empty"))?;
        let next = choose(&logits);
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(TokenSequence::new(ids))
}

/// Argmax at every step until `EOS` or the length limit (then `EOS` is
/// appended).
pub fn greedy_decode(model: &Seq2SeqModel, source: &TokenSequence) -> Result<TokenSequence, DecodeError> {
    run(model, source, None, argmax)
}

pub fn greedy_decode_with(
    model: &Seq2SeqModel,
    source: &TokenSequence,
    max_new_tokens: Option<usize>,
) -> Result<TokenSequence, DecodeError> {
    run(model, source, max_new_tokens, argmax)
}

pub fn sample_decode(
    model: &Seq2SeqModel,
    source: &TokenSequence,
    config: &DecodeConfig,
) -> Result<TokenSequence, DecodeError> {
    if config.mode != DecodeMode::Sample {
        return Err(DecodeError::NotSampling);
    }
    config.validate()?;
    let mut rng = sample_rng(config.seed, config.stream);
    run(model, source, config.max_new_tokens, |logits| {
        sample_token(logits, config.temperature, config.top_p, &mut rng)
    })
}

/// Dispatches on `config.mode`.
pub fn decode(model: &Seq2SeqModel, source: &TokenSequence, config: &DecodeConfig) -> Result<TokenSequence, DecodeError> {
    match config.mode {
        DecodeMode::Greedy => greedy_decode_with(model, source, config.max_new_tokens),
        DecodeMode::Sample => sample_decode(model, source, config),
    }
}
