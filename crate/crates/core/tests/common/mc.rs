//! Single-step sampling frequencies against the filtered distribution.

use semantic_autoencoder::decoding::{filtered_distribution, sample_decode, DecodeConfig};
use semantic_autoencoder::seq2seq::{Seq2SeqModel, TokenSequence, BOS};

pub struct McReport {
    pub draws: usize,
    /// Largest |frequency − probability| in units of the binomial σ.
    pub worst_sigma: f64,
    /// Tokens with zero filtered probability that were drawn anyway.
    pub impossible_draws: usize,
    pub support: usize,
}

/// Draws the first generated token `draws` times, one ChaCha stream per
/// draw, and compares frequencies with `filtered_distribution`.
pub fn first_token_check(
    model: &Seq2SeqModel,
    source: &TokenSequence,
    temperature: f32,
    top_p: f32,
    seed: u64,
    draws: usize,
) -> McReport {
    let logits = model.decoder(source).unwrap().step(BOS).unwrap();
    let probs = filtered_distribution(&logits, temperature, top_p);
    let mut counts = vec![0usize; probs.len()];
    for stream in 0..draws as u64 {
        let config = DecodeConfig {
            max_new_tokens: Some(2),
            ..DecodeConfig::sampling(temperature, top_p, seed, stream)
        };
        let out = sample_decode(model, source, &config).unwrap();
        counts[out.ids[1]] += 1;
    }
    let n = draws as f64;
    let mut worst_sigma: f64 = 0.0;
    let mut impossible_draws = 0;
    for (&q, &c) in probs.iter().zip(&counts) {
        let q = q as f64;
        if q == 0.0 {
            impossible_draws += c;
            continue;
        }
        let sigma = (q * (1.0 - q) / n).sqrt();
        if sigma > 0.0 {
            worst_sigma = worst_sigma.max((c as f64 / n - q).abs() / sigma);
        }
    }
    McReport { draws, worst_sigma, impossible_draws, support: probs.iter().filter(|&&q| q > 0.0).count() }
}
