//! Straight-through checks on a toy LM and parser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semantic_autoencoder::autodiff::{Tape, Tensor, Var};
use semantic_autoencoder::autoencoder::{lm_source, straight_through_tensor};
use semantic_autoencoder::decoding::greedy_decode;
use semantic_autoencoder::seq2seq::{tokenize, Seq2SeqModel, TokenSequence};
use semantic_autoencoder::triples::{linearize, TripleSet};

pub struct Case {
    pub source: TokenSequence,
    pub w_star: TokenSequence,
    pub target: TokenSequence,
}

pub fn case(lm: &Seq2SeqModel, parser: &Seq2SeqModel, input: &TripleSet) -> Case {
    let source = lm_source(lm, input);
    let w_star = greedy_decode(lm, &source).unwrap();
    let target = tokenize(&linearize(input), &parser.vocab, parser.arch.max_target_len);
    Case { source, w_star, target }
}

/// |parser log-likelihood through the straight-through tensor − the same
/// likelihood computed from the token ids of W*|.
pub fn forward_gap(lm: &Seq2SeqModel, parser: &Seq2SeqModel, c: &Case) -> f64 {
    let mut tape = Tape::new();
    let lm_b = lm.bind(&mut tape, true);
    let parser_b = parser.bind(&mut tape, false);
    let st = straight_through_tensor(&mut tape, lm, &lm_b, &c.source, &c.w_star).unwrap().st;
    let ll = parser.soft_batch_loglik(&mut tape, &parser_b, &[st], &[&c.target]).unwrap();
    let soft = tape.value(ll)[0] as f64;
    let hard = parser.sequence_log_prob(&c.w_star, &c.target).unwrap();
    (soft - hard).abs()
}

fn lm_grads(tape: &Tape<'_>, vars: &[Var], root: Var) -> Vec<Vec<f32>> {
    let g = tape.backward(root).unwrap();
    vars.iter().map(|&v| g.get(v).map(<[f32]>::to_vec).unwrap_or_default()).collect()
}

fn max_gap(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len());
        for (p, q) in x.iter().zip(y) {
            worst = worst.max((*p as f64 - *q as f64).abs());
        }
    }
    worst
}

/// ∂(−log-likelihood)/∂X evaluated at X = one_hot(W*).
fn hard_point_gradient(parser: &Seq2SeqModel, c: &Case) -> Tensor {
    let v = parser.vocab_size();
    let mut tape = Tape::new();
    let parser_b = parser.bind(&mut tape, false);
    let hot = Tensor::from_fn(vec![c.w_star.len(), v], |i| (c.w_star.ids[i / v] == i % v) as u8 as f32);
    let x = tape.leaf(hot, true);
    let ll = parser.soft_batch_loglik(&mut tape, &parser_b, &[x], &[&c.target]).unwrap();
    let loss = tape.scale(ll, -1.0).unwrap();
    let g = tape.backward(loss).unwrap();
    Tensor::new(vec![c.w_star.len(), v], g.get(x).unwrap().to_vec()).unwrap()
}

/// ∇θ of `Σ weights ⊙ dist` where `dist` is either the straight-through
/// tensor or the soft distributions behind it.
fn weighted_grads(lm: &Seq2SeqModel, c: &Case, weights: &Tensor, use_st: bool) -> Vec<Vec<f32>> {
    let mut tape = Tape::new();
    let lm_b = lm.bind(&mut tape, true);
    let st = straight_through_tensor(&mut tape, lm, &lm_b, &c.source, &c.w_star).unwrap();
    let w = tape.constant(weights.clone());
    let x = if use_st { st.st } else { st.soft };
    let prod = tape.mul(x, w).unwrap();
    let root = tape.sum(prod).unwrap();
    lm_grads(&tape, lm_b.vars(), root)
}

/// Largest elementwise difference between ∇θ of the parser loss through the
/// straight-through tensor and ∇θ of the soft path `Σ G ⊙ P`, with `G` the
/// parser gradient at the hard point and `P` the LM's soft distributions.
pub fn backward_gap(lm: &Seq2SeqModel, parser: &Seq2SeqModel, c: &Case) -> f64 {
    let through_st = {
        let mut tape = Tape::new();
        let lm_b = lm.bind(&mut tape, true);
        let parser_b = parser.bind(&mut tape, false);
        let st = straight_through_tensor(&mut tape, lm, &lm_b, &c.source, &c.w_star).unwrap().st;
        let ll = parser.soft_batch_loglik(&mut tape, &parser_b, &[st], &[&c.target]).unwrap();
        let loss = tape.scale(ll, -1.0).unwrap();
        lm_grads(&tape, lm_b.vars(), loss)
    };
    let g = hard_point_gradient(parser, c);
    max_gap(&through_st, &weighted_grads(lm, c, &g, false))
}

/// Same comparison for a loss linear in X with random weights, where the
/// two paths must agree for any weights.
pub fn linear_gap(lm: &Seq2SeqModel, c: &Case, seed: u64) -> f64 {
    let v = lm.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::from_fn(vec![c.w_star.len(), v], |_| rng.random_range(-1.0..1.0));
    max_gap(&weighted_grads(lm, c, &weights, true), &weighted_grads(lm, c, &weights, false))
}

/// Largest absolute ∇θ entry of the straight-through loss; guards against
/// comparing vanishing gradients.
pub fn gradient_scale(lm: &Seq2SeqModel, parser: &Seq2SeqModel, c: &Case) -> f64 {
    let g = hard_point_gradient(parser, c);
    weighted_grads(lm, c, &g, false)
        .iter()
        .flatten()
        .fold(0.0f64, |m, x| m.max(x.abs() as f64))
}
