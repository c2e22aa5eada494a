//! A tiny LM and parser pair (vocabulary 15, sequences of at most 8 tokens)
//! trained briefly on four pairs so their distributions are not uniform.

use semantic_autoencoder::seq2seq::{
    tokenize, train_supervised, Architecture, Role, Seq2SeqModel, TokenSequence, TrainConfig, Vocab,
};
use semantic_autoencoder::triples::{parse_linearized, TripleSet};

pub const PAIRS: [(&str, &str); 4] = [
    ("x | r | y", "a b c"),
    ("y | r | x", "b a c"),
    ("x | r | x", "d e"),
    ("y | r | y", "e f d"),
];

pub fn arch() -> Architecture {
    Architecture {
        layers: 1,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        max_source_len: 8,
        max_target_len: 8,
    }
}

pub fn vocab() -> Vocab {
    let texts: Vec<&str> = PAIRS.iter().flat_map(|(s, w)| [*s, *w]).collect();
    Vocab::build(texts)
}

pub fn triples(i: usize) -> TripleSet {
    parse_linearized(PAIRS[i].0).set
}

fn pairs(vocab: &Vocab, role: Role) -> Vec<(TokenSequence, TokenSequence)> {
    PAIRS
        .iter()
        .map(|(s, w)| {
            let (s, w) = (tokenize(s, vocab, 8), tokenize(w, vocab, 8));
            match role {
                Role::SemanticLm => (s, w),
                Role::SemanticParser => (w, s),
            }
        })
        .collect()
}

/// Trainable LM and frozen parser.
pub fn models(seed: u64, steps: usize) -> (Seq2SeqModel, Seq2SeqModel) {
    let vocab = vocab();
    let config = TrainConfig { batch_size: 4, steps, lr: 1e-2, seed, dropout: 0.0 };
    let mut lm = Seq2SeqModel::new(Role::SemanticLm, arch(), vocab.clone(), seed).unwrap();
    train_supervised(&mut lm, &pairs(&vocab, Role::SemanticLm), &config).unwrap();
    let mut parser = Seq2SeqModel::new(Role::SemanticParser, arch(), vocab.clone(), seed + 1).unwrap();
    train_supervised(&mut parser, &pairs(&vocab, Role::SemanticParser), &config).unwrap();
    parser.trainable = false;
    (lm, parser)
}
