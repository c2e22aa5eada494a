mod common;

use common::toy;
use semantic_autoencoder::autodiff::{log_softmax, Tape, Tensor};
use semantic_autoencoder::corpus::{generate_synthetic, SyntheticGrammar};
use semantic_autoencoder::seq2seq::{
    load_checkpoint, save_checkpoint, tokenize, train_supervised, Architecture, Role, Seq2SeqError, Seq2SeqModel,
    Source, TokenSequence, TrainConfig, Vocab, PAD,
};
use semantic_autoencoder::triples::linearize;

fn seq(vocab: &Vocab, text: &str) -> TokenSequence {
    tokenize(text, vocab, 8)
}

fn untrained(role: Role, seed: u64) -> Seq2SeqModel {
    Seq2SeqModel::new(role, toy::arch(), toy::vocab(), seed).unwrap()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn initial_loss_is_near_uniform() {
    let data = generate_synthetic(&SyntheticGrammar::default(), 64, 2).unwrap();
    let texts: Vec<String> = data.iter().flat_map(|e| [linearize(&e.triples), e.references[0].clone()]).collect();
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    let arch = Architecture::default();
    let pairs: Vec<_> = data
        .iter()
        .map(|e| (tokenize(&linearize(&e.triples), &vocab, 64), tokenize(&e.references[0], &vocab, 64)))
        .collect();
    let mut model = Seq2SeqModel::new(Role::SemanticLm, arch, vocab.clone(), 0).unwrap();
    let config = TrainConfig { steps: 1, ..TrainConfig::default() };
    let log = train_supervised(&mut model, &pairs, &config).unwrap();
    let uniform = (vocab.len() as f32).ln();
    assert!((log.losses[0] - uniform).abs() < 0.1 * uniform, "{} vs ln v = {uniform}", log.losses[0]);
}

#[test]
fn overfits_a_single_pair() {
    let vocab = toy::vocab();
    let mut model = untrained(Role::SemanticLm, 1);
    let pairs = vec![(seq(&vocab, "x | r | y"), seq(&vocab, "a b c d"))];
    let config = TrainConfig { batch_size: 1, steps: 200, lr: 1e-2, seed: 0, dropout: 0.0 };
    let log = train_supervised(&mut model, &pairs, &config).unwrap();
    assert!(*log.losses.last().unwrap() < 0.05, "{:?}", &log.losses[190..]);
    assert!(log.losses.last() < log.losses.first());
}

#[test]
fn training_is_deterministic() {
    let vocab = toy::vocab();
    let pairs: Vec<_> = toy::PAIRS.iter().map(|(s, w)| (seq(&vocab, s), seq(&vocab, w))).collect();
    let config = TrainConfig { batch_size: 3, steps: 15, lr: 1e-2, seed: 4, dropout: 0.1 };
    let run = || {
        let mut m = untrained(Role::SemanticLm, 2);
        let log = train_supervised(&mut m, &pairs, &config).unwrap();
        (log, m.params.checksum())
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_models_refuse_training() {
    let vocab = toy::vocab();
    let mut m = untrained(Role::SemanticLm, 2);
    m.trainable = false;
    let pairs = vec![(seq(&vocab, "x"), seq(&vocab, "a"))];
    assert!(matches!(train_supervised(&mut m, &pairs, &TrainConfig::default()), Err(Seq2SeqError::Frozen)));
}

#[test]
fn decoder_is_causal() {
    let vocab = toy::vocab();
    let m = untrained(Role::SemanticLm, 3);
    let src = seq(&vocab, "x | r | y");
    let a = seq(&vocab, "a b c d e");
    let mut b = a.clone();
    b.ids[3] = vocab.id("f");
    let (la, lb) = (m.teacher_forced_logits(&src, &a).unwrap(), m.teacher_forced_logits(&src, &b).unwrap());
    let v = vocab.len();
    // Row j predicts token j + 1 from tokens 0..=j.
    assert_eq!(la.data()[..3 * v], lb.data()[..3 * v]);
    assert!(max_diff(&la.data()[3 * v..], &lb.data()[3 * v..]) > 0.0);
}

#[test]
fn pad_tail_does_not_change_the_loss() {
    let vocab = toy::vocab();
    let m = untrained(Role::SemanticLm, 3);
    let src = seq(&vocab, "x | r | y");
    let tgt = seq(&vocab, "a b");
    let mut padded = tgt.clone();
    padded.ids.extend([PAD, PAD]);
    let loss = |t: &TokenSequence| {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let l = m.batch_loss(&mut tape, &b, &[Source::Ids(&src.ids)], &[t]).unwrap();
        tape.value(l)[0]
    };
    assert!((loss(&tgt) - loss(&padded)).abs() < 1e-6);
}

#[test]
fn one_hot_source_matches_token_ids() {
    let vocab = toy::vocab();
    let m = untrained(Role::SemanticParser, 4);
    let text = seq(&vocab, "b a c");
    let target = seq(&vocab, "y | r | x");
    let v = vocab.len();
    let hot = Tensor::from_fn(vec![text.len(), v], |i| (text.ids[i / v] == i % v) as u8 as f32);
    let soft = m.soft_teacher_forced_loglik(&hot, &target).unwrap() as f64;
    let hard = m.sequence_log_prob(&text, &target).unwrap();
    assert!((soft - hard).abs() < 1e-5, "{soft} vs {hard}");
}

#[test]
fn soft_source_gradient_matches_finite_differences() {
    let vocab = toy::vocab();
    let (_, parser) = toy::models(6, 20);
    let text = seq(&vocab, "e f d");
    let target = seq(&vocab, "y | r | y");
    let v = vocab.len();
    // Half one-hot, half uniform, so every entry can move by 2h either way.
    let base = Tensor::from_fn(vec![text.len(), v], |i| {
        0.5 * (text.ids[i / v] == i % v) as u8 as f32 + 0.5 / v as f32
    });
    let grad = {
        let mut tape = Tape::new();
        let b = parser.bind(&mut tape, false);
        let x = tape.leaf(base.clone(), true);
        let ll = parser.soft_loglik_on_tape(&mut tape, &b, x, &target).unwrap();
        tape.backward(ll).unwrap().get(x).unwrap().to_vec()
    };
    // Large steps cross ReLU kinks; small ones drown in f32 rounding.
    let h = 2e-3f32;
    let mut worst: f64 = 0.0;
    for row in 0..text.len() {
        for (a, b) in [(4, 5), (7, 11), (text.ids[row], 2)] {
            if a == b {
                continue;
            }
            // Move mass from b to a; the rows stay distributions.
            let shifted = |sign: f32| {
                let mut t = base.clone();
                t.data_mut()[row * v + a] += sign * h;
                t.data_mut()[row * v + b] -= sign * h;
                parser.soft_teacher_forced_loglik(&t, &target).unwrap() as f64
            };
            // Fourth-order central difference.
            let numeric =
                (8.0 * (shifted(1.0) - shifted(-1.0)) - (shifted(2.0) - shifted(-2.0))) / (12.0 * h as f64);
            let analytic = (grad[row * v + a] - grad[row * v + b]) as f64;
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn rejects_non_distributions() {
    let vocab = toy::vocab();
    let m = untrained(Role::SemanticParser, 4);
    let target = seq(&vocab, "x");
    let bad = Tensor::from_fn(vec![2, vocab.len()], |_| 0.5);
    assert!(matches!(m.soft_teacher_forced_loglik(&bad, &target), Err(Seq2SeqError::RowSum { row: 0, .. })));
    let lm = untrained(Role::SemanticLm, 4);
    let ok = Tensor::from_fn(vec![1, vocab.len()], |i| (i == 1) as u8 as f32);
    assert!(matches!(lm.soft_teacher_forced_loglik(&ok, &target), Err(Seq2SeqError::RoleMismatch { .. })));
}

#[test]
fn incremental_decoding_matches_teacher_forcing() {
    let vocab = toy::vocab();
    let (lm, _) = toy::models(8, 20);
    let src = seq(&vocab, "y | r | x");
    let tgt = seq(&vocab, "b a c d");
    let full = lm.teacher_forced_logits(&src, &tgt).unwrap();
    let v = vocab.len();
    let mut dec = lm.decoder(&src).unwrap();
    for (j, &tok) in tgt.ids[..tgt.len() - 1].iter().enumerate() {
        assert_eq!(dec.position(), j);
        let step = dec.step(tok).unwrap();
        let d = max_diff(&step, &full.data()[j * v..(j + 1) * v]);
        assert!(d < 1e-4, "position {j}: {d}");
    }
}

#[test]
fn sequence_log_prob_sums_token_log_probs() {
    let vocab = toy::vocab();
    let (lm, _) = toy::models(8, 20);
    let src = seq(&vocab, "x | r | x");
    let tgt = seq(&vocab, "d e");
    let logits = lm.teacher_forced_logits(&src, &tgt).unwrap();
    let v = vocab.len();
    let manual: f64 = logits
        .data()
        .chunks(v)
        .zip(&tgt.ids[1..])
        .map(|(row, &gold)| log_softmax(row)[gold] as f64)
        .sum();
    let lp = lm.sequence_log_prob(&src, &tgt).unwrap();
    assert!((lp - manual).abs() < 1e-5);
    assert!(lp < 0.0);
}

#[test]
fn length_limits_are_enforced() {
    let m = untrained(Role::SemanticLm, 1);
    let long = TokenSequence::new(vec![1; 9]);
    let short = TokenSequence::new(vec![1, 2]);
    assert!(matches!(m.sequence_log_prob(&long, &short), Err(Seq2SeqError::Length { .. })));
    assert!(matches!(m.sequence_log_prob(&short, &long), Err(Seq2SeqError::Length { .. })));
    let bad = TokenSequence::new(vec![1, 99, 2]);
    assert!(matches!(m.sequence_log_prob(&bad, &short), Err(Seq2SeqError::Token { id: 99, .. })));
}

#[test]
fn checkpoints_round_trip() {
    let vocab = toy::vocab();
    let (lm, _) = toy::models(2, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lm.ckpt");
    save_checkpoint(&lm, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params.checksum(), lm.params.checksum());
    assert_eq!((back.role, &back.arch, &back.vocab), (lm.role, &lm.arch, &lm.vocab));
    let (s, t) = (seq(&vocab, "x | r | y"), seq(&vocab, "a b c"));
    assert_eq!(back.sequence_log_prob(&s, &t).unwrap(), lm.sequence_log_prob(&s, &t).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
