use serde::{Deserialize, Serialize};

use super::{lm_source, make_candidate, AutoencoderError, Candidate, CandidateSource, SelectionPolicy};
use crate::autodiff::{Adam, Tape, TensorError, Var};
use crate::decoding::greedy_decode;
use crate::seq2seq::{tokenize, Bound, Seq2SeqError, Seq2SeqModel, Source, TokenSequence, BOS};
use crate::triples::{linearize, TripleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Reset the LM after each batch, so examples do not influence each other.
    pub restore_theta_after: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 4,
            lr: 1e-3,
            batch_size: 64,
            restore_theta_after: true,
        }
    }
}

/// The straight-through tensor and the soft distributions it is built on,
/// both `(len(W*), v)`. Row 0 is the one-hot `BOS` row in both.
#[derive(Debug, Clone, Copy)]
pub struct StraightThrough {
    /// `soft + stop_gradient(one_hot(W*) - soft)`: one-hot forward, soft
    /// backward.
    pub st: Var,
    pub soft: Var,
}

/// Builds the straight-through estimate of `w_star` from the LM's
/// teacher-forced next-token distributions.
pub fn straight_through_tensor(
    tape: &mut Tape<'_>,
    lm: &Seq2SeqModel,
    lm_bound: &Bound,
    source: &TokenSequence,
    w_star: &TokenSequence,
) -> Result<StraightThrough, AutoencoderError> {
    if w_star.len() < 2 || w_star.ids[0] != BOS {
        return Err(AutoencoderError::Config(format!(
            "W* must start with BOS and contain at least one generated token, got {:?}",
            w_star.ids
        )));
    }
    let v = lm.vocab_size();
    let logits = lm.forward_batch(tape, lm_bound, &[Source::Ids(&source.ids)], &[w_star])?;
    let rows = tape.shape(logits)[0];
    if rows + 1 != w_star.len() {
        return Err(AutoencoderError::Config(format!(
            "{rows} distribution rows for a sequence of {} tokens",
            w_star.len()
        )));
    }
    let probs = tape.softmax(logits).map_err(Seq2SeqError::from)?;
    let hard = tape.one_hot(&w_star.ids[1..], v).map_err(Seq2SeqError::from)?;
    let diff = tape.sub(hard, probs).map_err(Seq2SeqError::from)?;
    let frozen = tape.stop_gradient(diff);
    let rest = tape.add(probs, frozen).map_err(Seq2SeqError::from)?;
    let bos = tape.one_hot(&[BOS], v).map_err(Seq2SeqError::from)?;
    let st = tape.concat(&[bos, rest], 0).map_err(Seq2SeqError::from)?;
    let soft = tape.concat(&[bos, probs], 0).map_err(Seq2SeqError::from)?;
    Ok(StraightThrough { st, soft })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub selected: usize,
    /// `W_1 .. W_k`, `W_1` decoded before any update.
    pub candidates: Vec<Candidate>,
    /// Set when an update produced non-finite values; the candidates are
    /// those decoded before it.
    pub degraded: Option<String>,
}

fn is_non_finite(e: &Seq2SeqError) -> bool {
    matches!(e, Seq2SeqError::Tensor(TensorError::NonFinite { .. }))
}

/// One update of θ: maximize the parser's soft log-likelihood of each
/// input given the straight-through tensor of its greedy output.
fn update(
    lm: &mut Seq2SeqModel,
    parser: &Seq2SeqModel,
    adam: &mut Adam,
    sources: &[TokenSequence],
    outputs: &[TokenSequence],
    targets: &[TokenSequence],
) -> Result<(), AutoencoderError> {
    let grads = {
        let mut tape = Tape::new();
        let lm_bound = lm.bind(&mut tape, true);
        let parser_bound = parser.bind(&mut tape, false);
        let mut dists = Vec::with_capacity(sources.len());
        for (s, w) in sources.iter().zip(outputs) {
            dists.push(straight_through_tensor(&mut tape, lm, &lm_bound, s, w)?.st);
        }
        let target_refs: Vec<&TokenSequence> = targets.iter().collect();
        let loglik = parser.soft_batch_loglik(&mut tape, &parser_bound, &dists, &target_refs)?;
        let loss = tape
            .scale(loglik, -1.0 / sources.len() as f32)
            .map_err(Seq2SeqError::from)?;
        let mut grads = tape.backward(loss).map_err(Seq2SeqError::from)?;
        lm_bound.vars().iter().map(|&v| grads.take(v)).collect::<Vec<_>>()
    };
    adam.step(&mut lm.params, &grads).map_err(Seq2SeqError::from)?;
    Ok(())
}

/// Greedy finetuning over `inputs`, in batches of `config.batch_size` with
/// one Adam state per batch. Each iteration decodes every example greedily
/// under the current θ, records the output, then takes one Adam step on
/// the batch-mean negative soft log-likelihood of the inputs. The parser
/// must be frozen; only θ changes.
pub fn greedy_finetune(
    lm: &mut Seq2SeqModel,
    parser: &Seq2SeqModel,
    inputs: &[TripleSet],
    config: &FinetuneConfig,
) -> Result<Vec<FinetuneOutcome>, AutoencoderError> {
    super::check_pair(lm, parser)?;
    if parser.trainable {
        return Err(AutoencoderError::ParserNotFrozen);
    }
    if !lm.trainable {
        return Err(AutoencoderError::LmFrozen);
    }
    if config.iterations == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(AutoencoderError::Config(format!("invalid finetune config {config:?}")));
    }
    let original = (!config.restore_theta_after).then(|| lm.clone());
    let mut outcomes = Vec::with_capacity(inputs.len());

    for chunk in inputs.chunks(config.batch_size) {
        let snapshot = config.restore_theta_after.then(|| lm.params.clone());
        let mut adam = Adam::new(&lm.params, config.lr);
        let sources: Vec<TokenSequence> = chunk.iter().map(|s| lm_source(lm, s)).collect();
        let targets: Vec<TokenSequence> = chunk
            .iter()
            .map(|s| tokenize(&linearize(s), &parser.vocab, parser.arch.max_target_len))
            .collect();
        let mut decoded: Vec<Vec<TokenSequence>> = vec![Vec::new(); chunk.len()];
        let mut degraded = None;

        for i in 1..=config.iterations {
            let outputs = sources
                .iter()
                .map(|s| greedy_decode(lm, s))
                .collect::<Result<Vec<_>, _>>()?;
            for (d, w) in decoded.iter_mut().zip(&outputs) {
                d.push(w.clone());
            }
            // The update after the last decode is only visible when θ is kept.
            if i == config.iterations && config.restore_theta_after {
                break;
            }
            match update(lm, parser, &mut adam, &sources, &outputs, &targets) {
                Ok(()) => {}
                Err(AutoencoderError::Model(e)) if is_non_finite(&e) => {
                    log::warn!("greedy finetune stopped at iteration {i}: {e}");
                    degraded = Some(format!("iteration {i}: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(params) = snapshot {
            lm.params = params;
        }

        let scorer: &Seq2SeqModel = original.as_ref().unwrap_or(lm);
        for (input, outputs) in chunk.iter().zip(decoded) {
            let candidates = outputs
                .into_iter()
                .enumerate()
                .map(|(i, w)| make_candidate(scorer, parser, input, w, CandidateSource::FinetuneStep(i + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            let selected = SelectionPolicy.select(&candidates).expect("at least one decode");
            outcomes.push(FinetuneOutcome { selected, candidates, degraded: degraded.clone() });
        }
    }
    Ok(outcomes)
}
