use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Seq2SeqModel, Source};
use super::vocab::TokenSequence;
use super::Seq2SeqError;
use crate::autodiff::{Adam, Tape, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
    pub dropout: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 300,
            lr: 1e-3,
            seed: 0,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Batch loss before each update.
    pub losses: Vec<f32>,
}

fn non_finite(step: usize, e: Seq2SeqError) -> Seq2SeqError {
    match e {
        Seq2SeqError::Tensor(source @ TensorError::NonFinite { .. }) => Seq2SeqError::NonFinite { step, source },
        other => other,
    }
}

/// Minimizes mean token cross-entropy with Adam over batches drawn from
/// seeded epoch-wise shuffles of `pairs`.
pub fn train_supervised(
    model: &mut Seq2SeqModel,
    pairs: &[(TokenSequence, TokenSequence)],
    config: &TrainConfig,
) -> Result<TrainLog, Seq2SeqError> {
    if !model.trainable {
        return Err(Seq2SeqError::Frozen);
    }
    if pairs.is_empty()
        || config.batch_size == 0
        || config.steps == 0
        || !(config.lr > 0.0)
        || !(0.0..1.0).contains(&config.dropout)
    {
        return Err(Seq2SeqError::Config(format!(
            "need pairs, positive batch size, steps and learning rate; got {} pairs and {config:?}",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.params, config.lr);
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(pairs.len()) {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled"));
        }
        let grads = {
            let mut tape = Tape::new();
            let bound = model
                .bind(&mut tape, true)
                .with_dropout(config.dropout, crate::decoding::example_seed(config.seed, step as u64));
            let sources: Vec<Source<'_>> = batch.iter().map(|&i| Source::Ids(&pairs[i].0.ids)).collect();
            let targets: Vec<&TokenSequence> = batch.iter().map(|&i| &pairs[i].1).collect();
            let loss = model
                .batch_loss(&mut tape, &bound, &sources, &targets)
                .map_err(|e| non_finite(step, e))?;
            log.losses.push(tape.value(loss)[0]);
            let mut grads = tape
                .backward(loss)
                .map_err(|e| non_finite(step, e.into()))?;
            bound.vars().iter().map(|&v| grads.take(v)).collect::<Vec<_>>()
        };
        adam.step(&mut model.params, &grads)?;
        if step % 50 == 0 || step + 1 == config.steps {
            log::info!("{} step {step}: loss {:.4}", model.role, log.losses[step]);
        }
    }
    Ok(log)
}
