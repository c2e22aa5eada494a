use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    ensemble, generate_greedy, generate_sampling, greedy_finetune, AutoencoderError, Candidate, FinetuneConfig,
};
use crate::corpus::Example;
use crate::decoding::{example_seed, DecodeConfig};
use crate::seq2seq::Seq2SeqModel;
use crate::triples::TripleSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Greedy,
    Sampling,
    GreedyFinetune,
    GreedySampling,
    FinetuneSampling,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Greedy,
        Method::Sampling,
        Method::GreedyFinetune,
        Method::GreedySampling,
        Method::FinetuneSampling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Sampling => "sampling",
            Method::GreedyFinetune => "greedy-finetune",
            Method::GreedySampling => "greedy+sampling",
            Method::FinetuneSampling => "finetune+sampling",
        }
    }

    /// Methods whose candidate pool contains the greedy output (or an
    /// identical first finetuning step), so they never score below it.
    pub fn includes_greedy(self) -> bool {
        !matches!(self, Method::Greedy | Method::Sampling)
    }

    fn needs_greedy(self) -> bool {
        matches!(self, Method::Greedy | Method::GreedySampling)
    }

    fn needs_sampling(self) -> bool {
        matches!(self, Method::Sampling | Method::GreedySampling | Method::FinetuneSampling)
    }

    fn needs_finetune(self) -> bool {
        matches!(self, Method::GreedyFinetune | Method::FinetuneSampling)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                format!("unknown method {s:?} (expected one of {})", names.join(", "))
            })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub samples: usize,
    pub temperature: f32,
    pub top_p: f32,
    pub finetune: FinetuneConfig,
    /// Sample `i` of example `j` reads stream `i` of `example_seed(seed, j)`.
    pub seed: u64,
    pub workers: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            samples: 4,
            temperature: 1.0,
            top_p: 1.0,
            finetune: FinetuneConfig::default(),
            seed: 0,
            workers: 1,
        }
    }
}

/// One example's outcome under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub method: Method,
    pub input: TripleSet,
    pub references: Vec<String>,
    pub candidates: Vec<Candidate>,
    pub selected: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded: Option<String>,
}

impl TraceRecord {
    pub fn winner(&self) -> &Candidate {
        &self.candidates[self.selected]
    }
}

fn finetune_all(
    lm: &Seq2SeqModel,
    parser: &Seq2SeqModel,
    inputs: &[TripleSet],
    config: &FinetuneConfig,
) -> Result<Vec<super::FinetuneOutcome>, AutoencoderError> {
    let run = |chunk: &[TripleSet]| {
        let mut theta = lm.clone();
        theta.trainable = true;
        greedy_finetune(&mut theta, parser, chunk, config)
    };
    if !config.restore_theta_after {
        return run(inputs);
    }
    // Batches start from the same θ, so they can run independently.
    let parts = inputs
        .par_chunks(config.batch_size.max(1))
        .map(run)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Runs every requested method over `examples`, computing each candidate
/// generator once and sharing it between methods. Records come back in
/// example order for each method, in the order `methods` lists them.
pub fn run_methods(
    lm: &Seq2SeqModel,
    parser: &Seq2SeqModel,
    examples: &[Example],
    methods: &[Method],
    config: &GenerationConfig,
) -> Result<Vec<(Method, Vec<TraceRecord>)>, AutoencoderError> {
    super::check_pair(lm, parser)?;
    if parser.trainable {
        return Err(AutoencoderError::ParserNotFrozen);
    }
    if config.samples == 0 && methods.iter().any(|m| m.needs_sampling()) {
        return Err(AutoencoderError::Config("sampling methods need --samples >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| AutoencoderError::Config(format!("thread pool: {e}")))?;

    pool.install(|| {
        let greedy: Option<Vec<Candidate>> = if methods.iter().any(|m| m.needs_greedy()) {
            Some(
                examples
                    .par_iter()
                    .map(|ex| generate_greedy(lm, parser, &ex.triples))
                    .collect::<Result<_, _>>()?,
            )
        } else {
            None
        };
        let samples: Option<Vec<Vec<Candidate>>> = if methods.iter().any(|m| m.needs_sampling()) {
            Some(
                examples
                    .par_iter()
                    .enumerate()
                    .map(|(j, ex)| {
                        let decode = DecodeConfig::sampling(
                            config.temperature,
                            config.top_p,
                            example_seed(config.seed, j as u64),
                            0,
                        );
                        generate_sampling(lm, parser, &ex.triples, config.samples, &decode).map(|(_, all)| all)
                    })
                    .collect::<Result<_, _>>()?,
            )
        } else {
            None
        };
        let finetuned = if methods.iter().any(|m| m.needs_finetune()) {
            let inputs: Vec<TripleSet> = examples.iter().map(|e| e.triples.clone()).collect();
            Some(finetune_all(lm, parser, &inputs, &config.finetune)?)
        } else {
            None
        };

        let mut out = Vec::with_capacity(methods.len());
        for &method in methods {
            let mut records = Vec::with_capacity(examples.len());
            for (j, ex) in examples.iter().enumerate() {
                let g = greedy.as_ref().map(|g| std::slice::from_ref(&g[j]));
                let s = samples.as_ref().map(|s| s[j].as_slice());
                let f = finetuned.as_ref().map(|f| f[j].candidates.as_slice());
                let parts: Vec<&[Candidate]> = match method {
                    Method::Greedy => vec![g.expect("computed")],
                    Method::Sampling => vec![s.expect("computed")],
                    Method::GreedyFinetune => vec![f.expect("computed")],
                    Method::GreedySampling => vec![g.expect("computed"), s.expect("computed")],
                    Method::FinetuneSampling => vec![f.expect("computed"), s.expect("computed")],
                };
                let (selected, candidates) = ensemble(&parts)?;
                let degraded = if method.needs_finetune() {
                    finetuned.as_ref().and_then(|f| f[j].degraded.clone())
                } else {
                    None
                };
                records.push(TraceRecord {
                    index: j,
                    method,
                    input: ex.triples.clone(),
                    references: ex.references.clone(),
                    candidates,
                    selected,
                    degraded,
                });
            }
            out.push((method, records));
        }
        Ok(out)
    })
}
