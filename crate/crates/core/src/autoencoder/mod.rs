//! The semantic auto-encoder: an LM verbalizes the input triples, a frozen
//! parser reads them back, and candidates are ranked by the triple F1 of
//! that reconstruction.
//!
//! Three candidate generators are provided (greedy, sampling and greedy
//! finetuning) plus ensembles that pool their candidates. The finetuning
//! path updates the LM at inference time through a straight-through
//! estimate of its own greedy output; see [`straight_through_tensor`].

mod finetune;
mod methods;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::{greedy_decode, sample_decode, DecodeConfig, DecodeError};
use crate::seq2seq::{detokenize, tokenize, Role, Seq2SeqError, Seq2SeqModel, TokenSequence};
use crate::triples::{linearize, parse_linearized, triple_prf, Prf, TripleSet};

pub use finetune::{greedy_finetune, straight_through_tensor, FinetuneConfig, FinetuneOutcome, StraightThrough};
pub use methods::{run_methods, GenerationConfig, Method, TraceRecord};

#[derive(Debug, Error)]
pub enum AutoencoderError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] Seq2SeqError),
    #[error("{slot} slot needs a {expected} model, got {found}")]
    Role {
        slot: &'static str,
        expected: Role,
        found: Role,
    },
    #[error("the semantic LM and parser use different vocabularies")]
    VocabMismatch,
    #[error("the parser must be frozen")]
    ParserNotFrozen,
    #[error("the semantic LM is frozen")]
    LmFrozen,
    #[error("ensemble needs at least one method")]
    EmptyEnsemble,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Where a candidate came from. Indices are 1-based for finetuning steps
/// and 0-based for samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSource {
    Greedy,
    Sample(usize),
    FinetuneStep(usize),
}

impl fmt::Display for CandidateSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateSource::Greedy => f.write_str("greedy"),
            CandidateSource::Sample(i) => write!(f, "sample({i})"),
            CandidateSource::FinetuneStep(i) => write!(f, "finetune-step({i})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub tokens: TokenSequence,
    /// Parse of `text` by the semantic parser.
    pub parse: TripleSet,
    /// Parser output before [`parse_linearized`].
    pub raw_parse: String,
    pub score: Prf,
    pub source: CandidateSource,
    /// Log-probability of `tokens` under the LM as loaded.
    pub lm_log_prob: f64,
}

impl Candidate {
    /// Recomputes the score from the stored parser output.
    pub fn rescore(&self, input: &TripleSet) -> Prf {
        triple_prf(&parse_linearized(&self.raw_parse).set, input)
    }
}

/// Total order on candidates: F1 descending, then greedy before finetuning
/// steps (ascending) before samples (ascending), then LM log-probability
/// descending, then position in the list.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelectionPolicy;

impl SelectionPolicy {
    fn source_rank(s: CandidateSource) -> (u8, usize) {
        match s {
            CandidateSource::Greedy => (0, 0),
            CandidateSource::FinetuneStep(i) => (1, i),
            CandidateSource::Sample(i) => (2, i),
        }
    }

    /// `Less` means `a` is preferred.
    pub fn compare(&self, a: &Candidate, b: &Candidate) -> Ordering {
        b.score
            .f1
            .total_cmp(&a.score.f1)
            .then_with(|| Self::source_rank(a.source).cmp(&Self::source_rank(b.source)))
            .then_with(|| b.lm_log_prob.total_cmp(&a.lm_log_prob))
    }

    /// Index of the preferred candidate.
    pub fn select(&self, candidates: &[Candidate]) -> Option<usize> {
        (0..candidates.len()).min_by(|&i, &j| self.compare(&candidates[i], &candidates[j]).then(i.cmp(&j)))
    }
}

pub(crate) fn check_pair(lm: &Seq2SeqModel, parser: &Seq2SeqModel) -> Result<(), AutoencoderError> {
    if lm.role != Role::SemanticLm {
        return Err(AutoencoderError::Role { slot: "lm", expected: Role::SemanticLm, found: lm.role });
    }
    if parser.role != Role::SemanticParser {
        return Err(AutoencoderError::Role { slot: "parser", expected: Role::SemanticParser, found: parser.role });
    }
    if lm.vocab != parser.vocab {
        return Err(AutoencoderError::VocabMismatch);
    }
    Ok(())
}

/// Encoder input of the LM for a triple set.
pub fn lm_source(lm: &Seq2SeqModel, triples: &TripleSet) -> TokenSequence {
    tokenize(&linearize(triples), &lm.vocab, lm.arch.max_source_len)
}

/// Greedy parse of `text`: the triples and the raw parser output.
pub fn reconstruct(parser: &Seq2SeqModel, text: &str) -> Result<(TripleSet, String), AutoencoderError> {
    let source = tokenize(text, &parser.vocab, parser.arch.max_source_len);
    let out = greedy_decode(parser, &source)?;
    let raw = detokenize(&out, &parser.vocab);
    Ok((parse_linearized(&raw).set, raw))
}

/// Scores LM output `tokens` against `input`. `scorer` supplies the LM
/// log-probability (normally the LM as loaded).
pub(crate) fn make_candidate(
    scorer: &Seq2SeqModel,
    parser: &Seq2SeqModel,
    input: &TripleSet,
    tokens: TokenSequence,
    source: CandidateSource,
) -> Result<Candidate, AutoencoderError> {
    let text = detokenize(&tokens, &scorer.vocab);
    let (parse, raw_parse) = reconstruct(parser, &text)?;
    let score = triple_prf(&parse, input);
    let lm_log_prob = scorer.sequence_log_prob(&lm_source(scorer, input), &tokens)?;
    Ok(Candidate { text, tokens, parse, raw_parse, score, source, lm_log_prob })
}

/// Greedy verbalization of `input`, scored by its reconstruction.
pub fn generate_greedy(lm: &Seq2SeqModel, parser: &Seq2SeqModel, input: &TripleSet) -> Result<Candidate, AutoencoderError> {
    check_pair(lm, parser)?;
    let tokens = greedy_decode(lm, &lm_source(lm, input))?;
    make_candidate(lm, parser, input, tokens, CandidateSource::Greedy)
}

/// `n` samples, sample `i` drawn from stream `i` of `base.seed`. Returns
/// the index of the selected candidate and all candidates.
pub fn generate_sampling(
    lm: &Seq2SeqModel,
    parser: &Seq2SeqModel,
    input: &TripleSet,
    n: usize,
    base: &DecodeConfig,
) -> Result<(usize, Vec<Candidate>), AutoencoderError> {
    check_pair(lm, parser)?;
    if n == 0 {
        return Err(AutoencoderError::Config("need at least one sample".into()));
    }
    let source = lm_source(lm, input);
    let candidates = (0..n)
        .map(|i| {
            let config = DecodeConfig::sampling(base.temperature, base.top_p, base.seed, i as u64);
            let tokens = sample_decode(lm, &source, &DecodeConfig { max_new_tokens: base.max_new_tokens, ..config })?;
            make_candidate(lm, parser, input, tokens, CandidateSource::Sample(i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let best = SelectionPolicy.select(&candidates).expect("n >= 1");
    Ok((best, candidates))
}

/// Pools candidate lists and selects over the union.
pub fn ensemble(parts: &[&[Candidate]]) -> Result<(usize, Vec<Candidate>), AutoencoderError> {
    if parts.is_empty() {
        return Err(AutoencoderError::EmptyEnsemble);
    }
    let pooled: Vec<Candidate> = parts.iter().flat_map(|p| p.iter().cloned()).collect();
    let best = SelectionPolicy
        .select(&pooled)
        .ok_or_else(|| AutoencoderError::Config("ensemble members produced no candidates".into()))?;
    Ok((best, pooled))
}
