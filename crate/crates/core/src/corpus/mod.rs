//! Datasets of (triple set, reference texts) examples.
//!
//! Three sources: the native JSON-lines format, the WebNLG XML layout, and a
//! small synthetic triple-to-text grammar whose inverse is known exactly.

mod native;
mod synthetic;
mod webnlg;

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::triples::TripleSet;

pub use native::{load_native, parse_native, save_native, to_native_string};
pub use synthetic::{generate_synthetic, PredicateSpec, SyntheticGrammar};
pub use webnlg::{load_webnlg_xml, parse_webnlg_xml, WebNlgReport};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("XML error at byte {offset}: {msg}")]
    Xml { offset: usize, msg: String },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid grammar: {0}")]
    Grammar(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub triples: TripleSet,
    pub references: Vec<String>,
    /// WebNLG category, kept as metadata only.
    pub category: Option<String>,
}

impl Example {
    pub fn new(triples: TripleSet, references: Vec<String>) -> Self {
        Self {
            triples,
            references,
            category: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    /// Not yet split.
    All,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::All => "all",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Native,
    WebNlgXml,
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub examples: Vec<Example>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }
}

/// Seeded shuffle, then contiguous train/dev/test cut.
///
/// Train and dev sizes are `round(fraction · n)`; test takes the remainder.
pub fn split(d: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset), CorpusError> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(CorpusError::Split(format!("fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let n = d.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_dev = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_dev);
    if n_train == 0 || n_dev == 0 || n_test == 0 {
        return Err(CorpusError::Split(format!(
            "{n} examples split as {n_train}/{n_dev}/{n_test}; every split must be non-empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>, split: Split| Dataset {
        split,
        examples: order[range].iter().map(|&i| d.examples[i].clone()).collect(),
        provenance: d.provenance.clone(),
    };
    Ok((
        take(0..n_train, Split::Train),
        take(n_train..n_train + n_dev, Split::Dev),
        take(n_train + n_dev..n, Split::Test),
    ))
}
