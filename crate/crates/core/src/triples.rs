//! Semantic messages: sets of subject-predicate-object triples.
//!
//! Matching is exact string equality after [`normalize`]: fields are
//! lowercased, underscores become spaces, surrounding double quotes are
//! stripped and whitespace is collapsed. These rules decide what counts as
//! a hit when scoring parser output, so they shift absolute F1 numbers.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_TRIPLES: usize = 7;

/// Field separator inside a linearized triple.
pub const FIELD_SEP: &str = " | ";
/// Separator between linearized triples.
pub const TRIPLE_SEP: &str = " && ";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TripleError {
    #[error("triple field `{field}` is empty after normalization (raw: {raw:?})")]
    EmptyField { field: &'static str, raw: String },
    #[error("triple set is full ({max} triples)")]
    TooMany { max: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "[String; 3]", try_from = "[String; 3]")]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triple {
    /// Builds a triple, rejecting fields that normalize to nothing.
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Result<Self, TripleError> {
        let t = Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        };
        normalize(&t)?;
        Ok(t)
    }
}

impl From<Triple> for [String; 3] {
    fn from(t: Triple) -> Self {
        [t.subject, t.predicate, t.object]
    }
}

impl TryFrom<[String; 3]> for Triple {
    type Error = TripleError;

    fn try_from([s, p, o]: [String; 3]) -> Result<Self, Self::Error> {
        Triple::new(s, p, o)
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{FIELD_SEP}{}{FIELD_SEP}{}", self.subject, self.predicate, self.object)
    }
}

fn normalize_field(raw: &str, field: &'static str) -> Result<String, TripleError> {
    let spaced = raw.replace('_', " ");
    let trimmed = spaced.trim_matches(|c: char| c == '"' || c.is_whitespace());
    let collapsed = trimmed.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return Err(TripleError::EmptyField {
            field,
            raw: raw.to_string(),
        });
    }
    Ok(collapsed.to_lowercase())
}

pub fn normalize(t: &Triple) -> Result<Triple, TripleError> {
    Ok(Triple {
        subject: normalize_field(&t.subject, "subject")?,
        predicate: normalize_field(&t.predicate, "predicate")?,
        object: normalize_field(&t.object, "object")?,
    })
}

/// Ordered triple set, deduplicated on normalized form.
#[derive(Debug, Clone)]
pub struct TripleSet {
    triples: Vec<Triple>,
    keys: Vec<Triple>,
    max: usize,
}

impl Default for TripleSet {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for TripleSet {
    fn eq(&self, other: &Self) -> bool {
        self.triples == other.triples
    }
}

impl Eq for TripleSet {}

impl TripleSet {
    pub fn new() -> Self {
        Self::with_max(DEFAULT_MAX_TRIPLES)
    }

    pub fn with_max(max: usize) -> Self {
        Self {
            triples: Vec::new(),
            keys: Vec::new(),
            max,
        }
    }

    /// Collects triples, dropping normalized duplicates.
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Result<Self, TripleError> {
        let mut set = Self::new();
        for t in triples {
            set.insert(t)?;
        }
        Ok(set)
    }

    /// Returns `Ok(false)` for a duplicate.
    pub fn insert(&mut self, t: Triple) -> Result<bool, TripleError> {
        let key = normalize(&t)?;
        if self.keys.contains(&key) {
            return Ok(false);
        }
        if self.triples.len() >= self.max {
            return Err(TripleError::TooMany { max: self.max });
        }
        self.triples.push(t);
        self.keys.push(key);
        Ok(true)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Triple> {
        self.triples.iter()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Normalized forms, in set order.
    pub fn normalized(&self) -> &[Triple] {
        &self.keys
    }

    /// Copy ordered lexicographically by normalized form.
    pub fn sorted(&self) -> TripleSet {
        let mut pairs: Vec<_> = self.keys.iter().cloned().zip(self.triples.iter().cloned()).collect();
        pairs.sort();
        let (keys, triples) = pairs.into_iter().unzip();
        TripleSet {
            triples,
            keys,
            max: self.max,
        }
    }

    /// True when both sets hold the same normalized triples, in any order.
    pub fn same_content(&self, other: &TripleSet) -> bool {
        let a: HashSet<_> = self.keys.iter().collect();
        let b: HashSet<_> = other.keys.iter().collect();
        a == b
    }
}

impl<'a> IntoIterator for &'a TripleSet {
    type Item = &'a Triple;
    type IntoIter = std::slice::Iter<'a, Triple>;

    fn into_iter(self) -> Self::IntoIter {
        self.triples.iter()
    }
}

impl Serialize for TripleSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.triples.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TripleSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let triples = Vec::<Triple>::deserialize(d)?;
        let mut set = TripleSet::with_max(triples.len().max(DEFAULT_MAX_TRIPLES));
        for t in triples {
            set.insert(t).map_err(serde::de::Error::custom)?;
        }
        Ok(set)
    }
}

/// `"s | p | o && s | p | o"`, in set order.
pub fn linearize(s: &TripleSet) -> String {
    s.iter().map(Triple::to_string).collect::<Vec<_>>().join(TRIPLE_SEP)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTriples {
    pub set: TripleSet,
    /// Segments dropped for having the wrong field count, an empty field,
    /// or arriving after the set was full.
    pub skipped: usize,
}

/// Tolerant inverse of [`linearize`].
pub fn parse_linearized(text: &str) -> ParsedTriples {
    let mut set = TripleSet::new();
    let mut skipped = 0;
    if text.trim().is_empty() {
        return ParsedTriples { set, skipped };
    }
    for segment in text.split("&&") {
        let fields: Vec<&str> = segment.split('|').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [s, p, o] => Triple::new(*s, *p, *o).ok(),
            _ => None,
        };
        match parsed.map(|t| set.insert(t)) {
            Some(Ok(_)) => {}
            _ => skipped += 1,
        }
    }
    ParsedTriples { set, skipped }
}

/// Precision, recall and F1 of exact normalized matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }

    pub const PERFECT: Prf = Prf { precision: 1.0, recall: 1.0, f1: 1.0 };
    pub const ZERO: Prf = Prf { precision: 0.0, recall: 0.0, f1: 0.0 };
}

/// Both empty scores 1, exactly one empty scores 0.
pub fn triple_prf(hyp: &TripleSet, reference: &TripleSet) -> Prf {
    match (hyp.is_empty(), reference.is_empty()) {
        (true, true) => return Prf::PERFECT,
        (true, false) | (false, true) => return Prf::ZERO,
        _ => {}
    }
    let refs: HashSet<&Triple> = reference.normalized().iter().collect();
    let hits = hyp.normalized().iter().filter(|t| refs.contains(t)).count() as f64;
    Prf::new(hits / hyp.len() as f64, hits / reference.len() as f64)
}
