use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, Example, Provenance, Split};
use crate::triples::{Triple, TripleSet};

/// A predicate and its surface templates. Templates use `{s}` and `{o}`
/// placeholders for the subject and object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateSpec {
    pub name: String,
    pub templates: Vec<String>,
}

impl PredicateSpec {
    pub fn new(name: &str, templates: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            templates: templates.iter().map(|t| t.to_string()).collect(),
        }
    }
}

/// Small triple-to-text grammar with an exact inverse.
///
/// Each triple renders to one clause; clauses are joined with connective
/// tokens and the text ends with `" ."`. Entity names use underscores in
/// triples and spaces in text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticGrammar {
    pub entities: Vec<String>,
    pub predicates: Vec<PredicateSpec>,
    pub max_triples: usize,
    /// Single tokens placed between clauses.
    pub connectives: Vec<String>,
}

impl Default for SyntheticGrammar {
    fn default() -> Self {
        let entities = [
            "Alan_Bean",
            "Zaoyang",
            "Hubei",
            "China",
            "Texas",
            "Austin",
            "NASA",
            "Apollo_12",
            "Wuhan",
            "Aarhus_Airport",
            "Denmark",
            "Elliot_See",
        ];
        Self {
            entities: entities.iter().map(|e| e.to_string()).collect(),
            predicates: vec![
                PredicateSpec::new("birthPlace", &["{s} was born in {o}", "{s} is a native of {o}"]),
                PredicateSpec::new("isPartOf", &["{s} is part of {o}", "{s} lies within {o}"]),
                PredicateSpec::new("capital", &["the capital of {s} is {o}", "{s} has {o} as its capital"]),
                PredicateSpec::new("leader", &["{s} is led by {o}", "the leader of {s} is {o}"]),
                PredicateSpec::new(
                    "operator",
                    &["{s} is operated by {o}", "the operator of {s} is {o}"],
                ),
                PredicateSpec::new("country", &["{s} is located in the country {o}"]),
            ],
            max_triples: 3,
            connectives: vec!["and".into(), ";".into(), ".".into()],
        }
    }
}

fn surface(entity: &str) -> String {
    entity.replace('_', " ")
}

fn render_clause(template: &str, s: &str, o: &str) -> String {
    template.replace("{s}", &surface(s)).replace("{o}", &surface(o))
}

impl SyntheticGrammar {
    /// Checks the grammar is well formed and that its inverse is unambiguous.
    pub fn validate(&self) -> Result<(), CorpusError> {
        self.inverse().map(|_| ())
    }

    /// Clause text → triple, over every entity pair and template.
    fn inverse(&self) -> Result<HashMap<String, Triple>, CorpusError> {
        let err = |m: String| Err(CorpusError::Grammar(m));
        if self.entities.len() < 2 {
            return err("need at least two entities".into());
        }
        if self.predicates.is_empty() {
            return err("need at least one predicate".into());
        }
        if self.max_triples == 0 {
            return err("max_triples must be positive".into());
        }
        if self.connectives.is_empty() {
            return err("need at least one connective".into());
        }
        for c in &self.connectives {
            if c.is_empty() || c.split_whitespace().count() != 1 {
                return err(format!("connective {c:?} must be a single token"));
            }
        }
        for p in &self.predicates {
            if p.templates.is_empty() {
                return err(format!("predicate {} has no templates", p.name));
            }
            for t in &p.templates {
                if t.matches("{s}").count() != 1 || t.matches("{o}").count() != 1 {
                    return err(format!("template {t:?} needs exactly one {{s}} and one {{o}}"));
                }
            }
        }

        let mut map = HashMap::new();
        for s in &self.entities {
            for o in &self.entities {
                if s == o {
                    continue;
                }
                for p in &self.predicates {
                    let triple = Triple::new(s.as_str(), p.name.as_str(), o.as_str())
                        .map_err(|e| CorpusError::Grammar(e.to_string()))?;
                    for t in &p.templates {
                        let clause = render_clause(t, s, o);
                        if clause.split_whitespace().any(|w| self.connectives.iter().any(|c| c == w)) {
                            return err(format!("clause {clause:?} contains a connective token"));
                        }
                        if let Some(prev) = map.insert(clause.clone(), triple.clone()) {
                            if prev != triple {
                                return err(format!("clause {clause:?} is ambiguous between {prev} and {triple}"));
                            }
                        }
                    }
                }
            }
        }
        Ok(map)
    }

    /// Recovers the triples behind a rendered text, or `None` if any clause
    /// is not one this grammar can produce.
    pub fn parse_text(&self, text: &str) -> Result<Option<TripleSet>, CorpusError> {
        let inverse = self.inverse()?;
        Ok(parse_with(&inverse, &self.connectives, text, self.max_triples))
    }

    fn render(&self, triples: &[(Triple, usize)], connectives: &[usize]) -> String {
        let mut out = String::new();
        for (i, (t, template)) in triples.iter().enumerate() {
            if i > 0 {
                out.push(' ');
                out.push_str(&self.connectives[connectives[i - 1]]);
                out.push(' ');
            }
            let spec = self.predicates.iter().find(|p| p.name == t.predicate).expect("known predicate");
            out.push_str(&render_clause(&spec.templates[*template], &t.subject, &t.object));
        }
        out.push_str(" .");
        out
    }
}

fn parse_with(
    inverse: &HashMap<String, Triple>,
    connectives: &[String],
    text: &str,
    max: usize,
) -> Option<TripleSet> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let body = match words.split_last() {
        Some((&".", rest)) => rest,
        _ => return None,
    };
    let mut set = TripleSet::with_max(max);
    for clause in body.split(|w| connectives.iter().any(|c| c == w)) {
        let triple = inverse.get(&clause.join(" "))?;
        set.insert(triple.clone()).ok()?;
    }
    Some(set)
}

/// Samples `n` examples, each with one reference rendered by the grammar.
///
/// Every example has between one and `max_triples` triples, never repeats a
/// (subject, predicate) pair and never relates an entity to itself.
pub fn generate_synthetic(grammar: &SyntheticGrammar, n: usize, seed: u64) -> Result<Dataset, CorpusError> {
    let inverse = grammar.inverse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(1..=grammar.max_triples);
        let mut chosen: Vec<(Triple, usize)> = Vec::with_capacity(k);
        while chosen.len() < k {
            let s = grammar.entities.choose(&mut rng).expect("entities");
            let o = grammar.entities.choose(&mut rng).expect("entities");
            let p = grammar.predicates.choose(&mut rng).expect("predicates");
            let template = rng.random_range(0..p.templates.len());
            if s == o || chosen.iter().any(|(t, _)| t.subject == *s && t.predicate == p.name) {
                continue;
            }
            let triple = Triple::new(s.as_str(), p.name.as_str(), o.as_str())
                .map_err(|e| CorpusError::Grammar(e.to_string()))?;
            chosen.push((triple, template));
        }
        let connectives: Vec<usize> =
            (1..k).map(|_| rng.random_range(0..grammar.connectives.len())).collect();
        let text = grammar.render(&chosen, &connectives);
        let mut set = TripleSet::with_max(grammar.max_triples);
        for (t, _) in chosen {
            set.insert(t).map_err(|e| CorpusError::Grammar(e.to_string()))?;
        }
        debug_assert_eq!(parse_with(&inverse, &grammar.connectives, &text, grammar.max_triples).as_ref(), Some(&set));
        examples.push(Example::new(set, vec![text]));
    }
    Ok(Dataset {
        split: Split::All,
        examples,
        provenance: Provenance::Synthetic { seed },
    })
}
