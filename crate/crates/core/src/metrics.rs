//! Corpus-level evaluation: BLEU, chrF++, macro-averaged triple P/R/F1 and
//! the improved ratio against the greedy baseline.
//!
//! BLEU is corpus BLEU over whitespace tokens with 1..4-grams, uniform
//! weights, clipped multi-reference counts, a brevity penalty against the
//! closest reference length (ties go to the shorter one) and zero match
//! counts replaced by `1e-9`. chrF++ follows the usual recipe (character
//! 6-grams without whitespace plus word bigrams, β = 2, orders with no
//! n-grams on either side left out of the average), scored per example
//! against its best reference and averaged over examples. METEOR is not
//! computed.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::{Method, TraceRecord};
use crate::triples::Prf;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{hypotheses} hypotheses but {references} reference lists")]
    Length { hypotheses: usize, references: usize },
    #[error("example {0} has no references")]
    NoReferences(usize),
    #[error("nothing to aggregate")]
    Empty,
    #[error("traces disagree on the example set: {0}")]
    Mismatch(String),
}

const BLEU_ORDER: usize = 4;
const BLEU_EPSILON: f64 = 1e-9;
const CHAR_ORDER: usize = 6;
const WORD_ORDER: usize = 2;
const BETA: f64 = 2.0;

fn check_shapes<R: AsRef<[String]>>(hypotheses: &[String], references: &[R]) -> Result<(), MetricsError> {
    if hypotheses.len() != references.len() {
        return Err(MetricsError::Length { hypotheses: hypotheses.len(), references: references.len() });
    }
    match references.iter().position(|r| r.as_ref().is_empty()) {
        Some(i) => Err(MetricsError::NoReferences(i)),
        None => Ok(()),
    }
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU in `[0, 1]`.
pub fn bleu<R: AsRef<[String]>>(hypotheses: &[String], references: &[R]) -> Result<f64, MetricsError> {
    check_shapes(hypotheses, references)?;
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);

    for (hyp, refs) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let rs: Vec<Vec<&str>> = refs.as_ref().iter().map(|r| r.split_whitespace().collect()).collect();
        hyp_len += h.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .expect("checked non-empty");
        for n in 1..=BLEU_ORDER {
            let hc = ngram_counts(&h, n);
            let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
            for r in &rs {
                for (g, c) in ngram_counts(r, n) {
                    if let Some((k, _)) = hc.get_key_value(&g) {
                        let e = max_ref.entry(k.as_slice()).or_insert(0);
                        *e = (*e).max(c);
                    }
                }
            }
            for (g, &c) in &hc {
                matches[n - 1] += c.min(max_ref.get(g.as_slice()).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }

    let log_precision: f64 = (0..BLEU_ORDER)
        .map(|i| {
            let m = (matches[i] as f64).max(BLEU_EPSILON);
            (m / totals[i].max(1) as f64).ln()
        })
        .sum::<f64>()
        / BLEU_ORDER as f64;
    let brevity = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok((brevity * log_precision.exp()).min(1.0))
}

/// Splits a leading or trailing punctuation character off each word.
fn chrf_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        let mut chars = w.chars();
        let first = chars.next().expect("non-empty word");
        let last = w.chars().next_back().expect("non-empty word");
        if w.chars().count() == 1 {
            out.push(w.to_string());
        } else if last.is_ascii_punctuation() {
            out.push(w[..w.len() - last.len_utf8()].to_string());
            out.push(last.to_string());
        } else if first.is_ascii_punctuation() {
            out.push(first.to_string());
            out.push(w[first.len_utf8()..].to_string());
        } else {
            out.push(w.to_string());
        }
    }
    out
}

/// Per-order n-gram counts: `CHAR_ORDER` character orders then
/// `WORD_ORDER` word orders.
fn chrf_profile(text: &str) -> Vec<HashMap<String, usize>> {
    let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
    let words = chrf_words(text);
    let mut profile = Vec::with_capacity(CHAR_ORDER + WORD_ORDER);
    for n in 1..=CHAR_ORDER {
        let mut counts = HashMap::new();
        if chars.len() >= n {
            for w in chars.windows(n) {
                *counts.entry(w.iter().collect::<String>()).or_insert(0) += 1;
            }
        }
        profile.push(counts);
    }
    for n in 1..=WORD_ORDER {
        let counts = ngram_counts(&words, n)
            .into_iter()
            .map(|(g, c)| (g.join(" "), c))
            .collect();
        profile.push(counts);
    }
    profile
}

fn chrf_score(hyp: &[HashMap<String, usize>], reference: &[HashMap<String, usize>]) -> f64 {
    let (mut precision, mut recall, mut orders) = (0.0, 0.0, 0usize);
    for (h, r) in hyp.iter().zip(reference) {
        let h_total: usize = h.values().sum();
        let r_total: usize = r.values().sum();
        if h_total == 0 || r_total == 0 {
            continue;
        }
        let matched: usize = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        precision += matched as f64 / h_total as f64;
        recall += matched as f64 / r_total as f64;
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    precision /= orders as f64;
    recall /= orders as f64;
    let b2 = BETA * BETA;
    if precision + recall == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / (b2 * precision + recall)
    }
}

/// chrF++ of one hypothesis against its best reference.
pub fn sentence_chrf_pp(hypothesis: &str, references: &[String]) -> f64 {
    let hyp = chrf_profile(hypothesis);
    references
        .iter()
        .map(|r| chrf_score(&hyp, &chrf_profile(r)))
        .fold(0.0, f64::max)
}

/// Mean sentence chrF++ in `[0, 1]`.
pub fn chrf_pp<R: AsRef<[String]>>(hypotheses: &[String], references: &[R]) -> Result<f64, MetricsError> {
    check_shapes(hypotheses, references)?;
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_chrf_pp(h, r.as_ref()))
        .sum();
    Ok(total / hypotheses.len() as f64)
}

/// Unweighted means of per-example precision, recall and F1.
pub fn aggregate_triples(scores: &[Prf]) -> Result<Prf, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = scores.len() as f64;
    Ok(Prf {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    })
}

/// Fraction of examples where `method` beats `baseline` strictly.
pub fn improved_ratio(baseline: &[f64], method: &[f64]) -> Result<f64, MetricsError> {
    if baseline.len() != method.len() {
        return Err(MetricsError::Mismatch(format!(
            "{} baseline scores against {} method scores",
            baseline.len(),
            method.len()
        )));
    }
    if baseline.is_empty() {
        return Err(MetricsError::Empty);
    }
    let better = baseline.iter().zip(method).filter(|(b, m)| m > b).count();
    Ok(better as f64 / baseline.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripleScores {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub bleu: f64,
    pub chrfpp: f64,
    pub triple: TripleScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improved_ratio: Option<f64>,
    pub n: usize,
}

/// The report file: one entry per method plus how it was computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub triple_aggregation: String,
    pub meteor: String,
    pub methods: Vec<EvalReport>,
}

impl ReportFile {
    pub fn new(methods: Vec<EvalReport>) -> Self {
        Self {
            triple_aggregation: "macro".into(),
            meteor: "unavailable".into(),
            methods,
        }
    }
}

fn check_alignment(reference: &[TraceRecord], other: &[TraceRecord], method: Method) -> Result<(), MetricsError> {
    if reference.len() != other.len() {
        return Err(MetricsError::Mismatch(format!(
            "{method} has {} examples, expected {}",
            other.len(),
            reference.len()
        )));
    }
    for (a, b) in reference.iter().zip(other) {
        if a.index != b.index || a.input != b.input || a.references != b.references {
            return Err(MetricsError::Mismatch(format!("{method} differs at example {}", b.index)));
        }
    }
    Ok(())
}

fn f1s(records: &[TraceRecord]) -> Vec<f64> {
    records.iter().map(|r| r.winner().score.f1).collect()
}

/// One report per method, in input order. Improved ratios are filled in
/// for methods whose pool contains the greedy output, and only when the
/// greedy baseline is among the inputs.
pub fn build_report(traces: &[(Method, Vec<TraceRecord>)]) -> Result<Vec<EvalReport>, MetricsError> {
    let Some((_, first)) = traces.first() else {
        return Err(MetricsError::Empty);
    };
    let mut seen = BTreeMap::new();
    for (method, records) in traces {
        if seen.insert(*method, ()).is_some() {
            return Err(MetricsError::Mismatch(format!("{method} given twice")));
        }
        check_alignment(first, records, *method)?;
    }
    let baseline = traces.iter().find(|(m, _)| *m == Method::Greedy).map(|(_, r)| f1s(r));

    traces
        .iter()
        .map(|(method, records)| {
            let hyps: Vec<String> = records.iter().map(|r| r.winner().text.clone()).collect();
            let refs: Vec<&[String]> = records.iter().map(|r| r.references.as_slice()).collect();
            let prf: Vec<Prf> = records.iter().map(|r| r.winner().score).collect();
            let triple = aggregate_triples(&prf)?;
            let improved = match &baseline {
                Some(b) if method.includes_greedy() => Some(improved_ratio(b, &f1s(records))?),
                _ => None,
            };
            Ok(EvalReport {
                method: *method,
                bleu: bleu(&hyps, &refs)?,
                chrfpp: chrf_pp(&hyps, &refs)?,
                triple: TripleScores { p: triple.precision, r: triple.recall, f1: triple.f1 },
                improved_ratio: improved,
                n: records.len(),
            })
        })
        .collect()
}

/// Aligned plain-text table of `reports`.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["method", "BLEU", "chrF++", "METEOR", "P", "R", "F1", "Improved", "n"];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        rows.push(vec![
            r.method.to_string(),
            format!("{:.4}", r.bleu),
            format!("{:.4}", r.chrfpp),
            "n/a".into(),
            format!("{:.4}", r.triple.p),
            format!("{:.4}", r.triple.r),
            format!("{:.4}", r.triple.f1),
            r.improved_ratio.map_or_else(|| "-".into(), |x| format!("{x:.4}")),
            r.n.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).expect("writing to a String");
    }
    out
}
