use std::fs;
use std::path::Path;

use super::{CorpusError, Dataset, Example, Provenance, Split};
use crate::triples::{Triple, TripleSet, DEFAULT_MAX_TRIPLES};

/// What the WebNLG loader dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WebNlgReport {
    /// Entries without a single well-formed triple or without any text.
    pub skipped: usize,
    /// Entries with more than the maximum number of triples.
    pub oversized: usize,
    /// `mtriple` elements that did not split into three fields.
    pub malformed_triples: usize,
}

/// Reads `benchmark/entries/entry` elements, taking triples from
/// `modifiedtripleset/mtriple` and references from `lex`.
pub fn load_webnlg_xml(path: impl AsRef<Path>) -> Result<(Dataset, WebNlgReport), CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_webnlg_xml(&text)
}

fn byte_offset(text: &str, pos: roxmltree::TextPos) -> usize {
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i + 1 == pos.row as usize {
            let col = (pos.col as usize).saturating_sub(1);
            return offset + line.char_indices().nth(col).map_or(line.len(), |(b, _)| b);
        }
        offset += line.len();
    }
    offset
}

pub fn parse_webnlg_xml(text: &str) -> Result<(Dataset, WebNlgReport), CorpusError> {
    let doc = roxmltree::Document::parse(text).map_err(|e| CorpusError::Xml {
        offset: byte_offset(text, e.pos()),
        msg: e.to_string(),
    })?;
    let mut report = WebNlgReport::default();
    let mut examples = Vec::new();

    let entries = doc
        .descendants()
        .filter(|n| n.has_tag_name("entries"))
        .flat_map(|n| n.children().filter(|c| c.has_tag_name("entry")));
    for entry in entries {
        let mut triples = Vec::new();
        for mtriple in entry
            .children()
            .filter(|n| n.has_tag_name("modifiedtripleset"))
            .flat_map(|n| n.children().filter(|c| c.has_tag_name("mtriple")))
        {
            let raw = mtriple.text().unwrap_or("");
            let fields: Vec<&str> = raw.split('|').map(str::trim).collect();
            match fields.as_slice() {
                [s, p, o] => match Triple::new(*s, *p, *o) {
                    Ok(t) => triples.push(t),
                    Err(_) => report.malformed_triples += 1,
                },
                _ => report.malformed_triples += 1,
            }
        }
        let references: Vec<String> = entry
            .children()
            .filter(|n| n.has_tag_name("lex"))
            .filter_map(|n| n.text())
            .map(|t| t.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|t| !t.is_empty())
            .collect();

        if triples.is_empty() || references.is_empty() {
            report.skipped += 1;
            continue;
        }
        let mut set = TripleSet::new();
        let mut oversized = false;
        for t in triples {
            if set.insert(t).is_err() {
                oversized = true;
                break;
            }
        }
        if oversized {
            log::warn!("skipping WebNLG entry with more than {DEFAULT_MAX_TRIPLES} triples");
            report.oversized += 1;
            continue;
        }
        examples.push(Example {
            triples: set,
            references,
            category: entry.attribute("category").map(str::to_string),
        });
    }
    if report.skipped > 0 {
        log::warn!("skipped {} WebNLG entries without triples or text", report.skipped);
    }
    Ok((
        Dataset {
            split: Split::All,
            examples,
            provenance: Provenance::WebNlgXml,
        },
        report,
    ))
}
