use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, Example, Provenance, Split};
use crate::triples::{Triple, TripleSet};

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    triples: Vec<[String; 3]>,
    refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

/// One JSON object per line: `{"triples": [[s, p, o], ...], "refs": [...]}`.
pub fn load_native(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_native(&text)
}

pub fn parse_native(text: &str) -> Result<Dataset, CorpusError> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| CorpusError::Malformed { line: line_no, msg };
        let rec: Record = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        if rec.triples.is_empty() {
            return Err(malformed("empty \"triples\"".into()));
        }
        if rec.refs.is_empty() {
            return Err(malformed("empty \"refs\"".into()));
        }
        let mut set = TripleSet::new();
        for [s, p, o] in rec.triples {
            let t = Triple::new(s, p, o).map_err(|e| malformed(e.to_string()))?;
            set.insert(t).map_err(|e| malformed(e.to_string()))?;
        }
        examples.push(Example {
            triples: set,
            references: rec.refs,
            category: rec.category,
        });
    }
    Ok(Dataset {
        split: Split::All,
        examples,
        provenance: Provenance::Native,
    })
}

pub fn to_native_string(d: &Dataset) -> String {
    let mut out = String::new();
    for ex in &d.examples {
        let rec = Record {
            triples: ex.triples.iter().cloned().map(<[String; 3]>::from).collect(),
            refs: ex.references.clone(),
            category: ex.category.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_native(d: &Dataset, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    fs::write(path, to_native_string(d)).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticGrammar};

    #[test]
    fn single_record() {
        let d = parse_native(r#"{"triples":[["A","b","C"]],"refs":["A b C."]}"#).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.examples[0].triples.len(), 1);
        assert_eq!(d.examples[0].references, vec!["A b C."]);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse_native("").unwrap().is_empty());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "{\"triples\":[[\"A\",\"b\",\"C\"]],\"refs\":[\"x\"]}\n{\"triples\":[[\"A\",\"b\",\"C\"]]}\n";
        match parse_native(text) {
            Err(CorpusError::Malformed { line: 2, msg }) => assert!(msg.contains("refs"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        for bad in [r#"{"triples":[],"refs":["x"]}"#, r#"{"triples":[["A","b","C"]],"refs":[]}"#, "not json"] {
            assert!(matches!(parse_native(bad), Err(CorpusError::Malformed { line: 1, .. })));
        }
    }

    #[test]
    fn save_then_load_is_identity() {
        let d = generate_synthetic(&SyntheticGrammar::default(), 40, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_native(&d, &path).unwrap();
        let back = load_native(&path).unwrap();
        assert_eq!(back.examples, d.examples);
    }
}
