//! Dataset records, validating loaders, and the train/validation split.
//!
//! Tagging data is JSON-lines (`{"tokens": [...], "ner_tags": [...]}` per
//! line). Pair data is either JSON-lines or tab-separated with a
//! `premise\thypothesis\tlabel\tlegal_act` header. Every loader error names
//! the offending line.

use crate::error::{Error, Result};
use crate::ner::bio_labels;
use crate::nli::NliLabel;
use crate::tensor::shuffled_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerRecord {
    pub tokens: Vec<String>,
    pub ner_tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliRecord {
    pub premise: String,
    pub hypothesis: String,
    pub label: String,
    pub legal_act: String,
}

impl NliRecord {
    pub fn label_enum(&self) -> Result<NliLabel> {
        NliLabel::from_name(&self.label)
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Load and validate JSON-lines tagging records.
pub fn load_ner_dataset(path: &Path) -> Result<Vec<NerRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let labels = bio_labels();
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: NerRecord = serde_json::from_str(raw)
            .map_err(|e| parse_err(path, line_no, format!("malformed record: {e}")))?;
        if rec.tokens.is_empty() {
            return Err(parse_err(path, line_no, "tokens must be nonempty"));
        }
        if rec.tokens.len() != rec.ner_tags.len() {
            return Err(parse_err(
                path,
                line_no,
                format!(
                    "{} tokens but {} tags",
                    rec.tokens.len(),
                    rec.ner_tags.len()
                ),
            ));
        }
        if let Some(bad) = rec.ner_tags.iter().find(|t| !labels.contains(t)) {
            return Err(parse_err(path, line_no, format!("unknown tag {bad:?}")));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(parse_err(path, 1, "no records in file"));
    }
    Ok(out)
}

fn validate_nli(rec: &NliRecord, path: &Path, line_no: usize) -> Result<()> {
    if rec.premise.trim().is_empty() {
        return Err(parse_err(path, line_no, "empty premise"));
    }
    if rec.hypothesis.trim().is_empty() {
        return Err(parse_err(path, line_no, "empty hypothesis"));
    }
    NliLabel::from_name(&rec.label)
        .map_err(|_| parse_err(path, line_no, format!("unknown label {:?}", rec.label)))?;
    Ok(())
}

/// Load pair records from JSON-lines or headered TSV.
pub fn load_nli_dataset(path: &Path) -> Result<Vec<NliRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let mut out = Vec::new();
    if first.trim_start().starts_with('{') {
        for (ln, raw) in text.lines().enumerate() {
            let line_no = ln + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let rec: NliRecord = serde_json::from_str(raw)
                .map_err(|e| parse_err(path, line_no, format!("malformed record: {e}")))?;
            validate_nli(&rec, path, line_no)?;
            out.push(rec);
        }
    } else {
        let mut lines = text.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((ln, raw)) if raw.trim().is_empty() => {
                    let _ = ln;
                    continue;
                }
                Some((ln, raw)) => break (ln, raw),
                None => return Err(parse_err(path, 1, "empty file")),
            }
        };
        let expected = ["premise", "hypothesis", "label", "legal_act"];
        let cols: Vec<&str> = header.1.split('\t').map(|c| c.trim()).collect();
        if cols != expected {
            return Err(parse_err(
                path,
                header.0 + 1,
                format!("expected header {expected:?}, got {cols:?}"),
            ));
        }
        for (ln, raw) in lines {
            let line_no = ln + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 4 {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected 4 tab-separated fields, got {}", fields.len()),
                ));
            }
            let rec = NliRecord {
                premise: fields[0].to_string(),
                hypothesis: fields[1].to_string(),
                label: fields[2].to_string(),
                legal_act: fields[3].to_string(),
            };
            validate_nli(&rec, path, line_no)?;
            out.push(rec);
        }
    }
    if out.is_empty() {
        return Err(parse_err(path, 1, "no records in file"));
    }
    Ok(out)
}

/// Seeded shuffle, then split with `ceil(n * (1 - fraction))` records in the
/// training slice.
pub fn split_train_val<T: Clone>(records: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = records.len();
    if n < 2 {
        return Err(Error::SplitTooSmall { n });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::BadFraction { fraction });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled_indices(n, &mut rng);
    let n_train = ((n as f64) * (1.0 - fraction)).ceil() as usize;
    let train = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, val))
}
