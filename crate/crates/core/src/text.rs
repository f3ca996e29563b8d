//! Vocabulary construction and fixed-length id encoding.
//!
//! The tokenization scheme is deliberately minimal and deterministic:
//! lowercase + whitespace split. Pre-tokenized input (the tagging path) is
//! mapped token-for-token so label alignment is trivial.

use crate::error::{Error, Result};
use crate::graph::IGNORE_INDEX;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<cls>", "<sep>"];

/// Token <-> id map with fixed reserved ids (PAD=0, UNK=1, CLS=2, SEP=3).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.id_to_token
    }
}

impl Vocabulary {
    /// Build from frequency counts: tokens with `freq >= min_freq`, ordered by
    /// frequency descending then lexicographic, receive ids from 4 upward.
    pub fn build(corpus: &[Vec<String>], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput { what: "corpus" });
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for seq in corpus {
            for tok in seq {
                let norm = tok.to_lowercase();
                if RESERVED.contains(&norm.as_str()) {
                    continue;
                }
                *freq.entry(norm).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, f)| *f >= min_freq).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|t| t.to_string()).collect();
        id_to_token.extend(entries.into_iter().map(|(t, _)| t));
        Ok(Vocabulary::from(id_to_token))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the four reserved entries
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }
}

/// One encoded sequence: fixed-length ids, 0/1 mask, count of real tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedRow {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub valid_len: usize,
}

/// A batch of encoded rows with one shared length.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub valid_len: Vec<usize>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[EncodedRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput { what: "batch" });
        }
        let len = rows[0].ids.len();
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut mask = Vec::with_capacity(rows.len() * len);
        let mut valid_len = Vec::with_capacity(rows.len());
        for r in rows {
            if r.ids.len() != len {
                return Err(Error::ShapeMismatch {
                    op: "token_batch",
                    lhs: vec![len],
                    rhs: vec![r.ids.len()],
                });
            }
            ids.extend_from_slice(&r.ids);
            mask.extend_from_slice(&r.mask);
            valid_len.push(r.valid_len);
        }
        Ok(TokenBatch {
            batch: rows.len(),
            len,
            ids,
            mask,
            valid_len,
        })
    }

    pub fn row_ids(&self, i: usize) -> &[u32] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }
}

/// Encoded premise/hypothesis pair: token row plus 0/1 segment ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRow {
    pub row: EncodedRow,
    pub segments: Vec<u8>,
}

/// Lowercase + whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Map tokens to ids, truncating or padding to `max_len`.
pub fn encode_sequence(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Result<EncodedRow> {
    if max_len == 0 {
        return Err(Error::MaxLenTooSmall { max_len, min: 1 });
    }
    let valid_len = tokens.len().min(max_len);
    let mut ids = vec![PAD_ID; max_len];
    let mut mask = vec![0u8; max_len];
    for (i, tok) in tokens.iter().take(max_len).enumerate() {
        ids[i] = vocab.id_of(tok);
        mask[i] = 1;
    }
    Ok(EncodedRow {
        ids,
        mask,
        valid_len,
    })
}

/// Recover in-vocabulary tokens from an encoded row.
pub fn decode_row(row: &EncodedRow, vocab: &Vocabulary) -> Vec<String> {
    row.ids[..row.valid_len]
        .iter()
        .map(|&id| vocab.token_of(id).unwrap_or("<unk>").to_string())
        .collect()
}

/// Encode `[CLS] premise [SEP] hypothesis [SEP]` with longest-side-first
/// truncation until the pair fits `max_len`. Segment ids are 0 through the
/// first separator and 1 for the hypothesis span; padding gets 0.
pub fn encode_pair(
    premise: &str,
    hypothesis: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PairRow> {
    if max_len < 5 {
        return Err(Error::MaxLenTooSmall { max_len, min: 5 });
    }
    let mut prem = tokenize(premise);
    let mut hyp = tokenize(hypothesis);
    if prem.is_empty() && hyp.is_empty() {
        return Err(Error::EmptyInput {
            what: "premise and hypothesis",
        });
    }
    let budget = max_len - 3; // CLS + two SEP
    while prem.len() + hyp.len() > budget {
        if prem.len() >= hyp.len() {
            prem.pop();
        } else {
            hyp.pop();
        }
    }

    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    segments.push(0);
    for t in &prem {
        ids.push(vocab.id_of(t));
        segments.push(0);
    }
    ids.push(SEP_ID);
    segments.push(0);
    for t in &hyp {
        ids.push(vocab.id_of(t));
        segments.push(1);
    }
    ids.push(SEP_ID);
    segments.push(1);

    let valid_len = ids.len();
    let mut mask = vec![1u8; valid_len];
    ids.resize(max_len, PAD_ID);
    mask.resize(max_len, 0);
    segments.resize(max_len, 0);
    Ok(PairRow {
        row: EncodedRow {
            ids,
            mask,
            valid_len,
        },
        segments,
    })
}

/// Map tags to label-set indices, padding to `max_len` with the loss
/// ignore index (-100).
pub fn labels_to_ids(tags: &[String], label_set: &[String], max_len: usize) -> Result<Vec<i64>> {
    let mut out = vec![IGNORE_INDEX; max_len];
    for (i, tag) in tags.iter().take(max_len).enumerate() {
        let id = label_set
            .iter()
            .position(|l| l == tag)
            .ok_or_else(|| Error::UnknownTag { tag: tag.clone() })?;
        out[i] = id as i64;
    }
    Ok(out)
}
