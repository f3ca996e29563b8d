//! Token-level tagging head over the encoder, BIO decoding with validity
//! repair, and span extraction.

use crate::encoder::{encoder_forward, linear, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::TokenBatch;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// The four legal entity types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityType {
    Violation,
    ViolatedBy,
    ViolatedOn,
    Law,
}

pub const ENTITY_TYPES: [EntityType; 4] = [
    EntityType::Violation,
    EntityType::ViolatedBy,
    EntityType::ViolatedOn,
    EntityType::Law,
];

impl EntityType {
    pub fn name(self) -> &'static str {
        match self {
            EntityType::Violation => "VIOLATION",
            EntityType::ViolatedBy => "VIOLATED_BY",
            EntityType::ViolatedOn => "VIOLATED_ON",
            EntityType::Law => "LAW",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ENTITY_TYPES
            .iter()
            .copied()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::UnknownLabel {
                label: name.to_string(),
            })
    }

    fn index(self) -> usize {
        ENTITY_TYPES.iter().position(|&t| t == self).unwrap()
    }
}

/// BIO tag id: 0 is O, then B-t/I-t pairs in `ENTITY_TYPES` order (9 total).
pub type TagId = u8;

pub const O_TAG: TagId = 0;
pub const N_TAGS: usize = 2 * ENTITY_TYPES.len() + 1;

/// The fixed, ordered BIO label inventory.
pub fn bio_labels() -> Vec<String> {
    let mut out = vec!["O".to_string()];
    for t in ENTITY_TYPES {
        out.push(format!("B-{}", t.name()));
        out.push(format!("I-{}", t.name()));
    }
    out
}

pub fn b_tag(t: EntityType) -> TagId {
    (1 + 2 * t.index()) as TagId
}

pub fn i_tag(t: EntityType) -> TagId {
    (2 + 2 * t.index()) as TagId
}

/// Entity type of a non-O tag.
pub fn tag_entity(tag: TagId) -> Option<EntityType> {
    if tag == O_TAG || (tag as usize) >= N_TAGS {
        None
    } else {
        Some(ENTITY_TYPES[(tag as usize - 1) / 2])
    }
}

pub fn is_b(tag: TagId) -> bool {
    tag != O_TAG && tag % 2 == 1
}

pub fn is_i(tag: TagId) -> bool {
    tag != O_TAG && tag.is_multiple_of(2) && (tag as usize) < N_TAGS
}

pub fn tag_id_of(label: &str) -> Result<TagId> {
    bio_labels()
        .iter()
        .position(|l| l == label)
        .map(|i| i as TagId)
        .ok_or_else(|| Error::UnknownTag {
            tag: label.to_string(),
        })
}

/// Half-open token span carrying an entity type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity: EntityType,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, entity: EntityType) -> Self {
        EntitySpan { start, end, entity }
    }
}

/// Rewrite any I- tag without a compatible predecessor into a B- tag.
/// The output is always a valid BIO sequence.
pub fn repair_bio(tags: &[TagId]) -> Vec<TagId> {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev: TagId = O_TAG;
    for &t in tags {
        let fixed = if is_i(t) {
            let same_type_prev =
                prev != O_TAG && tag_entity(prev) == tag_entity(t);
            if same_type_prev {
                t
            } else {
                t - 1 // I-t -> B-t
            }
        } else {
            t
        };
        out.push(fixed);
        prev = fixed;
    }
    out
}

fn is_valid_bio(tags: &[TagId]) -> bool {
    let mut prev: TagId = O_TAG;
    for &t in tags {
        if (t as usize) >= N_TAGS {
            return false;
        }
        if is_i(t) {
            let ok = prev != O_TAG && tag_entity(prev) == tag_entity(t);
            if !ok {
                return false;
            }
        }
        prev = t;
    }
    true
}

/// Greedy argmax decode over `[L, n_tags]` logits followed by BIO repair.
/// Ties break toward the lowest tag id.
pub fn decode_bio<S: Scalar>(logits: &Tensor<S>, valid_len: usize) -> Result<Vec<TagId>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != N_TAGS {
        return Err(Error::BadShape {
            op: "decode_bio",
            expected: "[L, 9] logits",
            shape: shape.to_vec(),
        });
    }
    if valid_len == 0 || valid_len > shape[0] {
        return Err(Error::EmptyValidRange);
    }
    let mut raw = Vec::with_capacity(valid_len);
    for pos in 0..valid_len {
        let row = &logits.data()[pos * N_TAGS..(pos + 1) * N_TAGS];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        raw.push(best as TagId);
    }
    Ok(repair_bio(&raw))
}

/// Turn a valid BIO sequence into spans; errors on invalid input.
pub fn extract_spans(tags: &[TagId]) -> Result<Vec<EntitySpan>> {
    if !is_valid_bio(tags) {
        return Err(Error::InvalidSpans(
            "input is not a valid BIO sequence".into(),
        ));
    }
    let mut spans = Vec::new();
    let mut open: Option<(usize, EntityType)> = None;
    for (i, &t) in tags.iter().enumerate() {
        if is_i(t) {
            continue; // extends the open span
        }
        if let Some((start, ty)) = open.take() {
            spans.push(EntitySpan::new(start, i, ty));
        }
        if is_b(t) {
            open = Some((i, tag_entity(t).unwrap()));
        }
    }
    if let Some((start, ty)) = open {
        spans.push(EntitySpan::new(start, tags.len(), ty));
    }
    Ok(spans)
}

/// Inverse of [`extract_spans`] for non-overlapping spans.
pub fn spans_to_tags(spans: &[EntitySpan], len: usize) -> Result<Vec<TagId>> {
    let mut tags = vec![O_TAG; len];
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    let mut last_end = 0usize;
    for (i, sp) in sorted.iter().enumerate() {
        if sp.start >= sp.end || sp.end > len {
            return Err(Error::InvalidSpans(format!(
                "span {}..{} out of bounds for length {len}",
                sp.start, sp.end
            )));
        }
        if i > 0 && sp.start < last_end {
            return Err(Error::InvalidSpans(format!(
                "span {}..{} overlaps a previous span",
                sp.start, sp.end
            )));
        }
        last_end = sp.end;
        tags[sp.start] = b_tag(sp.entity);
        for t in tags.iter_mut().take(sp.end).skip(sp.start + 1) {
            *t = i_tag(sp.entity);
        }
    }
    Ok(tags)
}

// ── Model ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct NerParams<S: Scalar> {
    pub encoder: EncoderParams<S>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
}

impl<S: Scalar> NerParams<S> {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let encoder = EncoderParams::new(config, rng)?;
        let d = encoder.config.d_model;
        Ok(NerParams {
            encoder,
            head_w: Tensor::xavier_uniform(d, N_TAGS, rng).with_grad(),
            head_b: Tensor::zeros(vec![N_TAGS]).with_grad(),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.encoder.named_tensors();
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = self.encoder.named_tensors_mut();
        out.push(("head_w".to_string(), &mut self.head_w));
        out.push(("head_b".to_string(), &mut self.head_b));
        out
    }
}

pub struct NerVars {
    pub encoder: EncoderVars,
    pub head_w: Var,
    pub head_b: Var,
}

impl NerVars {
    pub fn bind<S: Scalar>(params: &NerParams<S>, g: &mut Graph<S>) -> Self {
        NerVars {
            encoder: EncoderVars::bind(&params.encoder, g),
            head_w: g.input(&params.head_w),
            head_b: g.input(&params.head_b),
        }
    }

    pub fn collect(&self) -> Vec<Var> {
        let mut out = self.encoder.collect();
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Per-token tag logits `[B, L, 9]`.
pub fn ner_forward<S: Scalar>(
    g: &mut Graph<S>,
    vars: &NerVars,
    config: &EncoderConfig,
    batch: &TokenBatch,
) -> Result<Var> {
    let out = encoder_forward(g, &vars.encoder, config, batch)?;
    let flat = g.reshape(out.hidden, vec![batch.batch * batch.len, config.d_model])?;
    let logits = linear(g, flat, vars.head_w, vars.head_b)?;
    g.reshape(logits, vec![batch.batch, batch.len, N_TAGS])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{encode_sequence, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tag(label: &str) -> TagId {
        tag_id_of(label).unwrap()
    }

    #[test]
    fn forward_emits_one_distribution_per_token() {
        let corpus = vec![vec!["court".to_string(), "ruled".to_string()]];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_positions: 32,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = NerParams::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let rows = vec![
            encode_sequence(&["court".to_string()], &vocab, 32).unwrap(),
            encode_sequence(&["court".to_string(), "ruled".to_string()], &vocab, 32).unwrap(),
        ];
        let batch = TokenBatch::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let vars = NerVars::bind(&params, &mut g);
        let logits = ner_forward(&mut g, &vars, &cfg, &batch).unwrap();
        assert_eq!(g.shape_of(logits), &[2, 32, 9]);
    }

    #[test]
    fn label_inventory_is_nine_with_o_first() {
        let labels = bio_labels();
        assert_eq!(labels.len(), 9);
        assert_eq!(labels[0], "O");
        assert_eq!(labels[7], "B-LAW");
        assert_eq!(labels[8], "I-LAW");
    }

    #[test]
    fn repair_rewrites_orphan_i_to_b() {
        let fixed = repair_bio(&[tag("O"), tag("I-LAW")]);
        assert_eq!(fixed, vec![tag("O"), tag("B-LAW")]);
    }

    #[test]
    fn repair_keeps_valid_sequences() {
        let seq = vec![tag("B-LAW"), tag("I-LAW"), tag("O")];
        assert_eq!(repair_bio(&seq), seq);
    }

    #[test]
    fn repair_handles_type_switch() {
        let fixed = repair_bio(&[tag("I-LAW"), tag("I-VIOLATION")]);
        assert_eq!(fixed, vec![tag("B-LAW"), tag("B-VIOLATION")]);
    }

    #[test]
    fn decode_argmax_with_repair() {
        // L=2 logits pushing [O, I-LAW]
        let mut data = vec![0.0; 2 * N_TAGS];
        data[0] = 5.0; // O at position 0
        data[N_TAGS + tag("I-LAW") as usize] = 5.0;
        let logits = Tensor::from_vec(vec![2, N_TAGS], data).unwrap();
        let tags = decode_bio(&logits, 2).unwrap();
        assert_eq!(tags, vec![tag("O"), tag("B-LAW")]);
    }

    #[test]
    fn decode_tie_breaks_to_lowest_tag() {
        let logits = Tensor::from_vec(vec![1, N_TAGS], vec![1.0; N_TAGS]).unwrap();
        let tags = decode_bio(&logits, 1).unwrap();
        assert_eq!(tags, vec![O_TAG]);
    }

    #[test]
    fn extract_single_run() {
        let spans = extract_spans(&[tag("B-LAW"), tag("I-LAW"), tag("O")]).unwrap();
        assert_eq!(spans, vec![EntitySpan::new(0, 2, EntityType::Law)]);
    }

    #[test]
    fn extract_empty_for_all_o() {
        assert!(extract_spans(&[O_TAG, O_TAG, O_TAG]).unwrap().is_empty());
    }

    #[test]
    fn adjacent_b_tags_start_new_spans() {
        let spans = extract_spans(&[tag("B-LAW"), tag("B-LAW")]).unwrap();
        assert_eq!(
            spans,
            vec![
                EntitySpan::new(0, 1, EntityType::Law),
                EntitySpan::new(1, 2, EntityType::Law)
            ]
        );
    }

    #[test]
    fn extract_rejects_invalid_bio() {
        assert!(extract_spans(&[tag("O"), tag("I-LAW")]).is_err());
    }

    #[test]
    fn spans_roundtrip_through_tags() {
        let spans = vec![
            EntitySpan::new(1, 3, EntityType::Violation),
            EntitySpan::new(4, 5, EntityType::Law),
        ];
        let tags = spans_to_tags(&spans, 6).unwrap();
        assert_eq!(extract_spans(&tags).unwrap(), spans);
    }

    #[test]
    fn spans_to_tags_rejects_overlap() {
        let spans = vec![
            EntitySpan::new(0, 3, EntityType::Law),
            EntitySpan::new(2, 4, EntityType::Violation),
        ];
        assert!(spans_to_tags(&spans, 6).is_err());
    }

    #[test]
    fn span_count_bounded_by_b_tags() {
        let tags = vec![tag("B-LAW"), tag("I-LAW"), tag("B-LAW"), tag("O")];
        let spans = extract_spans(&tags).unwrap();
        let b_count = tags.iter().filter(|&&t| is_b(t)).count();
        assert!(spans.len() <= b_count);
    }
}
