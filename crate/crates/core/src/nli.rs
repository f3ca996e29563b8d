//! Combined sentence-pair classifier: pooled encoder vector concatenated
//! with the CNN feature vector, then one fully-connected layer over the
//! three inference classes.

use crate::cnn::{cnn_forward, CnnConfig, CnnParams, CnnVars};
use crate::encoder::{
    encoder_forward, linear, pooled_representation, EncoderConfig, EncoderParams, EncoderVars,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{PairRow, TokenBatch};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NliLabel {
    Entailed,
    Neutral,
    Contradict,
}

pub const NLI_LABELS: [NliLabel; 3] = [NliLabel::Entailed, NliLabel::Neutral, NliLabel::Contradict];

impl NliLabel {
    pub fn index(self) -> usize {
        match self {
            NliLabel::Entailed => 0,
            NliLabel::Neutral => 1,
            NliLabel::Contradict => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NliLabel::Entailed => "Entailed",
            NliLabel::Neutral => "Neutral",
            NliLabel::Contradict => "Contradict",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        NLI_LABELS
            .iter()
            .copied()
            .find(|l| l.name() == name)
            .ok_or_else(|| Error::UnknownLabel {
                label: name.to_string(),
            })
    }

    pub fn from_index(i: usize) -> Result<Self> {
        NLI_LABELS.get(i).copied().ok_or(Error::TargetOutOfRange {
            target: i as i64,
            classes: 3,
        })
    }

    pub fn names() -> Vec<String> {
        NLI_LABELS.iter().map(|l| l.name().to_string()).collect()
    }
}

/// A batch of encoded pairs: shared token batch plus per-row segment ids.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub tokens: TokenBatch,
    pub segments: Vec<u8>,
}

impl PairBatch {
    pub fn from_rows(rows: &[PairRow]) -> Result<Self> {
        let token_rows: Vec<_> = rows.iter().map(|r| r.row.clone()).collect();
        let tokens = TokenBatch::from_rows(&token_rows)?;
        let mut segments = Vec::with_capacity(tokens.batch * tokens.len);
        for r in rows {
            segments.extend_from_slice(&r.segments);
        }
        Ok(PairBatch { tokens, segments })
    }
}

#[derive(Debug, Clone)]
pub struct NliParams<S: Scalar> {
    pub encoder: EncoderParams<S>,
    pub cnn: CnnParams<S>,
    pub cls_w: Tensor<S>,
    pub cls_b: Tensor<S>,
}

impl<S: Scalar> NliParams<S> {
    pub fn new(encoder_cfg: EncoderConfig, cnn_cfg: CnnConfig, rng: &mut impl Rng) -> Result<Self> {
        let encoder = EncoderParams::new(encoder_cfg, rng)?;
        let cnn = CnnParams::new(cnn_cfg, rng)?;
        let concat = encoder.config.d_model + cnn.config.d_out;
        Ok(NliParams {
            encoder,
            cnn,
            cls_w: Tensor::xavier_uniform(concat, 3, rng).with_grad(),
            cls_b: Tensor::zeros(vec![3]).with_grad(),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.encoder.named_tensors();
        out.extend(self.cnn.named_tensors());
        out.push(("cls_w".to_string(), &self.cls_w));
        out.push(("cls_b".to_string(), &self.cls_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = self.encoder.named_tensors_mut();
        out.extend(self.cnn.named_tensors_mut());
        out.push(("cls_w".to_string(), &mut self.cls_w));
        out.push(("cls_b".to_string(), &mut self.cls_b));
        out
    }
}

pub struct NliVars {
    pub encoder: EncoderVars,
    pub cnn: CnnVars,
    pub cls_w: Var,
    pub cls_b: Var,
}

impl NliVars {
    pub fn bind<S: Scalar>(params: &NliParams<S>, g: &mut Graph<S>) -> Self {
        NliVars {
            encoder: EncoderVars::bind(&params.encoder, g),
            cnn: CnnVars::bind(&params.cnn, g),
            cls_w: g.input(&params.cls_w),
            cls_b: g.input(&params.cls_b),
        }
    }

    pub fn collect(&self) -> Vec<Var> {
        let mut out = self.encoder.collect();
        out.extend(self.cnn.collect());
        out.push(self.cls_w);
        out.push(self.cls_b);
        out
    }
}

/// Class logits `[B, 3]`. Softmax is applied only at loss or prediction time.
pub fn nli_forward<S: Scalar>(
    g: &mut Graph<S>,
    vars: &NliVars,
    encoder_cfg: &EncoderConfig,
    cnn_cfg: &CnnConfig,
    batch: &PairBatch,
) -> Result<Var> {
    let enc = encoder_forward(g, &vars.encoder, encoder_cfg, &batch.tokens)?;
    let pooled = pooled_representation(g, enc.hidden, &batch.tokens)?;
    let feat = cnn_forward(g, &vars.cnn, cnn_cfg, &batch.tokens)?;
    let cat = g.concat_last(&[pooled, feat])?;
    let cat = g.dropout(cat);
    linear(g, cat, vars.cls_w, vars.cls_b)
}

/// Eval-mode prediction with class probabilities. Ties break toward the
/// lowest class index.
pub fn nli_predict<S: Scalar>(
    params: &NliParams<S>,
    batch: &PairBatch,
) -> Result<Vec<(NliLabel, Vec<f64>)>> {
    let mut g = Graph::new();
    let vars = NliVars::bind(params, &mut g);
    let logits = nli_forward(&mut g, &vars, &params.encoder.config, &params.cnn.config, batch)?;
    let probs = g.softmax(logits, 1)?;
    let pt = g.value(probs);
    let mut out = Vec::with_capacity(batch.tokens.batch);
    for b in 0..batch.tokens.batch {
        let row = &pt.data()[b * 3..(b + 1) * 3];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        let probs_f64: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
        out.push((NliLabel::from_index(best)?, probs_f64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{encode_pair, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_setup() -> (NliParams<f64>, PairBatch) {
        let corpus = vec![
            ["the", "firm", "overcharged", "users", "never"]
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>(),
        ];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let enc_cfg = EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_positions: 16,
        };
        let cnn_cfg = CnnConfig {
            vocab_size: vocab.len(),
            d_embed: 8,
            filter_widths: vec![2, 3, 4],
            n_filters_per_width: 2,
            d_out: 6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = NliParams::new(enc_cfg, cnn_cfg, &mut rng).unwrap();
        let rows = vec![
            encode_pair("the firm overcharged users", "never", &vocab, 12).unwrap(),
            encode_pair("users", "the firm", &vocab, 12).unwrap(),
        ];
        let batch = PairBatch::from_rows(&rows).unwrap();
        (params, batch)
    }

    #[test]
    fn classifier_input_width_is_concat_of_both_branches() {
        let (params, _) = toy_setup();
        assert_eq!(
            params.cls_w.shape(),
            &[params.encoder.config.d_model + params.cnn.config.d_out, 3]
        );
        // desk-scale defaults: 64 + 96 = 160
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = NliParams::<f64>::new(
            EncoderConfig::small(8),
            CnnConfig::small(8),
            &mut rng,
        )
        .unwrap();
        assert_eq!(p.cls_w.shape(), &[160, 3]);
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let (mut params, batch) = toy_setup();
        params.cls_w = Tensor::zeros(params.cls_w.shape().to_vec()).with_grad();
        params.cls_b = Tensor::zeros(vec![3]).with_grad();
        let preds = nli_predict(&params, &batch).unwrap();
        for (_, probs) in preds {
            for p in probs {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_argmax_and_tie_rule() {
        // direct argmax semantics on crafted logits via softmax monotonicity
        let (params, batch) = toy_setup();
        let preds = nli_predict(&params, &batch).unwrap();
        assert_eq!(preds.len(), 2);
        for (_, probs) in &preds {
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let (params, batch) = toy_setup();
        let run = || {
            let mut g = Graph::new();
            let vars = NliVars::bind(&params, &mut g);
            let logits = nli_forward(
                &mut g,
                &vars,
                &params.encoder.config,
                &params.cnn.config,
                &batch,
            )
            .unwrap();
            g.value(logits).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adding_constant_to_logits_keeps_prediction() {
        let argmax_of = |row: &[f64]| {
            let mut g: Graph<f64> = Graph::new();
            let l = g
                .leaf(Tensor::from_vec(vec![1, 3], row.to_vec()).unwrap());
            let p = g.softmax(l, 1).unwrap();
            let probs = g.value(p).data().to_vec();
            let mut best = 0;
            for (j, &v) in probs.iter().enumerate() {
                if v > probs[best] {
                    best = j;
                }
            }
            best
        };
        let logits = [0.3, -0.2, 0.1];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 100.0).collect();
        assert_eq!(argmax_of(&logits), argmax_of(&shifted));
        // exact ties resolve to the lowest index
        assert_eq!(argmax_of(&[1.0, 1.0, 1.0]), 0);
        // logits [2,1,0] -> Entailed
        assert_eq!(NliLabel::from_index(argmax_of(&[2.0, 1.0, 0.0])).unwrap(), NliLabel::Entailed);
    }
}
