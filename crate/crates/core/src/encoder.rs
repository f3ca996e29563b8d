//! Token + learned-position embeddings under a stack of post-norm
//! multi-head self-attention blocks (GELU feed-forward), with CLS pooling.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use crate::text::TokenBatch;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults.
    pub fn small(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_positions: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must cover the reserved ids".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams<S: Scalar> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct LayerParams<S: Scalar> {
    pub attn: AttentionParams<S>,
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub ff_w1: Tensor<S>,
    pub ff_b1: Tensor<S>,
    pub ff_w2: Tensor<S>,
    pub ff_b2: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct EncoderParams<S: Scalar> {
    pub config: EncoderConfig,
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok_emb = Tensor::normal(vec![config.vocab_size, d], 0.0, 0.02, rng).with_grad();
        let pos_emb = Tensor::normal(vec![config.max_positions, d], 0.0, 0.02, rng).with_grad();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                attn: AttentionParams {
                    wq: Tensor::xavier_uniform(d, d, rng).with_grad(),
                    bq: Tensor::zeros(vec![d]).with_grad(),
                    wk: Tensor::xavier_uniform(d, d, rng).with_grad(),
                    bk: Tensor::zeros(vec![d]).with_grad(),
                    wv: Tensor::xavier_uniform(d, d, rng).with_grad(),
                    bv: Tensor::zeros(vec![d]).with_grad(),
                    wo: Tensor::xavier_uniform(d, d, rng).with_grad(),
                    bo: Tensor::zeros(vec![d]).with_grad(),
                },
                ln1_gamma: Tensor::full(vec![d], S::one()).with_grad(),
                ln1_beta: Tensor::zeros(vec![d]).with_grad(),
                ff_w1: Tensor::xavier_uniform(d, config.d_ff, rng).with_grad(),
                ff_b1: Tensor::zeros(vec![config.d_ff]).with_grad(),
                ff_w2: Tensor::xavier_uniform(config.d_ff, d, rng).with_grad(),
                ff_b2: Tensor::zeros(vec![d]).with_grad(),
                ln2_gamma: Tensor::full(vec![d], S::one()).with_grad(),
                ln2_beta: Tensor::zeros(vec![d]).with_grad(),
            });
        }
        Ok(EncoderParams {
            config,
            tok_emb,
            pos_emb,
            layers,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let fields: [(&str, &Tensor<S>); 14] = [
                ("attn.wq", &l.attn.wq),
                ("attn.bq", &l.attn.bq),
                ("attn.wk", &l.attn.wk),
                ("attn.bk", &l.attn.bk),
                ("attn.wv", &l.attn.wv),
                ("attn.bv", &l.attn.bv),
                ("attn.wo", &l.attn.wo),
                ("attn.bo", &l.attn.bo),
                ("ln1_gamma", &l.ln1_gamma),
                ("ln1_beta", &l.ln1_beta),
                ("ff_w1", &l.ff_w1),
                ("ff_b1", &l.ff_b1),
                ("ff_w2", &l.ff_w2),
                ("ff_b2", &l.ff_b2),
            ];
            for (name, t) in fields {
                out.push((format!("layer{i}.{name}"), t));
            }
            out.push((format!("layer{i}.ln2_gamma"), &l.ln2_gamma));
            out.push((format!("layer{i}.ln2_beta"), &l.ln2_beta));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let fields: [(&str, &mut Tensor<S>); 16] = [
                ("attn.wq", &mut l.attn.wq),
                ("attn.bq", &mut l.attn.bq),
                ("attn.wk", &mut l.attn.wk),
                ("attn.bk", &mut l.attn.bk),
                ("attn.wv", &mut l.attn.wv),
                ("attn.bv", &mut l.attn.bv),
                ("attn.wo", &mut l.attn.wo),
                ("attn.bo", &mut l.attn.bo),
                ("ln1_gamma", &mut l.ln1_gamma),
                ("ln1_beta", &mut l.ln1_beta),
                ("ff_w1", &mut l.ff_w1),
                ("ff_b1", &mut l.ff_b1),
                ("ff_w2", &mut l.ff_w2),
                ("ff_b2", &mut l.ff_b2),
                ("ln2_gamma", &mut l.ln2_gamma),
                ("ln2_beta", &mut l.ln2_beta),
            ];
            for (name, t) in fields {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out
    }
}

/// Graph handles for one bound encoder.
pub struct EncoderVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
}

pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

impl EncoderVars {
    pub fn bind<S: Scalar>(params: &EncoderParams<S>, g: &mut Graph<S>) -> Self {
        EncoderVars {
            tok_emb: g.input(&params.tok_emb),
            pos_emb: g.input(&params.pos_emb),
            layers: params
                .layers
                .iter()
                .map(|l| LayerVars {
                    wq: g.input(&l.attn.wq),
                    bq: g.input(&l.attn.bq),
                    wk: g.input(&l.attn.wk),
                    bk: g.input(&l.attn.bk),
                    wv: g.input(&l.attn.wv),
                    bv: g.input(&l.attn.bv),
                    wo: g.input(&l.attn.wo),
                    bo: g.input(&l.attn.bo),
                    ln1_gamma: g.input(&l.ln1_gamma),
                    ln1_beta: g.input(&l.ln1_beta),
                    ff_w1: g.input(&l.ff_w1),
                    ff_b1: g.input(&l.ff_b1),
                    ff_w2: g.input(&l.ff_w2),
                    ff_b2: g.input(&l.ff_b2),
                    ln2_gamma: g.input(&l.ln2_gamma),
                    ln2_beta: g.input(&l.ln2_beta),
                })
                .collect(),
        }
    }

    /// Bound vars in the same order as `EncoderParams::named_tensors`.
    pub fn collect(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_gamma, l.ln1_beta,
                l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2, l.ln2_gamma, l.ln2_beta,
            ]);
        }
        out
    }
}

/// Encoder forward pass output: hidden states plus the per-layer attention
/// probabilities `[B*n_heads, L, L]` (masked key columns hold exact zeros).
pub struct EncoderOutput {
    pub hidden: Var,
    pub attn: Vec<Var>,
}

/// `y = x @ w + b` for `x [r, in]`, `w [in, out]`, `b [out]`.
pub fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.add_bias(h, b)
}

/// Run the encoder over a token batch. PAD key positions receive exactly
/// zero attention weight from every query.
pub fn encoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    batch: &TokenBatch,
) -> Result<EncoderOutput> {
    let (b, l) = (batch.batch, batch.len);
    let (d, h) = (config.d_model, config.n_heads);
    if l > config.max_positions {
        return Err(Error::SequenceTooLong {
            len: l,
            max_positions: config.max_positions,
        });
    }
    let dk = d / h;

    // token + position embeddings
    let tok = g.embedding_lookup(vars.tok_emb, &batch.ids, b, l)?;
    let pos_ids: Vec<u32> = (0..b as u32)
        .flat_map(|_| (0..l as u32).collect::<Vec<_>>())
        .collect();
    let pos = g.embedding_lookup(vars.pos_emb, &pos_ids, b, l)?;
    let sum = g.add(tok, pos)?;
    let mut x = g.dropout(sum);

    // attention key validity per (batch, head) slice
    let valid: Vec<usize> = batch
        .valid_len
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v.max(1), h))
        .collect();

    let mut attn_probs = Vec::with_capacity(config.n_layers);
    for layer in &vars.layers {
        let x2 = g.reshape(x, vec![b * l, d])?;

        let q = linear(g, x2, layer.wq, layer.bq)?;
        let k = linear(g, x2, layer.wk, layer.bk)?;
        let v = linear(g, x2, layer.wv, layer.bv)?;

        let split = |g: &mut Graph<S>, t: Var| -> Result<Var> {
            let t4 = g.reshape(t, vec![b, l, h, dk])?;
            let t4 = g.permute(t4, &[0, 2, 1, 3])?;
            g.reshape(t4, vec![b * h, l, dk])
        };
        let q3 = split(g, q)?;
        let k3 = split(g, k)?;
        let v3 = split(g, v)?;

        let kt = g.permute(k3, &[0, 2, 1])?;
        let scores = g.bmm(q3, kt)?;
        let scores = g.scale(scores, s::<S>(1.0 / (dk as f64).sqrt()));
        let probs = g.masked_softmax(scores, &valid)?;
        attn_probs.push(probs);

        let ctx = g.bmm(probs, v3)?;
        let ctx = g.reshape(ctx, vec![b, h, l, dk])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![b * l, d])?;

        let attn_out = linear(g, ctx, layer.wo, layer.bo)?;
        let attn_out = g.dropout(attn_out);
        let res1 = g.add(x2, attn_out)?;
        let y = g.layer_norm(res1, layer.ln1_gamma, layer.ln1_beta, LAYER_NORM_EPS)?;

        let ff = linear(g, y, layer.ff_w1, layer.ff_b1)?;
        let ff = g.gelu(ff);
        let ff = linear(g, ff, layer.ff_w2, layer.ff_b2)?;
        let ff = g.dropout(ff);
        let res2 = g.add(y, ff)?;
        let out = g.layer_norm(res2, layer.ln2_gamma, layer.ln2_beta, LAYER_NORM_EPS)?;

        x = g.reshape(out, vec![b, l, d])?;
    }

    Ok(EncoderOutput {
        hidden: x,
        attn: attn_probs,
    })
}

/// Sequence representation: the hidden state at the CLS position (index 0).
pub fn pooled_representation<S: Scalar>(
    g: &mut Graph<S>,
    hidden: Var,
    batch: &TokenBatch,
) -> Result<Var> {
    let shape = g.shape_of(hidden);
    if shape.len() != 3 || shape[0] != batch.batch || shape[1] != batch.len {
        return Err(Error::BadShape {
            op: "pooled_representation",
            expected: "[B,L,d] hidden states matching the batch",
            shape: shape.to_vec(),
        });
    }
    g.select_axis1(hidden, 0)
}
