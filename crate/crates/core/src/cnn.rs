//! Keyword-pattern branch: its own embedding table, three parallel
//! convolution banks (widths 2, 3, 4 by default), masked max-over-time
//! pooling, and a projection to a fixed-size feature vector.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::TokenBatch;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub filter_widths: Vec<usize>,
    pub n_filters_per_width: usize,
    pub d_out: usize,
}

impl CnnConfig {
    pub fn small(vocab_size: usize) -> Self {
        CnnConfig {
            vocab_size,
            d_embed: 64,
            filter_widths: vec![2, 3, 4],
            n_filters_per_width: 32,
            d_out: 96,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filter_widths.is_empty() || self.filter_widths.contains(&0) {
            return Err(Error::Config("filter_widths must be nonempty positive".into()));
        }
        if self.n_filters_per_width == 0 {
            return Err(Error::Config("n_filters_per_width must be >= 1".into()));
        }
        if self.d_out == 0 || self.d_embed == 0 {
            return Err(Error::Config("d_embed and d_out must be >= 1".into()));
        }
        Ok(())
    }

    pub fn max_width(&self) -> usize {
        *self.filter_widths.iter().max().unwrap_or(&1)
    }

    /// Width of the pooled concatenation fed to the projection.
    pub fn pooled_width(&self) -> usize {
        self.filter_widths.len() * self.n_filters_per_width
    }
}

#[derive(Debug, Clone)]
pub struct CnnParams<S: Scalar> {
    pub config: CnnConfig,
    pub emb: Tensor<S>,
    /// One (filters, bias) bank per filter width.
    pub banks: Vec<(Tensor<S>, Tensor<S>)>,
    pub proj_w: Tensor<S>,
    pub proj_b: Tensor<S>,
}

impl<S: Scalar> CnnParams<S> {
    pub fn new(config: CnnConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let emb = Tensor::normal(vec![config.vocab_size, config.d_embed], 0.0, 0.02, rng)
            .with_grad();
        let mut banks = Vec::with_capacity(config.filter_widths.len());
        for &k in &config.filter_widths {
            let fan_in = k * config.d_embed;
            let fan_out = config.n_filters_per_width;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let numel = config.n_filters_per_width * k * config.d_embed;
            let data: Vec<S> = (0..numel)
                .map(|_| crate::scalar::s::<S>(rng.random_range(-bound..bound)))
                .collect();
            let w = Tensor::from_vec(vec![config.n_filters_per_width, k, config.d_embed], data)
                .unwrap()
                .with_grad();
            let b = Tensor::zeros(vec![config.n_filters_per_width]).with_grad();
            banks.push((w, b));
        }
        let proj_w = Tensor::xavier_uniform(config.pooled_width(), config.d_out, rng).with_grad();
        let proj_b = Tensor::zeros(vec![config.d_out]).with_grad();
        Ok(CnnParams {
            config,
            emb,
            banks,
            proj_w,
            proj_b,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("cnn.emb".to_string(), &self.emb)];
        for (i, (w, b)) in self.banks.iter().enumerate() {
            out.push((format!("cnn.bank{i}.w"), w));
            out.push((format!("cnn.bank{i}.b"), b));
        }
        out.push(("cnn.proj_w".to_string(), &self.proj_w));
        out.push(("cnn.proj_b".to_string(), &self.proj_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![("cnn.emb".to_string(), &mut self.emb)];
        for (i, (w, b)) in self.banks.iter_mut().enumerate() {
            out.push((format!("cnn.bank{i}.w"), w));
            out.push((format!("cnn.bank{i}.b"), b));
        }
        out.push(("cnn.proj_w".to_string(), &mut self.proj_w));
        out.push(("cnn.proj_b".to_string(), &mut self.proj_b));
        out
    }
}

pub struct CnnVars {
    pub emb: Var,
    pub banks: Vec<(Var, Var)>,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl CnnVars {
    pub fn bind<S: Scalar>(params: &CnnParams<S>, g: &mut Graph<S>) -> Self {
        CnnVars {
            emb: g.input(&params.emb),
            banks: params
                .banks
                .iter()
                .map(|(w, b)| (g.input(w), g.input(b)))
                .collect(),
            proj_w: g.input(&params.proj_w),
            proj_b: g.input(&params.proj_b),
        }
    }

    pub fn collect(&self) -> Vec<Var> {
        let mut out = vec![self.emb];
        for &(w, b) in &self.banks {
            out.push(w);
            out.push(b);
        }
        out.push(self.proj_w);
        out.push(self.proj_b);
        out
    }
}

/// Forward pass to `[B, d_out]`.
///
/// Sequences shorter than the widest filter are treated as if padded with
/// PAD embeddings up to that width, so every bank always has at least one
/// window; pooling windows never extend past that guard boundary.
pub fn cnn_forward<S: Scalar>(
    g: &mut Graph<S>,
    vars: &CnnVars,
    config: &CnnConfig,
    batch: &TokenBatch,
) -> Result<Var> {
    let max_w = config.max_width();
    if batch.len < max_w {
        return Err(Error::SequenceTooShort {
            len: batch.len,
            width: max_w,
        });
    }
    let mut pooled_rows = Vec::with_capacity(batch.batch);
    for i in 0..batch.batch {
        let valid = batch.valid_len[i];
        if valid == 0 {
            return Err(Error::EmptyValidRange);
        }
        // short-sequence guard: run pooling over PAD embeddings up to max_w
        let effective = valid.max(max_w);
        let ids = batch.row_ids(i);
        let emb = g.embedding_lookup(vars.emb, ids, 1, batch.len)?;
        let emb = g.reshape(emb, vec![batch.len, config.d_embed])?;
        let mut pooled = Vec::with_capacity(vars.banks.len());
        for (bank, &k) in vars.banks.iter().zip(&config.filter_widths) {
            let conv = g.conv1d_valid(emb, bank.0, bank.1)?;
            let act = g.relu(conv);
            // windows whose last index falls inside [0, effective)
            let windows = effective - k + 1;
            pooled.push(g.max_over_time_masked(act, windows)?);
        }
        pooled_rows.push(g.concat_last(&pooled)?);
    }
    let stacked = g.stack_rows(&pooled_rows)?;
    let out = g.matmul(stacked, vars.proj_w)?;
    g.add_bias(out, vars.proj_b)
}
