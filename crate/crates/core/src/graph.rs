//! Reverse-mode automatic differentiation on a recorded op tape.
//!
//! A [`Graph`] owns every tensor produced during a forward pass. Ops append
//! nodes in topological order; [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients into the tensors that were marked
//! `requires_grad`. A graph is built per forward pass and consumed by a
//! single backward call.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index used in the loss to mark label positions excluded from scoring.
pub const IGNORE_INDEX: i64 = -100;

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    Bmm { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: S },
    Mul { a: Var, b: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    MaskedSoftmax { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, eps: f64 },
    CrossEntropyMean { logits: Var, targets: Vec<i64>, scored: usize },
    Conv1dValid { x: Var, w: Var, bias: Var },
    MaxOverTime { x: Var, argmax: Vec<usize> },
    Embedding { table: Var, ids: Vec<u32> },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    SelectAxis1 { a: Var, index: usize },
    ConcatLast { parts: Vec<Var> },
    StackRows { parts: Vec<Var> },
    Dropout { a: Var, mask: Vec<bool>, keep: S },
    SumAll { a: Var },
}

struct Node<S: Scalar> {
    tensor: Tensor<S>,
    op: Op<S>,
}

struct DropoutCtx {
    rate: f64,
    rng: ChaCha8Rng,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    dropout: Option<DropoutCtx>,
    backward_run: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            dropout: None,
            backward_run: false,
        }
    }

    /// Turn on inverted dropout for subsequent [`Graph::dropout`] calls.
    pub fn enable_dropout(&mut self, rate: f64, seed: u64) {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if rate > 0.0 {
            self.dropout = Some(DropoutCtx {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf holding a copy of `t` (keeps its `requires_grad` flag).
    pub fn input(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.clone(), Op::Leaf)
    }

    /// Record a leaf taking ownership of `t`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].tensor
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    /// Gradient of a node after [`Graph::backward`]; present only for
    /// nodes marked `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].tensor.data()
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_2d(self.data(a), self.data(b), m, k, n);
        let t = Tensor::from_vec(vec![m, n], out).unwrap();
        Ok(self.push(t, Op::Matmul { a, b }))
    }

    /// Batched matrix product `[N,p,q] x [N,q,r] -> [N,p,r]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (nb, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); nb * p * r];
        for i in 0..nb {
            let da = &self.data(a)[i * p * q..(i + 1) * p * q];
            let db = &self.data(b)[i * q * r..(i + 1) * q * r];
            let slice = matmul_2d(da, db, p, q, r);
            out[i * p * r..(i + 1) * p * r].copy_from_slice(&slice);
        }
        let t = Tensor::from_vec(vec![nb, p, r], out).unwrap();
        Ok(self.push(t, Op::Bmm { a, b }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(sa, out).unwrap();
        Ok(self.push(t, Op::Add { a, b }))
    }

    /// Row broadcast `[r,d] + [d]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let d = sa[1];
        let bdat = self.data(bias).to_vec();
        let out: Vec<S> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bdat[i % d])
            .collect();
        let t = Tensor::from_vec(sa, out).unwrap();
        Ok(self.push(t, Op::AddBias { a, bias }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out: Vec<S> = self.data(a).iter().map(|&x| x * c).collect();
        let t = Tensor::from_vec(self.shape_of(a).to_vec(), out).unwrap();
        self.push(t, Op::Scale { a, c })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(sa, out).unwrap();
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<S> = self
            .data(a)
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let t = Tensor::from_vec(self.shape_of(a).to_vec(), out).unwrap();
        self.push(t, Op::Relu { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<S> = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        let t = Tensor::from_vec(self.shape_of(a).to_vec(), out).unwrap();
        self.push(t, Op::Gelu { a })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let dat = self.data(a);
        let mut out = vec![S::zero(); dat.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * mid * inner + j * inner + i;
                let mut mx = S::neg_infinity();
                for j in 0..mid {
                    mx = mx.max(dat[at(j)]);
                }
                let mut sum = S::zero();
                for j in 0..mid {
                    let e = (dat[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..mid {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let t = Tensor::from_vec(shape, out).unwrap();
        Ok(self.push(t, Op::Softmax { a, axis }))
    }

    /// Softmax over the last axis of `[N,r,c]` restricted to the first
    /// `valid[n]` columns of slice `n`; excluded columns get probability 0.
    pub fn masked_softmax(&mut self, a: Var, valid: &[usize]) -> Result<Var> {
        let shape = self.shape_of(a).to_vec();
        if shape.len() != 3 || valid.len() != shape[0] {
            return Err(Error::BadShape {
                op: "masked_softmax",
                expected: "[N,r,c] input with one valid length per slice",
                shape,
            });
        }
        let (n, r, c) = (shape[0], shape[1], shape[2]);
        for &v in valid {
            if v == 0 {
                return Err(Error::EmptyValidRange);
            }
            if v > c {
                return Err(Error::BadShape {
                    op: "masked_softmax",
                    expected: "valid lengths within the column count",
                    shape: vec![n, r, c],
                });
            }
        }
        let dat = self.data(a);
        let mut out = vec![S::zero(); dat.len()];
        for (sl, &v) in valid.iter().enumerate() {
            for row in 0..r {
                let base = sl * r * c + row * c;
                let mut mx = S::neg_infinity();
                for j in 0..v {
                    mx = mx.max(dat[base + j]);
                }
                let mut sum = S::zero();
                for j in 0..v {
                    let e = (dat[base + j] - mx).exp();
                    out[base + j] = e;
                    sum += e;
                }
                for j in 0..v {
                    out[base + j] /= sum;
                }
            }
        }
        let t = Tensor::from_vec(shape, out).unwrap();
        Ok(self.push(t, Op::MaskedSoftmax { a }))
    }

    /// Per-row normalization over the last dimension, then `gamma * x + beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape_of(a).to_vec();
        let d = *shape.last().ok_or(Error::BadShape {
            op: "layer_norm",
            expected: "at least one dimension",
            shape: shape.clone(),
        })?;
        if self.shape_of(gamma) != [d] || self.shape_of(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape_of(gamma).to_vec(),
            });
        }
        let dat = self.data(a);
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let rows = dat.len() / d;
        let mut out = vec![S::zero(); dat.len()];
        let eps_s = s::<S>(eps);
        let dn = s::<S>(d as f64);
        for r in 0..rows {
            let row = &dat[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row
                .iter()
                .map(|&x| (x - mean) * (x - mean))
                .sum::<S>()
                / dn;
            let inv_std = (var + eps_s).sqrt().recip();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let t = Tensor::from_vec(shape, out).unwrap();
        Ok(self.push(t, Op::LayerNorm { a, gamma, beta, eps }))
    }

    /// Mean of `-log softmax(logits)[target]` over targets not equal to
    /// [`IGNORE_INDEX`]. Logits `[B,C]`, one target per row.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[i64]) -> Result<Var> {
        let shape = self.shape_of(logits).to_vec();
        if shape.len() != 2 || targets.len() != shape[0] {
            return Err(Error::BadShape {
                op: "cross_entropy_mean",
                expected: "[B,C] logits with one target per row",
                shape,
            });
        }
        let c = shape[1];
        let mut scored = 0usize;
        for &t in targets {
            if t == IGNORE_INDEX {
                continue;
            }
            if t < 0 || t as usize >= c {
                return Err(Error::TargetOutOfRange {
                    target: t,
                    classes: c,
                });
            }
            scored += 1;
        }
        if scored == 0 {
            return Err(Error::EmptyInput {
                what: "cross-entropy batch (all targets ignored)",
            });
        }
        let dat = self.data(logits);
        let mut total = S::zero();
        for (b, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            let row = &dat[b * c..(b + 1) * c];
            total += -(row[t as usize] - log_sum_exp(row));
        }
        let loss = total / s::<S>(scored as f64);
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                scored,
            },
        ))
    }

    /// Valid (no padding) 1-D cross-correlation.
    /// `x [L,C]`, `w [F,k,C]`, `bias [F]` -> `[L-k+1, F]`.
    pub fn conv1d_valid(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw) = (self.shape_of(x).to_vec(), self.shape_of(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[2] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_valid",
                lhs: sx,
                rhs: sw,
            });
        }
        let (l, c, f, k) = (sx[0], sx[1], sw[0], sw[1]);
        if k > l {
            return Err(Error::SequenceTooShort { len: l, width: k });
        }
        if self.shape_of(bias) != [f] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_valid",
                lhs: vec![f],
                rhs: self.shape_of(bias).to_vec(),
            });
        }
        let p = l - k + 1;
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(bias).to_vec();
        let mut out = vec![S::zero(); p * f];
        for pos in 0..p {
            for fi in 0..f {
                let mut acc = bd[fi];
                for i in 0..k {
                    for ch in 0..c {
                        acc += xd[(pos + i) * c + ch] * wd[fi * k * c + i * c + ch];
                    }
                }
                out[pos * f + fi] = acc;
            }
        }
        let t = Tensor::from_vec(vec![p, f], out).unwrap();
        Ok(self.push(t, Op::Conv1dValid { x, w, bias }))
    }

    /// Per-channel maximum over rows `[0, valid_len)` of `x [L,F]` -> `[F]`.
    pub fn max_over_time_masked(&mut self, x: Var, valid_len: usize) -> Result<Var> {
        let shape = self.shape_of(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::BadShape {
                op: "max_over_time_masked",
                expected: "[L,F] input",
                shape,
            });
        }
        let (l, f) = (shape[0], shape[1]);
        if valid_len == 0 {
            return Err(Error::EmptyValidRange);
        }
        if valid_len > l {
            return Err(Error::BadShape {
                op: "max_over_time_masked",
                expected: "valid_len within the row count",
                shape,
            });
        }
        let dat = self.data(x);
        let mut out = vec![S::neg_infinity(); f];
        let mut argmax = vec![0usize; f];
        for row in 0..valid_len {
            for ch in 0..f {
                let v = dat[row * f + ch];
                if v > out[ch] {
                    out[ch] = v;
                    argmax[ch] = row;
                }
            }
        }
        let t = Tensor::from_vec(vec![f], out).unwrap();
        Ok(self.push(t, Op::MaxOverTime { x, argmax }))
    }

    /// Row gather: `table [V,d]`, `ids` as a `[rows, cols]` matrix
    /// -> `[rows, cols, d]`.
    pub fn embedding_lookup(
        &mut self,
        table: Var,
        ids: &[u32],
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let st = self.shape_of(table).to_vec();
        if st.len() != 2 {
            return Err(Error::BadShape {
                op: "embedding_lookup",
                expected: "[V,d] table",
                shape: st,
            });
        }
        let (v, d) = (st[0], st[1]);
        if ids.len() != rows * cols {
            return Err(Error::BadShape {
                op: "embedding_lookup",
                expected: "rows*cols ids",
                shape: vec![rows, cols],
            });
        }
        for &id in ids {
            if id as usize >= v {
                return Err(Error::IdOutOfRange { id, vocab_size: v });
            }
        }
        let td = self.data(table);
        let mut out = vec![S::zero(); rows * cols * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        let t = Tensor::from_vec(vec![rows, cols, d], out).unwrap();
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: "same element count",
                shape,
            });
        }
        let t = Tensor::from_vec(shape, self.data(a).to_vec()).unwrap();
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape_of(a).to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&ax| ax >= nd || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::BadShape {
                op: "permute",
                expected: "a permutation of the input axes",
                shape,
            });
        }
        let (out, out_shape) = permute_data(self.data(a), &shape, axes);
        let t = Tensor::from_vec(out_shape, out).unwrap();
        Ok(self.push(
            t,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Select one index along axis 1: `[B,L,d]` -> `[B,d]`.
    pub fn select_axis1(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.shape_of(a).to_vec();
        if shape.len() != 3 || index >= shape[1] {
            return Err(Error::BadShape {
                op: "select_axis1",
                expected: "[B,L,d] input with index < L",
                shape,
            });
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let dat = self.data(a);
        let mut out = vec![S::zero(); b * d];
        for bi in 0..b {
            let src = bi * l * d + index * d;
            out[bi * d..(bi + 1) * d].copy_from_slice(&dat[src..src + d]);
        }
        let t = Tensor::from_vec(vec![b, d], out).unwrap();
        Ok(self.push(t, Op::SelectAxis1 { a, index }))
    }

    /// Concatenate along the last axis; all leading dimensions must match.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput { what: "concat" });
        }
        let lead = self.shape_of(parts[0])[..self.shape_of(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape_of(p);
            if sp[..sp.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape_of(parts[0]).to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            widths.push(*sp.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); rows * total];
        let mut offset = 0usize;
        for (pi, &p) in parts.iter().enumerate() {
            let w = widths[pi];
            let dat = self.data(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&dat[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::from_vec(shape, out).unwrap();
        Ok(self.push(
            t,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Stack 1-D tensors of equal length into a matrix `[n, len]`.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput { what: "stack" });
        }
        let w = self.shape_of(parts[0]).to_vec();
        if w.len() != 1 {
            return Err(Error::BadShape {
                op: "stack_rows",
                expected: "1-D parts",
                shape: w,
            });
        }
        let width = w[0];
        let mut out = Vec::with_capacity(parts.len() * width);
        for &p in parts {
            if self.shape_of(p) != [width] {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![width],
                    rhs: self.shape_of(p).to_vec(),
                });
            }
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::from_vec(vec![parts.len(), width], out).unwrap();
        Ok(self.push(
            t,
            Op::StackRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Inverted dropout; identity when dropout is disabled on this graph.
    pub fn dropout(&mut self, a: Var) -> Var {
        let Some(ctx) = self.dropout.as_mut() else {
            return a;
        };
        let keep = 1.0 - ctx.rate;
        let n = self.nodes[a.0].tensor.numel();
        let mask: Vec<bool> = (0..n).map(|_| ctx.rng.random::<f64>() < keep).collect();
        let keep_s = s::<S>(keep);
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { x / keep_s } else { S::zero() })
            .collect();
        let t = Tensor::from_vec(self.shape_of(a).to_vec(), out).unwrap();
        self.push(t, Op::Dropout { a, mask, keep: keep_s })
    }

    /// Sum of all elements -> scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().copied().sum::<S>();
        self.push(Tensor::scalar(total), Op::SumAll { a })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss.
    ///
    /// Consumes the tape: a second call errors. Leaves marked
    /// `requires_grad` that the loss does not reach receive zero grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_run {
            return Err(Error::BackwardAlreadyRun);
        }
        let loss_shape = self.shape_of(loss);
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        self.backward_run = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.shape_of(a)[0], self.shape_of(a)[1]);
                    let nn = self.shape_of(b)[1];
                    let (da, db) = matmul_bwd(&gout, self.data(a), self.data(b), m, k, nn);
                    acc(&mut grads, a, &da);
                    acc(&mut grads, b, &db);
                }
                Op::Bmm { a, b } => {
                    let (nb, p, q) = (
                        self.shape_of(a)[0],
                        self.shape_of(a)[1],
                        self.shape_of(a)[2],
                    );
                    let r = self.shape_of(b)[2];
                    let mut da = vec![S::zero(); nb * p * q];
                    let mut db = vec![S::zero(); nb * q * r];
                    for sl in 0..nb {
                        let (sda, sdb) = matmul_bwd(
                            &gout[sl * p * r..(sl + 1) * p * r],
                            &self.data(a)[sl * p * q..(sl + 1) * p * q],
                            &self.data(b)[sl * q * r..(sl + 1) * q * r],
                            p,
                            q,
                            r,
                        );
                        da[sl * p * q..(sl + 1) * p * q].copy_from_slice(&sda);
                        db[sl * q * r..(sl + 1) * q * r].copy_from_slice(&sdb);
                    }
                    acc(&mut grads, a, &da);
                    acc(&mut grads, b, &db);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, a, &gout);
                    acc(&mut grads, b, &gout);
                }
                Op::AddBias { a, bias } => {
                    let d = self.shape_of(bias)[0];
                    let mut dbias = vec![S::zero(); d];
                    for (i, &g) in gout.iter().enumerate() {
                        dbias[i % d] += g;
                    }
                    acc(&mut grads, a, &gout);
                    acc(&mut grads, bias, &dbias);
                }
                Op::Scale { a, c } => {
                    let da: Vec<S> = gout.iter().map(|&g| g * c).collect();
                    acc(&mut grads, a, &da);
                }
                Op::Mul { a, b } => {
                    let da: Vec<S> = gout.iter().zip(self.data(b)).map(|(&g, &y)| g * y).collect();
                    let db: Vec<S> = gout.iter().zip(self.data(a)).map(|(&g, &x)| g * x).collect();
                    acc(&mut grads, a, &da);
                    acc(&mut grads, b, &db);
                }
                Op::Relu { a } => {
                    let da: Vec<S> = gout
                        .iter()
                        .zip(self.data(a))
                        .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                        .collect();
                    acc(&mut grads, a, &da);
                }
                Op::Gelu { a } => {
                    let da: Vec<S> = gout
                        .iter()
                        .zip(self.data(a))
                        .map(|(&g, &x)| g * gelu_bwd(x))
                        .collect();
                    acc(&mut grads, a, &da);
                }
                Op::Softmax { a, axis } => {
                    let shape = self.shape_of(i_var(i)).to_vec();
                    let (outer, mid, inner) = axis_split(&shape, axis);
                    let sdat = self.data(i_var(i));
                    let mut da = vec![S::zero(); sdat.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * mid * inner + j * inner + ii;
                            let mut dot = S::zero();
                            for j in 0..mid {
                                dot += gout[at(j)] * sdat[at(j)];
                            }
                            for j in 0..mid {
                                da[at(j)] = sdat[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                    acc(&mut grads, a, &da);
                }
                Op::MaskedSoftmax { a } => {
                    // Masked entries have probability 0, so the softmax
                    // Jacobian formula already zeroes them.
                    let shape = self.shape_of(i_var(i)).to_vec();
                    let (nsl, r, c) = (shape[0], shape[1], shape[2]);
                    let sdat = self.data(i_var(i));
                    let mut da = vec![S::zero(); sdat.len()];
                    for sl in 0..nsl {
                        for row in 0..r {
                            let base = sl * r * c + row * c;
                            let mut dot = S::zero();
                            for j in 0..c {
                                dot += gout[base + j] * sdat[base + j];
                            }
                            for j in 0..c {
                                da[base + j] = sdat[base + j] * (gout[base + j] - dot);
                            }
                        }
                    }
                    acc(&mut grads, a, &da);
                }
                Op::LayerNorm { a, gamma, beta, eps } => {
                    let d = self.shape_of(gamma)[0];
                    let xdat = self.data(a);
                    let gdat = self.data(gamma);
                    let rows = xdat.len() / d;
                    let mut dx = vec![S::zero(); xdat.len()];
                    let mut dgamma = vec![S::zero(); d];
                    let mut dbeta = vec![S::zero(); d];
                    let dn = s::<S>(d as f64);
                    let eps_s = s::<S>(eps);
                    for r in 0..rows {
                        let x = &xdat[r * d..(r + 1) * d];
                        let g = &gout[r * d..(r + 1) * d];
                        let mean = x.iter().copied().sum::<S>() / dn;
                        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                        let inv_std = (var + eps_s).sqrt().recip();
                        let xhat: Vec<S> = x.iter().map(|&v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<S> = (0..d).map(|j| g[j] * gdat[j]).collect();
                        let sum_dxhat = dxhat.iter().copied().sum::<S>();
                        let sum_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(&u, &v)| u * v)
                            .sum::<S>();
                        for j in 0..d {
                            dgamma[j] += g[j] * xhat[j];
                            dbeta[j] += g[j];
                            dx[r * d + j] = inv_std / dn
                                * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    acc(&mut grads, a, &dx);
                    acc(&mut grads, gamma, &dgamma);
                    acc(&mut grads, beta, &dbeta);
                }
                Op::CrossEntropyMean {
                    logits,
                    targets,
                    scored,
                } => {
                    let c = self.shape_of(logits)[1];
                    let dat = self.data(logits);
                    let mut dl = vec![S::zero(); dat.len()];
                    let g0 = gout[0] / s::<S>(scored as f64);
                    for (b, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        let row = &dat[b * c..(b + 1) * c];
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            let ind = if j == t as usize { S::one() } else { S::zero() };
                            dl[b * c + j] = g0 * (p - ind);
                        }
                    }
                    acc(&mut grads, logits, &dl);
                }
                Op::Conv1dValid { x, w, bias } => {
                    let (l, c) = (self.shape_of(x)[0], self.shape_of(x)[1]);
                    let (f, k) = (self.shape_of(w)[0], self.shape_of(w)[1]);
                    let p = l - k + 1;
                    let xd = self.data(x);
                    let wd = self.data(w);
                    let mut dx = vec![S::zero(); l * c];
                    let mut dw = vec![S::zero(); f * k * c];
                    let mut db = vec![S::zero(); f];
                    for pos in 0..p {
                        for fi in 0..f {
                            let g = gout[pos * f + fi];
                            db[fi] += g;
                            for i in 0..k {
                                for ch in 0..c {
                                    dx[(pos + i) * c + ch] += g * wd[fi * k * c + i * c + ch];
                                    dw[fi * k * c + i * c + ch] += g * xd[(pos + i) * c + ch];
                                }
                            }
                        }
                    }
                    acc(&mut grads, x, &dx);
                    acc(&mut grads, w, &dw);
                    acc(&mut grads, bias, &db);
                }
                Op::MaxOverTime { x, argmax } => {
                    let f = self.shape_of(i_var(i))[0];
                    let mut dx = vec![S::zero(); self.data(x).len()];
                    for ch in 0..f {
                        dx[argmax[ch] * f + ch] += gout[ch];
                    }
                    acc(&mut grads, x, &dx);
                }
                Op::Embedding { table, ids } => {
                    let d = self.shape_of(table)[1];
                    let mut dt = vec![S::zero(); self.data(table).len()];
                    for (pos, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id as usize * d + j] += gout[pos * d + j];
                        }
                    }
                    acc(&mut grads, table, &dt);
                }
                Op::Reshape { a } => {
                    acc(&mut grads, a, &gout);
                }
                Op::Permute { a, axes } => {
                    let out_shape = self.shape_of(i_var(i)).to_vec();
                    let mut inv = vec![0usize; axes.len()];
                    for (j, &ax) in axes.iter().enumerate() {
                        inv[ax] = j;
                    }
                    let (da, _) = permute_data(&gout, &out_shape, &inv);
                    acc(&mut grads, a, &da);
                }
                Op::SelectAxis1 { a, index } => {
                    let sa = self.shape_of(a).to_vec();
                    let (b, l, d) = (sa[0], sa[1], sa[2]);
                    let mut da = vec![S::zero(); b * l * d];
                    for bi in 0..b {
                        let dst = bi * l * d + index * d;
                        da[dst..dst + d].copy_from_slice(&gout[bi * d..(bi + 1) * d]);
                    }
                    acc(&mut grads, a, &da);
                }
                Op::ConcatLast { parts } => {
                    let widths: Vec<usize> = parts
                        .iter()
                        .map(|&p| *self.shape_of(p).last().unwrap())
                        .collect();
                    let total: usize = widths.iter().sum();
                    let rows = gout.len() / total;
                    let mut offset = 0usize;
                    for (pi, &p) in parts.iter().enumerate() {
                        let w = widths[pi];
                        let mut dp = vec![S::zero(); rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&gout[r * total + offset..r * total + offset + w]);
                        }
                        acc(&mut grads, p, &dp);
                        offset += w;
                    }
                }
                Op::StackRows { parts } => {
                    let w = gout.len() / parts.len();
                    for (pi, &p) in parts.iter().enumerate() {
                        acc(&mut grads, p, &gout[pi * w..(pi + 1) * w]);
                    }
                }
                Op::Dropout { a, mask, keep } => {
                    let da: Vec<S> = gout
                        .iter()
                        .zip(&mask)
                        .map(|(&g, &m)| if m { g / keep } else { S::zero() })
                        .collect();
                    acc(&mut grads, a, &da);
                }
                Op::SumAll { a } => {
                    let da = vec![gout[0]; self.data(a).len()];
                    acc(&mut grads, a, &da);
                }
            }
            if self.nodes[i].tensor.requires_grad {
                self.nodes[i].tensor.grad = Some(gout);
            }
        }

        // Leaves the loss never reached still get (zero) grads.
        for node in &mut self.nodes {
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![S::zero(); node.tensor.numel()]);
            }
        }
        Ok(())
    }
}

#[inline]
fn i_var(i: usize) -> Var {
    Var(i)
}

fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, contrib: &[S]) {
    let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); contrib.len()]);
    for (dst, &src) in slot.iter_mut().zip(contrib) {
        *dst += src;
    }
}

/// `[m,k] x [k,n]` dense product.
fn matmul_2d<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// Gradients of `C = A @ B`: `dA = G @ B^T`, `dB = A^T @ G`.
fn matmul_bwd<S: Scalar>(
    g: &[S],
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<S>, Vec<S>) {
    let mut da = vec![S::zero(); m * k];
    let mut db = vec![S::zero(); k * n];
    for i in 0..m {
        for j in 0..n {
            let gv = g[i * n + j];
            for p in 0..k {
                da[i * k + p] += gv * b[p * n + j];
                db[p * n + j] += gv * a[i * k + p];
            }
        }
    }
    (da, db)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
    let sum = row.iter().map(|&x| (x - mx).exp()).sum::<S>();
    mx + sum.ln()
}

fn permute_data<S: Scalar>(data: &[S], shape: &[usize], axes: &[usize]) -> (Vec<S>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let numel = data.len();
    let mut out = vec![S::zero(); numel];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0usize;
        for d in (0..nd).rev() {
            let coord = rem % out_shape[d];
            rem /= out_shape[d];
            src += coord * in_strides[axes[d]];
        }
        *slot = data[src];
    }
    (out, out_shape)
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = s::<S>((2.0 / std::f64::consts::PI).sqrt());
    let k = s::<S>(0.044715);
    let half = s::<S>(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = s::<S>((2.0 / std::f64::consts::PI).sqrt());
    let k = s::<S>(0.044715);
    let half = s::<S>(0.5);
    let three = s::<S>(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    let dinner = c * (S::one() + three * k * x * x);
    half * (S::one() + t) + half * x * sech2 * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![rows, cols], vals.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut g = Graph::new();
        let a = g.leaf(t2(2, 2, &[1., 2., 3., 4.]));
        let eye = g.leaf(t2(2, 2, &[1., 0., 0., 1.]));
        let c = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let mut g = Graph::new();
        let a = g.leaf(t2(2, 2, &[1., 2., 3., 4.]));
        let b = g.leaf(t2(2, 1, &[5., 6.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17., 39.]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "error should name both shapes: {msg}");
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3], vec![0., 0., 0.]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_analytic_exponentials() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(vec![3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap(),
        );
        let y = g.softmax(x, 0).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((out[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((out[2] - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2], vec![1000., 0.]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let out = g.value(y).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1] < 1e-12);
    }

    #[test]
    fn softmax_invalid_axis_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(vec![3]));
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn conv1d_output_length_and_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::full(vec![10, 1], 0.0));
        let w = g.leaf(Tensor::<f64>::full(vec![1, 3, 1], 0.0));
        let b = g.leaf(Tensor::<f64>::zeros(vec![1]));
        let y = g.conv1d_valid(x, w, b).unwrap();
        assert_eq!(g.shape_of(y), &[8, 1]);

        // all-ones x (L=4, C=1), all-ones filter k=2, bias 0 -> [2,2,2]
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::full(vec![4, 1], 1.0));
        let w = g.leaf(Tensor::<f64>::full(vec![1, 2, 1], 1.0));
        let b = g.leaf(Tensor::<f64>::zeros(vec![1]));
        let y = g.conv1d_valid(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2., 2., 2.]);
    }

    #[test]
    fn conv1d_filter_wider_than_sequence_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(vec![3, 1]));
        let w = g.leaf(Tensor::<f64>::zeros(vec![1, 5, 1]));
        let b = g.leaf(Tensor::<f64>::zeros(vec![1]));
        assert!(matches!(
            g.conv1d_valid(x, w, b),
            Err(Error::SequenceTooShort { len: 3, width: 5 })
        ));
    }

    #[test]
    fn layer_norm_zero_variance_and_affine() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1, 4], vec![5., 5., 5., 5.]).unwrap());
        let gamma = g.leaf(Tensor::<f64>::full(vec![4], 1.0));
        let beta = g.leaf(Tensor::<f64>::zeros(vec![4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }

        let mut g = Graph::new();
        let x = g.leaf(t2(1, 2, &[1., -1.]));
        let gamma = g.leaf(Tensor::<f64>::full(vec![2], 1.0));
        let beta = g.leaf(Tensor::<f64>::zeros(vec![2]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-4 && (out[1] + 1.0).abs() < 1e-4);

        let mut g = Graph::new();
        let x = g.leaf(t2(1, 2, &[1., -1.]));
        let gamma = g.leaf(Tensor::<f64>::full(vec![2], 1.0));
        let beta = g.leaf(Tensor::<f64>::full(vec![2], 2.0));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 3.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut g = Graph::new();
        let logits = g.leaf(t2(1, 3, &[0.7, 0.7, 0.7]));
        let loss = g.cross_entropy_mean(logits, &[1]).unwrap();
        assert!((g.value(loss).data()[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logit_is_tiny() {
        let mut g = Graph::new();
        let logits = g.leaf(t2(1, 3, &[30., 0., 0.]));
        let loss = g.cross_entropy_mean(logits, &[0]).unwrap();
        assert!(g.value(loss).data()[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_means_per_example_losses() {
        let row_a = [2.0, -1.0, 0.5];
        let row_b = [-0.3, 1.2, 0.0];
        let single = |row: &[f64], t: i64| {
            let mut g = Graph::new();
            let l = g.leaf(Tensor::from_vec(vec![1, 3], row.to_vec()).unwrap());
            let loss = g.cross_entropy_mean(l, &[t]).unwrap();
            g.value(loss).data()[0]
        };
        let a = single(&row_a, 0);
        let b = single(&row_b, 2);
        let mut g = Graph::new();
        let l = g.leaf(t2(2, 3, &[2.0, -1.0, 0.5, -0.3, 1.2, 0.0]));
        let both = g.cross_entropy_mean(l, &[0, 2]).unwrap();
        assert!((g.value(both).data()[0] - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::new();
        let logits = g.leaf(t2(1, 3, &[0., 0., 0.]));
        assert!(matches!(
            g.cross_entropy_mean(logits, &[3]),
            Err(Error::TargetOutOfRange { target: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_skips_ignore_index() {
        let mut g = Graph::new();
        let l = g.leaf(t2(2, 3, &[2.0, -1.0, 0.5, 99.0, 99.0, 99.0]));
        let loss = g.cross_entropy_mean(l, &[0, IGNORE_INDEX]).unwrap();
        let mut g2 = Graph::new();
        let l2 = g2.leaf(t2(1, 3, &[2.0, -1.0, 0.5]));
        let lone = g2.cross_entropy_mean(l2, &[0]).unwrap();
        assert_eq!(g.value(loss).data()[0], g2.value(lone).data()[0]);
    }

    #[test]
    fn max_over_time_respects_valid_len() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3, 1], vec![1., 9., 3.]).unwrap());
        let y = g.max_over_time_masked(x, 3).unwrap();
        assert_eq!(g.value(y).data(), &[9.]);
        let y1 = g.max_over_time_masked(x, 1).unwrap();
        assert_eq!(g.value(y1).data(), &[1.]);
        assert!(matches!(
            g.max_over_time_masked(x, 0),
            Err(Error::EmptyValidRange)
        ));
    }

    #[test]
    fn embedding_gathers_rows_and_checks_bounds() {
        let mut g = Graph::new();
        let table = g.leaf(t2(3, 2, &[0., 1., 10., 11., 20., 21.]));
        let y = g.embedding_lookup(table, &[0, 2], 1, 2).unwrap();
        assert_eq!(g.value(y).data(), &[0., 1., 20., 21.]);
        assert!(matches!(
            g.embedding_lookup(table, &[3], 1, 1),
            Err(Error::IdOutOfRange { id: 3, vocab_size: 3 })
        ));
    }

    #[test]
    fn embedding_duplicate_ids_sum_gradients() {
        let mut g = Graph::new();
        let mut table = t2(3, 2, &[0., 1., 10., 11., 20., 21.]);
        table.requires_grad = true;
        let tv = g.input(&table);
        let y = g.embedding_lookup(tv, &[1, 1, 2], 1, 3).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        let grad = g.grad(tv).unwrap();
        assert_eq!(grad, &[0., 0., 2., 2., 1., 1.]);
    }

    #[test]
    fn backward_sum_of_squares_gives_two_x() {
        let mut g = Graph::new();
        let mut x = Tensor::from_vec(vec![3], vec![1., -2., 3.]).unwrap();
        x.requires_grad = true;
        let xv = g.input(&x);
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2., -4., 6.]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(vec![2]));
        assert!(matches!(
            g.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(vec![1]));
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::BackwardAlreadyRun)));
    }

    #[test]
    fn no_requires_grad_means_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2], vec![1., 2.]).unwrap());
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn unreached_leaf_gets_zero_grads() {
        let mut g = Graph::new();
        let mut x = Tensor::from_vec(vec![2], vec![1., 2.]).unwrap();
        x.requires_grad = true;
        let xv = g.input(&x);
        let c = g.leaf(Tensor::<f64>::scalar(5.0));
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[0., 0.]);
    }

    #[test]
    fn node_inputs_precede_outputs() {
        // Tape ordering: every op's inputs have smaller indices.
        let mut g = Graph::new();
        let a = g.leaf(t2(2, 2, &[1., 2., 3., 4.]));
        let b = g.leaf(t2(2, 2, &[1., 0., 0., 1.]));
        let c = g.matmul(a, b).unwrap();
        let d = g.relu(c);
        let e = g.sum_all(d);
        assert!(a.0 < c.0 && b.0 < c.0 && c.0 < d.0 && d.0 < e.0);
    }

    #[test]
    fn shared_input_accumulates_through_both_paths() {
        // f = sum(x*x + x) -> df/dx = 2x + 1
        let mut g = Graph::new();
        let mut x = Tensor::from_vec(vec![2], vec![3., -1.]).unwrap();
        x.requires_grad = true;
        let xv = g.input(&x);
        let sq = g.mul(xv, xv).unwrap();
        let sum = g.add(sq, xv).unwrap();
        let loss = g.sum_all(sum);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[7., -1.]);
    }

    #[test]
    fn masked_softmax_gives_zero_weight_to_masked_columns() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1, 2, 3], vec![5., 1., 100., 0., 2., 100.]).unwrap());
        let y = g.masked_softmax(x, &[2]).unwrap();
        let out = g.value(y).data();
        // column 2 masked out: exactly zero
        assert_eq!(out[2], 0.0);
        assert_eq!(out[5], 0.0);
        assert!((out[0] + out[1] - 1.0).abs() < 1e-12);
        assert!((out[3] + out[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permute_roundtrips() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape_of(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn concat_and_stack_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(t2(2, 2, &[1., 2., 3., 4.]));
        let b = g.leaf(t2(2, 3, &[5., 6., 7., 8., 9., 10.]));
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.shape_of(c), &[2, 5]);
        assert_eq!(g.value(c).data(), &[1., 2., 5., 6., 7., 3., 4., 8., 9., 10.]);

        let r1 = g.leaf(Tensor::from_vec(vec![2], vec![1., 2.]).unwrap());
        let r2 = g.leaf(Tensor::from_vec(vec![2], vec![3., 4.]).unwrap());
        let m = g.stack_rows(&[r1, r2]).unwrap();
        assert_eq!(g.shape_of(m), &[2, 2]);
        assert_eq!(g.value(m).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn dropout_disabled_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3], vec![1., 2., 3.]).unwrap());
        let y = g.dropout(x);
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_scales_kept_values() {
        let mut g: Graph<f64> = Graph::new();
        g.enable_dropout(0.5, 1234);
        let x = g.leaf(Tensor::<f64>::full(vec![1000], 1.0));
        let y = g.dropout(x);
        let out = g.value(y).data();
        let kept = out.iter().filter(|&&v| v != 0.0).count();
        assert!(out.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
        // roughly half kept
        assert!(kept > 350 && kept < 650, "kept = {kept}");
    }
}
