//! Training loop: per-epoch evaluation, best-checkpoint selection by F1,
//! early stopping, gradient clipping, and the warmup/decay schedule.

use crate::data::{NerRecord, NliRecord};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{entity_f1_strict, macro_f1};
use crate::ner::{
    bio_labels, decode_bio, extract_spans, ner_forward, repair_bio, tag_id_of, EntitySpan,
    NerParams, NerVars,
};
use crate::nli::{nli_forward, NliLabel, NliParams, NliVars, PairBatch};
use crate::optim::{adam_step, clip_global_norm, lr_schedule, AdamState};
use crate::tensor::{shuffled_indices, Tensor};
use crate::text::{encode_pair, encode_sequence, labels_to_ids, PairRow, TokenBatch, Vocabulary};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const EVAL_CHUNK: usize = 32;
pub const CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Budget {
    MaxSteps(u64),
    Epochs(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMetricKind {
    StrictSpanF1,
    MacroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub budget: Budget,
    pub dropout: f64,
    pub weight_decay: f64,
    /// Defaults to 10% of the total step budget.
    pub warmup_steps: Option<u64>,
    pub patience: usize,
    pub seed: u64,
    pub eval_metric: EvalMetricKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        match self.budget {
            Budget::MaxSteps(0) | Budget::Epochs(0) => {
                Err(Error::Config("step/epoch budget must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One structured record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub best_metric: f64,
    pub best_epoch: u64,
    pub best_step: u64,
    pub history: Vec<EpochRecord>,
}

/// A model plus the bookkeeping the generic loop needs.
pub trait TrainTask {
    type Ex;

    /// Build the forward + loss graph for one batch; returns the loss and
    /// the bound parameter vars in `params()` order.
    fn batch_loss(&self, g: &mut Graph<f64>, batch: &[&Self::Ex]) -> Result<(Var, Vec<Var>)>;

    fn params(&self) -> Vec<&Tensor<f64>>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>>;

    /// Eval-mode metric over a dataset.
    fn eval_metric(&self, data: &[Self::Ex], kind: EvalMetricKind) -> Result<f64>;
}

/// Seeded shuffling each epoch, forward/backward/clip/Adam per batch, eval
/// each epoch, best-by-metric snapshot, early stop after `patience` evals
/// without improvement. The model is left holding the best parameters.
pub fn train_loop<T: TrainTask>(
    task: &mut T,
    train: &[T::Ex],
    val: &[T::Ex],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput {
            what: "training set",
        });
    }
    if val.is_empty() {
        return Err(Error::EmptyInput {
            what: "validation set",
        });
    }
    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let (total_steps, max_epochs) = match cfg.budget {
        Budget::MaxSteps(s) => (s, u64::MAX),
        Budget::Epochs(e) => (e * steps_per_epoch, e),
    };
    let warmup = cfg.warmup_steps.unwrap_or(total_steps / 10);
    if warmup >= total_steps {
        return Err(Error::WarmupExceedsTotal {
            warmup,
            total: total_steps,
        });
    }

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = task.params().iter().map(|t| t.numel()).collect();
    let mut adam = AdamState::<f64>::new(&sizes);

    let mut best: Option<(f64, Vec<Tensor<f64>>, u64, u64)> = None;
    let mut evals_without_improvement = 0usize;
    let mut history = Vec::new();
    let mut step: u64 = 0;
    let mut epoch: u64 = 0;

    while epoch < max_epochs && step < total_steps {
        let order = shuffled_indices(n, &mut master);
        let mut losses = Vec::new();
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if step >= total_steps {
                break;
            }
            let refs: Vec<&T::Ex> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            if cfg.dropout > 0.0 {
                g.enable_dropout(cfg.dropout, master.next_u64());
            }
            let (loss, pvars) = task.batch_loss(&mut g, &refs)?;
            let loss_val = g.value(loss).data()[0];
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch: batch_idx,
                });
            }
            losses.push(loss_val);
            g.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = pvars
                .iter()
                .map(|&v| g.grad(v).expect("bound parameter has a gradient").to_vec())
                .collect();
            clip_global_norm(&mut grads, CLIP_NORM);
            let lr_t = lr_schedule(
                (step + 1).min(total_steps),
                cfg.learning_rate,
                warmup,
                total_steps,
            )?;
            let mut params = task.params_mut();
            adam_step(&mut params, &grads, &mut adam, lr_t, cfg.weight_decay)?;
            step += 1;
        }
        epoch += 1;

        let val_metric = task.eval_metric(val, cfg.eval_metric)?;
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        history.push(EpochRecord {
            epoch,
            step,
            train_loss,
            val_metric,
        });

        let improved = best.as_ref().is_none_or(|(b, ..)| val_metric > *b);
        if improved {
            let snapshot: Vec<Tensor<f64>> = task.params().iter().map(|&t| t.clone()).collect();
            best = Some((val_metric, snapshot, epoch, step));
            evals_without_improvement = 0;
        } else {
            evals_without_improvement += 1;
            if evals_without_improvement >= cfg.patience {
                break;
            }
        }
    }

    let (best_metric, snapshot, best_epoch, best_step) = best.ok_or_else(|| {
        Error::Config("training ended before any evaluation".into())
    })?;
    for (p, s) in task.params_mut().into_iter().zip(&snapshot) {
        p.data_mut().copy_from_slice(s.data());
    }
    Ok(TrainOutcome {
        best_metric,
        best_epoch,
        best_step,
        history,
    })
}

// ── Tagging task ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerExample {
    pub row: crate::text::EncodedRow,
    pub labels: Vec<i64>,
    pub gold_spans: Vec<EntitySpan>,
    pub tokens: Vec<String>,
}

/// Encode records against a vocabulary; gold spans come from the (repaired)
/// tag sequence truncated to the encoded length.
pub fn prepare_ner_examples(
    records: &[NerRecord],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<NerExample>> {
    let label_set = bio_labels();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let row = encode_sequence(&rec.tokens, vocab, max_len)?;
        let labels = labels_to_ids(&rec.ner_tags, &label_set, max_len)?;
        let kept = row.valid_len;
        let tag_ids: Vec<u8> = rec.ner_tags[..kept]
            .iter()
            .map(|t| tag_id_of(t))
            .collect::<Result<_>>()?;
        let gold_spans = extract_spans(&repair_bio(&tag_ids))?;
        out.push(NerExample {
            row,
            labels,
            gold_spans,
            tokens: rec.tokens.clone(),
        });
    }
    Ok(out)
}

pub struct NerTask {
    pub params: NerParams<f64>,
}

impl NerTask {
    pub fn config(&self) -> &EncoderConfig {
        &self.params.encoder.config
    }

    /// Eval-mode spans for a slice of examples.
    pub fn predict_spans(&self, data: &[NerExample]) -> Result<Vec<Vec<EntitySpan>>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(EVAL_CHUNK) {
            let rows: Vec<_> = chunk.iter().map(|e| e.row.clone()).collect();
            let batch = TokenBatch::from_rows(&rows)?;
            let mut g = Graph::new();
            let vars = NerVars::bind(&self.params, &mut g);
            let logits = ner_forward(&mut g, &vars, self.config(), &batch)?;
            let values = g.value(logits).clone();
            for (i, ex) in chunk.iter().enumerate() {
                let slice = values.index_axis0(i)?;
                let tags = decode_bio(&slice, ex.row.valid_len.max(1))?;
                out.push(extract_spans(&tags)?);
            }
        }
        Ok(out)
    }
}

impl TrainTask for NerTask {
    type Ex = NerExample;

    fn batch_loss(&self, g: &mut Graph<f64>, batch: &[&NerExample]) -> Result<(Var, Vec<Var>)> {
        let rows: Vec<_> = batch.iter().map(|e| e.row.clone()).collect();
        let tb = TokenBatch::from_rows(&rows)?;
        let vars = NerVars::bind(&self.params, g);
        let logits = ner_forward(g, &vars, self.config(), &tb)?;
        let flat = g.reshape(logits, vec![tb.batch * tb.len, crate::ner::N_TAGS])?;
        let targets: Vec<i64> = batch.iter().flat_map(|e| e.labels.clone()).collect();
        let loss = g.cross_entropy_mean(flat, &targets)?;
        Ok((loss, vars.collect()))
    }

    fn params(&self) -> Vec<&Tensor<f64>> {
        self.params.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.params
            .named_tensors_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    fn eval_metric(&self, data: &[NerExample], kind: EvalMetricKind) -> Result<f64> {
        let preds = self.predict_spans(data)?;
        let golds: Vec<Vec<EntitySpan>> = data.iter().map(|e| e.gold_spans.clone()).collect();
        let report = entity_f1_strict(&preds, &golds)?;
        Ok(match kind {
            EvalMetricKind::StrictSpanF1 => report.micro.map(|m| m.f1).unwrap_or(0.0),
            EvalMetricKind::MacroF1 => report.macro_f1,
        })
    }
}

// ── Pair task ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliExample {
    pub pair: PairRow,
    pub label: NliLabel,
    pub legal_act: String,
}

pub fn prepare_nli_examples(
    records: &[NliRecord],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<NliExample>> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let pair = encode_pair(&rec.premise, &rec.hypothesis, vocab, max_len)?;
        out.push(NliExample {
            pair,
            label: rec.label_enum()?,
            legal_act: rec.legal_act.clone(),
        });
    }
    Ok(out)
}

pub struct NliTask {
    pub params: NliParams<f64>,
}

impl NliTask {
    /// Eval-mode class predictions.
    pub fn predict_classes(&self, data: &[NliExample]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(EVAL_CHUNK) {
            let rows: Vec<_> = chunk.iter().map(|e| e.pair.clone()).collect();
            let batch = PairBatch::from_rows(&rows)?;
            let mut g = Graph::new();
            let vars = NliVars::bind(&self.params, &mut g);
            let logits = nli_forward(
                &mut g,
                &vars,
                &self.params.encoder.config,
                &self.params.cnn.config,
                &batch,
            )?;
            let values = g.value(logits);
            for b in 0..batch.tokens.batch {
                let row = &values.data()[b * 3..(b + 1) * 3];
                let mut bestc = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[bestc] {
                        bestc = j;
                    }
                }
                out.push(bestc);
            }
        }
        Ok(out)
    }
}

impl TrainTask for NliTask {
    type Ex = NliExample;

    fn batch_loss(&self, g: &mut Graph<f64>, batch: &[&NliExample]) -> Result<(Var, Vec<Var>)> {
        let rows: Vec<_> = batch.iter().map(|e| e.pair.clone()).collect();
        let pb = PairBatch::from_rows(&rows)?;
        let vars = NliVars::bind(&self.params, g);
        let logits = nli_forward(
            g,
            &vars,
            &self.params.encoder.config,
            &self.params.cnn.config,
            &pb,
        )?;
        let targets: Vec<i64> = batch.iter().map(|e| e.label.index() as i64).collect();
        let loss = g.cross_entropy_mean(logits, &targets)?;
        Ok((loss, vars.collect()))
    }

    fn params(&self) -> Vec<&Tensor<f64>> {
        self.params.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.params
            .named_tensors_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    fn eval_metric(&self, data: &[NliExample], _kind: EvalMetricKind) -> Result<f64> {
        let preds = self.predict_classes(data)?;
        let golds: Vec<usize> = data.iter().map(|e| e.label.index()).collect();
        let report = macro_f1(&preds, &golds, 3, &NliLabel::names())?;
        Ok(report.macro_f1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::CnnConfig;
    use crate::synth::{synthetic_ner, synthetic_nli};

    fn tiny_encoder(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_positions: 32,
        }
    }

    fn tiny_cnn(vocab_size: usize) -> CnnConfig {
        CnnConfig {
            vocab_size,
            d_embed: 8,
            filter_widths: vec![2, 3, 4],
            n_filters_per_width: 4,
            d_out: 12,
        }
    }

    fn nli_fixture(seed: u64) -> (NliTask, Vec<NliExample>) {
        let records = synthetic_nli(4, 77);
        let corpus: Vec<Vec<String>> = records
            .iter()
            .flat_map(|r| {
                vec![
                    crate::text::tokenize(&r.premise),
                    crate::text::tokenize(&r.hypothesis),
                ]
            })
            .collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let examples = prepare_nli_examples(&records, &vocab, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params =
            NliParams::new(tiny_encoder(vocab.len()), tiny_cnn(vocab.len()), &mut rng).unwrap();
        (NliTask { params }, examples)
    }

    fn quick_cfg(budget: Budget) -> TrainConfig {
        TrainConfig {
            learning_rate: 2e-3,
            batch_size: 6,
            budget,
            dropout: 0.0,
            weight_decay: 0.0,
            warmup_steps: Some(2),
            patience: 50,
            seed: 11,
            eval_metric: EvalMetricKind::MacroF1,
        }
    }

    #[test]
    fn loss_decreases_over_first_fifty_steps() {
        let (mut task, examples) = nli_fixture(3);
        let fixed: Vec<&NliExample> = examples.iter().take(6).collect();
        let mut adam = AdamState::new(
            &task.params().iter().map(|t| t.numel()).collect::<Vec<_>>(),
        );
        let mut first = None;
        let mut last = 0.0;
        for step in 0..50 {
            let mut g = Graph::new();
            let (loss, pvars) = task.batch_loss(&mut g, &fixed).unwrap();
            let lv = g.value(loss).data()[0];
            if step == 0 {
                first = Some(lv);
            }
            last = lv;
            g.backward(loss).unwrap();
            let mut grads: Vec<Vec<f64>> = pvars
                .iter()
                .map(|&v| g.grad(v).unwrap().to_vec())
                .collect();
            clip_global_norm(&mut grads, CLIP_NORM);
            let mut params = task.params_mut();
            adam_step(&mut params, &grads, &mut adam, 2e-3, 0.0).unwrap();
        }
        assert!(
            last < first.unwrap(),
            "loss should descend: {first:?} -> {last}"
        );
    }

    #[test]
    fn early_stopping_waits_for_patience_evals() {
        // lr tiny enough that the metric plateaus; patience 3 means exactly
        // 1 improving eval + 3 stale evals before stopping
        let (mut task, examples) = nli_fixture(4);
        let cfg = TrainConfig {
            learning_rate: 1e-12,
            patience: 3,
            budget: Budget::Epochs(50),
            ..quick_cfg(Budget::Epochs(50))
        };
        let outcome = train_loop(&mut task, &examples, &examples, &cfg).unwrap();
        assert_eq!(outcome.history.len(), 4, "{:?}", outcome.history);
    }

    #[test]
    fn best_metric_dominates_history() {
        let (mut task, examples) = nli_fixture(5);
        let cfg = quick_cfg(Budget::Epochs(4));
        let outcome = train_loop(&mut task, &examples, &examples, &cfg).unwrap();
        for rec in &outcome.history {
            assert!(outcome.best_metric >= rec.val_metric);
        }
    }

    #[test]
    fn identical_seeds_reproduce_history() {
        let cfg = quick_cfg(Budget::Epochs(3));
        let (mut t1, ex) = nli_fixture(6);
        let o1 = train_loop(&mut t1, &ex, &ex, &cfg).unwrap();
        let (mut t2, ex2) = nli_fixture(6);
        let o2 = train_loop(&mut t2, &ex2, &ex2, &cfg).unwrap();
        assert_eq!(o1, o2);
        for (a, b) in t1.params().iter().zip(t2.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_step_and_batch() {
        // a learning rate near f64::MAX overflows the parameters within a
        // couple of updates; the loop must stop with a diagnostic, not NaN on
        let (mut task, examples) = nli_fixture(8);
        let cfg = TrainConfig {
            learning_rate: 1e308,
            warmup_steps: Some(0),
            ..quick_cfg(Budget::Epochs(10))
        };
        match train_loop(&mut task, &examples, &examples, &cfg) {
            Err(Error::NonFiniteLoss { step, batch }) => {
                assert!(step >= 1, "first loss is finite, step {step}");
                let _ = batch;
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn empty_datasets_error() {
        let (mut task, examples) = nli_fixture(7);
        let cfg = quick_cfg(Budget::Epochs(1));
        assert!(train_loop(&mut task, &[], &examples, &cfg).is_err());
        assert!(train_loop(&mut task, &examples, &[], &cfg).is_err());
    }

    #[test]
    fn ner_task_trains_and_scores() {
        let records = synthetic_ner(8, 21);
        let corpus: Vec<Vec<String>> = records.iter().map(|r| r.tokens.clone()).collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let examples = prepare_ner_examples(&records, &vocab, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = NerParams::new(tiny_encoder(vocab.len()), &mut rng).unwrap();
        let mut task = NerTask { params };
        let cfg = TrainConfig {
            eval_metric: EvalMetricKind::StrictSpanF1,
            ..quick_cfg(Budget::Epochs(2))
        };
        let outcome = train_loop(&mut task, &examples, &examples, &cfg).unwrap();
        assert_eq!(outcome.history.len(), 2);
        let metric = task
            .eval_metric(&examples, EvalMetricKind::StrictSpanF1)
            .unwrap();
        assert!((0.0..=1.0).contains(&metric));
    }
}
