//! Run configuration: model dimensions plus training hyperparameters,
//! parsed from a `key = value` file.

use crate::cnn::CnnConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::train::{Budget, EvalMetricKind, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub n_classes: usize,
}

/// Every architecture dimension in one serializable record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Present for the sentence-pair model only.
    pub cnn: Option<CnnConfig>,
    pub head: HeadConfig,
    pub max_len: usize,
}

/// A parsed run-config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub val_fraction: f64,
    pub min_freq: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Ner,
    Nli,
}

fn parse_kv(path: &Path) -> Result<BTreeMap<String, (usize, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: ln + 1,
                msg: format!("expected `key = value`, got {raw:?}"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), (ln + 1, value)).is_some() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: ln + 1,
                msg: format!("duplicate key {key:?}"),
            });
        }
    }
    Ok(map)
}

struct KvReader<'a> {
    path: String,
    map: BTreeMap<String, (usize, String)>,
    known: Vec<&'a str>,
}

impl<'a> KvReader<'a> {
    fn get(&mut self, key: &'a str) -> Option<(usize, String)> {
        self.known.push(key);
        self.map.get(key).cloned()
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &'a str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|_| Error::Parse {
                path: self.path.clone(),
                line,
                msg: format!("cannot parse {key} value {v:?}"),
            }),
        }
    }

    fn parse_or<T: std::str::FromStr>(&mut self, key: &'a str, default: T) -> Result<T> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn reject_unknown(&self) -> Result<()> {
        for (key, (line, _)) in &self.map {
            if !self.known.contains(&key.as_str()) {
                return Err(Error::Parse {
                    path: self.path.clone(),
                    line: *line,
                    msg: format!("unknown key {key:?}"),
                });
            }
        }
        Ok(())
    }
}

/// Parse a run-config file for the given task. The vocabulary size is
/// determined by the data, so `vocab_size` here is a placeholder that the
/// caller replaces after building the vocabulary.
pub fn parse_run_config(path: &Path, task: Task) -> Result<RunConfig> {
    let map = parse_kv(path)?;
    let mut r = KvReader {
        path: path.display().to_string(),
        map,
        known: Vec::new(),
    };

    if let Some((line, v)) = r.get("optimizer") {
        if v.to_lowercase() != "adam" {
            return Err(Error::Parse {
                path: r.path.clone(),
                line,
                msg: format!("unsupported optimizer {v:?} (only adam)"),
            });
        }
    }

    let learning_rate: f64 = r.parse_or("learning_rate", 1e-4)?;
    let batch_size: usize = r.parse_or("batch_size", 8)?;
    let max_steps: Option<u64> = r.parse("max_steps")?;
    let n_epochs: Option<u64> = r.parse("n_epochs")?;
    let budget = match (max_steps, n_epochs) {
        (Some(s), None) => Budget::MaxSteps(s),
        (None, Some(e)) => Budget::Epochs(e),
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "set exactly one of max_steps / n_epochs, got both".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Config(
                "set exactly one of max_steps / n_epochs, got neither".into(),
            ))
        }
    };
    let dropout: f64 = r.parse_or("dropout", 0.1)?;
    let weight_decay: f64 = r.parse_or("weight_decay", 0.0)?;
    let warmup_steps: Option<u64> = r.parse("warmup_steps")?;
    let patience: usize = r.parse_or("patience", 3)?;
    let seed: u64 = r.parse_or("seed", 42)?;
    let eval_metric = match r.get("eval_metric") {
        None => match task {
            Task::Ner => EvalMetricKind::StrictSpanF1,
            Task::Nli => EvalMetricKind::MacroF1,
        },
        Some((line, v)) => match v.as_str() {
            "strict_span_f1" => EvalMetricKind::StrictSpanF1,
            "macro_f1" => EvalMetricKind::MacroF1,
            other => {
                return Err(Error::Parse {
                    path: r.path.clone(),
                    line,
                    msg: format!("unknown eval_metric {other:?}"),
                })
            }
        },
    };

    let d_model: usize = r.parse_or("d_model", 64)?;
    let n_layers: usize = r.parse_or("n_layers", 2)?;
    let n_heads: usize = r.parse_or("n_heads", 4)?;
    let d_ff: usize = r.parse_or("d_ff", 256)?;
    let max_positions: usize = r.parse_or("max_positions", 128)?;
    let max_len: usize = r.parse_or("max_len", match task {
        Task::Ner => 48,
        Task::Nli => 64,
    })?;

    let cnn = match task {
        Task::Ner => {
            r.known.extend(["d_embed", "n_filters_per_width", "cnn_d_out"]);
            None
        }
        Task::Nli => Some(CnnConfig {
            vocab_size: 4,
            d_embed: r.parse_or("d_embed", 64)?,
            filter_widths: vec![2, 3, 4],
            n_filters_per_width: r.parse_or("n_filters_per_width", 32)?,
            d_out: r.parse_or("cnn_d_out", 96)?,
        }),
    };

    let val_fraction: f64 = r.parse_or("val_fraction", 0.2)?;
    let min_freq: usize = r.parse_or("min_freq", 1)?;
    r.reject_unknown()?;

    let train = TrainConfig {
        learning_rate,
        batch_size,
        budget,
        dropout,
        weight_decay,
        warmup_steps,
        patience,
        seed,
        eval_metric,
    };
    train.validate()?;

    let model = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 4,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_positions,
        },
        cnn,
        head: HeadConfig {
            n_classes: match task {
                Task::Ner => crate::ner::N_TAGS,
                Task::Nli => 3,
            },
        },
        max_len,
    };
    if max_len > max_positions {
        return Err(Error::Config(format!(
            "max_len {max_len} exceeds max_positions {max_positions}"
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(Error::Config(format!(
            "val_fraction {val_fraction} must lie in (0, 1)"
        )));
    }

    Ok(RunConfig {
        train,
        model,
        val_fraction,
        min_freq,
    })
}
