//! Command-line surface: train the tagger or the pair classifier from a
//! run-config file, evaluate checkpoints, and emit predictions.

use clap::{Parser, Subcommand};
use lexgrad::checkpoint::{snapshot_tensors, Checkpoint, CheckpointMeta, TaskKind};
use lexgrad::config::{parse_run_config, HeadConfig, ModelConfig, RunConfig, Task};
use lexgrad::data::{load_ner_dataset, load_nli_dataset, split_train_val};
use lexgrad::error::{Error, Result};
use lexgrad::metrics::{domain_split_eval, entity_f1_strict, macro_f1, EvalReport};
use lexgrad::ner::bio_labels;
use lexgrad::nli::NliLabel;
use lexgrad::text::{tokenize, Vocabulary};
use lexgrad::train::{
    prepare_ner_examples, prepare_nli_examples, train_loop, NerTask, NliTask, TrainOutcome,
};
use lexgrad::{NerParams, NliParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lexgrad", version, about = "Legal-text tagging and inference toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the span tagger
    TrainNer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the premise/hypothesis classifier
    TrainNli {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against labeled data
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Group pair examples by legal_act and report per-domain scores
        #[arg(long)]
        split_by_domain: bool,
        /// Also write the report as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit labels (pair model) or spans (tagger) for raw inputs
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Write predictions here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::TrainNer { config, data, out } => cmd_train_ner(&config, &data, &out),
        Cmd::TrainNli { config, data, out } => cmd_train_nli(&config, &data, &out),
        Cmd::Eval {
            checkpoint,
            data,
            split_by_domain,
            out,
        } => cmd_eval(&checkpoint, &data, split_by_domain, out.as_deref()),
        Cmd::Predict {
            checkpoint,
            input,
            out,
        } => cmd_predict(&checkpoint, &input, out.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::io(format!("renaming to {}", path.display()), e))?;
    Ok(())
}

fn write_history(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut buf = Vec::new();
    for rec in &outcome.history {
        serde_json::to_writer(&mut buf, rec)
            .map_err(|e| Error::Checkpoint(format!("serializing history: {e}")))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

fn report_summary(outcome: &TrainOutcome, out_dir: &Path) {
    println!(
        "best metric {:.4} at epoch {} (step {}); artifacts in {}",
        outcome.best_metric,
        outcome.best_epoch,
        outcome.best_step,
        out_dir.display()
    );
}

fn cmd_train_ner(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let rc: RunConfig = parse_run_config(config, Task::Ner)?;
    let records = load_ner_dataset(data)?;
    let (train_recs, val_recs) = split_train_val(&records, rc.val_fraction, rc.train.seed)?;
    let corpus: Vec<Vec<String>> = train_recs.iter().map(|r| r.tokens.clone()).collect();
    let vocab = Vocabulary::build(&corpus, rc.min_freq)?;
    let mut enc_cfg = rc.model.encoder.clone();
    enc_cfg.vocab_size = vocab.len();

    let train_ex = prepare_ner_examples(&train_recs, &vocab, rc.model.max_len)?;
    let val_ex = prepare_ner_examples(&val_recs, &vocab, rc.model.max_len)?;

    let mut rng = ChaCha8Rng::seed_from_u64(rc.train.seed);
    let params = NerParams::new(enc_cfg.clone(), &mut rng)?;
    let mut task = NerTask { params };
    let outcome = train_loop(&mut task, &train_ex, &val_ex, &rc.train)?;

    std::fs::create_dir_all(out)
        .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let ckpt = Checkpoint {
        kind: TaskKind::Ner,
        model: ModelConfig {
            encoder: enc_cfg,
            cnn: None,
            head: HeadConfig {
                n_classes: lexgrad::ner::N_TAGS,
            },
            max_len: rc.model.max_len,
        },
        train: rc.train.clone(),
        vocab,
        labels: bio_labels(),
        meta: CheckpointMeta {
            seed: rc.train.seed,
            best_metric: outcome.best_metric,
            best_step: outcome.best_step,
            pooling: "cls".into(),
        },
        tensors: snapshot_tensors(&task.params.named_tensors()),
    };
    ckpt.save(&out.join("model.ckpt"))?;
    write_history(&out.join("history.jsonl"), &outcome)?;
    report_summary(&outcome, out);
    Ok(())
}

fn cmd_train_nli(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let rc: RunConfig = parse_run_config(config, Task::Nli)?;
    let records = load_nli_dataset(data)?;
    let (train_recs, val_recs) = split_train_val(&records, rc.val_fraction, rc.train.seed)?;
    let corpus: Vec<Vec<String>> = train_recs
        .iter()
        .flat_map(|r| vec![tokenize(&r.premise), tokenize(&r.hypothesis)])
        .collect();
    let vocab = Vocabulary::build(&corpus, rc.min_freq)?;
    let mut enc_cfg = rc.model.encoder.clone();
    enc_cfg.vocab_size = vocab.len();
    let mut cnn_cfg = rc
        .model
        .cnn
        .clone()
        .ok_or_else(|| Error::Config("pair training requires cnn dimensions".into()))?;
    cnn_cfg.vocab_size = vocab.len();

    let train_ex = prepare_nli_examples(&train_recs, &vocab, rc.model.max_len)?;
    let val_ex = prepare_nli_examples(&val_recs, &vocab, rc.model.max_len)?;

    let mut rng = ChaCha8Rng::seed_from_u64(rc.train.seed);
    let params = NliParams::new(enc_cfg.clone(), cnn_cfg.clone(), &mut rng)?;
    let mut task = NliTask { params };
    let outcome = train_loop(&mut task, &train_ex, &val_ex, &rc.train)?;

    std::fs::create_dir_all(out)
        .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let ckpt = Checkpoint {
        kind: TaskKind::Nli,
        model: ModelConfig {
            encoder: enc_cfg,
            cnn: Some(cnn_cfg),
            head: HeadConfig { n_classes: 3 },
            max_len: rc.model.max_len,
        },
        train: rc.train.clone(),
        vocab,
        labels: NliLabel::names(),
        meta: CheckpointMeta {
            seed: rc.train.seed,
            best_metric: outcome.best_metric,
            best_step: outcome.best_step,
            pooling: "cls".into(),
        },
        tensors: snapshot_tensors(&task.params.named_tensors()),
    };
    ckpt.save(&out.join("model.ckpt"))?;
    write_history(&out.join("history.jsonl"), &outcome)?;
    report_summary(&outcome, out);
    Ok(())
}

fn emit_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    print!("{report}");
    if let Some(path) = out {
        let json = serde_json::to_vec_pretty(report)
            .map_err(|e| Error::Checkpoint(format!("serializing report: {e}")))?;
        write_atomic(path, &json)?;
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split_by_domain: bool,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    match ckpt.kind {
        TaskKind::Ner => {
            if split_by_domain {
                return Err(Error::Config(
                    "--split-by-domain applies to pair checkpoints only".into(),
                ));
            }
            let records = load_ner_dataset(data)?;
            let examples = prepare_ner_examples(&records, &ckpt.vocab, ckpt.model.max_len)?;
            let task = NerTask {
                params: ckpt.to_ner_params()?,
            };
            let preds = task.predict_spans(&examples)?;
            let golds: Vec<_> = examples.iter().map(|e| e.gold_spans.clone()).collect();
            let report = entity_f1_strict(&preds, &golds)?;
            emit_report(&report, out)
        }
        TaskKind::Nli => {
            let records = load_nli_dataset(data)?;
            let examples = prepare_nli_examples(&records, &ckpt.vocab, ckpt.model.max_len)?;
            let task = NliTask {
                params: ckpt.to_nli_params()?,
            };
            let preds = task.predict_classes(&examples)?;
            let golds: Vec<usize> = examples.iter().map(|e| e.label.index()).collect();
            let mut report = macro_f1(&preds, &golds, 3, &NliLabel::names())?;
            if split_by_domain {
                let acts: Vec<String> = examples.iter().map(|e| e.legal_act.clone()).collect();
                report.per_domain =
                    Some(domain_split_eval(&preds, &golds, &acts, 3, &NliLabel::names())?);
            }
            emit_report(&report, out)
        }
    }
}

#[derive(Deserialize)]
struct TokensLine {
    tokens: Vec<String>,
}

fn read_token_inputs(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let tokens = if raw.trim_start().starts_with('{') {
            serde_json::from_str::<TokensLine>(raw)
                .map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: ln + 1,
                    msg: format!("malformed record: {e}"),
                })?
                .tokens
        } else {
            raw.split_whitespace().map(|t| t.to_string()).collect()
        };
        if tokens.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: ln + 1,
                msg: "no tokens".into(),
            });
        }
        out.push(tokens);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput { what: "input file" });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct PairLine {
    premise: String,
    hypothesis: String,
}

fn read_pair_inputs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let mut out = Vec::new();
    if first.trim_start().starts_with('{') {
        for (ln, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let rec: PairLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: ln + 1,
                msg: format!("malformed record: {e}"),
            })?;
            out.push((rec.premise, rec.hypothesis));
        }
    } else {
        for (ln, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() || ln == 0 && raw.starts_with("premise") {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() < 2 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: ln + 1,
                    msg: "expected premise<TAB>hypothesis".into(),
                });
            }
            out.push((fields[0].to_string(), fields[1].to_string()));
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput { what: "input file" });
    }
    Ok(out)
}

fn cmd_predict(checkpoint: &Path, input: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut lines = String::new();
    match ckpt.kind {
        TaskKind::Ner => {
            let inputs = read_token_inputs(input)?;
            let records: Vec<lexgrad::data::NerRecord> = inputs
                .iter()
                .map(|tokens| lexgrad::data::NerRecord {
                    ner_tags: vec!["O".to_string(); tokens.len()],
                    tokens: tokens.clone(),
                })
                .collect();
            let examples = prepare_ner_examples(&records, &ckpt.vocab, ckpt.model.max_len)?;
            let task = NerTask {
                params: ckpt.to_ner_params()?,
            };
            let spans = task.predict_spans(&examples)?;
            for (sentence, spans) in inputs.iter().zip(&spans) {
                for sp in spans {
                    let surface = sentence[sp.start..sp.end].join(" ");
                    lines.push_str(&format!(
                        "{} {} {} {}\n",
                        sp.start,
                        sp.end,
                        sp.entity.name(),
                        surface
                    ));
                }
                lines.push('\n');
            }
        }
        TaskKind::Nli => {
            let pairs = read_pair_inputs(input)?;
            let records: Vec<lexgrad::data::NliRecord> = pairs
                .iter()
                .map(|(p, h)| lexgrad::data::NliRecord {
                    premise: p.clone(),
                    hypothesis: h.clone(),
                    label: NliLabel::Entailed.name().to_string(),
                    legal_act: String::new(),
                })
                .collect();
            let examples = prepare_nli_examples(&records, &ckpt.vocab, ckpt.model.max_len)?;
            let task = NliTask {
                params: ckpt.to_nli_params()?,
            };
            for class in task.predict_classes(&examples)? {
                lines.push_str(NliLabel::from_index(class)?.name());
                lines.push('\n');
            }
        }
    }
    match out {
        Some(path) => write_atomic(path, lines.as_bytes())?,
        None => print!("{lines}"),
    }
    Ok(())
}
