//! Scoring: macro-F1 over class indices, strict entity-span F1, confusion
//! matrices, and per-domain breakdowns.

use crate::error::{Error, Result};
use crate::ner::{EntitySpan, ENTITY_TYPES};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Gold-by-predicted count matrix (rows = gold, cols = predicted).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn from_pairs(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<Self> {
        if preds.len() != golds.len() {
            return Err(Error::MetricInput(format!(
                "got {} predictions for {} gold labels",
                preds.len(),
                golds.len()
            )));
        }
        let mut counts = vec![0usize; n_classes * n_classes];
        for (&p, &g) in preds.iter().zip(golds) {
            if p >= n_classes || g >= n_classes {
                return Err(Error::MetricInput(format!(
                    "class index out of range: pred {p}, gold {g}, n_classes {n_classes}"
                )));
            }
            counts[g * n_classes + p] += 1;
        }
        Ok(ConfusionMatrix { n_classes, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    fn class_counts(&self, c: usize) -> (usize, usize, usize) {
        let n = self.n_classes;
        let tp = self.counts[c * n + c];
        let fp: usize = (0..n).filter(|&g| g != c).map(|g| self.counts[g * n + c]).sum();
        let fn_: usize = (0..n).filter(|&p| p != c).map(|p| self.counts[c * n + p]).sum();
        (tp, fp, fn_)
    }
}

/// Precision/recall/F1 triple with support; zero-denominator cases are 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    (precision, recall, f1)
}

/// Micro-averaged span scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
    /// Micro span-level scores (strict entity evaluation only).
    pub micro: Option<MicroScore>,
    pub confusion: Option<ConfusionMatrix>,
    /// Per-domain sub-reports plus their unweighted macro-F1 average.
    pub per_domain: Option<DomainBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBreakdown {
    pub domains: Vec<(String, EvalReport)>,
    pub average_macro_f1: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>9} {:>9} {:>9} {:>9}",
            "class", "precision", "recall", "f1", "support"
        )?;
        for c in &self.per_class {
            writeln!(
                f,
                "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>9}",
                c.label, c.precision, c.recall, c.f1, c.support
            )?;
        }
        writeln!(f, "macro-f1 {:.4}", self.macro_f1)?;
        if let Some(m) = &self.micro {
            writeln!(
                f,
                "micro    p {:.4}  r {:.4}  f1 {:.4}",
                m.precision, m.recall, m.f1
            )?;
        }
        if let Some(d) = &self.per_domain {
            writeln!(f, "---- by domain ----")?;
            for (name, rep) in &d.domains {
                writeln!(f, "{:<24} macro-f1 {:.4}", name, rep.macro_f1)?;
            }
            writeln!(f, "{:<24} average  {:.4}", "(unweighted)", d.average_macro_f1)?;
        }
        Ok(())
    }
}

/// Unweighted mean of per-class F1 over `n_classes` label indices.
pub fn macro_f1(
    preds: &[usize],
    golds: &[usize],
    n_classes: usize,
    labels: &[String],
) -> Result<EvalReport> {
    let cm = ConfusionMatrix::from_pairs(preds, golds, n_classes)?;
    let mut per_class = Vec::with_capacity(n_classes);
    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let (tp, fp, fn_) = cm.class_counts(c);
        let (precision, recall, f1) = prf(tp, fp, fn_);
        f1_sum += f1;
        per_class.push(ClassScore {
            label: labels.get(c).cloned().unwrap_or_else(|| c.to_string()),
            precision,
            recall,
            f1,
            support: tp + fn_,
        });
    }
    Ok(EvalReport {
        per_class,
        macro_f1: f1_sum / n_classes as f64,
        micro: None,
        confusion: Some(cm),
        per_domain: None,
    })
}

fn check_no_overlap(spans: &[EntitySpan]) -> Result<()> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::InvalidSpans(format!(
                "spans {}..{} and {}..{} overlap within one input",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    Ok(())
}

/// Strict span scoring: a prediction is a true positive only when start,
/// end, and type all match a gold span. Micro scores aggregate over every
/// sentence; the per-class list breaks results down by entity type, and
/// `macro_f1` averages those four type-level F1 values.
pub fn entity_f1_strict(
    pred_spans: &[Vec<EntitySpan>],
    gold_spans: &[Vec<EntitySpan>],
) -> Result<EvalReport> {
    if pred_spans.len() != gold_spans.len() {
        return Err(Error::MetricInput(format!(
            "got {} predicted sentences for {} gold sentences",
            pred_spans.len(),
            gold_spans.len()
        )));
    }
    // per entity type: (tp, fp, fn)
    let mut by_type: Vec<(usize, usize, usize)> = vec![(0, 0, 0); ENTITY_TYPES.len()];
    for (preds, golds) in pred_spans.iter().zip(gold_spans) {
        check_no_overlap(preds)?;
        check_no_overlap(golds)?;
        let mut gold_used = vec![false; golds.len()];
        for p in preds {
            let ti = ENTITY_TYPES.iter().position(|&t| t == p.entity).unwrap();
            let hit = golds
                .iter()
                .enumerate()
                .find(|(gi, g)| !gold_used[*gi] && *g == p);
            match hit {
                Some((gi, _)) => {
                    gold_used[gi] = true;
                    by_type[ti].0 += 1;
                }
                None => by_type[ti].1 += 1,
            }
        }
        for (gi, g) in golds.iter().enumerate() {
            if !gold_used[gi] {
                let ti = ENTITY_TYPES.iter().position(|&t| t == g.entity).unwrap();
                by_type[ti].2 += 1;
            }
        }
    }

    let mut per_class = Vec::with_capacity(ENTITY_TYPES.len());
    let mut f1_sum = 0.0;
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    for (ti, ty) in ENTITY_TYPES.iter().enumerate() {
        let (tp, fp, fn_) = by_type[ti];
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        let (precision, recall, f1) = prf(tp, fp, fn_);
        f1_sum += f1;
        per_class.push(ClassScore {
            label: ty.name().to_string(),
            precision,
            recall,
            f1,
            support: tp + fn_,
        });
    }
    let (mp, mr, mf) = prf(tp_all, fp_all, fn_all);
    Ok(EvalReport {
        per_class,
        macro_f1: f1_sum / ENTITY_TYPES.len() as f64,
        micro: Some(MicroScore {
            precision: mp,
            recall: mr,
            f1: mf,
        }),
        confusion: None,
        per_domain: None,
    })
}

/// Group examples by their `legal_act` key, compute macro-F1 per group, and
/// average the group scores without weighting.
pub fn domain_split_eval(
    preds: &[usize],
    golds: &[usize],
    legal_acts: &[String],
    n_classes: usize,
    labels: &[String],
) -> Result<DomainBreakdown> {
    if preds.len() != golds.len() || preds.len() != legal_acts.len() {
        return Err(Error::MetricInput(
            "preds, golds, and legal_acts must have equal length".into(),
        ));
    }
    if let Some(i) = legal_acts.iter().position(|a| a.trim().is_empty()) {
        return Err(Error::MetricInput(format!(
            "example {i} is missing its legal_act"
        )));
    }
    let mut groups: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for i in 0..preds.len() {
        let slot = groups.entry(legal_acts[i].as_str()).or_default();
        slot.0.push(preds[i]);
        slot.1.push(golds[i]);
    }
    let mut domains = Vec::with_capacity(groups.len());
    let mut sum = 0.0;
    for (name, (p, g)) in &groups {
        let report = macro_f1(p, g, n_classes, labels)?;
        sum += report.macro_f1;
        domains.push((name.to_string(), report));
    }
    let average_macro_f1 = sum / domains.len() as f64;
    Ok(DomainBreakdown {
        domains,
        average_macro_f1,
    })
}

/// Unweighted average of already-computed per-domain scores.
pub fn unweighted_domain_average(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ner::EntityType;

    fn labels3() -> Vec<String> {
        vec!["Entailed".into(), "Neutral".into(), "Contradict".into()]
    }

    #[test]
    fn worked_macro_example_is_five_ninths() {
        // golds [E,N,C,E], preds [E,C,C,E]
        let report = macro_f1(&[0, 2, 2, 0], &[0, 1, 2, 0], 3, &labels3()).unwrap();
        assert!((report.per_class[0].f1 - 1.0).abs() < 1e-12);
        assert!(report.per_class[1].f1 == 0.0);
        assert!((report.per_class[2].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.macro_f1 - 5.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let report = macro_f1(&[0, 1, 2], &[0, 1, 2], 3, &labels3()).unwrap();
        assert_eq!(report.macro_f1, 1.0);
    }

    #[test]
    fn absent_class_scores_zero_and_still_averages() {
        // class 2 never appears; its F1 is 0 and divides the mean
        let report = macro_f1(&[0, 1], &[0, 1], 3, &labels3()).unwrap();
        assert!((report.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(macro_f1(&[0], &[0, 1], 3, &labels3()).is_err());
    }

    #[test]
    fn permuting_examples_preserves_metrics() {
        let preds = [0, 2, 1, 0, 2];
        let golds = [0, 1, 1, 2, 2];
        let a = macro_f1(&preds, &golds, 3, &labels3()).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let pp: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let pg: Vec<usize> = perm.iter().map(|&i| golds[i]).collect();
        let b = macro_f1(&pp, &pg, 3, &labels3()).unwrap();
        assert_eq!(a.macro_f1, b.macro_f1);
        assert_eq!(a.per_class, b.per_class);
    }

    #[test]
    fn strict_exact_match_scores_one() {
        let span = vec![EntitySpan::new(0, 2, EntityType::Law)];
        let report = entity_f1_strict(std::slice::from_ref(&span), std::slice::from_ref(&span)).unwrap();
        assert_eq!(report.micro.unwrap().f1, 1.0);
    }

    #[test]
    fn strict_boundary_mismatch_scores_zero() {
        let pred = vec![vec![EntitySpan::new(0, 3, EntityType::Law)]];
        let gold = vec![vec![EntitySpan::new(0, 2, EntityType::Law)]];
        let report = entity_f1_strict(&pred, &gold).unwrap();
        assert_eq!(report.micro.unwrap().f1, 0.0);
    }

    #[test]
    fn empty_predictions_have_zero_recall() {
        let pred = vec![vec![]];
        let gold = vec![vec![EntitySpan::new(0, 2, EntityType::Law)]];
        let report = entity_f1_strict(&pred, &gold).unwrap();
        let micro = report.micro.unwrap();
        assert_eq!(micro.recall, 0.0);
        assert_eq!(micro.f1, 0.0);
    }

    #[test]
    fn overlapping_spans_rejected() {
        let pred = vec![vec![
            EntitySpan::new(0, 3, EntityType::Law),
            EntitySpan::new(2, 4, EntityType::Law),
        ]];
        let gold = vec![vec![]];
        assert!(entity_f1_strict(&pred, &gold).is_err());
    }

    #[test]
    fn strict_f1_is_symmetric() {
        let a = vec![
            vec![
                EntitySpan::new(0, 2, EntityType::Law),
                EntitySpan::new(3, 4, EntityType::Violation),
            ],
            vec![EntitySpan::new(1, 2, EntityType::ViolatedBy)],
        ];
        let b = vec![
            vec![EntitySpan::new(0, 2, EntityType::Law)],
            vec![
                EntitySpan::new(1, 2, EntityType::ViolatedOn),
                EntitySpan::new(3, 5, EntityType::ViolatedBy),
            ],
        ];
        let ab = entity_f1_strict(&a, &b).unwrap().micro.unwrap().f1;
        let ba = entity_f1_strict(&b, &a).unwrap().micro.unwrap().f1;
        assert_eq!(ab, ba);
    }

    #[test]
    fn unweighted_average_matches_hand_arithmetic() {
        assert_eq!(unweighted_domain_average(&[84.4, 90.0, 84.0, 96.0]), 88.6);
    }

    #[test]
    fn single_domain_average_is_that_domain() {
        let acts: Vec<String> = vec!["Wage".into(); 4];
        let breakdown =
            domain_split_eval(&[0, 1, 2, 0], &[0, 1, 2, 1], &acts, 3, &labels3()).unwrap();
        assert_eq!(breakdown.domains.len(), 1);
        assert_eq!(
            breakdown.average_macro_f1,
            breakdown.domains[0].1.macro_f1
        );
    }

    #[test]
    fn grouped_scores_match_direct_per_group_computation() {
        let preds = [0usize, 1, 2, 0, 1, 2];
        let golds = [0usize, 1, 1, 0, 2, 2];
        let acts: Vec<String> = ["A", "A", "A", "B", "B", "B"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let breakdown = domain_split_eval(&preds, &golds, &acts, 3, &labels3()).unwrap();
        let direct_a = macro_f1(&preds[..3], &golds[..3], 3, &labels3()).unwrap();
        let direct_b = macro_f1(&preds[3..], &golds[3..], 3, &labels3()).unwrap();
        assert_eq!(breakdown.domains[0].1.macro_f1, direct_a.macro_f1);
        assert_eq!(breakdown.domains[1].1.macro_f1, direct_b.macro_f1);
        assert_eq!(
            breakdown.average_macro_f1,
            (direct_a.macro_f1 + direct_b.macro_f1) / 2.0
        );
    }

    #[test]
    fn missing_legal_act_is_an_error() {
        let acts: Vec<String> = vec!["Wage".into(), "".into()];
        assert!(domain_split_eval(&[0, 1], &[0, 1], &acts, 3, &labels3()).is_err());
    }

    #[test]
    fn domain_split_signature_error_on_wrong_order() {
        // swapped argument lengths must error, not silently misalign
        let acts: Vec<String> = vec!["Wage".into()];
        assert!(domain_split_eval(&[0, 1], &[0], &acts, 3, &labels3()).is_err());
    }
}
