//! Evaluation metrics: accuracy, macro-F1, four-schema NER scoring and
//! Pearson / Spearman correlation.

mod ner;

use serde::Serialize;

use crate::error::{Error, Result};

pub use ner::{
    extract_spans, ner_schema_eval, EventCounts, NerDocument, SchemaScores, SchemaSummary, Schemas, Span, SCHEMAS,
};

fn check_lengths(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{op}: lengths differ ({a} vs {b})")));
    }
    if a == 0 {
        return Err(Error::Contract(format!("{op}: empty input")));
    }
    Ok(())
}

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy<T: PartialEq>(gold: &[T], pred: &[T]) -> Result<f64> {
    check_lengths("accuracy", gold.len(), pred.len())?;
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// `2PR / (P + R)`, zero when both are zero.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class F1 for labels `0..num_labels`.
pub fn per_class_f1(gold: &[usize], pred: &[usize], num_labels: usize) -> Result<Vec<f64>> {
    check_lengths("macro_f1", gold.len(), pred.len())?;
    if let Some(&bad) = gold.iter().chain(pred).find(|&&l| l >= num_labels) {
        return Err(Error::Contract(format!("label {bad} outside 0..{num_labels}")));
    }
    let mut tp = vec![0usize; num_labels];
    let mut gold_n = vec![0usize; num_labels];
    let mut pred_n = vec![0usize; num_labels];
    for (&g, &p) in gold.iter().zip(pred) {
        gold_n[g] += 1;
        pred_n[p] += 1;
        if g == p {
            tp[g] += 1;
        }
    }
    Ok((0..num_labels)
        .map(|c| {
            let p = if pred_n[c] == 0 {
                0.0
            } else {
                tp[c] as f64 / pred_n[c] as f64
            };
            let r = if gold_n[c] == 0 {
                0.0
            } else {
                tp[c] as f64 / gold_n[c] as f64
            };
            f1(p, r)
        })
        .collect())
}

/// Unweighted mean of per-class F1. A class absent from both sides scores 0
/// and still counts toward the mean.
pub fn macro_f1(gold: &[usize], pred: &[usize], num_labels: usize) -> Result<f64> {
    if num_labels == 0 {
        return Err(Error::Contract("macro_f1 needs at least one label".into()));
    }
    let scores = per_class_f1(gold, pred, num_labels)?;
    Ok(scores.iter().sum::<f64>() / num_labels as f64)
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "pearson: lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Contract("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the inputs has zero variance".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their rank block.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "spearman: lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Classification scores for one task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub examples: usize,
}

impl ClassificationReport {
    pub fn compute(gold: &[usize], pred: &[usize], num_labels: usize) -> Result<Self> {
        Ok(Self {
            accuracy: accuracy(gold, pred)?,
            macro_f1: macro_f1(gold, pred, num_labels)?,
            examples: gold.len(),
        })
    }
}

/// Correlation scores for a regression task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    pub examples: usize,
}

impl CorrelationReport {
    pub fn compute(gold: &[f64], pred: &[f64]) -> Result<Self> {
        Ok(Self {
            pearson: pearson(gold, pred)?,
            spearman: spearman(gold, pred)?,
            examples: gold.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(accuracy(&[2, 3], &[2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(Error::Contract(_))));
        assert!(matches!(accuracy::<u8>(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn macro_f1_examples() {
        let m = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((m - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        let c = macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert!((c - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        // Class 2 never appears yet is averaged in.
        assert!((macro_f1(&[0, 1], &[0, 1], 3).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(macro_f1(&[0, 5], &[0, 1], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(pearson(&[1.0], &[2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        let x = [0.3, 1.5, -2.0, 4.0, 0.0];
        let cubed: Vec<f64> = x.iter().map(|v: &f64| v.powi(3) + 7.0).collect();
        assert!((spearman(&x, &cubed).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&x, &rev).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            spearman(&[2.0; 3], &x[..3]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..20),
            a in 0.1f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson(&x, &y) {
                let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let nx: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
                prop_assert!((pearson(&ax, &y).unwrap() - r).abs() < 1e-9);
                prop_assert!((pearson(&nx, &y).unwrap() + r).abs() < 1e-9);
            }
        }

        #[test]
        fn spearman_monotone_invariance(
            pts in prop::collection::vec((-10i32..10, -10i32..10), 3..20),
        ) {
            let x: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1 as f64).collect();
            if let Ok(r) = spearman(&x, &y) {
                let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                prop_assert!((spearman(&ex, &y).unwrap() - r).abs() < 1e-12);
            }
        }

        #[test]
        fn metrics_match_brute_force(
            pairs in prop::collection::vec((0usize..5, 0usize..5), 1..20),
        ) {
            let gold: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let mut total = 0.0;
            for c in 0..5 {
                let tp = pairs.iter().filter(|p| p.0 == c && p.1 == c).count() as f64;
                let fp = pairs.iter().filter(|p| p.0 != c && p.1 == c).count() as f64;
                let fne = pairs.iter().filter(|p| p.0 == c && p.1 != c).count() as f64;
                // F1 = 2TP / (2TP + FP + FN), zero for an absent class.
                if tp > 0.0 {
                    total += 2.0 * tp / (2.0 * tp + fp + fne);
                }
            }
            prop_assert!((macro_f1(&gold, &pred, 5).unwrap() - total / 5.0).abs() < 1e-12);
            let hits = pairs.iter().filter(|p| p.0 == p.1).count() as f64;
            prop_assert!((accuracy(&gold, &pred).unwrap() - hits / pairs.len() as f64).abs() < 1e-12);
        }
    }
}
