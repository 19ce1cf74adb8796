//! Accuracy metrics, per-run reports and multi-seed aggregates.

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::diagnostics::{Geometry, MarginDistribution, RegularizerReport, TaylorTable};
use crate::losses::{ce_loss, Method};
use crate::model::Model;
use crate::numerics::Matrix;

/// Number of smallest training classes averaged into the tail accuracy.
pub const TAIL_CLASSES: usize = 3;

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn predictions(logits: &Matrix) -> Vec<usize> {
    logits.row_iter().map(argmax).collect()
}

/// The `k` classes with the fewest training samples; ties go to the higher index.
pub fn tail_classes(train_counts: &[usize], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..train_counts.len()).collect();
    idx.sort_by(|&a, &b| train_counts[a].cmp(&train_counts[b]).then(b.cmp(&a)));
    idx.truncate(k.min(train_counts.len()));
    idx.sort_unstable();
    idx
}

/// Accuracy within each group id `0..groups`; groups with no samples are `None`.
pub fn group_accuracy(preds: &[usize], labels: &[usize], group: &[usize], groups: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; groups];
    let mut n = vec![0usize; groups];
    for ((&p, &y), &g) in preds.iter().zip(labels).zip(group) {
        n[g] += 1;
        hit[g] += usize::from(p == y);
    }
    hit.iter().zip(&n).map(|(&h, &k)| (k > 0).then(|| h as f64 / k as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Empty classes report 0.
    pub per_class_accuracy: Vec<f64>,
    pub tail_accuracy: f64,
    /// Minimum over spurious groups when the data has them, otherwise over classes.
    pub worst_group_accuracy: f64,
    pub group_accuracy: Vec<f64>,
}

pub fn evaluate(model: &Model, data: &Dataset, tail: &[usize]) -> Evaluation {
    let logits = model.forward(&data.features).logits;
    evaluate_logits(&logits, data, tail)
}

pub fn evaluate_logits(logits: &Matrix, data: &Dataset, tail: &[usize]) -> Evaluation {
    let preds = predictions(logits);
    let loss = ce_loss(logits, &data.labels).loss;
    let n = data.len().max(1) as f64;
    let accuracy = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64 / n;
    let per_class_opt = group_accuracy(&preds, &data.labels, &data.labels, data.num_classes);
    let per_class: Vec<f64> = per_class_opt.iter().map(|a| a.unwrap_or(0.0)).collect();
    let tail_accuracy = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|&c| per_class[c]).sum::<f64>() / tail.len() as f64
    };
    let groups = match &data.groups {
        Some(g) => {
            let count = g.iter().copied().max().map_or(0, |m| m + 1);
            group_accuracy(&preds, &data.labels, g, count)
        }
        None => per_class_opt,
    };
    let present: Vec<f64> = groups.iter().flatten().copied().collect();
    let worst = present.iter().copied().fold(f64::INFINITY, f64::min);
    Evaluation {
        loss,
        accuracy,
        per_class_accuracy: per_class,
        tail_accuracy,
        worst_group_accuracy: if present.is_empty() { 0.0 } else { worst },
        group_accuracy: groups.iter().map(|a| a.unwrap_or(0.0)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: u64,
    /// Mean training objective since the previous record.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsBundle {
    pub regularizer: RegularizerReport,
    pub taylor: TaylorTable,
    pub geometry: Geometry,
    pub margins: MarginDistribution,
    /// Share of the method's perturbation entries hitting the exponent clamp
    /// on the evaluation split.
    pub clamp_fraction: f64,
}

/// Everything `metrics.json` holds. The key set is the same for every method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub seed: u64,
    pub iterations: u64,
    pub tail_classes: Vec<usize>,
    pub train_class_counts: Vec<usize>,
    pub history: Vec<HistoryRecord>,
    /// Share of perturbation entries hitting the exponent clamp over training.
    pub train_clamp_fraction: f64,
    pub train: Evaluation,
    pub test: Evaluation,
    pub diagnostics: DiagnosticsBundle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub test_accuracy: MeanStd,
    pub tail_accuracy: MeanStd,
    pub worst_group_accuracy: MeanStd,
    pub test_loss: MeanStd,
}

impl Aggregate {
    pub fn of(reports: &[MetricsReport]) -> Option<Self> {
        let first = reports.first()?;
        let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
        Some(Aggregate {
            method: first.method,
            seeds: reports.iter().map(|r| r.seed).collect(),
            test_accuracy: col(|r| r.test.accuracy),
            tail_accuracy: col(|r| r.test.tail_accuracy),
            worst_group_accuracy: col(|r| r.test.worst_group_accuracy),
            test_loss: col(|r| r.test.loss),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::SplitTag;

    #[test]
    fn tail_picks_smallest() {
        assert_eq!(tail_classes(&[100, 50, 10, 10, 5], 3), vec![2, 3, 4]);
        assert_eq!(tail_classes(&[5, 5, 5, 5], 3), vec![1, 2, 3]);
    }

    #[test]
    fn evaluation_on_hand_case() {
        let logits = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![3.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let features = Matrix::zeros(4, 1);
        let d = Dataset::new(features, vec![0, 0, 1, 1], Some(vec![0, 1, 2, 3]), 2, SplitTag::Test).unwrap();
        let e = evaluate_logits(&logits, &d, &[1]);
        assert_eq!(e.accuracy, 0.5);
        assert_eq!(e.per_class_accuracy, vec![0.5, 0.5]);
        assert_eq!(e.group_accuracy, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(e.worst_group_accuracy, 0.0);
        assert!(e.worst_group_accuracy <= e.accuracy);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
