//! Evaluation metrics over label sequences and partitions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {truth} truth vs {predicted} predicted")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("no samples")]
    Empty,
}

fn check_lengths(truth: usize, predicted: usize) -> Result<(), MetricsError> {
    if truth != predicted {
        return Err(MetricsError::LengthMismatch { truth, predicted });
    }
    if truth == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn accuracy<T: PartialEq>(truth: &[T], predicted: &[T]) -> Result<f64, MetricsError> {
    check_lengths(truth.len(), predicted.len())?;
    let hits = truth.iter().zip(predicted).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Rows are truth labels, columns predictions; both in `labels` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub samples: usize,
    pub accuracy: f64,
    /// Mean F1 over labels that occur in the truth sequence.
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
    pub confusion: ConfusionMatrix,
}

pub fn confusion_matrix(truth: &[String], predicted: &[String]) -> Result<ConfusionMatrix, MetricsError> {
    check_lengths(truth.len(), predicted.len())?;
    let labels: Vec<String> = truth.iter().chain(predicted).cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut counts = vec![vec![0; labels.len()]; labels.len()];
    for (t, p) in truth.iter().zip(predicted) {
        counts[index[t.as_str()]][index[p.as_str()]] += 1;
    }
    Ok(ConfusionMatrix { labels, counts })
}

pub fn classification_report(truth: &[String], predicted: &[String]) -> Result<ClassificationReport, MetricsError> {
    let confusion = confusion_matrix(truth, predicted)?;
    let n = confusion.labels.len();
    let mut per_class = Vec::new();
    for i in 0..n {
        let support: usize = confusion.counts[i].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = confusion.counts[i][i];
        let predicted_i: usize = (0..n).map(|r| confusion.counts[r][i]).sum();
        let precision = if predicted_i == 0 { 0.0 } else { tp as f64 / predicted_i as f64 };
        let recall = tp as f64 / support as f64;
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        per_class.push(ClassScore { label: confusion.labels[i].clone(), precision, recall, f1, support });
    }
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    Ok(ClassificationReport { samples: truth.len(), accuracy: accuracy(truth, predicted)?, macro_f1, per_class, confusion })
}

fn pairs(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two partitions given as per-item assignments.
/// Two trivial partitions that agree score 1.
pub fn adjusted_rand_index<A, B>(a: &[A], b: &[B]) -> Result<f64, MetricsError>
where
    A: Eq + Hash,
    B: Eq + Hash,
{
    check_lengths(a.len(), b.len())?;
    let mut table: HashMap<(&A, &B), u64> = HashMap::new();
    let mut rows: HashMap<&A, u64> = HashMap::new();
    let mut cols: HashMap<&B, u64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let expected = sum_a * sum_b / pairs(a.len() as u64).max(f64::MIN_POSITIVE);
    let max = (sum_a + sum_b) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return Ok(if (index - expected).abs() < 1e-12 { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Share of items whose cluster's majority truth label matches their own.
pub fn purity<C, T>(clusters: &[C], truth: &[T]) -> Result<f64, MetricsError>
where
    C: Ord,
    T: Ord,
{
    check_lengths(truth.len(), clusters.len())?;
    let mut by_cluster: BTreeMap<&C, BTreeMap<&T, usize>> = BTreeMap::new();
    for (c, t) in clusters.iter().zip(truth) {
        *by_cluster.entry(c).or_default().entry(t).or_default() += 1;
    }
    let majority: usize = by_cluster.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / clusters.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentiles.
pub fn latency_summary(samples_ms: &[f64]) -> Option<LatencySummary> {
    if samples_ms.is_empty() {
        return None;
    }
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
    Some(LatencySummary {
        samples: s.len(),
        mean_ms: s.iter().sum::<f64>() / s.len() as f64,
        p50_ms: rank(0.5),
        p95_ms: rank(0.95),
        max_ms: s[s.len() - 1],
    })
}
