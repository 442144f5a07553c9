//! K-nearest-neighbour evaluation of backbone features and forgetting metrics.
//!
//! Similarity is cosine (dot product of unit vectors). A query's label is the
//! class with the largest summed similarity among its `k` most similar stored
//! features; ties go to the smaller label id, and equal similarities are
//! ordered by stored index.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_K: usize = 20;

/// Unit-normalized reference features with labels.
#[derive(Clone, Debug)]
pub struct FeatureIndex {
    features: Tensor<f64>,
    labels: Vec<usize>,
    dim: usize,
}

fn normalized_rows<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, usize)> {
    if x.rank() != 2 {
        bail!(Shape, "expected [n, dim], got {:?}", x.shape());
    }
    let dim = x.shape()[1];
    let mut out = x.to_f64_vec();
    for (i, row) in out.chunks_exact_mut(dim).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm <= 0.0 {
            bail!(Input, "feature row {i} has zero or non-finite norm");
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok((out, dim))
}

impl FeatureIndex {
    pub fn build<T: Scalar>(features: &Tensor<T>, labels: &[usize]) -> Result<Self> {
        let (data, dim) = normalized_rows(features)?;
        let n = features.shape()[0];
        if labels.len() != n {
            bail!(Input, "{} labels for {n} features", labels.len());
        }
        Ok(FeatureIndex {
            features: Tensor::from_vec(&[n, dim], data)?,
            labels: labels.to_vec(),
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &Tensor<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Predicted label per query row.
    pub fn predict<T: Scalar>(&self, queries: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
        let n = self.len();
        if k == 0 || k > n {
            bail!(Input, "k = {k} must be in 1..={n}");
        }
        if queries.rank() != 2 || queries.shape()[1] != self.dim {
            bail!(
                Shape,
                "queries {:?} do not match feature width {}",
                queries.shape(),
                self.dim
            );
        }
        let (q, dim) = normalized_rows(queries)?;
        let stored = self.features.data();
        let num_labels = self.labels.iter().max().map_or(0, |m| m + 1);
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
        let mut votes = vec![0.0f64; num_labels];
        let mut out = Vec::with_capacity(q.len() / dim);
        for query in q.chunks_exact(dim) {
            order.clear();
            order.extend(stored.chunks_exact(dim).enumerate().map(|(i, row)| {
                let sim: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
                (sim, i)
            }));
            let by_similarity =
                |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if k < n {
                order.select_nth_unstable_by(k - 1, by_similarity);
            }
            votes.iter_mut().for_each(|v| *v = 0.0);
            for &(sim, i) in &order[..k] {
                votes[self.labels[i]] += sim;
            }
            let mut best = 0;
            for (label, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = label;
                }
            }
            // labels that received no neighbours never win over one that did
            if order[..k].iter().all(|&(_, i)| self.labels[i] != best) {
                best = order[..k]
                    .iter()
                    .map(|&(_, i)| self.labels[i])
                    .max_by(|&a, &b| votes[a].total_cmp(&votes[b]).then(b.cmp(&a)))
                    .expect("k >= 1");
            }
            out.push(best);
        }
        Ok(out)
    }
}

pub fn build_index<T: Scalar>(features: &Tensor<T>, labels: &[usize]) -> Result<FeatureIndex> {
    FeatureIndex::build(features, labels)
}

pub fn knn_predict<T: Scalar>(
    index: &FeatureIndex,
    queries: &Tensor<T>,
    k: usize,
) -> Result<Vec<usize>> {
    index.predict(queries, k)
}

/// Fraction of matching entries.
pub fn top1_accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        bail!(Input, "accuracy of an empty prediction list");
    }
    if predictions.len() != truth.len() {
        bail!(
            Input,
            "{} predictions vs {} labels",
            predictions.len(),
            truth.len()
        );
    }
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Unit of accuracy values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyUnit {
    Fraction,
    Percent,
}

impl AccuracyUnit {
    fn max(self) -> f64 {
        match self {
            AccuracyUnit::Fraction => 1.0,
            AccuracyUnit::Percent => 100.0,
        }
    }
}

/// Source-domain forgetting and the transfer/source mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRecord {
    pub source_acc_before: f64,
    pub source_acc_after: f64,
    pub transfer_acc: f64,
    pub drop: f64,
    pub mean: f64,
    pub unit: AccuracyUnit,
}

pub fn forgetting_report(
    source_before: f64,
    source_after: f64,
    transfer: f64,
    unit: AccuracyUnit,
) -> Result<ForgettingRecord> {
    for (name, v) in [
        ("source_before", source_before),
        ("source_after", source_after),
        ("transfer", transfer),
    ] {
        if !(0.0..=unit.max()).contains(&v) {
            bail!(
                Input,
                "{name} = {v} outside [0, {}] for unit {unit:?}",
                unit.max()
            );
        }
    }
    Ok(ForgettingRecord {
        source_acc_before: source_before,
        source_acc_after: source_after,
        transfer_acc: transfer,
        drop: source_before - source_after,
        mean: (transfer + source_after) / 2.0,
        unit,
    })
}

impl ForgettingRecord {
    /// Same record expressed in percent.
    pub fn to_percent(&self) -> ForgettingRecord {
        match self.unit {
            AccuracyUnit::Percent => *self,
            AccuracyUnit::Fraction => ForgettingRecord {
                source_acc_before: self.source_acc_before * 100.0,
                source_acc_after: self.source_acc_after * 100.0,
                transfer_acc: self.transfer_acc * 100.0,
                drop: self.drop * 100.0,
                mean: self.mean * 100.0,
                unit: AccuracyUnit::Percent,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: usize, d: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[n, d], v.to_vec()).unwrap()
    }

    #[test]
    fn build_normalizes() {
        let idx = build_index(&t(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]), &[0, 1, 2]).unwrap();
        assert_eq!(idx.len(), 3);
        let idx = build_index(&t(1, 2, &[3., 4.]), &[0]).unwrap();
        assert!((idx.features().data()[0] - 0.6).abs() < 1e-15);
        assert!((idx.features().data()[1] - 0.8).abs() < 1e-15);
        assert!(matches!(
            build_index(&t(1, 2, &[3., 4.]), &[0, 1]),
            Err(crate::Error::Input(_))
        ));
        assert!(matches!(
            build_index(&t(1, 2, &[0., 0.]), &[0]),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn prediction_examples() {
        let s = (0.9f64 * 0.9 + 0.1 * 0.1).sqrt();
        let idx = build_index(&t(3, 2, &[1., 0., 0., 1., 0.9 / s, 0.1 / s]), &[0, 1, 0]).unwrap();
        assert_eq!(idx.predict(&t(1, 2, &[0., 1.]), 1).unwrap(), vec![1]);
        assert_eq!(idx.predict(&t(1, 2, &[1., 0.]), 3).unwrap(), vec![0]);
        assert!(matches!(
            idx.predict(&t(1, 2, &[1., 0.]), 4),
            Err(crate::Error::Input(_))
        ));
        assert!(matches!(
            idx.predict(&t(1, 2, &[1., 0.]), 0),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn negative_similarity_votes_do_not_beat_absent_labels_wrongly() {
        // only label 1 neighbours, with negative similarity
        let idx = build_index(&t(2, 2, &[-1., 0., -1., 0.1]), &[1, 1]).unwrap();
        assert_eq!(idx.predict(&t(1, 2, &[1., 0.]), 2).unwrap(), vec![1]);
    }

    #[test]
    fn accuracy() {
        assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[0, 1, 0, 1], &[0, 0, 0, 0]).unwrap(), 0.5);
        assert!(top1_accuracy(&[], &[]).is_err());
        assert!(top1_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn forgetting_examples() {
        let r = forgetting_report(76.11, 74.61, 88.58, AccuracyUnit::Percent).unwrap();
        assert!((r.mean - 81.595).abs() < 1e-9);
        assert!((r.drop - 1.5).abs() < 1e-9);
        let r = forgetting_report(76.11, 25.24, 88.13, AccuracyUnit::Percent).unwrap();
        assert!((r.mean - 56.685).abs() < 1e-9);
        let r = forgetting_report(0.7, 0.7, 0.9, AccuracyUnit::Fraction).unwrap();
        assert_eq!(r.drop, 0.0);
        assert!(forgetting_report(0.7, 70.0, 0.9, AccuracyUnit::Fraction).is_err());
        assert!(forgetting_report(101.0, 70.0, 90.0, AccuracyUnit::Percent).is_err());
    }
}
