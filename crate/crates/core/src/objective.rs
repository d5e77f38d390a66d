//! Losses and evaluation metrics: cross-entropy, the distance-weighted
//! long-range loss, accuracy, and macro mean average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

/// Settings of the distance-weighted loss.
///
/// Each sample's cross-entropy is multiplied by
/// `1 + alpha * (d - b0) / (b1 - b0)`, so that far-away samples weigh more.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongLossParams {
    pub alpha: f64,
    /// Near threshold in meters.
    pub b0: f64,
    /// Far threshold in meters.
    pub b1: f64,
    /// Clamp distances into `[b0, b1]` before weighting.
    pub clamp_distance: bool,
}

impl Default for LongLossParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            b0: 4.0,
            b1: 20.0,
            clamp_distance: true,
        }
    }
}

impl LongLossParams {
    pub fn new(alpha: f64, b0: f64, b1: f64, clamp_distance: bool) -> Result<Self> {
        let p = Self {
            alpha,
            b0,
            b1,
            clamp_distance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b1 > self.b0) {
            return Err(Error::invalid(format!(
                "long loss thresholds need b1 > b0, got b0={}, b1={}",
                self.b0, self.b1
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Plain cross-entropy expressed as the loss with zero distance weighting.
    pub fn plain_ce() -> Self {
        Self {
            alpha: 0.0,
            ..Self::default()
        }
    }

    /// Per-sample weight for distance `d` meters.
    pub fn weight(&self, d: f64) -> f64 {
        let d = if self.clamp_distance {
            d.clamp(self.b0, self.b1)
        } else {
            d
        };
        1.0 + self.alpha * (d - self.b0) / (self.b1 - self.b0)
    }
}

/// A scored batch: logits `[b, m]`, labels and distances.
#[derive(Debug, Clone)]
pub struct Batch<'a, T: Scalar> {
    pub logits: &'a Tensor<T>,
    pub labels: &'a [usize],
    pub distances: &'a [f64],
}

impl<T: Scalar> Batch<'_, T> {
    fn dims(&self) -> Result<(usize, usize)> {
        let (b, m) = match self.logits.shape() {
            [b, m] => (*b, *m),
            s => return Err(Error::shape("long_loss", format!("logits must be [B, m], got {s:?}"))),
        };
        if self.labels.len() != b || self.distances.len() != b {
            return Err(Error::shape(
                "long_loss",
                format!(
                    "{b} logit rows, {} labels, {} distances",
                    self.labels.len(),
                    self.distances.len()
                ),
            ));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= m) {
            return Err(Error::invalid(format!("label {l} out of range for {m} classes")));
        }
        if let Some(&d) = self.distances.iter().find(|&&d| !(d > 0.0)) {
            return Err(Error::invalid(format!("distance must be positive, got {d}")));
        }
        Ok((b, m))
    }
}

/// `-ln softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> T {
    log_sum_exp(logits) - logits[label]
}

/// Mean per-sample cross-entropy of a batch.
pub fn mean_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let distances = vec![1.0; labels.len()];
    let batch = Batch {
        logits,
        labels,
        distances: &distances,
    };
    let (b, m) = batch.dims()?;
    let total = (0..b)
        .map(|i| cross_entropy(&logits.data()[i * m..(i + 1) * m], labels[i]))
        .fold(T::zero(), |acc, v| acc + v);
    Ok(total / T::from_usize(b).expect("usize fits"))
}

/// Distance-weighted loss value `(1/B) Σ CE_i · w_i`.
pub fn long_loss<T: Scalar>(batch: &Batch<'_, T>, p: &LongLossParams) -> Result<T> {
    p.validate()?;
    let (b, m) = batch.dims()?;
    let total = (0..b)
        .map(|i| {
            let ce = cross_entropy(&batch.logits.data()[i * m..(i + 1) * m], batch.labels[i]);
            ce * T::from_f64_lossy(p.weight(batch.distances[i]))
        })
        .fold(T::zero(), |acc, v| acc + v);
    Ok(total / T::from_usize(b).expect("usize fits"))
}

/// Graph form of [`long_loss`]; the distance weights enter as constants.
pub fn long_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[usize],
    distances: &[f64],
    p: &LongLossParams,
) -> Result<NodeId> {
    p.validate()?;
    let b = labels.len();
    if distances.len() != b {
        return Err(Error::shape(
            "long_loss",
            format!("{b} labels but {} distances", distances.len()),
        ));
    }
    if let Some(&d) = distances.iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::invalid(format!("distance must be positive, got {d}")));
    }
    let ce = g.cross_entropy(logits, labels)?;
    let weights = Tensor::new(
        vec![b],
        distances.iter().map(|&d| T::from_f64_lossy(p.weight(d))).collect(),
    )?;
    let w = g.constant(weights);
    let weighted = g.mul(ce, w)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, T::one() / T::from_usize(b).expect("usize fits")))
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// One-vs-rest average precision of one class.
///
/// Samples are ranked by descending score (ties: lower sample index first);
/// AP is the mean of precision@r over the ranks r holding positives.
/// Returns `None` when the class has no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Macro mean of per-class AP over classes that have at least one positive.
pub fn mean_average_precision<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, m) = match scores.shape() {
        [n, m] => (*n, *m),
        s => return Err(Error::shape("mean_average_precision", format!("scores must be [N, m], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(
            "mean_average_precision",
            format!("{n} score rows vs {} labels", labels.len()),
        ));
    }
    let mut total = 0.0;
    let mut classes = 0usize;
    for c in 0..m {
        let col: Vec<f64> = (0..n).map(|i| scores.data()[i * m + c].as_f64()).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(ap) = average_precision(&col, &pos) {
            total += ap;
            classes += 1;
        }
    }
    if classes == 0 {
        return Err(Error::invalid("no class has a positive sample"));
    }
    Ok(total / classes as f64)
}
