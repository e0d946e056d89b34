//! Batch-averaged losses for the three heads and their gradients.

use ndarray::{Array2, ArrayView2};

/// Mean squared height error.
pub fn loss_height(z: &[f64], z_gt: &[f64]) -> f64 {
    assert_eq!(z.len(), z_gt.len());
    if z.is_empty() {
        return 0.0;
    }
    height_sum(z, z_gt) / z.len() as f64
}

pub(crate) fn height_sum(z: &[f64], z_gt: &[f64]) -> f64 {
    z.iter().zip(z_gt).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Squared L2 color error summed over channels, averaged over the batch.
pub fn loss_color(c: &[[f64; 3]], c_gt: &[[f64; 3]]) -> f64 {
    assert_eq!(c.len(), c_gt.len());
    if c.is_empty() {
        return 0.0;
    }
    let sum: f64 = c
        .iter()
        .zip(c_gt)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum();
    sum / c.len() as f64
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[class]`, evaluated stably.
pub fn cross_entropy(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[class]
}

/// Softmax cross-entropy averaged over the rows of `logits`. Callers filter
/// out ignored samples beforehand.
pub fn loss_semantic(logits: ArrayView2<f64>, class_gt: &[u8]) -> f64 {
    assert_eq!(logits.nrows(), class_gt.len());
    if class_gt.is_empty() {
        return 0.0;
    }
    let sum: f64 = logits
        .rows()
        .into_iter()
        .zip(class_gt)
        .map(|(row, c)| cross_entropy(row.as_slice().expect("contiguous row"), *c as usize))
        .sum();
    sum / class_gt.len() as f64
}

/// Sum of cross-entropies over rows whose label is not `ignore`, and the
/// gradient of that sum w.r.t. the logits (ignored rows get zero).
pub(crate) fn semantic_sum_and_grad(
    logits: &Array2<f64>,
    labels: &[u8],
    ignore: u8,
) -> (f64, Array2<f64>, usize) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut sum = 0.0;
    let mut count = 0;
    for ((row, mut g), &label) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        if label == ignore {
            continue;
        }
        let row = row.as_slice().expect("contiguous row");
        sum += cross_entropy(row, label as usize);
        for (gk, pk) in g.iter_mut().zip(softmax(row)) {
            *gk = pk;
        }
        g[label as usize] -= 1.0;
        count += 1;
    }
    (sum, grad, count)
}

/// Per-stage loss values; the total is their plain sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub height: f64,
    pub color: f64,
    pub semantic: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.height + self.color + self.semantic
    }
}
