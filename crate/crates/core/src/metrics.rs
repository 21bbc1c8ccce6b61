//! Pixel accuracy and mean intersection-over-union over confusion matrices.
//!
//! The confusion matrix counts `p[i][j]` = pixels of true class `i` predicted
//! as class `j`. Ground-truth pixels carrying the ignore label (255) are
//! skipped entirely; they contribute to neither metric.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row-major `num_classes x num_classes`; entry `(i, j)` counts pixels of
    /// true class `i` predicted as class `j`.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.num_classes + pred_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one prediction/ground-truth pair. Pixels with ground truth
    /// 255 are skipped; any other out-of-range value is an error, as is any
    /// out-of-range or ignore value in the prediction.
    pub fn accumulate(&mut self, pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::validation(format!(
                "prediction {}x{} and ground truth {}x{} differ in shape",
                pred.dim().0,
                pred.dim().1,
                gt.dim().0,
                gt.dim().1
            )));
        }
        let n = self.num_classes;
        for (p, g) in pred.iter().zip(gt.iter()) {
            let g = usize::from(*g);
            if g == usize::from(IGNORE_LABEL) {
                continue;
            }
            let p = usize::from(*p);
            if g >= n {
                return Err(Error::validation(format!(
                    "ground-truth class {g} out of range for {n} classes"
                )));
            }
            if p >= n {
                return Err(Error::validation(format!(
                    "predicted class {p} out of range for {n} classes (255 is not a valid prediction)"
                )));
            }
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    /// Entrywise addition; matrices accumulated on separate shards merge into
    /// the same counts as a single sequential pass.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::validation(format!(
                "cannot merge confusion matrices with {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
        Ok(())
    }

    /// Fraction of scored pixels predicted correctly.
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::validation(
                "cannot compute accuracy of an empty confusion matrix",
            ));
        }
        let diag: u64 = (0..self.num_classes).map(|i| self.count(i, i)).sum();
        Ok(diag as f64 / total as f64)
    }

    /// Per-class IoU: `p_ii / (sum_j p_ij + sum_j p_ji - p_ii)`. Classes whose
    /// union is zero (absent from both prediction and ground truth) yield
    /// `None` and are excluded from the mean.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|i| {
                let row: u64 = (0..n).map(|j| self.count(i, j)).sum();
                let col: u64 = (0..n).map(|j| self.count(j, i)).sum();
                let union = row + col - self.count(i, i);
                if union == 0 {
                    None
                } else {
                    Some(self.count(i, i) as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes with non-zero union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::validation(
                "cannot compute mIoU: every class has zero union",
            ));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn report(&self) -> Result<MetricReport> {
        Ok(MetricReport {
            accuracy: self.accuracy()?,
            miou: self.miou()?,
            per_class_iou: self.per_class_iou(),
            total_pixels: self.total(),
            confusion: self.clone(),
        })
    }
}

/// Evaluation summary: Acc, mIoU, per-class IoU and the matrix they were
/// computed from, so reports can always be replayed for consistency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub total_pixels: u64,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    /// Recompute every metric from the stored confusion matrix and check it
    /// matches what the report claims.
    pub fn is_consistent(&self) -> bool {
        match (self.confusion.accuracy(), self.confusion.miou()) {
            (Ok(acc), Ok(miou)) => {
                acc == self.accuracy
                    && miou == self.miou
                    && self.confusion.per_class_iou() == self.per_class_iou
                    && self.confusion.total() == self.total_pixels
            }
            _ => false,
        }
    }
}
