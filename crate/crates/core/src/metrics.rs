//! Generalized zero-shot evaluation: pixel accuracy, per-class IoU, seen and
//! unseen mIoU, and their harmonic mean.

use crate::error::{Error, Result};

/// Class-by-class pixel counts. Rows index ground truth, columns prediction;
/// ignore-labeled pixels are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize, n: u64) {
        self.counts[gt * self.classes + pred] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one predicted/ground-truth map pair, skipping pixels whose
    /// ground truth equals `ignore_index`.
    pub fn accumulate(
        &mut self,
        predicted: &[usize],
        labels: &[u8],
        ignore_index: u8,
    ) -> Result<()> {
        if predicted.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "ConfusionMatrix::accumulate",
                lhs: vec![predicted.len()],
                rhs: vec![labels.len()],
            });
        }
        for (&p, &l) in predicted.iter().zip(labels) {
            if l == ignore_index {
                continue;
            }
            let gt = l as usize;
            if gt >= self.classes || p >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: gt.max(p),
                    classes: self.classes,
                    ignore: ignore_index as usize,
                });
            }
            self.counts[gt * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Merge another matrix by addition (associative and commutative, so
    /// per-worker matrices can be combined in any order).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Evaluation summary. All values are fractions in [0, 1]; multiply by 100
/// for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pixel_accuracy: f64,
    /// Per-class IoU; `None` for classes absent from both prediction and
    /// ground truth (excluded from the means).
    pub iou_per_class: Vec<Option<f64>>,
    pub miou_seen: f64,
    pub miou_unseen: f64,
    pub hiou: f64,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Compute the report from an accumulated matrix and the seen/unseen split.
pub fn compute(cm: &ConfusionMatrix, seen_mask: &[bool]) -> Result<EvalReport> {
    let c = cm.classes();
    assert_eq!(seen_mask.len(), c);
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyConfusionMatrix);
    }

    let mut iou = vec![None; c];
    let mut trace = 0u64;
    for k in 0..c {
        let diag = cm.count(k, k);
        trace += diag;
        let row: u64 = (0..c).map(|j| cm.count(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.count(i, k)).sum();
        let union = row + col - diag;
        if union > 0 {
            iou[k] = Some(diag as f64 / union as f64);
        }
    }

    let mean_over = |want_seen: bool| -> f64 {
        let vals: Vec<f64> = (0..c)
            .filter(|&k| seen_mask[k] == want_seen)
            .filter_map(|k| iou[k])
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let s = mean_over(true);
    let u = mean_over(false);

    Ok(EvalReport {
        pixel_accuracy: trace as f64 / total as f64,
        iou_per_class: iou,
        miou_seen: s,
        miou_unseen: u,
        hiou: harmonic_mean(s, u),
    })
}
