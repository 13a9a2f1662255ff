//! Confusion matrices and intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::{ClassId, Error, Result, UNLABELED};

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per point. Points whose ground truth is [`UNLABELED`] or
    /// in `ignore` are skipped.
    pub fn accumulate(&mut self, gt: &[ClassId], pred: &[ClassId], ignore: &[ClassId]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Argument(format!("{} ground-truth labels vs {} predictions", gt.len(), pred.len())));
        }
        let c = self.num_classes;
        for (i, (&g, &p)) in gt.iter().zip(pred).enumerate() {
            if g == UNLABELED || ignore.contains(&g) {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Argument(format!("point {i}: class ({g}, {p}) out of range for {c} classes")));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Argument(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes that never occur in
    /// either ground truth or predictions.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|j| self.get(j, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over classes with a defined IoU; NaN for an empty matrix.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.iou().into_iter().flatten().collect();
        if ious.is_empty() {
            f64::NAN
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn report(&self, class_names: &[&str]) -> MetricsReport {
        let iou = self.iou();
        let miou = self.miou();
        MetricsReport {
            miou: (!miou.is_nan()).then_some(miou),
            points: self.total(),
            classes: (0..self.num_classes)
                .map(|k| ClassIou {
                    class: class_names.get(k).map_or_else(|| k.to_string(), |s| s.to_string()),
                    iou: iou[k],
                    points: (0..self.num_classes).map(|j| self.get(k, j)).sum(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    pub iou: Option<f64>,
    /// Ground-truth points of this class.
    pub points: u64,
}

/// Serializable summary; `miou` is `null` when no class is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: Option<f64>,
    pub points: u64,
    pub classes: Vec<ClassIou>,
}

impl MetricsReport {
    /// One header row of class names, one row of percentages.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut head = format!("{:>6}", "mIoU");
        let mut row = format!("{:>6}", pct(self.miou));
        for c in &self.classes {
            let w = c.class.len().max(5);
            head += &format!(" {:>w$}", c.class);
            row += &format!(" {:>w$}", pct(c.iou));
        }
        format!("{head}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hand_example() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 0, 1, 2], &[0, 1, 1, 2], &[]).unwrap();
        let iou = cm.iou();
        assert_eq!(iou, vec![Some(0.5), Some(0.5), Some(1.0)]);
        assert_relative_eq!(cm.miou(), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let gt = [0, 1, 2, 2, 1];
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&gt, &gt, &[]).unwrap();
        for g in 0..4 {
            for p in 0..4 {
                if g != p {
                    assert_eq!(cm.get(g, p), 0);
                }
            }
        }
        assert_eq!(cm.miou(), 1.0);
        assert_eq!(cm.iou()[3], None);
    }

    #[test]
    fn ignored_points_and_empty_matrix() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[1, 1, UNLABELED], &[0, 2, 0], &[1]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.miou().is_nan());
        assert_eq!(cm.report(&["a", "b", "c"]).miou, None);
    }

    #[test]
    fn out_of_range_is_an_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(cm.accumulate(&[0], &[2], &[]), Err(Error::Argument(_))));
        assert!(matches!(cm.accumulate(&[0, 1], &[0], &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let gt = [0, 1, 2, 1, 0, 2, 2];
        let pred = [0, 2, 2, 1, 1, 0, 2];
        let mut whole = ConfusionMatrix::new(3);
        whole.accumulate(&gt, &pred, &[]).unwrap();
        let mut a = ConfusionMatrix::new(3);
        let mut b = ConfusionMatrix::new(3);
        a.accumulate(&gt[..3], &pred[..3], &[]).unwrap();
        b.accumulate(&gt[3..], &pred[3..], &[]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, whole);
        let json = serde_json::to_string(&whole.report(&["x", "y", "z"])).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, whole.report(&["x", "y", "z"]));
    }
}
