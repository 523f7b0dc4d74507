//! Evaluation metrics: classification accuracy and per-class IoU.

use std::fmt;

#[derive(Debug)]
pub enum MetricsError {
    LengthMismatch { predictions: usize, labels: usize },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::LengthMismatch { predictions, labels } => {
                write!(f, "{} predictions against {} labels", predictions, labels)
            }
        }
    }
}

impl std::error::Error for MetricsError {}

pub fn accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64, MetricsError> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// IoU per class; `None` for classes absent from both predictions and
    /// labels (excluded from the mean).
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
}

/// IoU = TP / (TP + FP + FN) per class; the mean runs over classes present
/// in the union of predictions and labels.
pub fn iou_from_counts(tp: &[u64], fp: &[u64], fneg: &[u64]) -> IouReport {
    let mut per_class = Vec::with_capacity(tp.len());
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..tp.len() {
        let denom = tp[c] + fp[c] + fneg[c];
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp[c] as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            counted += 1;
        }
    }
    let mean_iou = if counted == 0 { 0.0 } else { sum / counted as f64 };
    IouReport { per_class, mean_iou }
}

pub fn intersection_over_union(
    predictions: &[u32],
    labels: &[u32],
    class_count: usize,
) -> Result<IouReport, MetricsError> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut tp = vec![0u64; class_count];
    let mut fp = vec![0u64; class_count];
    let mut fneg = vec![0u64; class_count];
    for (&p, &l) in predictions.iter().zip(labels) {
        let (p, l) = (p as usize, l as usize);
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    Ok(iou_from_counts(&tp, &fp, &fneg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [0, 1, 2, 1, 0];
        assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
        let report = intersection_over_union(&labels, &labels, 3).unwrap();
        assert_eq!(report.mean_iou, 1.0);
        assert!(report.per_class.iter().all(|c| *c == Some(1.0)));
    }

    #[test]
    fn complement_binary_predictions_score_zero() {
        let labels = [0, 1, 0, 1];
        let preds = [1, 0, 1, 0];
        let report = intersection_over_union(&preds, &labels, 2).unwrap();
        assert_eq!(report.per_class, vec![Some(0.0), Some(0.0)]);
        assert_eq!(report.mean_iou, 0.0);
    }

    #[test]
    fn hand_counted_three_class_case() {
        let report = iou_from_counts(&[5, 3, 0], &[1, 0, 4], &[2, 0, 3]);
        assert_eq!(report.per_class[0], Some(5.0 / 8.0));
        assert_eq!(report.per_class[1], Some(1.0));
        assert_eq!(report.per_class[2], Some(0.0));
        let expected = (5.0 / 8.0 + 1.0 + 0.0) / 3.0;
        assert_eq!(report.mean_iou, expected);
        assert!((report.mean_iou - 0.5417).abs() < 1e-4);
    }

    #[test]
    fn confusion_from_predictions_matches_direct_counting() {
        let preds = [0, 0, 1, 2, 2, 1];
        let labels = [0, 1, 1, 2, 0, 1];
        // class 0: TP 1, FP 1, FN 1; class 1: TP 2, FP 0, FN 1; class 2: TP 1, FP 1, FN 0
        let report = intersection_over_union(&preds, &labels, 3).unwrap();
        assert_eq!(report.per_class[0], Some(1.0 / 3.0));
        assert_eq!(report.per_class[1], Some(2.0 / 3.0));
        assert_eq!(report.per_class[2], Some(1.0 / 2.0));
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        let preds = [0, 0, 1];
        let labels = [0, 1, 1];
        let report = intersection_over_union(&preds, &labels, 4).unwrap();
        assert_eq!(report.per_class[2], None);
        assert_eq!(report.per_class[3], None);
        let expected = (0.5 + 0.5) / 2.0;
        assert!((report.mean_iou - expected).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(accuracy(&[0, 1], &[0]).is_err());
        assert!(intersection_over_union(&[0], &[0, 1], 2).is_err());
    }
}
