//! Segmentation IoU and detection average precision.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::detection::{box_iou, Box3D};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{pred} predictions for {gt} ground-truth labels")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("label {label} at point {index} is outside 0..{classes}")]
    LabelOutOfRange { index: usize, label: i32, classes: usize },
    #[error("non-finite confidence for prediction {0}")]
    Confidence(usize),
}

/// Rows are ground truth, columns predictions. Points with ground truth −1
/// are skipped; predictions of −1 are counted per ground-truth class as
/// missed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_labels(pred: &[i32], gt: &[i32], num_classes: usize) -> Result<Self, MetricsError> {
        if pred.len() != gt.len() {
            return Err(MetricsError::LengthMismatch {
                pred: pred.len(),
                gt: gt.len(),
            });
        }
        let check = |index: usize, label: i32| {
            if label < -1 || label >= num_classes as i32 {
                Err(MetricsError::LabelOutOfRange {
                    index,
                    label,
                    classes: num_classes,
                })
            } else {
                Ok(())
            }
        };
        let mut m = ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            missed: vec![0; num_classes],
        };
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            check(i, p)?;
            check(i, g)?;
            if g < 0 {
                continue;
            }
            if p < 0 {
                m.missed[g as usize] += 1;
            } else {
                m.counts[g as usize * num_classes + p as usize] += 1;
            }
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn missed(&self, gt: usize) -> u64 {
        self.missed[gt]
    }

    /// Evaluated points, including missed ones.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    pub fn gt_count(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum::<u64>() + self.missed[c]
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never appears.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let fp: u64 = (0..self.num_classes).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
        let fn_ = self.gt_count(c) - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth; `None` when there are
    /// none.
    pub mean: Option<f64>,
}

pub fn miou(pred: &[i32], gt: &[i32], num_classes: usize) -> Result<MiouReport, MetricsError> {
    let cm = ConfusionMatrix::from_labels(pred, gt, num_classes)?;
    Ok(miou_from_confusion(&cm))
}

pub fn miou_from_confusion(cm: &ConfusionMatrix) -> MiouReport {
    let per_class: Vec<Option<f64>> = (0..cm.num_classes()).map(|c| cm.iou(c)).collect();
    let present: Vec<f64> = (0..cm.num_classes())
        .filter(|&c| cm.gt_count(c) > 0)
        .map(|c| per_class[c].unwrap_or(0.0))
        .collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    MiouReport { per_class, mean }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    /// AP per ground-truth class.
    pub per_class: BTreeMap<i32, f64>,
    pub mean: Option<f64>,
}

/// Greedy matching per class by descending confidence, all-point
/// interpolated area under the precision–recall curve.
pub fn average_precision(
    predictions: &[(Box3D, f64)],
    ground_truth: &[Box3D],
    iou_threshold: f64,
) -> Result<ApReport, MetricsError> {
    if let Some(i) = predictions.iter().position(|(_, c)| !c.is_finite()) {
        return Err(MetricsError::Confidence(i));
    }
    let classes: BTreeSet<i32> = ground_truth.iter().map(|b| b.class_id).collect();
    let mut per_class = BTreeMap::new();
    for &class in &classes {
        let gts: Vec<&Box3D> = ground_truth.iter().filter(|b| b.class_id == class).collect();
        let mut preds: Vec<(usize, f64)> = predictions
            .iter()
            .enumerate()
            .filter(|(_, (b, _))| b.class_id == class)
            .map(|(i, (_, c))| (i, *c))
            .collect();
        preds.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut matched = vec![false; gts.len()];
        let mut tp = Vec::with_capacity(preds.len());
        for &(i, _) in &preds {
            let pb = &predictions[i].0;
            let mut best: Option<(usize, f64)> = None;
            for (g, gb) in gts.iter().enumerate() {
                if matched[g] {
                    continue;
                }
                let iou = box_iou(pb, gb);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    matched[g] = true;
                    tp.push(true);
                }
                None => tp.push(false),
            }
        }
        per_class.insert(class, ap_from_matches(&tp, gts.len()));
    }
    let mean = (!per_class.is_empty()).then(|| per_class.values().sum::<f64>() / per_class.len() as f64);
    Ok(ApReport { per_class, mean })
}

/// All-point interpolated AP from a ranked true/false-positive sequence.
pub fn ap_from_matches(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..recall.len() {
        ap += (recall[k] - prev_recall) * precision[k];
        prev_recall = recall[k];
    }
    ap
}
