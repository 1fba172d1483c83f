//! Classification accuracy, tube overlap, recall curves and mean average
//! precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::tensor::Tensor;

/// Fraction of predictions whose argmax (lowest index on ties) equals the
/// label.
pub fn accuracy(predictions: &[Tensor], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, &l)| p.argmax() == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean per-frame IoU over the frames where either side has a box; a
/// missing box scores 0 for its frame. Frames beyond the shorter sequence
/// count as missing on that side. 0 when neither side has any box.
pub fn tube_iou(tube: &[Option<BoundingBox>], gt: &[Option<BoundingBox>]) -> f64 {
    let mut frames = 0usize;
    let mut total = 0.0;
    for t in 0..tube.len().max(gt.len()) {
        let a = tube.get(t).copied().flatten();
        let b = gt.get(t).copied().flatten();
        match (a, b) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                frames += 1;
                total += a.iou(&b);
            }
            _ => frames += 1,
        }
    }
    if frames == 0 {
        0.0
    } else {
        total / frames as f64
    }
}

/// One tube per video with a confidence per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video: usize,
    pub boxes: Vec<Option<BoundingBox>>,
    pub class_scores: Vec<f64>,
}

/// Ground truth of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: usize,
    pub boxes: Vec<Option<BoundingBox>>,
}

/// All-point interpolated average precision for `class`, or `None` when no
/// video of that class exists. Detections are ranked by descending
/// confidence with ties ordered by video id.
pub fn average_precision(
    detections: &[Detection],
    gts: &BTreeMap<usize, GroundTruth>,
    class: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let positives = gts.values().filter(|g| g.label == class).count();
    if positives == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, &Detection)> = detections
        .iter()
        .map(|d| (d.class_scores.get(class).copied().unwrap_or(0.0), d))
        .collect();
    ranked.sort_by_key(|(_, d)| d.video);
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut claimed = std::collections::BTreeSet::new();
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
    for (k, (_, d)) in ranked.iter().enumerate() {
        let hit = gts.get(&d.video).is_some_and(|g| {
            g.label == class && !claimed.contains(&d.video) && tube_iou(&d.boxes, &g.boxes) >= iou_threshold
        });
        if hit {
            claimed.insert(d.video);
            tp += 1;
        }
        curve.push((tp as f64 / positives as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope from the right, then area over recall steps.
    let mut ap = 0.0;
    let mut best = 0.0f64;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].1);
        let recall = curve[i].0;
        let below = if i == 0 { 0.0 } else { curve[i - 1].0 };
        if recall > below {
            ap += (recall - below) * best;
        }
    }
    Some(ap)
}

/// Mean of the defined per-class APs; classes without ground truth are
/// skipped with a warning.
pub fn mean_average_precision(
    detections: &[Detection],
    gts: &BTreeMap<usize, GroundTruth>,
    classes: usize,
    iou_threshold: f64,
) -> Result<f64> {
    let aps: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let ap = average_precision(detections, gts, c, iou_threshold);
            if ap.is_none() {
                log::warn!("class {c} has no ground truth; excluded from mAP");
            }
            ap
        })
        .collect();
    if aps.is_empty() {
        return Err(Error::Usage("no class has ground truth".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Fraction of ground-truth videos whose best detection reaches each
/// threshold.
pub fn recall_at_iou(detections: &[Detection], gts: &BTreeMap<usize, GroundTruth>, thresholds: &[f64]) -> Vec<(f64, f64)> {
    let best: Vec<f64> = gts
        .iter()
        .map(|(video, g)| {
            detections
                .iter()
                .filter(|d| d.video == *video)
                .map(|d| tube_iou(&d.boxes, &g.boxes))
                .fold(0.0, f64::max)
        })
        .collect();
    thresholds
        .iter()
        .map(|&thr| {
            let hits = best.iter().filter(|&&iou| iou >= thr).count();
            let recall = if best.is_empty() { 0.0 } else { hits as f64 / best.len() as f64 };
            (thr, recall)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdValue {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub map: Vec<ThresholdValue>,
    pub recall: Vec<ThresholdValue>,
    pub mean_tube_iou: Option<f64>,
}

impl EvalReport {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut out = format!("accuracy        {:.4}\n", self.accuracy);
        if let Some(iou) = self.mean_tube_iou {
            out.push_str(&format!("mean tube IoU   {iou:.4}\n"));
        }
        if !self.map.is_empty() {
            out.push_str("\nthreshold   mAP       recall\n");
            for (m, r) in self.map.iter().zip(&self.recall) {
                out.push_str(&format!("{:<11.2} {:<9.4} {:.4}\n", m.threshold, m.value, r.value));
            }
        }
        out
    }

    /// `threshold,recall` rows for plotting.
    pub fn recall_csv(&self) -> String {
        let mut out = String::from("threshold,recall\n");
        for r in &self.recall {
            out.push_str(&format!("{},{}\n", r.threshold, r.value));
        }
        out
    }
}
