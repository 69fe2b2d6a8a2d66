//! Classification and segmentation metrics, attention maps and GradCAM.

mod maps;
mod pgm;

pub use maps::{
    binarize_map, extract_attention_map, final_layer_activations, final_layer_similarity,
    foreground_mass, gradcam_map, upsample, AttentionMap, GradCam, TokenSelector,
};
pub use pgm::{pgm_bytes, write_pgm};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `2ab / (a + b)`; both inputs must be positive and on the same scale.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "harmonic mean needs positive inputs, got {a} and {b}"
        )));
    }
    Ok(2.0 * a * b / (a + b))
}

/// Harmonic mean for reports: zero when either accuracy is zero.
pub fn report_harmonic_mean(a: f64, b: f64) -> f64 {
    harmonic_mean(a, b).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub pix_acc: f64,
    pub miou: f64,
    pub map: f64,
}

impl SegmentationMetrics {
    /// Per-image average.
    pub fn mean(items: &[SegmentationMetrics]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument(
                "no segmentation results to average".into(),
            ));
        }
        let n = items.len() as f64;
        Ok(Self {
            pix_acc: items.iter().map(|m| m.pix_acc).sum::<f64>() / n,
            miou: items.iter().map(|m| m.miou).sum::<f64>() / n,
            map: items.iter().map(|m| m.map).sum::<f64>() / n,
        })
    }
}

fn iou(intersection: usize, union: usize) -> f64 {
    // An absent class that is also never predicted counts as perfectly segmented.
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

/// Area under the precision-recall curve, stepping through every distinct score.
/// Tied scores enter together. Defined as 1 when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() || scores.is_empty() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Ok(1.0);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Pixel accuracy, two-class mean IoU and heatmap average precision for one image.
pub fn segmentation_metrics(
    heatmap: &[f64],
    pred: &Mask,
    gt: &Mask,
) -> Result<SegmentationMetrics> {
    if (pred.rows(), pred.cols()) != (gt.rows(), gt.cols()) || heatmap.len() != gt.bits().len() {
        return Err(Error::Shape(format!(
            "prediction {}x{}, ground truth {}x{}, heatmap of {} values",
            pred.rows(),
            pred.cols(),
            gt.rows(),
            gt.cols(),
            heatmap.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let n = (tp + fp + fn_ + tn) as f64;
    Ok(SegmentationMetrics {
        pix_acc: (tp + tn) as f64 / n,
        miou: (iou(tp, tp + fp + fn_) + iou(tn, tn + fp + fn_)) / 2.0,
        map: average_precision(heatmap, gt.bits())?,
    })
}
