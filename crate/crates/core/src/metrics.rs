//! Detection and counting metrics.

use serde::{Deserialize, Serialize};

use crate::dataset::LabelSet;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ScoredBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountingRecord {
    pub predicted_count: usize,
    pub true_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mae,
    Rmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_at_50: f64,
    pub mae: f64,
    pub rmse: f64,
    pub mae_threshold: f64,
    pub rmse_threshold: f64,
    pub num_images: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationQuality {
    pub stage: u32,
    pub expanded: usize,
    pub correct: usize,
}

/// `0.05, 0.10, ..., 0.70`.
pub fn default_counting_grid() -> Vec<f64> {
    (1..=14).map(|i| i as f64 / 20.0).collect()
}

/// True-positive flags of all predictions in pooled rank order.
///
/// Predictions are ranked by score (ties by image index, then coordinates).
/// Each one claims the unmatched ground-truth box of its image with the
/// highest IoU at or above `iou_threshold`; the first box wins IoU ties.
pub fn match_detections(
    predictions: &[Vec<ScoredBox>],
    ground_truth: &[Vec<BBox>],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut pooled: Vec<(usize, ScoredBox)> = predictions
        .iter()
        .enumerate()
        .flat_map(|(img, preds)| preds.iter().map(move |p| (img, *p)))
        .collect();
    pooled.sort_by(|(ia, a), (ib, b)| {
        b.score
            .total_cmp(&a.score)
            .then(ia.cmp(ib))
            .then_with(|| a.bbox.lex_cmp(&b.bbox))
    });
    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    pooled
        .iter()
        .map(|(img, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in ground_truth[*img].iter().enumerate() {
                if matched[*img][j] {
                    continue;
                }
                let o = iou(&p.bbox, g);
                if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    matched[*img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Eleven-point interpolated average precision over the pooled detections of
/// all images.
pub fn average_precision(
    predictions: &[Vec<ScoredBox>],
    ground_truth: &[Vec<BBox>],
    iou_threshold: f64,
) -> Result<f64> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "iou threshold {iou_threshold} outside (0, 1]"
        )));
    }
    if predictions.len() > ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} ground-truth images",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let total: usize = ground_truth.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::NoGroundTruth);
    }
    let flags = match_detections(predictions, ground_truth, iou_threshold);
    let mut tp = 0usize;
    let curve: Vec<(f64, f64)> = flags
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            (tp as f64 / total as f64, tp as f64 / (k + 1) as f64)
        })
        .collect();
    Ok(eleven_point(&curve))
}

/// Mean over recall levels 0, 0.1, ..., 1 of the best precision at recall at
/// least that level. `curve` holds `(recall, precision)` pairs.
pub fn eleven_point(curve: &[(f64, f64)]) -> f64 {
    // suffix maxima of precision, scanned from high recall to low
    let mut envelope = vec![0.0; curve.len()];
    let mut best: f64 = 0.0;
    for (i, &(_, p)) in curve.iter().enumerate().rev() {
        best = best.max(p);
        envelope[i] = best;
    }
    let mut sum = 0.0;
    for level in (0..=10).map(|r| r as f64 / 10.0) {
        // recall is non-decreasing along the curve
        let first = curve.partition_point(|&(r, _)| r < level);
        if first < curve.len() {
            sum += envelope[first];
        }
    }
    sum / 11.0
}

/// `(mae, rmse)`, with RMSE the root of the mean squared count error.
pub fn counting_errors(records: &[CountingRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let n = records.len() as f64;
    let (abs, sq) = records.iter().fold((0.0, 0.0), |(a, s), r| {
        let d = r.predicted_count as f64 - r.true_count as f64;
        (a + d.abs(), s + d * d)
    });
    Ok((abs / n, (sq / n).sqrt()))
}

pub fn count_at(predictions: &[ScoredBox], threshold: f64) -> usize {
    predictions.iter().filter(|p| p.score >= threshold).count()
}

/// Grid threshold with the lowest counting error; the smallest threshold wins
/// ties. Returns `(threshold, objective value)`.
pub fn select_counting_threshold(
    predictions: &[Vec<ScoredBox>],
    true_counts: &[usize],
    grid: &[f64],
    objective: Objective,
) -> Result<(f64, f64)> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "counting grid must be non-empty and strictly increasing".into(),
        ));
    }
    if predictions.len() != true_counts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} true counts",
            predictions.len(),
            true_counts.len()
        )));
    }
    let mut best: Option<(f64, f64)> = None;
    for &t in grid {
        let records: Vec<CountingRecord> = predictions
            .iter()
            .zip(true_counts)
            .map(|(p, &true_count)| CountingRecord {
                predicted_count: count_at(p, t),
                true_count,
            })
            .collect();
        let (mae, rmse) = counting_errors(&records)?;
        let value = match objective {
            Objective::Mae => mae,
            Objective::Rmse => rmse,
        };
        if best.is_none_or(|(_, v)| value < v) {
            best = Some((t, value));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Counts how many label boxes overlap some ground-truth box with IoU above
/// `iou_threshold`. One ground-truth box may validate several label boxes.
pub fn propagation_quality(
    labels: &LabelSet,
    full_ground_truth: &[BBox],
    iou_threshold: f64,
) -> PropagationQuality {
    let correct = labels
        .bboxes()
        .filter(|b| full_ground_truth.iter().any(|g| iou(b, g) > iou_threshold))
        .count();
    PropagationQuality {
        stage: labels.stage,
        expanded: labels.len(),
        correct,
    }
}
