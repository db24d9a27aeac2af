//! Scoring a trained model on a test set.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;
use crate::detector::{predict_many, GridModel};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ScoredBox};
use crate::metrics::{average_precision, default_counting_grid, select_counting_threshold, EvalReport, Objective};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// IoU for a detection to match a ground-truth box.
    pub match_iou: f64,
    /// Lowest score kept in the prediction lists AP is computed from.
    pub score_floor: f64,
    pub nms_iou: f64,
    pub counting_grid: Vec<f64>,
    pub test_area: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            match_iou: 0.5,
            score_floor: 0.005,
            nms_iou: 0.2,
            counting_grid: default_counting_grid(),
            test_area: None,
        }
    }
}

/// Runs the model on every record and scores the predictions. Returns the
/// report and the per-image predictions.
pub fn evaluate_model(
    model: &GridModel,
    records: &[ImageRecord],
    config: &EvalConfig,
) -> Result<(EvalReport, Vec<Vec<ScoredBox>>)> {
    let images: Vec<_> = records.iter().map(|r| &r.image).collect();
    let predictions = predict_many(&images, model, config.score_floor, config.nms_iou, config.test_area);
    let truth: Vec<Vec<BBox>> = records.iter().map(|r| r.boxes.clone()).collect();
    let report = evaluate_predictions(&predictions, &truth, config)?;
    Ok((report, predictions))
}

pub fn evaluate_predictions(
    predictions: &[Vec<ScoredBox>],
    ground_truth: &[Vec<BBox>],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if ground_truth.is_empty() {
        return Err(Error::InvalidArgument("no test images".into()));
    }
    if predictions.len() != ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} test images",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let map_at_50 = average_precision(predictions, ground_truth, config.match_iou)?;
    let counts: Vec<usize> = ground_truth.iter().map(Vec::len).collect();
    let grid = &config.counting_grid;
    let (mae_threshold, mae) = select_counting_threshold(predictions, &counts, grid, Objective::Mae)?;
    let (rmse_threshold, rmse) = select_counting_threshold(predictions, &counts, grid, Objective::Rmse)?;
    Ok(EvalReport {
        map_at_50,
        mae,
        rmse,
        mae_threshold,
        rmse_threshold,
        num_images: ground_truth.len(),
    })
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub image: String,
    pub boxes: Vec<ScoredBox>,
}

pub fn write_predictions(path: &Path, lines: &[PredictionLine]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Annotation {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_serializes_flat() {
        let r = EvalReport {
            map_at_50: 0.5,
            mae: 1.0,
            rmse: 2.0,
            mae_threshold: 0.3,
            rmse_threshold: 0.35,
            num_images: 4,
        };
        let v: serde_json::Value = serde_json::to_value(r).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 6);
        for k in ["map_at_50", "mae", "rmse", "mae_threshold", "rmse_threshold", "num_images"] {
            assert!(keys.contains(&k), "{k}");
        }
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let gt = vec![
            vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 0.0, 10.0, 10.0)],
            vec![BBox::new(5.0, 5.0, 10.0, 10.0)],
        ];
        let preds: Vec<Vec<ScoredBox>> = gt
            .iter()
            .map(|g| g.iter().map(|&b| ScoredBox::new(b, 0.9)).collect())
            .collect();
        let r = evaluate_predictions(&preds, &gt, &EvalConfig::default()).unwrap();
        assert_eq!((r.map_at_50, r.mae, r.rmse), (1.0, 0.0, 0.0));
        assert_eq!(r.num_images, 2);
    }

    #[test]
    fn predictions_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        let lines = vec![PredictionLine {
            image: "a.pgm".into(),
            boxes: vec![ScoredBox::new(BBox::new(1.0, 2.0, 3.0, 4.0), 0.25)],
        }];
        write_predictions(&p, &lines).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), lines);
        assert!(fs::read_to_string(&p).unwrap().contains(r#""score":0.25"#));
    }
}
