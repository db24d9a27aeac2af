//! Stage-wise label propagation.
//!
//! Stage `s` trains a gated detector on the label sets `L^s`, predicts on the
//! original training images and merges confident detections that do not
//! overlap known labels into `L^{s+1}`. After the last stage a detector is
//! trained with the plain loss on the expanded labels.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset::{ImageRecord, LabelSet, LabeledBox, Provenance};
use crate::detector::{predict, predict_many, GridModel};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ScoredBox};
use crate::metrics::{propagation_quality, PropagationQuality};
use crate::training::{fresh_model, train, LossMode, TrainConfig, TrainState};

/// IoU above which a label box counts as a correct propagation.
pub const QUALITY_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSchedule {
    pub num_stages: usize,
    pub merge_score: f64,
    pub merge_iou: f64,
    pub nms_iou: f64,
    /// Continue each stage from the previous stage's weights instead of a
    /// fresh initialization.
    pub warm_start: bool,
    pub stage_training: TrainConfig,
    pub final_training: TrainConfig,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            num_stages: 9,
            merge_score: 0.9,
            merge_iou: 0.2,
            nms_iou: 0.2,
            warm_start: false,
            stage_training: TrainConfig::default(),
            final_training: TrainConfig::default(),
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("merge_score", self.merge_score),
            ("merge_iou", self.merge_iou),
            ("nms_iou", self.nms_iou),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside (0, 1]")));
            }
        }
        self.stage_training.validate()?;
        self.final_training.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    /// Label-set stage the qualities describe; `num_stages + 1` is the set
    /// the final detector trains on.
    pub stage: u32,
    pub model_checksum: String,
    pub images: Vec<String>,
    /// `correct` is only meaningful when full ground truth was available.
    pub quality: Vec<PropagationQuality>,
    pub has_ground_truth: bool,
}

impl StageLog {
    pub fn median_correct(&self) -> f64 {
        let mut v: Vec<usize> = self.quality.iter().map(|q| q.correct).collect();
        v.sort_unstable();
        match v.len() {
            0 => 0.0,
            n if n % 2 == 1 => v[n / 2] as f64,
            n => (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0,
        }
    }

    pub fn total_expanded(&self) -> usize {
        self.quality.iter().map(|q| q.expanded).sum()
    }
}

/// Greedy merge of confident detections into a label set.
///
/// Predictions are visited by descending score. One is accepted when its
/// score reaches `merge_score` and its IoU with every box of `current` and
/// every previously accepted prediction is at most `merge_iou`. The result is
/// stage `current.stage + 1`; existing boxes are always kept.
pub fn merge_labels(
    current: &LabelSet,
    predictions: &[ScoredBox],
    merge_score: f64,
    merge_iou: f64,
) -> LabelSet {
    let mut order: Vec<&ScoredBox> = predictions.iter().collect();
    order.sort_by(|a, b| a.rank_cmp(b));
    let mut accepted: Vec<BBox> = Vec::new();
    for p in order {
        if p.score < merge_score {
            continue;
        }
        let clear = |b: &BBox| iou(&p.bbox, b) <= merge_iou;
        if current.bboxes().all(clear) && accepted.iter().all(clear) {
            accepted.push(p.bbox);
        }
    }
    let mut boxes = current.boxes.clone();
    boxes.extend(accepted.into_iter().map(|bbox| LabeledBox {
        bbox,
        provenance: Provenance::Propagated(current.stage),
    }));
    LabelSet {
        image_id: current.image_id.clone(),
        stage: current.stage + 1,
        boxes,
    }
}

/// Detections at or above `threshold` after NMS at `nms_iou`.
pub fn count_image(
    image: &crate::image::Image,
    model: &GridModel,
    threshold: f64,
    nms_iou: f64,
) -> (usize, Vec<ScoredBox>) {
    let boxes = predict(image, model, threshold, nms_iou);
    (boxes.len(), boxes)
}

#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub final_model: GridModel,
    pub final_labels: Vec<LabelSet>,
    pub logs: Vec<StageLog>,
    /// Gated cells seen by the final (plain-loss) training; always 0.
    pub final_gated_cells: u64,
}

fn stage_config(base: &TrainConfig, stage: usize) -> TrainConfig {
    TrainConfig {
        rng_seed: base.rng_seed.wrapping_add(stage as u64),
        ..base.clone()
    }
}

fn log_stage(
    stage: u32,
    model: &GridModel,
    train_set: &[(ImageRecord, LabelSet)],
    labels: &[LabelSet],
) -> StageLog {
    let has_ground_truth = train_set.iter().any(|(r, _)| !r.boxes.is_empty());
    StageLog {
        stage,
        model_checksum: model.checksum(),
        images: labels.iter().map(|l| l.image_id.clone()).collect(),
        quality: train_set
            .iter()
            .zip(labels)
            .map(|((r, _), l)| propagation_quality(l, &r.boxes, QUALITY_IOU))
            .collect(),
        has_ground_truth,
    }
}

/// Runs every stage and the final training. With `persist_dir`, the label
/// sets `labels_stage_<s>.jsonl`, the per-image `stage_log.jsonl` and the
/// per-stage `stage_models.jsonl` are written as the run progresses.
pub fn run_propagation(
    train_set: &[(ImageRecord, LabelSet)],
    background_pool: &[ImageRecord],
    schedule: &StageSchedule,
    augment: &AugmentConfig,
    persist_dir: Option<&Path>,
) -> Result<PropagationResult> {
    schedule.validate()?;
    if train_set.iter().all(|(_, l)| l.is_empty()) {
        return Err(Error::NoSeedBoxes);
    }
    if let Some(dir) = persist_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in ["stage_log.jsonl", "stage_models.jsonl"] {
            let p = dir.join(name);
            fs::write(&p, "").map_err(|e| Error::io(&p, e))?;
        }
    }
    let mut labels: Vec<LabelSet> = train_set
        .iter()
        .map(|(_, l)| LabelSet {
            stage: 1,
            ..l.clone()
        })
        .collect();
    let mut logs = Vec::new();
    let mut previous: Option<GridModel> = None;
    let images: Vec<&crate::image::Image> = train_set.iter().map(|(r, _)| &r.image).collect();

    for s in 1..=schedule.num_stages {
        let cfg = stage_config(&schedule.stage_training, s);
        let current: Vec<(ImageRecord, LabelSet)> = train_set
            .iter()
            .zip(&labels)
            .map(|((r, _), l)| (r.clone(), l.clone()))
            .collect();
        let init = match (&previous, schedule.warm_start) {
            (Some(m), true) => m.clone(),
            _ => fresh_model(&cfg, &current)?,
        };
        let outcome = train(
            &current,
            background_pool,
            TrainState::new(init, cfg.rng_seed),
            &cfg,
            LossMode::Gated {
                horizon: cfg.gate_horizon,
            },
            augment,
        )?;
        let predictions = predict_many(
            &images,
            &outcome.model,
            schedule.merge_score,
            schedule.nms_iou,
            cfg.model.test_area,
        );
        let log = log_stage(s as u32, &outcome.model, train_set, &labels);
        if let Some(dir) = persist_dir {
            persist_stage(dir, &log, &labels, train_set)?;
        }
        let next: Vec<LabelSet> = labels
            .iter()
            .zip(&predictions)
            .map(|(l, p)| merge_labels(l, p, schedule.merge_score, schedule.merge_iou))
            .collect();
        let added: usize = next.iter().map(LabelSet::len).sum::<usize>()
            - labels.iter().map(LabelSet::len).sum::<usize>();
        info!(
            "stage {s}: {} labels -> +{added}, median correct {}",
            log.total_expanded(),
            log.median_correct()
        );
        logs.push(log);
        labels = next;
        previous = Some(outcome.model);
    }

    let cfg = stage_config(&schedule.final_training, schedule.num_stages + 1);
    let expanded: Vec<(ImageRecord, LabelSet)> = train_set
        .iter()
        .zip(&labels)
        .map(|((r, _), l)| (r.clone(), l.clone()))
        .collect();
    let init = match (&previous, schedule.warm_start) {
        (Some(m), true) => m.clone(),
        _ => fresh_model(&cfg, &expanded)?,
    };
    let outcome = train(
        &expanded,
        background_pool,
        TrainState::new(init, cfg.rng_seed),
        &cfg,
        LossMode::Plain,
        augment,
    )?;
    let log = log_stage(schedule.num_stages as u32 + 1, &outcome.model, train_set, &labels);
    if let Some(dir) = persist_dir {
        persist_stage(dir, &log, &labels, train_set)?;
    }
    logs.push(log);
    Ok(PropagationResult {
        final_model: outcome.model,
        final_labels: labels,
        logs,
        final_gated_cells: outcome.gated_cells,
    })
}

/// Trains one plain-loss detector on the given labels, the single-stage
/// baseline.
pub fn train_baseline(
    train_set: &[(ImageRecord, LabelSet)],
    background_pool: &[ImageRecord],
    config: &TrainConfig,
    augment: &AugmentConfig,
) -> Result<crate::training::TrainOutcome> {
    if train_set.iter().all(|(_, l)| l.is_empty()) {
        return Err(Error::NoSeedBoxes);
    }
    let init = fresh_model(config, train_set)?;
    train(
        train_set,
        background_pool,
        TrainState::new(init, config.rng_seed),
        config,
        LossMode::Plain,
        augment,
    )
}

fn persist_stage(
    dir: &Path,
    log: &StageLog,
    labels: &[LabelSet],
    train_set: &[(ImageRecord, LabelSet)],
) -> Result<()> {
    let records: Vec<&ImageRecord> = train_set.iter().map(|(r, _)| r).collect();
    write_label_snapshot(
        &dir.join(format!("labels_stage_{}.jsonl", log.stage)),
        labels,
        &records,
    )?;
    let append = |name: &str, lines: Vec<String>| -> Result<()> {
        let p = dir.join(name);
        let mut f = fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        for line in lines {
            writeln!(f, "{line}").map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };
    let rows = log
        .images
        .iter()
        .zip(&log.quality)
        .map(|(image, q)| {
            serde_json::to_string(&StageLogLine {
                stage: log.stage,
                image: image.clone(),
                expanded: q.expanded,
                correct: log.has_ground_truth.then_some(q.correct),
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    append("stage_log.jsonl", rows)?;
    append(
        "stage_models.jsonl",
        vec![serde_json::json!({"stage": log.stage, "model_checksum": log.model_checksum}).to_string()],
    )
}

/// One line of `stage_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLogLine {
    pub stage: u32,
    pub image: String,
    pub expanded: usize,
    pub correct: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SnapshotBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    provenance: String,
    stage: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SnapshotLine {
    image: String,
    width: usize,
    height: usize,
    stage: u32,
    boxes: Vec<SnapshotBox>,
}

/// Writes label sets in the annotation layout, with `provenance`
/// (`"seed"` or `"propagated"`) and the stage each box entered.
pub fn write_label_snapshot(path: &Path, labels: &[LabelSet], records: &[&ImageRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (l, r) in labels.iter().zip(records) {
        let line = SnapshotLine {
            image: l.image_id.clone(),
            width: r.width(),
            height: r.height(),
            stage: l.stage,
            boxes: l
                .boxes
                .iter()
                .map(|b| {
                    let (provenance, stage) = match b.provenance {
                        Provenance::Seed => ("seed", 1),
                        Provenance::Propagated(s) => ("propagated", s),
                    };
                    SnapshotBox {
                        x: b.bbox.x,
                        y: b.bbox.y,
                        w: b.bbox.w,
                        h: b.bbox.h,
                        provenance: provenance.into(),
                        stage,
                    }
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_label_snapshot(path: &Path) -> Result<Vec<LabelSet>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let annotation_err = |message: String| Error::Annotation {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let s: SnapshotLine = serde_json::from_str(&line).map_err(|e| annotation_err(e.to_string()))?;
        let boxes = s
            .boxes
            .into_iter()
            .map(|b| {
                let provenance = match b.provenance.as_str() {
                    "seed" => Provenance::Seed,
                    "propagated" => Provenance::Propagated(b.stage),
                    other => return Err(annotation_err(format!("unknown provenance {other:?}"))),
                };
                Ok(LabeledBox {
                    bbox: BBox::new(b.x, b.y, b.w, b.h),
                    provenance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(LabelSet {
            image_id: s.image,
            stage: s.stage,
            boxes,
        });
    }
    Ok(out)
}

pub fn read_stage_log(path: &Path) -> Result<Vec<StageLogLine>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn sb(x: f64, s: f64) -> ScoredBox {
        ScoredBox::new(BBox::new(x, 0.0, 10.0, 10.0), s)
    }

    #[test]
    fn merge_without_predictions_is_identity_but_advances_stage() {
        let l = LabelSet::seeds("a", [BBox::new(0.0, 0.0, 5.0, 5.0)]);
        let m = merge_labels(&l, &[], 0.9, 0.2);
        assert_eq!(m.boxes, l.boxes);
        assert_eq!(m.stage, 2);
    }

    #[test]
    fn merge_hand_traced() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let current = LabelSet::seeds("a", [a]);
        // shifted by 10/3 horizontally: IoU = (20/3)/(40/3) = 0.5
        let p1 = sb(10.0 / 3.0, 0.95);
        assert!((iou(&p1.bbox, &a) - 0.5).abs() < 1e-12);
        let p2 = sb(50.0, 0.95);
        let p3 = sb(80.0, 0.85);
        let merged = merge_labels(&current, &[p1, p2, p3], 0.9, 0.2);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged.boxes[0].provenance, Provenance::Seed);
        assert_eq!(merged.boxes[1].bbox, p2.bbox);
        assert_eq!(merged.boxes[1].provenance, Provenance::Propagated(1));
    }

    #[test]
    fn merge_rejects_mutually_overlapping_predictions() {
        let current = LabelSet::seeds("a", []);
        let merged = merge_labels(&current, &[sb(0.0, 0.95), sb(1.0, 0.97), sb(30.0, 0.92)], 0.9, 0.2);
        let kept: Vec<BBox> = merged.bboxes().copied().collect();
        assert_eq!(kept, vec![sb(1.0, 0.0).bbox, sb(30.0, 0.0).bbox]);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                assert!(iou(a, b) <= 0.2);
            }
        }
    }

    #[test]
    fn count_image_bounds() {
        let img = Image::filled(64, 64, 1, 0.5);
        let m = GridModel::zeros(16, 16, 1, (10.0, 10.0), 0).unwrap();
        assert_eq!(count_image(&img, &m, 1.0, 0.2).0, 0);
        assert_eq!(count_image(&img, &m, 0.6, 0.2).0, 0);
        assert_eq!(count_image(&img, &m, 0.5, 0.2).0, 16);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = ImageRecord {
            image_id: "im.pgm".into(),
            image: Image::new(40, 30, 1),
            boxes: vec![],
        };
        let l = merge_labels(
            &LabelSet::seeds("im.pgm", [BBox::new(1.0, 2.0, 3.0, 4.0)]),
            &[sb(20.0, 0.99)],
            0.9,
            0.2,
        );
        let p = dir.path().join("s.jsonl");
        write_label_snapshot(&p, &[l.clone()], &[&rec]).unwrap();
        assert_eq!(read_label_snapshot(&p).unwrap(), vec![l]);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains(r#""provenance":"propagated","stage":1"#), "{text}");
    }

    #[test]
    fn schedule_defaults() {
        let s = StageSchedule::default();
        assert_eq!((s.num_stages, s.merge_score, s.merge_iou, s.nms_iou), (9, 0.9, 0.2, 0.2));
        let bad = StageSchedule {
            merge_score: 0.0,
            ..s
        };
        assert!(bad.validate().is_err());
    }
}
