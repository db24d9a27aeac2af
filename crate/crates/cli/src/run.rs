use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;
use pfod::augment::AugmentConfig;
use pfod::dataset::{generate_background_pool, generate_images, load_annotations, subsample, write_dataset, ImageRecord, SceneSpec};
use pfod::detector::{predict_at_scale, predict_many};
use pfod::evaluate::{evaluate_predictions, read_predictions, write_predictions, PredictionLine};
use pfod::metrics::propagation_quality;
use pfod::propagation::{train_baseline, write_label_snapshot, QUALITY_IOU};
use pfod::{run_propagation, BBox, EvalConfig, EvalReport, GridModel, LabelSet, ScoredBox};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{manifest, overlay, CliResult, EvaluateArgs, Failure, GenerateArgs, Mode, RunArgs, VisualizeArgs};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> CliResult<Vec<ImageRecord>> {
    load_annotations(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::data)
}

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let spec: SceneSpec = match &args.spec {
        Some(p) => read_json(p).map_err(Failure::config)?,
        None => SceneSpec::default(),
    };
    spec.validate().map_err(Failure::config)?;
    let sets = [
        ("scene", args.count, true, "train.jsonl"),
        ("background", args.background_count, false, "background.jsonl"),
        ("test", args.test_count, true, "test.jsonl"),
    ];
    for (prefix, count, objects, file) in sets {
        if count == 0 && prefix != "scene" {
            continue;
        }
        let records = generate_images(&spec, count, prefix, objects).map_err(|e| Failure::from_core(e, 2))?;
        write_dataset(&args.out, file, &records).map_err(Failure::other)?;
        info!("wrote {count} images to {}", args.out.join(file).display());
    }
    Ok(())
}

#[derive(Serialize)]
struct StageSummary {
    stage: u32,
    labels: usize,
    median_correct: Option<f64>,
    model_checksum: String,
}

#[derive(Serialize)]
struct RunSummary {
    mode: &'static str,
    model_checksum: String,
    train_images: usize,
    seed_boxes: usize,
    final_labels: usize,
    background_images_used: usize,
    /// Negative cells the gate switched off in the returned model's training.
    gated_cells: u64,
    stages: Vec<StageSummary>,
    report: EvalReport,
}

pub fn run(args: &RunArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&args.config, &args.overrides).map_err(Failure::config)?;
    let problems = cfg.problems();
    if !problems.is_empty() {
        let list: Vec<String> = problems.iter().map(|p| format!("  - {p}")).collect();
        return Err(Failure::config(anyhow!(
            "{} config problem(s):\n{}",
            problems.len(),
            list.join("\n")
        )));
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir(&args.config, args.mode.name()));

    let train = load_data(&cfg.train_annotations)?;
    let test = load_data(&cfg.test_annotations)?;
    if test.iter().all(|r| r.boxes.is_empty()) {
        return Err(Failure::data(anyhow!(
            "{} has no ground-truth boxes to evaluate against",
            cfg.test_annotations.display()
        )));
    }
    let background = match (&cfg.background_annotations, &cfg.background_generator) {
        (Some(p), _) => load_data(p)?,
        (None, Some(g)) => generate_background_pool(&g.spec, g.count).map_err(|e| Failure::from_core(e, 2))?,
        (None, None) => Vec::new(),
    };
    let (train_set, _) = subsample(&train, &cfg.subsample).map_err(Failure::config)?;
    let augment = cfg.augment.clone().unwrap_or_else(|| {
        let side = train.iter().map(|r| r.width().max(r.height())).max().unwrap_or(0);
        AugmentConfig::scaled_for(side)
    });

    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(Failure::other)?;
    let mut written = vec!["resolved_config.json".to_string()];
    let resolved = RunConfig {
        augment: Some(augment.clone()),
        ..cfg.clone()
    };
    write_json(&out.join("resolved_config.json"), &resolved).map_err(Failure::other)?;

    let seed_boxes = train_set.iter().map(|(_, l)| l.len()).sum();
    let (model, labels, gated_cells, stages, used_backgrounds) = match args.mode {
        Mode::Od => {
            // the pool only stands in for unlabeled regions of an incomplete label set
            let pool: &[ImageRecord] = if cfg.subsample.is_full() { &[] } else { &background };
            info!("od: training on {} images, {} background images", train_set.len(), pool.len());
            let outcome = train_baseline(&train_set, pool, &cfg.training, &augment)
                .map_err(|e| Failure::from_core(e, 3))?;
            let labels: Vec<LabelSet> = train_set.iter().map(|(_, l)| l.clone()).collect();
            let records: Vec<&ImageRecord> = train_set.iter().map(|(r, _)| r).collect();
            write_label_snapshot(&out.join("labels_stage_1.jsonl"), &labels, &records).map_err(Failure::other)?;
            written.push("labels_stage_1.jsonl".into());
            (outcome.model, labels, outcome.gated_cells, Vec::new(), pool.len())
        }
        Mode::Pfod => {
            info!(
                "pfod: {} stages on {} images, {} background images",
                cfg.schedule.num_stages,
                train_set.len(),
                background.len()
            );
            let res = run_propagation(&train_set, &background, &cfg.schedule, &augment, Some(&out))
                .map_err(|e| Failure::from_core(e, 3))?;
            for s in 1..=cfg.schedule.num_stages + 1 {
                written.push(format!("labels_stage_{s}.jsonl"));
            }
            written.push("stage_log.jsonl".into());
            written.push("stage_models.jsonl".into());
            let stages = res
                .logs
                .iter()
                .map(|l| StageSummary {
                    stage: l.stage,
                    labels: l.total_expanded(),
                    median_correct: l.has_ground_truth.then(|| l.median_correct()),
                    model_checksum: l.model_checksum.clone(),
                })
                .collect();
            (res.final_model, res.final_labels, res.final_gated_cells, stages, background.len())
        }
    };
    model.save(&out.join("model.bin")).map_err(Failure::other)?;
    written.push("model.bin".into());

    let (report, predictions) = pfod::evaluate_model(&model, &test, &cfg.eval).map_err(Failure::data)?;
    let lines: Vec<PredictionLine> = test
        .iter()
        .zip(predictions)
        .map(|(r, boxes)| PredictionLine {
            image: r.image_id.clone(),
            boxes,
        })
        .collect();
    write_predictions(&out.join("predictions.jsonl"), &lines).map_err(Failure::other)?;
    write_json(&out.join("report.json"), &report).map_err(Failure::other)?;
    let summary = RunSummary {
        mode: args.mode.name(),
        model_checksum: model.checksum(),
        train_images: train_set.len(),
        seed_boxes,
        final_labels: labels.iter().map(LabelSet::len).sum(),
        background_images_used: used_backgrounds,
        gated_cells,
        stages,
        report: report.clone(),
    };
    write_json(&out.join("summary.json"), &summary).map_err(Failure::other)?;
    written.extend(["predictions.jsonl", "report.json", "summary.json"].map(String::from));
    manifest::write(&out, &written).map_err(Failure::other)?;

    info!(
        "mAP@0.5 {:.4}, MAE {:.3} at {}, RMSE {:.3} at {}; artifacts in {}",
        report.map_at_50,
        report.mae,
        report.mae_threshold,
        report.rmse,
        report.rmse_threshold,
        out.display()
    );
    println!("{}", serde_json::to_string_pretty(&report).map_err(Failure::other)?);
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let eval: EvalConfig = match &args.eval_config {
        Some(p) => read_json(p).map_err(Failure::config)?,
        None => EvalConfig::default(),
    };
    let records = load_data(&args.annotations)?;
    let predictions: Vec<Vec<ScoredBox>> = match (&args.predictions, &args.model) {
        (Some(p), _) => {
            let lines = read_predictions(p).map_err(Failure::data)?;
            let index: HashMap<&str, usize> =
                records.iter().enumerate().map(|(i, r)| (r.image_id.as_str(), i)).collect();
            let mut out = vec![Vec::new(); records.len()];
            for l in lines {
                let i = *index.get(l.image.as_str()).ok_or_else(|| {
                    Failure::data(anyhow!("{}: image {} is not in {}", p.display(), l.image, args.annotations.display()))
                })?;
                out[i].extend(l.boxes.into_iter().filter(|b| b.score >= eval.score_floor));
            }
            out
        }
        (None, Some(m)) => {
            let model = load_model(m)?;
            let images: Vec<_> = records.iter().map(|r| &r.image).collect();
            predict_many(&images, &model, eval.score_floor, eval.nms_iou, eval.test_area)
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let truth: Vec<Vec<BBox>> = records.iter().map(|r| r.boxes.clone()).collect();
    let report = evaluate_predictions(&predictions, &truth, &eval).map_err(Failure::data)?;
    if let Some(p) = &args.out {
        write_json(p, &report).map_err(Failure::other)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).map_err(Failure::other)?);
    Ok(())
}

fn load_model(path: &Path) -> CliResult<GridModel> {
    GridModel::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(Failure::data)
}

pub fn visualize(args: &VisualizeArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(Failure::config(anyhow!("threshold {} outside [0, 1]", args.threshold)));
    }
    let model = load_model(&args.model)?;
    let records = load_data(&args.annotations)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(Failure::other)?;
    for r in &records {
        let kept = predict_at_scale(&r.image, &model, args.threshold, args.nms_iou, None);
        let mut canvas = overlay::to_rgb(&r.image);
        let mut correct = 0;
        for p in &kept {
            let hit = r.boxes.iter().any(|g| pfod::iou(&p.bbox, g) > QUALITY_IOU);
            correct += hit as usize;
            let color = if hit { overlay::CORRECT } else { overlay::INCORRECT };
            overlay::draw_box(&mut canvas, &p.bbox, color);
        }
        debug_assert_eq!(
            correct,
            propagation_quality(&LabelSet::seeds(&*r.image_id, kept.iter().map(|p| p.bbox)), &r.boxes, QUALITY_IOU).correct
        );
        let stem = PathBuf::from(&r.image_id).with_extension("");
        let stem = stem.to_string_lossy().replace(['/', '\\'], "_");
        canvas
            .write_pnm(&args.out.join(format!("{stem}.ppm")))
            .map_err(Failure::other)?;
        let text = format!("pred={}, gt={}, correct={}\n", kept.len(), r.boxes.len(), correct);
        let side = args.out.join(format!("{stem}.txt"));
        fs::write(&side, text)
            .with_context(|| format!("writing {}", side.display()))
            .map_err(Failure::other)?;
    }
    info!("wrote {} overlays to {}", records.len(), args.out.display());
    Ok(())
}
