//! Run configuration: one JSON file, optionally patched with dotted
//! `key.path=value` overrides.

use std::env;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use pfod::augment::AugmentConfig;
use pfod::dataset::SceneSpec;
use pfod::{EvalConfig, StageSchedule, SubsampleSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const OUTPUT_ROOT_VAR: &str = "PFOD_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundGenerator {
    pub spec: SceneSpec,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train_annotations: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_annotations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_generator: Option<BackgroundGenerator>,
    pub test_annotations: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "SubsampleSpec::full")]
    pub subsample: SubsampleSpec,
    /// PFOD stages and the final training.
    #[serde(default)]
    pub schedule: StageSchedule,
    /// Training for `--mode od`.
    #[serde(default)]
    pub training: TrainConfig,
    /// Defaults to the reference ranges rescaled to the training images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    /// When set, replaces the subsample and training seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
}

/// Applies `path.to.key=value`; the value is parsed as JSON and falls back
/// to a plain string. Missing object keys are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key.path=value"))?;
    if path.is_empty() {
        bail!("override {assignment:?} has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| anyhow!("override {path}: {part:?} is not an array index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| anyhow!("override {path}: index {idx} out of range ({len} items)"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("override {path}: {part:?} is not inside an object or array"),
        };
    }
    unreachable!("loop returns on the last segment")
}

impl RunConfig {
    /// Reads `path`, applies overrides and resolves relative paths against
    /// the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut value: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.train_annotations);
        resolve(&mut cfg.test_annotations);
        if let Some(p) = cfg.background_annotations.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.output_dir.as_mut() {
            resolve(p);
        }
        if let Some(seed) = cfg.rng_seed {
            cfg.subsample.rng_seed = seed;
            cfg.training.rng_seed = seed;
            cfg.schedule.stage_training.rng_seed = seed;
            cfg.schedule.final_training.rng_seed = seed;
        }
        Ok(cfg)
    }

    /// Every problem with the config, in one list.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, p) in [("train_annotations", &self.train_annotations), ("test_annotations", &self.test_annotations)] {
            if !p.is_file() {
                out.push(format!("{name}: {} does not exist", p.display()));
            }
        }
        match (&self.background_annotations, &self.background_generator) {
            (Some(_), Some(_)) => out.push("give background_annotations or background_generator, not both".into()),
            (Some(p), None) if !p.is_file() => out.push(format!("background_annotations: {} does not exist", p.display())),
            (None, Some(g)) => {
                if let Err(e) = g.spec.validate() {
                    out.push(format!("background_generator.spec: {e}"));
                }
            }
            _ => {}
        }
        if let Err(e) = self.schedule.validate() {
            out.push(format!("schedule: {e}"));
        }
        if let Err(e) = self.training.validate() {
            out.push(format!("training: {e}"));
        }
        let e = &self.eval;
        if !(e.match_iou > 0.0 && e.match_iou <= 1.0) {
            out.push(format!("eval.match_iou {} outside (0, 1]", e.match_iou));
        }
        if !(e.nms_iou > 0.0 && e.nms_iou <= 1.0) {
            out.push(format!("eval.nms_iou {} outside (0, 1]", e.nms_iou));
        }
        if !(0.0..=1.0).contains(&e.score_floor) {
            out.push(format!("eval.score_floor {} outside [0, 1]", e.score_floor));
        }
        if e.counting_grid.is_empty() || e.counting_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            out.push("eval.counting_grid must be non-empty with values in [0, 1]".into());
        }
        if let Some(a) = &self.augment {
            if a.crop_size == 0 {
                out.push("augment.crop_size must be positive".into());
            }
            if a.scale_long_side[0] <= 0.0 || a.scale_long_side[1] < a.scale_long_side[0] {
                out.push("augment.scale_long_side must be an increasing positive range".into());
            }
            if a.aspect_jitter[0] <= 0.0 || a.aspect_jitter[1] < a.aspect_jitter[0] {
                out.push("augment.aspect_jitter must be an increasing positive range".into());
            }
        }
        out
    }

    /// Explicit `output_dir`, or `<root>/<config stem>-<mode>` where the
    /// root comes from `PFOD_OUTPUT_ROOT` (default `runs`).
    pub fn output_dir(&self, config_path: &Path, mode: &str) -> PathBuf {
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        let root = env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        let stem = config_path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
        root.join(format!("{stem}-{mode}"))
    }
}
