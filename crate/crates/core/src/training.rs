//! Squared-loss SGD for the grid detector.
//!
//! Objectiveness is regressed toward 1 on labeled cells and toward 0 on the
//! rest. Under [`LossMode::Gated`] the zero targets of target-domain images
//! only count for the first `T` iterations of a run; background-pool images
//! keep them throughout. Box offsets are regressed on positive cells only.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig};
use crate::dataset::{ImageRecord, LabelSet};
use crate::detector::{sigmoid, CellTarget, FeatureMap, GridAssignment, GridModel, HEADS, OBJ};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Negatives on every image for the whole run.
    Plain,
    /// Target-domain negatives only while `t <= horizon`.
    Gated { horizon: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Target,
    Background,
}

/// Per-image loss inputs that change during a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossContext {
    pub mode: LossMode,
    pub domain: Domain,
    /// 1-based SGD iteration.
    pub t: usize,
    pub noobj_weight: f64,
    pub coord_weight: f64,
}

impl LossContext {
    pub fn negatives_active(&self) -> bool {
        match (self.mode, self.domain) {
            (_, Domain::Background) | (LossMode::Plain, _) => true,
            (LossMode::Gated { horizon }, Domain::Target) => self.t <= horizon,
        }
    }
}

/// Objectiveness loss of one cell with score `f` and binary target `positive`.
pub fn objectiveness_loss(f: f64, positive: bool, is_target_domain: bool, t: usize, horizon: usize) -> f64 {
    if positive {
        (f - 1.0).powi(2)
    } else if !is_target_domain || t <= horizon {
        f * f
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Sum of `(f - 1)^2` over positive cells.
    pub objectiveness_positive: f64,
    /// Sum of `f^2` over active negative cells, before `noobj_weight`.
    pub objectiveness_negative: f64,
    /// Sum of squared offset errors over positive cells, before `coord_weight`.
    pub coordinate: f64,
    pub total: f64,
    /// Negative cells switched off by the gate.
    pub gated_cells: u64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.objectiveness_positive += o.objectiveness_positive;
        self.objectiveness_negative += o.objectiveness_negative;
        self.coordinate += o.coordinate;
        self.total += o.total;
        self.gated_cells += o.gated_cells;
    }
}

/// Turns negatives into [`CellTarget::Ignore`] where the gate is closed.
/// Returns how many cells changed.
pub fn apply_gate(assignment: &mut GridAssignment, ctx: &LossContext) -> u64 {
    if ctx.negatives_active() {
        return 0;
    }
    let mut n = 0;
    for c in &mut assignment.cells {
        if *c == CellTarget::Negative {
            *c = CellTarget::Ignore;
            n += 1;
        }
    }
    n
}

pub fn image_loss(
    features: &FeatureMap,
    assignment: &GridAssignment,
    model: &GridModel,
    ctx: &LossContext,
) -> LossBreakdown {
    loss_and_grad(features, assignment, model, ctx, None)
}

/// Loss plus its gradient with respect to `model.weights`, accumulated into
/// `grad`.
pub fn image_loss_grad(
    features: &FeatureMap,
    assignment: &GridAssignment,
    model: &GridModel,
    ctx: &LossContext,
    grad: &mut [f64],
) -> LossBreakdown {
    loss_and_grad(features, assignment, model, ctx, Some(grad))
}

fn loss_and_grad(
    features: &FeatureMap,
    assignment: &GridAssignment,
    model: &GridModel,
    ctx: &LossContext,
    mut grad: Option<&mut [f64]>,
) -> LossBreakdown {
    assert_eq!(features.len(), assignment.cells.len(), "assignment does not match grid");
    let mut gated = assignment.clone();
    let gated_cells = apply_gate(&mut gated, ctx);
    let hd = model.head_dim();
    let d = model.input_dim();
    let head_off = model.head_offset();
    let mut hidden = vec![0.0; model.hidden + 1];
    let mut upstream = vec![0.0; model.hidden];
    let mut out = LossBreakdown {
        gated_cells,
        ..Default::default()
    };

    for (cell, target) in gated.cells.iter().enumerate() {
        if *target == CellTarget::Ignore {
            continue;
        }
        let x = features.cell(cell);
        let raw = model.heads(x, &mut hidden);
        let f = sigmoid(raw[OBJ]);
        let mut dz = [0.0; HEADS];
        match target {
            CellTarget::Positive(t) => {
                out.objectiveness_positive += (f - 1.0).powi(2);
                dz[OBJ] = 2.0 * (f - 1.0) * f * (1.0 - f);
                let (sx, sy) = (sigmoid(raw[1]), sigmoid(raw[2]));
                let e = [sx - t.offset_x, sy - t.offset_y, raw[3] - t.log_w, raw[4] - t.log_h];
                out.coordinate += e.iter().map(|v| v * v).sum::<f64>();
                let c = ctx.coord_weight;
                dz[1] = 2.0 * c * e[0] * sx * (1.0 - sx);
                dz[2] = 2.0 * c * e[1] * sy * (1.0 - sy);
                dz[3] = 2.0 * c * e[2];
                dz[4] = 2.0 * c * e[3];
            }
            CellTarget::Negative => {
                out.objectiveness_negative += f * f;
                dz[OBJ] = 2.0 * ctx.noobj_weight * f * f * (1.0 - f);
            }
            CellTarget::Ignore => unreachable!(),
        }
        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        let input: &[f64] = if model.hidden == 0 { x } else { &hidden };
        for (k, &dzk) in dz.iter().enumerate() {
            if dzk == 0.0 {
                continue;
            }
            let row = &mut g[head_off + k * hd..head_off + (k + 1) * hd];
            for (gw, u) in row.iter_mut().zip(input) {
                *gw += dzk * u;
            }
        }
        if model.hidden > 0 {
            let heads = &model.weights[head_off..];
            for (j, up) in upstream.iter_mut().enumerate() {
                let back: f64 = (0..HEADS).map(|k| dz[k] * heads[k * hd + j]).sum();
                *up = back * (1.0 - hidden[j] * hidden[j]);
            }
            for (j, &up) in upstream.iter().enumerate() {
                if up == 0.0 {
                    continue;
                }
                for (gw, xv) in g[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gw += up * xv;
                }
            }
        }
    }
    out.total = out.objectiveness_positive
        + ctx.noobj_weight * out.objectiveness_negative
        + ctx.coord_weight * out.coordinate;
    out
}

/// Piecewise-constant learning rate given as `(iterations, rate)` phases.
/// A run of any length is mapped onto the phases proportionally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule(pub Vec<(usize, f64)>);

impl LrSchedule {
    /// 100 iterations at 1e-4, 4900 at 1e-3, 4000 at 1e-4, 1000 at 1e-5.
    pub fn reference() -> Self {
        Self(vec![(100, 1e-4), (4900, 1e-3), (4000, 1e-4), (1000, 1e-5)])
    }

    pub fn span(&self) -> usize {
        self.0.iter().map(|p| p.0).sum()
    }

    /// Rate for 1-based iteration `t` of a `total`-iteration run.
    pub fn rate(&self, t: usize, total: usize) -> f64 {
        let span = self.span();
        let pos = (t.saturating_sub(1) as f64) * span as f64 / total.max(1) as f64;
        let mut end = 0.0;
        for &(len, lr) in &self.0 {
            end += len as f64;
            if pos < end {
                return lr;
            }
        }
        self.0.last().map_or(0.0, |p| p.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub stride: usize,
    pub receptive_field: usize,
    pub hidden: usize,
    /// Test-time image area; `None` keeps the native size.
    pub test_area: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stride: 16,
            receptive_field: 32,
            hidden: 0,
            test_area: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub background_slots: usize,
    /// Gate horizon: iterations during which unlabeled target regions count
    /// as background.
    #[serde(rename = "T")]
    pub gate_horizon: usize,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub noobj_weight: f64,
    pub coord_weight: f64,
    pub iterations: usize,
    pub rng_seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            background_slots: 16,
            gate_horizon: 200,
            lr_schedule: LrSchedule::reference(),
            weight_decay: 0.0005,
            noobj_weight: 0.5,
            coord_weight: 5.0,
            iterations: 1000,
            rng_seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("training config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.background_slots > self.batch_size {
            return bad(format!(
                "background_slots {} exceeds batch_size {}",
                self.background_slots, self.batch_size
            ));
        }
        if self.lr_schedule.0.is_empty() || self.lr_schedule.span() == 0 {
            return bad("lr_schedule needs at least one phase of positive length".into());
        }
        if self.lr_schedule.0.iter().any(|p| !(p.1 >= 0.0 && p.1.is_finite())) {
            return bad("learning rates must be finite and non-negative".into());
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("noobj_weight", self.noobj_weight),
            ("coord_weight", self.coord_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        let m = &self.model;
        if m.stride == 0 || m.receptive_field < m.stride {
            return bad("model needs 0 < stride <= receptive_field".into());
        }
        Ok(())
    }
}

/// Mutable state of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Iterations completed so far.
    pub t: usize,
    pub model: GridModel,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: GridModel, rng_seed: u64) -> Self {
        Self {
            t: 0,
            model,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GridModel,
    /// Batch-mean total loss per iteration.
    pub losses: Vec<f64>,
    /// Cells switched off by the gate over the whole run.
    pub gated_cells: u64,
}

/// Median width and height over all label boxes, or `None` without labels.
pub fn median_anchor<'a>(labels: impl IntoIterator<Item = &'a LabelSet>) -> Option<(f64, f64)> {
    let (mut ws, mut hs): (Vec<f64>, Vec<f64>) = labels
        .into_iter()
        .flat_map(|l| l.bboxes().map(|b| (b.w, b.h)))
        .unzip();
    if ws.is_empty() {
        return None;
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    };
    Some((median(&mut ws), median(&mut hs)))
}

/// A freshly initialized model for `config` with the median label size as
/// anchor.
pub fn fresh_model(config: &TrainConfig, train_set: &[(ImageRecord, LabelSet)]) -> Result<GridModel> {
    let anchor = median_anchor(train_set.iter().map(|(_, l)| l)).ok_or(Error::NoSeedBoxes)?;
    let channels = train_set.first().map_or(1, |(r, _)| r.image.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    GridModel::initialized(
        config.model.stride,
        config.model.receptive_field,
        channels,
        anchor,
        config.model.hidden,
        &mut rng,
    )
}

struct Sample<'a> {
    record: &'a ImageRecord,
    labels: Option<&'a LabelSet>,
    seed: u64,
}

/// Runs `config.iterations` SGD steps from `state`.
///
/// Each batch draws `batch_size - background_slots` target images and
/// `background_slots` pool images with replacement (all target images when
/// the pool is empty), augments them, and steps along the batch-mean gradient
/// plus `weight_decay` times the weights.
pub fn train(
    train_set: &[(ImageRecord, LabelSet)],
    background_pool: &[ImageRecord],
    mut state: TrainState,
    config: &TrainConfig,
    mode: LossMode,
    augment_config: &AugmentConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let bg_slots = if background_pool.is_empty() {
        0
    } else {
        config.background_slots
    };
    let n_weights = state.model.num_weights();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut gated_cells = 0u64;
    let empty = LabelSet::seeds("", []);

    for _ in 0..config.iterations {
        state.t += 1;
        let t = state.t;
        let mut batch: Vec<Sample> = Vec::with_capacity(config.batch_size);
        for slot in 0..config.batch_size {
            let sample = if slot < config.batch_size - bg_slots {
                let (record, labels) = &train_set[state.rng.random_range(0..train_set.len())];
                Sample {
                    record,
                    labels: Some(labels),
                    seed: 0,
                }
            } else {
                Sample {
                    record: &background_pool[state.rng.random_range(0..background_pool.len())],
                    labels: None,
                    seed: 0,
                }
            };
            batch.push(sample);
        }
        for s in &mut batch {
            s.seed = state.rng.next_u64() ^ augment_config.rng_seed;
        }

        let model = &state.model;
        let per_sample: Vec<(LossBreakdown, Vec<f64>)> = batch
            .par_iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
                let labels = s.labels.unwrap_or(&empty);
                let (pixels, aug_labels) =
                    augment::augment(&s.record.image, labels, augment_config, &mut rng);
                let features = FeatureMap::compute(&pixels, model);
                let assignment =
                    crate::detector::assign_targets(&aug_labels, pixels.width, pixels.height, model);
                let ctx = LossContext {
                    mode,
                    domain: if s.labels.is_some() {
                        Domain::Target
                    } else {
                        Domain::Background
                    },
                    t,
                    noobj_weight: config.noobj_weight,
                    coord_weight: config.coord_weight,
                };
                let mut grad = vec![0.0; n_weights];
                let loss = image_loss_grad(&features, &assignment, model, &ctx, &mut grad);
                (loss, grad)
            })
            .collect();

        let mut total = LossBreakdown::default();
        let mut grad = vec![0.0; n_weights];
        for (loss, g) in &per_sample {
            total += *loss;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if !total.total.is_finite() {
            return Err(Error::Divergence {
                iteration: t,
                loss: total.total,
            });
        }
        gated_cells += total.gated_cells;
        let b = config.batch_size as f64;
        losses.push(total.total / b);

        let lr = config.lr_schedule.rate(t, config.iterations);
        let decay = config.weight_decay;
        for (w, g) in state.model.weights.iter_mut().zip(&grad) {
            *w -= lr * (g / b + decay * *w);
        }
        if state.model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergence {
                iteration: t,
                loss: f64::NAN,
            });
        }
    }
    Ok(TrainOutcome {
        model: state.model,
        losses,
        gated_cells,
    })
}
