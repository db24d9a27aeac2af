//! Single-anchor grid detector over normalized image patches.
//!
//! Every cell of a `stride`-pixel grid looks at the `receptive_field`-square
//! patch centered on the cell center. Five affine heads (optionally behind one
//! tanh hidden layer) produce an objectiveness logit and four box offsets.
//! A box decodes as center = cell origin + sigmoid(tx, ty) * stride and size
//! = anchor * exp(tw, th), the latter capped at eight anchors.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::LabelSet;
use crate::error::{Error, Result};
use crate::geometry::{nms, BBox, ScoredBox};
use crate::image::Image;

pub const HEADS: usize = 5;
pub const OBJ: usize = 0;
/// Decoded sizes never exceed this multiple of the anchor.
pub const MAX_ANCHOR_MULTIPLE: f64 = 8.0;
/// Largest `f64` strictly below one. Reported scores are capped here so that
/// no finite model reaches a score of exactly 1.
pub const SCORE_CEILING: f64 = 1.0 - f64::EPSILON / 2.0;

const CHECKPOINT_MAGIC: &[u8; 8] = b"PFODGRID";
const CHECKPOINT_VERSION: u32 = 1;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    pub stride: usize,
    pub receptive_field: usize,
    pub channels: usize,
    /// Anchor `(w, h)` in pixels.
    pub anchor: (f64, f64),
    /// Width of the optional tanh layer; 0 means linear heads.
    pub hidden: usize,
    /// Hidden matrix (`hidden x input_dim`, if any) followed by the heads
    /// matrix (`HEADS x head_dim`), both row-major with the bias last.
    pub weights: Vec<f64>,
}

impl GridModel {
    /// All-zero weights.
    pub fn zeros(
        stride: usize,
        receptive_field: usize,
        channels: usize,
        anchor: (f64, f64),
        hidden: usize,
    ) -> Result<Self> {
        if stride == 0 || receptive_field < stride {
            return Err(Error::InvalidArgument(format!(
                "need 0 < stride <= receptive_field, got {stride} and {receptive_field}"
            )));
        }
        if channels == 0 || !(anchor.0 > 0.0 && anchor.1 > 0.0) {
            return Err(Error::InvalidArgument("bad channels or anchor".into()));
        }
        let mut m = Self {
            stride,
            receptive_field,
            channels,
            anchor,
            hidden,
            weights: Vec::new(),
        };
        m.weights = vec![0.0; m.num_weights()];
        Ok(m)
    }

    /// Small uniform weights, zero biases, objectiveness bias -2.
    pub fn initialized(
        stride: usize,
        receptive_field: usize,
        channels: usize,
        anchor: (f64, f64),
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut m = Self::zeros(stride, receptive_field, channels, anchor, hidden)?;
        let d = m.input_dim();
        let hidden_len = m.hidden_len();
        let hidden_scale = if hidden > 0 { (3.0 / d as f64).sqrt() } else { 0.0 };
        for (i, w) in m.weights[..hidden_len].iter_mut().enumerate() {
            if i % d != d - 1 {
                *w = rng.random_range(-hidden_scale..=hidden_scale);
            }
        }
        let hd = m.head_dim();
        for (i, w) in m.weights[hidden_len..].iter_mut().enumerate() {
            if i % hd != hd - 1 {
                *w = rng.random_range(-0.01..=0.01);
            }
        }
        let bias = m.head_offset() + OBJ * hd + hd - 1;
        m.weights[bias] = -2.0;
        Ok(m)
    }

    /// Patch length plus the trailing bias input.
    pub fn input_dim(&self) -> usize {
        self.receptive_field * self.receptive_field * self.channels + 1
    }

    pub fn head_dim(&self) -> usize {
        if self.hidden == 0 {
            self.input_dim()
        } else {
            self.hidden + 1
        }
    }

    pub fn hidden_len(&self) -> usize {
        self.hidden * self.input_dim()
    }

    pub fn head_offset(&self) -> usize {
        self.hidden_len()
    }

    pub fn num_weights(&self) -> usize {
        self.hidden_len() + HEADS * self.head_dim()
    }

    pub fn grid_dims(&self, width: usize, height: usize) -> (usize, usize) {
        (width / self.stride, height / self.stride)
    }

    /// Raw head outputs `[obj, tx, ty, tw, th]` for one feature vector.
    /// `hidden_out` receives the tanh activations when the model has them.
    pub fn heads(&self, feature: &[f64], hidden_out: &mut [f64]) -> [f64; HEADS] {
        let hd = self.head_dim();
        let head_w = &self.weights[self.head_offset()..];
        let input: &[f64] = if self.hidden == 0 {
            feature
        } else {
            let d = self.input_dim();
            for (j, h) in hidden_out[..self.hidden].iter_mut().enumerate() {
                *h = dot(&self.weights[j * d..(j + 1) * d], feature).tanh();
            }
            hidden_out[self.hidden] = 1.0;
            &hidden_out[..hd]
        };
        let mut out = [0.0; HEADS];
        for (k, o) in out.iter_mut().enumerate() {
            *o = dot(&head_w[k * hd..(k + 1) * hd], input);
        }
        out
    }

    pub fn decode(&self, col: usize, row: usize, raw: &[f64; HEADS]) -> BBox {
        let s = self.stride as f64;
        let cx = col as f64 * s + sigmoid(raw[1]) * s;
        let cy = row as f64 * s + sigmoid(raw[2]) * s;
        let w = self.anchor.0 * raw[3].exp().min(MAX_ANCHOR_MULTIPLE);
        let h = self.anchor.1 * raw[4].exp().min(MAX_ANCHOR_MULTIPLE);
        BBox::from_center(cx, cy, w, h)
    }

    pub fn decode_target(&self, col: usize, row: usize, t: &RegressionTarget) -> BBox {
        let s = self.stride as f64;
        let cx = (col as f64 + t.offset_x) * s;
        let cy = (row as f64 + t.offset_y) * s;
        let w = self.anchor.0 * t.log_w.exp().min(MAX_ANCHOR_MULTIPLE);
        let h = self.anchor.1 * t.log_h.exp().min(MAX_ANCHOR_MULTIPLE);
        BBox::from_center(cx, cy, w, h)
    }

    /// Serializes to the checkpoint format: magic, version, geometry, anchor,
    /// then length-prefixed little-endian `f64` arrays (hidden matrix if any,
    /// then one array per head).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.weights.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            self.stride as u32,
            self.receptive_field as u32,
            self.channels as u32,
            self.hidden as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.anchor.0.to_le_bytes());
        out.extend_from_slice(&self.anchor.1.to_le_bytes());
        let hd = self.head_dim();
        let mut arrays: Vec<&[f64]> = Vec::new();
        if self.hidden > 0 {
            arrays.push(&self.weights[..self.hidden_len()]);
        }
        let heads = &self.weights[self.head_offset()..];
        arrays.extend(heads.chunks_exact(hd));
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in arrays {
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for w in a {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32s = [0u32; 5];
        for v in &mut u32s {
            *v = u32::from_le_bytes(take(4)?.try_into().unwrap());
        }
        let [version, stride, rf, channels, hidden] = u32s;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let aw = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let ah = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut model = GridModel::zeros(
            stride as usize,
            rf as usize,
            channels as usize,
            (aw, ah),
            hidden as usize,
        )?;
        let n_arrays = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let expected = HEADS + usize::from(hidden > 0);
        if n_arrays != expected {
            return Err(bad(&format!("expected {expected} arrays, found {n_arrays}")));
        }
        let mut weights = Vec::with_capacity(model.num_weights());
        for _ in 0..n_arrays {
            let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let raw = take(len.checked_mul(8).ok_or_else(|| bad("array too long"))?)?;
            weights.extend(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
            );
        }
        if weights.len() != model.num_weights() {
            return Err(bad("weight count does not match geometry"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(bad("non-finite weight"));
        }
        model.weights = weights;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// FNV-1a over the checkpoint bytes, as 16 hex digits.
    pub fn checksum(&self) -> String {
        let h = self
            .to_bytes()
            .iter()
            .fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3));
        format!("{h:016x}")
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalized patch of cell `(col, row)` with a trailing bias 1.
///
/// In-image pixels are standardized to zero mean and unit deviation;
/// positions outside the image stay 0. A constant patch maps to zeros.
pub fn extract_patch(image: &Image, col: usize, row: usize, model: &GridModel) -> Vec<f64> {
    let mut out = vec![0.0; model.input_dim()];
    extract_patch_into(image, col, row, model, &mut out);
    out
}

fn extract_patch_into(image: &Image, col: usize, row: usize, model: &GridModel, out: &mut [f64]) {
    let r = model.receptive_field as i64;
    let s = model.stride as i64;
    let ch = image.channels;
    let x0 = col as i64 * s + s / 2 - r / 2;
    let y0 = row as i64 * s + s / 2 - r / 2;
    let (w, h) = (image.width as i64, image.height as i64);
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut inside = Vec::with_capacity((r * r) as usize * ch);
    for py in 0..r {
        let y = y0 + py;
        if y < 0 || y >= h {
            continue;
        }
        for px in 0..r {
            let x = x0 + px;
            if x < 0 || x >= w {
                continue;
            }
            for c in 0..ch {
                let i = ((py * r + px) as usize) * ch + c;
                out[i] = image.get(x as usize, y as usize, c);
                inside.push(i);
            }
        }
    }
    let last = out.len() - 1;
    if !inside.is_empty() {
        let n = inside.len() as f64;
        let mean = inside.iter().map(|&i| out[i]).sum::<f64>() / n;
        let var = inside.iter().map(|&i| (out[i] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for &i in &inside {
            out[i] = if std > 1e-6 { (out[i] - mean) / std } else { 0.0 };
        }
    }
    out[last] = 1.0;
}

/// Feature vectors of every grid cell, row-major over cells.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub cols: usize,
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn compute(image: &Image, model: &GridModel) -> Self {
        let (cols, rows) = model.grid_dims(image.width, image.height);
        let dim = model.input_dim();
        let mut data = vec![0.0; cols * rows * dim];
        for (cell, chunk) in data.chunks_exact_mut(dim).enumerate() {
            extract_patch_into(image, cell % cols, cell / cols, model, chunk);
        }
        Self {
            cols,
            rows,
            dim,
            data,
        }
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectivenessMap {
    pub cols: usize,
    pub rows: usize,
    pub scores: Vec<f64>,
    pub boxes: Vec<BBox>,
}

pub fn forward(image: &Image, model: &GridModel) -> ObjectivenessMap {
    let features = FeatureMap::compute(image, model);
    forward_features(&features, model)
}

pub fn forward_features(features: &FeatureMap, model: &GridModel) -> ObjectivenessMap {
    let mut hidden = vec![0.0; model.hidden + 1];
    let n = features.len();
    let mut scores = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    for cell in 0..n {
        let raw = model.heads(features.cell(cell), &mut hidden);
        scores.push(sigmoid(raw[OBJ]).min(SCORE_CEILING));
        boxes.push(model.decode(cell % features.cols, cell / features.cols, &raw));
    }
    ObjectivenessMap {
        cols: features.cols,
        rows: features.rows,
        scores,
        boxes,
    }
}

/// Regression target in the squashed space the loss compares against:
/// center offset as a fraction of the cell, log size relative to the anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    pub offset_x: f64,
    pub offset_y: f64,
    pub log_w: f64,
    pub log_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellTarget {
    Negative,
    Positive(RegressionTarget),
    /// Excluded from the objectiveness loss.
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridAssignment {
    pub cols: usize,
    pub rows: usize,
    pub cells: Vec<CellTarget>,
}

impl GridAssignment {
    pub fn positives(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c, CellTarget::Positive(_)))
            .count()
    }
}

/// Marks the cell holding each label center positive. Cells are half-open,
/// so a center on a boundary belongs to the cell right/below it; when two
/// centers share a cell the larger box wins. Centers in the partial strip
/// past the last full cell go to the last cell.
pub fn assign_targets(
    labels: &LabelSet,
    width: usize,
    height: usize,
    model: &GridModel,
) -> GridAssignment {
    let (cols, rows) = model.grid_dims(width, height);
    let mut cells = vec![CellTarget::Negative; cols * rows];
    if cols == 0 || rows == 0 {
        return GridAssignment { cols, rows, cells };
    }
    let mut owner_area = vec![f64::NEG_INFINITY; cols * rows];
    let s = model.stride as f64;
    for b in labels.bboxes() {
        let (cx, cy) = b.center();
        if cx < 0.0 || cy < 0.0 {
            continue;
        }
        let col = ((cx / s).floor() as usize).min(cols - 1);
        let row = ((cy / s).floor() as usize).min(rows - 1);
        let idx = row * cols + col;
        if b.area() <= owner_area[idx] {
            continue;
        }
        owner_area[idx] = b.area();
        cells[idx] = CellTarget::Positive(RegressionTarget {
            offset_x: (cx / s - col as f64).clamp(0.0, 1.0),
            offset_y: (cy / s - row as f64).clamp(0.0, 1.0),
            log_w: (b.w / model.anchor.0).ln(),
            log_h: (b.h / model.anchor.1).ln(),
        });
    }
    GridAssignment { cols, rows, cells }
}

/// Scores every cell, keeps those at or above `score_floor`, clips their
/// boxes to the image and applies NMS.
pub fn predict(image: &Image, model: &GridModel, score_floor: f64, nms_iou: f64) -> Vec<ScoredBox> {
    let map = forward(image, model);
    let (w, h) = (image.width as f64, image.height as f64);
    let candidates: Vec<ScoredBox> = map
        .scores
        .iter()
        .zip(&map.boxes)
        .filter(|(&s, _)| s >= score_floor)
        .filter_map(|(&s, b)| b.clip(0.0, 0.0, w, h).map(|b| ScoredBox::new(b, s)))
        .collect();
    nms(&candidates, nms_iou)
}

/// Bilinear resize so the area is close to `target_area`, keeping the aspect
/// ratio. Returns the image and the applied scale.
pub fn resize_to_area(image: &Image, target_area: f64) -> (Image, f64) {
    let scale = (target_area / (image.width * image.height) as f64).sqrt();
    let w = ((image.width as f64 * scale).round() as usize).max(1);
    let h = ((image.height as f64 * scale).round() as usize).max(1);
    if w == image.width && h == image.height {
        return (image.clone(), 1.0);
    }
    let (sx, sy) = (w as f64 / image.width as f64, h as f64 / image.height as f64);
    let fill = image.mean();
    let mut out = Image::new(w, h, image.channels);
    for y in 0..h {
        for x in 0..w {
            for c in 0..image.channels {
                let v = image.sample_bilinear((x as f64 + 0.5) / sx, (y as f64 + 0.5) / sy, c, fill);
                out.set(x, y, c, v);
            }
        }
    }
    (out, (sx * sy).sqrt())
}

/// [`predict`] after an optional test-time resize; boxes come back in the
/// original image's coordinates.
pub fn predict_at_scale(
    image: &Image,
    model: &GridModel,
    score_floor: f64,
    nms_iou: f64,
    target_area: Option<f64>,
) -> Vec<ScoredBox> {
    let Some(area) = target_area else {
        return predict(image, model, score_floor, nms_iou);
    };
    let (resized, _) = resize_to_area(image, area);
    let sx = resized.width as f64 / image.width as f64;
    let sy = resized.height as f64 / image.height as f64;
    let (w, h) = (image.width as f64, image.height as f64);
    predict(&resized, model, score_floor, nms_iou)
        .into_iter()
        .filter_map(|p| {
            let b = BBox::new(p.bbox.x / sx, p.bbox.y / sy, p.bbox.w / sx, p.bbox.h / sy);
            b.clip(0.0, 0.0, w, h).map(|b| ScoredBox::new(b, p.score))
        })
        .collect()
}

/// Predictions for many images in parallel, in input order.
pub fn predict_many(
    images: &[&Image],
    model: &GridModel,
    score_floor: f64,
    nms_iou: f64,
    target_area: Option<f64>,
) -> Vec<Vec<ScoredBox>> {
    images
        .par_iter()
        .map(|img| predict_at_scale(img, model, score_floor, nms_iou, target_area))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(stride: usize, rf: usize) -> GridModel {
        GridModel::zeros(stride, rf, 1, (20.0, 20.0), 0).unwrap()
    }

    #[test]
    fn constant_image_gives_bias_only() {
        let img = Image::filled(64, 64, 1, 0.7);
        let f = extract_patch(&img, 1, 1, &model(16, 24));
        assert_eq!(f.len(), 24 * 24 + 1);
        assert!(f[..f.len() - 1].iter().all(|&v| v == 0.0));
        assert_eq!(*f.last().unwrap(), 1.0);
    }

    #[test]
    fn interior_patch_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..64 * 64).map(|_| rng.random::<f64>()).collect();
        let img = Image::from_data(64, 64, 1, data).unwrap();
        let f = extract_patch(&img, 2, 2, &model(16, 24));
        let body = &f[..f.len() - 1];
        let mean = body.iter().sum::<f64>() / body.len() as f64;
        let var = body.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / body.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn corner_patch_matches_explicit_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (20usize, 20usize);
        let data: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        let img = Image::from_data(w, h, 1, data).unwrap();
        let m = model(8, 16);
        let f = extract_patch(&img, 0, 0, &m);
        // cell (0,0) center (4,4): the patch spans [-4, 12) on both axes
        let mut padded = vec![None; 16 * 16];
        for py in 0..16i64 {
            for px in 0..16i64 {
                let (x, y) = (px - 4, py - 4);
                if x >= 0 && y >= 0 {
                    padded[(py * 16 + px) as usize] = Some(img.get(x as usize, y as usize, 0));
                }
            }
        }
        let inside: Vec<f64> = padded.iter().flatten().copied().collect();
        let mean = inside.iter().sum::<f64>() / inside.len() as f64;
        let std = (inside.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / inside.len() as f64).sqrt();
        for (i, p) in padded.iter().enumerate() {
            match p {
                None => assert_eq!(f[i], 0.0),
                Some(v) => assert!((f[i] - (v - mean) / std).abs() < 1e-9),
            }
        }
    }

    #[test]
    fn zero_model_scores_half_and_decodes_anchor() {
        let img = Image::filled(64, 48, 1, 0.2);
        let m = model(16, 16);
        let map = forward(&img, &m);
        assert_eq!((map.cols, map.rows), (4, 3));
        assert!(map.scores.iter().all(|&s| s == 0.5));
        assert_eq!(map.boxes[5], BBox::from_center(24.0, 24.0, 20.0, 20.0));
    }

    #[test]
    fn grid_of_416_crop_at_stride_32_is_13_by_13() {
        let m = GridModel::zeros(32, 32, 1, (10.0, 10.0), 0).unwrap();
        assert_eq!(m.grid_dims(416, 416), (13, 13));
    }

    #[test]
    fn center_maps_to_floor_cell() {
        let m = GridModel::zeros(32, 32, 1, (10.0, 10.0), 0).unwrap();
        let labels = LabelSet::seeds("a", [BBox::from_center(100.0, 100.0, 10.0, 10.0)]);
        let a = assign_targets(&labels, 416, 416, &m);
        assert!(matches!(a.cells[3 * 13 + 3], CellTarget::Positive(_)));
        assert_eq!(a.positives(), 1);
        let boundary = LabelSet::seeds("b", [BBox::from_center(64.0, 32.0, 10.0, 10.0)]);
        let a = assign_targets(&boundary, 416, 416, &m);
        assert!(matches!(a.cells[13 + 2], CellTarget::Positive(_)));
    }

    #[test]
    fn empty_labels_are_all_negative() {
        let m = model(16, 16);
        let a = assign_targets(&LabelSet::seeds("e", []), 64, 64, &m);
        assert!(a.cells.iter().all(|c| *c == CellTarget::Negative));
    }

    #[test]
    fn shared_cell_goes_to_larger_box() {
        let m = model(16, 16);
        let small = BBox::from_center(20.0, 20.0, 10.0, 10.0);
        let large = BBox::from_center(22.0, 22.0, 30.0, 30.0);
        for order in [[small, large], [large, small]] {
            let a = assign_targets(&LabelSet::seeds("s", order), 64, 64, &m);
            let CellTarget::Positive(t) = a.cells[5] else {
                panic!("cell 5 not positive")
            };
            assert!((m.decode_target(1, 1, &t).w - 30.0).abs() < 1e-12);
        }
    }

    #[test]
    fn score_floor_one_yields_nothing() {
        let mut m = model(16, 16);
        let bias = m.head_offset() + m.head_dim() - 1;
        m.weights[bias] = 500.0;
        let img = Image::filled(64, 64, 1, 0.2);
        assert!(predict(&img, &m, 1.0, 0.2).is_empty());
        assert_eq!(predict(&img, &m, 0.99, 1.0).len(), 16);
    }

    #[test]
    fn zero_model_prediction_against_floors() {
        let img = Image::filled(96, 96, 1, 0.2);
        // anchors 20 wide at stride 16: neighbours overlap 4/36 = 1/9 <= 0.2
        let m = model(16, 16);
        assert!(predict(&img, &m, 0.6, 0.2).is_empty());
        let kept = predict(&img, &m, 0.4, 0.2);
        let side = 20.0;
        let shift = 16.0;
        let closed_form = (side - shift) * side / (2.0 * side * side - (side - shift) * side);
        assert!(closed_form <= 0.2);
        assert_eq!(kept.len(), 36);
        // anchors 30 wide overlap 14/46 > 0.2, so alternating cells are suppressed
        let wide = GridModel::zeros(16, 16, 1, (30.0, 30.0), 0).unwrap();
        let kept = predict(&img, &wide, 0.4, 0.2);
        assert!(kept.len() < 36);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                assert!(iou(&a.bbox, &b.bbox) <= 0.2);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for hidden in [0, 3] {
            let m = GridModel::initialized(8, 12, 1, (9.5, 11.0), hidden, &mut rng).unwrap();
            let bytes = m.to_bytes();
            assert_eq!(&bytes[..8], b"PFODGRID");
            assert_eq!(GridModel::from_bytes(&bytes).unwrap(), m);
            assert!(GridModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        }
        assert!(GridModel::from_bytes(b"NOTAGRID").is_err());
    }

    #[test]
    fn initialization_follows_conventions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = GridModel::initialized(8, 8, 1, (5.0, 5.0), 0, &mut rng).unwrap();
        let hd = m.head_dim();
        assert_eq!(m.weights[hd - 1], -2.0);
        for k in 1..HEADS {
            assert_eq!(m.weights[k * hd + hd - 1], 0.0);
        }
        assert!(m.weights.iter().all(|w| w.abs() <= 2.0));
        assert!(m.weights[..hd - 1].iter().all(|w| w.abs() <= 0.01));
    }

    #[test]
    fn translation_by_one_stride_shifts_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = GridModel::initialized(8, 16, 1, (8.0, 8.0), 0, &mut rng).unwrap();
        let n = 64;
        let base: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        let img = Image::from_data(n, n, 1, base.clone()).unwrap();
        // periodic shift right by one stride
        let mut shifted = Image::new(n, n, 1);
        for y in 0..n {
            for x in 0..n {
                shifted.set((x + 8) % n, y, 0, img.get(x, y, 0));
            }
        }
        let a = forward(&img, &m);
        let b = forward(&shifted, &m);
        // interior cells whose patches stay clear of the borders
        for row in 1..a.rows - 1 {
            for col in 1..a.cols - 2 {
                let sa = a.scores[row * a.cols + col];
                let sb = b.scores[row * b.cols + col + 1];
                assert!((sa - sb).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn assign_decode_round_trip(
            cx in 1.0..127.0f64, cy in 1.0..127.0f64,
            w in 4.0..60.0f64, h in 4.0..60.0f64,
        ) {
            let m = GridModel::zeros(16, 16, 1, (20.0, 20.0), 0).unwrap();
            let b = BBox::from_center(cx, cy, w, h);
            let a = assign_targets(&LabelSet::seeds("p", [b]), 128, 128, &m);
            let (idx, t) = a.cells.iter().enumerate().find_map(|(i, c)| match c {
                CellTarget::Positive(t) => Some((i, *t)),
                _ => None,
            }).unwrap();
            let d = m.decode_target(idx % a.cols, idx / a.cols, &t);
            let (dx, dy) = d.center();
            prop_assert!((dx - cx).abs() < 1e-9 && (dy - cy).abs() < 1e-9);
            prop_assert!(((d.w - w) / w).abs() < 1e-9 && ((d.h - h) / h).abs() < 1e-9);
        }
    }
}
