//! Training-time augmentation.
//!
//! Geometric steps run in the order rotation, resize, aspect distortion,
//! crop; an intensity jitter follows. Quarter-turn rotations permute pixels
//! exactly; other angles are resampled bilinearly on the same canvas.
//! Rotated boxes become the axis-aligned hull of their rotated corners.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelSet, LabeledBox};
use crate::geometry::BBox;
use crate::image::Image;

/// Boxes keeping less than this fraction of their area after clipping are
/// dropped.
pub const MIN_KEPT_AREA_FRACTION: f64 = 0.3;

/// Reference test-time side length the default scale range is defined
/// against.
pub const REFERENCE_SIDE: f64 = 1248.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityJitter {
    pub additive: [f64; 2],
    pub multiplicative: [f64; 2],
}

impl IntensityJitter {
    pub fn none() -> Self {
        Self {
            additive: [0.0, 0.0],
            multiplicative: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Range the longer image side is resized to, in pixels.
    pub scale_long_side: [f64; 2],
    pub crop_size: usize,
    /// Width/height ratio multiplier range.
    pub aspect_jitter: [f64; 2],
    pub intensity_jitter: IntensityJitter,
    pub rotation_enabled: bool,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_long_side: [832.0, 1664.0],
            crop_size: 416,
            aspect_jitter: [0.8, 1.25],
            intensity_jitter: IntensityJitter {
                additive: [-0.05, 0.05],
                multiplicative: [0.85, 1.15],
            },
            rotation_enabled: true,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Default ranges rescaled for images whose test-time side is
    /// `image_side` instead of 1248 pixels.
    pub fn scaled_for(image_side: usize) -> Self {
        let f = image_side as f64 / REFERENCE_SIDE;
        let base = Self::default();
        Self {
            scale_long_side: [base.scale_long_side[0] * f, base.scale_long_side[1] * f],
            crop_size: (base.crop_size as f64 * f).round().max(1.0) as usize,
            ..base
        }
    }

    /// No-op augmentation for `width x height` images.
    pub fn identity(width: usize, height: usize) -> Self {
        let long = width.max(height) as f64;
        Self {
            scale_long_side: [long, long],
            crop_size: width.max(height),
            aspect_jitter: [1.0, 1.0],
            intensity_jitter: IntensityJitter::none(),
            rotation_enabled: false,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationMode {
    Upright,
    QuarterTurn,
    SmallTilt,
    Arbitrary,
}

/// Draws a rotation angle in degrees from four equally likely samplers:
/// none, a random quarter turn, a tilt within 10 degrees on top of a random
/// quarter turn, or any angle.
pub fn sample_rotation(rng: &mut impl Rng) -> f64 {
    sample_rotation_mode(rng).1
}

pub fn sample_rotation_mode(rng: &mut impl Rng) -> (RotationMode, f64) {
    let quarter = |rng: &mut dyn rand::RngCore| 90.0 * rng.random_range(0..4u32) as f64;
    match rng.random_range(0..4u32) {
        0 => (RotationMode::Upright, 0.0),
        1 => (
            RotationMode::QuarterTurn,
            90.0 * rng.random_range(1..4u32) as f64,
        ),
        2 => {
            let tilt = rng.random_range(-10.0..=10.0);
            let angle = (quarter(rng) + tilt).rem_euclid(360.0);
            (RotationMode::SmallTilt, angle)
        }
        _ => (RotationMode::Arbitrary, rng.random_range(0.0..360.0)),
    }
}

/// Concrete draw of every random choice made by [`augment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub angle: f64,
    pub long_side: f64,
    pub aspect: f64,
    /// Crop origin in resized-image pixels; negative values pad.
    pub crop_x: f64,
    pub crop_y: f64,
    pub crop_size: usize,
    pub multiplicative: f64,
    pub additive: f64,
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Splits an angle into quarter turns and a residual in `[-45, 45]`.
fn split_angle(angle: f64) -> (u32, f64) {
    let turns = (angle / 90.0).round();
    let residual = angle - 90.0 * turns;
    ((turns as i64).rem_euclid(4) as u32, residual)
}

pub fn sample_params(
    width: usize,
    height: usize,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> AugmentParams {
    let angle = if config.rotation_enabled {
        sample_rotation(rng)
    } else {
        0.0
    };
    let (turns, _) = split_angle(angle);
    let (w, h) = if turns % 2 == 1 {
        (height, width)
    } else {
        (width, height)
    };
    let long_side = uniform(rng, config.scale_long_side);
    let aspect = uniform(rng, config.aspect_jitter);
    let (sx, sy) = scale_factors(w, h, long_side, aspect);
    let crop = config.crop_size as f64;
    let mut origin = |extent: f64| {
        let free = extent - crop;
        uniform(rng, [free.min(0.0), free.max(0.0)])
    };
    let crop_x = origin(w as f64 * sx);
    let crop_y = origin(h as f64 * sy);
    AugmentParams {
        angle,
        long_side,
        aspect,
        crop_x,
        crop_y,
        crop_size: config.crop_size,
        multiplicative: uniform(rng, config.intensity_jitter.multiplicative),
        additive: uniform(rng, config.intensity_jitter.additive),
    }
}

fn scale_factors(w: usize, h: usize, long_side: f64, aspect: f64) -> (f64, f64) {
    let s = long_side / w.max(h) as f64;
    let r = aspect.sqrt();
    (s * r, s / r)
}

/// Augments one image and its labels with a fresh draw from `rng`.
pub fn augment(
    image: &Image,
    labels: &LabelSet,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Image, LabelSet) {
    let params = sample_params(image.width, image.height, config, rng);
    apply(image, labels, &params)
}

/// Rotates pixels and boxes counter-clockwise (as displayed) by `angle`
/// degrees about the image center. Quarter turns change the canvas shape;
/// the residual tilt keeps it. Returned boxes are unclipped hulls together
/// with their clipped version, if any area remains on the canvas.
pub fn rotate(image: &Image, boxes: &[BBox], angle: f64) -> (Image, Vec<(BBox, Option<BBox>)>) {
    let (turns, residual) = split_angle(angle);
    let mut img = image.rotate_quarter_turns(turns);
    let mut out: Vec<BBox> = boxes
        .iter()
        .map(|b| rotate_box_quarter_turns(b, turns, image.width as f64, image.height as f64))
        .collect();
    if residual != 0.0 {
        img = rotate_pixels(&img, residual);
        let (cx, cy) = (img.width as f64 / 2.0, img.height as f64 / 2.0);
        out = out.iter().map(|b| rotate_box_hull(b, residual, cx, cy)).collect();
    }
    let (w, h) = (img.width as f64, img.height as f64);
    let paired = out.into_iter().map(|b| (b, b.clip(0.0, 0.0, w, h))).collect();
    (img, paired)
}

/// Exact box image under `turns` quarter turns of a `w x h` canvas.
pub fn rotate_box_quarter_turns(b: &BBox, turns: u32, w: f64, h: f64) -> BBox {
    match turns % 4 {
        0 => *b,
        1 => BBox::new(b.y, w - b.x - b.w, b.h, b.w),
        2 => BBox::new(w - b.x - b.w, h - b.y - b.h, b.w, b.h),
        _ => BBox::new(h - b.y - b.h, b.x, b.h, b.w),
    }
}

/// Maps a point by a counter-clockwise (as displayed) rotation of `deg`
/// about `(cx, cy)`.
fn rotate_point(x: f64, y: f64, deg: f64, cx: f64, cy: f64) -> (f64, f64) {
    let (s, c) = deg.to_radians().sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    (cx + dx * c + dy * s, cy - dx * s + dy * c)
}

fn rotate_box_hull(b: &BBox, deg: f64, cx: f64, cy: f64) -> BBox {
    let corners = [
        (b.x, b.y),
        (b.right(), b.y),
        (b.x, b.bottom()),
        (b.right(), b.bottom()),
    ]
    .map(|(x, y)| rotate_point(x, y, deg, cx, cy));
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (x, y) in corners {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

fn rotate_pixels(img: &Image, deg: f64) -> Image {
    let fill = img.mean();
    let (cx, cy) = (img.width as f64 / 2.0, img.height as f64 / 2.0);
    let mut out = Image::new(img.width, img.height, img.channels);
    for y in 0..img.height {
        for x in 0..img.width {
            // inverse map: destination pixel center back into the source
            let (sx, sy) = rotate_point(x as f64 + 0.5, y as f64 + 0.5, -deg, cx, cy);
            for c in 0..img.channels {
                out.set(x, y, c, img.sample_bilinear(sx, sy, c, fill));
            }
        }
    }
    out
}

/// Applies a fixed parameter draw.
pub fn apply(image: &Image, labels: &LabelSet, p: &AugmentParams) -> (Image, LabelSet) {
    let raw: Vec<BBox> = labels.bboxes().copied().collect();
    let (rotated, boxes) = rotate(image, &raw, p.angle);
    let (sx, sy) = scale_factors(rotated.width, rotated.height, p.long_side, p.aspect);
    let crop = p.crop_size;
    let fill = rotated.mean();

    let mut out = Image::new(crop, crop, rotated.channels);
    for y in 0..crop {
        let src_y = (p.crop_y + y as f64 + 0.5) / sy;
        for x in 0..crop {
            let src_x = (p.crop_x + x as f64 + 0.5) / sx;
            for c in 0..rotated.channels {
                let v = rotated.sample_bilinear(src_x, src_y, c, fill);
                let v = if p.multiplicative == 1.0 && p.additive == 0.0 {
                    v
                } else {
                    (v * p.multiplicative + p.additive).clamp(0.0, 1.0)
                };
                out.set(x, y, c, v);
            }
        }
    }

    let size = crop as f64;
    let kept = labels
        .boxes
        .iter()
        .zip(boxes)
        .filter_map(|(lb, (hull, on_canvas))| {
            let on_canvas = on_canvas?;
            let map = |b: &BBox| BBox::new(b.x * sx - p.crop_x, b.y * sy - p.crop_y, b.w * sx, b.h * sy);
            let reference = hull.area() * sx * sy;
            let clipped = map(&on_canvas).clip(0.0, 0.0, size, size)?;
            (clipped.area() >= MIN_KEPT_AREA_FRACTION * reference).then_some(LabeledBox {
                bbox: clipped,
                provenance: lb.provenance,
            })
        })
        .collect();
    (
        out,
        LabelSet {
            image_id: labels.image_id.clone(),
            stage: labels.stage,
            boxes: kept,
        },
    )
}
