//! Annotation files, incomplete-label subsampling and synthetic scenes.
//!
//! Annotations are JSON Lines, one image per line:
//!
//! ```text
//! {"image": "scene_0000.pgm", "width": 256, "height": 256, "boxes": [{"x": 1.5, "y": 2, "w": 20, "h": 22}]}
//! ```
//!
//! Image paths are relative to the annotation file.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub image: Image,
    /// Full ground truth, possibly empty.
    pub boxes: Vec<BBox>,
}

impl ImageRecord {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Seed,
    /// Added by the merge that closed stage `s`.
    Propagated(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub provenance: Provenance,
}

/// Known-positive boxes of one image at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub image_id: String,
    pub stage: u32,
    pub boxes: Vec<LabeledBox>,
}

impl LabelSet {
    pub fn seeds(image_id: impl Into<String>, boxes: impl IntoIterator<Item = BBox>) -> Self {
        Self {
            image_id: image_id.into(),
            stage: 1,
            boxes: boxes
                .into_iter()
                .map(|bbox| LabeledBox {
                    bbox,
                    provenance: Provenance::Seed,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn bboxes(&self) -> impl Iterator<Item = &BBox> + '_ {
        self.boxes.iter().map(|b| &b.bbox)
    }

    pub fn seed_boxes(&self) -> impl Iterator<Item = &BBox> + '_ {
        self.boxes
            .iter()
            .filter(|b| b.provenance == Provenance::Seed)
            .map(|b| &b.bbox)
    }
}

/// Either every available item or at most `n` of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Limit {
    All,
    AtMost(usize),
}

impl Limit {
    pub fn take(self, available: usize) -> usize {
        match self {
            Limit::All => available,
            Limit::AtMost(n) => n.min(available),
        }
    }
}

impl fmt::Display for Limit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Limit::All => f.write_str("ALL"),
            Limit::AtMost(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for Limit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Limit::All => s.serialize_str("ALL"),
            Limit::AtMost(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Limit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct LimitVisitor;
        impl Visitor<'_> for LimitVisitor {
            type Value = Limit;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive integer or \"ALL\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Limit, E> {
                if v == 0 {
                    return Err(E::custom("limit must be positive"));
                }
                Ok(Limit::AtMost(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Limit, E> {
                if v <= 0 {
                    return Err(E::custom("limit must be positive"));
                }
                self.visit_u64(v as u64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Limit, E> {
                if v.eq_ignore_ascii_case("all") {
                    Ok(Limit::All)
                } else {
                    v.parse::<u64>()
                        .map_err(|_| E::custom(format!("invalid limit {v:?}")))
                        .and_then(|n| self.visit_u64(n))
                }
            }
        }
        d.deserialize_any(LimitVisitor)
    }
}

/// Which images and how many boxes per image keep their labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub num_images: Limit,
    pub boxes_per_image: Limit,
    #[serde(default)]
    pub rng_seed: u64,
}

impl SubsampleSpec {
    pub fn full() -> Self {
        Self {
            num_images: Limit::All,
            boxes_per_image: Limit::All,
            rng_seed: 0,
        }
    }

    pub fn is_full(&self) -> bool {
        self.num_images == Limit::All && self.boxes_per_image == Limit::All
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub objects_per_image: [usize; 2],
    pub object_size: [f64; 2],
    pub object_intensity: [f64; 2],
    pub background_noise: f64,
    pub max_pairwise_iou: f64,
    pub rng_seed: u64,
    #[serde(default = "default_background_intensity")]
    pub background_intensity: f64,
    /// Per-pixel texture noise inside objects.
    #[serde(default = "default_object_texture")]
    pub object_texture: f64,
    /// Unlabeled round blobs per image; never part of the ground truth.
    #[serde(default)]
    pub distractors: usize,
}

fn default_background_intensity() -> f64 {
    0.3
}

fn default_object_texture() -> f64 {
    0.04
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            objects_per_image: [18, 22],
            object_size: [20.0, 26.0],
            object_intensity: [0.75, 0.85],
            background_noise: 0.04,
            max_pairwise_iou: 0.0,
            rng_seed: 0,
            background_intensity: default_background_intensity(),
            object_texture: default_object_texture(),
            distractors: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("scene spec: {m}")));
        if self.image_size == 0 {
            return bad("image_size must be positive");
        }
        if self.objects_per_image[0] > self.objects_per_image[1] {
            return bad("objects_per_image range is reversed");
        }
        let [smin, smax] = self.object_size;
        if !(smin > 0.0 && smin <= smax && smax < self.image_size as f64) {
            return bad("object_size must satisfy 0 < min <= max < image_size");
        }
        let [imin, imax] = self.object_intensity;
        if !(0.0..=1.0).contains(&imin) || !(0.0..=1.0).contains(&imax) || imin > imax {
            return bad("object_intensity must be an ordered range within [0, 1]");
        }
        if self.background_noise < 0.0 || self.object_texture < 0.0 {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.max_pairwise_iou) {
            return bad("max_pairwise_iou must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationLine {
    pub image: String,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub boxes: Vec<BBox>,
}

fn validate_boxes(image_id: &str, width: usize, height: usize, boxes: &[BBox]) -> Result<()> {
    for (index, b) in boxes.iter().enumerate() {
        if !b.is_valid() || !b.within(width as f64, height as f64) {
            return Err(Error::BoxOutOfBounds {
                image_id: image_id.to_string(),
                index,
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
                width,
                height,
            });
        }
    }
    Ok(())
}

/// Parses and validates an annotation file without touching image files.
pub fn parse_annotations(path: &Path) -> Result<Vec<AnnotationLine>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AnnotationLine = serde_json::from_str(&line).map_err(|e| Error::Annotation {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        validate_boxes(&parsed.image, parsed.width, parsed.height, &parsed.boxes)?;
        lines.push(parsed);
    }
    Ok(lines)
}

/// Loads an annotation file and every image it references.
pub fn load_annotations(path: &Path) -> Result<Vec<ImageRecord>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_annotations(path)?
        .into_iter()
        .map(|a| {
            let image = Image::read_pnm(&base.join(&a.image))?;
            if image.width != a.width || image.height != a.height {
                return Err(Error::InvalidArgument(format!(
                    "image {} is {}x{} but annotated as {}x{}",
                    a.image, image.width, image.height, a.width, a.height
                )));
            }
            Ok(ImageRecord {
                image_id: a.image,
                image,
                boxes: a.boxes,
            })
        })
        .collect()
}

pub fn write_annotations(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = AnnotationLine {
            image: r.image_id.clone(),
            width: r.width(),
            height: r.height(),
            boxes: r.boxes.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes every image under `dir` at its `image_id` and an annotation file
/// named `annotation_file` beside them.
pub fn write_dataset(dir: &Path, annotation_file: &str, records: &[ImageRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in records {
        let p = dir.join(&r.image_id);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        r.image.write_pnm(&p)?;
    }
    write_annotations(&dir.join(annotation_file), records)
}

/// Keeps `num_images` random images and, per image, `boxes_per_image` random
/// boxes as the stage-1 seed labels. Records are sorted by `image_id` first,
/// so the outcome does not depend on input order.
pub fn subsample(
    records: &[ImageRecord],
    spec: &SubsampleSpec,
) -> Result<(Vec<(ImageRecord, LabelSet)>, Vec<ImageRecord>)> {
    let mut sorted: Vec<&ImageRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if let Limit::AtMost(n) = spec.num_images {
        if n > sorted.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot select {n} images from {}",
                sorted.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let take = spec.num_images.take(sorted.len());
    let mut chosen = index::sample(&mut rng, sorted.len(), take).into_vec();
    chosen.sort_unstable();
    let mut selected = vec![false; sorted.len()];
    let mut train = Vec::with_capacity(take);
    for &i in &chosen {
        selected[i] = true;
        let rec = sorted[i];
        let k = spec.boxes_per_image.take(rec.boxes.len());
        let mut picks = index::sample(&mut rng, rec.boxes.len(), k).into_vec();
        picks.sort_unstable();
        let labels = LabelSet::seeds(rec.image_id.clone(), picks.iter().map(|&j| rec.boxes[j]));
        train.push((rec.clone(), labels));
    }
    let discarded = sorted
        .iter()
        .zip(&selected)
        .filter(|(_, &s)| !s)
        .map(|(r, _)| (*r).clone())
        .collect();
    Ok((train, discarded))
}

const PLACEMENT_ATTEMPTS_PER_OBJECT: usize = 2000;

/// Synthetic images with `objects_per_image` textured rectangles each, ids
/// `scene_0000.pgm`, `scene_0001.pgm`, ...
pub fn generate_scenes(spec: &SceneSpec, count: usize) -> Result<Vec<ImageRecord>> {
    generate_images(spec, count, "scene", true)
}

/// Object-free images drawn from the same background process, ids
/// `background_0000.pgm`, ...
pub fn generate_background_pool(spec: &SceneSpec, count: usize) -> Result<Vec<ImageRecord>> {
    generate_images(spec, count, "background", false)
}

/// Shared generator. Every image draws from its own stream seeded from
/// `spec.rng_seed` and `prefix`, so sets with distinct prefixes are
/// independent.
pub fn generate_images(
    spec: &SceneSpec,
    count: usize,
    prefix: &str,
    with_objects: bool,
) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    let mut seeder = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ fnv1a(prefix.as_bytes()));
    let seeds: Vec<u64> = (0..count).map(|_| seeder.next_u64()).collect();
    seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            render_scene(spec, &mut rng, i, with_objects).map(|(image, boxes)| ImageRecord {
                image_id: format!("{prefix}_{i:04}.pgm"),
                image,
                boxes,
            })
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Fraction of pixel `[p, p+1)` covered by `[lo, hi]`.
fn coverage(p: usize, lo: f64, hi: f64) -> f64 {
    let p = p as f64;
    (hi.min(p + 1.0) - lo.max(p)).max(0.0)
}

fn paint_rect(img: &mut Image, b: &BBox, value: impl Fn(usize, usize) -> f64) {
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = (b.right().ceil() as usize).min(img.width);
    let y1 = (b.bottom().ceil() as usize).min(img.height);
    for y in y0..y1 {
        let cy = coverage(y, b.y, b.bottom());
        for x in x0..x1 {
            let alpha = coverage(x, b.x, b.right()) * cy;
            if alpha > 0.0 {
                let old = img.get(x, y, 0);
                img.set(x, y, 0, old * (1.0 - alpha) + value(x, y) * alpha);
            }
        }
    }
}

fn render_scene(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
    image_index: usize,
    with_objects: bool,
) -> Result<(Image, Vec<BBox>)> {
    let size = spec.image_size;
    let mut img = Image::filled(size, size, 1, spec.background_intensity);

    // low-frequency shading so backgrounds are not flat
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.5..3.0) * std::f64::consts::TAU / size as f64;
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (freq * angle.cos(), freq * angle.sin(), phase, rng.random_range(0.0..0.03))
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let shade: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            img.set(x, y, 0, spec.background_intensity + shade);
        }
    }

    for _ in 0..spec.distractors {
        let r = uniform(rng, spec.object_size) * 0.3;
        let cx = rng.random_range(r..size as f64 - r);
        let cy = rng.random_range(r..size as f64 - r);
        let v = uniform(rng, spec.object_intensity);
        for y in 0..size {
            for x in 0..size {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                let alpha = (r + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let old = img.get(x, y, 0);
                    img.set(x, y, 0, old * (1.0 - alpha) + v * alpha);
                }
            }
        }
    }

    let mut boxes: Vec<BBox> = Vec::new();
    if with_objects {
        let [lo, hi] = spec.objects_per_image;
        let n = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let budget = PLACEMENT_ATTEMPTS_PER_OBJECT * n.max(1);
        let mut attempts = 0;
        while boxes.len() < n {
            if attempts == budget {
                return Err(Error::SceneTooDense {
                    image_index,
                    requested: n,
                    attempts,
                });
            }
            attempts += 1;
            let w = uniform(rng, spec.object_size);
            let h = uniform(rng, spec.object_size);
            let x = rng.random_range(0.0..=size as f64 - w);
            let y = rng.random_range(0.0..=size as f64 - h);
            let cand = BBox::new(x, y, w, h);
            if boxes.iter().all(|b| iou(b, &cand) <= spec.max_pairwise_iou) {
                boxes.push(cand);
            }
        }
        let texture = Normal::new(0.0, spec.object_texture.max(1e-12)).expect("finite std");
        for b in &boxes {
            let body = uniform(rng, spec.object_intensity);
            let window = body * 0.55;
            let noise: Vec<f64> = (0..(b.w.ceil() as usize + 2) * (b.h.ceil() as usize + 2))
                .map(|_| texture.sample(rng))
                .collect();
            let stride = b.w.ceil() as usize + 2;
            let (bx, by) = (b.x.floor() as usize, b.y.floor() as usize);
            let tex = |x: usize, y: usize| noise[(y - by) * stride + (x - bx)];
            paint_rect(&mut img, b, |x, y| body + tex(x, y));
            let inner = BBox::from_center(b.center().0, b.center().1, b.w * 0.5, b.h * 0.4);
            paint_rect(&mut img, &inner, |x, y| window + tex(x, y));
        }
    }

    if spec.background_noise > 0.0 {
        let noise = Normal::new(0.0, spec.background_noise).expect("finite std");
        for v in &mut img.data {
            *v += noise.sample(rng);
        }
    }
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
    img.quantize_u8();
    Ok((img, boxes))
}
