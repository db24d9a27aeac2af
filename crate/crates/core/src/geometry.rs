//! Axis-aligned boxes, intersection-over-union and greedy non-maximum
//! suppression.
//!
//! Boxes are `(x, y, w, h)` in continuous pixel units with the origin at the
//! top-left corner and `y` growing downward.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    /// Finite coordinates and strictly positive extent.
    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection with the rectangle `[x0, x1] x [y0, y1]`; `None` when
    /// nothing of positive area remains.
    pub fn clip(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<BBox> {
        if self.x >= x0 && self.y >= y0 && self.right() <= x1 && self.bottom() <= y1 {
            return Some(*self);
        }
        let left = self.x.max(x0);
        let top = self.y.max(y0);
        let right = self.right().min(x1);
        let bottom = self.bottom().min(y1);
        (right > left && bottom > top).then(|| BBox::new(left, top, right - left, bottom - top))
    }

    /// Lexicographic order on `(x, y, w, h)`.
    pub fn lex_cmp(&self, other: &BBox) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub const fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, score }
    }

    /// Score descending, then box coordinates ascending.
    pub fn rank_cmp(&self, other: &ScoredBox) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.bbox.lex_cmp(&other.bbox))
    }
}

/// Intersection area over union area. Boxes that only touch share no area and
/// have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    // Extents recomputed from the corners so that iou(a, a) is exactly 1.
    let extent = |r: &BBox| (r.right() - r.x) * (r.bottom() - r.y);
    let union = extent(a) + extent(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score (ties broken by coordinates);
/// each kept box removes every remaining box whose IoU with it exceeds
/// `iou_threshold`. The result is in visiting order.
pub fn nms(candidates: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let mut order: Vec<ScoredBox> = candidates.to_vec();
    order.sort_by(ScoredBox::rank_cmp);
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        let keep = order[i];
        kept.push(keep);
        for j in i + 1..order.len() {
            if !suppressed[j] && iou(&keep.bbox, &order[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sb(x: f64, y: f64, w: f64, h: f64, score: f64) -> ScoredBox {
        ScoredBox::new(BBox::new(x, y, w, h), score)
    }

    #[test]
    fn iou_identity_disjoint_and_partial() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 5.0, 5.0)), 0.0);
        let expected = 25.0 / 175.0;
        assert!((iou(&a, &BBox::new(5.0, 5.0, 10.0, 10.0)) - expected).abs() < 1e-15);
    }

    #[test]
    fn touching_edges_have_zero_iou() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 0.0, 10.0, 10.0)), 0.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 10.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn nms_hand_traced() {
        // b2 shifted so that iou(b1, b2) = 0.5: overlap 10x(20-s)/(10x(20+s)) = 0.5 at s = 20/3
        let b1 = sb(0.0, 0.0, 20.0, 10.0, 0.9);
        let b2 = sb(20.0 / 3.0, 0.0, 20.0, 10.0, 0.8);
        assert!((iou(&b1.bbox, &b2.bbox) - 0.5).abs() < 1e-12);
        let b3 = sb(100.0, 100.0, 10.0, 10.0, 0.7);
        assert_eq!(nms(&[b3, b2, b1], 0.2), vec![b1, b3]);
    }

    #[test]
    fn nms_trivial_cases() {
        assert!(nms(&[], 0.2).is_empty());
        let one = sb(1.0, 2.0, 3.0, 4.0, 0.5);
        assert_eq!(nms(&[one], 0.2), vec![one]);
        let lo = sb(0.0, 0.0, 5.0, 5.0, 0.3);
        let hi = sb(50.0, 50.0, 5.0, 5.0, 0.6);
        for t in [0.01, 0.5, 1.0] {
            assert_eq!(nms(&[lo, hi], t), vec![hi, lo]);
        }
    }

    #[test]
    fn nms_ties_break_on_coordinates() {
        let a = sb(0.0, 0.0, 10.0, 10.0, 0.5);
        let b = sb(1.0, 0.0, 10.0, 10.0, 0.5);
        assert_eq!(nms(&[b, a], 0.2), vec![a]);
        assert_eq!(nms(&[a, b], 0.2), vec![a]);
    }

    #[test]
    fn clip_and_within() {
        let b = BBox::new(-5.0, 2.0, 10.0, 10.0);
        assert!(!b.within(20.0, 20.0));
        assert_eq!(b.clip(0.0, 0.0, 20.0, 20.0), Some(BBox::new(0.0, 2.0, 5.0, 10.0)));
        assert_eq!(b.clip(30.0, 0.0, 40.0, 20.0), None);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn nms_kept_pairs_below_threshold(
            boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..30),
            t in 0.05..1.0f64,
        ) {
            let cands: Vec<ScoredBox> = boxes.iter().map(|&(b, s)| ScoredBox::new(b, s)).collect();
            let kept = nms(&cands, t);
            for (i, p) in kept.iter().enumerate() {
                prop_assert!(cands.contains(p));
                for q in &kept[i + 1..] {
                    prop_assert!(iou(&p.bbox, &q.bbox) <= t);
                    prop_assert!(p.score >= q.score);
                }
            }
        }
    }
}
