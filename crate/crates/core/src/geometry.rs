//! Axis-aligned lesion boxes, overlap measures and greedy non-maximum suppression.
//!
//! A center-size box `(cx, cy, w, h)` covers the half-open continuous region
//! `[cx - w/2, cx + w/2) x [cy - h/2, cy + h/2)`. All areas are continuous.
//! 3D boxes add an inclusive slice range; each slice counts as unit thickness.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Box2D { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from its left, top, right and bottom edges.
    pub fn from_ltrb(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self> {
        Box2D::new(
            (left + right) / 2.0,
            (top + bottom) / 2.0,
            right - left,
            bottom - top,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!("box must have positive size, got {self:?}")));
        }
        Ok(())
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Same center, both sides multiplied by `ratio`.
    pub fn scaled_about_center(&self, ratio: f64) -> Box2D {
        Box2D { cx: self.cx, cy: self.cy, w: self.w * ratio, h: self.h * ratio }
    }

    pub fn intersection_area(&self, other: &Box2D) -> f64 {
        let w = (self.right().min(other.right()) - self.left().max(other.left())).max(0.0);
        let h = (self.bottom().min(other.bottom()) - self.top().max(other.top())).max(0.0);
        w * h
    }

    /// Whether the point lies in the half-open box region.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.left() && x < self.right() && y >= self.top() && y < self.bottom()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub z_min: i64,
    pub z_max: i64,
}

impl Box3D {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, z_min: i64, z_max: i64) -> Result<Self> {
        Box2D::new(cx, cy, w, h)?;
        if z_min > z_max {
            return Err(Error::invalid(format!("z_min {z_min} > z_max {z_max}")));
        }
        Ok(Box3D { cx, cy, w, h, z_min, z_max })
    }

    pub fn from_2d(b: &Box2D, z_min: i64, z_max: i64) -> Result<Self> {
        Box3D::new(b.cx, b.cy, b.w, b.h, z_min, z_max)
    }

    pub fn footprint(&self) -> Box2D {
        Box2D { cx: self.cx, cy: self.cy, w: self.w, h: self.h }
    }

    pub fn depth(&self) -> i64 {
        self.z_max - self.z_min + 1
    }

    pub fn volume(&self) -> f64 {
        self.w * self.h * self.depth() as f64
    }

    pub fn contains_slice(&self, slice: i64) -> bool {
        slice >= self.z_min && slice <= self.z_max
    }

    pub fn center_z(&self) -> f64 {
        (self.z_min + self.z_max) as f64 / 2.0
    }

    pub fn intersection_volume(&self, other: &Box3D) -> f64 {
        let dz = (self.z_max.min(other.z_max) - self.z_min.max(other.z_min) + 1).max(0);
        self.footprint().intersection_area(&other.footprint()) * dz as f64
    }
}

/// A 2D detection on one slice, attributed to the dataset expert that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub score: f64,
    pub slice: i64,
    pub expert_id: String,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl ScoredBox {
    pub fn new(bbox: Box2D, score: f64, slice: i64, expert_id: impl Into<String>) -> Self {
        ScoredBox {
            bbox,
            score,
            slice,
            expert_id: expert_id.into(),
            source_id: String::new(),
            embedding: None,
        }
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }
}

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection volume over the *proposal's* volume. Not symmetric.
pub fn iobb_3d(proposal: &Box3D, gt: &Box3D) -> f64 {
    let inter = proposal.intersection_volume(gt);
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / proposal.volume()).clamp(0.0, 1.0)
}

/// Descending score; equal scores keep ascending input order.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Indices of the boxes kept by greedy NMS, in descending score order.
pub fn nms_indices(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let scores: Vec<f64> = boxes.iter().map(|b| b.score).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(&scores) {
        let suppressed = kept
            .iter()
            .any(|&k| iou_2d(&boxes[k].bbox, &boxes[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Greedy non-maximum suppression. A box is dropped iff its IoU with an
/// already-kept box exceeds `iou_threshold`.
pub fn nms_2d(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    nms_indices(boxes, iou_threshold)
        .into_iter()
        .map(|i| boxes[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> Box2D {
        Box2D::new(cx, cy, w, h).unwrap()
    }

    /// Counts unit cells of a `1/res` grid covered by each box. Exact when all
    /// edges lie on the grid.
    fn raster_iou(a: &Box2D, bb: &Box2D, res: f64) -> f64 {
        let lo_x = a.left().min(bb.left());
        let hi_x = a.right().max(bb.right());
        let lo_y = a.top().min(bb.top());
        let hi_y = a.bottom().max(bb.bottom());
        let nx = ((hi_x - lo_x) * res).round() as i64;
        let ny = ((hi_y - lo_y) * res).round() as i64;
        let (mut inter, mut union) = (0u64, 0u64);
        for ix in 0..nx {
            for iy in 0..ny {
                let x = lo_x + (ix as f64 + 0.5) / res;
                let y = lo_y + (iy as f64 + 0.5) / res;
                let (ina, inb) = (a.contains_point(x, y), bb.contains_point(x, y));
                if ina && inb {
                    inter += 1;
                }
                if ina || inb {
                    union += 1;
                }
            }
        }
        inter as f64 / union as f64
    }

    fn voxel_iobb(p: &Box3D, g: &Box3D, res: f64) -> f64 {
        let (pf, gf) = (p.footprint(), g.footprint());
        let nx = (p.w * res).round() as i64;
        let ny = (p.h * res).round() as i64;
        let mut inside = 0u64;
        let mut total = 0u64;
        for z in p.z_min..=p.z_max {
            for ix in 0..nx {
                for iy in 0..ny {
                    let x = pf.left() + (ix as f64 + 0.5) / res;
                    let y = pf.top() + (iy as f64 + 0.5) / res;
                    total += 1;
                    if g.contains_slice(z) && gf.contains_point(x, y) {
                        inside += 1;
                    }
                }
            }
        }
        inside as f64 / total as f64
    }

    /// Exhaustive fixed-point formulation: a box survives iff no higher-ranked
    /// surviving box overlaps it. Iterated over the whole set until stable.
    fn brute_force_nms(boxes: &[ScoredBox], thr: f64) -> Vec<usize> {
        let n = boxes.len();
        let rank_before = |i: usize, j: usize| {
            boxes[j].score > boxes[i].score || (boxes[j].score == boxes[i].score && j < i)
        };
        let mut keep = vec![true; n];
        loop {
            let next: Vec<bool> = (0..n)
                .map(|i| {
                    !(0..n).any(|j| {
                        j != i
                            && rank_before(i, j)
                            && keep[j]
                            && iou_2d(&boxes[i].bbox, &boxes[j].bbox) > thr
                    })
                })
                .collect();
            if next == keep {
                break;
            }
            keep = next;
        }
        let mut idx: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
        idx.sort_by(|&i, &j| {
            if rank_before(j, i) {
                Ordering::Less
            } else {
                Ordering::Greater
            }
        });
        idx
    }

    #[test]
    fn iou_examples() {
        let a = b(5.0, 5.0, 10.0, 10.0);
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&b(0.0, 0.0, 10.0, 10.0), &b(100.0, 0.0, 10.0, 10.0)), 0.0);
        let shifted = b(10.0, 5.0, 10.0, 10.0);
        let oracle = raster_iou(&a, &shifted, 1.0);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou_2d(&a, &shifted) - oracle).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(Box2D::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Box2D::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(Box3D::new(0.0, 0.0, 1.0, 1.0, 3, 2).is_err());
    }

    #[test]
    fn iobb_examples_and_asymmetry() {
        let gt = Box3D::new(50.0, 50.0, 40.0, 40.0, 0, 9).unwrap();
        let inner = Box3D::new(50.0, 50.0, 10.0, 10.0, 2, 4).unwrap();
        assert_eq!(iobb_3d(&inner, &gt), 1.0);

        let big = Box3D::new(50.0, 50.0, 40.0, 40.0, 0, 9).unwrap();
        let half = Box3D::new(50.0, 50.0, 20.0, 20.0, 0, 9).unwrap();
        assert!((iobb_3d(&big, &half) - 0.25).abs() < 1e-12);
        // the reverse direction is full containment
        assert_eq!(iobb_3d(&half, &big), 1.0);
    }

    #[test]
    fn nms_examples() {
        let x = b(10.0, 10.0, 10.0, 10.0);
        let boxes = vec![ScoredBox::new(x, 0.8, 0, "e"), ScoredBox::new(x, 0.9, 0, "e")];
        let kept = nms_2d(&boxes, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let boxes = vec![
            ScoredBox::new(x, 0.8, 0, "e"),
            ScoredBox::new(b(200.0, 10.0, 10.0, 10.0), 0.9, 0, "e"),
        ];
        assert_eq!(nms_2d(&boxes, 0.5).len(), 2);
    }

    #[test]
    fn nms_ties_break_by_input_index() {
        let x = b(10.0, 10.0, 10.0, 10.0);
        let boxes = vec![
            ScoredBox::new(x, 0.5, 0, "e").with_source("first"),
            ScoredBox::new(x, 0.5, 0, "e").with_source("second"),
        ];
        let kept = nms_2d(&boxes, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].source_id, "first");
    }

    #[test]
    fn raising_threshold_can_shrink_kept_set() {
        // B overlaps A at IoU 0.6; C and D are the upper and lower 70% of B
        // (IoU 0.7 with B, 0.4 with each other, under 0.5 with A).
        let boxes = vec![
            ScoredBox::new(b(0.0, 0.0, 10.0, 10.0), 0.9, 0, "e"),
            ScoredBox::new(b(2.5, 0.0, 10.0, 10.0), 0.8, 0, "e"),
            ScoredBox::new(b(2.5, -1.5, 10.0, 7.0), 0.7, 0, "e"),
            ScoredBox::new(b(2.5, 1.5, 10.0, 7.0), 0.6, 0, "e"),
        ];
        assert_eq!(nms_indices(&boxes, 0.5), vec![0, 2, 3]);
        assert_eq!(nms_indices(&boxes, 0.65), vec![0, 1]);
    }

    fn arb_box() -> impl Strategy<Value = Box2D> {
        (0i32..120, 0i32..120, 1i32..60, 1i32..60)
            .prop_map(|(x, y, w, h)| Box2D::from_ltrb(x as f64 / 2.0, y as f64 / 2.0, (x + w) as f64 / 2.0, (y + h) as f64 / 2.0).unwrap())
    }

    fn arb_box3d() -> impl Strategy<Value = Box3D> {
        (arb_box(), 0i64..6, 0i64..5).prop_map(|(f, z, d)| Box3D::from_2d(&f, z, z + d).unwrap())
    }

    fn arb_scored(n: usize) -> impl Strategy<Value = Vec<ScoredBox>> {
        prop::collection::vec((arb_box(), 0u8..20), 0..n).prop_map(|v| {
            v.into_iter()
                .map(|(bx, s)| ScoredBox::new(bx, s as f64 / 20.0, 0, "e"))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou_2d(&a, &c);
            prop_assert_eq!(v, iou_2d(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou_2d(&a, &a), 1.0);
        }

        #[test]
        fn iou_matches_raster_oracle(a in arb_box(), c in arb_box()) {
            prop_assert!((iou_2d(&a, &c) - raster_iou(&a, &c, 2.0)).abs() < 1e-9);
        }

        #[test]
        fn iobb_matches_voxel_oracle(p in arb_box3d(), g in arb_box3d()) {
            prop_assert!((iobb_3d(&p, &g) - voxel_iobb(&p, &g, 2.0)).abs() < 1e-9);
        }

        #[test]
        fn iobb_is_one_on_containment(g in arb_box3d(), fx in 0.1f64..1.0, fy in 0.1f64..1.0) {
            let p = Box3D { w: g.w * fx, h: g.h * fy, ..g };
            prop_assert!((iobb_3d(&p, &g) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn nms_matches_brute_force(boxes in arb_scored(50), thr in 0.1f64..0.9) {
            prop_assert_eq!(nms_indices(&boxes, thr), brute_force_nms(&boxes, thr));
        }

        #[test]
        fn nms_output_properties(boxes in arb_scored(40), lo in 0.05f64..0.9) {
            let kept = nms_indices(&boxes, lo);
            for (a, &i) in kept.iter().enumerate() {
                for &j in &kept[a + 1..] {
                    prop_assert!(iou_2d(&boxes[i].bbox, &boxes[j].bbox) <= lo);
                }
            }
            let scores: Vec<f64> = kept.iter().map(|&i| boxes[i].score).collect();
            prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(kept.iter().all(|&i| i < boxes.len()));
        }
    }
}
