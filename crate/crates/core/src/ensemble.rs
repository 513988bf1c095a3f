//! Fusion of dataset-expert proposals: pooled per-slice NMS, linking of boxes
//! across consecutive slices into tracklets, and stacking tracklets into 3D
//! proposals with score-weighted coordinates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_2d, nms_indices, Box2D, Box3D, ScoredBox};

/// Boxes on strictly consecutive slices, one per slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    members: Vec<ScoredBox>,
}

impl Tracklet {
    /// Members must be non-empty and sit on consecutive, increasing slices.
    pub fn new(members: Vec<ScoredBox>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("tracklet needs at least one member"));
        }
        if members.windows(2).any(|w| w[1].slice != w[0].slice + 1) {
            return Err(Error::invalid("tracklet members must be on consecutive slices"));
        }
        Ok(Tracklet { members })
    }

    pub fn members(&self) -> &[ScoredBox] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn first_slice(&self) -> i64 {
        self.members[0].slice
    }

    pub fn last_slice(&self) -> i64 {
        self.members[self.members.len() - 1].slice
    }

    pub fn member_on(&self, slice: i64) -> Option<&ScoredBox> {
        let offset = slice - self.first_slice();
        if offset < 0 {
            return None;
        }
        self.members.get(offset as usize)
    }

    /// Highest-scoring member; ties go to the earliest slice.
    pub fn best_member(&self) -> &ScoredBox {
        let mut best = &self.members[0];
        for m in &self.members[1..] {
            if m.score > best.score {
                best = m;
            }
        }
        best
    }

    pub fn max_score(&self) -> f64 {
        self.best_member().score
    }

    /// Embedding of the highest-scoring member.
    pub fn embedding(&self) -> Option<&[f64]> {
        self.best_member().embedding.as_deref()
    }

    pub fn expert_ids(&self) -> BTreeSet<String> {
        self.members.iter().map(|m| m.expert_id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal3D {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub score: f64,
    pub expert_ids: BTreeSet<String>,
    pub tracklet_ref: usize,
}

/// Pools every expert's boxes and runs NMS independently on each slice.
/// Output is ordered by slice, then by descending score.
pub fn pool_and_nms(per_expert: &[Vec<ScoredBox>], nms_iou: f64) -> Vec<ScoredBox> {
    let mut by_slice: BTreeMap<i64, Vec<ScoredBox>> = BTreeMap::new();
    for b in per_expert.iter().flatten() {
        by_slice.entry(b.slice).or_default().push(b.clone());
    }
    let mut out = Vec::new();
    for boxes in by_slice.values() {
        out.extend(nms_indices(boxes, nms_iou).into_iter().map(|i| boxes[i].clone()));
    }
    out
}

/// Links boxes on adjacent slices whose IoU exceeds `theta`.
///
/// Between two adjacent slices, candidate pairs are taken greedily in
/// descending IoU, so every link is the best remaining pairing for both of
/// its boxes. A missing slice ends all open tracklets. Every input box ends
/// up in exactly one tracklet; tracklets are ordered by their first box.
pub fn build_tracklets(boxes: &[ScoredBox], theta: f64) -> Vec<Tracklet> {
    let mut by_slice: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, b) in boxes.iter().enumerate() {
        by_slice.entry(b.slice).or_default().push(i);
    }

    let mut chains: Vec<Vec<usize>> = Vec::new();
    // (slice, chain id per box on that slice)
    let mut prev: Option<(i64, Vec<usize>, Vec<usize>)> = None;
    for (&slice, idx) in &by_slice {
        let mut chain_of = vec![usize::MAX; idx.len()];
        if let Some((prev_slice, prev_idx, prev_chain)) = &prev {
            if *prev_slice + 1 == slice {
                let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
                for (a, &pi) in prev_idx.iter().enumerate() {
                    for (c, &ci) in idx.iter().enumerate() {
                        let v = iou_2d(&boxes[pi].bbox, &boxes[ci].bbox);
                        if v > theta {
                            pairs.push((v, a, c));
                        }
                    }
                }
                pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
                let mut used_prev = vec![false; prev_idx.len()];
                for (_, a, c) in pairs {
                    if used_prev[a] || chain_of[c] != usize::MAX {
                        continue;
                    }
                    used_prev[a] = true;
                    chain_of[c] = prev_chain[a];
                    chains[prev_chain[a]].push(idx[c]);
                }
            }
        }
        for (c, &ci) in idx.iter().enumerate() {
            if chain_of[c] == usize::MAX {
                chain_of[c] = chains.len();
                chains.push(vec![ci]);
            }
        }
        prev = Some((slice, idx.clone(), chain_of));
    }

    chains
        .into_iter()
        .map(|chain| Tracklet { members: chain.into_iter().map(|i| boxes[i].clone()).collect() })
        .collect()
}

/// Score-weighted mean computed as an offset from the minimum, so equal
/// inputs come back unchanged and the result stays within the input range.
fn weighted_mean(values: impl Iterator<Item = f64> + Clone, weights: &[f64], total: f64) -> f64 {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let offset: f64 = values.zip(weights).map(|(v, w)| w * (v - lo)).sum::<f64>() / total;
    (lo + offset).clamp(lo, hi)
}

/// Stacks each tracklet into a 3D proposal. Center and size are the
/// score-weighted means of the members; the score is the best member score.
pub fn stack_to_3d(tracklets: &[Tracklet]) -> Result<Vec<Proposal3D>> {
    tracklets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let m = t.members();
            let weights: Vec<f64> = m.iter().map(|b| b.score).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Err(Error::invalid(format!("tracklet {i} has zero total score weight")));
            }
            let mean = |f: fn(&Box2D) -> f64| weighted_mean(m.iter().map(move |b| f(&b.bbox)), &weights, total);
            let bbox = Box3D::new(
                mean(|b| b.cx),
                mean(|b| b.cy),
                mean(|b| b.w),
                mean(|b| b.h),
                t.first_slice(),
                t.last_slice(),
            )?;
            Ok(Proposal3D { bbox, score: t.max_score(), expert_ids: t.expert_ids(), tracklet_ref: i })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> Box2D {
        Box2D::new(cx, cy, w, h).unwrap()
    }

    fn sb(bx: Box2D, score: f64, slice: i64, expert: &str) -> ScoredBox {
        ScoredBox::new(bx, score, slice, expert)
    }

    #[test]
    fn pooling_single_expert_is_per_slice_nms() {
        let x = b(10.0, 10.0, 10.0, 10.0);
        let e = vec![sb(x, 0.5, 1, "a"), sb(x, 0.7, 1, "a"), sb(x, 0.6, 2, "a")];
        let out = pool_and_nms(&[e], 0.5);
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].slice, out[0].score), (1, 0.7));
        assert_eq!((out[1].slice, out[1].score), (2, 0.6));
    }

    #[test]
    fn pooling_duplicate_keeps_winner_provenance() {
        let x = b(10.0, 10.0, 10.0, 10.0);
        let out = pool_and_nms(&[vec![sb(x, 0.7, 0, "a")], vec![sb(x, 0.9, 0, "b")]], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[0].expert_id, "b");
    }

    #[test]
    fn tracklet_examples() {
        let x = b(50.0, 50.0, 20.0, 20.0);
        let chain: Vec<ScoredBox> = (3..=7).map(|s| sb(x, 0.8, s, "e")).collect();
        let t = build_tracklets(&chain, 0.5);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 5);
        assert_eq!((t[0].first_slice(), t[0].last_slice()), (3, 7));

        let apart = vec![sb(b(10.0, 10.0, 10.0, 10.0), 0.8, 0, "e"), sb(b(110.0, 10.0, 10.0, 10.0), 0.8, 1, "e")];
        assert_eq!(build_tracklets(&apart, 0.5).len(), 2);

        let a = b(10.0, 10.0, 40.0, 40.0);
        let c = b(20.0, 10.0, 40.0, 40.0);
        assert!((iou_2d(&a, &c) - 0.6).abs() < 1e-12);
        let linked = build_tracklets(&[sb(a, 0.8, 1, "e"), sb(c, 0.8, 2, "e")], 0.5);
        assert_eq!(linked.len(), 1);
    }

    #[test]
    fn gap_splits_tracklet() {
        let x = b(50.0, 50.0, 20.0, 20.0);
        let boxes = vec![sb(x, 0.8, 1, "e"), sb(x, 0.8, 2, "e"), sb(x, 0.8, 4, "e")];
        let t = build_tracklets(&boxes, 0.5);
        assert_eq!(t.iter().map(Tracklet::len).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn linking_prefers_highest_iou() {
        let a = b(50.0, 50.0, 20.0, 20.0);
        let near = b(51.0, 50.0, 20.0, 20.0);
        let far = b(54.0, 50.0, 20.0, 20.0);
        let boxes = vec![sb(a, 0.9, 0, "e"), sb(far, 0.9, 1, "e"), sb(near, 0.5, 1, "e")];
        let t = build_tracklets(&boxes, 0.5);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].members()[1].bbox, near);
    }

    #[test]
    fn stacking_examples() {
        let x = b(10.0, 20.0, 8.0, 6.0);
        let t = Tracklet::new(vec![sb(x, 0.6, 4, "a"), sb(x, 0.4, 5, "b")]).unwrap();
        let p = &stack_to_3d(&[t]).unwrap()[0];
        assert_eq!((p.bbox.cx, p.bbox.cy, p.bbox.w, p.bbox.h), (10.0, 20.0, 8.0, 6.0));
        assert_eq!((p.bbox.z_min, p.bbox.z_max), (4, 5));
        assert_eq!(p.score, 0.6);
        assert_eq!(p.expert_ids.len(), 2);

        let t = Tracklet::new(vec![sb(b(10.0, 0.0, 4.0, 4.0), 0.75, 0, "a"), sb(b(20.0, 0.0, 4.0, 4.0), 0.25, 1, "a")]).unwrap();
        assert!((stack_to_3d(&[t]).unwrap()[0].bbox.cx - 12.5).abs() < 1e-12);

        let single = sb(b(3.0, 4.0, 5.0, 6.0), 0.3, 9, "a");
        let p = &stack_to_3d(&[Tracklet::new(vec![single.clone()]).unwrap()]).unwrap()[0];
        assert_eq!(p.bbox, Box3D::from_2d(&single.bbox, 9, 9).unwrap());
        assert_eq!(p.score, 0.3);

        let zero = Tracklet::new(vec![sb(x, 0.0, 0, "a")]).unwrap();
        assert!(stack_to_3d(&[zero]).is_err());
    }

    #[test]
    fn tracklet_rejects_non_consecutive() {
        let x = b(1.0, 1.0, 1.0, 1.0);
        assert!(Tracklet::new(vec![sb(x, 1.0, 0, "a"), sb(x, 1.0, 2, "a")]).is_err());
        assert!(Tracklet::new(vec![]).is_err());
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<ScoredBox>> {
        prop::collection::vec((0i64..8, 0.0f64..60.0, 0.0f64..60.0, 5.0f64..30.0, 0.01f64..1.0), 0..60)
            .prop_map(|v| v.into_iter().map(|(s, x, y, w, sc)| sb(b(x, y, w, w), sc, s, "e")).collect())
    }

    proptest! {
        #[test]
        fn tracklets_partition_input(boxes in arb_boxes(), theta in 0.1f64..0.9) {
            let t = build_tracklets(&boxes, theta);
            prop_assert_eq!(t.iter().map(Tracklet::len).sum::<usize>(), boxes.len());
            let mut seen = vec![false; boxes.len()];
            for tr in &t {
                for w in tr.members().windows(2) {
                    prop_assert_eq!(w[1].slice, w[0].slice + 1);
                    prop_assert!(iou_2d(&w[0].bbox, &w[1].bbox) > theta);
                }
                for m in tr.members() {
                    let i = boxes.iter().enumerate().position(|(i, x)| !seen[i] && x == m).unwrap();
                    seen[i] = true;
                }
            }
            prop_assert_eq!(build_tracklets(&boxes, theta), t);
        }

        #[test]
        fn stacked_coordinates_within_member_range(boxes in arb_boxes()) {
            let t = build_tracklets(&boxes, 0.3);
            let stacked = stack_to_3d(&t).unwrap();
            for (tr, p) in t.iter().zip(&stacked) {
                let cx: Vec<f64> = tr.members().iter().map(|m| m.bbox.cx).collect();
                let w: Vec<f64> = tr.members().iter().map(|m| m.bbox.w).collect();
                let within = |v: f64, xs: &[f64]| v >= xs.iter().cloned().fold(f64::INFINITY, f64::min)
                    && v <= xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(within(p.bbox.cx, &cx));
                prop_assert!(within(p.bbox.w, &w));
                prop_assert_eq!(p.bbox.depth() as usize, tr.len());
                prop_assert!((0.0..=1.0).contains(&p.score));
            }
        }
    }
}
