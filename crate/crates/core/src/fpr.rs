//! Training-sample selection for the false-positive-reduction classifier and
//! fusion of its score with the detector score.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::Tracklet;
use crate::error::{Error, Result};
use crate::geometry::{iou_2d, Box3D, ScoredBox};
use crate::ingest::VolumeKey;
use crate::mining::{Annotation, AnnotationStatus};

#[derive(Debug, Clone, PartialEq)]
pub enum FprProposal {
    Slice(ScoredBox),
    Stacked { tracklet: Tracklet, bbox: Box3D, score: f64 },
}

impl FprProposal {
    fn box_on(&self, slice: i64) -> Option<&ScoredBox> {
        match self {
            FprProposal::Slice(b) => (b.slice == slice).then_some(b),
            FprProposal::Stacked { tracklet, .. } => tracklet.member_on(slice),
        }
    }

    pub fn bbox(&self) -> Box3D {
        match self {
            FprProposal::Slice(b) => Box3D {
                cx: b.bbox.cx,
                cy: b.bbox.cy,
                w: b.bbox.w,
                h: b.bbox.h,
                z_min: b.slice,
                z_max: b.slice,
            },
            FprProposal::Stacked { bbox, .. } => *bbox,
        }
    }

    pub fn score(&self) -> f64 {
        match self {
            FprProposal::Slice(b) => b.score,
            FprProposal::Stacked { score, .. } => *score,
        }
    }

    /// Provenance tokens of the member boxes.
    pub fn sources(&self) -> Vec<&str> {
        match self {
            FprProposal::Slice(b) => vec![b.source_id.as_str()],
            FprProposal::Stacked { tracklet, .. } => tracklet.members().iter().map(|m| m.source_id.as_str()).collect(),
        }
    }

    /// IoU between the proposal's box on the annotation's slice and the
    /// annotation; zero when the proposal does not reach that slice.
    pub fn slice_iou(&self, a: &Annotation) -> f64 {
        self.box_on(a.key_slice).map_or(0.0, |b| iou_2d(&b.bbox, &a.bbox))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FprLabel {
    Tp,
    Fp,
}

/// Crop centered on the proposal; the classifier consumes it downstream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub width: f64,
    pub height: f64,
    pub depth: f64,
}

impl PatchSpec {
    pub fn around(b: &Box3D) -> Self {
        PatchSpec { cx: b.cx, cy: b.cy, cz: b.center_z(), width: b.w, height: b.h, depth: b.depth() as f64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FprCandidate {
    pub volume: VolumeKey,
    pub proposal: FprProposal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FprSample {
    pub volume: VolumeKey,
    pub proposal: FprProposal,
    pub label: FprLabel,
    pub patch: PatchSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FprParams {
    pub theta: f64,
    pub theta_fp: f64,
    /// FP samples kept per TP sample.
    pub fp_per_tp: usize,
    pub seed: u64,
}

impl Default for FprParams {
    fn default() -> Self {
        FprParams { theta: 0.5, theta_fp: 0.3, fp_per_tp: 2, seed: 0 }
    }
}

impl FprParams {
    fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(in_unit(self.theta) && in_unit(self.theta_fp) && self.theta_fp < self.theta) {
            return Err(Error::invalid(format!(
                "need 0 < theta_fp < theta < 1, got theta={} theta_fp={}",
                self.theta, self.theta_fp
            )));
        }
        Ok(())
    }
}

/// Label for one proposal, or `None` when it falls in the ambiguous band or
/// overlaps an uncertain lesion.
///
/// TP: slice IoU above `theta` with an original or mined annotation.
/// FP: slice IoU below `theta_fp` with every annotation, mined or uncertain.
pub fn label_proposal(proposal: &FprProposal, annotations: &[&Annotation], params: &FprParams) -> Option<FprLabel> {
    let tp = annotations
        .iter()
        .filter(|a| a.status != AnnotationStatus::Uncertain)
        .any(|a| proposal.slice_iou(a) > params.theta);
    if tp {
        return Some(FprLabel::Tp);
    }
    let clear = annotations.iter().all(|a| proposal.slice_iou(a) < params.theta_fp);
    clear.then_some(FprLabel::Fp)
}

/// Labels every candidate without downsampling; discarded candidates are omitted.
pub fn label_candidates(
    candidates: &[FprCandidate],
    annotations: &[Annotation],
    params: &FprParams,
) -> Result<Vec<FprSample>> {
    params.validate()?;
    let mut out = Vec::new();
    for c in candidates {
        let own: Vec<&Annotation> = annotations.iter().filter(|a| a.volume.volume_id == c.volume.volume_id).collect();
        if let Some(label) = label_proposal(&c.proposal, &own, params) {
            out.push(FprSample {
                volume: c.volume.clone(),
                proposal: c.proposal.clone(),
                label,
                patch: PatchSpec::around(&c.proposal.bbox()),
            });
        }
    }
    Ok(out)
}

/// Labels candidates and downsamples FPs to at most `fp_per_tp` per TP.
/// When FPs are scarcer, all are kept. Output keeps candidate order.
pub fn select_fpr_samples(
    candidates: &[FprCandidate],
    annotations: &[Annotation],
    params: &FprParams,
) -> Result<Vec<FprSample>> {
    let labeled = label_candidates(candidates, annotations, params)?;
    let fp_idx: Vec<usize> = (0..labeled.len()).filter(|&i| labeled[i].label == FprLabel::Fp).collect();
    let tp_count = labeled.len() - fp_idx.len();
    let budget = tp_count.saturating_mul(params.fp_per_tp);
    if fp_idx.len() <= budget {
        return Ok(labeled);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut keep = vec![false; labeled.len()];
    for i in index::sample(&mut rng, fp_idx.len(), budget) {
        keep[fp_idx[i]] = true;
    }
    Ok(labeled
        .into_iter()
        .enumerate()
        .filter(|(i, s)| s.label == FprLabel::Tp || keep[*i])
        .map(|(_, s)| s)
        .collect())
}

/// Mean of the detector and classifier scores.
pub fn fuse_scores(s_lens: f64, s_fpr: f64) -> Result<f64> {
    for (name, v) in [("detector score", s_lens), ("classifier score", s_fpr)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok((s_lens + s_fpr) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box2D;
    use proptest::prelude::*;

    fn key() -> VolumeKey {
        VolumeKey { patient_id: "p".into(), study_id: "s".into(), series_id: "r".into(), volume_id: "v".into() }
    }

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> Box2D {
        Box2D::new(cx, cy, w, h).unwrap()
    }

    fn ann(bbox: Box2D, status: AnnotationStatus) -> Annotation {
        Annotation { lesion_id: "L".into(), volume: key(), key_slice: 0, bbox, status, embedding: None }
    }

    /// Box of width 20 shifted so its IoU with `b(50, 50, 20, 20)` equals `iou`.
    fn shifted(iou: f64) -> Box2D {
        let s = 20.0 * (1.0 - iou) / (1.0 + iou);
        b(50.0 + s, 50.0, 20.0, 20.0)
    }

    fn label(iou: f64, status: AnnotationStatus) -> Option<FprLabel> {
        let a = ann(b(50.0, 50.0, 20.0, 20.0), status);
        let p = FprProposal::Slice(ScoredBox::new(shifted(iou), 0.9, 0, "u"));
        label_proposal(&p, &[&a], &FprParams::default())
    }

    #[test]
    fn labeling_examples() {
        assert_eq!(label(0.6, AnnotationStatus::Mined), Some(FprLabel::Tp));
        assert_eq!(label(0.2, AnnotationStatus::Original), Some(FprLabel::Fp));
        assert_eq!(label(0.4, AnnotationStatus::Original), None);
        // an uncertain lesion never makes a TP and blocks the FP label
        assert_eq!(label(0.6, AnnotationStatus::Uncertain), None);
        assert_eq!(label(0.2, AnnotationStatus::Uncertain), Some(FprLabel::Fp));
    }

    #[test]
    fn stacked_proposal_uses_member_on_annotation_slice() {
        let members: Vec<ScoredBox> = (0..3).map(|s| ScoredBox::new(b(50.0, 50.0, 20.0, 20.0), 0.9, s, "u")).collect();
        let tracklet = Tracklet::new(members).unwrap();
        let p = FprProposal::Stacked { tracklet, bbox: Box3D::new(50.0, 50.0, 20.0, 20.0, 0, 2).unwrap(), score: 0.9 };
        let mut a = ann(b(50.0, 50.0, 20.0, 20.0), AnnotationStatus::Original);
        a.key_slice = 2;
        assert_eq!(p.slice_iou(&a), 1.0);
        a.key_slice = 5;
        assert_eq!(p.slice_iou(&a), 0.0);
    }

    #[test]
    fn downsampling_caps_fps() {
        let a = ann(b(50.0, 50.0, 20.0, 20.0), AnnotationStatus::Original);
        let mut cands = vec![FprCandidate { volume: key(), proposal: FprProposal::Slice(ScoredBox::new(b(50.0, 50.0, 20.0, 20.0), 0.9, 0, "u")) }];
        for i in 0..10 {
            let far = b(200.0 + 30.0 * i as f64, 50.0, 20.0, 20.0);
            cands.push(FprCandidate { volume: key(), proposal: FprProposal::Slice(ScoredBox::new(far, 0.5, 0, "u")) });
        }
        let params = FprParams { seed: 3, ..FprParams::default() };
        let s = select_fpr_samples(&cands, std::slice::from_ref(&a), &params).unwrap();
        assert_eq!(s.iter().filter(|x| x.label == FprLabel::Tp).count(), 1);
        assert_eq!(s.iter().filter(|x| x.label == FprLabel::Fp).count(), 2);
        assert_eq!(s, select_fpr_samples(&cands, std::slice::from_ref(&a), &params).unwrap());

        // scarce FPs are all kept
        let few = &cands[..2];
        assert_eq!(select_fpr_samples(few, &[a], &params).unwrap().len(), 2);
    }

    #[test]
    fn patch_is_centered_on_proposal() {
        let bx = Box3D::new(10.0, 20.0, 6.0, 8.0, 4, 7).unwrap();
        let p = PatchSpec::around(&bx);
        assert_eq!((p.cx, p.cy, p.cz, p.depth), (10.0, 20.0, 5.5, 4.0));
    }

    #[test]
    fn rejects_bad_thresholds() {
        let params = FprParams { theta: 0.3, theta_fp: 0.5, ..FprParams::default() };
        assert!(select_fpr_samples(&[], &[], &params).is_err());
    }

    #[test]
    fn fuse_examples() {
        assert!((fuse_scores(0.8, 0.6).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(fuse_scores(0.37, 0.37).unwrap(), 0.37);
        assert_eq!(fuse_scores(1.0, 0.0).unwrap(), 0.5);
        assert!(fuse_scores(1.2, 0.0).is_err());
        assert!(fuse_scores(0.5, -0.1).is_err());
        assert!(fuse_scores(f64::NAN, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn fuse_is_monotone_and_bounded(a in 0.0f64..=1.0, b2 in 0.0f64..=1.0, d in 0.0f64..=1.0) {
            let f = fuse_scores(a, b2).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            let a2 = (a + d).min(1.0);
            prop_assert!(fuse_scores(a2, b2).unwrap() >= f);
            prop_assert!(fuse_scores(b2, a2).unwrap() >= fuse_scores(b2, a).unwrap());
        }

        #[test]
        fn no_fp_overlaps_uncertain(
            props in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..30),
            uncs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 0..5),
            seed in 0u64..100
        ) {
            let cands: Vec<FprCandidate> = props
                .iter()
                .map(|&(x, y)| FprCandidate { volume: key(), proposal: FprProposal::Slice(ScoredBox::new(b(x, y, 20.0, 20.0), 0.5, 0, "u")) })
                .collect();
            let mut anns: Vec<Annotation> = uncs.iter().map(|&(x, y)| ann(b(x, y, 20.0, 20.0), AnnotationStatus::Uncertain)).collect();
            anns.push(ann(b(50.0, 50.0, 20.0, 20.0), AnnotationStatus::Original));
            let params = FprParams { seed, ..FprParams::default() };
            let samples = select_fpr_samples(&cands, &anns, &params).unwrap();
            let tp = samples.iter().filter(|s| s.label == FprLabel::Tp).count();
            let fp = samples.iter().filter(|s| s.label == FprLabel::Fp).count();
            prop_assert!(fp <= 2 * tp);
            for s in samples.iter().filter(|s| s.label == FprLabel::Fp) {
                for a in &anns {
                    prop_assert!(s.proposal.slice_iou(a) < params.theta_fp);
                }
            }
        }
    }
}
