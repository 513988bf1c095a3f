//! Missing-annotation mining from partially labeled volumes, and assembly of
//! the refined training label set.
//!
//! Three strategies run in order: cross-slice propagation along tracklets,
//! intra-patient matching of tracklets to annotations by embedding distance,
//! and cross-dataset mining of confident single-type-expert proposals as
//! uncertain (loss-ignored) regions.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::Tracklet;
use crate::error::{Error, Result};
use crate::geometry::{iou_2d, score_order, Box2D, ScoredBox};
use crate::ingest::{VolumeKey, VolumeMeta};

/// Label provenance, ordered by strength: uncertain < mined < original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationStatus {
    Uncertain,
    Mined,
    Original,
}

impl AnnotationStatus {
    pub fn is_certain(self) -> bool {
        self != AnnotationStatus::Uncertain
    }

    /// Status after new evidence: never weaker than either input.
    pub fn promote(self, other: AnnotationStatus) -> AnnotationStatus {
        self.max(other)
    }
}

/// A 2D lesion box on one slice of one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub lesion_id: String,
    #[serde(flatten)]
    pub volume: VolumeKey,
    pub key_slice: i64,
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub status: AnnotationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Annotation {
    fn mined_from(lesion_id: &str, volume: &VolumeKey, member: &ScoredBox, status: AnnotationStatus) -> Self {
        Annotation {
            lesion_id: lesion_id.to_string(),
            volume: volume.clone(),
            key_slice: member.slice,
            bbox: member.bbox,
            status,
            embedding: member.embedding.clone(),
        }
    }
}

/// Tracklets built from one volume's proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeTracklets {
    pub volume: VolumeKey,
    pub tracklets: Vec<Tracklet>,
}

fn overlaps_any<'a>(
    bbox: &Box2D,
    slice: i64,
    others: impl IntoIterator<Item = &'a Annotation>,
    threshold: f64,
) -> bool {
    others
        .into_iter()
        .any(|a| a.key_slice == slice && iou_2d(&a.bbox, bbox) > threshold)
}

/// Cross-slice propagation within one volume.
///
/// A tracklet whose box on some slice overlaps an existing certain annotation
/// on that slice with IoU above `theta` contributes its boxes on every other
/// slice as mined annotations of the same lesion. Boxes duplicating an
/// existing or already-mined annotation are dropped.
pub fn propagate_cross_slice(tracklets: &[Tracklet], annotations: &[Annotation], theta: f64) -> Vec<Annotation> {
    let certain: Vec<&Annotation> = annotations.iter().filter(|a| a.status.is_certain()).collect();
    let mut mined: Vec<Annotation> = Vec::new();
    for t in tracklets {
        let mut best: Option<(f64, i64, &Annotation)> = None;
        for m in t.members() {
            for a in certain.iter().filter(|a| a.key_slice == m.slice) {
                let v = iou_2d(&m.bbox, &a.bbox);
                if v > theta && best.is_none_or(|(bv, _, _)| v > bv) {
                    best = Some((v, m.slice, a));
                }
            }
        }
        let Some((_, key_slice, anchor)) = best else { continue };
        for m in t.members().iter().filter(|m| m.slice != key_slice) {
            if overlaps_any(&m.bbox, m.slice, certain.iter().copied(), theta)
                || overlaps_any(&m.bbox, m.slice, &mined, theta)
            {
                continue;
            }
            mined.push(Annotation::mined_from(&anchor.lesion_id, &anchor.volume, m, AnnotationStatus::Mined));
        }
    }
    mined
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    /// Embedding distance must be strictly below this.
    pub delta: f64,
    /// IoU above which a tracklet counts as already annotated.
    pub overlap_theta: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams { delta: 0.15, overlap_theta: 0.5 }
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Intra-patient lesion matching.
///
/// Original annotations with embeddings are compared against tracklets from
/// other volumes (another study, or another series of the same study) of the
/// same patient. A tracklet closer than `delta` to its nearest such annotation
/// becomes mined annotations of that lesion, one per member slice. Tracklets
/// already overlapping a certain annotation in their own volume are skipped.
pub fn match_intra_patient(
    known: &[Annotation],
    candidates: &[VolumeTracklets],
    params: MatchParams,
) -> Result<Vec<Annotation>> {
    let mut sources: BTreeMap<&str, Vec<(&Annotation, &[f64])>> = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for a in known.iter().filter(|a| a.status == AnnotationStatus::Original) {
        if let Some(e) = a.embedding.as_deref() {
            if *dim.get_or_insert(e.len()) != e.len() {
                return Err(Error::invalid(format!(
                    "annotation {} embedding has dimension {}, expected {}",
                    a.lesion_id,
                    e.len(),
                    dim.unwrap()
                )));
            }
            sources.entry(a.volume.patient_id.as_str()).or_default().push((a, e));
        }
    }
    let mut certain_by_volume: BTreeMap<&str, Vec<&Annotation>> = BTreeMap::new();
    for a in known.iter().filter(|a| a.status.is_certain()) {
        certain_by_volume.entry(a.volume.volume_id.as_str()).or_default().push(a);
    }

    let mut mined: Vec<Annotation> = Vec::new();
    for vt in candidates {
        let Some(patient_sources) = sources.get(vt.volume.patient_id.as_str()) else { continue };
        let own = certain_by_volume.get(vt.volume.volume_id.as_str()).cloned().unwrap_or_default();
        let mut mined_here: Vec<Annotation> = Vec::new();
        for t in &vt.tracklets {
            let Some(e) = t.embedding() else { continue };
            if let Some(d) = dim {
                if e.len() != d {
                    return Err(Error::invalid(format!(
                        "tracklet embedding in volume {} has dimension {}, expected {d}",
                        vt.volume.volume_id,
                        e.len()
                    )));
                }
            }
            let already = t
                .members()
                .iter()
                .any(|m| overlaps_any(&m.bbox, m.slice, own.iter().copied(), params.overlap_theta));
            if already {
                continue;
            }
            let mut best: Option<(f64, &Annotation)> = None;
            for (a, ae) in patient_sources {
                let same_series = a.volume.study_id == vt.volume.study_id && a.volume.series_id == vt.volume.series_id;
                if same_series || a.volume.volume_id == vt.volume.volume_id {
                    continue;
                }
                let d = l2(ae, e);
                if d < params.delta && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, a));
                }
            }
            let Some((_, anchor)) = best else { continue };
            for m in t.members() {
                if overlaps_any(&m.bbox, m.slice, &mined_here, params.overlap_theta) {
                    continue;
                }
                mined_here.push(Annotation::mined_from(&anchor.lesion_id, &vt.volume, m, AnnotationStatus::Mined));
            }
        }
        mined.extend(mined_here);
    }
    Ok(mined)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMineParams {
    /// Detection score must be strictly above this.
    pub sigma: f64,
    /// IoU above which a proposal counts as overlapping a known annotation.
    pub exclusion_iou: f64,
    /// Proposals from this expert are never mined.
    pub universal_expert: String,
}

impl Default for CrossMineParams {
    fn default() -> Self {
        CrossMineParams { sigma: 0.5, exclusion_iou: 0.3, universal_expert: "universal".into() }
    }
}

/// Cross-dataset mining within one volume: confident single-type-expert
/// boxes that overlap no known annotation become uncertain annotations.
pub fn mine_cross_dataset(
    volume: &VolumeKey,
    single_type_proposals: &[ScoredBox],
    known: &[Annotation],
    params: &CrossMineParams,
) -> Vec<Annotation> {
    let certain: Vec<&Annotation> = known
        .iter()
        .filter(|a| a.status.is_certain() && a.volume.volume_id == volume.volume_id)
        .collect();
    let scores: Vec<f64> = single_type_proposals.iter().map(|p| p.score).collect();
    let mut out: Vec<Annotation> = Vec::new();
    for i in score_order(&scores) {
        let p = &single_type_proposals[i];
        if p.expert_id == params.universal_expert || !(p.score > params.sigma) {
            continue;
        }
        if overlaps_any(&p.bbox, p.slice, certain.iter().copied(), params.exclusion_iou)
            || overlaps_any(&p.bbox, p.slice, &out, params.exclusion_iou)
        {
            continue;
        }
        let id = format!("uncertain:{}:{}:{}", volume.volume_id, p.slice, out.len());
        out.push(Annotation::mined_from(&id, volume, p, AnnotationStatus::Uncertain));
    }
    out
}

/// Merges a fresh label set into a previous one. Matching boxes (same volume
/// and slice, IoU above `theta`) keep the stronger status; previous certain
/// labels without a match are retained.
pub fn reconcile(previous: &[Annotation], current: &[Annotation], theta: f64) -> Vec<Annotation> {
    let mut out: Vec<Annotation> = current.to_vec();
    for prev in previous {
        let hit = out.iter_mut().find(|c| {
            c.volume.volume_id == prev.volume.volume_id
                && c.key_slice == prev.key_slice
                && iou_2d(&c.bbox, &prev.bbox) > theta
        });
        match hit {
            Some(c) => c.status = c.status.promote(prev.status),
            None if prev.status.is_certain() => out.push(prev.clone()),
            None => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceKind {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceLabels {
    pub volume_id: String,
    pub slice: i64,
    pub kind: SliceKind,
    pub certain: Vec<Box2D>,
    pub uncertain: Vec<Box2D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLabelSet {
    /// Sorted by volume id, then slice.
    pub slices: Vec<SliceLabels>,
    pub requested_negatives: usize,
    /// Negatives that could not be drawn because too few candidates exist.
    pub negative_shortfall: usize,
}

impl TrainingLabelSet {
    pub fn positives(&self) -> impl Iterator<Item = &SliceLabels> {
        self.slices.iter().filter(|s| s.kind == SliceKind::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &SliceLabels> {
        self.slices.iter().filter(|s| s.kind == SliceKind::Negative)
    }

    pub fn certain_box_count(&self) -> usize {
        self.slices.iter().map(|s| s.certain.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssembleParams {
    /// Positive to negative slice ratio, as `(positive, negative)` parts.
    pub pos_neg_ratio: (u32, u32),
    pub exclusion_iou: f64,
    pub seed: u64,
}

impl Default for AssembleParams {
    fn default() -> Self {
        AssembleParams { pos_neg_ratio: (2, 1), exclusion_iou: 0.3, seed: 0 }
    }
}

/// Builds the per-slice training labels. Positive slices carry at least one
/// certain box; negatives are drawn uniformly without replacement from the
/// remaining slices of all volumes. Uncertain-only slices may be drawn as
/// negatives and keep their ignore boxes.
pub fn assemble_training_set(
    volumes: &[VolumeMeta],
    original: &[Annotation],
    mined: &[Annotation],
    uncertain: &[Annotation],
    params: AssembleParams,
) -> Result<TrainingLabelSet> {
    let (pos_part, neg_part) = params.pos_neg_ratio;
    if pos_part == 0 {
        return Err(Error::invalid("positive part of the slice ratio must be nonzero"));
    }
    let slice_counts: BTreeMap<&str, usize> =
        volumes.iter().map(|v| (v.key.volume_id.as_str(), v.slice_count)).collect();

    let mut certain: BTreeMap<(String, i64), Vec<Box2D>> = BTreeMap::new();
    let mut ignore: BTreeMap<(String, i64), Vec<Box2D>> = BTreeMap::new();
    for a in original.iter().chain(mined).chain(uncertain) {
        let Some(&n) = slice_counts.get(a.volume.volume_id.as_str()) else {
            return Err(Error::invalid(format!("annotation references unknown volume {}", a.volume.volume_id)));
        };
        if a.key_slice < 0 || a.key_slice as usize >= n {
            return Err(Error::invalid(format!(
                "annotation slice {} outside volume {} with {n} slices",
                a.key_slice, a.volume.volume_id
            )));
        }
        let key = (a.volume.volume_id.clone(), a.key_slice);
        if a.status.is_certain() {
            certain.entry(key).or_default().push(a.bbox);
        } else {
            ignore.entry(key).or_default().push(a.bbox);
        }
    }
    // uncertain boxes never overlap certain ones beyond the exclusion threshold
    for (key, boxes) in ignore.iter_mut() {
        if let Some(c) = certain.get(key) {
            boxes.retain(|u| c.iter().all(|b| iou_2d(b, u) <= params.exclusion_iou));
        }
    }

    let mut slices: Vec<SliceLabels> = Vec::new();
    for ((volume_id, slice), boxes) in &certain {
        slices.push(SliceLabels {
            volume_id: volume_id.clone(),
            slice: *slice,
            kind: SliceKind::Positive,
            certain: boxes.clone(),
            uncertain: ignore.get(&(volume_id.clone(), *slice)).cloned().unwrap_or_default(),
        });
    }

    let mut candidates: Vec<(String, i64)> = Vec::new();
    for (&vid, &n) in &slice_counts {
        for s in 0..n as i64 {
            let key = (vid.to_string(), s);
            if !certain.contains_key(&key) {
                candidates.push(key);
            }
        }
    }
    let requested = slices.len() * neg_part as usize / pos_part as usize;
    let take = requested.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut chosen = index::sample(&mut rng, candidates.len(), take).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let (volume_id, slice) = candidates[i].clone();
        let uncertain = ignore.get(&(volume_id.clone(), slice)).cloned().unwrap_or_default();
        slices.push(SliceLabels { volume_id, slice, kind: SliceKind::Negative, certain: Vec::new(), uncertain });
    }
    slices.sort_by(|a, b| (a.volume_id.as_str(), a.slice).cmp(&(b.volume_id.as_str(), b.slice)));

    Ok(TrainingLabelSet { slices, requested_negatives: requested, negative_shortfall: requested - take })
}

/// One row of the mining report: label counts after a pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningStageCounts {
    pub stage: String,
    pub gt_3d: usize,
    pub gt_2d: usize,
    pub uncertain_2d: usize,
}

impl MiningStageCounts {
    /// Counts certain lesions (distinct volume and lesion id), certain boxes
    /// and uncertain boxes in a label set.
    pub fn tally(stage: &str, labels: &[&Annotation]) -> Self {
        let lesions: BTreeSet<(&str, &str)> = labels
            .iter()
            .filter(|a| a.status.is_certain())
            .map(|a| (a.volume.volume_id.as_str(), a.lesion_id.as_str()))
            .collect();
        MiningStageCounts {
            stage: stage.to_string(),
            gt_3d: lesions.len(),
            gt_2d: labels.iter().filter(|a| a.status.is_certain()).count(),
            uncertain_2d: labels.iter().filter(|a| !a.status.is_certain()).count(),
        }
    }
}
