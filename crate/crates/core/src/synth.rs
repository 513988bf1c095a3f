//! Synthetic cohorts and an oracle detector that stands in for trained
//! networks, plus slice-level label augmentation.
//!
//! Lesions are axis-aligned boxes whose per-slice extent follows an
//! ellipsoid cross-section, truncated where the section drops below 80% of
//! its widest diameter. Every lesion has an identity shared by all of a
//! patient's studies; embeddings are the identity's one-hot vector plus
//! isotropic Gaussian noise whose expected norm is the configured sigma.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::afp::{assign_targets, FeatureMap, GtSlice, RegionRatios};
use crate::error::{Error, Result};
use crate::geometry::{iou_2d, Box2D, Box3D, ScoredBox};
use crate::ingest::{VolumeKey, VolumeMeta};
use crate::mining::{Annotation, AnnotationStatus};

const PLACEMENT_ATTEMPTS: usize = 200;

/// Independent seed for a named sub-stream of a master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn rng_for(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LesionType {
    UniversalOnly,
    TypeA,
    TypeB,
    TypeC,
}

impl LesionType {
    pub const ALL: [LesionType; 4] =
        [LesionType::UniversalOnly, LesionType::TypeA, LesionType::TypeB, LesionType::TypeC];

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-lesion-type probability that an expert detects a lesion on a slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeSensitivity {
    pub universal_only: f64,
    pub type_a: f64,
    pub type_b: f64,
    pub type_c: f64,
}

impl TypeSensitivity {
    pub fn uniform(s: f64) -> Self {
        TypeSensitivity { universal_only: s, type_a: s, type_b: s, type_c: s }
    }

    /// `s` on one lesion type, zero on the rest.
    pub fn specialist(kind: LesionType, s: f64) -> Self {
        let mut out = TypeSensitivity::uniform(0.0);
        *out.slot(kind) = s;
        out
    }

    pub fn get(&self, kind: LesionType) -> f64 {
        [self.universal_only, self.type_a, self.type_b, self.type_c][kind.index()]
    }

    fn slot(&mut self, kind: LesionType) -> &mut f64 {
        match kind {
            LesionType::UniversalOnly => &mut self.universal_only,
            LesionType::TypeA => &mut self.type_a,
            LesionType::TypeB => &mut self.type_b,
            LesionType::TypeC => &mut self.type_c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub patients: usize,
    pub studies_per_patient: usize,
    pub series_per_study: usize,
    pub slices_per_volume: usize,
    /// Square image side in pixels.
    pub image_size: f64,
    /// Inclusive range of lesions per patient.
    pub lesions_per_patient: (usize, usize),
    /// Widest in-plane diameter range in pixels.
    pub lesion_diameter: (f64, f64),
    /// Ellipsoid semi-axis range along z, in slices.
    pub lesion_half_depth: (f64, f64),
    /// Relative frequency of universal-only, type-A, type-B and type-C lesions.
    pub type_weights: [f64; 4],
    /// Probability a lesion instance is unlabeled in a volume.
    pub lesion_hide_rate: f64,
    /// Probability a non-key slice of a labeled lesion is unlabeled.
    pub non_key_hide_rate: f64,
    /// Lesion center shift between studies, in pixels.
    pub study_jitter: f64,
    pub pixel_spacing_mm: f64,
    pub slice_interval_mm: f64,
    pub embedding_dim: usize,
    /// Expected norm of the noise added to annotation embeddings.
    pub embedding_noise: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            patients: 8,
            studies_per_patient: 2,
            series_per_study: 1,
            slices_per_volume: 48,
            image_size: 256.0,
            lesions_per_patient: (2, 4),
            lesion_diameter: (16.0, 48.0),
            lesion_half_depth: (2.0, 6.0),
            type_weights: [1.0, 1.0, 1.0, 1.0],
            lesion_hide_rate: 0.3,
            non_key_hide_rate: 1.0,
            study_jitter: 2.0,
            pixel_spacing_mm: 0.8,
            slice_interval_mm: 2.0,
            embedding_dim: 32,
            embedding_noise: 0.03,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.patients == 0 || self.studies_per_patient == 0 || self.series_per_study == 0 {
            return bad("cohort needs at least one patient, study and series".into());
        }
        let (lo, hi) = self.lesions_per_patient;
        if lo > hi || hi > self.embedding_dim {
            return bad(format!(
                "lesions per patient {lo}..={hi} must be ordered and at most embedding_dim {}",
                self.embedding_dim
            ));
        }
        let (dlo, dhi) = self.lesion_diameter;
        if !(dlo > 0.0 && dlo <= dhi) {
            return bad(format!("lesion diameter range ({dlo}, {dhi}) is invalid"));
        }
        if dhi * 1.25 + 2.0 * self.study_jitter + 4.0 >= self.image_size {
            return bad(format!("lesions up to {dhi} px do not fit a {} px image", self.image_size));
        }
        let (zlo, zhi) = self.lesion_half_depth;
        if !(zlo > 0.0 && zlo <= zhi) {
            return bad(format!("lesion half-depth range ({zlo}, {zhi}) is invalid"));
        }
        let max_extent = 2 * (MIN_SECTION_SCALE_EXTENT * zhi).floor() as usize + 3;
        if max_extent > self.slices_per_volume {
            return bad(format!("lesions up to {max_extent} slices do not fit {} slices", self.slices_per_volume));
        }
        if self.type_weights.iter().any(|w| !(*w >= 0.0)) || self.type_weights.iter().sum::<f64>() <= 0.0 {
            return bad("type weights must be nonnegative with a positive sum".into());
        }
        for (name, p) in [("lesion_hide_rate", self.lesion_hide_rate), ("non_key_hide_rate", self.non_key_hide_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.embedding_dim == 0 || !(self.embedding_noise >= 0.0) {
            return bad("embedding dimension must be positive and noise nonnegative".into());
        }
        if !(self.pixel_spacing_mm > 0.0 && self.slice_interval_mm > 0.0) {
            return bad("spacings must be positive".into());
        }
        Ok(())
    }
}

/// Half-extent kept along z, as a fraction of the semi-axis: the section
/// scale `sqrt(1 - t^2)` stays at or above 0.8 for `|t| <= 0.6`.
const MIN_SECTION_SCALE_EXTENT: f64 = 0.6;

/// One lesion as it appears in one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionInstance {
    /// Shared by the same lesion across a patient's studies and series.
    pub lesion_id: String,
    /// One-hot index of the planted identity embedding.
    pub identity: usize,
    pub lesion_type: LesionType,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub key_slice: i64,
    pub slice_boxes: Vec<(i64, Box2D)>,
    /// Unlabeled in this volume.
    pub hidden: bool,
}

impl LesionInstance {
    pub fn box_on(&self, slice: i64) -> Option<&Box2D> {
        self.slice_boxes.iter().find(|(s, _)| *s == slice).map(|(_, b)| b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVolume {
    pub meta: VolumeMeta,
    pub lesions: Vec<LesionInstance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub spec: CohortSpec,
    pub volumes: Vec<SynthVolume>,
    /// Visible labels, status original.
    pub annotations: Vec<Annotation>,
}

impl SyntheticCohort {
    pub fn volume(&self, volume_id: &str) -> Option<&SynthVolume> {
        self.volumes.iter().find(|v| v.meta.key.volume_id == volume_id)
    }

    pub fn metas(&self) -> Vec<VolumeMeta> {
        self.volumes.iter().map(|v| v.meta.clone()).collect()
    }
}

/// Unit vector: one-hot identity plus Gaussian noise with expected norm `noise`.
pub fn planted_embedding<R: Rng>(rng: &mut R, dim: usize, identity: usize, noise: f64) -> Vec<f64> {
    let per_dim = noise / (dim as f64).sqrt();
    let mut v: Vec<f64> = (0..dim)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            f64::from(u8::from(i == identity)) + per_dim * z
        })
        .collect();
    normalize(&mut v);
    v
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

struct LesionPlan {
    id: String,
    identity: usize,
    kind: LesionType,
    cx: f64,
    cy: f64,
    cz: f64,
    w: f64,
    h: f64,
    half_depth: f64,
}

impl LesionPlan {
    fn half_extent(&self) -> i64 {
        (MIN_SECTION_SCALE_EXTENT * self.half_depth).floor() as i64
    }

    fn footprint_with_margin(&self, margin: f64) -> Box2D {
        Box2D { cx: self.cx, cy: self.cy, w: self.w + 2.0 * margin, h: self.h + 2.0 * margin }
    }
}

fn pick_type<R: Rng>(rng: &mut R, weights: &[f64; 4]) -> LesionType {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (kind, w) in LesionType::ALL.iter().zip(weights) {
        if u < *w {
            return *kind;
        }
        u -= w;
    }
    LesionType::ALL[weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)]
}

fn plan_patient(spec: &CohortSpec, patient: usize, rng: &mut ChaCha8Rng) -> Result<Vec<LesionPlan>> {
    let (lo, hi) = spec.lesions_per_patient;
    let n = rng.random_range(lo..=hi);
    let margin = 2.0 * spec.study_jitter + 4.0;
    let mut plans: Vec<LesionPlan> = Vec::with_capacity(n);
    for l in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let d = rng.random_range(spec.lesion_diameter.0..=spec.lesion_diameter.1);
            let aspect = rng.random_range(0.8..=1.25f64);
            let (w, h) = (d * aspect.sqrt(), d / aspect.sqrt());
            let half_depth = rng.random_range(spec.lesion_half_depth.0..=spec.lesion_half_depth.1);
            let k = (MIN_SECTION_SCALE_EXTENT * half_depth).floor();
            let edge = w.max(h) / 2.0 + margin;
            let cx = rng.random_range(edge..=spec.image_size - edge);
            let cy = rng.random_range(edge..=spec.image_size - edge);
            let cz = rng.random_range((k + 1.0)..=(spec.slices_per_volume as f64 - k - 2.0)).round();
            let plan = LesionPlan {
                id: format!("p{patient:03}-l{l:02}"),
                identity: l,
                kind: LesionType::UniversalOnly,
                cx,
                cy,
                cz,
                w,
                h,
                half_depth,
            };
            let clash = plans.iter().any(|o| {
                let z_apart = (o.cz - plan.cz).abs() > (o.half_extent() + plan.half_extent() + 2) as f64;
                !z_apart && o.footprint_with_margin(margin).intersection_area(&plan.footprint_with_margin(margin)) > 0.0
            });
            if !clash {
                plans.push(LesionPlan { kind: pick_type(rng, &spec.type_weights), ..plan });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not place {n} non-overlapping lesions for patient {patient}; reduce lesion count or size"
            )));
        }
    }
    Ok(plans)
}

fn instance<R: Rng>(spec: &CohortSpec, plan: &LesionPlan, rng: &mut R) -> Result<LesionInstance> {
    let j = Normal::new(0.0, spec.study_jitter.max(f64::MIN_POSITIVE)).unwrap();
    let cx = plan.cx + j.sample(rng);
    let cy = plan.cy + j.sample(rng);
    let scale = rng.random_range(0.9..=1.1);
    let (w, h) = (plan.w * scale, plan.h * scale);
    let shift: i64 = rng.random_range(-1..=1);
    let cz = plan.cz as i64 + shift;
    let k = plan.half_extent();
    let mut slice_boxes = Vec::new();
    for dz in -k..=k {
        let t = dz as f64 / plan.half_depth;
        let s = (1.0 - t * t).sqrt();
        slice_boxes.push((cz + dz, Box2D::new(cx, cy, w * s, h * s)?));
    }
    Ok(LesionInstance {
        lesion_id: plan.id.clone(),
        identity: plan.identity,
        lesion_type: plan.kind,
        bbox: Box3D::new(cx, cy, w, h, cz - k, cz + k)?,
        key_slice: cz,
        slice_boxes,
        hidden: false,
    })
}

/// Generates a cohort deterministically from `seed`; patients are generated
/// in parallel from per-patient derived seeds.
pub fn generate_cohort(spec: &CohortSpec, seed: u64) -> Result<SyntheticCohort> {
    spec.validate()?;
    let per_patient: Vec<Result<(Vec<SynthVolume>, Vec<Annotation>)>> = (0..spec.patients)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng_for(seed, &format!("patient/{p}"));
            let plans = plan_patient(spec, p, &mut rng)?;
            let mut volumes = Vec::new();
            let mut annotations = Vec::new();
            for study in 0..spec.studies_per_patient {
                let study_lesions: Vec<LesionInstance> =
                    plans.iter().map(|plan| instance(spec, plan, &mut rng)).collect::<Result<_>>()?;
                for series in 0..spec.series_per_study {
                    let key = VolumeKey {
                        patient_id: format!("p{p:03}"),
                        study_id: format!("p{p:03}-s{study}"),
                        series_id: format!("p{p:03}-s{study}-r{series}"),
                        volume_id: format!("p{p:03}-s{study}-r{series}"),
                    };
                    let mut lesions = study_lesions.clone();
                    for lesion in lesions.iter_mut() {
                        lesion.hidden = rng.random_bool(spec.lesion_hide_rate);
                        if lesion.hidden {
                            continue;
                        }
                        for (slice, bbox) in &lesion.slice_boxes {
                            let visible = *slice == lesion.key_slice || !rng.random_bool(spec.non_key_hide_rate);
                            if visible {
                                annotations.push(Annotation {
                                    lesion_id: lesion.lesion_id.clone(),
                                    volume: key.clone(),
                                    key_slice: *slice,
                                    bbox: *bbox,
                                    status: AnnotationStatus::Original,
                                    embedding: Some(planted_embedding(
                                        &mut rng,
                                        spec.embedding_dim,
                                        lesion.identity,
                                        spec.embedding_noise,
                                    )),
                                });
                            }
                        }
                    }
                    volumes.push(SynthVolume {
                        meta: VolumeMeta {
                            key,
                            slice_count: spec.slices_per_volume,
                            pixel_spacing_mm: spec.pixel_spacing_mm,
                            slice_interval_mm: spec.slice_interval_mm,
                        },
                        lesions,
                    });
                }
            }
            Ok((volumes, annotations))
        })
        .collect();

    let mut volumes = Vec::new();
    let mut annotations = Vec::new();
    for r in per_patient {
        let (v, a) = r?;
        volumes.extend(v);
        annotations.extend(a);
    }
    Ok(SyntheticCohort { spec: spec.clone(), volumes, annotations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertProfile {
    pub expert_id: String,
    pub sensitivity: TypeSensitivity,
    /// Expected false positives per slice.
    pub fp_rate: f64,
    /// Trained on a single-type dataset.
    pub single_type: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub experts: Vec<ExpertProfile>,
    /// Std-dev of center and size noise, in pixels.
    pub jitter: f64,
    pub tp_score: (f64, f64),
    pub fp_score: (f64, f64),
    /// Expected norm of the noise added to proposal embeddings.
    pub embedding_noise: f64,
    /// Classifier score ranges for true lesions and for false positives.
    pub fpr_tp_score: (f64, f64),
    pub fpr_fp_score: (f64, f64),
    /// Fraction of the remaining miss rate recovered when retraining with
    /// fully covering labels.
    pub retrain_gain: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            experts: vec![
                ExpertProfile {
                    expert_id: "universal".into(),
                    sensitivity: TypeSensitivity::uniform(0.6),
                    fp_rate: 0.05,
                    single_type: false,
                },
                ExpertProfile {
                    expert_id: "expert-a".into(),
                    sensitivity: TypeSensitivity::specialist(LesionType::TypeA, 0.9),
                    fp_rate: 0.02,
                    single_type: true,
                },
                ExpertProfile {
                    expert_id: "expert-b".into(),
                    sensitivity: TypeSensitivity::specialist(LesionType::TypeB, 0.9),
                    fp_rate: 0.02,
                    single_type: true,
                },
                ExpertProfile {
                    expert_id: "expert-c".into(),
                    sensitivity: TypeSensitivity::specialist(LesionType::TypeC, 0.9),
                    fp_rate: 0.02,
                    single_type: true,
                },
            ],
            jitter: 1.0,
            tp_score: (0.55, 1.0),
            fp_score: (0.05, 0.7),
            embedding_noise: 0.03,
            fpr_tp_score: (0.5, 1.0),
            fpr_fp_score: (0.0, 0.6),
            retrain_gain: 0.5,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        let range = |(lo, hi): (f64, f64)| prob(lo) && prob(hi) && lo <= hi;
        if self.experts.is_empty() {
            return Err(Error::invalid("oracle needs at least one expert"));
        }
        for e in &self.experts {
            if !LesionType::ALL.iter().all(|k| prob(e.sensitivity.get(*k))) || !(e.fp_rate >= 0.0) {
                return Err(Error::invalid(format!("expert {} has invalid sensitivity or FP rate", e.expert_id)));
            }
        }
        if !(range(self.tp_score) && range(self.fp_score) && range(self.fpr_tp_score) && range(self.fpr_fp_score)) {
            return Err(Error::invalid("score ranges must be ordered within [0, 1]"));
        }
        if !(self.jitter >= 0.0 && self.embedding_noise >= 0.0 && prob(self.retrain_gain)) {
            return Err(Error::invalid("jitter and embedding noise must be nonnegative, retrain gain in [0, 1]"));
        }
        Ok(())
    }

    pub fn expert(&self, id: &str) -> Option<&ExpertProfile> {
        self.experts.iter().find(|e| e.expert_id == id)
    }

    pub fn universal_expert(&self) -> Option<&ExpertProfile> {
        self.experts.iter().find(|e| !e.single_type)
    }
}

/// One volume's boxes from one or more experts.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeProposals {
    pub volume: VolumeKey,
    pub boxes: Vec<ScoredBox>,
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Provenance token of a true-lesion box.
pub fn lesion_source(lesion_id: &str) -> String {
    format!("lesion:{lesion_id}")
}

/// Lesion id planted in a provenance token, if any.
pub fn planted_lesion(source_id: &str) -> Option<&str> {
    source_id.strip_prefix("lesion:")
}

/// Emits one expert's proposals for every volume.
///
/// Each lesion slice is detected independently with the expert's
/// sensitivity for that lesion type; false positives arrive as a Poisson
/// process per slice.
pub fn simulate_expert(
    cohort: &SyntheticCohort,
    expert: &ExpertProfile,
    oracle: &OracleConfig,
    seed: u64,
) -> Result<Vec<VolumeProposals>> {
    oracle.validate()?;
    let spec = &cohort.spec;
    let dim = spec.embedding_dim;
    Ok(cohort
        .volumes
        .par_iter()
        .map(|vol| {
            let mut rng = rng_for(seed, &format!("expert/{}/{}", expert.expert_id, vol.meta.key.volume_id));
            let jitter = Normal::new(0.0, oracle.jitter.max(f64::MIN_POSITIVE)).unwrap();
            let mut boxes = Vec::new();
            for lesion in &vol.lesions {
                let s = expert.sensitivity.get(lesion.lesion_type);
                for (slice, truth) in &lesion.slice_boxes {
                    if !rng.random_bool(s) {
                        continue;
                    }
                    let (dx, dy, dw, dh) = if oracle.jitter > 0.0 {
                        (jitter.sample(&mut rng), jitter.sample(&mut rng), jitter.sample(&mut rng), jitter.sample(&mut rng))
                    } else {
                        (0.0, 0.0, 0.0, 0.0)
                    };
                    let bbox = Box2D {
                        cx: truth.cx + dx,
                        cy: truth.cy + dy,
                        w: (truth.w + dw).max(1.0),
                        h: (truth.h + dh).max(1.0),
                    };
                    let score = uniform(&mut rng, oracle.tp_score);
                    let emb = planted_embedding(&mut rng, dim, lesion.identity, oracle.embedding_noise);
                    boxes.push(
                        ScoredBox::new(bbox, score, *slice, expert.expert_id.clone())
                            .with_source(lesion_source(&lesion.lesion_id))
                            .with_embedding(emb),
                    );
                }
            }
            if expert.fp_rate > 0.0 {
                let poisson = Poisson::new(expert.fp_rate).unwrap();
                for slice in 0..spec.slices_per_volume as i64 {
                    let n = poisson.sample(&mut rng) as usize;
                    for k in 0..n {
                        let d = uniform(&mut rng, spec.lesion_diameter);
                        let half = d / 2.0;
                        let cx = rng.random_range(half..=spec.image_size - half);
                        let cy = rng.random_range(half..=spec.image_size - half);
                        let score = uniform(&mut rng, oracle.fp_score);
                        let emb = random_unit(&mut rng, dim);
                        boxes.push(
                            ScoredBox::new(Box2D { cx, cy, w: d, h: d }, score, slice, expert.expert_id.clone())
                                .with_source(format!("fp:{}:{}:{slice}:{k}", expert.expert_id, vol.meta.key.volume_id))
                                .with_embedding(emb),
                        );
                    }
                }
            }
            boxes.sort_by_key(|b| b.slice);
            VolumeProposals { volume: vol.meta.key.clone(), boxes }
        })
        .collect())
}

/// Runs every expert and merges their boxes per volume, in expert order.
pub fn simulate_all(cohort: &SyntheticCohort, oracle: &OracleConfig, seed: u64) -> Result<Vec<VolumeProposals>> {
    let mut merged: Vec<VolumeProposals> = cohort
        .volumes
        .iter()
        .map(|v| VolumeProposals { volume: v.meta.key.clone(), boxes: Vec::new() })
        .collect();
    for expert in &oracle.experts {
        for (slot, vp) in merged.iter_mut().zip(simulate_expert(cohort, expert, oracle, seed)?) {
            slot.boxes.extend(vp.boxes);
        }
    }
    Ok(merged)
}

/// Fraction of truth lesion slices, per lesion type, covered by a label box
/// with IoU above 0.5.
pub fn label_coverage(cohort: &SyntheticCohort, labels: &BTreeMap<(String, i64), Vec<Box2D>>) -> [f64; 4] {
    let mut hit = [0usize; 4];
    let mut total = [0usize; 4];
    for vol in &cohort.volumes {
        for lesion in &vol.lesions {
            let t = lesion.lesion_type.index();
            for (slice, truth) in &lesion.slice_boxes {
                total[t] += 1;
                let covered = labels
                    .get(&(vol.meta.key.volume_id.clone(), *slice))
                    .is_some_and(|bs| bs.iter().any(|b| iou_2d(b, truth) > 0.5));
                hit[t] += usize::from(covered);
            }
        }
    }
    std::array::from_fn(|i| if total[i] == 0 { 0.0 } else { hit[i] as f64 / total[i] as f64 })
}

/// Oracle for a detector retrained on refined labels: the universal
/// expert's miss rate on each lesion type shrinks in proportion to how much
/// of the previously unlabeled truth the refined labels now cover.
pub fn retrained_oracle(oracle: &OracleConfig, baseline: [f64; 4], refined: [f64; 4]) -> OracleConfig {
    let mut out = oracle.clone();
    for e in out.experts.iter_mut().filter(|e| !e.single_type) {
        for kind in LesionType::ALL {
            let i = kind.index();
            let gained = if baseline[i] < 1.0 { ((refined[i] - baseline[i]) / (1.0 - baseline[i])).max(0.0) } else { 0.0 };
            let s = e.sensitivity.slot(kind);
            *s = (*s + oracle.retrain_gain * (1.0 - *s) * gained).min(1.0);
        }
    }
    out
}

/// Classifier score for a proposal, drawn from the TP or FP range.
pub fn oracle_classifier_score(oracle: &OracleConfig, is_lesion: bool, seed: u64, key: &str) -> f64 {
    let mut rng = rng_for(seed, key);
    uniform(&mut rng, if is_lesion { oracle.fpr_tp_score } else { oracle.fpr_fp_score })
}

/// Perfect centerness and regression maps for one slice: 1 and exact border
/// distances where `assign_targets` puts a positive, 0 elsewhere.
pub fn simulate_dense_maps(
    gt: &GtSlice,
    map_width: usize,
    map_height: usize,
    stride: f64,
    ratios: RegionRatios,
) -> Result<(FeatureMap<f64>, FeatureMap<[f64; 4]>)> {
    let t = assign_targets(gt, map_width, map_height, stride, ratios)?;
    let centerness = FeatureMap::from_vec(
        map_width,
        map_height,
        t.regression_mask.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )?;
    let mut regression = t.regression;
    for (r, m) in regression.data.iter_mut().zip(&t.regression_mask.data) {
        if !m {
            *r = [0.0; 4];
        }
    }
    Ok((centerness, regression))
}

/// Random slice with disjoint certain and uncertain boxes of side at least
/// `min_side`, all fully inside a `size` x `size` image.
///
/// Panics unless `0 < min_side <= max_side <= size`.
pub fn random_gt_slice<R: Rng>(rng: &mut R, size: f64, min_side: f64, max_side: f64, max_boxes: usize) -> GtSlice {
    assert!(0.0 < min_side && min_side <= max_side && max_side <= size, "box sides must fit the image");
    let mut gt = GtSlice::new(0);
    let n = rng.random_range(0..=max_boxes);
    let mut placed: Vec<Box2D> = Vec::new();
    for _ in 0..n * 20 {
        if placed.len() == n {
            break;
        }
        let w = rng.random_range(min_side..=max_side);
        let h = rng.random_range(min_side..=max_side);
        let cx = rng.random_range(w / 2.0..=size - w / 2.0);
        let cy = rng.random_range(h / 2.0..=size - h / 2.0);
        let b = Box2D { cx, cy, w, h };
        if placed.iter().any(|p| p.intersection_area(&b) > 0.0) {
            continue;
        }
        placed.push(b);
        gt = if rng.random_bool(0.25) { gt.uncertain(b) } else { gt.certain(b) };
    }
    gt
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub ratio: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { ratio: 1.0, shift_x: 0.0, shift_y: 0.0 };

    /// Resize ratio uniform in [0.8, 1.2]; integer shifts uniform in [-8, 8].
    pub fn sample(seed: u64) -> Self {
        let mut rng = rng_for(seed, "augment");
        AugmentParams {
            ratio: rng.random_range(0.8..=1.2),
            shift_x: f64::from(rng.random_range(-8i32..=8)),
            shift_y: f64::from(rng.random_range(-8i32..=8)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.8..=1.2).contains(&self.ratio) || !(-8.0..=8.0).contains(&self.shift_x) || !(-8.0..=8.0).contains(&self.shift_y) {
            return Err(Error::invalid(format!("augmentation {self:?} outside ratio [0.8, 1.2] / shift [-8, 8]")));
        }
        Ok(())
    }
}

/// Resizes about the image origin, then shifts.
pub fn augment_slice(boxes: &[Box2D], params: AugmentParams) -> Result<Vec<Box2D>> {
    params.validate()?;
    let AugmentParams { ratio, shift_x, shift_y } = params;
    Ok(boxes
        .iter()
        .map(|b| Box2D { cx: b.cx * ratio + shift_x, cy: b.cy * ratio + shift_y, w: b.w * ratio, h: b.h * ratio })
        .collect())
}
