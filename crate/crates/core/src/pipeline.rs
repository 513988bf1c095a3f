//! File-backed pipeline stages. Every stage reads record streams from a run
//! directory and writes its own; `run` chains them, so running the stages
//! one by one reproduces a full run byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::afp::{decode_proposals, DecodeParams};
use crate::config::PipelineConfig;
use crate::ensemble::{build_tracklets, pool_and_nms, stack_to_3d, Proposal3D, Tracklet};
use crate::error::{Error, Result};
use crate::eval::{froc, match_volume, FrocCurve, MatchResult};
use crate::fpr::{fuse_scores, select_fpr_samples, FprCandidate, FprLabel, FprProposal, PatchSpec};
use crate::geometry::{Box2D, Box3D, ScoredBox};
use crate::ingest::{read_stream_file, tensor_to_box_map, tensor_to_scalar_map, write_stream_file, Tensor, VolumeKey, VolumeMeta};
use crate::mining::{
    assemble_training_set, match_intra_patient, mine_cross_dataset, propagate_cross_slice, Annotation, MiningStageCounts,
    SliceLabels, TrainingLabelSet, VolumeTracklets,
};
use crate::synth::{
    generate_cohort, label_coverage, oracle_classifier_score, planted_lesion, retrained_oracle, simulate_all, LesionInstance,
    LesionType, SynthVolume, SyntheticCohort,
};

/// Standard file names inside a run directory.
pub mod files {
    pub const VOLUMES: &str = "volumes.jsonl";
    pub const TRUTH: &str = "truth.jsonl";
    pub const ANNOTATIONS: &str = "annotations.jsonl";
    pub const PROPOSALS: &str = "proposals.jsonl";
    pub const FUSED: &str = "fused.jsonl";
    pub const PROPOSALS_3D: &str = "proposals3d.jsonl";
    pub const MINED_PROPAGATE: &str = "mined_propagate.jsonl";
    pub const MINED_MATCH: &str = "mined_match.jsonl";
    pub const UNCERTAIN: &str = "uncertain.jsonl";
    pub const TRAINING_SET: &str = "training_set.jsonl";
    pub const PROPOSALS_REFINED: &str = "proposals_refined.jsonl";
    pub const FUSED_REFINED: &str = "fused_refined.jsonl";
    pub const PROPOSALS_3D_REFINED: &str = "proposals3d_refined.jsonl";
    pub const FPR_SAMPLES: &str = "fpr_samples.jsonl";
    pub const SCORED_3D: &str = "scored3d.jsonl";
    pub const FROC_INITIAL: &str = "froc_initial.csv";
    pub const FROC_DETECTOR: &str = "froc_detector.csv";
    pub const FROC: &str = "froc.csv";
    pub const FROC_SVG: &str = "froc.svg";
    pub const MANIFEST: &str = "manifest.json";
}

/// Record kinds written in stream headers.
pub mod kinds {
    pub const VOLUME: &str = "volume";
    pub const TRUTH: &str = "lesion_truth";
    pub const ANNOTATION: &str = "annotation";
    pub const PROPOSAL_2D: &str = "proposal2d";
    pub const PROPOSAL_3D: &str = "proposal3d";
    pub const TRAINING_SLICE: &str = "training_slice";
    pub const FPR_SAMPLE: &str = "fpr_sample";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceBox {
    pub slice: i64,
    #[serde(rename = "box")]
    pub bbox: Box2D,
}

/// Planted lesion instance, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub volume_id: String,
    pub lesion_id: String,
    pub identity: usize,
    pub lesion_type: LesionType,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub key_slice: i64,
    pub slice_boxes: Vec<SliceBox>,
    pub hidden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeBox {
    pub volume_id: String,
    #[serde(flatten)]
    pub proposal: ScoredBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeProposal3D {
    pub volume_id: String,
    #[serde(flatten)]
    pub proposal: Proposal3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprSampleRecord {
    pub volume_id: String,
    pub tracklet_ref: usize,
    pub label: FprLabel,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub patch: PatchSpec,
    pub sources: Vec<String>,
}

/// Runs `f` on a pool of `workers` threads (0 = one per core).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

fn group_by_volume<T>(items: Vec<T>, key: impl Fn(&T) -> &str) -> BTreeMap<String, Vec<T>> {
    let mut out: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for item in items {
        out.entry(key(&item).to_string()).or_default().push(item);
    }
    out
}

fn read_volumes(path: &Path) -> Result<Vec<VolumeMeta>> {
    let (_, volumes) = read_stream_file::<VolumeMeta>(path, kinds::VOLUME)?;
    if volumes.is_empty() {
        return Err(Error::EmptyInput(format!("{} lists no volumes", path.display())));
    }
    for v in &volumes {
        v.validate()?;
    }
    Ok(volumes)
}

fn read_boxes(path: &Path) -> Result<Vec<VolumeBox>> {
    Ok(read_stream_file(path, kinds::PROPOSAL_2D)?.1)
}

fn read_3d(path: &Path) -> Result<Vec<VolumeProposal3D>> {
    Ok(read_stream_file(path, kinds::PROPOSAL_3D)?.1)
}

pub fn read_annotations(paths: &[PathBuf]) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_stream_file::<Annotation>(p, kinds::ANNOTATION)?.1);
    }
    Ok(out)
}

fn tracklets_by_volume(cfg: &PipelineConfig, fused: Vec<VolumeBox>) -> BTreeMap<String, Vec<Tracklet>> {
    let grouped: Vec<(String, Vec<VolumeBox>)> = group_by_volume(fused, |b| &b.volume_id).into_iter().collect();
    grouped
        .into_par_iter()
        .map(|(vid, boxes)| {
            let boxes: Vec<ScoredBox> = boxes.into_iter().map(|b| b.proposal).collect();
            (vid, build_tracklets(&boxes, cfg.thresholds.theta))
        })
        .collect()
}

/// Generates the synthetic cohort: volumes, planted truth and visible labels.
pub fn synth_gen(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cohort = generate_cohort(&cfg.cohort, cfg.stage_seed("cohort"))?;
    let hash = cfg.hash();
    let truth: Vec<TruthRecord> = cohort
        .volumes
        .iter()
        .flat_map(|v| {
            v.lesions.iter().map(|l| TruthRecord {
                volume_id: v.meta.key.volume_id.clone(),
                lesion_id: l.lesion_id.clone(),
                identity: l.identity,
                lesion_type: l.lesion_type,
                bbox: l.bbox,
                key_slice: l.key_slice,
                slice_boxes: l.slice_boxes.iter().map(|(slice, bbox)| SliceBox { slice: *slice, bbox: *bbox }).collect(),
                hidden: l.hidden,
            })
        })
        .collect();
    write_stream_file(&dir.join(files::VOLUMES), kinds::VOLUME, &hash, &cohort.metas())?;
    write_stream_file(&dir.join(files::TRUTH), kinds::TRUTH, &hash, &truth)?;
    write_stream_file(&dir.join(files::ANNOTATIONS), kinds::ANNOTATION, &hash, &cohort.annotations)?;
    Ok(())
}

/// Rebuilds the cohort from a run directory.
pub fn load_cohort(cfg: &PipelineConfig, dir: &Path) -> Result<SyntheticCohort> {
    let volumes = read_volumes(&dir.join(files::VOLUMES))?;
    let (_, truth) = read_stream_file::<TruthRecord>(&dir.join(files::TRUTH), kinds::TRUTH)?;
    let annotations = read_annotations(&[dir.join(files::ANNOTATIONS)])?;
    let mut by_volume = group_by_volume(truth, |t| &t.volume_id);
    let volumes = volumes
        .into_iter()
        .map(|meta| {
            let lesions = by_volume
                .remove(&meta.key.volume_id)
                .unwrap_or_default()
                .into_iter()
                .map(|t| LesionInstance {
                    lesion_id: t.lesion_id,
                    identity: t.identity,
                    lesion_type: t.lesion_type,
                    bbox: t.bbox,
                    key_slice: t.key_slice,
                    slice_boxes: t.slice_boxes.into_iter().map(|s| (s.slice, s.bbox)).collect(),
                    hidden: t.hidden,
                })
                .collect();
            SynthVolume { meta, lesions }
        })
        .collect();
    if let Some(orphan) = by_volume.keys().next() {
        return Err(Error::format(format!("truth references unknown volume {orphan}")));
    }
    Ok(SyntheticCohort { spec: cfg.cohort.clone(), volumes, annotations })
}

type LabelMap = BTreeMap<(String, i64), Vec<Box2D>>;

fn certain_label_map(annotations: &[Annotation]) -> LabelMap {
    let mut out = LabelMap::new();
    for a in annotations.iter().filter(|a| a.status.is_certain()) {
        out.entry((a.volume.volume_id.clone(), a.key_slice)).or_default().push(a.bbox);
    }
    out
}

fn training_label_map(slices: &[SliceLabels]) -> LabelMap {
    slices.iter().map(|s| ((s.volume_id.clone(), s.slice), s.certain.clone())).collect()
}

/// Runs the oracle experts over the cohort. With `refined`, the universal
/// expert is first retrained on the assembled training set.
pub fn simulate(cfg: &PipelineConfig, dir: &Path, refined: bool, out: &Path) -> Result<usize> {
    let cohort = load_cohort(cfg, dir)?;
    let (oracle, seed) = if refined {
        let (_, slices) = read_stream_file::<SliceLabels>(&dir.join(files::TRAINING_SET), kinds::TRAINING_SLICE)?;
        let baseline = label_coverage(&cohort, &certain_label_map(&cohort.annotations));
        let after = label_coverage(&cohort, &training_label_map(&slices));
        (retrained_oracle(&cfg.oracle, baseline, after), cfg.stage_seed("oracle-refined"))
    } else {
        (cfg.oracle.clone(), cfg.stage_seed("oracle"))
    };
    let records: Vec<VolumeBox> = simulate_all(&cohort, &oracle, seed)?
        .into_iter()
        .flat_map(|vp| {
            let vid = vp.volume.volume_id;
            vp.boxes.into_iter().map(move |proposal| VolumeBox { volume_id: vid.clone(), proposal })
        })
        .collect();
    write_stream_file(out, kinds::PROPOSAL_2D, &cfg.hash(), &records)?;
    Ok(records.len())
}

/// Decodes one slice's dense maps into 2D proposals.
pub fn decode(
    cfg: &PipelineConfig,
    centerness: &Path,
    regression: &Path,
    volume_id: &str,
    params: &DecodeParams,
    out: &Path,
) -> Result<usize> {
    let c = tensor_to_scalar_map(&Tensor::read_file(centerness)?)?;
    let r = tensor_to_box_map(&Tensor::read_file(regression)?)?;
    let records: Vec<VolumeBox> = decode_proposals(&c, &r, params)?
        .into_iter()
        .map(|proposal| VolumeBox { volume_id: volume_id.to_string(), proposal })
        .collect();
    write_stream_file(out, kinds::PROPOSAL_2D, &cfg.hash(), &records)?;
    Ok(records.len())
}

/// Pools all experts and applies per-slice NMS in every volume.
pub fn fuse(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<usize> {
    let boxes = read_boxes(input)?;
    if boxes.is_empty() {
        return Err(Error::EmptyInput(format!("{} holds no proposals", input.display())));
    }
    let grouped: Vec<(String, Vec<VolumeBox>)> = group_by_volume(boxes, |b| &b.volume_id).into_iter().collect();
    let fused: Vec<Vec<VolumeBox>> = grouped
        .into_par_iter()
        .map(|(vid, boxes)| {
            let mut per_expert: BTreeMap<String, Vec<ScoredBox>> = BTreeMap::new();
            for b in boxes {
                per_expert.entry(b.proposal.expert_id.clone()).or_default().push(b.proposal);
            }
            let lists: Vec<Vec<ScoredBox>> = per_expert.into_values().collect();
            pool_and_nms(&lists, cfg.thresholds.nms_iou)
                .into_iter()
                .map(|proposal| VolumeBox { volume_id: vid.clone(), proposal })
                .collect()
        })
        .collect();
    let records: Vec<VolumeBox> = fused.into_iter().flatten().collect();
    write_stream_file(out, kinds::PROPOSAL_2D, &cfg.hash(), &records)?;
    Ok(records.len())
}

/// Per volume: id, tracklets, and the proposal stacked from each tracklet.
type Stacked = (String, Vec<Tracklet>, Vec<Proposal3D>);

fn stacked(cfg: &PipelineConfig, fused: &Path) -> Result<Vec<Stacked>> {
    let tracklets = tracklets_by_volume(cfg, read_boxes(fused)?);
    tracklets
        .into_iter()
        .map(|(vid, t)| {
            let p = stack_to_3d(&t)?;
            Ok((vid, t, p))
        })
        .collect()
}

/// Links fused boxes into tracklets and stacks each into a 3D proposal.
pub fn stack3d(cfg: &PipelineConfig, fused: &Path, out: &Path) -> Result<usize> {
    let records: Vec<VolumeProposal3D> = stacked(cfg, fused)?
        .into_iter()
        .flat_map(|(vid, _, props)| props.into_iter().map(move |proposal| VolumeProposal3D { volume_id: vid.clone(), proposal }))
        .collect();
    write_stream_file(out, kinds::PROPOSAL_3D, &cfg.hash(), &records)?;
    Ok(records.len())
}

/// Cross-slice propagation of the given annotations along fused tracklets.
pub fn mine_propagate(cfg: &PipelineConfig, fused: &Path, annotations: &[PathBuf], out: &Path) -> Result<usize> {
    let known = group_by_volume(read_annotations(annotations)?, |a| &a.volume.volume_id);
    let tracklets: Vec<(String, Vec<Tracklet>)> = tracklets_by_volume(cfg, read_boxes(fused)?).into_iter().collect();
    let mined: Vec<Vec<Annotation>> = tracklets
        .par_iter()
        .map(|(vid, t)| match known.get(vid) {
            Some(ann) => propagate_cross_slice(t, ann, cfg.thresholds.theta),
            None => Vec::new(),
        })
        .collect();
    let mined: Vec<Annotation> = mined.into_iter().flatten().collect();
    write_stream_file(out, kinds::ANNOTATION, &cfg.hash(), &mined)?;
    Ok(mined.len())
}

/// Intra-patient lesion matching by embedding distance.
pub fn mine_match(
    cfg: &PipelineConfig,
    volumes: &Path,
    fused: &Path,
    annotations: &[PathBuf],
    out: &Path,
) -> Result<usize> {
    let keys: BTreeMap<String, VolumeKey> =
        read_volumes(volumes)?.into_iter().map(|v| (v.key.volume_id.clone(), v.key)).collect();
    let known = read_annotations(annotations)?;
    let candidates: Vec<VolumeTracklets> = tracklets_by_volume(cfg, read_boxes(fused)?)
        .into_iter()
        .map(|(vid, tracklets)| {
            let volume = keys
                .get(&vid)
                .cloned()
                .ok_or_else(|| Error::format(format!("proposals reference unknown volume {vid}")))?;
            Ok(VolumeTracklets { volume, tracklets })
        })
        .collect::<Result<_>>()?;
    let mined = match_intra_patient(&known, &candidates, cfg.match_params())?;
    write_stream_file(out, kinds::ANNOTATION, &cfg.hash(), &mined)?;
    Ok(mined.len())
}

/// Cross-dataset mining of confident single-type expert boxes as uncertain labels.
pub fn mine_cross(
    cfg: &PipelineConfig,
    volumes: &Path,
    proposals: &Path,
    annotations: &[PathBuf],
    out: &Path,
) -> Result<usize> {
    let keys: Vec<VolumeKey> = read_volumes(volumes)?.into_iter().map(|v| v.key).collect();
    let known = group_by_volume(read_annotations(annotations)?, |a| &a.volume.volume_id);
    let single_type = |id: &str| cfg.oracle.expert(id).is_some_and(|e| e.single_type);
    let mut boxes = group_by_volume(read_boxes(proposals)?, |b| &b.volume_id);
    let params = cfg.cross_params();
    let per_volume: Vec<(VolumeKey, Vec<ScoredBox>)> = keys
        .into_iter()
        .map(|k| {
            let b = boxes
                .remove(&k.volume_id)
                .unwrap_or_default()
                .into_iter()
                .map(|b| b.proposal)
                .filter(|p| single_type(&p.expert_id))
                .collect();
            (k, b)
        })
        .collect();
    let mined: Vec<Vec<Annotation>> = per_volume
        .par_iter()
        .map(|(k, b)| {
            let ann = known.get(&k.volume_id).map(Vec::as_slice).unwrap_or(&[]);
            mine_cross_dataset(k, b, ann, &params)
        })
        .collect();
    let mined: Vec<Annotation> = mined.into_iter().flatten().collect();
    write_stream_file(out, kinds::ANNOTATION, &cfg.hash(), &mined)?;
    Ok(mined.len())
}

/// Assembles the training slices from original, mined and uncertain labels.
pub fn assemble(
    cfg: &PipelineConfig,
    volumes: &Path,
    original: &Path,
    mined: &[PathBuf],
    uncertain: &Path,
    out: &Path,
) -> Result<TrainingLabelSet> {
    let volumes = read_volumes(volumes)?;
    let original = read_annotations(&[original.to_path_buf()])?;
    let mined = read_annotations(mined)?;
    let uncertain = read_annotations(&[uncertain.to_path_buf()])?;
    let set = assemble_training_set(&volumes, &original, &mined, &uncertain, cfg.assemble_params())?;
    write_stream_file(out, kinds::TRAINING_SLICE, &cfg.hash(), &set.slices)?;
    Ok(set)
}

fn is_planted(t: &Tracklet) -> bool {
    t.members().iter().any(|m| planted_lesion(&m.source_id).is_some())
}

/// Selects FPR training samples from the stacked proposals, then rescores
/// every 3D proposal with the mean of its detector and classifier scores.
/// Returns the TP and FP sample counts.
pub fn fpr_select(
    cfg: &PipelineConfig,
    volumes: &Path,
    fused: &Path,
    annotations: &[PathBuf],
    samples_out: &Path,
    scored_out: &Path,
) -> Result<(usize, usize)> {
    let keys: BTreeMap<String, VolumeKey> =
        read_volumes(volumes)?.into_iter().map(|v| (v.key.volume_id.clone(), v.key)).collect();
    let annotations = read_annotations(annotations)?;
    let stacks = stacked(cfg, fused)?;

    let mut candidates = Vec::new();
    let mut refs = Vec::new();
    for (vid, tracklets, props) in &stacks {
        let volume = keys
            .get(vid)
            .cloned()
            .ok_or_else(|| Error::format(format!("proposals reference unknown volume {vid}")))?;
        for p in props {
            candidates.push(FprCandidate {
                volume: volume.clone(),
                proposal: FprProposal::Stacked {
                    tracklet: tracklets[p.tracklet_ref].clone(),
                    bbox: p.bbox,
                    score: p.score,
                },
            });
            refs.push(p.tracklet_ref);
        }
    }
    let samples = select_fpr_samples(&candidates, &annotations, &cfg.fpr_params())?;
    // samples are a subsequence of the candidates
    let mut cursor = 0;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        while candidates[cursor].volume != s.volume || candidates[cursor].proposal != s.proposal {
            cursor += 1;
        }
        records.push(FprSampleRecord {
            volume_id: s.volume.volume_id.clone(),
            tracklet_ref: refs[cursor],
            label: s.label,
            score: s.proposal.score(),
            bbox: s.proposal.bbox(),
            patch: s.patch,
            sources: s.proposal.sources().into_iter().map(String::from).collect(),
        });
        cursor += 1;
    }
    let tp = records.iter().filter(|r| r.label == FprLabel::Tp).count();
    write_stream_file(samples_out, kinds::FPR_SAMPLE, &cfg.hash(), &records)?;

    let seed = cfg.stage_seed("classifier");
    let mut scored = Vec::new();
    for (vid, tracklets, props) in stacks {
        for mut p in props {
            let key = format!("{vid}/{}", p.tracklet_ref);
            let s_fpr = oracle_classifier_score(&cfg.oracle, is_planted(&tracklets[p.tracklet_ref]), seed, &key);
            p.score = fuse_scores(p.score, s_fpr)?;
            scored.push(VolumeProposal3D { volume_id: vid.clone(), proposal: p });
        }
    }
    write_stream_file(scored_out, kinds::PROPOSAL_3D, &cfg.hash(), &scored)?;
    Ok((tp, records.len() - tp))
}

/// FROC of 3D proposals against the full planted truth.
pub fn eval_froc(
    cfg: &PipelineConfig,
    volumes: &Path,
    truth: &Path,
    proposals: &Path,
    csv_out: &Path,
    svg_out: Option<&Path>,
) -> Result<FrocCurve> {
    let volumes = read_volumes(volumes)?;
    let (_, truth) = read_stream_file::<TruthRecord>(truth, kinds::TRUTH)?;
    let mut gts = group_by_volume(truth, |t| &t.volume_id);
    let mut props = group_by_volume(read_3d(proposals)?, |p| &p.volume_id);
    let matches: Vec<MatchResult> = volumes
        .iter()
        .map(|v| {
            let g: Vec<Box3D> = gts.remove(&v.key.volume_id).unwrap_or_default().into_iter().map(|t| t.bbox).collect();
            let p: Vec<Proposal3D> =
                props.remove(&v.key.volume_id).unwrap_or_default().into_iter().map(|p| p.proposal).collect();
            match_volume(&p, &g, cfg.thresholds.iobb, cfg.duplicate_policy())
        })
        .collect();
    if let Some(orphan) = props.keys().chain(gts.keys()).next() {
        return Err(Error::format(format!("records reference unknown volume {orphan}")));
    }
    let curve = froc(&matches, &cfg.thresholds.fp_points)?;
    let hash = cfg.hash();
    let mut buf = Vec::new();
    curve.write_csv(&mut buf, &hash)?;
    fs::write(csv_out, buf)?;
    if let Some(svg) = svg_out {
        let mut buf = Vec::new();
        curve.write_svg(&mut buf, &hash)?;
        fs::write(svg, buf)?;
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub volumes: usize,
    pub lesion_instances: usize,
    pub hidden_instances: usize,
    pub proposals: usize,
    pub fused: usize,
    pub proposals3d: usize,
    pub training_positive_slices: usize,
    pub training_negative_slices: usize,
    pub negative_shortfall: usize,
    pub refined_proposals: usize,
    pub refined_proposals3d: usize,
    pub fpr_tp: usize,
    pub fpr_fp: usize,
}

/// Summary of a full run. Holds no timestamps so reruns are identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub counts: StageCounts,
    pub mining: Vec<MiningStageCounts>,
    /// Detector trained on the original labels only.
    pub froc_initial: FrocCurve,
    /// Detector retrained on the mined labels.
    pub froc_detector: FrocCurve,
    /// Retrained detector after FPR rescoring.
    pub froc: FrocCurve,
    /// SHA-256 of every output file.
    pub files: BTreeMap<String, String>,
}

pub const SEED_STAGES: [&str; 5] = ["cohort", "oracle", "oracle-refined", "assemble", "fpr-select"];

/// Every stage in order, then the manifest.
pub fn run(cfg: &PipelineConfig, dir: &Path) -> Result<Manifest> {
    use files::*;
    let p = |name: &str| dir.join(name);
    synth_gen(cfg, dir)?;
    let proposals = simulate(cfg, dir, false, &p(PROPOSALS))?;
    let fused = fuse(cfg, &p(PROPOSALS), &p(FUSED))?;
    let proposals3d = stack3d(cfg, &p(FUSED), &p(PROPOSALS_3D))?;
    mine_propagate(cfg, &p(FUSED), &[p(ANNOTATIONS)], &p(MINED_PROPAGATE))?;
    mine_match(cfg, &p(VOLUMES), &p(FUSED), &[p(ANNOTATIONS), p(MINED_PROPAGATE)], &p(MINED_MATCH))?;
    mine_cross(cfg, &p(VOLUMES), &p(PROPOSALS), &[p(ANNOTATIONS), p(MINED_PROPAGATE), p(MINED_MATCH)], &p(UNCERTAIN))?;
    let set = assemble(cfg, &p(VOLUMES), &p(ANNOTATIONS), &[p(MINED_PROPAGATE), p(MINED_MATCH)], &p(UNCERTAIN), &p(TRAINING_SET))?;
    let refined_proposals = simulate(cfg, dir, true, &p(PROPOSALS_REFINED))?;
    fuse(cfg, &p(PROPOSALS_REFINED), &p(FUSED_REFINED))?;
    let refined_proposals3d = stack3d(cfg, &p(FUSED_REFINED), &p(PROPOSALS_3D_REFINED))?;
    let (fpr_tp, fpr_fp) = fpr_select(
        cfg,
        &p(VOLUMES),
        &p(FUSED_REFINED),
        &[p(ANNOTATIONS), p(MINED_PROPAGATE), p(MINED_MATCH), p(UNCERTAIN)],
        &p(FPR_SAMPLES),
        &p(SCORED_3D),
    )?;
    let froc_initial = eval_froc(cfg, &p(VOLUMES), &p(TRUTH), &p(PROPOSALS_3D), &p(FROC_INITIAL), None)?;
    let froc_detector = eval_froc(cfg, &p(VOLUMES), &p(TRUTH), &p(PROPOSALS_3D_REFINED), &p(FROC_DETECTOR), None)?;
    let froc_final = eval_froc(cfg, &p(VOLUMES), &p(TRUTH), &p(SCORED_3D), &p(FROC), Some(&p(FROC_SVG)))?;

    let cohort = load_cohort(cfg, dir)?;
    let original = cohort.annotations.clone();
    let propagated = read_annotations(&[p(MINED_PROPAGATE)])?;
    let matched = read_annotations(&[p(MINED_MATCH)])?;
    let uncertain = read_annotations(&[p(UNCERTAIN)])?;
    let mut cumulative: Vec<&Annotation> = original.iter().collect();
    let mut mining = vec![MiningStageCounts::tally("original", &cumulative)];
    for (stage, labels) in [("propagate", &propagated), ("match", &matched), ("cross", &uncertain)] {
        cumulative.extend(labels.iter());
        mining.push(MiningStageCounts::tally(stage, &cumulative));
    }

    let instances: Vec<&LesionInstance> = cohort.volumes.iter().flat_map(|v| &v.lesions).collect();
    let counts = StageCounts {
        volumes: cohort.volumes.len(),
        lesion_instances: instances.len(),
        hidden_instances: instances.iter().filter(|l| l.hidden).count(),
        proposals,
        fused,
        proposals3d,
        training_positive_slices: set.positives().count(),
        training_negative_slices: set.negatives().count(),
        negative_shortfall: set.negative_shortfall,
        refined_proposals,
        refined_proposals3d,
        fpr_tp,
        fpr_fp,
    };

    let mut hashes = BTreeMap::new();
    for name in [
        VOLUMES, TRUTH, ANNOTATIONS, PROPOSALS, FUSED, PROPOSALS_3D, MINED_PROPAGATE, MINED_MATCH, UNCERTAIN, TRAINING_SET,
        PROPOSALS_REFINED, FUSED_REFINED, PROPOSALS_3D_REFINED, FPR_SAMPLES, SCORED_3D, FROC_INITIAL, FROC_DETECTOR, FROC, FROC_SVG,
    ] {
        let digest = Sha256::digest(fs::read(p(name))?);
        hashes.insert(name.to_string(), digest.iter().map(|b| format!("{b:02x}")).collect());
    }

    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        seeds: SEED_STAGES.iter().map(|s| (s.to_string(), cfg.stage_seed(s))).collect(),
        counts,
        mining,
        froc_initial,
        froc_detector,
        froc: froc_final,
        files: hashes,
    };
    let value = serde_json::to_value(&manifest).map_err(|e| Error::format(e.to_string()))?;
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::format(e.to_string()))?;
    fs::write(p(MANIFEST), text + "\n")?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::CohortSpec;

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            seed: 3,
            cohort: CohortSpec { patients: 3, slices_per_volume: 32, ..CohortSpec::default() },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn cohort_survives_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        synth_gen(&cfg, dir.path()).unwrap();
        let loaded = load_cohort(&cfg, dir.path()).unwrap();
        let fresh = generate_cohort(&cfg.cohort, cfg.stage_seed("cohort")).unwrap();
        assert_eq!(loaded, fresh);
    }

    #[test]
    fn full_run_is_deterministic_across_workers() {
        let cfg = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = with_workers(1, || run(&cfg, a.path())).unwrap().unwrap();
        let mb = with_workers(4, || run(&cfg, b.path())).unwrap().unwrap();
        assert_eq!(ma, mb);
        assert_eq!(fs::read(a.path().join(files::MANIFEST)).unwrap(), fs::read(b.path().join(files::MANIFEST)).unwrap());
    }

    #[test]
    fn run_reports_consistent_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = run(&tiny(), dir.path()).unwrap();
        assert_eq!(m.mining.len(), 4);
        for w in m.mining.windows(2) {
            assert!(w[1].gt_2d >= w[0].gt_2d);
        }
        assert!(m.counts.fused <= m.counts.proposals);
        assert!(m.counts.fpr_fp <= 2 * m.counts.fpr_tp);
        assert!(m.froc.average_sensitivity > 0.0);
    }

    #[test]
    fn empty_proposals_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let path = dir.path().join("empty.jsonl");
        write_stream_file::<VolumeBox>(&path, kinds::PROPOSAL_2D, "x", &[]).unwrap();
        assert!(matches!(fuse(&cfg, &path, &dir.path().join("o.jsonl")), Err(Error::EmptyInput(_))));
    }
}
