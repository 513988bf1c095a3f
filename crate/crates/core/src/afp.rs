//! Anchor-free proposal math: dense target assignment, the centerness focal
//! loss, the L1 size loss, the weighted loss total, and decoding of dense
//! maps back into scored boxes.
//!
//! Feature pixel `(x, y)` sits at image location `(x * stride, y * stride)`.
//! Region membership is a point-in-half-open-box test at that location.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{score_order, Box2D, ScoredBox};

/// Row-major dense map over a feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> FeatureMap<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        FeatureMap { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "map data has {} values, expected {width}x{height}",
                data.len()
            )));
        }
        Ok(FeatureMap { width, height, data })
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[self.index(x, y)]
    }

    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn same_shape<U>(&self, other: &FeatureMap<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterLabel {
    Negative,
    Positive,
    Ignored,
}

impl CenterLabel {
    /// Numeric code used in tensor files: 1 positive, 0 negative, -1 ignored.
    pub fn code(self) -> f32 {
        match self {
            CenterLabel::Positive => 1.0,
            CenterLabel::Negative => 0.0,
            CenterLabel::Ignored => -1.0,
        }
    }

    pub fn from_code(code: f32) -> Option<Self> {
        match code {
            1.0 => Some(CenterLabel::Positive),
            0.0 => Some(CenterLabel::Negative),
            -1.0 => Some(CenterLabel::Ignored),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxCertainty {
    Certain,
    Uncertain,
}

/// Ground truth for one slice. Uncertain boxes only carve out an ignore region.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtSlice {
    pub slice: i64,
    pub boxes: Vec<(Box2D, BoxCertainty)>,
}

impl GtSlice {
    pub fn new(slice: i64) -> Self {
        GtSlice { slice, boxes: Vec::new() }
    }

    pub fn certain(mut self, b: Box2D) -> Self {
        self.boxes.push((b, BoxCertainty::Certain));
        self
    }

    pub fn uncertain(mut self, b: Box2D) -> Self {
        self.boxes.push((b, BoxCertainty::Uncertain));
        self
    }

    pub fn certain_boxes(&self) -> impl Iterator<Item = &Box2D> {
        self.boxes
            .iter()
            .filter(|(_, c)| *c == BoxCertainty::Certain)
            .map(|(b, _)| b)
    }
}

/// Center- and ignore-region ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionRatios {
    pub r_c: f64,
    pub r_i: f64,
}

impl Default for RegionRatios {
    fn default() -> Self {
        RegionRatios { r_c: 0.2, r_i: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTargetMaps {
    pub width: usize,
    pub height: usize,
    pub stride: f64,
    pub centerness: FeatureMap<CenterLabel>,
    /// (left, right, top, bottom) distances in image pixels.
    pub regression: FeatureMap<[f64; 4]>,
    pub regression_mask: FeatureMap<bool>,
}

impl DenseTargetMaps {
    pub fn positive_count(&self) -> usize {
        self.centerness.data.iter().filter(|&&l| l == CenterLabel::Positive).count()
    }

    pub fn label_at(&self, x: usize, y: usize) -> CenterLabel {
        *self.centerness.get(x, y)
    }
}

/// Candidate pixel indices whose location `i * stride` may fall in `[lo, hi)`.
fn pixel_span(lo: f64, hi: f64, stride: f64, n: usize) -> std::ops::Range<usize> {
    let start = (lo / stride).floor().max(0.0) as usize;
    let end = ((hi / stride).ceil() + 1.0).max(0.0).min(n as f64) as usize;
    start.min(n)..end
}

pub fn assign_targets(
    gt: &GtSlice,
    map_width: usize,
    map_height: usize,
    stride: f64,
    ratios: RegionRatios,
) -> Result<DenseTargetMaps> {
    if !(stride.is_finite() && stride > 0.0) {
        return Err(Error::invalid(format!("stride must be positive, got {stride}")));
    }
    let RegionRatios { r_c, r_i } = ratios;
    if !(r_c > 0.0 && r_c <= r_i && r_i <= 1.0) {
        return Err(Error::invalid(format!("need 0 < r_c <= r_i <= 1, got r_c={r_c} r_i={r_i}")));
    }
    for (b, _) in &gt.boxes {
        b.validate()?;
    }

    let mut centerness = FeatureMap::filled(map_width, map_height, CenterLabel::Negative);
    let mut regression = FeatureMap::filled(map_width, map_height, [0.0; 4]);
    let mut mask = FeatureMap::filled(map_width, map_height, false);
    // area of the box currently owning each positive pixel
    let mut owner_area = FeatureMap::filled(map_width, map_height, f64::INFINITY);

    for (b, certainty) in &gt.boxes {
        let ign = b.scaled_about_center(r_i);
        for y in pixel_span(ign.top(), ign.bottom(), stride, map_height) {
            for x in pixel_span(ign.left(), ign.right(), stride, map_width) {
                let (px, py) = (x as f64 * stride, y as f64 * stride);
                if ign.contains_point(px, py) && *centerness.get(x, y) == CenterLabel::Negative {
                    centerness.set(x, y, CenterLabel::Ignored);
                }
            }
        }
        if *certainty == BoxCertainty::Uncertain {
            continue;
        }
        let ctn = b.scaled_about_center(r_c);
        for y in pixel_span(ctn.top(), ctn.bottom(), stride, map_height) {
            for x in pixel_span(ctn.left(), ctn.right(), stride, map_width) {
                let (px, py) = (x as f64 * stride, y as f64 * stride);
                if !ctn.contains_point(px, py) {
                    continue;
                }
                centerness.set(x, y, CenterLabel::Positive);
                // smaller boxes win contested positive pixels
                if b.area() < *owner_area.get(x, y) {
                    owner_area.set(x, y, b.area());
                    regression.set(x, y, [px - b.left(), b.right() - px, py - b.top(), b.bottom() - py]);
                    mask.set(x, y, true);
                }
            }
        }
    }

    Ok(DenseTargetMaps {
        width: map_width,
        height: map_height,
        stride,
        centerness,
        regression,
        regression_mask: mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { gamma: 2.0, alpha: 0.25 }
    }
}

/// A scalar loss together with its gradient with respect to the prediction map.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad<T> {
    pub loss: f64,
    pub grad: FeatureMap<T>,
}

/// Binary focal loss on the centerness map.
///
/// Positives contribute `-a (1-p)^g ln p`, negatives `-(1-a) p^g ln(1-p)`,
/// ignored pixels nothing. The sum is divided by `max(1, #positives)`.
pub fn focal_loss(
    pred: &FeatureMap<f64>,
    targets: &DenseTargetMaps,
    params: FocalParams,
) -> Result<LossWithGrad<f64>> {
    if !pred.same_shape(&targets.centerness) {
        return Err(Error::invalid("prediction and target maps differ in shape"));
    }
    if let Some(p) = pred.data.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::invalid(format!("centerness prediction {p} outside (0, 1)")));
    }
    let FocalParams { gamma: g, alpha: a } = params;
    let norm = targets.positive_count().max(1) as f64;

    let mut loss = 0.0;
    let mut grad = FeatureMap::filled(pred.width, pred.height, 0.0);
    for (i, (&p, &label)) in pred.data.iter().zip(&targets.centerness.data).enumerate() {
        let (l, d) = match label {
            CenterLabel::Ignored => continue,
            CenterLabel::Positive => {
                let q = 1.0 - p;
                let l = -a * q.powf(g) * p.ln();
                let d = a * (g * q.powf(g - 1.0) * p.ln() - q.powf(g) / p);
                (l, d)
            }
            CenterLabel::Negative => {
                let q = 1.0 - p;
                let l = -(1.0 - a) * p.powf(g) * q.ln();
                let d = -(1.0 - a) * (g * p.powf(g - 1.0) * q.ln() - p.powf(g) / q);
                (l, d)
            }
        };
        loss += l;
        grad.data[i] = d / norm;
    }
    Ok(LossWithGrad { loss: loss / norm, grad })
}

/// Mean absolute error over masked pixels and all four channels.
/// The subgradient at exact equality is 0.
pub fn l1_size_loss(
    pred: &FeatureMap<[f64; 4]>,
    targets: &DenseTargetMaps,
) -> Result<LossWithGrad<[f64; 4]>> {
    if !pred.same_shape(&targets.regression) {
        return Err(Error::invalid("prediction and target maps differ in shape"));
    }
    let masked = targets.regression_mask.data.iter().filter(|&&m| m).count();
    let mut grad = FeatureMap::filled(pred.width, pred.height, [0.0; 4]);
    if masked == 0 {
        return Ok(LossWithGrad { loss: 0.0, grad });
    }
    let n = (4 * masked) as f64;
    let mut loss = 0.0;
    for (i, on) in targets.regression_mask.data.iter().enumerate() {
        if !on {
            continue;
        }
        for c in 0..4 {
            let diff = pred.data[i][c] - targets.regression.data[i][c];
            loss += diff.abs();
            grad.data[i][c] = if diff > 0.0 {
                1.0 / n
            } else if diff < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
    }
    Ok(LossWithGrad { loss: loss / n, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.1, lambda2: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_center: f64,
    pub l_size: f64,
    pub l_class: f64,
    pub l_box: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `total = l_center + lambda1 * l_size + l_class + lambda2 * l_box`
pub fn combine_losses(
    l_center: f64,
    l_size: f64,
    l_class: f64,
    l_box: f64,
    weights: LossWeights,
) -> Result<LossReport> {
    for (name, v) in [("l_center", l_center), ("l_size", l_size), ("l_class", l_class), ("l_box", l_box)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid(format!("{name} must be a nonnegative real, got {v}")));
        }
    }
    let LossWeights { lambda1, lambda2 } = weights;
    Ok(LossReport {
        l_center,
        l_size,
        l_class,
        l_box,
        total: l_center + lambda1 * l_size + l_class + lambda2 * l_box,
        lambda1,
        lambda2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeParams {
    pub stride: f64,
    pub score_threshold: f64,
    pub top_k: usize,
    /// Slice index and expert attached to every emitted box.
    pub slice: i64,
    pub expert_id: String,
}

impl DecodeParams {
    pub fn new(stride: f64) -> Self {
        DecodeParams {
            stride,
            score_threshold: 0.05,
            top_k: usize::MAX,
            slice: 0,
            expert_id: String::from("afp"),
        }
    }
}

/// Emits one box per pixel whose centerness reaches the threshold, keeping
/// the `top_k` highest scores (ties by ascending pixel index).
pub fn decode_proposals(
    centerness: &FeatureMap<f64>,
    regression: &FeatureMap<[f64; 4]>,
    params: &DecodeParams,
) -> Result<Vec<ScoredBox>> {
    if !centerness.same_shape(regression) {
        return Err(Error::invalid(format!(
            "centerness map is {}x{} but regression map is {}x{}",
            centerness.width, centerness.height, regression.width, regression.height
        )));
    }
    if !(params.stride.is_finite() && params.stride > 0.0) {
        return Err(Error::invalid(format!("stride must be positive, got {}", params.stride)));
    }
    let s = params.stride;
    let mut candidates: Vec<ScoredBox> = Vec::new();
    for y in 0..centerness.height {
        for x in 0..centerness.width {
            let score = *centerness.get(x, y);
            if !(score >= params.score_threshold) {
                continue;
            }
            let [dl, dr, dt, db] = *regression.get(x, y);
            let (px, py) = (x as f64 * s, y as f64 * s);
            let Ok(bbox) = Box2D::from_ltrb(px - dl, py - dt, px + dr, py + db) else {
                continue;
            };
            candidates.push(
                ScoredBox::new(bbox, score, params.slice, params.expert_id.clone())
                    .with_source(format!("px{x}_{y}")),
            );
        }
    }
    let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    Ok(score_order(&scores)
        .into_iter()
        .take(params.top_k)
        .map(|i| candidates[i].clone())
        .collect())
}
