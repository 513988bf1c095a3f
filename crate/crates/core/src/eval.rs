//! FROC evaluation of 3D proposals under the IoBB criterion.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ensemble::Proposal3D;
use crate::error::{Error, Result};
use crate::geometry::{iobb_3d, score_order, Box3D};

/// FP-per-volume operating points: 1/8 through 8.
pub const DEFAULT_FP_POINTS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// How a proposal that hits an already-detected ground truth is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DuplicatePolicy {
    /// Neither TP nor FP.
    #[default]
    Ignore,
    /// Counted as FP.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "gt")]
pub enum Outcome {
    Tp(usize),
    Fp,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutcome {
    pub score: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// One entry per input proposal, in input order.
    pub proposals: Vec<ScoredOutcome>,
    pub gt_detected: Vec<bool>,
    pub policy: DuplicatePolicy,
}

impl MatchResult {
    pub fn num_gts(&self) -> usize {
        self.gt_detected.len()
    }

    fn counts_as_fp(&self, o: Outcome) -> bool {
        match o {
            Outcome::Fp => true,
            Outcome::Duplicate => self.policy == DuplicatePolicy::Strict,
            Outcome::Tp(_) => false,
        }
    }
}

/// Matches one volume's proposals against its ground truths.
///
/// Proposals are visited by descending score (ties by input order). A
/// proposal whose IoBB with some undetected ground truth exceeds the
/// threshold detects the best such ground truth. One that only hits already
/// detected ground truths is a duplicate; anything else is an FP.
pub fn match_volume(
    proposals: &[Proposal3D],
    gts: &[Box3D],
    iobb_threshold: f64,
    policy: DuplicatePolicy,
) -> MatchResult {
    let mut detected = vec![false; gts.len()];
    let mut outcomes = vec![Outcome::Fp; proposals.len()];
    let scores: Vec<f64> = proposals.iter().map(|p| p.score).collect();
    for i in score_order(&scores) {
        let mut best_new: Option<(f64, usize)> = None;
        let mut hits_any = false;
        for (g, gt) in gts.iter().enumerate() {
            let v = iobb_3d(&proposals[i].bbox, gt);
            if v <= iobb_threshold {
                continue;
            }
            hits_any = true;
            if !detected[g] && best_new.is_none_or(|(bv, _)| v > bv) {
                best_new = Some((v, g));
            }
        }
        outcomes[i] = match best_new {
            Some((_, g)) => {
                detected[g] = true;
                Outcome::Tp(g)
            }
            None if hits_any => Outcome::Duplicate,
            None => Outcome::Fp,
        };
    }
    MatchResult {
        proposals: proposals
            .iter()
            .zip(outcomes)
            .map(|(p, outcome)| ScoredOutcome { score: p.score, outcome })
            .collect(),
        gt_detected: detected,
        policy,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub fp_points: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub average_sensitivity: f64,
}

impl FrocCurve {
    /// Rows `fp_per_volume,sensitivity` after a provenance comment and a header.
    pub fn write_csv<W: Write>(&self, mut out: W, config_hash: &str) -> Result<()> {
        writeln!(out, "# config_hash={config_hash}")?;
        writeln!(out, "fp_per_volume,sensitivity")?;
        for (f, s) in self.fp_points.iter().zip(&self.sensitivities) {
            writeln!(out, "{f},{s}")?;
        }
        Ok(())
    }

    /// Minimal SVG line plot with a log2 FP axis.
    pub fn write_svg<W: Write>(&self, mut out: W, config_hash: &str) -> Result<()> {
        let (w, h, pad) = (480.0, 320.0, 40.0);
        let lo = self.fp_points.first().copied().unwrap_or(1.0).log2();
        let hi = self.fp_points.last().copied().unwrap_or(1.0).log2();
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pts: Vec<String> = self
            .fp_points
            .iter()
            .zip(&self.sensitivities)
            .map(|(f, s)| {
                let x = pad + (f.log2() - lo) / span * (w - 2.0 * pad);
                let y = h - pad - s * (h - 2.0 * pad);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#)?;
        writeln!(out, "<!-- config_hash={config_hash} -->")?;
        writeln!(
            out,
            r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            w - 2.0 * pad,
            h - 2.0 * pad
        )?;
        writeln!(out, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "))?;
        writeln!(
            out,
            r#"<text x="{pad}" y="{}" font-size="12">FPs per volume (log2); average sensitivity {:.4}</text>"#,
            h - 10.0,
            self.average_sensitivity
        )?;
        writeln!(out, "</svg>")?;
        Ok(())
    }
}

/// Sweeps score thresholds over all volumes. At each FP point `f`, the
/// sensitivity is the best detection rate among thresholds whose FP count
/// per volume is at most `f`. Equal scores enter the sweep together.
pub fn froc(matches: &[MatchResult], fp_points: &[f64]) -> Result<FrocCurve> {
    if matches.is_empty() {
        return Err(Error::EmptyInput("FROC needs at least one volume".into()));
    }
    let total_gts: usize = matches.iter().map(MatchResult::num_gts).sum();
    if total_gts == 0 {
        return Err(Error::invalid("FROC needs at least one ground truth"));
    }
    let volumes = matches.len() as f64;

    // (score, is_tp, is_fp)
    let mut events: Vec<(f64, bool, bool)> = matches
        .iter()
        .flat_map(|m| {
            m.proposals
                .iter()
                .map(move |p| (p.score, matches!(p.outcome, Outcome::Tp(_)), m.counts_as_fp(p.outcome)))
        })
        .collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    // operating points (fp, tp) after each distinct score, starting from the empty set
    let mut curve: Vec<(usize, usize)> = vec![(0, 0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let s = events[i].0;
        while i < events.len() && events[i].0 == s {
            tp += usize::from(events[i].1);
            fp += usize::from(events[i].2);
            i += 1;
        }
        curve.push((fp, tp));
    }

    let sensitivities: Vec<f64> = fp_points
        .iter()
        .map(|&f| {
            curve
                .iter()
                .filter(|(fp, _)| *fp as f64 / volumes <= f)
                .map(|(_, tp)| *tp)
                .max()
                .unwrap_or(0) as f64
                / total_gts as f64
        })
        .collect();
    let average_sensitivity = if sensitivities.is_empty() {
        0.0
    } else {
        sensitivities.iter().sum::<f64>() / sensitivities.len() as f64
    };
    Ok(FrocCurve { fp_points: fp_points.to_vec(), sensitivities, average_sensitivity })
}
