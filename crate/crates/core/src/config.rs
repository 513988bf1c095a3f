//! Run configuration, loaded from TOML. Every field has a default, so an
//! empty file is a valid configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::afp::{FocalParams, LossWeights, RegionRatios};
use crate::error::{Error, Result};
use crate::eval::{DuplicatePolicy, DEFAULT_FP_POINTS};
use crate::fpr::FprParams;
use crate::mining::{AssembleParams, CrossMineParams, MatchParams};
use crate::synth::{derive_seed, CohortSpec, OracleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Tracklet linking and propagation IoU.
    pub theta: f64,
    /// Embedding distance for intra-patient matching.
    pub delta: f64,
    /// Score threshold for cross-dataset mining.
    pub sigma: f64,
    /// FPR negatives overlap every annotation below this.
    pub theta_fp: f64,
    pub nms_iou: f64,
    /// IoBB for a 3D detection to count.
    pub iobb: f64,
    /// Overlap that excludes a mined uncertain box.
    pub exclusion_iou: f64,
    pub r_c: f64,
    pub r_i: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub fp_points: Vec<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            theta: 0.5,
            delta: 0.15,
            sigma: 0.5,
            theta_fp: 0.3,
            nms_iou: 0.5,
            iobb: 0.3,
            exclusion_iou: 0.3,
            r_c: 0.2,
            r_i: 0.5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            lambda1: 0.1,
            lambda2: 10.0,
            fp_points: DEFAULT_FP_POINTS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 picks one per core. Results never depend on it.
    pub workers: usize,
    /// Count duplicate detections as false positives.
    pub strict_froc: bool,
    /// FPR negatives kept per positive.
    pub fpr_fp_per_tp: usize,
    /// Positive to negative training slices.
    pub pos_neg_ratio: (u32, u32),
    pub thresholds: Thresholds,
    pub cohort: CohortSpec,
    pub oracle: OracleConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            workers: 0,
            strict_froc: false,
            fpr_fp_per_tp: 2,
            pos_neg_ratio: (2, 1),
            thresholds: Thresholds::default(),
            cohort: CohortSpec::default(),
            oracle: OracleConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.thresholds;
        let open_unit = [
            ("theta", t.theta),
            ("sigma", t.sigma),
            ("theta_fp", t.theta_fp),
            ("nms_iou", t.nms_iou),
            ("iobb", t.iobb),
            ("exclusion_iou", t.exclusion_iou),
            ("r_c", t.r_c),
            ("r_i", t.r_i),
            ("focal_alpha", t.focal_alpha),
        ];
        for (name, v) in open_unit {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        if t.theta_fp >= t.theta {
            return Err(Error::Config(format!("theta_fp {} must be below theta {}", t.theta_fp, t.theta)));
        }
        if t.r_c >= t.r_i {
            return Err(Error::Config(format!("r_c {} must be below r_i {}", t.r_c, t.r_i)));
        }
        if !(t.delta > 0.0 && t.focal_gamma >= 0.0 && t.lambda1 >= 0.0 && t.lambda2 >= 0.0) {
            return Err(Error::Config("delta must be positive; gamma and loss weights nonnegative".into()));
        }
        if t.fp_points.is_empty() || t.fp_points.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Config("fp_points must be a nonempty list of positive rates".into()));
        }
        if self.pos_neg_ratio.0 == 0 {
            return Err(Error::Config("positive part of pos_neg_ratio must be nonzero".into()));
        }
        self.cohort.validate().map_err(|e| Error::Config(format!("cohort: {e}")))?;
        self.oracle.validate().map_err(|e| Error::Config(format!("oracle: {e}")))?;
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form. The
    /// worker count is excluded since it never changes results.
    pub fn hash(&self) -> String {
        let canonical = PipelineConfig { workers: 0, ..self.clone() };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn region_ratios(&self) -> RegionRatios {
        RegionRatios { r_c: self.thresholds.r_c, r_i: self.thresholds.r_i }
    }

    pub fn focal_params(&self) -> FocalParams {
        FocalParams { gamma: self.thresholds.focal_gamma, alpha: self.thresholds.focal_alpha }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda1: self.thresholds.lambda1, lambda2: self.thresholds.lambda2 }
    }

    pub fn match_params(&self) -> MatchParams {
        MatchParams { delta: self.thresholds.delta, overlap_theta: self.thresholds.theta }
    }

    pub fn cross_params(&self) -> CrossMineParams {
        let universal = self.oracle.universal_expert().map_or_else(|| "universal".into(), |e| e.expert_id.clone());
        CrossMineParams { sigma: self.thresholds.sigma, exclusion_iou: self.thresholds.exclusion_iou, universal_expert: universal }
    }

    pub fn assemble_params(&self) -> AssembleParams {
        AssembleParams {
            pos_neg_ratio: self.pos_neg_ratio,
            exclusion_iou: self.thresholds.exclusion_iou,
            seed: self.stage_seed("assemble"),
        }
    }

    pub fn fpr_params(&self) -> FprParams {
        FprParams {
            theta: self.thresholds.theta,
            theta_fp: self.thresholds.theta_fp,
            fp_per_tp: self.fpr_fp_per_tp,
            seed: self.stage_seed("fpr-select"),
        }
    }

    pub fn duplicate_policy(&self) -> DuplicatePolicy {
        if self.strict_froc {
            DuplicatePolicy::Strict
        } else {
            DuplicatePolicy::Ignore
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_default() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig { seed: 42, ..PipelineConfig::default() };
        cfg.thresholds.theta = 0.7;
        cfg.cohort.patients = 3;
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_override() {
        let cfg = PipelineConfig::from_toml("seed = 9\n[thresholds]\ndelta = 0.2\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.thresholds.delta, 0.2);
        assert_eq!(cfg.thresholds.theta, 0.5);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "[thresholds]\ntheta = 1.5\n",
            "[thresholds]\ntheta_fp = 0.6\n",
            "[thresholds]\nfp_points = []\n",
            "bogus = 1\n",
            "seed = \"x\"\n",
            "[cohort]\npatients = 0\n",
        ] {
            assert!(matches!(PipelineConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn hash_ignores_workers_only() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { workers: 7, ..a.clone() };
        let c = PipelineConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
