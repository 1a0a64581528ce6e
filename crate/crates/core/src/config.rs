//! Run configuration: every threshold of the pipeline plus input paths.
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub detections: PathBuf,
    pub gps: PathBuf,
    pub intrinsics: PathBuf,
    pub features: Option<PathBuf>,
    pub patches: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    /// Externally computed keyframe poses; bypasses structure-from-motion.
    pub poses: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            detections: "detections.jsonl".into(),
            gps: "gps.csv".into(),
            intrinsics: "intrinsics.json".into(),
            features: None,
            patches: None,
            scores: None,
            poses: None,
            truth: None,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoConfig {
    pub frame_rate_hz: f64,
    /// Receiver time of frame 0.
    pub start_time_s: f64,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig { frame_rate_hz: 10.0, start_time_s: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadiometryConfig {
    /// Kelvin per raw count.
    pub scale: f64,
    /// Kelvin added after scaling.
    pub offset: f64,
}

impl Default for RadiometryConfig {
    fn default() -> Self {
        RadiometryConfig { scale: 0.01, offset: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub iou_min: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig { iou_min: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyframeConfig {
    pub d_min_m: f64,
    pub iou_min: f64,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        KeyframeConfig { d_min_m: 0.75, iou_min: 0.85 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfmConfig {
    pub pair_radius_m: f64,
    pub gps_sigma_m: f64,
    pub ba_interval: usize,
    pub ransac_threshold_px: f64,
    pub ransac_max_iterations: usize,
    pub refine_intrinsics: bool,
    /// Prior standard deviation of the refined focal length, as a fraction
    /// of the calibrated focal length.
    pub focal_prior_sigma: f64,
    pub distortion_prior_sigma: f64,
    pub align_min_lateral_m: f64,
    pub ba_max_iterations: usize,
    pub ba_relative_tolerance: f64,
}

impl Default for SfmConfig {
    fn default() -> Self {
        SfmConfig {
            pair_radius_m: 15.0,
            gps_sigma_m: 0.1,
            ba_interval: 10,
            ransac_threshold_px: 2.0,
            ransac_max_iterations: 200,
            refine_intrinsics: true,
            focal_prior_sigma: 0.02,
            distortion_prior_sigma: 0.05,
            align_min_lateral_m: 2.0,
            ba_max_iterations: 100,
            ba_relative_tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriConfig {
    pub min_angle_deg: f64,
    pub max_reproj_px: f64,
}

impl Default for TriConfig {
    fn default() -> Self {
        TriConfig { min_angle_deg: 1.0, max_reproj_px: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    pub enabled: bool,
    pub max_mean_px: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig { enabled: true, max_mean_px: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub enabled: bool,
    pub d_max_m: f64,
    pub d_max_px: f64,
    pub huber_delta_m: f64,
    /// Weight of the term tying each point to its triangulated position.
    pub anchor_weight: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { enabled: true, d_max_m: 1.0, d_max_px: 20.0, huber_delta_m: 0.5, anchor_weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub border_frac: f64,
    pub radius_m: f64,
    pub anomaly_threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { border_frac: 0.05, radius_m: 7.0, anomaly_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    pub out_dir: PathBuf,
    pub input: InputConfig,
    pub video: VideoConfig,
    pub radiometry: RadiometryConfig,
    pub tracking: TrackingConfig,
    pub keyframe: KeyframeConfig,
    pub sfm: SfmConfig,
    pub tri: TriConfig,
    pub merge: MergeConfig,
    pub refine: RefineConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            out_dir: "out".into(),
            input: InputConfig::default(),
            video: VideoConfig::default(),
            radiometry: RadiometryConfig::default(),
            tracking: TrackingConfig::default(),
            keyframe: KeyframeConfig::default(),
            sfm: SfmConfig::default(),
            tri: TriConfig::default(),
            merge: MergeConfig::default(),
            refine: RefineConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    /// Parses a TOML config and resolves relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Overrides one setting from a `section.key=value` assignment. The
    /// value is read as a TOML literal, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let bad = || Error::Config(format!("expected section.key=value, got {assignment:?}"));
        let (key, raw) = assignment.split_once('=').ok_or_else(bad)?;
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").ok_or_else(bad)?,
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut table = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, sections) = parts.split_last().ok_or_else(bad)?;
        for s in sections {
            table = table
                .entry(s.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{s} is not a section")))?;
        }
        table.insert(last.to_string(), value);
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        let i = &mut self.input;
        fix(&mut i.detections);
        fix(&mut i.gps);
        fix(&mut i.intrinsics);
        for p in [&mut i.features, &mut i.patches, &mut i.scores, &mut i.poses, &mut i.truth, &mut i.labels].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("video.frame_rate_hz", self.video.frame_rate_hz)?;
        positive("radiometry.scale", self.radiometry.scale)?;
        positive("tracking.iou_min", self.tracking.iou_min)?;
        positive("keyframe.d_min_m", self.keyframe.d_min_m)?;
        positive("keyframe.iou_min", self.keyframe.iou_min)?;
        positive("sfm.pair_radius_m", self.sfm.pair_radius_m)?;
        positive("sfm.gps_sigma_m", self.sfm.gps_sigma_m)?;
        positive("sfm.focal_prior_sigma", self.sfm.focal_prior_sigma)?;
        positive("sfm.distortion_prior_sigma", self.sfm.distortion_prior_sigma)?;
        positive("sfm.ransac_threshold_px", self.sfm.ransac_threshold_px)?;
        positive("tri.min_angle_deg", self.tri.min_angle_deg)?;
        positive("tri.max_reproj_px", self.tri.max_reproj_px)?;
        positive("merge.max_mean_px", self.merge.max_mean_px)?;
        positive("refine.d_max_m", self.refine.d_max_m)?;
        positive("refine.d_max_px", self.refine.d_max_px)?;
        positive("refine.huber_delta_m", self.refine.huber_delta_m)?;
        positive("analysis.border_frac", self.analysis.border_frac)?;
        positive("analysis.radius_m", self.analysis.radius_m)?;
        if self.sfm.ba_interval == 0 {
            return Err(Error::Config("sfm.ba_interval must be positive".into()));
        }
        if !(self.refine.anchor_weight >= 0.0) {
            return Err(Error::Config("refine.anchor_weight must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.analysis.anomaly_threshold) {
            return Err(Error::Config("analysis.anomaly_threshold must lie in [0, 1]".into()));
        }
        if self.keyframe.iou_min > 1.0 || self.tracking.iou_min > 1.0 {
            return Err(Error::Config("IoU thresholds must not exceed 1".into()));
        }
        Ok(())
    }

    pub fn sfm_params(&self) -> crate::sfm::SfmParams {
        let d = crate::sfm::SfmParams::default();
        crate::sfm::SfmParams {
            pair_radius_m: self.sfm.pair_radius_m,
            gps_sigma_m: self.sfm.gps_sigma_m,
            min_ray_angle: self.tri.min_angle_deg.to_radians(),
            max_reproj_px: self.tri.max_reproj_px,
            ba_interval: self.sfm.ba_interval,
            ransac: crate::geometry::RansacParams {
                max_iterations: self.sfm.ransac_max_iterations,
                threshold: self.sfm.ransac_threshold_px,
                ..d.ransac
            },
            refine_intrinsics: self.sfm.refine_intrinsics,
            focal_prior_sigma: self.sfm.focal_prior_sigma,
            distortion_prior_sigma: self.sfm.distortion_prior_sigma,
            align_min_lateral_m: self.sfm.align_min_lateral_m,
            ba: crate::sfm::ba::BaOptions {
                max_iterations: self.sfm.ba_max_iterations,
                relative_tolerance: self.sfm.ba_relative_tolerance,
                ..d.ba
            },
            seed: self.seed,
            ..d
        }
    }
}
