//! Synthetic ground truth: a row-based PV plant, a serpentine survey
//! flight, exact projections of every module, a noisy GPS log, thermal
//! patches with injected anomalies, and targeted corruptions.
//!
//! World coordinates are an LTP frame anchored at the ground point below the
//! start of the flight. The camera looks straight down with image x pointing
//! east and image y pointing south.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project, CameraIntrinsics, Pose6Dof};
use crate::config::RunConfig;
use crate::eval::AnomalyClass;
use crate::geodesy::{ltp_to_wgs84, GeoPoint, GpsSample, LtpPoint};
use crate::ingest::{
    self, encode_radiometric, DetectionRecord, FeatureObservation, FrameDetections, Grid, LabelRecord, PatchScore,
    TruthRecord,
};
use crate::sfm::change_pose_origin;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    pub rows: usize,
    pub modules_per_row: usize,
    /// Slope length of a module (north-south before tilting).
    pub module_length_m: f64,
    /// Extent along the row (east-west).
    pub module_width_m: f64,
    /// Gap between neighbouring modules in a row.
    pub module_gap_m: f64,
    pub row_pitch_m: f64,
    /// The north edge is raised.
    pub tilt_deg: f64,
    /// Height of the low (south) edge above ground.
    pub mount_height_m: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            rows: 4,
            modules_per_row: 20,
            module_length_m: 1.65,
            module_width_m: 0.99,
            module_gap_m: 0.0,
            row_pitch_m: 6.0,
            tilt_deg: 20.0,
            mount_height_m: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlightConfig {
    pub altitude_m: f64,
    pub speed_mps: f64,
    pub frame_rate_hz: f64,
    pub rows_per_pass: usize,
    /// Overshoot beyond the plant at both ends of every pass.
    pub margin_m: f64,
    pub start_time_s: f64,
}

impl Default for FlightConfig {
    fn default() -> Self {
        FlightConfig {
            altitude_m: 15.0,
            speed_mps: 4.0,
            frame_rate_hz: 10.0,
            rows_per_pass: 1,
            margin_m: 10.0,
            start_time_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    pub focal_px: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig { width: 640, height: 512, focal_px: 800.0, k1: -0.05, k2: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpsConfig {
    pub rate_hz: f64,
    /// Horizontal white noise per sample.
    pub noise_sigma_m: f64,
    /// Amplitude of the sinusoidal horizontal drift.
    pub drift_amplitude_m: f64,
    /// Drift period; defaults to twice the flight duration, so the drift
    /// is a single excursion that peaks mid-flight.
    pub drift_period_s: Option<f64>,
    /// Phase of the drift sinusoid at take-off.
    pub drift_phase_rad: f64,
}

impl Default for GpsConfig {
    fn default() -> Self {
        GpsConfig { rate_hz: 1.0, noise_sigma_m: 0.0, drift_amplitude_m: 0.0, drift_period_s: None, drift_phase_rad: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Per-point pixel noise on detections and features.
    pub pixel_noise_px: f64,
    /// Ground clutter points per square meter, observed as generic features.
    pub clutter_density: f64,
    pub clutter_max_height_m: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { pixel_noise_px: 0.0, clutter_density: 0.1, clutter_max_height_m: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyConfig {
    /// Fraction of modules outside the overheating blocks that carry one of
    /// the localized anomaly classes.
    pub fraction: f64,
    /// Number of blocks of module-wide overheating; each covers
    /// `mh_block_rows` consecutive complete rows.
    pub mh_blocks: usize,
    pub mh_block_rows: usize,
    pub baseline_c: f64,
    pub module_sigma_c: f64,
    pub view_sigma_c: f64,
    pub pixel_sigma_c: f64,
    pub patches_per_module: usize,
    pub patch_width: usize,
    pub patch_height: usize,
    /// Per-patch classifier scores are emitted when set.
    pub scores: bool,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        AnomalyConfig {
            fraction: 0.1,
            mh_blocks: 0,
            mh_block_rows: 3,
            baseline_c: 38.0,
            module_sigma_c: 0.5,
            view_sigma_c: 0.3,
            pixel_sigma_c: 0.3,
            patches_per_module: 3,
            patch_width: 24,
            patch_height: 40,
            scores: true,
        }
    }
}

/// A targeted corruption applied after generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Corruption {
    /// Interrupts the detections of a fraction of modules for `gap_frames`
    /// frames and relabels the rest of each with a second identity.
    SplitTrack { fraction: f64, gap_frames: u32 },
    /// Offsets one GPS sample horizontally by `spike_m`.
    PoseOutlier { spike_m: f64, sample: Option<usize> },
    /// Drops all frames within `gap_m` of travel starting at `at_m`
    /// (default: the middle of the flight).
    MissingFrames { gap_m: f64, at_m: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub plant: PlantConfig,
    pub flight: FlightConfig,
    pub camera: CameraConfig,
    pub gps: GpsConfig,
    pub scene: SceneConfig,
    pub anomaly: AnomalyConfig,
    pub corruption: Vec<Corruption>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            origin_lat: 48.0,
            origin_lon: 11.0,
            plant: PlantConfig::default(),
            flight: FlightConfig::default(),
            camera: CameraConfig::default(),
            gps: GpsConfig::default(),
            scene: SceneConfig::default(),
            anomaly: AnomalyConfig::default(),
            corruption: Vec::new(),
        }
    }
}

fn check(ok: bool, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.plant;
        check(p.rows >= 1 && p.modules_per_row >= 1, "plant needs at least one module")?;
        check(p.module_length_m > 0.0 && p.module_width_m > 0.0, "module size must be positive")?;
        check(p.module_gap_m >= 0.0, "module gap must be non-negative")?;
        check((0.0..60.0).contains(&p.tilt_deg), "tilt must lie in [0, 60) degrees")?;
        check(p.mount_height_m >= 0.0, "mount height must be non-negative")?;
        check(
            p.row_pitch_m > p.module_length_m * p.tilt_deg.to_radians().cos(),
            "row pitch must exceed the plan depth of a module",
        )?;
        let f = &self.flight;
        check((5.0..=100.0).contains(&f.altitude_m), "altitude must lie in [5, 100] m")?;
        check(f.altitude_m > p.mount_height_m + p.module_length_m, "camera must fly above the modules")?;
        check(f.speed_mps > 0.0 && f.speed_mps.is_finite(), "speed must be positive")?;
        check(f.frame_rate_hz > 0.0 && f.frame_rate_hz.is_finite(), "frame rate must be positive")?;
        check((1..=3).contains(&f.rows_per_pass), "rows_per_pass must lie in 1..=3")?;
        check(f.margin_m >= 0.0, "margin must be non-negative")?;
        let c = &self.camera;
        check(c.width > 0 && c.height > 0 && c.focal_px > 0.0, "camera size and focal length must be positive")?;
        let g = &self.gps;
        check(g.rate_hz > 0.0, "GPS rate must be positive")?;
        check(g.noise_sigma_m >= 0.0 && g.drift_amplitude_m >= 0.0, "GPS noise must be non-negative")?;
        check(g.drift_period_s.is_none_or(|t| t > 0.0), "drift period must be positive")?;
    check(g.drift_phase_rad.is_finite(), "drift phase must be finite")?;
        let s = &self.scene;
        check(s.pixel_noise_px >= 0.0 && s.clutter_density >= 0.0 && s.clutter_max_height_m >= 0.0, "scene parameters must be non-negative")?;
        let a = &self.anomaly;
        check((0.0..=1.0).contains(&a.fraction), "anomaly fraction must lie in [0, 1]")?;
        check(a.patch_width >= ingest::MIN_PATCH_SIDE && a.patch_height >= ingest::MIN_PATCH_SIDE, "patches are too small")?;
        check(a.module_sigma_c >= 0.0 && a.view_sigma_c >= 0.0 && a.pixel_sigma_c >= 0.0, "temperature noise must be non-negative")?;
        for k in &self.corruption {
            match *k {
                Corruption::SplitTrack { fraction, gap_frames } => {
                    check((0.0..=1.0).contains(&fraction), "split fraction must lie in [0, 1]")?;
                    check(gap_frames >= 2, "split gap must be at least two frames")?;
                }
                Corruption::PoseOutlier { spike_m, .. } => check(spike_m >= 0.0, "spike must be non-negative")?,
                Corruption::MissingFrames { gap_m, .. } => check(gap_m > 0.0, "gap must be positive")?,
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let c = &self.camera;
        CameraIntrinsics {
            k1: c.k1,
            k2: c.k2,
            ..CameraIntrinsics::pinhole(
                c.focal_px,
                c.focal_px,
                c.width as f64 / 2.0,
                c.height as f64 / 2.0,
                c.width,
                c.height,
            )
        }
    }

    pub fn origin(&self) -> GeoPoint {
        GeoPoint { latitude: self.origin_lat, longitude: self.origin_lon, altitude: Some(0.0) }
    }
}

/// One ground-truth module.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthModule {
    pub name: String,
    pub row: u32,
    pub column: u32,
    /// TL, TR, BR, BL, center in world coordinates.
    pub points: [Vector3<f64>; 5],
    pub class: AnomalyClass,
}

pub fn module_name(row: usize, column: usize) -> String {
    format!("r{row:03}m{column:03}")
}

/// Strips the suffix that split-track corruption appends to an identity.
pub fn base_name(id: &str) -> &str {
    id.split('#').next().unwrap_or(id)
}

/// A piecewise-linear flight path with vertices at whole seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FlightPath {
    /// (time since start, position) per vertex.
    pub vertices: Vec<(f64, Vector3<f64>)>,
}

impl FlightPath {
    pub fn duration(&self) -> f64 {
        self.vertices.last().map(|v| v.0).unwrap_or(0.0)
    }

    fn segment(&self, t: f64) -> (usize, f64) {
        let n = self.vertices.len();
        let t = t.clamp(0.0, self.duration());
        let i = self.vertices.partition_point(|v| v.0 <= t).clamp(1, n - 1);
        let (t0, t1) = (self.vertices[i - 1].0, self.vertices[i].0);
        (i, (t - t0) / (t1 - t0))
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let (i, w) = self.segment(t);
        let (a, b) = (self.vertices[i - 1].1, self.vertices[i].1);
        a + (b - a) * w
    }

    /// Distance travelled up to time `t`.
    pub fn travel(&self, t: f64) -> f64 {
        let (i, w) = self.segment(t);
        let done: f64 = self.vertices.windows(2).take(i - 1).map(|s| (s[1].1 - s[0].1).norm()).sum();
        done + w * (self.vertices[i].1 - self.vertices[i - 1].1).norm()
    }

    pub fn length(&self) -> f64 {
        self.vertices.windows(2).map(|s| (s[1].1 - s[0].1).norm()).sum()
    }
}

/// Orientation of the nadir camera: x east, y south, optical axis down.
pub fn nadir_rotation() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenario: ScenarioConfig,
    pub origin: GeoPoint,
    pub intrinsics: CameraIntrinsics,
    pub modules: Vec<SynthModule>,
    pub path: FlightPath,
    /// True world-to-camera pose of every frame, in the world frame.
    pub poses: BTreeMap<u32, Pose6Dof>,
    pub frames: Vec<FrameDetections>,
    pub features: Vec<FeatureObservation>,
    pub gps: Vec<GpsSample>,
    /// Raw radiometric counts keyed by (identity, frame).
    pub patches: BTreeMap<(String, u32), Grid<u16>>,
    pub scores: Vec<PatchScore>,
    pub corruptions: Vec<CorruptionRecord>,
}

/// What a corruption changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub corruption: Corruption,
    /// Split modules, or the altered GPS sample, or the dropped frames.
    pub affected: Vec<String>,
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(index);
    r
}

const STREAM_PLANT: u64 = 1;
const STREAM_FRAME: u64 = 2;
const STREAM_GPS: u64 = 3;
const STREAM_CLUTTER: u64 = 4;
const STREAM_THERMAL: u64 = 5;
const STREAM_CORRUPT: u64 = 6;

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated")
}

/// Plant coordinates: row `r` centered at north `r * pitch`, module `c`
/// starting at east `c * (width + gap)`.
fn build_plant(cfg: &ScenarioConfig, shift: &Vector3<f64>) -> Vec<SynthModule> {
    let p = &cfg.plant;
    let a = &cfg.anomaly;
    let tilt = p.tilt_deg.to_radians();
    let half_depth = p.module_length_m * tilt.cos() / 2.0;
    let (z_lo, z_hi) = (p.mount_height_m, p.mount_height_m + p.module_length_m * tilt.sin());
    let cols = p.modules_per_row;
    let block_rows: BTreeSet<usize> = (0..a.mh_blocks)
        .flat_map(|b| {
            let centre = (b + 1) as f64 * p.rows as f64 / (a.mh_blocks + 1) as f64;
            let start = (centre - a.mh_block_rows as f64 / 2.0).round().max(0.0) as usize;
            start..(start + a.mh_block_rows).min(p.rows)
        })
        .collect();
    let localized = &AnomalyClass::ANOMALIES[1..];
    let mut rng = rng_for(cfg.seed, STREAM_PLANT, 0);
    let mut out = Vec::with_capacity(p.rows * cols);
    for r in 0..p.rows {
        let yc = r as f64 * p.row_pitch_m;
        for c in 0..cols {
            let x0 = c as f64 * (p.module_width_m + p.module_gap_m);
            let x1 = x0 + p.module_width_m;
            let (yn, ys) = (yc + half_depth, yc - half_depth);
            let corners = [
                Vector3::new(x0, yn, z_hi),
                Vector3::new(x1, yn, z_hi),
                Vector3::new(x1, ys, z_lo),
                Vector3::new(x0, ys, z_lo),
            ]
            .map(|v| v - shift);
            let center = (corners[0] + corners[1] + corners[2] + corners[3]) / 4.0;
            let draw: f64 = rng.random();
            let pick = rng.random_range(0..localized.len());
            let class = if block_rows.contains(&r) {
                AnomalyClass::Mh
            } else if draw < a.fraction {
                localized[pick]
            } else {
                AnomalyClass::Healthy
            };
            out.push(SynthModule {
                name: module_name(r, c),
                row: r as u32,
                column: c as u32,
                points: [corners[0], corners[1], corners[2], corners[3], center],
                class,
            });
        }
    }
    out
}

/// Serpentine passes over groups of rows in plant coordinates. Pass lengths
/// are rounded up to whole seconds of flight so every vertex falls on a whole
/// second.
fn build_path(cfg: &ScenarioConfig) -> Vec<(f64, Vector3<f64>)> {
    let p = &cfg.plant;
    let f = &cfg.flight;
    let plant_len = p.modules_per_row as f64 * (p.module_width_m + p.module_gap_m) - p.module_gap_m;
    let raw_len = plant_len + 2.0 * f.margin_m;
    let pass_secs = (raw_len / f.speed_mps).ceil().max(1.0);
    let pass_len = pass_secs * f.speed_mps;
    let x_west = -f.margin_m - (pass_len - raw_len) / 2.0;
    let x_east = x_west + pass_len;
    let groups: Vec<f64> = (0..p.rows)
        .step_by(f.rows_per_pass)
        .map(|r0| {
            let r1 = (r0 + f.rows_per_pass).min(p.rows);
            (r0..r1).map(|r| r as f64 * p.row_pitch_m).sum::<f64>() / (r1 - r0) as f64
        })
        .collect();
    let mut verts = Vec::new();
    let mut t = 0.0;
    for (i, &y) in groups.iter().enumerate() {
        let (xa, xb) = if i % 2 == 0 { (x_west, x_east) } else { (x_east, x_west) };
        if let Some(&(_, prev)) = verts.last() {
            let prev: Vector3<f64> = prev;
            t += ((y - prev.y).abs() / f.speed_mps).ceil().max(1.0);
        }
        verts.push((t, Vector3::new(xa, y, f.altitude_m)));
        t += pass_secs;
        verts.push((t, Vector3::new(xb, y, f.altitude_m)));
    }
    verts
}

fn visible(points: &[Vector3<f64>], pose: &Pose6Dof, intr: &CameraIntrinsics) -> Option<Vec<Vector2<f64>>> {
    points.iter().map(|x| project(x, pose, intr).filter(|p| intr.contains(p))).collect()
}

struct FrameRender {
    detections: Vec<DetectionRecord>,
    features: Vec<FeatureObservation>,
}

/// Generates the uncorrupted dataset, then applies the configured
/// corruptions in order.
pub fn generate(cfg: &ScenarioConfig) -> Result<Dataset> {
    cfg.validate()?;
    let intr = cfg.intrinsics();
    let origin = cfg.origin();
    let mut verts = build_path(cfg);
    let start = Vector3::new(verts[0].1.x, verts[0].1.y, 0.0);
    for v in &mut verts {
        v.1 -= start;
    }
    let path = FlightPath { vertices: verts };
    let modules = build_plant(cfg, &start);

    let fps = cfg.flight.frame_rate_hz;
    let duration = path.duration();
    let n_frames = (duration * fps + 1e-9).floor() as u32 + 1;
    let rot = nadir_rotation();
    let poses: BTreeMap<u32, Pose6Dof> =
        (0..n_frames).map(|i| (i, Pose6Dof::from_center(rot, &path.position(i as f64 / fps)))).collect();

    // Clutter over the plant bounding box plus the flight margin.
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for v in path.vertices.iter().map(|v| v.1).chain(modules.iter().flat_map(|m| m.points)) {
        lo = lo.inf(&v.xy());
        hi = hi.sup(&v.xy());
    }
    let pad = Vector2::repeat(cfg.flight.altitude_m * cfg.camera.width.max(cfg.camera.height) as f64 / cfg.camera.focal_px);
    let (lo, hi) = (lo - pad, hi + pad);
    let n_clutter = (cfg.scene.clutter_density * (hi - lo).product()).round() as usize;
    let mut crng = rng_for(cfg.seed, STREAM_CLUTTER, 0);
    let clutter: Vec<Vector3<f64>> = (0..n_clutter)
        .map(|_| {
            Vector3::new(
                crng.random_range(lo.x..hi.x),
                crng.random_range(lo.y..hi.y),
                crng.random::<f64>() * cfg.scene.clutter_max_height_m,
            )
        })
        .collect();

    // Horizontal culling radius around the camera, generous for distortion.
    let reach = 1.5 * cfg.flight.altitude_m * (cfg.camera.width.max(cfg.camera.height) as f64 / 2.0) / cfg.camera.focal_px + 2.0;
    let sigma_px = cfg.scene.pixel_noise_px;
    let renders: Vec<FrameRender> = (0..n_frames)
        .into_par_iter()
        .map(|i| {
            let pose = &poses[&i];
            let c = pose.center();
            let near = |x: &Vector3<f64>| (x.x - c.x).abs() < reach && (x.y - c.y).abs() < reach;
            let mut rng = rng_for(cfg.seed, STREAM_FRAME, i as u64);
            let mut jitter = |p: Vector2<f64>| {
                if sigma_px > 0.0 {
                    let n = normal(sigma_px);
                    p + Vector2::new(n.sample(&mut rng), n.sample(&mut rng))
                } else {
                    p
                }
            };
            let mut detections = Vec::new();
            for m in modules.iter().filter(|m| near(&m.points[4])) {
                if let Some(px) = visible(&m.points, pose, &intr) {
                    let px: Vec<_> = px.into_iter().map(&mut jitter).collect();
                    if px.iter().all(|p| intr.contains(p)) {
                        detections.push(DetectionRecord {
                            frame: i,
                            quad: [px[0], px[1], px[2], px[3]],
                            center: px[4],
                            confidence: 1.0,
                            id: Some(m.name.clone()),
                        });
                    }
                }
            }
            let mut features = Vec::new();
            for (id, x) in clutter.iter().enumerate().filter(|(_, x)| near(x)) {
                if let Some(p) = project(x, pose, &intr).filter(|p| intr.contains(p)) {
                    let p = jitter(p);
                    if intr.contains(&p) {
                        features.push(FeatureObservation { frame: i, id: id as u64, pixel: p });
                    }
                }
            }
            FrameRender { detections, features }
        })
        .collect();
    let mut frames = Vec::new();
    let mut features = Vec::new();
    for (i, r) in renders.into_iter().enumerate() {
        if !r.detections.is_empty() {
            frames.push(FrameDetections { frame: i as u32, detections: r.detections });
        }
        features.extend(r.features);
    }

    let gps = sample_gps(cfg, &path, &origin);
    let (patches, scores) = render_thermal(cfg, &modules, &frames)?;
    let mut ds = Dataset {
        scenario: cfg.clone(),
        origin,
        intrinsics: intr,
        modules,
        path,
        poses,
        frames,
        features,
        gps,
        patches,
        scores,
        corruptions: Vec::new(),
    };
    for (k, c) in cfg.corruption.iter().enumerate() {
        corrupt(&mut ds, c, cfg.seed.wrapping_add(k as u64))?;
    }
    Ok(ds)
}

/// Horizontal drift offset at time `t` (seconds since start), along a
/// heading drawn from the seed.
pub fn gps_drift(cfg: &ScenarioConfig, duration: f64, t: f64) -> Vector2<f64> {
    let mut rng = rng_for(cfg.seed, STREAM_GPS, u64::MAX);
    let heading = rng.random::<f64>() * 2.0 * PI;
    let period = cfg.gps.drift_period_s.unwrap_or(2.0 * duration.max(1.0));
    let a = cfg.gps.drift_amplitude_m * (2.0 * PI * t / period + cfg.gps.drift_phase_rad).sin();
    Vector2::new(heading.cos(), heading.sin()) * a
}

fn sample_gps(cfg: &ScenarioConfig, path: &FlightPath, origin: &GeoPoint) -> Vec<GpsSample> {
    let duration = path.duration();
    let dt = 1.0 / cfg.gps.rate_hz;
    let n = (duration / dt - 1e-9).ceil() as usize + 1;
    let mut rng = rng_for(cfg.seed, STREAM_GPS, 0);
    (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            let mut p = path.position(t);
            let mut off = gps_drift(cfg, duration, t);
            if cfg.gps.noise_sigma_m > 0.0 {
                let nd = normal(cfg.gps.noise_sigma_m);
                off += Vector2::new(nd.sample(&mut rng), nd.sample(&mut rng));
            }
            p.x += off.x;
            p.y += off.y;
            GpsSample { time: cfg.flight.start_time_s + t, position: ltp_to_wgs84(&LtpPoint::from_vec(&p), origin) }
        })
        .collect()
}

fn gaussian_blob(grid: &mut [f64], w: usize, h: usize, cx: f64, cy: f64, sigma: f64, amp: f64) {
    for r in 0..h {
        for c in 0..w {
            let d2 = (c as f64 + 0.5 - cx).powi(2) + (r as f64 + 0.5 - cy).powi(2);
            grid[r * w + c] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Adds the temperature signature of `class` to a patch.
fn apply_template(grid: &mut [f64], w: usize, h: usize, class: AnomalyClass, rng: &mut ChaCha8Rng) {
    // 6 x 10 cells, 4 x 4 pixels each at the default size.
    let (cw, ch) = (w as f64 / 6.0, h as f64 / 10.0);
    let cell = |rng: &mut ChaCha8Rng| {
        let (i, j) = (rng.random_range(1..5), rng.random_range(1..9));
        ((i as f64 + 0.5) * cw, (j as f64 + 0.5) * ch)
    };
    let s = cw.min(ch) / 2.5;
    match class {
        AnomalyClass::Healthy => {}
        AnomalyClass::Mh => grid.iter_mut().for_each(|v| *v += 8.0),
        AnomalyClass::Sh => {
            let k = rng.random_range(0..3);
            let (c0, c1) = (k * w / 3, (k + 1) * w / 3);
            for r in 0..h {
                for c in c0..c1 {
                    grid[r * w + c] += 10.0;
                }
            }
        }
        AnomalyClass::CsPlus => {
            let (x, y) = cell(rng);
            gaussian_blob(grid, w, h, x, y, s, 15.0);
        }
        AnomalyClass::CmPlus => {
            for _ in 0..3 {
                let (x, y) = cell(rng);
                gaussian_blob(grid, w, h, x, y, s, 12.0);
            }
        }
        AnomalyClass::Cs => {
            let (x, y) = cell(rng);
            gaussian_blob(grid, w, h, x, y, s, 4.0);
        }
        AnomalyClass::Cm => {
            for _ in 0..3 {
                let (x, y) = cell(rng);
                gaussian_blob(grid, w, h, x, y, s, 4.0);
            }
        }
        AnomalyClass::D => {
            let (x, y) = cell(rng);
            gaussian_blob(grid, w, h, x, y, 2.0 * s, 12.0);
        }
        AnomalyClass::Chs => {
            let (x, y) = cell(rng);
            gaussian_blob(grid, w, h, x, y, s / 2.0, 20.0);
        }
        AnomalyClass::Pid => {
            // Warmer cells along the module frame.
            for r in 0..h {
                for c in 0..w {
                    let edge = (c as f64) < cw || (c as f64) >= w as f64 - cw || (r as f64) < ch || (r as f64) >= h as f64 - ch;
                    if edge {
                        grid[r * w + c] += 3.0;
                    }
                }
            }
        }
        AnomalyClass::So => {
            let (x, y) = cell(rng);
            gaussian_blob(grid, w, h, x, y, 3.0 * s, 3.0);
        }
    }
}

type Thermal = (BTreeMap<(String, u32), Grid<u16>>, Vec<PatchScore>);

fn render_thermal(cfg: &ScenarioConfig, modules: &[SynthModule], frames: &[FrameDetections]) -> Result<Thermal> {
    let a = &cfg.anomaly;
    let mut seen: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for f in frames {
        for d in &f.detections {
            if let Some(id) = &d.id {
                seen.entry(id.as_str()).or_default().push(f.frame);
            }
        }
    }
    let (w, h) = (a.patch_width, a.patch_height);
    let rendered: Vec<Vec<((String, u32), Grid<u16>, Option<PatchScore>)>> = modules
        .par_iter()
        .enumerate()
        .map(|(mi, m)| {
            let mut rng = rng_for(cfg.seed, STREAM_THERMAL, mi as u64);
            let Some(obs) = seen.get(m.name.as_str()) else { return Ok(Vec::new()) };
            let k = a.patches_per_module.min(obs.len());
            let module_offset = if a.module_sigma_c > 0.0 { normal(a.module_sigma_c).sample(&mut rng) } else { 0.0 };
            let mut template = vec![0.0; w * h];
            apply_template(&mut template, w, h, m.class, &mut rng);
            let mut out = Vec::with_capacity(k);
            for j in 0..k {
                let frame = obs[((j as f64 + 0.5) * obs.len() as f64 / k as f64) as usize];
                let view = if a.view_sigma_c > 0.0 { normal(a.view_sigma_c).sample(&mut rng) } else { 0.0 };
                let data: Vec<f64> = template
                    .iter()
                    .map(|t| {
                        let px = if a.pixel_sigma_c > 0.0 { normal(a.pixel_sigma_c).sample(&mut rng) } else { 0.0 };
                        a.baseline_c + module_offset + view + t + px
                    })
                    .collect();
                let raw = encode_radiometric(&Grid::new(h, w, data)?, 0.01, 0.0)?;
                let score = a.scores.then(|| {
                    let flagged = if m.class.is_anomaly() { rng.random::<f64>() < 0.9 } else { rng.random::<f64>() < 0.05 };
                    let p = if flagged { rng.random_range(0.55..=1.0) } else { rng.random_range(0.0..0.45) };
                    PatchScore { track_id: m.name.clone(), frame, anomaly_probability: p }
                });
                out.push(((m.name.clone(), frame), raw, score));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut patches = BTreeMap::new();
    let mut scores = Vec::new();
    for (key, raw, score) in rendered.into_iter().flatten() {
        patches.insert(key, raw);
        scores.extend(score);
    }
    Ok((patches, scores))
}

/// Applies one corruption in place and records what it changed.
pub fn corrupt(ds: &mut Dataset, kind: &Corruption, seed: u64) -> Result<()> {
    let mut rng = rng_for(seed, STREAM_CORRUPT, ds.corruptions.len() as u64);
    let affected = match *kind {
        Corruption::SplitTrack { fraction, gap_frames } => split_tracks(ds, fraction, gap_frames, &mut rng),
        Corruption::PoseOutlier { spike_m, sample } => {
            if ds.gps.is_empty() {
                return Err(Error::Precondition("no GPS samples to corrupt".into()));
            }
            let k = sample.unwrap_or(ds.gps.len() / 2);
            let s = ds.gps.get_mut(k).ok_or_else(|| Error::Config(format!("GPS sample {k} does not exist")))?;
            let heading = rng.random::<f64>() * 2.0 * PI;
            let mut p = crate::geodesy::wgs84_to_ltp(&s.position, &ds.origin)?;
            p.east += spike_m * heading.cos();
            p.north += spike_m * heading.sin();
            s.position = ltp_to_wgs84(&p, &ds.origin);
            vec![k.to_string()]
        }
        Corruption::MissingFrames { gap_m, at_m } => {
            let at = at_m.unwrap_or((ds.path.length() - gap_m) / 2.0);
            let fps = ds.scenario.flight.frame_rate_hz;
            let dropped: BTreeSet<u32> = ds
                .poses
                .keys()
                .copied()
                .filter(|&f| {
                    let s = ds.path.travel(f as f64 / fps);
                    s >= at && s < at + gap_m
                })
                .collect();
            ds.frames.retain(|f| !dropped.contains(&f.frame));
            ds.features.retain(|f| !dropped.contains(&f.frame));
            ds.patches.retain(|k, _| !dropped.contains(&k.1));
            ds.scores.retain(|s| !dropped.contains(&s.frame));
            dropped.iter().map(|f| f.to_string()).collect()
        }
    };
    ds.corruptions.push(CorruptionRecord { corruption: kind.clone(), affected });
    Ok(())
}

fn split_tracks(ds: &mut Dataset, fraction: f64, gap: u32, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut runs: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for f in &ds.frames {
        for d in &f.detections {
            if let Some(id) = &d.id {
                runs.entry(id.clone()).or_default().push(f.frame);
            }
        }
    }
    // (first gap frame, first relabeled frame) per split module, placed in
    // the middle of the first contiguous run of detections.
    let mut splits: BTreeMap<String, (u32, u32)> = BTreeMap::new();
    for m in &ds.modules {
        let draw: f64 = rng.random();
        if draw >= fraction {
            continue;
        }
        let Some(frames) = runs.get(&m.name) else { continue };
        let run = frames.windows(2).position(|w| w[1] != w[0] + 1).map_or(frames.len(), |i| i + 1);
        if run < gap as usize + 4 {
            continue;
        }
        let cut = frames[(run - gap as usize) / 2];
        splits.insert(m.name.clone(), (cut, cut + gap));
    }
    let relabel = |id: &str, frame: u32| -> Option<Option<String>> {
        let &(g0, g1) = splits.get(id)?;
        if frame < g0 {
            None
        } else if frame < g1 {
            Some(None)
        } else {
            Some(Some(format!("{id}#b")))
        }
    };
    for f in &mut ds.frames {
        f.detections.retain_mut(|d| {
            let Some(id) = d.id.as_deref() else { return true };
            match relabel(id, d.frame) {
                None => true,
                Some(None) => false,
                Some(Some(new)) => {
                    d.id = Some(new);
                    true
                }
            }
        });
    }
    ds.frames.retain(|f| !f.detections.is_empty());
    let old = std::mem::take(&mut ds.patches);
    for ((id, frame), g) in old {
        match relabel(&id, frame) {
            None => {
                ds.patches.insert((id, frame), g);
            }
            Some(None) => {}
            Some(Some(new)) => {
                ds.patches.insert((new, frame), g);
            }
        }
    }
    ds.scores.retain_mut(|s| match relabel(&s.track_id, s.frame) {
        None => true,
        Some(None) => false,
        Some(Some(new)) => {
            s.track_id = new;
            true
        }
    });
    splits.into_keys().collect()
}

impl Dataset {
    /// Origin of the pipeline's LTP frame: the first GPS sample at zero
    /// altitude.
    pub fn run_origin(&self) -> GeoPoint {
        let p = self.gps[0].position;
        GeoPoint { altitude: Some(0.0), ..p }
    }

    /// True poses re-expressed in the frame of [`Dataset::run_origin`].
    pub fn run_poses(&self) -> Result<BTreeMap<u32, Pose6Dof>> {
        let to = self.run_origin();
        self.poses.iter().map(|(&f, p)| Ok((f, change_pose_origin(p, &self.origin, &to)?))).collect()
    }

    pub fn truth(&self) -> Vec<TruthRecord> {
        self.modules
            .iter()
            .map(|m| TruthRecord {
                track_id: m.name.clone(),
                position: ltp_to_wgs84(&LtpPoint::from_vec(&m.points[0]), &self.origin),
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<LabelRecord> {
        self.modules
            .iter()
            .map(|m| LabelRecord { track_id: m.name.clone(), row_id: m.row, class: m.class })
            .collect()
    }

    pub fn trajectory_length(&self) -> f64 {
        self.path.length()
    }

    /// A run config that processes this dataset with default thresholds.
    pub fn run_config(&self) -> RunConfig {
        let mut c = RunConfig { seed: self.scenario.seed, ..RunConfig::default() };
        c.input.features = Some("features.jsonl".into());
        c.input.patches = Some("patches".into());
        c.input.scores = self.scenario.anomaly.scores.then(|| "scores.jsonl".into());
        c.input.truth = Some("truth.csv".into());
        c.input.labels = Some("labels.csv".into());
        c.video.frame_rate_hz = self.scenario.flight.frame_rate_hz;
        c.video.start_time_s = self.scenario.flight.start_time_s;
        c
    }

    /// Writes every artifact into `dir`: the pipeline inputs, ground truth,
    /// true poses, a corruption log, the scenario and a ready-to-run config.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ingest::write_detections(&dir.join("detections.jsonl"), &self.frames)?;
        ingest::write_gps(&dir.join("gps.csv"), &self.gps)?;
        ingest::write_intrinsics(&dir.join("intrinsics.json"), &self.intrinsics)?;
        ingest::write_features(&dir.join("features.jsonl"), &self.features)?;
        let pdir = dir.join("patches");
        if pdir.exists() {
            fs::remove_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        }
        for ((id, frame), g) in &self.patches {
            ingest::write_raw_patch(&ingest::patch_path(&pdir, id, *frame), g)?;
        }
        if self.scenario.anomaly.scores {
            ingest::write_scores(&dir.join("scores.jsonl"), &self.scores)?;
        }
        ingest::write_truth(&dir.join("truth.csv"), &self.truth())?;
        ingest::write_labels(&dir.join("labels.csv"), &self.labels())?;
        ingest::write_poses(&dir.join("poses.jsonl"), &self.run_poses()?)?;
        let text = |path: &Path, s: String| fs::write(path, s).map_err(|e| Error::io(path, e));
        let log = serde_json::to_string_pretty(&self.corruptions).map_err(|e| Error::Validation(e.to_string()))?;
        text(&dir.join("corruptions.json"), log + "\n")?;
        text(&dir.join("scenario.toml"), self.scenario.to_toml())?;
        text(&dir.join("run.toml"), self.run_config().to_toml())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        let mut c = ScenarioConfig::default();
        c.plant.rows = 2;
        c.plant.modules_per_row = 8;
        c.scene.clutter_density = 0.02;
        c
    }

    #[test]
    fn corners_are_ordered_and_modules_disjoint() {
        let ds = generate(&small()).unwrap();
        for m in &ds.modules {
            let [tl, tr, br, bl, c] = m.points;
            assert!(tr.x > tl.x && br.x > bl.x, "east to the right");
            assert!(tl.y > bl.y && tr.y > br.y, "north on top");
            assert!(tl.z > bl.z, "north edge raised");
            assert!((c - (tl + tr + br + bl) / 4.0).norm() < 1e-12);
        }
        for (i, a) in ds.modules.iter().enumerate() {
            for b in &ds.modules[i + 1..] {
                let (ax0, ax1) = (a.points[0].x, a.points[1].x);
                let (bx0, bx1) = (b.points[0].x, b.points[1].x);
                let (ay0, ay1) = (a.points[2].y, a.points[0].y);
                let (by0, by1) = (b.points[2].y, b.points[0].y);
                let overlap = ax0 < bx1 - 1e-9 && bx0 < ax1 - 1e-9 && ay0 < by1 - 1e-9 && by0 < ay1 - 1e-9;
                assert!(!overlap, "{} and {} overlap", a.name, b.name);
            }
        }
    }

    #[test]
    fn noiseless_detections_reproject_exactly() {
        let ds = generate(&small()).unwrap();
        let by_name: BTreeMap<_, _> = ds.modules.iter().map(|m| (m.name.as_str(), m)).collect();
        let mut n = 0;
        for f in &ds.frames {
            for d in &f.detections {
                let m = by_name[d.id.as_deref().unwrap()];
                for (p, x) in d.points().iter().zip(&m.points) {
                    let q = project(x, &ds.poses[&f.frame], &ds.intrinsics).unwrap();
                    assert!((p - q).norm() < 1e-9);
                }
                n += 1;
            }
        }
        assert!(n > 100);
        // Every module is fully seen somewhere.
        let seen: BTreeSet<_> = ds.frames.iter().flat_map(|f| f.detections.iter().map(|d| d.id.clone().unwrap())).collect();
        assert_eq!(seen.len(), ds.modules.len());
    }

    #[test]
    fn pixel_noise_matches_sigma() {
        let mut c = small();
        c.scene.pixel_noise_px = 0.5;
        let ds = generate(&c).unwrap();
        let by_name: BTreeMap<_, _> = ds.modules.iter().map(|m| (m.name.as_str(), m)).collect();
        let mut sq = Vec::new();
        for f in &ds.frames {
            for d in &f.detections {
                let m = by_name[d.id.as_deref().unwrap()];
                for (p, x) in d.points().iter().zip(&m.points) {
                    let q = project(x, &ds.poses[&f.frame], &ds.intrinsics).unwrap();
                    sq.push((p - q).norm_squared() / 2.0);
                }
            }
        }
        let sigma = (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
        assert!((sigma - 0.5).abs() < 0.03, "{sigma}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut c = small();
        c.scene.pixel_noise_px = 0.3;
        c.gps.noise_sigma_m = 1.0;
        c.corruption.push(Corruption::SplitTrack { fraction: 0.2, gap_frames: 3 });
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&c).unwrap().write(a.path()).unwrap();
        generate(&c).unwrap().write(b.path()).unwrap();
        for f in ["detections.jsonl", "gps.csv", "features.jsonl", "scores.jsonl", "truth.csv", "poses.jsonl", "corruptions.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        c.seed = 1;
        generate(&c).unwrap().write(b.path()).unwrap();
        assert_ne!(fs::read(a.path().join("gps.csv")).unwrap(), fs::read(b.path().join("gps.csv")).unwrap());
    }

    #[test]
    fn drift_reaches_configured_amplitude() {
        let mut c = small();
        c.gps.drift_amplitude_m = 8.0;
        let ds = generate(&c).unwrap();
        let peak = ds
            .gps
            .iter()
            .map(|s| {
                let t = s.time - c.flight.start_time_s;
                let p = crate::geodesy::wgs84_to_ltp(&s.position, &ds.origin).unwrap().vec();
                (p - ds.path.position(t)).xy().norm()
            })
            .fold(0.0, f64::max);
        assert!((peak - 8.0).abs() < 0.4, "{peak}");
    }

    #[test]
    fn gps_vertices_fall_on_samples() {
        let ds = generate(&small()).unwrap();
        for &(t, _) in &ds.path.vertices {
            assert_eq!(t.fract(), 0.0);
        }
        // Noiseless GPS at the vertices equals the path.
        let origin = ds.origin;
        for s in &ds.gps {
            let p = crate::geodesy::wgs84_to_ltp(&s.position, &origin).unwrap().vec();
            assert!((p - ds.path.position(s.time)).norm() < 1e-6);
        }
    }

    #[test]
    fn more_rows_per_pass_shortens_the_flight() {
        let mut c = ScenarioConfig::default();
        c.plant.rows = 20;
        c.plant.modules_per_row = 50;
        let len = |rpp: usize| {
            let mut c = c.clone();
            c.flight.rows_per_pass = rpp;
            let mut v = build_path(&c);
            let s = v[0].1;
            v.iter_mut().for_each(|x| x.1 -= s);
            FlightPath { vertices: v }.length()
        };
        let (l1, l2, l3) = (len(1), len(2), len(3));
        assert!((l1 / l2 / 1.9 - 1.0).abs() < 0.15, "{}", l1 / l2);
        assert!((l1 / l3 / 2.8 - 1.0).abs() < 0.15, "{}", l1 / l3);
    }

    #[test]
    fn split_track_yields_two_identities() {
        let mut c = small();
        c.corruption.push(Corruption::SplitTrack { fraction: 1.0, gap_frames: 3 });
        let ds = generate(&c).unwrap();
        let rec = &ds.corruptions[0];
        assert!(!rec.affected.is_empty());
        for name in &rec.affected {
            let frames = |id: &str| -> Vec<u32> {
                ds.frames.iter().filter(|f| f.detections.iter().any(|d| d.id.as_deref() == Some(id))).map(|f| f.frame).collect()
            };
            let a = frames(name);
            let b = frames(&format!("{name}#b"));
            assert!(!a.is_empty() && !b.is_empty());
            let first_b = b[0];
            let last_a = a.iter().copied().filter(|&f| f < first_b).max().unwrap();
            assert!(first_b - last_a > 3, "gap of at least 3 frames");
            assert_eq!(base_name(&format!("{name}#b")), name);
        }
    }

    #[test]
    fn missing_frames_and_pose_outlier() {
        let mut c = small();
        c.corruption.push(Corruption::MissingFrames { gap_m: 10.0, at_m: Some(5.0) });
        c.corruption.push(Corruption::PoseOutlier { spike_m: 5.0, sample: Some(3) });
        let clean = generate(&small()).unwrap();
        let ds = generate(&c).unwrap();
        let dropped = &ds.corruptions[0].affected;
        assert_eq!(dropped.len(), 25, "10 m at 0.4 m per frame");
        assert!(ds.frames.iter().all(|f| !dropped.contains(&f.frame.to_string())));
        let p = |s: &GpsSample| crate::geodesy::wgs84_to_ltp(&s.position, &ds.origin).unwrap().vec();
        assert!(((p(&ds.gps[3]) - p(&clean.gps[3])).norm() - 5.0).abs() < 1e-6);
        assert!((p(&ds.gps[4]) - p(&clean.gps[4])).norm() < 1e-9);
    }

    #[test]
    fn thermal_templates_separate_classes() {
        let mut c = small();
        c.anomaly.fraction = 1.0;
        let ds = generate(&c).unwrap();
        for m in &ds.modules {
            let g = ds.patches.iter().find(|(k, _)| k.0 == m.name).unwrap().1;
            let max = g.data.iter().map(|&r| r as f64 * 0.01 - 273.15).fold(f64::MIN, f64::max);
            match m.class {
                AnomalyClass::CsPlus | AnomalyClass::Sh | AnomalyClass::Chs => assert!(max > 45.0, "{max}"),
                _ => {}
            }
        }
    }

    #[test]
    fn scenario_toml_round_trip() {
        let mut c = small();
        c.corruption.push(Corruption::MissingFrames { gap_m: 30.0, at_m: None });
        let back = ScenarioConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(ScenarioConfig::from_toml("[[corruption]]\nkind = \"melt\"\n").is_err());
        assert!(ScenarioConfig::from_toml("[flight]\naltitude_m = 200\n").is_err());
    }
}
