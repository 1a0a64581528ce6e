//! Readers and writers for every external artifact: detections, GPS logs,
//! intrinsics, radiometric patches, imported poses, classifier scores,
//! synthetic feature tracks and ground truth.
//!
//! Loaders never panic on malformed input; they return [`Error::Parse`]
//! naming the file and line, or a validation error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, Pose6Dof};
use crate::eval::AnomalyClass;
use crate::geodesy::{GeoPoint, GpsSample};
use crate::geometry::{is_simple_quad, signed_area};
use crate::{Error, Result};

pub const KELVIN_OFFSET: f64 = 273.15;
pub const MIN_CELSIUS: f64 = -50.0;
pub const MAX_CELSIUS: f64 = 150.0;
const PATCH_MAGIC: &[u8; 8] = b"PVRAD16\0";

/// One segmented module in one frame. Corners are ordered top-left,
/// top-right, bottom-right, bottom-left.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub frame: u32,
    pub quad: [Vector2<f64>; 4],
    pub center: Vector2<f64>,
    pub confidence: f64,
    /// Optional upstream identity (a tracker ID or a ground-truth name).
    pub id: Option<String>,
}

impl DetectionRecord {
    /// Corners followed by the center.
    pub fn points(&self) -> [Vector2<f64>; 5] {
        [self.quad[0], self.quad[1], self.quad[2], self.quad[3], self.center]
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.quad).abs()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionJson {
    frame: u32,
    quad: [[f64; 2]; 4],
    center: [f64; 2],
    conf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

/// Detections of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame: u32,
    pub detections: Vec<DetectionRecord>,
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn invalid(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Validation(format!("{}:{}: {}", path.display(), line, msg))
}

/// Parses a JSON-lines file, skipping blank lines. Line numbers are 1-based.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        let s = serde_json::to_string(&r).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(w, "{s}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn v2(a: [f64; 2]) -> Vector2<f64> {
    Vector2::new(a[0], a[1])
}

/// Loads detections grouped by frame (ascending), validating each record
/// against the image bounds `[0, width] x [0, height]`.
pub fn load_detections(path: &Path, width: u32, height: u32) -> Result<Vec<FrameDetections>> {
    let (w, h) = (width as f64, height as f64);
    let mut by_frame: BTreeMap<u32, Vec<DetectionRecord>> = BTreeMap::new();
    for (line, r) in read_jsonl::<DetectionJson>(path)? {
        let quad = r.quad.map(v2);
        let center = v2(r.center);
        let pts = [quad[0], quad[1], quad[2], quad[3], center];
        if pts.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(parse_err(path, line, "non-finite coordinate"));
        }
        if !(0.0..=1.0).contains(&r.conf) {
            return Err(invalid(path, line, format_args!("confidence {} outside [0, 1]", r.conf)));
        }
        if let Some(p) = pts.iter().find(|p| p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h) {
            return Err(invalid(path, line, format_args!("point ({}, {}) outside the {}x{} image", p.x, p.y, w, h)));
        }
        if !is_simple_quad(&quad) {
            return Err(invalid(path, line, "self-intersecting quad"));
        }
        by_frame.entry(r.frame).or_default().push(DetectionRecord {
            frame: r.frame,
            quad,
            center,
            confidence: r.conf,
            id: r.id,
        });
    }
    Ok(by_frame.into_iter().map(|(frame, detections)| FrameDetections { frame, detections }).collect())
}

pub fn write_detections(path: &Path, frames: &[FrameDetections]) -> Result<()> {
    write_jsonl(
        path,
        frames.iter().flat_map(|f| f.detections.iter()).map(|d| DetectionJson {
            frame: d.frame,
            quad: d.quad.map(|p| [p.x, p.y]),
            center: [d.center.x, d.center.y],
            conf: d.confidence,
            id: d.id.clone(),
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct GpsRow {
    time_s: f64,
    lat_deg: f64,
    lon_deg: f64,
    alt_m: Option<f64>,
}

fn csv_reader(path: &Path) -> Result<csv::Reader<BufReader<fs::File>>> {
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    parse_err(path, line, e.to_string())
}

/// Loads a GPS log. Samples must be strictly increasing in time.
pub fn load_gps(path: &Path) -> Result<Vec<GpsSample>> {
    let mut out: Vec<GpsSample> = Vec::new();
    for (i, row) in csv_reader(path)?.deserialize::<GpsRow>().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let position = GeoPoint::new(row.lat_deg, row.lon_deg, row.alt_m)
            .map_err(|e| invalid(path, line, e))?;
        if !row.time_s.is_finite() {
            return Err(invalid(path, line, "non-finite time"));
        }
        if let Some(prev) = out.last() {
            if !(row.time_s > prev.time) {
                return Err(invalid(path, line, "GPS times must be strictly increasing"));
            }
        }
        out.push(GpsSample { time: row.time_s, position });
    }
    Ok(out)
}

pub fn write_gps(path: &Path, samples: &[GpsSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for s in samples {
        w.serialize(GpsRow {
            time_s: s.time,
            lat_deg: s.position.latitude,
            lon_deg: s.position.longitude,
            alt_m: s.position.altitude,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let intr: CameraIntrinsics = serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))?;
    intr.validate()?;
    Ok(intr)
}

pub fn write_intrinsics(path: &Path, intr: &CameraIntrinsics) -> Result<()> {
    let mut w = create(path)?;
    let s = serde_json::to_string_pretty(intr).map_err(|e| Error::Validation(e.to_string()))?;
    writeln!(w, "{s}").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Validation(format!(
                "grid data has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid { height, width, data: vec![value; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: T) {
        self.data[row * self.width + col] = v;
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Decodes raw 16-bit counts to degrees Celsius:
/// `raw * scale + offset - 273.15`.
pub fn decode_radiometric(raw: &Grid<u16>, scale: f64, offset: f64) -> Result<Grid<f64>> {
    if !(scale > 0.0) || !scale.is_finite() || !offset.is_finite() {
        return Err(Error::Precondition(format!("radiometric scale must be positive, got {scale}")));
    }
    let out = raw.map(|r| r as f64 * scale + offset - KELVIN_OFFSET);
    if let Some(v) = out.data.iter().find(|v| !(MIN_CELSIUS..=MAX_CELSIUS).contains(*v)) {
        return Err(Error::Range(format!("decoded temperature {v:.2} °C outside [{MIN_CELSIUS}, {MAX_CELSIUS}]")));
    }
    Ok(out)
}

/// Inverse of [`decode_radiometric`], rounding to the nearest count.
pub fn encode_radiometric(grid: &Grid<f64>, scale: f64, offset: f64) -> Result<Grid<u16>> {
    if !(scale > 0.0) {
        return Err(Error::Precondition(format!("radiometric scale must be positive, got {scale}")));
    }
    let mut data = Vec::with_capacity(grid.data.len());
    for &c in &grid.data {
        let raw = ((c + KELVIN_OFFSET - offset) / scale).round();
        if !(0.0..=u16::MAX as f64).contains(&raw) {
            return Err(Error::Range(format!("{c} °C is not representable in 16 bits")));
        }
        data.push(raw as u16);
    }
    Ok(Grid { height: grid.height, width: grid.width, data })
}

/// Reads a raw patch file: 8-byte magic, height and width as little-endian
/// u32, then `height * width` little-endian u16 samples.
pub fn read_raw_patch(path: &Path) -> Result<Grid<u16>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != PATCH_MAGIC {
        return Err(parse_err(path, 0, "missing radiometric patch header"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if h.checked_mul(w).and_then(|n| n.checked_mul(2)) != Some(body.len()) {
        return Err(parse_err(path, 0, format!("patch body has {} bytes, expected {h}x{w} samples", body.len())));
    }
    let data = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok(Grid { height: h, width: w, data })
}

pub fn write_raw_patch(path: &Path, grid: &Grid<u16>) -> Result<()> {
    let mut w = create(path)?;
    let mut buf = Vec::with_capacity(16 + 2 * grid.data.len());
    buf.extend_from_slice(PATCH_MAGIC);
    buf.extend_from_slice(&(grid.height as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.width as u32).to_le_bytes());
    for v in &grid.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// A decoded temperature patch of one module in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiometricPatch {
    pub track_id: String,
    pub frame: u32,
    pub grid: Grid<f64>,
}

pub const MIN_PATCH_SIDE: usize = 8;

/// Path of a patch inside a patch directory: `<dir>/<track_id>/<frame>.bin`.
pub fn patch_path(dir: &Path, track_id: &str, frame: u32) -> PathBuf {
    dir.join(track_id).join(format!("{frame}.bin"))
}

/// Loads every patch below `dir`, sorted by track ID then frame. A missing
/// directory yields no patches.
pub fn load_patches(dir: &Path, scale: f64, offset: f64) -> Result<Vec<RadiometricPatch>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut tracks: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    tracks.sort_by_key(|e| e.file_name());
    for t in tracks {
        let track_id = t.file_name().to_string_lossy().into_owned();
        let mut files: Vec<(u32, PathBuf)> = Vec::new();
        for f in fs::read_dir(t.path()).map_err(|e| Error::io(t.path(), e))?.filter_map(|e| e.ok()) {
            let p = f.path();
            if p.extension().and_then(|s| s.to_str()) != Some("bin") {
                continue;
            }
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let frame: u32 = stem.parse().map_err(|_| parse_err(&p, 0, "patch file name must be <frame>.bin"))?;
            files.push((frame, p));
        }
        files.sort();
        for (frame, p) in files {
            let raw = read_raw_patch(&p)?;
            if raw.height < MIN_PATCH_SIDE || raw.width < MIN_PATCH_SIDE {
                return Err(Error::Validation(format!(
                    "{}: patch {}x{} smaller than {MIN_PATCH_SIDE}x{MIN_PATCH_SIDE}",
                    p.display(),
                    raw.height,
                    raw.width
                )));
            }
            let grid = decode_radiometric(&raw, scale, offset).map_err(|e| match e {
                Error::Range(m) => Error::Range(format!("{}: {m}", p.display())),
                other => other,
            })?;
            out.push(RadiometricPatch { track_id: track_id.clone(), frame, grid });
        }
    }
    Ok(out)
}

/// Min-max normalization to 8 bits followed by histogram equalization over
/// 256 bins. A constant grid maps to zeros.
pub fn to_display_frame(grid: &Grid<f64>) -> Grid<u8> {
    let (lo, hi) = grid
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if grid.data.is_empty() || !(hi > lo) {
        return grid.map(|_| 0u8);
    }
    let norm = grid.map(|v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8);
    let mut hist = [0usize; 256];
    for &v in &norm.data {
        hist[v as usize] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for i in 0..256 {
        acc += hist[i];
        cdf[i] = acc;
    }
    let n = norm.data.len();
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let denom = (n - cdf_min) as f64;
    let lut: Vec<u8> =
        (0..256).map(|i| (((cdf[i].saturating_sub(cdf_min)) as f64 / denom) * 255.0).round() as u8).collect();
    norm.map(|v| lut[v as usize])
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseJson {
    frame: u32,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

/// Loads imported keyframe poses (world-to-camera, world = run LTP frame).
pub fn load_poses(path: &Path) -> Result<BTreeMap<u32, Pose6Dof>> {
    let mut out = BTreeMap::new();
    for (line, p) in read_jsonl::<PoseJson>(path)? {
        let pose = Pose6Dof::new(Matrix3::from_row_slice(&p.r), Vector3::from_row_slice(&p.t));
        if !pose.is_valid(1e-6) {
            return Err(invalid(path, line, "rotation is not orthonormal"));
        }
        if out.insert(p.frame, pose).is_some() {
            return Err(invalid(path, line, format_args!("duplicate pose for frame {}", p.frame)));
        }
    }
    Ok(out)
}

pub fn write_poses(path: &Path, poses: &BTreeMap<u32, Pose6Dof>) -> Result<()> {
    write_jsonl(
        path,
        poses.iter().map(|(&frame, p)| PoseJson {
            frame,
            r: p.rotation_row_major(),
            t: [p.translation.x, p.translation.y, p.translation.z],
        }),
    )
}

/// Classifier output for one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub track_id: String,
    pub frame: u32,
    #[serde(rename = "p_anomaly")]
    pub anomaly_probability: f64,
}

pub fn load_scores(path: &Path) -> Result<Vec<PatchScore>> {
    let mut out = Vec::new();
    for (line, s) in read_jsonl::<PatchScore>(path)? {
        if !(0.0..=1.0).contains(&s.anomaly_probability) {
            return Err(invalid(path, line, format_args!("probability {} outside [0, 1]", s.anomaly_probability)));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_scores(path: &Path, scores: &[PatchScore]) -> Result<()> {
    write_jsonl(path, scores)
}

/// One observation of a generic point feature (stand-in for image feature
/// matches).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureObservation {
    pub frame: u32,
    pub id: u64,
    pub pixel: Vector2<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureJson {
    frame: u32,
    id: u64,
    xy: [f64; 2],
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureObservation>> {
    read_jsonl::<FeatureJson>(path)?
        .into_iter()
        .map(|(line, f)| {
            if !f.xy.iter().all(|v| v.is_finite()) {
                return Err(parse_err(path, line, "non-finite coordinate"));
            }
            Ok(FeatureObservation { frame: f.frame, id: f.id, pixel: v2(f.xy) })
        })
        .collect()
}

pub fn write_features(path: &Path, feats: &[FeatureObservation]) -> Result<()> {
    write_jsonl(path, feats.iter().map(|f| FeatureJson { frame: f.frame, id: f.id, xy: [f.pixel.x, f.pixel.y] }))
}

/// Ground-truth top-left corner of one module.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRecord {
    pub track_id: String,
    pub position: GeoPoint,
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    track_id: String,
    lat: f64,
    lon: f64,
    #[serde(default)]
    alt_m: Option<f64>,
}

pub fn load_truth(path: &Path) -> Result<Vec<TruthRecord>> {
    let mut out = Vec::new();
    for (i, row) in csv_reader(path)?.deserialize::<TruthRow>().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let position = GeoPoint::new(row.lat, row.lon, row.alt_m).map_err(|e| invalid(path, i + 2, e))?;
        out.push(TruthRecord { track_id: row.track_id, position });
    }
    Ok(out)
}

pub fn write_truth(path: &Path, truth: &[TruthRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for t in truth {
        w.serialize(TruthRow {
            track_id: t.track_id.clone(),
            lat: t.position.latitude,
            lon: t.position.longitude,
            alt_m: t.position.altitude,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Row and anomaly class of one module.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub track_id: String,
    pub row_id: u32,
    pub class: AnomalyClass,
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    track_id: String,
    row_id: u32,
    class: String,
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, row) in csv_reader(path)?.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let class = row.class.parse().map_err(|e| invalid(path, i + 2, e))?;
        out.push(LabelRecord { track_id: row.track_id, row_id: row.row_id, class });
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[LabelRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for l in labels {
        w.serialize(LabelRow { track_id: l.track_id.clone(), row_id: l.row_id, class: l.class.to_string() })
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
