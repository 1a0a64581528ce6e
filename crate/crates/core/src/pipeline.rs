//! End-to-end orchestration: ingest, tracking, keyframes, poses (SfM or
//! import), module geometry, thermal analysis and export, plus evaluation
//! against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::json;

use crate::analysis::{analyze, export_maps};
use crate::camera::{CameraIntrinsics, Pose6Dof};
use crate::config::RunConfig;
use crate::eval::{compare_detectors, rmse, rmse_per_row, AnomalyClass, AurocRow, DetectorScores};
use crate::geodesy::{wgs84_to_ltp, GeoPoint, GpsSample, LtpPoint, Trajectory};
use crate::ingest::{self, FeatureObservation, FrameDetections, PatchScore, RadiometricPatch, TruthRecord};
use crate::keyframes::{frame_infos, select_keyframes, FrameInfo, Keyframe, KeyframeParams};
use crate::modulegeo::{
    export_geojson, merge_duplicates, refine_modules, triangulate_all, write_failures, write_json, Failure, FailureMode,
    Loss, ModuleGeometry, RefineParams, TriParams,
};
use crate::sfm::{feature_tracks, reconstruct, ScenePoint};
use crate::synth::base_name;
use crate::tracking::{track_frames, ModuleTrack};
use crate::{Error, Result};

/// Everything read from disk.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<FrameDetections>,
    pub gps: Vec<GpsSample>,
    pub features: Vec<FeatureObservation>,
    pub patches: Vec<RadiometricPatch>,
    pub scores: Vec<PatchScore>,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")))
    }
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let i = &cfg.input;
    let run = || -> Result<Inputs> {
        require(&i.intrinsics)?;
        require(&i.detections)?;
        require(&i.gps)?;
        let intrinsics = ingest::load_intrinsics(&i.intrinsics)?;
        let frames = ingest::load_detections(&i.detections, intrinsics.width, intrinsics.height)?;
        let gps = ingest::load_gps(&i.gps)?;
        let features = match &i.features {
            Some(p) => {
                require(p)?;
                ingest::load_features(p)?
            }
            None => Vec::new(),
        };
        let patches = match &i.patches {
            Some(p) => ingest::load_patches(p, cfg.radiometry.scale, cfg.radiometry.offset)?,
            None => Vec::new(),
        };
        let scores = match &i.scores {
            Some(p) => {
                require(p)?;
                ingest::load_scores(p)?
            }
            None => Vec::new(),
        };
        Ok(Inputs { intrinsics, frames, gps, features, patches, scores })
    };
    run().map_err(|e| e.in_stage("ingest"))
}

/// Tracks, per-frame point sets and keyframes.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Origin of the run's LTP frame: the first GPS fix at zero altitude.
    pub origin: GeoPoint,
    pub tracks: Vec<ModuleTrack>,
    pub infos: Vec<FrameInfo>,
    pub keyframes: Vec<Keyframe>,
}

pub fn run_origin(gps: &[GpsSample]) -> Result<GeoPoint> {
    let first = gps.first().ok_or_else(|| Error::InsufficientData("empty GPS log".into()))?;
    Ok(GeoPoint { altitude: Some(0.0), ..first.position })
}

pub fn prepare(cfg: &RunConfig, inputs: &Inputs) -> Result<Prepared> {
    let origin = run_origin(&inputs.gps).map_err(|e| e.in_stage("ingest"))?;
    let tracks = track_frames(&inputs.frames, cfg.tracking.iou_min);
    info!("{} tracks from {} frames", tracks.len(), inputs.frames.len());
    let traj = Trajectory::new(&inputs.gps, origin).map_err(|e| e.in_stage("keyframes"))?;
    let frames: BTreeSet<u32> =
        inputs.frames.iter().map(|f| f.frame).chain(inputs.features.iter().map(|f| f.frame)).collect();
    let positions: Vec<(u32, LtpPoint)> = frames
        .iter()
        .map(|&f| (f, traj.at(cfg.video.start_time_s + f as f64 / cfg.video.frame_rate_hz)))
        .collect();
    let infos = frame_infos(&tracks, &inputs.features, &positions);
    let kp = KeyframeParams {
        d_min: cfg.keyframe.d_min_m,
        iou_min: cfg.keyframe.iou_min,
        ransac: crate::geometry::RansacParams {
            threshold: cfg.sfm.ransac_threshold_px,
            max_iterations: cfg.sfm.ransac_max_iterations,
            ..Default::default()
        },
        seed: cfg.seed,
        ..KeyframeParams::new(inputs.intrinsics.width, inputs.intrinsics.height)
    };
    let keyframes = select_keyframes(&infos, &kp);
    info!("{} keyframes", keyframes.len());
    Ok(Prepared { origin, tracks, infos, keyframes })
}

/// Keyframe poses in the run's LTP frame.
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub poses: BTreeMap<u32, Pose6Dof>,
    pub intrinsics: CameraIntrinsics,
    pub partials: usize,
    pub imported: bool,
    pub points: Vec<ScenePoint>,
}

pub fn estimate_poses(cfg: &RunConfig, inputs: &Inputs, prep: &Prepared, import: Option<&Path>) -> Result<PoseEstimate> {
    let kf: BTreeSet<u32> = prep.keyframes.iter().map(|k| k.frame).collect();
    if let Some(path) = import {
        let all = ingest::load_poses(path).map_err(|e| e.in_stage("poses"))?;
        let poses: BTreeMap<u32, Pose6Dof> = all.into_iter().filter(|(f, _)| kf.contains(f)).collect();
        info!("imported {} keyframe poses", poses.len());
        return Ok(PoseEstimate { poses, intrinsics: inputs.intrinsics, partials: 0, imported: true, points: Vec::new() });
    }
    let kf_list: Vec<u32> = kf.iter().copied().collect();
    let tracks = feature_tracks(&prep.infos, &kf_list);
    let partials = reconstruct(&prep.keyframes, &tracks, &inputs.intrinsics, &prep.origin, &cfg.sfm_params())
        .map_err(|e| e.in_stage("sfm"))?;
    let intrinsics = partials.first().map_or(inputs.intrinsics, |p| p.intrinsics);
    let mut poses = BTreeMap::new();
    let mut points = Vec::new();
    for p in &partials {
        poses.extend(p.poses.iter().map(|(f, q)| (*f, *q)));
        points.extend(p.points.iter().cloned());
    }
    Ok(PoseEstimate { poses, intrinsics, partials: partials.len(), imported: false, points })
}

/// Output of the module stages.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub modules: Vec<ModuleGeometry>,
    pub failures: Vec<Failure>,
    pub merged_groups: usize,
    pub refine_edges: usize,
    pub refine_cost: (f64, f64),
}

pub fn extract_modules(cfg: &RunConfig, tracks: &[ModuleTrack], est: &PoseEstimate) -> Result<Extraction> {
    let tri = TriParams {
        min_angle: cfg.tri.min_angle_deg.to_radians(),
        max_reproj_px: cfg.tri.max_reproj_px,
        ..TriParams::default()
    };
    let (mut modules, mut failures) = triangulate_all(tracks, &est.poses, &est.intrinsics, &tri);
    info!("{} of {} tracks triangulated", modules.len(), tracks.len());
    let mut merged_groups = 0;
    if cfg.merge.enabled {
        let m = merge_duplicates(&modules, &est.poses, &est.intrinsics, cfg.merge.max_mean_px, &tri);
        merged_groups = m.merged_groups;
        failures.extend(m.failures);
        modules = m.modules;
    }
    let (mut refine_edges, mut refine_cost) = (0, (0.0, 0.0));
    if cfg.refine.enabled {
        let rp = RefineParams {
            d_max_m: cfg.refine.d_max_m,
            d_max_px: cfg.refine.d_max_px,
            loss: Loss::Huber { delta: cfg.refine.huber_delta_m },
            anchor_weight: cfg.refine.anchor_weight,
        };
        let (m, rep) = refine_modules(&modules, &est.poses, &est.intrinsics, &rp).map_err(|e| e.in_stage("refine"))?;
        modules = m;
        refine_edges = rep.edges;
        refine_cost = (rep.initial_cost, rep.final_cost);
    }
    for m in &modules {
        let bases: BTreeSet<&str> = m.source_ids.iter().map(|s| base_name(s)).collect();
        if bases.len() > 1 {
            for t in &m.track_ids {
                failures.push(Failure { track_id: t.clone(), mode: FailureMode::DS });
            }
        }
    }
    Ok(Extraction { modules, failures, merged_groups, refine_edges, refine_cost })
}

/// Identities under which a module's patches and scores are filed.
pub fn lookup_ids(m: &ModuleGeometry) -> Vec<String> {
    if m.source_ids.is_empty() {
        m.track_ids.clone()
    } else {
        m.source_ids.iter().cloned().collect()
    }
}

/// Assignment of modules to ground-truth records.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthMatch {
    /// Per module, the matched truth index.
    pub module_truth: Vec<Option<usize>>,
    /// Per truth record, the matched modules in module order.
    pub truth_modules: Vec<Vec<usize>>,
}

/// Maximum top-left corner distance for matching without identities.
pub const MATCH_RADIUS_M: f64 = 2.0;

/// Matches by upstream identity when the modules carry identities that occur
/// in the truth, otherwise by nearest top-left corner within
/// [`MATCH_RADIUS_M`] (east-north distance).
pub fn match_truth(modules_tl: &[LtpPoint], module_ids: &[Vec<String>], truth: &[(String, LtpPoint)]) -> TruthMatch {
    let index: BTreeMap<&str, usize> = truth.iter().enumerate().map(|(i, t)| (t.0.as_str(), i)).collect();
    let by_id = module_ids.iter().flatten().any(|id| index.contains_key(base_name(id)));
    let module_truth: Vec<Option<usize>> = if by_id {
        module_ids
            .iter()
            .map(|ids| {
                let mut hits: Vec<usize> = ids.iter().filter_map(|id| index.get(base_name(id)).copied()).collect();
                hits.sort_unstable();
                hits.first().copied()
            })
            .collect()
    } else {
        modules_tl
            .iter()
            .map(|p| {
                truth
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (i, p.horizontal_distance(&t.1)))
                    .filter(|(_, d)| *d <= MATCH_RADIUS_M)
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
            })
            .collect()
    };
    let mut truth_modules = vec![Vec::new(); truth.len()];
    for (m, t) in module_truth.iter().enumerate() {
        if let Some(t) = t {
            truth_modules[*t].push(m);
        }
    }
    TruthMatch { module_truth, truth_modules }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthSummary {
    pub total: usize,
    pub extracted: usize,
    pub extracted_pct: f64,
    /// Truth modules represented by more than one output module.
    pub duplicated: usize,
    pub unmatched_outputs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub origin: [f64; 2],
    pub mode: &'static str,
    pub frames: usize,
    pub detections: usize,
    pub tracks: usize,
    pub keyframes: usize,
    pub registered_keyframes: usize,
    pub partials: usize,
    pub modules: usize,
    pub merged_groups: usize,
    pub patches: usize,
    pub scored_patches: usize,
    pub failures: BTreeMap<String, usize>,
    pub refine_edges: usize,
    pub refine_initial_cost: f64,
    pub refine_final_cost: f64,
    pub truth: Option<TruthSummary>,
    /// The effective configuration, for reproducing the run.
    pub config: String,
}

/// Truth records in the LTP frame of `origin`.
pub fn truth_ltp(truth: &[TruthRecord], origin: &GeoPoint) -> Result<Vec<(String, LtpPoint)>> {
    truth
        .iter()
        .map(|t| {
            let p = GeoPoint { altitude: Some(t.position.altitude_or_zero()), ..t.position };
            Ok((t.track_id.clone(), wgs84_to_ltp(&p, origin)?))
        })
        .collect()
}

/// Runs the whole pipeline and writes every artifact into the output
/// directory. `import` replaces SfM by externally supplied poses.
pub fn cmd_run(cfg: &RunConfig, import: Option<&Path>) -> Result<RunReport> {
    let inputs = load_inputs(cfg)?;
    let prep = prepare(cfg, &inputs)?;
    let import = import.or(cfg.input.poses.as_deref());
    let est = estimate_poses(cfg, &inputs, &prep, import)?;
    let mut ext = extract_modules(cfg, &prep.tracks, &est)?;

    let mut patch_map: BTreeMap<&str, Vec<&ingest::Grid<f64>>> = BTreeMap::new();
    for p in &inputs.patches {
        patch_map.entry(p.track_id.as_str()).or_default().push(&p.grid);
    }
    let mut score_map: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in &inputs.scores {
        score_map.entry(s.track_id.as_str()).or_default().push(s.anomaly_probability);
    }
    let ids: Vec<Vec<String>> = ext.modules.iter().map(lookup_ids).collect();
    let patches: Vec<Vec<&ingest::Grid<f64>>> =
        ids.iter().map(|ids| ids.iter().flat_map(|i| patch_map.get(i.as_str()).into_iter().flatten().copied()).collect()).collect();
    let scores: Vec<Vec<f64>> =
        ids.iter().map(|ids| ids.iter().flat_map(|i| score_map.get(i.as_str()).into_iter().flatten().copied()).collect()).collect();
    let a = &cfg.analysis;
    let analysis = analyze(&ext.modules, &patches, &scores, a.border_frac, a.radius_m, a.anomaly_threshold);

    let truth = match &cfg.input.truth {
        Some(p) => {
            require(p).map_err(|e| e.in_stage("ingest"))?;
            let t = ingest::load_truth(p).map_err(|e| e.in_stage("ingest"))?;
            let t = truth_ltp(&t, &prep.origin)?;
            let tl: Vec<LtpPoint> = ext.modules.iter().map(|m| LtpPoint::from_vec(&m.points[0])).collect();
            let mt = match_truth(&tl, &ids, &t);
            for (m, hit) in ext.modules.iter().zip(&mt.module_truth) {
                if hit.is_none() {
                    for tid in &m.track_ids {
                        ext.failures.push(Failure { track_id: tid.clone(), mode: FailureMode::FP });
                    }
                }
            }
            let extracted = mt.truth_modules.iter().filter(|v| !v.is_empty()).count();
            Some(TruthSummary {
                total: t.len(),
                extracted,
                extracted_pct: if t.is_empty() { 0.0 } else { 100.0 * extracted as f64 / t.len() as f64 },
                duplicated: mt.truth_modules.iter().filter(|v| v.len() > 1).count(),
                unmatched_outputs: mt.module_truth.iter().filter(|v| v.is_none()).count(),
            })
        }
        None => None,
    };

    let out = &cfg.out_dir;
    let write = || -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        export_geojson(&ext.modules, &prep.origin, &out.join("modules.geojson"))?;
        export_maps(&ext.modules, &analysis, &prep.origin, out)?;
        write_failures(&out.join("failures.csv"), &ext.failures)?;
        ingest::write_poses(&out.join("keyframe_poses.jsonl"), &est.poses)?;
        Ok(())
    };
    write().map_err(|e| e.in_stage("export"))?;

    let mut failures: BTreeMap<String, usize> =
        ["MM", "DP", "DS", "FP"].iter().map(|k| (k.to_string(), 0)).collect();
    for f in &ext.failures {
        *failures.entry(f.mode.to_string()).or_default() += 1;
    }
    let report = RunReport {
        origin: [prep.origin.latitude, prep.origin.longitude],
        mode: if est.imported { "import" } else { "sfm" },
        frames: prep.infos.len(),
        detections: inputs.frames.iter().map(|f| f.detections.len()).sum(),
        tracks: prep.tracks.len(),
        keyframes: prep.keyframes.len(),
        registered_keyframes: est.poses.len(),
        partials: est.partials,
        modules: ext.modules.len(),
        merged_groups: ext.merged_groups,
        patches: analysis.iter().map(|a| a.n_patches).sum(),
        scored_patches: analysis.iter().map(|a| a.n_scores).sum(),
        failures,
        refine_edges: ext.refine_edges,
        refine_initial_cost: ext.refine_cost.0,
        refine_final_cost: ext.refine_cost.1,
        truth,
        config: cfg.to_toml(),
    };
    let v = serde_json::to_value(&report).map_err(|e| Error::Validation(e.to_string()))?;
    write_json(&out.join("report.json"), &v).map_err(|e| e.in_stage("export"))?;
    Ok(report)
}

/// Runs the stages up to pose estimation and dumps the reconstruction.
pub fn cmd_inspect(cfg: &RunConfig, import: Option<&Path>) -> Result<serde_json::Value> {
    let inputs = load_inputs(cfg)?;
    let prep = prepare(cfg, &inputs)?;
    let est = estimate_poses(cfg, &inputs, &prep, import.or(cfg.input.poses.as_deref()))?;
    let poses: Vec<_> = est
        .poses
        .iter()
        .map(|(f, p)| json!({ "frame": f, "R": p.rotation_row_major(), "t": [p.translation.x, p.translation.y, p.translation.z] }))
        .collect();
    let dump = json!({
        "origin": [prep.origin.latitude, prep.origin.longitude],
        "tracks": prep.tracks.len(),
        "keyframes": prep.keyframes.iter().map(|k| k.frame).collect::<Vec<_>>(),
        "partials": est.partials,
        "intrinsics": est.intrinsics,
        "poses": poses,
        "points": est.points,
    });
    write_json(&cfg.out_dir.join("reconstruction.json"), &dump).map_err(|e| e.in_stage("export"))?;
    Ok(dump)
}

/// Metrics of a finished run against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub truth_total: usize,
    pub modules: usize,
    pub matched: usize,
    pub duplicated: usize,
    pub unmatched_outputs: usize,
    /// Top-left corner RMSE over matched truth modules.
    pub rmse_m: Option<f64>,
    pub per_row_rmse_m: BTreeMap<u32, f64>,
    pub rows_below_1m: Option<f64>,
    pub auroc: Vec<AurocRow>,
}

struct OutputModule {
    tl: GeoPoint,
    ids: Vec<String>,
    t_rel_max: Option<f64>,
    anomaly_ratio: Option<f64>,
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
}

fn read_outputs(dir: &Path) -> Result<(GeoPoint, Vec<OutputModule>)> {
    let report = read_json(&dir.join("report.json"))?;
    let bad = |what: &str| Error::Validation(format!("{}: malformed {what}", dir.display()));
    let o = report["origin"].as_array().ok_or_else(|| bad("origin"))?;
    let origin = GeoPoint::new(
        o.first().and_then(|v| v.as_f64()).ok_or_else(|| bad("origin"))?,
        o.get(1).and_then(|v| v.as_f64()).ok_or_else(|| bad("origin"))?,
        Some(0.0),
    )?;
    let maps = read_json(&dir.join("maps.geojson"))?;
    let mut out = Vec::new();
    for f in maps["features"].as_array().ok_or_else(|| bad("feature collection"))? {
        let c = &f["geometry"]["coordinates"][0][0];
        let num = |i: usize| c[i].as_f64().ok_or_else(|| bad("coordinates"));
        let tl = GeoPoint::new(num(1)?, num(0)?, Some(num(2)?))?;
        let p = &f["properties"];
        let strings = |k: &str| -> Vec<String> {
            p[k].as_array().map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect()).unwrap_or_default()
        };
        let mut ids = strings("source_ids");
        if ids.is_empty() {
            ids = strings("track_ids");
        }
        out.push(OutputModule { tl, ids, t_rel_max: p["t_rel_max"].as_f64(), anomaly_ratio: p["anomaly_ratio"].as_f64() });
    }
    Ok((origin, out))
}

/// Compares the outputs in `dir` with ground truth and writes
/// `metrics.json` there.
pub fn cmd_eval(dir: &Path, truth_path: &Path, labels_path: Option<&Path>) -> Result<EvalReport> {
    let (origin, outputs) = read_outputs(dir).map_err(|e| e.in_stage("eval"))?;
    let truth = ingest::load_truth(truth_path).map_err(|e| e.in_stage("eval"))?;
    let truth = truth_ltp(&truth, &origin)?;
    let tl: Vec<LtpPoint> = outputs.iter().map(|m| wgs84_to_ltp(&m.tl, &origin)).collect::<Result<_>>()?;
    let ids: Vec<Vec<String>> = outputs.iter().map(|m| m.ids.clone()).collect();
    let mt = match_truth(&tl, &ids, &truth);
    let labels = match labels_path {
        Some(p) => ingest::load_labels(p).map_err(|e| e.in_stage("eval"))?,
        None => Vec::new(),
    };
    let label_of: BTreeMap<&str, (u32, AnomalyClass)> =
        labels.iter().map(|l| (l.track_id.as_str(), (l.row_id, l.class))).collect();

    let (mut est, mut tru, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    let mut detectors = Vec::new();
    for (ti, ms) in mt.truth_modules.iter().enumerate() {
        let Some(&m) = ms.first() else { continue };
        est.push(tl[m]);
        tru.push(truth[ti].1);
        if let Some(&(row, class)) = label_of.get(truth[ti].0.as_str()) {
            rows.push(row);
            detectors.push(DetectorScores {
                class,
                relative_temperature: outputs[m].t_rel_max,
                anomaly_ratio: outputs[m].anomaly_ratio,
            });
        }
    }
    let rmse_m = rmse(&est, &tru).ok();
    let per_row = if !labels.is_empty() && rows.len() == est.len() { rmse_per_row(&est, &tru, &rows)? } else { BTreeMap::new() };
    let rows_below_1m =
        (!per_row.is_empty()).then(|| per_row.values().filter(|&&v| v < 1.0).count() as f64 / per_row.len() as f64);
    let report = EvalReport {
        truth_total: truth.len(),
        modules: outputs.len(),
        matched: est.len(),
        duplicated: mt.truth_modules.iter().filter(|v| v.len() > 1).count(),
        unmatched_outputs: mt.module_truth.iter().filter(|v| v.is_none()).count(),
        rmse_m,
        per_row_rmse_m: per_row,
        rows_below_1m,
        auroc: compare_detectors(&detectors),
    };
    let v = serde_json::to_value(&report).map_err(|e| Error::Validation(e.to_string()))?;
    write_json(&dir.join("metrics.json"), &v)?;
    Ok(report)
}

/// Generates a synthetic dataset into `out` and returns the path of its
/// ready-to-run config.
pub fn cmd_synth(scenario: &crate::synth::ScenarioConfig, out: &Path) -> Result<PathBuf> {
    let ds = crate::synth::generate(scenario).map_err(|e| e.in_stage("synth"))?;
    ds.write(out).map_err(|e| e.in_stage("synth"))?;
    info!(
        "{} modules, {} frames, trajectory {:.1} m",
        ds.modules.len(),
        ds.frames.len(),
        ds.trajectory_length()
    );
    Ok(out.join("run.toml"))
}

/// Runs `f` on a dedicated pool of `threads` workers (0 = all cores).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
