//! Incremental structure-from-motion over keyframes.
//!
//! The reconstruction starts from the best-connected keyframe pair, then
//! repeatedly resects the keyframe that observes the most reconstructed
//! points, triangulates newly visible points, aligns to GPS and runs bundle
//! adjustment at a fixed interval. Keyframes that cannot be attached seed
//! further partial reconstructions, which are finally expressed in the frame
//! of the first one.

pub mod ba;
pub mod pnp;
pub mod twoview;

use std::collections::{BTreeMap, HashMap};

use log::{debug, info, warn};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{ray_angle, undistort, CameraIntrinsics, Pose6Dof};
use crate::geodesy::{change_origin, ecef_to_enu_rotation, ltp_to_wgs84, wgs84_to_ltp, GeoPoint, LtpPoint};
use crate::geometry::{so3_exp, sym_eigen_sorted, triangulate, umeyama, RansacParams, Similarity};
use crate::keyframes::{FrameInfo, Keyframe, PointKey};
use crate::{Error, Result};

use ba::{bundle_adjust, BaCamera, BaObservation, BaOptions, BaPrior, BaProblem, IntrinsicsPrior};

/// A 2-D point followed through several keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub key: PointKey,
    pub observations: BTreeMap<u32, Vector2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenePoint {
    #[serde(skip)]
    pub key: PointKey,
    /// East, north, up in the reconstruction's LTP frame.
    pub position: [f64; 3],
    pub observations: Vec<(u32, [f64; 2])>,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub poses: BTreeMap<u32, Pose6Dof>,
    pub points: Vec<ScenePoint>,
    pub origin: GeoPoint,
    /// Intrinsics as refined by bundle adjustment.
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Copy)]
pub struct SfmParams {
    pub pair_radius_m: f64,
    pub gps_sigma_m: f64,
    pub min_ray_angle: f64,
    pub max_reproj_px: f64,
    pub ba_interval: usize,
    pub ransac: RansacParams,
    pub min_pnp_inliers: usize,
    pub min_init_tracks: usize,
    pub max_init_attempts: usize,
    pub refine_intrinsics: bool,
    /// Prior standard deviation of the refined focal length, relative to the
    /// calibrated one.
    pub focal_prior_sigma: f64,
    /// Prior standard deviation of the refined k1 and k2.
    pub distortion_prior_sigma: f64,
    /// Lateral GPS spread (m, RMS) below which a trajectory counts as a line
    /// for alignment purposes.
    pub align_min_lateral_m: f64,
    pub ba: BaOptions,
    pub seed: u64,
}

impl Default for SfmParams {
    fn default() -> Self {
        SfmParams {
            pair_radius_m: 15.0,
            gps_sigma_m: 0.1,
            min_ray_angle: 1f64.to_radians(),
            max_reproj_px: 5.0,
            ba_interval: 10,
            ransac: RansacParams::default(),
            min_pnp_inliers: 4,
            min_init_tracks: 8,
            max_init_attempts: 30,
            refine_intrinsics: true,
            focal_prior_sigma: 0.02,
            distortion_prior_sigma: 0.05,
            align_min_lateral_m: 2.0,
            ba: BaOptions::default(),
            seed: 0,
        }
    }
}

/// All unordered keyframe pairs whose GPS positions lie within `max_dist`
/// (3-D distance), as index pairs `(i, j)` with `i < j`.
pub fn match_candidate_pairs(keyframes: &[Keyframe], max_dist: f64) -> Vec<(usize, usize)> {
    // Sweep over east so that only nearby keyframes are compared.
    let mut order: Vec<usize> = (0..keyframes.len()).collect();
    order.sort_by(|&a, &b| keyframes[a].gps.east.total_cmp(&keyframes[b].gps.east).then(a.cmp(&b)));
    let mut pairs = Vec::new();
    for (oi, &i) in order.iter().enumerate() {
        let pi = keyframes[i].gps.vec();
        for &j in &order[oi + 1..] {
            let pj = keyframes[j].gps.vec();
            if pj.x - pi.x > max_dist {
                break;
            }
            if (pj - pi).norm() <= max_dist {
                pairs.push((i.min(j), i.max(j)));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Groups per-frame points into tracks over the given keyframes. Tracks
/// seen in fewer than two keyframes are dropped.
pub fn feature_tracks(frames: &[FrameInfo], keyframes: &[u32]) -> Vec<FeatureTrack> {
    let mut map: BTreeMap<PointKey, BTreeMap<u32, Vector2<f64>>> = BTreeMap::new();
    for f in frames {
        if keyframes.binary_search(&f.frame).is_err() {
            continue;
        }
        for (k, p) in &f.points {
            map.entry(*k).or_default().insert(f.frame, *p);
        }
    }
    map.into_iter()
        .filter(|(_, o)| o.len() >= 2)
        .map(|(key, observations)| FeatureTrack { key, observations })
        .collect()
}

/// One observation of a point for triangulation.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub pose: &'a Pose6Dof,
    pub intrinsics: &'a CameraIntrinsics,
    pub pixel: Vector2<f64>,
}

/// Largest angle between any two viewing rays of `x`.
pub fn max_ray_angle(x: &Vector3<f64>, centers: &[Vector3<f64>]) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            best = best.max(ray_angle(&(x - centers[i]), &(x - centers[j])));
        }
    }
    best
}

/// Linear triangulation over all views, rejected when no two rays are more
/// than `min_angle` apart or any view reprojects worse than `max_reproj_px`.
pub fn triangulate_scene_point(views: &[View], min_angle: f64, max_reproj_px: f64) -> Result<Vector3<f64>> {
    if views.len() < 2 {
        return Err(Error::InsufficientData(format!("{} observations, need 2", views.len())));
    }
    let mut norm = Vec::with_capacity(views.len());
    for v in views {
        norm.push((v.pose, undistort(&v.pixel, v.intrinsics)?));
    }
    let x = triangulate(&norm).ok_or_else(|| Error::Numeric("singular triangulation".into()))?;
    let centers: Vec<Vector3<f64>> = views.iter().map(|v| v.pose.center()).collect();
    let angle = max_ray_angle(&x, &centers);
    if !(angle > min_angle) {
        return Err(Error::Precondition(format!("ray angle {:.4} deg", angle.to_degrees())));
    }
    for v in views {
        let e = crate::camera::project(&x, v.pose, v.intrinsics).map_or(f64::INFINITY, |p| (p - v.pixel).norm());
        if !(e <= max_reproj_px) {
            return Err(Error::Validation(format!("reprojection error {e:.3} px")));
        }
    }
    Ok(x)
}

/// Similarity mapping camera centers onto GPS positions (Umeyama). `None`
/// for fewer than three frames or when the targets are
/// coincident or collinear; a trajectory whose lateral RMS spread is below
/// `min_lateral` counts as collinear.
pub fn align_to_gps(centers: &[Vector3<f64>], targets: &[Vector3<f64>], min_lateral: f64) -> Option<Similarity> {
    if centers.len() < 3 || centers.len() != targets.len() {
        debug!("GPS alignment skipped: {} frames", centers.len());
        return None;
    }
    let (vals, _) = spread(targets);
    let (l1, l2) = (vals[2].max(0.0).sqrt(), vals[1].max(0.0).sqrt());
    if !(l1 > 1e-9) || !(l2 > 1e-6 * l1) || l2 < min_lateral {
        debug!("GPS alignment skipped: degenerate trajectory (spread {l1:.3} m x {l2:.3} m)");
        return None;
    }
    let (svals, _) = spread(centers);
    if !(svals[1] > 1e-12 * svals[2].max(1e-300)) {
        return None;
    }
    umeyama(centers, targets, true)
}

/// Covariance eigenvalues (ascending) and eigenvectors of a point set.
fn spread(p: &[Vector3<f64>]) -> (Vector3<f64>, Matrix3<f64>) {
    let n = p.len() as f64;
    let m = p.iter().fold(Vector3::zeros(), |a, x| a + x) / n;
    let mut c = Matrix3::zeros();
    for x in p {
        let d = x - m;
        c += d * d.transpose();
    }
    sym_eigen_sorted(c / n)
}

/// Alignment for (nearly) collinear trajectories: the principal direction of
/// the camera centers is mapped onto that of the GPS track, scale and
/// translation follow by least squares, and the remaining roll about the
/// track is chosen so that the mean optical axis points as far down as
/// possible. `axes` are the cameras' optical axes in the source frame.
pub fn align_line_nadir(centers: &[Vector3<f64>], targets: &[Vector3<f64>], axes: &[Vector3<f64>]) -> Option<Similarity> {
    let n = centers.len();
    if n < 2 || targets.len() != n {
        return None;
    }
    let nf = n as f64;
    let ms = centers.iter().fold(Vector3::zeros(), |a, x| a + x) / nf;
    let md = targets.iter().fold(Vector3::zeros(), |a, x| a + x) / nf;
    let (_, es) = spread(centers);
    let (_, ed) = spread(targets);
    let us: Vector3<f64> = es.column(2).into();
    let mut ud: Vector3<f64> = ed.column(2).into();
    let ps: Vec<f64> = centers.iter().map(|c| (c - ms).dot(&us)).collect();
    let mut pd: Vec<f64> = targets.iter().map(|c| (c - md).dot(&ud)).collect();
    let corr: f64 = ps.iter().zip(&pd).map(|(a, b)| a * b).sum();
    if corr < 0.0 {
        ud = -ud;
        pd.iter_mut().for_each(|v| *v = -*v);
    }
    let ss: f64 = ps.iter().map(|a| a * a).sum();
    let scale = ps.iter().zip(&pd).map(|(a, b)| a * b).sum::<f64>() / ss;
    if !(ss > 1e-18) || !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let r1 = rotation_between(&us, &ud);
    let axis = axes.iter().fold(Vector3::zeros(), |a, x| a + x.normalize());
    let a = r1 * axis;
    let down = -Vector3::z();
    let a_perp = a - ud * a.dot(&ud);
    let d_perp = down - ud * down.dot(&ud);
    let roll = if a_perp.norm() > 1e-12 && d_perp.norm() > 1e-12 {
        ud.dot(&a_perp.cross(&d_perp)).atan2(a_perp.dot(&d_perp))
    } else {
        0.0
    };
    let rotation = so3_exp(&(ud * roll)) * r1;
    let translation = md - rotation * ms * scale;
    Some(Similarity { scale, rotation, translation, singular_values: Vector3::zeros() })
}

/// Minimal rotation taking unit vector `a` to unit vector `b`.
fn rotation_between(a: &Vector3<f64>, b: &Vector3<f64>) -> Matrix3<f64> {
    let axis = a.cross(b);
    let s = axis.norm();
    let c = a.dot(b);
    if s < 1e-15 {
        if c > 0.0 {
            return Matrix3::identity();
        }
        // Half turn about any axis perpendicular to a.
        let p = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let k = a.cross(&p).normalize();
        return so3_exp(&(k * std::f64::consts::PI));
    }
    so3_exp(&(axis / s * s.atan2(c)))
}

/// Re-expresses a world-to-camera pose given in the LTP frame anchored at
/// `from` in the frame anchored at `to`.
pub fn change_pose_origin(pose: &Pose6Dof, from: &GeoPoint, to: &GeoPoint) -> Result<Pose6Dof> {
    let c = change_origin(&LtpPoint::from_vec(&pose.center()), from, to)?;
    let r = ecef_to_enu_rotation(to) * ecef_to_enu_rotation(from).transpose();
    Ok(Pose6Dof::from_center(pose.rotation * r.transpose(), &c.vec()))
}

/// Expresses every partial in the LTP frame of the first one by mapping
/// poses and points through WGS-84.
pub fn register_partials(partials: Vec<Reconstruction>) -> Result<Vec<Reconstruction>> {
    let Some(first) = partials.first() else { return Ok(partials) };
    let target = first.origin;
    let mut out = Vec::with_capacity(partials.len());
    for (i, mut p) in partials.into_iter().enumerate() {
        if i == 0 || p.origin == target {
            out.push(p);
            continue;
        }
        let mut poses = BTreeMap::new();
        for (&f, pose) in &p.poses {
            poses.insert(f, change_pose_origin(pose, &p.origin, &target)?);
        }
        for sp in &mut p.points {
            sp.position = change_origin(&LtpPoint::from_vec(&Vector3::from(sp.position)), &p.origin, &target)?.vec().into();
        }
        p.poses = poses;
        p.origin = target;
        out.push(p);
    }
    Ok(out)
}

/// Incremental reconstruction of one set of keyframes.
struct Builder<'a> {
    frames: Vec<u32>,
    gps: Vec<Vector3<f64>>,
    tracks: &'a [FeatureTrack],
    /// Per keyframe: (track index, pixel).
    frame_obs: Vec<Vec<(usize, Vector2<f64>)>>,
    /// Per track: (keyframe index, pixel).
    track_obs: Vec<Vec<(usize, Vector2<f64>)>>,
    intr: CameraIntrinsics,
    calibration: CameraIntrinsics,
    poses: Vec<Option<Pose6Dof>>,
    points: Vec<Option<PointState>>,
    track_point: Vec<Option<usize>>,
    corr: Vec<usize>,
    aligned: bool,
    params: SfmParams,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
struct PointState {
    x: Vector3<f64>,
    track: usize,
    /// Keyframe indices.
    obs: Vec<usize>,
}

impl<'a> Builder<'a> {
    fn new(kfs: &[Keyframe], gps: Vec<Vector3<f64>>, tracks: &'a [FeatureTrack], intr: CameraIntrinsics, params: SfmParams, seed: u64) -> Self {
        let frames: Vec<u32> = kfs.iter().map(|k| k.frame).collect();
        let index: HashMap<u32, usize> = frames.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        let mut frame_obs = vec![Vec::new(); frames.len()];
        let mut track_obs = vec![Vec::new(); tracks.len()];
        for (ti, t) in tracks.iter().enumerate() {
            for (f, px) in &t.observations {
                if let Some(&k) = index.get(f) {
                    frame_obs[k].push((ti, *px));
                    track_obs[ti].push((k, *px));
                }
            }
        }
        let n = frames.len();
        Builder {
            frames,
            gps,
            tracks,
            frame_obs,
            track_obs,
            intr,
            calibration: intr,
            poses: vec![None; n],
            points: Vec::new(),
            track_point: vec![None; tracks.len()],
            corr: vec![0; n],
            aligned: false,
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn add_point(&mut self, track: usize, x: Vector3<f64>, obs: Vec<usize>) {
        let id = self.points.len();
        self.points.push(Some(PointState { x, track, obs }));
        self.track_point[track] = Some(id);
        for &(k, _) in &self.track_obs[track] {
            self.corr[k] += 1;
        }
    }

    fn remove_point(&mut self, id: usize) {
        if let Some(p) = self.points[id].take() {
            self.track_point[p.track] = None;
            for &(k, _) in &self.track_obs[p.track] {
                self.corr[k] -= 1;
            }
        }
    }

    fn pixel(&self, track: usize, kf: usize) -> Vector2<f64> {
        self.tracks[track].observations[&self.frames[kf]]
    }

    /// Tries the candidate pairs in order of shared tracks.
    fn initialize(&mut self, kfs: &[Keyframe]) -> Result<()> {
        let pairs = match_candidate_pairs(kfs, self.params.pair_radius_m);
        let mut scored: Vec<(usize, usize, usize)> = pairs
            .into_iter()
            .map(|(a, b)| (shared_tracks(&self.frame_obs[a], &self.frame_obs[b]).len(), a, b))
            .filter(|&(s, _, _)| s >= self.params.min_init_tracks)
            .collect();
        scored.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let focal = self.intr.fx;
        let mut last_err = Error::ReconstructionFailed("no keyframe pair shares enough tracks".into());
        for &(_, a, b) in scored.iter().take(self.params.max_init_attempts) {
            let shared = shared_tracks(&self.frame_obs[a], &self.frame_obs[b]);
            let mut x1 = Vec::new();
            let mut x2 = Vec::new();
            let mut ids = Vec::new();
            for (t, pa, pb) in shared {
                if let (Ok(na), Ok(nb)) = (undistort(&pa, &self.intr), undistort(&pb, &self.intr)) {
                    x1.push(na);
                    x2.push(nb);
                    ids.push(t);
                }
            }
            match twoview::init_two_view(&x1, &x2, focal, &self.params.ransac, self.params.min_ray_angle, self.params.max_reproj_px, &mut self.rng) {
                Ok(tv) => {
                    debug!("initialized from keyframes {} and {}", self.frames[a], self.frames[b]);
                    self.poses[a] = Some(Pose6Dof::identity());
                    self.poses[b] = Some(tv.pose);
                    for (i, p) in tv.points.iter().enumerate() {
                        if let Some(x) = p {
                            self.add_point(ids[i], *x, vec![a, b]);
                        }
                    }
                    return Ok(());
                }
                Err(e) => {
                    debug!("pair {}-{} rejected: {e}", self.frames[a], self.frames[b]);
                    last_err = e;
                }
            }
        }
        Err(Error::ReconstructionFailed(format!("no valid initial pair ({last_err})")))
    }

    /// Resects keyframe `k`.
    fn register(&mut self, k: usize) -> Result<Pose6Dof> {
        let mut world = Vec::new();
        let mut pixels = Vec::new();
        let mut norm = Vec::new();
        for &(t, px) in &self.frame_obs[k] {
            if let Some(pid) = self.track_point[t] {
                if let Ok(n) = undistort(&px, &self.intr) {
                    world.push(self.points[pid].as_ref().expect("live point").x);
                    pixels.push(px);
                    norm.push(n);
                }
            }
        }
        // Nearest registered keyframe in time as a starting guess.
        let guess = self
            .poses
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (self.frames[i].abs_diff(self.frames[k]), p)))
            .min_by_key(|(d, _)| *d)
            .map(|(_, p)| p);
        let params = RansacParams { threshold: self.params.max_reproj_px, ..self.params.ransac };
        pnp::register_pnp(&world, &pixels, &norm, &self.intr, guess.as_ref(), &params, self.params.min_pnp_inliers, &mut self.rng)
            .map(|r| r.pose)
            .map_err(|e| Error::RegistrationFailed { frame: self.frames[k], reason: e.to_string() })
    }

    /// Extends existing points with the observations of keyframe `k` and
    /// triangulates tracks that became triangulable.
    fn triangulate_new(&mut self, k: usize) {
        let pose = self.poses[k].expect("registered");
        let obs = self.frame_obs[k].clone();
        for (t, px) in obs {
            match self.track_point[t] {
                Some(pid) => {
                    let x = self.points[pid].as_ref().expect("live point").x;
                    let ok = crate::camera::project(&x, &pose, &self.intr).is_some_and(|p| (p - px).norm() <= self.params.max_reproj_px);
                    if ok {
                        let p = self.points[pid].as_mut().expect("live point");
                        if !p.obs.contains(&k) {
                            p.obs.push(k);
                        }
                    }
                }
                None => {
                    let regs: Vec<usize> = self.track_obs[t].iter().map(|&(kk, _)| kk).filter(|&kk| self.poses[kk].is_some()).collect();
                    if regs.len() < 2 {
                        continue;
                    }
                    let views: Vec<View> = regs
                        .iter()
                        .map(|&kk| View { pose: self.poses[kk].as_ref().expect("registered"), intrinsics: &self.intr, pixel: self.pixel(t, kk) })
                        .collect();
                    if let Ok(x) = triangulate_scene_point(&views, self.params.min_ray_angle, self.params.max_reproj_px) {
                        self.add_point(t, x, regs);
                    }
                }
            }
        }
    }

    fn apply_similarity(&mut self, s: &Similarity) {
        for p in self.poses.iter_mut().flatten() {
            *p = s.apply_pose(p).orthonormalized();
        }
        for p in self.points.iter_mut().flatten() {
            p.x = s.apply(&p.x);
        }
    }

    fn align(&mut self) {
        let regs: Vec<usize> = (0..self.poses.len()).filter(|&i| self.poses[i].is_some()).collect();
        let centers: Vec<Vector3<f64>> = regs.iter().map(|&i| self.poses[i].expect("registered").center()).collect();
        let targets: Vec<Vector3<f64>> = regs.iter().map(|&i| self.gps[i]).collect();
        let sim = align_to_gps(&centers, &targets, self.params.align_min_lateral_m).or_else(|| {
            let axes: Vec<Vector3<f64>> = regs.iter().map(|&i| self.poses[i].expect("registered").rotation.row(2).transpose()).collect();
            align_line_nadir(&centers, &targets, &axes)
        });
        if let Some(s) = sim {
            self.apply_similarity(&s);
            self.aligned = true;
        }
    }

    fn bundle_adjust(&mut self) -> Result<()> {
        let regs: Vec<usize> = (0..self.poses.len()).filter(|&i| self.poses[i].is_some()).collect();
        let cam_of: HashMap<usize, usize> = regs.iter().enumerate().map(|(ci, &k)| (k, ci)).collect();
        let live: Vec<usize> = (0..self.points.len()).filter(|&i| self.points[i].is_some()).collect();
        let mut cameras: Vec<BaCamera> = regs
            .iter()
            .map(|&k| {
                let p = self.poses[k].expect("registered");
                BaCamera { rotation: p.rotation, center: p.center(), fixed: false }
            })
            .collect();
        if !self.aligned {
            cameras[0].fixed = true;
        }
        let mut observations = Vec::new();
        let mut obs_ref = Vec::new();
        for (pi, &id) in live.iter().enumerate() {
            let p = self.points[id].as_ref().expect("live point");
            for &k in &p.obs {
                observations.push(BaObservation { camera: cam_of[&k], point: pi, pixel: self.pixel(p.track, k) });
                obs_ref.push((id, k));
            }
        }
        let priors = if self.aligned {
            regs.iter().enumerate().map(|(ci, &k)| BaPrior { camera: ci, target: self.gps[k] }).collect()
        } else {
            Vec::new()
        };
        let mut problem = BaProblem {
            cameras,
            points: live.iter().map(|&id| self.points[id].as_ref().expect("live point").x).collect(),
            observations,
            priors,
            prior_sigma: self.params.gps_sigma_m,
            intrinsics: self.intr,
            refine_intrinsics: self.params.refine_intrinsics && self.aligned,
            intrinsics_prior: Some(IntrinsicsPrior {
                target: self.calibration,
                sigma: Vector3::new(
                    self.params.focal_prior_sigma * self.calibration.fx,
                    self.params.distortion_prior_sigma,
                    self.params.distortion_prior_sigma,
                ),
            }),
        };
        let report = bundle_adjust(&mut problem, &self.params.ba)?;
        debug!(
            "BA over {} cameras, {} points: cost {:.3e} -> {:.3e} in {} steps",
            regs.len(),
            live.len(),
            report.initial_cost,
            report.final_cost,
            report.accepted_steps
        );
        for (ci, &k) in regs.iter().enumerate() {
            let c = &problem.cameras[ci];
            self.poses[k] = Some(Pose6Dof::from_center(c.rotation, &c.center).orthonormalized());
        }
        for (pi, &id) in live.iter().enumerate() {
            self.points[id].as_mut().expect("live point").x = problem.points[pi];
        }
        self.intr = problem.intrinsics;

        // Drop observations that no longer fit, then points left with < 2.
        let errors = problem.reprojection_errors();
        let mut bad: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (e, &(id, k)) in errors.iter().zip(&obs_ref) {
            if !(*e <= self.params.max_reproj_px) {
                bad.entry(id).or_default().push(k);
            }
        }
        for (id, ks) in bad {
            let p = self.points[id].as_mut().expect("live point");
            p.obs.retain(|k| !ks.contains(k));
            if p.obs.len() < 2 {
                self.remove_point(id);
            }
        }
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        self.align();
        let mut failed_at: Vec<Option<usize>> = vec![None; self.frames.len()];
        let mut since_ba = 0;
        loop {
            let next = (0..self.frames.len())
                .filter(|&k| self.poses[k].is_none() && self.corr[k] >= 4)
                .filter(|&k| failed_at[k].is_none_or(|c| self.corr[k] > c))
                .max_by(|&a, &b| self.corr[a].cmp(&self.corr[b]).then(b.cmp(&a)));
            let Some(k) = next else { break };
            match self.register(k) {
                Ok(pose) => {
                    self.poses[k] = Some(pose);
                    self.triangulate_new(k);
                    since_ba += 1;
                    if since_ba >= self.params.ba_interval {
                        self.align();
                        self.bundle_adjust()?;
                        since_ba = 0;
                    }
                }
                Err(e) => {
                    debug!("{e}");
                    failed_at[k] = Some(self.corr[k]);
                }
            }
        }
        self.align();
        if !self.aligned {
            let n = self.poses.iter().flatten().count();
            warn!("GPS alignment skipped for a reconstruction of {n} keyframes: too few frames or a degenerate trajectory");
        }
        self.bundle_adjust()?;
        Ok(())
    }

    fn finish(&self, origin: GeoPoint) -> Reconstruction {
        let poses = (0..self.frames.len()).filter_map(|k| self.poses[k].map(|p| (self.frames[k], p))).collect();
        let points = self
            .points
            .iter()
            .flatten()
            .map(|p| {
                let mut obs: Vec<(u32, [f64; 2])> = p.obs.iter().map(|&k| (self.frames[k], self.pixel(p.track, k).into())).collect();
                obs.sort_by_key(|o| o.0);
                ScenePoint { key: self.tracks[p.track].key, position: p.x.into(), observations: obs }
            })
            .collect();
        Reconstruction { poses, points, origin, intrinsics: self.intr }
    }
}

fn shared_tracks(a: &[(usize, Vector2<f64>)], b: &[(usize, Vector2<f64>)]) -> Vec<(usize, Vector2<f64>, Vector2<f64>)> {
    // Both lists are in track order because tracks were scanned in order.
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push((a[i].0, a[i].1, b[j].1));
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Full reconstruction. `keyframes` carry GPS positions in the LTP frame of
/// `origin`; the up component of the GPS is replaced by 0 in the alignment
/// targets and priors. Returns the partial reconstructions expressed in the
/// frame of `origin`.
pub fn reconstruct(
    keyframes: &[Keyframe],
    tracks: &[FeatureTrack],
    intrinsics: &CameraIntrinsics,
    origin: &GeoPoint,
    params: &SfmParams,
) -> Result<Vec<Reconstruction>> {
    let mut remaining: Vec<Keyframe> = keyframes.to_vec();
    remaining.sort_by_key(|k| k.frame);
    let mut partials = Vec::new();
    while remaining.len() >= 2 {
        let idx = partials.len();
        let part_origin = if idx == 0 {
            *origin
        } else {
            let g = remaining[0].gps;
            ltp_to_wgs84(&LtpPoint::new(g.east, g.north, 0.0), origin)
        };
        let mut local = Vec::with_capacity(remaining.len());
        for k in &remaining {
            let g = if idx == 0 { k.gps } else { wgs84_to_ltp(&ltp_to_wgs84(&k.gps, origin), &part_origin)? };
            local.push(Keyframe { frame: k.frame, gps: g });
        }
        let gps: Vec<Vector3<f64>> = local.iter().map(|k| Vector3::new(k.gps.east, k.gps.north, 0.0)).collect();
        let mut b = Builder::new(&local, gps, tracks, *intrinsics, *params, params.seed ^ idx as u64);
        if let Err(e) = b.initialize(&local) {
            if idx == 0 {
                return Err(e);
            }
            debug!("no further partial reconstruction: {e}");
            break;
        }
        b.run()?;
        let rec = b.finish(part_origin);
        info!("partial {} with {} keyframes and {} points", idx + 1, rec.poses.len(), rec.points.len());
        remaining.retain(|k| !rec.poses.contains_key(&k.frame));
        partials.push(rec);
    }
    if !remaining.is_empty() {
        warn!("{} keyframes left unregistered", remaining.len());
    }
    register_partials(partials)
}
