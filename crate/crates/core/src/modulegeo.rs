//! Module geometry: triangulation of tracked modules from keyframe pairs,
//! median fusion, duplicate merging, robust graph refinement and GeoJSON
//! export.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::camera::{distort, project, ray_angle, undistort, CameraIntrinsics, Pose6Dof};
use crate::geodesy::{ltp_to_wgs84, GeoPoint, LtpPoint};
use crate::geometry::{median_in_place, signed_area, triangulate};
use crate::tracking::{ModuleTrack, Observation};
use crate::{Error, Result};

/// A triangulated module: corners TL, TR, BR, BL and the center.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleGeometry {
    /// Tracks fused into this module; more than one after merging.
    pub track_ids: Vec<String>,
    /// Upstream identities of the detections.
    pub source_ids: BTreeSet<String>,
    pub points: [Vector3<f64>; 5],
    /// Keyframe pairs whose candidates entered the fusion.
    pub contributing_pairs: Vec<(u32, u32)>,
    /// Observations of all fused tracks.
    pub observations: BTreeMap<u32, Observation>,
}

impl ModuleGeometry {
    pub fn ltp(&self) -> [LtpPoint; 5] {
        self.points.map(|p| LtpPoint::from_vec(&p))
    }

    pub fn geo(&self, origin: &GeoPoint) -> [GeoPoint; 5] {
        self.points.map(|p| ltp_to_wgs84(&LtpPoint::from_vec(&p), origin))
    }

    /// Whether the center lies inside the corner quad in plan view.
    pub fn center_inside(&self) -> bool {
        let q: Vec<Vector2<f64>> = self.points[..4].iter().map(|p| p.xy()).collect();
        let c = self.points[4].xy();
        let s = signed_area(&q).signum();
        (0..4).all(|i| {
            let (a, b) = (q[i], q[(i + 1) % 4]);
            let cross = (b - a).perp(&(c - a));
            cross * s >= -1e-12
        })
    }
}

/// How candidate points from keyframe pairs are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    /// Coordinate-wise median.
    #[default]
    Median,
    /// Coordinate-wise mean; only useful as a baseline for comparisons.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriParams {
    /// Radians.
    pub min_angle: f64,
    pub max_reproj_px: f64,
    pub fusion: Fusion,
}

impl Default for TriParams {
    fn default() -> Self {
        TriParams { min_angle: 1f64.to_radians(), max_reproj_px: 5.0, fusion: Fusion::Median }
    }
}

/// Failure modes of module extraction: missing module, unmerged duplicate,
/// duplicate sources and false positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureMode {
    MM,
    DP,
    DS,
    FP,
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureMode::MM => "MM",
            FailureMode::DP => "DP",
            FailureMode::DS => "DS",
            FailureMode::FP => "FP",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Failure {
    pub track_id: String,
    pub mode: FailureMode,
}

/// Candidate 5-point sets from every keyframe pair that passes the angle and
/// reprojection tests, with the pair.
pub fn pair_candidates(
    observations: &BTreeMap<u32, Observation>,
    poses: &BTreeMap<u32, Pose6Dof>,
    intr: &CameraIntrinsics,
    params: &TriParams,
) -> Result<Vec<((u32, u32), [Vector3<f64>; 5])>> {
    let mut views = Vec::new();
    for (f, o) in observations {
        if let Some(pose) = poses.get(f) {
            let px = o.points();
            let mut norm = [Vector2::zeros(); 5];
            for (n, p) in norm.iter_mut().zip(&px) {
                *n = undistort(p, intr)?;
            }
            views.push((*f, pose, px, norm));
        }
    }
    if views.len() < 2 {
        return Err(Error::InsufficientData(format!("observed in {} keyframe(s), need 2", views.len())));
    }
    let mut out = Vec::new();
    for i in 0..views.len() {
        'pair: for j in i + 1..views.len() {
            let (fa, pa, pxa, na) = &views[i];
            let (fb, pb, pxb, nb) = &views[j];
            let (ca, cb) = (pa.center(), pb.center());
            let mut pts = [Vector3::zeros(); 5];
            for k in 0..5 {
                let Some(x) = triangulate(&[(*pa, na[k]), (*pb, nb[k])]) else { continue 'pair };
                if !(ray_angle(&(x - ca), &(x - cb)) > params.min_angle) {
                    continue 'pair;
                }
                for (pose, px) in [(pa, pxa[k]), (pb, pxb[k])] {
                    let e = project(&x, pose, intr).map_or(f64::INFINITY, |q| (q - px).norm());
                    if !(e <= params.max_reproj_px) {
                        continue 'pair;
                    }
                }
                pts[k] = x;
            }
            out.push(((*fa, *fb), pts));
        }
    }
    Ok(out)
}

/// Fuses candidates point by point and coordinate by coordinate.
pub fn fuse_candidates(candidates: &[[Vector3<f64>; 5]], fusion: Fusion) -> Option<[Vector3<f64>; 5]> {
    if candidates.is_empty() {
        return None;
    }
    let mut out = [Vector3::zeros(); 5];
    let mut buf = Vec::with_capacity(candidates.len());
    for (k, o) in out.iter_mut().enumerate() {
        for d in 0..3 {
            buf.clear();
            buf.extend(candidates.iter().map(|c| c[k][d]));
            o[d] = match fusion {
                Fusion::Median => median_in_place(&mut buf)?,
                Fusion::Mean => buf.iter().sum::<f64>() / buf.len() as f64,
            };
        }
    }
    Some(out)
}

/// Triangulates one module from its observations in posed keyframes.
pub fn triangulate_observations(
    observations: &BTreeMap<u32, Observation>,
    poses: &BTreeMap<u32, Pose6Dof>,
    intr: &CameraIntrinsics,
    params: &TriParams,
) -> Result<([Vector3<f64>; 5], Vec<(u32, u32)>)> {
    let cands = pair_candidates(observations, poses, intr, params)?;
    let pts: Vec<_> = cands.iter().map(|c| c.1).collect();
    let fused = fuse_candidates(&pts, params.fusion)
        .ok_or_else(|| Error::Validation("no keyframe pair passed the angle and reprojection tests".into()))?;
    Ok((fused, cands.into_iter().map(|c| c.0).collect()))
}

pub fn triangulate_module(
    track: &ModuleTrack,
    poses: &BTreeMap<u32, Pose6Dof>,
    intr: &CameraIntrinsics,
    params: &TriParams,
) -> Result<ModuleGeometry> {
    let (points, pairs) = triangulate_observations(&track.observations, poses, intr, params)?;
    Ok(ModuleGeometry {
        track_ids: vec![track.track_id.clone()],
        source_ids: track.source_ids.clone(),
        points,
        contributing_pairs: pairs,
        observations: track.observations.clone(),
    })
}

/// Triangulates every track in parallel; rejected tracks become `MM`
/// failures. Output order follows the input.
pub fn triangulate_all(
    tracks: &[ModuleTrack],
    poses: &BTreeMap<u32, Pose6Dof>,
    intr: &CameraIntrinsics,
    params: &TriParams,
) -> (Vec<ModuleGeometry>, Vec<Failure>) {
    let results: Vec<_> = tracks.par_iter().map(|t| triangulate_module(t, poses, intr, params)).collect();
    let mut modules = Vec::new();
    let mut failures = Vec::new();
    for (t, r) in tracks.iter().zip(results) {
        match r {
            Ok(m) => modules.push(m),
            Err(e) => {
                debug!("track {} rejected: {e}", t.track_id);
                failures.push(Failure { track_id: t.track_id.clone(), mode: FailureMode::MM });
            }
        }
    }
    (modules, failures)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }

    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut i = i;
        while self.0[i] != r {
            let next = self.0[i];
            self.0[i] = r;
            i = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so groups are labelled deterministically.
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Projection of a module used for overlap tests. Modules with a point
/// behind the camera or far outside the image are skipped. The test runs on
/// the undistorted projection: far beyond the image the radial polynomial
/// folds back and would place distant modules on top of each other.
fn projected(m: &ModuleGeometry, pose: &Pose6Dof, intr: &CameraIntrinsics) -> Option<[Vector2<f64>; 5]> {
    let (w, h) = (intr.width as f64, intr.height as f64);
    let mut out = [Vector2::zeros(); 5];
    for (o, x) in out.iter_mut().zip(&m.points) {
        let xc = pose.transform(x);
        if xc.z <= 0.0 {
            return None;
        }
        let n = Vector2::new(xc.x / xc.z, xc.y / xc.z);
        let p = intr.to_pixel(&n);
        if p.x < -0.5 * w || p.x > 1.5 * w || p.y < -0.5 * h || p.y > 1.5 * h {
            return None;
        }
        *o = intr.to_pixel(&distort(&n, intr));
    }
    Some(out)
}

fn mean_distance(a: &[Vector2<f64>; 5], b: &[Vector2<f64>; 5]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / 5.0
}

/// Pairs of modules whose projections in some keyframe lie closer than
/// `max_mean_px` on average over the five points.
pub fn overlapping_pairs(
    modules: &[ModuleGeometry],
    poses: &BTreeMap<u32, Pose6Dof>,
    intr: &CameraIntrinsics,
    max_mean_px: f64,
) -> BTreeSet<(usize, usize)> {
    // A mean distance below d implies a center distance below 5 d.
    let cell = 5.0 * max_mean_px;
    let per_frame: Vec<Vec<(usize, usize)>> = poses
        .par_iter()
        .map(|(_, pose)| {
            let proj: Vec<(usize, [Vector2<f64>; 5])> =
                modules.iter().enumerate().filter_map(|(i, m)| projected(m, pose, intr).map(|p| (i, p))).collect();
            let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
            for (k, (_, p)) in proj.iter().enumerate() {
                grid.entry(((p[4].x / cell).floor() as i64, (p[4].y / cell).floor() as i64)).or_default().push(k);
            }
            let mut out = Vec::new();
            for (k, (i, p)) in proj.iter().enumerate() {
                let (gx, gy) = ((p[4].x / cell).floor() as i64, (p[4].y / cell).floor() as i64);
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for &l in grid.get(&(gx + dx, gy + dy)).into_iter().flatten() {
                            let (j, q) = &proj[l];
                            if l > k && mean_distance(p, q) < max_mean_px {
                                out.push((*i.min(j), *i.max(j)));
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    per_frame.into_iter().flatten().collect()
}

/// Result of duplicate merging.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub modules: Vec<ModuleGeometry>,
    /// Number of groups fused into one module.
    pub merged_groups: usize,
    /// Tracks of groups whose joint re-triangulation failed.
    pub failures: Vec<Failure>,
}

/// Groups modules whose projections overlap in any keyframe (transitive
/// closure) and re-triangulates each group from the union of its
/// observations. A merged module takes the place of the group's first
/// member; groups that fail to re-triangulate are kept and flagged `DP`.
pub fn merge_duplicates(
    modules: &[ModuleGeometry],
    poses: &BTreeMap<u32, Pose6Dof>,
    intr: &CameraIntrinsics,
    max_mean_px: f64,
    params: &TriParams,
) -> MergeOutcome {
    let pairs = overlapping_pairs(modules, poses, intr, max_mean_px);
    let mut uf = UnionFind::new(modules.len());
    for &(a, b) in &pairs {
        uf.union(a, b);
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..modules.len() {
        let r = uf.find(i);
        groups.entry(r).or_default().push(i);
    }
    let multi: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() > 1).collect();
    let fused: Vec<Option<ModuleGeometry>> = multi
        .par_iter()
        .map(|g| {
            let mut obs = BTreeMap::new();
            let mut track_ids = Vec::new();
            let mut source_ids = BTreeSet::new();
            for &i in g.iter() {
                for (f, o) in &modules[i].observations {
                    obs.entry(*f).or_insert(*o);
                }
                track_ids.extend(modules[i].track_ids.iter().cloned());
                source_ids.extend(modules[i].source_ids.iter().cloned());
            }
            match triangulate_observations(&obs, poses, intr, params) {
                Ok((points, pairs)) => {
                    Some(ModuleGeometry { track_ids, source_ids, points, contributing_pairs: pairs, observations: obs })
                }
                Err(e) => {
                    warn!("duplicate group {track_ids:?} could not be re-triangulated: {e}");
                    None
                }
            }
        })
        .collect();
    let mut replacement: BTreeMap<usize, Option<ModuleGeometry>> = BTreeMap::new();
    let mut absorbed = BTreeSet::new();
    let mut failures = Vec::new();
    let mut merged_groups = 0;
    for (g, f) in multi.iter().zip(fused) {
        match f {
            Some(m) => {
                merged_groups += 1;
                replacement.insert(g[0], Some(m));
                absorbed.extend(g[1..].iter().copied());
            }
            None => {
                for &i in g.iter() {
                    for t in &modules[i].track_ids {
                        failures.push(Failure { track_id: t.clone(), mode: FailureMode::DP });
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(modules.len());
    for (i, m) in modules.iter().enumerate() {
        if absorbed.contains(&i) {
            continue;
        }
        match replacement.remove(&i) {
            Some(Some(r)) => out.push(r),
            _ => out.push(m.clone()),
        }
    }
    MergeOutcome { modules: out, merged_groups, failures }
}

/// Robust loss applied to squared edge lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    Quadratic,
    /// Quadratic up to `delta` meters, linear beyond.
    Huber { delta: f64 },
}

impl Loss {
    /// Loss of a squared residual `s` and its derivative with respect to `s`.
    pub fn eval(&self, s: f64) -> (f64, f64) {
        match *self {
            Loss::Quadratic => (s, 1.0),
            Loss::Huber { delta } => {
                if s <= delta * delta {
                    (s, 1.0)
                } else {
                    let r = s.sqrt();
                    (2.0 * delta * r - delta * delta, delta / r)
                }
            }
        }
    }
}

/// Proximity graph over all module points. Vertex `5 m + k` is point `k` of
/// module `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementGraph {
    pub vertices: Vec<Vector3<f64>>,
    /// Undirected edges `(i, j)` with `i < j`.
    pub edges: Vec<(usize, usize)>,
}

/// Connects points of different modules that lie within `d_max_m` of each
/// other and project within `d_max_px` of each other in at least one
/// keyframe observing both modules.
pub fn build_graph(
    modules: &[ModuleGeometry],
    poses: &BTreeMap<u32, Pose6Dof>,
    intr: &CameraIntrinsics,
    d_max_m: f64,
    d_max_px: f64,
) -> RefinementGraph {
    let vertices: Vec<Vector3<f64>> = modules.iter().flat_map(|m| m.points).collect();
    let key = |p: &Vector3<f64>| ((p.x / d_max_m).floor() as i64, (p.y / d_max_m).floor() as i64, (p.z / d_max_m).floor() as i64);
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in vertices.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let frames: Vec<BTreeSet<u32>> =
        modules.iter().map(|m| m.observations.keys().copied().filter(|f| poses.contains_key(f)).collect()).collect();
    let edges: Vec<Vec<(usize, usize)>> = (0..vertices.len())
        .into_par_iter()
        .map(|i| {
            let p = vertices[i];
            let (gx, gy, gz) = key(&p);
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        for &j in grid.get(&(gx + dx, gy + dy, gz + dz)).into_iter().flatten() {
                            let (mi, mj) = (i / 5, j / 5);
                            if j <= i || mi == mj || (vertices[j] - p).norm() > d_max_m {
                                continue;
                            }
                            let close_in_image = frames[mi].intersection(&frames[mj]).any(|f| {
                                let pose = &poses[f];
                                match (project(&p, pose, intr), project(&vertices[j], pose, intr)) {
                                    (Some(a), Some(b)) => (a - b).norm() <= d_max_px,
                                    _ => false,
                                }
                            });
                            if close_in_image {
                                out.push((i, j));
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    let mut edges: Vec<(usize, usize)> = edges.into_iter().flatten().collect();
    edges.sort_unstable();
    RefinementGraph { vertices, edges }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub edges: usize,
    /// Total cost after every accepted step of every component, in the order
    /// the components were solved.
    pub cost_history: Vec<f64>,
}

/// Objective over a set of vertices: robust edge terms plus an anchor
/// `weight * |x - x0|^2` per vertex.
fn graph_cost(x: &[Vector3<f64>], x0: &[Vector3<f64>], edges: &[(usize, usize)], loss: Loss, weight: f64) -> f64 {
    let e: f64 = edges.iter().map(|&(i, j)| loss.eval((x[i] - x[j]).norm_squared()).0).sum();
    let a: f64 = x.iter().zip(x0).map(|(p, q)| (p - q).norm_squared()).sum();
    e + weight * a
}

/// Levenberg-Marquardt with iteratively reweighted normal equations on one
/// connected component. Returns the accepted cost after every step.
fn solve_component(
    x: &mut [Vector3<f64>],
    x0: &[Vector3<f64>],
    edges: &[(usize, usize)],
    loss: Loss,
    weight: f64,
) -> Result<Vec<f64>> {
    let n = x.len();
    let mut cost = graph_cost(x, x0, edges, loss, weight);
    if !cost.is_finite() {
        return Err(Error::Numeric("non-finite refinement cost".into()));
    }
    let mut history = Vec::new();
    let mut lambda = 1e-4;
    for _ in 0..100 {
        let mut h = DMatrix::<f64>::zeros(3 * n, 3 * n);
        let mut g = DVector::<f64>::zeros(3 * n);
        for &(i, j) in edges {
            let e = x[i] - x[j];
            let w = loss.eval(e.norm_squared()).1;
            for d in 0..3 {
                let (a, b) = (3 * i + d, 3 * j + d);
                h[(a, a)] += w;
                h[(b, b)] += w;
                h[(a, b)] -= w;
                h[(b, a)] -= w;
                g[a] += w * e[d];
                g[b] -= w * e[d];
            }
        }
        for i in 0..n {
            let e = x[i] - x0[i];
            for d in 0..3 {
                h[(3 * i + d, 3 * i + d)] += weight;
                g[3 * i + d] += weight * e[d];
            }
        }
        if g.amax() < 1e-15 {
            break;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = h.clone();
            for k in 0..3 * n {
                damped[(k, k)] += lambda * h[(k, k)] + 1e-12;
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let trial: Vec<Vector3<f64>> =
                (0..n).map(|i| x[i] + Vector3::new(step[3 * i], step[3 * i + 1], step[3 * i + 2])).collect();
            let c = graph_cost(&trial, x0, edges, loss, weight);
            if c.is_finite() && c < cost {
                x.copy_from_slice(&trial);
                let rel = (cost - c) / cost.max(1e-300);
                cost = c;
                history.push(c);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = rel > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(history)
}

/// Minimizes the robust graph objective. Vertices without edges never move.
/// Components are solved independently, which is exact because the
/// objective separates over them.
pub fn optimize_graph(
    graph: &RefinementGraph,
    anchors: &[Vector3<f64>],
    loss: Loss,
    anchor_weight: f64,
) -> Result<(Vec<Vector3<f64>>, RefineReport)> {
    let n = graph.vertices.len();
    let mut uf = UnionFind::new(n);
    for &(i, j) in &graph.edges {
        uf.union(i, j);
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(i, j) in &graph.edges {
        let r = uf.find(i);
        comps.entry(r).or_default().extend([i, j]);
    }
    let mut comp_edges: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for &(i, j) in &graph.edges {
        let r = uf.find(i);
        comp_edges.entry(r).or_default().push((i, j));
    }
    let work: Vec<(Vec<usize>, Vec<(usize, usize)>)> = comps
        .into_iter()
        .map(|(r, mut vs)| {
            vs.sort_unstable();
            vs.dedup();
            let local: HashMap<usize, usize> = vs.iter().enumerate().map(|(k, &v)| (v, k)).collect();
            let es = comp_edges[&r].iter().map(|(i, j)| (local[i], local[j])).collect();
            (vs, es)
        })
        .collect();
    let initial: Vec<f64> = work
        .iter()
        .map(|(vs, es)| {
            let x: Vec<_> = vs.iter().map(|&v| graph.vertices[v]).collect();
            let x0: Vec<_> = vs.iter().map(|&v| anchors[v]).collect();
            graph_cost(&x, &x0, es, loss, anchor_weight)
        })
        .collect();
    let solved: Vec<Result<(Vec<Vector3<f64>>, Vec<f64>)>> = work
        .par_iter()
        .map(|(vs, es)| {
            let mut x: Vec<_> = vs.iter().map(|&v| graph.vertices[v]).collect();
            let x0: Vec<_> = vs.iter().map(|&v| anchors[v]).collect();
            let h = solve_component(&mut x, &x0, es, loss, anchor_weight)?;
            Ok((x, h))
        })
        .collect();
    let mut out = graph.vertices.clone();
    let mut running: f64 = initial.iter().sum();
    let initial_cost = running;
    let mut history = Vec::new();
    for (((vs, _), r), c0) in work.iter().zip(solved).zip(&initial) {
        let (x, h) = r?;
        let mut prev = *c0;
        for c in h {
            running += c - prev;
            prev = c;
            history.push(running);
        }
        for (&v, p) in vs.iter().zip(x) {
            out[v] = p;
        }
    }
    let final_cost = history.last().copied().unwrap_or(initial_cost);
    Ok((out, RefineReport { initial_cost, final_cost, edges: graph.edges.len(), cost_history: history }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    pub d_max_m: f64,
    pub d_max_px: f64,
    pub loss: Loss,
    pub anchor_weight: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams { d_max_m: 1.0, d_max_px: 20.0, loss: Loss::Huber { delta: 0.5 }, anchor_weight: 1.0 }
    }
}

/// Builds the proximity graph and pulls mutually close points of
/// neighbouring modules together.
pub fn refine_modules(
    modules: &[ModuleGeometry],
    poses: &BTreeMap<u32, Pose6Dof>,
    intr: &CameraIntrinsics,
    params: &RefineParams,
) -> Result<(Vec<ModuleGeometry>, RefineReport)> {
    let graph = build_graph(modules, poses, intr, params.d_max_m, params.d_max_px);
    let (x, report) = optimize_graph(&graph, &graph.vertices, params.loss, params.anchor_weight)?;
    let mut out = modules.to_vec();
    for (m, chunk) in out.iter_mut().zip(x.chunks(5)) {
        m.points.copy_from_slice(chunk);
    }
    Ok((out, report))
}

fn coord(g: &GeoPoint) -> serde_json::Value {
    json!([g.longitude, g.latitude, g.altitude_or_zero()])
}

/// GeoJSON FeatureCollection with one polygon per module. Rings run TL, BL,
/// BR, TR, TL, which is counter-clockwise for a north-up module.
pub fn geojson(modules: &[ModuleGeometry], origin: &GeoPoint) -> serde_json::Value {
    let features: Vec<_> = modules
        .iter()
        .map(|m| {
            let g = m.geo(origin);
            json!({
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[coord(&g[0]), coord(&g[3]), coord(&g[2]), coord(&g[1]), coord(&g[0])]],
                },
                "properties": {
                    "track_ids": m.track_ids,
                    "source_ids": m.source_ids,
                    "center_lat": g[4].latitude,
                    "center_lon": g[4].longitude,
                    "center_alt": g[4].altitude_or_zero(),
                },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

pub fn export_geojson(modules: &[ModuleGeometry], origin: &GeoPoint, path: &Path) -> Result<()> {
    write_json(path, &geojson(modules, origin))
}

pub(crate) fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_failures(path: &Path, failures: &[Failure]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    w.write_record(["track_id", "failure_mode"]).map_err(|e| Error::Validation(e.to_string()))?;
    let mut sorted = failures.to_vec();
    sorted.sort();
    for f in &sorted {
        w.write_record([f.track_id.as_str(), &f.mode.to_string()]).map_err(|e| Error::Validation(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::nadir_rotation;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics { k1: -0.05, ..CameraIntrinsics::pinhole(800.0, 800.0, 320.0, 256.0, 640, 512) }
    }

    fn module_at(e: f64, n: f64) -> [Vector3<f64>; 5] {
        let c = [
            Vector3::new(e, n + 0.78, 1.06),
            Vector3::new(e + 0.99, n + 0.78, 1.06),
            Vector3::new(e + 0.99, n - 0.78, 0.5),
            Vector3::new(e, n - 0.78, 0.5),
        ];
        [c[0], c[1], c[2], c[3], (c[0] + c[1] + c[2] + c[3]) / 4.0]
    }

    fn poses_along(xs: &[f64]) -> BTreeMap<u32, Pose6Dof> {
        xs.iter().enumerate().map(|(i, &x)| (i as u32, Pose6Dof::from_center(nadir_rotation(), &Vector3::new(x, 0.0, 20.0)))).collect()
    }

    fn observe(points: &[Vector3<f64>; 5], poses: &BTreeMap<u32, Pose6Dof>, frames: &[u32]) -> BTreeMap<u32, Observation> {
        frames
            .iter()
            .map(|f| {
                let p: Vec<_> = points.iter().map(|x| project(x, &poses[f], &intr()).unwrap()).collect();
                (*f, Observation { quad: [p[0], p[1], p[2], p[3]], center: p[4] })
            })
            .collect()
    }

    fn track(id: &str, obs: BTreeMap<u32, Observation>) -> ModuleTrack {
        ModuleTrack { track_id: id.into(), observations: obs, source_ids: BTreeSet::new() }
    }

    #[test]
    fn single_keyframe_rejected() {
        let poses = poses_along(&[0.0, 1.0]);
        let t = track("a", observe(&module_at(0.0, 0.0), &poses, &[0]));
        assert!(matches!(triangulate_module(&t, &poses, &intr(), &TriParams::default()), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn four_keyframes_exact() {
        let truth = module_at(0.2, 0.3);
        let poses = poses_along(&[-3.0, -1.0, 1.0, 3.0]);
        let t = track("a", observe(&truth, &poses, &[0, 1, 2, 3]));
        let m = triangulate_module(&t, &poses, &intr(), &TriParams::default()).unwrap();
        assert_eq!(m.contributing_pairs.len(), 6);
        for (p, q) in m.points.iter().zip(&truth) {
            assert!((p - q).norm() < 1e-6);
        }
        assert!(m.center_inside());
    }

    #[test]
    fn small_baseline_pairs_are_dropped() {
        // 0.2 m at 20 m altitude is about 0.6 degrees.
        let truth = module_at(0.0, 0.0);
        let poses = poses_along(&[0.0, 0.2]);
        let t = track("a", observe(&truth, &poses, &[0, 1]));
        assert!(triangulate_module(&t, &poses, &intr(), &TriParams::default()).is_err());
    }

    #[test]
    fn median_suppresses_one_corrupted_pair() {
        let truth = module_at(0.0, 0.0);
        let xs = [-3.0, -1.5, 0.0, 1.5, 3.0];
        let poses = poses_along(&xs);
        let obs = observe(&truth, &poses, &[0, 1, 2, 3, 4]);
        // Frame 4 was observed from a camera 5 m off its recorded position
        // along the flight; only pairs involving it are corrupted.
        let mut bad = poses.clone();
        bad.insert(4, Pose6Dof::from_center(nadir_rotation(), &Vector3::new(3.0, 0.3, 20.0)));
        let loose = TriParams { max_reproj_px: 1e9, ..TriParams::default() };
        let cands = pair_candidates(&obs, &bad, &intr(), &loose).unwrap();
        let pts: Vec<_> = cands.iter().map(|c| c.1).collect();
        let med = fuse_candidates(&pts, Fusion::Median).unwrap();
        let mean = fuse_candidates(&pts, Fusion::Mean).unwrap();
        // Brute-force median oracle over the x coordinate of the TL corner.
        let mut xs0: Vec<f64> = pts.iter().map(|p| p[0].x).collect();
        xs0.sort_by(f64::total_cmp);
        let oracle = 0.5 * (xs0[4] + xs0[5]);
        assert_eq!(med[0].x, oracle);
        let err_med = (med[0] - truth[0]).norm();
        let err_mean = (mean[0] - truth[0]).norm();
        assert!(err_med < err_mean, "{err_med} vs {err_mean}");
    }

    #[test]
    fn triangulation_is_order_invariant() {
        let truth = module_at(0.0, 0.0);
        let poses = poses_along(&[-3.0, -1.0, 1.0, 3.0]);
        let mut obs = observe(&truth, &poses, &[0, 1, 2, 3]);
        for o in obs.values_mut() {
            o.center.x += 0.4;
        }
        let p = TriParams::default();
        let (a, _) = triangulate_observations(&obs, &poses, &intr(), &p).unwrap();
        // Relabel frames in reverse order: the same pairs in another order.
        let rev_poses: BTreeMap<u32, Pose6Dof> = poses.iter().map(|(f, q)| (3 - f, *q)).collect();
        let rev_obs: BTreeMap<u32, Observation> = obs.iter().map(|(f, o)| (3 - f, *o)).collect();
        let (b, _) = triangulate_observations(&rev_obs, &rev_poses, &intr(), &p).unwrap();
        // Swapping the views inside a pair only reorders floating-point sums.
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-9);
        }
        // Fusion itself is exactly order-free.
        let cands: Vec<_> = pair_candidates(&obs, &poses, &intr(), &p).unwrap().into_iter().map(|c| c.1).collect();
        let mut shuffled = cands.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        assert_eq!(fuse_candidates(&cands, Fusion::Median), fuse_candidates(&shuffled, Fusion::Median));
    }

    fn geometry(id: &str, points: [Vector3<f64>; 5], obs: BTreeMap<u32, Observation>) -> ModuleGeometry {
        ModuleGeometry { track_ids: vec![id.into()], source_ids: BTreeSet::new(), points, contributing_pairs: vec![], observations: obs }
    }

    #[test]
    fn split_module_is_merged_and_idempotent() {
        let truth = module_at(0.0, 0.0);
        let xs: Vec<f64> = (0..13).map(|i| -3.0 + 0.5 * i as f64).collect();
        let poses = poses_along(&xs);
        let neighbour = module_at(1.0, 0.0);
        let p = TriParams::default();
        let a = triangulate_module(&track("a", observe(&truth, &poses, &[0, 1, 2, 3, 4, 5])), &poses, &intr(), &p).unwrap();
        let b = triangulate_module(&track("b", observe(&truth, &poses, &[8, 9, 10, 11, 12])), &poses, &intr(), &p).unwrap();
        let c = triangulate_module(&track("c", observe(&neighbour, &poses, &[0, 4, 8, 12])), &poses, &intr(), &p).unwrap();
        let out = merge_duplicates(&[a, c.clone(), b], &poses, &intr(), 20.0, &p);
        assert_eq!(out.modules.len(), 2);
        assert_eq!(out.merged_groups, 1);
        assert_eq!(out.modules[0].track_ids, vec!["a".to_string(), "b".to_string()]);
        for (x, y) in out.modules[0].points.iter().zip(&truth) {
            assert!((x - y).norm() < 1e-6);
        }
        assert_eq!(out.modules[1], c, "1 m neighbour never merged");
        let again = merge_duplicates(&out.modules, &poses, &intr(), 20.0, &p);
        assert_eq!(again.modules, out.modules);
        assert_eq!(again.merged_groups, 0);
    }

    #[test]
    fn distant_modules_are_not_folded_into_view() {
        // 150 m off-nadir the distorted projection wraps back near the image.
        let poses = poses_along(&[0.0]);
        let far = geometry("far", module_at(150.0, 0.0), BTreeMap::new());
        assert!(project(&far.points[4], &poses[&0], &intr()).is_some());
        assert!(projected(&far, &poses[&0], &intr()).is_none());
        let modules: Vec<_> = (0..4).map(|i| geometry("m", module_at(150.0 + 2.0 * i as f64, 0.0), BTreeMap::new())).collect();
        assert!(overlapping_pairs(&modules, &poses, &intr(), 20.0).is_empty());
    }

    #[test]
    fn adjacent_modules_project_far_apart() {
        let poses = poses_along(&[0.0]);
        let a = geometry("a", module_at(0.0, 0.0), BTreeMap::new());
        let b = geometry("b", module_at(1.0, 0.0), BTreeMap::new());
        let (pa, pb) = (projected(&a, &poses[&0], &intr()).unwrap(), projected(&b, &poses[&0], &intr()).unwrap());
        assert!(mean_distance(&pa, &pb) > 35.0);
        assert!(overlapping_pairs(&[a, b], &poses, &intr(), 20.0).is_empty());
    }

    fn two_abutting(gap: f64) -> (Vec<ModuleGeometry>, BTreeMap<u32, Pose6Dof>) {
        let poses = poses_along(&[-1.0, 1.0]);
        let a = module_at(0.0, 0.0);
        let mut b = module_at(0.99, 0.0);
        b[0].x += gap;
        b[3].x += gap;
        let ma = geometry("a", a, observe(&a, &poses, &[0, 1]));
        let mb = geometry("b", b, observe(&b, &poses, &[0, 1]));
        (vec![ma, mb], poses)
    }

    #[test]
    fn isolated_module_is_unchanged() {
        let (mods, poses) = two_abutting(0.0);
        let (out, rep) = refine_modules(&mods[..1], &poses, &intr(), &RefineParams::default()).unwrap();
        assert_eq!(out[0].points, mods[0].points);
        assert_eq!(rep.edges, 0);
    }

    #[test]
    fn shared_corners_move_together() {
        let (mods, poses) = two_abutting(0.1);
        let (out, rep) = refine_modules(&mods, &poses, &intr(), &RefineParams::default()).unwrap();
        assert_eq!(rep.edges, 2, "TR-TL and BR-BL");
        assert!(rep.final_cost < rep.initial_cost);
        let gap = |m: &[ModuleGeometry]| (m[1].points[0] - m[0].points[1]).norm();
        assert!(gap(&out) < gap(&mods));
        assert!(rep.cost_history.windows(2).all(|w| w[1] <= w[0]));
        // Untouched: TL, BL and the centers have no edges.
        assert_eq!(out[0].points[0], mods[0].points[0]);
        assert_eq!(out[0].points[4], mods[0].points[4]);
    }

    #[test]
    fn quadratic_without_anchor_meets_at_midpoint() {
        let g = RefinementGraph { vertices: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.1, 0.0, 0.0)], edges: vec![(0, 1)] };
        let (x, _) = optimize_graph(&g, &g.vertices, Loss::Quadratic, 0.0).unwrap();
        assert!((x[0] - x[1]).norm() < 1e-6);
        assert!((x[0] + x[1] - Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-9, "midpoint preserved");
        // With anchors the analytic optimum shrinks the gap to w / (w + 2).
        let (x, _) = optimize_graph(&g, &g.vertices, Loss::Quadratic, 1.0).unwrap();
        assert!(((x[1] - x[0]).x - 0.1 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn huber_limits_outlier_pull() {
        let g = RefinementGraph {
            vertices: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(5.0, 0.0, 0.0), Vector3::new(0.0, 0.2, 0.0)],
            edges: vec![(0, 1), (0, 2)],
        };
        let (q, _) = optimize_graph(&g, &g.vertices, Loss::Quadratic, 1.0).unwrap();
        let (h, _) = optimize_graph(&g, &g.vertices, Loss::Huber { delta: 0.5 }, 1.0).unwrap();
        let dq = (q[0] - g.vertices[0]).norm();
        let dh = (h[0] - g.vertices[0]).norm();
        assert!(dh <= 0.5 * dq, "{dh} vs {dq}");
    }

    #[test]
    fn huber_with_huge_delta_is_quadratic() {
        let g = RefinementGraph {
            vertices: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.3, 0.1, 0.0), Vector3::new(0.1, 0.4, 0.2)],
            edges: vec![(0, 1), (1, 2)],
        };
        let (q, rq) = optimize_graph(&g, &g.vertices, Loss::Quadratic, 1.0).unwrap();
        let (h, rh) = optimize_graph(&g, &g.vertices, Loss::Huber { delta: 1e6 }, 1.0).unwrap();
        assert!((rq.initial_cost - rh.initial_cost).abs() < 1e-9);
        assert!((rq.final_cost - rh.final_cost).abs() < 1e-9);
        for (a, b) in q.iter().zip(&h) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn geojson_round_trip_and_ring_rules() {
        let origin = GeoPoint::new(48.0, 11.0, Some(0.0)).unwrap();
        let empty = geojson(&[], &origin);
        assert_eq!(empty["features"].as_array().unwrap().len(), 0);
        let m = geometry("a", module_at(3.0, 4.0), BTreeMap::new());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.geojson");
        export_geojson(&[m.clone()], &origin, &path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let ring = v["features"][0]["geometry"]["coordinates"][0].as_array().unwrap().clone();
        assert_eq!(ring.len(), 5);
        assert_eq!(ring[0], ring[4]);
        let geo = m.geo(&origin);
        for (r, k) in ring.iter().zip([0, 3, 2, 1, 0]) {
            assert!((r[0].as_f64().unwrap() - geo[k].longitude).abs() < 1e-9);
            assert!((r[1].as_f64().unwrap() - geo[k].latitude).abs() < 1e-9);
        }
        // Right-hand rule: positive shoelace area in lon/lat.
        let pts: Vec<Vector2<f64>> = ring[..4].iter().map(|r| Vector2::new(r[0].as_f64().unwrap(), r[1].as_f64().unwrap())).collect();
        assert!(signed_area(&pts) > 0.0);
    }
}
