//! Camera resection: 6-point DLT inside RANSAC, then Levenberg-Marquardt
//! refinement of the reprojection error.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::Rng;

use super::ba::{apply_camera_step, observation_jacobian, observation_residual, BaCamera};
use crate::camera::{CameraIntrinsics, Pose6Dof};
use crate::geometry::{adaptive_iterations, null_vector, sample_indices, RansacParams};
use crate::{Error, Result};

/// Linear pose from at least six world points and their normalized image
/// coordinates.
pub fn pnp_dlt(world: &[Vector3<f64>], norm: &[Vector2<f64>]) -> Option<Pose6Dof> {
    let n = world.len();
    if n < 6 || norm.len() != n {
        return None;
    }
    let c = world.iter().fold(Vector3::zeros(), |a, p| a + p) / n as f64;
    let spread = world.iter().map(|p| (p - c).norm()).sum::<f64>() / n as f64;
    if !(spread > 0.0) {
        return None;
    }
    let s = 3f64.sqrt() / spread;
    let mut a = DMatrix::zeros(2 * n, 12);
    for i in 0..n {
        let x = (world[i] - c) * s;
        let (u, v) = (norm[i].x, norm[i].y);
        let xh = [x.x, x.y, x.z, 1.0];
        for k in 0..4 {
            a[(2 * i, k)] = xh[k];
            a[(2 * i, 8 + k)] = -u * xh[k];
            a[(2 * i + 1, 4 + k)] = xh[k];
            a[(2 * i + 1, 8 + k)] = -v * xh[k];
        }
    }
    let p = null_vector(&a);
    let mut m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let mut p4 = Vector3::new(p[3], p[7], p[11]);
    // Sign: the majority of points must lie in front of the camera.
    let front = (0..n).filter(|&i| (m * ((world[i] - c) * s) + p4).z > 0.0).count();
    if 2 * front < n {
        m = -m;
        p4 = -p4;
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut r = u * vt;
    let scale = svd.singular_values.mean();
    if r.determinant() < 0.0 {
        // Reflection: the linear estimate is unusable.
        r = -r;
        if r.determinant() < 0.0 {
            return None;
        }
    }
    if !(scale > 0.0) {
        return None;
    }
    // Undo the normalization: X_n = s (X - c), so t = t_n / scale - R c.
    let t_n = p4 / scale;
    // Camera maps X_n -> R X_n + t_n = R s (X - c) + t_n; divide by s.
    let t = t_n / s - r * c;
    let pose = Pose6Dof::new(r, t);
    pose.rotation.iter().chain(pose.translation.iter()).all(|v| v.is_finite()).then_some(pose)
}

/// Gauss-Newton with Levenberg damping on the pixel reprojection error of
/// the given correspondences. Returns the refined pose.
pub fn refine_pose(pose: &Pose6Dof, world: &[Vector3<f64>], pixels: &[Vector2<f64>], intr: &CameraIntrinsics, iterations: usize) -> Pose6Dof {
    let mut cam = BaCamera { rotation: pose.rotation, center: pose.center(), fixed: false };
    let cost = |c: &BaCamera| -> f64 {
        let mut s = 0.0;
        for (x, px) in world.iter().zip(pixels) {
            match observation_residual(c, x, intr, px) {
                Some(r) => s += r.norm_squared(),
                None => return f64::INFINITY,
            }
        }
        s
    };
    let mut cur = cost(&cam);
    if !cur.is_finite() {
        return *pose;
    }
    let mut lambda = 1e-4;
    for _ in 0..iterations {
        if cur < 1e-24 {
            break;
        }
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (x, px) in world.iter().zip(pixels) {
            if let Some((r, jc, _, _)) = observation_jacobian(&cam, x, intr, px) {
                h += jc.transpose() * jc;
                g += jc.transpose() * r;
            }
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut hd = h;
            for i in 0..6 {
                hd[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(step) = hd.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = apply_camera_step(&cam, &step);
            let c = cost(&cand);
            if c < cur {
                let rel = (cur - c) / cur;
                cam = cand;
                cur = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Pose6Dof::from_center(cam.rotation, &cam.center).orthonormalized()
}

fn reprojection_errors(pose: &Pose6Dof, world: &[Vector3<f64>], pixels: &[Vector2<f64>], intr: &CameraIntrinsics) -> Vec<f64> {
    let cam = BaCamera { rotation: pose.rotation, center: pose.center(), fixed: false };
    world
        .iter()
        .zip(pixels)
        .map(|(x, px)| observation_residual(&cam, x, intr, px).map_or(f64::INFINITY, |r| r.norm()))
        .collect()
}

/// Result of a successful resection.
#[derive(Debug, Clone)]
pub struct PnpResult {
    pub pose: Pose6Dof,
    pub inliers: Vec<bool>,
}

/// Robust resection from 2-D/3-D correspondences.
///
/// `norm` holds the undistorted normalized coordinates of `pixels`.
/// `guess`, when given (typically the pose of a nearby registered frame),
/// is refined on all correspondences and competes with the RANSAC
/// hypothesis; the one with more inliers (then lower error) wins.
/// `params.threshold` is the inlier reprojection threshold in pixels.
#[allow(clippy::too_many_arguments)]
pub fn register_pnp<R: Rng>(
    world: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    norm: &[Vector2<f64>],
    intr: &CameraIntrinsics,
    guess: Option<&Pose6Dof>,
    params: &RansacParams,
    min_inliers: usize,
    rng: &mut R,
) -> Result<PnpResult> {
    let n = world.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("{n} scene points observed, need 4")));
    }
    let count = |pose: &Pose6Dof| -> (Vec<bool>, usize, f64) {
        let errs = reprojection_errors(pose, world, pixels, intr);
        let mask: Vec<bool> = errs.iter().map(|&e| e <= params.threshold).collect();
        let k = mask.iter().filter(|&&b| b).count();
        let sse: f64 = errs.iter().zip(&mask).filter(|(_, &m)| m).map(|(e, _)| e * e).sum();
        (mask, k, sse)
    };
    let mut hypotheses: Vec<Pose6Dof> = Vec::new();
    if n >= 6 {
        let mut best: Option<(Pose6Dof, usize)> = None;
        let mut needed = params.max_iterations;
        let mut it = 0;
        while it < needed.min(params.max_iterations) {
            it += 1;
            let idx = if n == 6 { (0..6).collect() } else { sample_indices(rng, n, 6) };
            let w: Vec<_> = idx.iter().map(|&i| world[i]).collect();
            let x: Vec<_> = idx.iter().map(|&i| norm[i]).collect();
            let Some(pose) = pnp_dlt(&w, &x) else {
                if n == 6 {
                    break;
                }
                continue;
            };
            let (_, k, _) = count(&pose);
            if best.as_ref().map_or(true, |b| k > b.1) {
                needed = adaptive_iterations(k as f64 / n as f64, 6, params.confidence, params.max_iterations);
                best = Some((pose, k));
            }
            if n == 6 {
                break;
            }
        }
        if let Some((pose, _)) = best {
            hypotheses.push(pose);
        }
    }
    if let Some(g) = guess {
        hypotheses.push(*g);
    }
    let mut winner: Option<(Pose6Dof, Vec<bool>, usize, f64)> = None;
    for h in hypotheses {
        // Refine on the inliers of the hypothesis, twice, re-selecting inliers.
        let mut pose = h;
        let (mut mask, mut k, _) = count(&pose);
        if k < 4 {
            // A far-off guess: refine on everything once and look again.
            pose = refine_pose(&pose, world, pixels, intr, 50);
            (mask, k, _) = count(&pose);
            if k < 4 {
                continue;
            }
        }
        for _ in 0..2 {
            let w: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| world[i]).collect();
            let p: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| pixels[i]).collect();
            pose = refine_pose(&pose, &w, &p, intr, 50);
            let (m2, k2, _) = count(&pose);
            if k2 < k {
                break;
            }
            mask = m2;
            k = k2;
        }
        let (mask, k, sse) = count(&pose);
        let better = match &winner {
            None => true,
            Some((_, _, wk, wsse)) => k > *wk || (k == *wk && sse < *wsse),
        };
        if better {
            winner = Some((pose, mask, k, sse));
        }
    }
    match winner {
        Some((pose, inliers, k, _)) if k >= min_inliers.max(4) => Ok(PnpResult { pose, inliers }),
        Some((_, _, k, _)) => Err(Error::InsufficientData(format!("{k} PnP inliers"))),
        None => Err(Error::InsufficientData("no PnP hypothesis".into())),
    }
}
