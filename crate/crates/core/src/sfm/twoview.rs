//! Two-view initialization: essential matrix (normalized 8-point + RANSAC)
//! or homography, whichever explains more correspondences.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::Rng;

use crate::camera::{ray_angle, Pose6Dof};
use crate::geometry::{adaptive_iterations, apply_h, normalizing_transform, null_vector, ransac_homography, sample_indices, triangulate, RansacParams};
use crate::{Error, Result};

/// Normalized 8-point estimate of `E` with `x2^T E x1 = 0`, projected onto
/// the essential manifold (singular values 1, 1, 0).
pub fn essential_8point(x1: &[Vector2<f64>], x2: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = x1.len();
    if n < 8 || x2.len() != n {
        return None;
    }
    let t1 = normalizing_transform(x1);
    let t2 = normalizing_transform(x2);
    let mut a = DMatrix::zeros(n, 9);
    for i in 0..n {
        let p = apply_h(&t1, &x1[i]);
        let q = apply_h(&t2, &x2[i]);
        let row = [q.x * p.x, q.x * p.y, q.x, q.y * p.x, q.y * p.y, q.y, p.x, p.y, 1.0];
        for k in 0..9 {
            a[(i, k)] = row[k];
        }
    }
    let e = null_vector(&a);
    let en = Matrix3::from_row_slice(e.as_slice());
    let e = t2.transpose() * en * t1;
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    // nalgebra does not sort singular values; zero the smallest one.
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mut d = Vector3::zeros();
    d[order[0]] = 1.0;
    d[order[1]] = 1.0;
    let e2 = u * Matrix3::from_diagonal(&d) * vt;
    e2.iter().all(|v| v.is_finite()).then_some(e2)
}

/// Squared Sampson distance of a correspondence to the epipolar constraint.
pub fn sampson_sq(e: &Matrix3<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let x1 = Vector3::new(a.x, a.y, 1.0);
    let x2 = Vector3::new(b.x, b.y, 1.0);
    let ex1 = e * x1;
    let etx2 = e.transpose() * x2;
    let num = x2.dot(&ex1);
    let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

/// Robust essential-matrix fit; `params.threshold` is in normalized units.
pub fn ransac_essential<R: Rng>(
    x1: &[Vector2<f64>],
    x2: &[Vector2<f64>],
    params: &RansacParams,
    rng: &mut R,
) -> Option<(Matrix3<f64>, Vec<bool>)> {
    let n = x1.len();
    if n < 8 {
        return None;
    }
    let t2 = params.threshold * params.threshold;
    let count = |e: &Matrix3<f64>| -> Vec<bool> { (0..n).map(|i| sampson_sq(e, &x1[i], &x2[i]) <= t2).collect() };
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize)> = None;
    let mut needed = params.max_iterations;
    let mut it = 0;
    while it < needed.min(params.max_iterations) {
        it += 1;
        let idx = if n == 8 { (0..8).collect() } else { sample_indices(rng, n, 8) };
        let a: Vec<_> = idx.iter().map(|&i| x1[i]).collect();
        let b: Vec<_> = idx.iter().map(|&i| x2[i]).collect();
        let Some(e) = essential_8point(&a, &b) else { continue };
        let mask = count(&e);
        let k = mask.iter().filter(|&&m| m).count();
        if best.as_ref().map_or(true, |b| k > b.2) {
            needed = adaptive_iterations(k as f64 / n as f64, 8, params.confidence, params.max_iterations);
            best = Some((e, mask, k));
        }
        if n == 8 {
            break;
        }
    }
    let (e, mask, k) = best?;
    if k < 8 {
        return None;
    }
    let a: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| x1[i]).collect();
    let b: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| x2[i]).collect();
    if let Some(refit) = essential_8point(&a, &b) {
        let m2 = count(&refit);
        if m2.iter().filter(|&&m| m).count() >= k {
            return Some((refit, m2));
        }
    }
    Some((e, mask))
}

/// The four `(R, t)` candidates of an essential matrix, `|t| = 1`.
pub fn decompose_essential(e: &Matrix3<f64>) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let (Some(mut u), Some(mut vt)) = (svd.u, svd.v_t) else { return Vec::new() };
    // Put the smallest singular value last.
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    vt = Matrix3::from_rows(&[vt.row(order[0]), vt.row(order[1]), vt.row(order[2])]);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vector3<f64> = u.column(2).into();
    vec![(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Decomposes a calibrated homography `H ~ R + t n^T / d` into its motion
/// candidates `(R, t / d, n)` that put the plane in front of the first
/// camera (`n.z > 0`).
pub fn decompose_homography(h: &Matrix3<f64>) -> Vec<(Matrix3<f64>, Vector3<f64>, Vector3<f64>)> {
    let svd = h.svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[1] > 0.0) {
        return Vec::new();
    }
    let mut hn = h / s[1];
    // Fix the sign so that x2^T H x1 > 0 for points in front of both cameras;
    // det(H) > 0 is the standard proxy.
    if hn.determinant() < 0.0 {
        hn = -hn;
    }
    let hth = hn.transpose() * hn;
    let (vals, vecs) = crate::geometry::sym_eigen_sorted(hth);
    let (s3, s1) = (vals[0].max(0.0), vals[2]);
    let v1: Vector3<f64> = vecs.column(2).into();
    let v2: Vector3<f64> = vecs.column(1).into();
    let v3: Vector3<f64> = vecs.column(0).into();
    if s1 - s3 < 1e-12 {
        // Pure rotation: no translation information.
        return vec![(hn, Vector3::zeros(), Vector3::z())];
    }
    let den = (s1 - s3).sqrt();
    let a = (1.0 - s3).max(0.0).sqrt();
    let b = (s1 - 1.0).max(0.0).sqrt();
    let u1 = (v1 * a + v3 * b) / den;
    let u2 = (v1 * a - v3 * b) / den;
    let mut out = Vec::new();
    for u in [u1, u2] {
        let uu = Matrix3::from_columns(&[v2, u, v2.cross(&u)]);
        let hv2 = hn * v2;
        let hu = hn * u;
        let ww = Matrix3::from_columns(&[hv2, hu, hv2.cross(&hu)]);
        let r = ww * uu.transpose();
        let n = v2.cross(&u);
        let t = (hn - r) * n;
        for sign in [1.0, -1.0] {
            let (n, t) = (n * sign, t * sign);
            if n.z > 0.0 {
                out.push((r, t, n));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TwoView {
    /// Pose of the second camera; the first is the identity. `|t| = 1`.
    pub pose: Pose6Dof,
    /// Triangulated points for accepted correspondences.
    pub points: Vec<Option<Vector3<f64>>>,
    pub used_homography: bool,
    pub median_angle: f64,
}

/// Correspondences that triangulate in front of both cameras and reproject
/// within `thr` (normalized units), and their squared reprojection error.
fn score(r: &Matrix3<f64>, t: &Vector3<f64>, x1: &[Vector2<f64>], x2: &[Vector2<f64>], mask: &[bool], thr: f64) -> (usize, f64) {
    let p1 = Pose6Dof::identity();
    let p2 = Pose6Dof::new(*r, *t);
    let mut count = 0;
    let mut sse = 0.0;
    for i in (0..x1.len()).filter(|&i| mask[i]) {
        let Some(x) = triangulate(&[(&p1, x1[i]), (&p2, x2[i])]) else { continue };
        let b = p2.transform(&x);
        if x.z <= 0.0 || b.z <= 0.0 {
            continue;
        }
        let e1 = (Vector2::new(x.x / x.z, x.y / x.z) - x1[i]).norm_squared();
        let e2 = (Vector2::new(b.x / b.z, b.y / b.z) - x2[i]).norm_squared();
        if e1.max(e2) <= thr * thr {
            count += 1;
            sse += e1 + e2;
        }
    }
    (count, sse)
}

/// Relative pose and initial points from normalized correspondences.
/// `params.threshold` is in pixels and `focal` converts it to normalized
/// units; points whose reprojection exceeds `max_reproj_px` are dropped.
pub fn init_two_view<R: Rng>(
    x1: &[Vector2<f64>],
    x2: &[Vector2<f64>],
    focal: f64,
    params: &RansacParams,
    min_angle: f64,
    max_reproj_px: f64,
    rng: &mut R,
) -> Result<TwoView> {
    let n = x1.len();
    if n < 8 {
        return Err(Error::InitRejected(format!("{n} shared tracks, need 8")));
    }
    let norm = RansacParams { threshold: params.threshold / focal, ..*params };
    let e_fit = ransac_essential(x1, x2, &norm, rng);
    let h_fit = ransac_homography(x1, x2, &norm, rng);
    let e_count = e_fit.as_ref().map_or(0, |f| f.1.iter().filter(|&&b| b).count());
    let h_count = h_fit.as_ref().map_or(0, |f| f.1.iter().filter(|&&b| b).count());

    if e_fit.is_none() && h_fit.is_none() {
        return Err(Error::InitRejected("no essential or homography model".into()));
    }
    // Candidate motions from both models compete on the union of inliers.
    let mut mask = vec![false; n];
    let mut candidates: Vec<(Matrix3<f64>, Vector3<f64>, Vector3<f64>, bool)> = Vec::new();
    if let Some((e, m)) = &e_fit {
        mask.iter_mut().zip(m).for_each(|(a, b)| *a |= *b);
        candidates.extend(decompose_essential(e).into_iter().map(|(r, t)| (r, t, Vector3::z(), false)));
    }
    if let Some((h, m)) = &h_fit {
        mask.iter_mut().zip(m).for_each(|(a, b)| *a |= *b);
        candidates.extend(decompose_homography(h).into_iter().map(|(r, t, nrm)| (r, t, nrm, true)));
    }
    let prefer_h = h_count >= e_count;
    let thr = norm.threshold;

    let mut best: Option<(usize, f64, bool, f64, Matrix3<f64>, Vector3<f64>, bool)> = None;
    for (r, t, nrm, from_h) in &candidates {
        let tn = t.norm();
        if !(tn > 1e-12) {
            continue;
        }
        let t = t / tn;
        let (count, sse) = score(r, &t, x1, x2, &mask, thr);
        let preferred = *from_h == prefer_h;
        // Ties go to the preferred model, then to the plane normal closest
        // to the optical axis.
        let facing = nrm.normalize().z;
        let better = match &best {
            None => true,
            Some((bc, bs, bp, bf, _, _, _)) => {
                count > *bc
                    || (count == *bc && sse < *bs * (1.0 - 1e-9) - 1e-30)
                    || (count == *bc && (sse - bs).abs() <= bs.abs() * 1e-9 + 1e-30 && ((preferred && !bp) || (preferred == *bp && facing > *bf)))
            }
        };
        if better {
            best = Some((count, sse, preferred, facing, *r, t, *from_h));
        }
    }
    let Some((count, _, _, _, r, t, used_h)) = best else {
        return Err(Error::InitRejected("no translation between the views".into()));
    };
    if count < 8 {
        return Err(Error::InitRejected(format!("only {count} points pass cheirality")));
    }
    let p1 = Pose6Dof::identity();
    let p2 = Pose6Dof::new(r, t);
    let c2 = p2.center();
    let mut points = vec![None; n];
    let mut angles = Vec::new();
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let Some(x) = triangulate(&[(&p1, x1[i]), (&p2, x2[i])]) else { continue };
        let a = p1.transform(&x);
        let b = p2.transform(&x);
        if a.z <= 0.0 || b.z <= 0.0 {
            continue;
        }
        let e1 = (Vector2::new(a.x / a.z, a.y / a.z) - x1[i]).norm() * focal;
        let e2 = (Vector2::new(b.x / b.z, b.y / b.z) - x2[i]).norm() * focal;
        if e1 > max_reproj_px || e2 > max_reproj_px {
            continue;
        }
        angles.push(ray_angle(&x, &(x - c2)));
        points[i] = Some(x);
    }
    let median_angle = crate::geometry::median_in_place(&mut angles).unwrap_or(0.0);
    if !(median_angle > min_angle) {
        return Err(Error::InitRejected(format!("median ray angle {:.3} deg", median_angle.to_degrees())));
    }
    Ok(TwoView { pose: p2, points, used_homography: used_h, median_angle })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_angle_between, so3_exp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn view(pose: &Pose6Dof, x: &Vector3<f64>) -> Vector2<f64> {
        let c = pose.transform(x);
        Vector2::new(c.x / c.z, c.y / c.z)
    }

    fn scene(planar: bool, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..60)
            .map(|_| {
                let z = if planar { 0.0 } else { rng.random_range(0.0..3.0) };
                Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-6.0..6.0), z)
            })
            .collect()
    }

    fn nadir(c: Vector3<f64>, yaw: f64) -> Pose6Dof {
        let down = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        Pose6Dof::from_center(so3_exp(&Vector3::new(0.02, -0.01, yaw)) * down, &c)
    }

    fn relative(a: &Pose6Dof, b: &Pose6Dof) -> (Matrix3<f64>, Vector3<f64>) {
        let rel = b.compose(&a.inverse());
        (rel.rotation, rel.translation.normalize())
    }

    #[test]
    fn essential_branch_recovers_relative_pose() {
        let pts = scene(false, 1);
        let a = nadir(Vector3::new(0.0, 0.0, 20.0), 0.0);
        let b = nadir(Vector3::new(2.0, 0.3, 20.2), 0.05);
        let x1: Vec<_> = pts.iter().map(|x| view(&a, x)).collect();
        let x2: Vec<_> = pts.iter().map(|x| view(&b, x)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tv = init_two_view(&x1, &x2, 765.0, &RansacParams::default(), 1f64.to_radians(), 5.0, &mut rng).unwrap();
        assert!(!tv.used_homography);
        let (r, t) = relative(&a, &b);
        assert!(rotation_angle_between(&r, &tv.pose.rotation) < 1e-6);
        assert!(ray_angle(&t, &tv.pose.translation) < 1e-6);
        assert!(tv.points.iter().all(|p| p.is_some()));
    }

    #[test]
    fn pure_rotation_is_rejected() {
        let pts = scene(false, 2);
        let a = nadir(Vector3::new(0.0, 0.0, 20.0), 0.0);
        let b = nadir(Vector3::new(0.0, 0.0, 20.0), 0.1);
        let x1: Vec<_> = pts.iter().map(|x| view(&a, x)).collect();
        let x2: Vec<_> = pts.iter().map(|x| view(&b, x)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = init_two_view(&x1, &x2, 765.0, &RansacParams::default(), 1f64.to_radians(), 5.0, &mut rng);
        assert!(matches!(r, Err(Error::InitRejected(_))), "{r:?}");
    }

    #[test]
    fn planar_scene_uses_homography() {
        let pts = scene(true, 3);
        let a = nadir(Vector3::new(0.0, 0.0, 20.0), 0.0);
        let b = nadir(Vector3::new(2.5, 0.0, 20.0), 0.0);
        let x1: Vec<_> = pts.iter().map(|x| view(&a, x)).collect();
        let x2: Vec<_> = pts.iter().map(|x| view(&b, x)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tv = init_two_view(&x1, &x2, 765.0, &RansacParams::default(), 1f64.to_radians(), 5.0, &mut rng);
        let tv = tv.unwrap();
        assert!(tv.used_homography);
        let (r, t) = relative(&a, &b);
        assert!(rotation_angle_between(&r, &tv.pose.rotation) < 1e-6);
        assert!(ray_angle(&t, &tv.pose.translation) < 1e-6);
    }

    #[test]
    fn homography_decomposition_contains_truth() {
        // Plane z = 0 seen from a camera at height 10; n in camera-1 frame.
        let a = nadir(Vector3::new(0.0, 0.0, 10.0), 0.0);
        let b = nadir(Vector3::new(1.0, 0.5, 10.5), 0.2);
        let (r, t) = (b.compose(&a.inverse()).rotation, b.compose(&a.inverse()).translation);
        let n = a.rotation * Vector3::new(0.0, 0.0, -1.0);
        let d = n.dot(&a.translation);
        // Plane in camera-1 coordinates: n^T X = d with n pointing away.
        let (n, d) = if d < 0.0 { (-n, -d) } else { (n, d) };
        let h = r + t * n.transpose() / d;
        let sols = decompose_homography(&(h * 3.0));
        assert!(sols.iter().any(|(rr, tt, nn)| {
            rotation_angle_between(rr, &r) < 1e-9 && (tt - t / d).norm() < 1e-9 && (nn - n).norm() < 1e-9
        }));
    }
}
