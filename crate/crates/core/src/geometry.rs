//! Shared geometric kernels: polygon clipping, homographies, triangulation,
//! similarity fitting and small rotation helpers.

use nalgebra::{DMatrix, Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::Rng;

use crate::camera::Pose6Dof;

/// Signed shoelace area; positive for counter-clockwise vertex order in a
/// y-up frame.
pub fn signed_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

fn cross(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// True when closed segments `ab` and `cd` share a point.
pub fn segments_intersect(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>, d: &Vector2<f64>) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: &Vector2<f64>, q: &Vector2<f64>, r: &Vector2<f64>, v: f64| {
        v == 0.0 && r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    };
    on(c, d, a, d1) || on(c, d, b, d2) || on(a, b, c, d3) || on(a, b, d, d4)
}

/// A quadrilateral is simple when its two pairs of opposite edges do not meet.
pub fn is_simple_quad(q: &[Vector2<f64>; 4]) -> bool {
    !segments_intersect(&q[0], &q[1], &q[2], &q[3]) && !segments_intersect(&q[1], &q[2], &q[3], &q[0])
}

/// Splits a simple quad into two triangles along an interior diagonal. Both
/// triangles are returned counter-clockwise.
pub fn quad_triangles(q: &[Vector2<f64>; 4]) -> [[Vector2<f64>; 3]; 2] {
    // Diagonal 0-2 is interior iff 1 and 3 lie on opposite sides of it.
    let s1 = cross(&q[0], &q[2], &q[1]);
    let s3 = cross(&q[0], &q[2], &q[3]);
    let tris = if s1 * s3 < 0.0 {
        [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
    } else {
        [[q[1], q[2], q[3]], [q[1], q[3], q[0]]]
    };
    tris.map(|t| if signed_area(&t) < 0.0 { [t[0], t[2], t[1]] } else { t })
}

/// Sutherland-Hodgman clipping of `subject` against a counter-clockwise
/// convex polygon.
pub fn clip_convex(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut out: Vec<Vector2<f64>> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let p = input[j];
            let q = input[(j + 1) % m];
            let dp = cross(&a, &b, &p);
            let dq = cross(&a, &b, &q);
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push(p + (q - p) * t);
            }
        }
    }
    out
}

/// Intersection area of two counter-clockwise convex polygons.
pub fn convex_intersection_area(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> f64 {
    let c = clip_convex(a, b);
    if c.len() < 3 {
        0.0
    } else {
        signed_area(&c).abs()
    }
}

/// Axis-aligned rectangle `[0, w] x [0, h]` as a counter-clockwise polygon.
pub fn rect(w: f64, h: f64) -> [Vector2<f64>; 4] {
    [Vector2::new(0.0, 0.0), Vector2::new(w, 0.0), Vector2::new(w, h), Vector2::new(0.0, h)]
}

/// Similarity transform that moves the centroid to the origin and scales the
/// mean distance to sqrt(2).
pub(crate) fn normalizing_transform(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_d = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_d > 0.0 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

pub fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Unit null vector of a tall or square matrix (right singular vector of
/// the smallest singular value).
pub fn null_vector(a: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    let cols = a.ncols();
    let a = if a.nrows() < cols {
        let mut padded = DMatrix::zeros(cols, cols);
        padded.rows_mut(0, a.nrows()).copy_from(a);
        padded
    } else {
        a.clone()
    };
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    vt.row(imin).transpose()
}

/// Normalized DLT homography mapping `src` to `dst`; needs at least four
/// points in general position.
pub fn homography_dlt(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return None;
    }
    let ts = normalizing_transform(src);
    let td = normalizing_transform(dst);
    let mut a = DMatrix::zeros(2 * n, 9);
    for i in 0..n {
        let p = apply_h(&ts, &src[i]);
        let q = apply_h(&td, &dst[i]);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for k in 0..9 {
            a[(2 * i, k)] = r0[k];
            a[(2 * i + 1, k)] = r1[k];
        }
    }
    let h = null_vector(&a);
    let hn = Matrix3::from_row_slice(h.as_slice());
    let full = td.try_inverse()? * hn * ts;
    let scale = full[(2, 2)];
    let full = if scale.abs() > 1e-300 { full / scale } else { full / full.norm() };
    full.iter().all(|v| v.is_finite()).then_some(full)
}

/// RANSAC settings shared by the robust estimators.
#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    pub max_iterations: usize,
    pub threshold: f64,
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams { max_iterations: 200, threshold: 2.0, confidence: 0.999 }
    }
}

/// Iteration count needed to draw one all-inlier sample with the given
/// confidence.
pub fn adaptive_iterations(inlier_ratio: f64, sample: usize, confidence: f64, cap: usize) -> usize {
    if inlier_ratio >= 1.0 {
        return 1;
    }
    let good = inlier_ratio.powi(sample as i32);
    if good <= 0.0 {
        return cap;
    }
    let k = (1.0 - confidence).ln() / (1.0 - good).ln();
    if k.is_finite() {
        (k.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Draws `k` distinct indices from `0..n`.
pub fn sample_indices<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Robust homography fit. Returns the model refit on all inliers and the
/// inlier mask.
pub fn ransac_homography<R: Rng>(
    src: &[Vector2<f64>],
    dst: &[Vector2<f64>],
    params: &RansacParams,
    rng: &mut R,
) -> Option<(Matrix3<f64>, Vec<bool>)> {
    let n = src.len();
    if n < 4 {
        return None;
    }
    let count = |h: &Matrix3<f64>| -> Vec<bool> {
        (0..n)
            .map(|i| {
                let p = apply_h(h, &src[i]);
                p.iter().all(|v| v.is_finite()) && (p - dst[i]).norm() <= params.threshold
            })
            .collect()
    };
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize)> = None;
    if n == 4 {
        let h = homography_dlt(src, dst)?;
        let mask = count(&h);
        let k = mask.iter().filter(|&&b| b).count();
        return Some((h, mask)).filter(|_| k == 4);
    }
    let mut needed = params.max_iterations;
    let mut it = 0;
    while it < needed.min(params.max_iterations) {
        it += 1;
        let idx = sample_indices(rng, n, 4);
        let s: Vec<_> = idx.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = idx.iter().map(|&i| dst[i]).collect();
        let Some(h) = homography_dlt(&s, &d) else { continue };
        let mask = count(&h);
        let k = mask.iter().filter(|&&b| b).count();
        if best.as_ref().map_or(true, |b| k > b.2) {
            needed = adaptive_iterations(k as f64 / n as f64, 4, params.confidence, params.max_iterations);
            best = Some((h, mask, k));
        }
    }
    let (h, mask, k) = best?;
    if k < 4 {
        return None;
    }
    let s: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| src[i]).collect();
    let d: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| dst[i]).collect();
    match homography_dlt(&s, &d) {
        Some(refit) => {
            let m2 = count(&refit);
            if m2.iter().filter(|&&b| b).count() >= k {
                Some((refit, m2))
            } else {
                Some((h, mask))
            }
        }
        None => Some((h, mask)),
    }
}

/// Linear triangulation from normalized (undistorted) observations.
///
/// Each view contributes the two equations `(x r3 - r1) X = x t3 - t1` and
/// `(y r3 - r2) X = y t3 - t2`; the 3x3 normal equations are solved directly.
pub fn triangulate(views: &[(&Pose6Dof, Vector2<f64>)]) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (pose, n) in views {
        let r = &pose.rotation;
        let t = &pose.translation;
        for (c, row) in [(n.x, 0usize), (n.y, 1usize)] {
            let a = Vector3::new(
                c * r[(2, 0)] - r[(row, 0)],
                c * r[(2, 1)] - r[(row, 1)],
                c * r[(2, 2)] - r[(row, 2)],
            );
            let b = t[row] - c * t[2];
            ata += a * a.transpose();
            atb += a * b;
        }
    }
    let x = ata.cholesky()?.solve(&atb);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Result of a similarity fit `dst ≈ scale * rotation * src + translation`.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Singular values of the cross-covariance, descending.
    pub singular_values: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            singular_values: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// Maps a world-to-camera pose into the transformed world.
    pub fn apply_pose(&self, pose: &Pose6Dof) -> Pose6Dof {
        let r = pose.rotation * self.rotation.transpose();
        let c = self.apply(&pose.center());
        Pose6Dof::from_center(r, &c)
    }
}

/// Umeyama's closed-form least-squares similarity (or rigid motion when
/// `with_scale` is false).
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Option<Similarity> {
    let n = src.len();
    if n == 0 || dst.len() != n {
        return None;
    }
    let nf = n as f64;
    let ms = src.iter().fold(Vector3::zeros(), |a, p| a + p) / nf;
    let md = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / nf;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for i in 0..n {
        let a = src[i] - ms;
        let b = dst[i] - md;
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    // nalgebra does not guarantee ordering; sort descending.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let vt = Matrix3::from_rows(&[vt.row(order[0]), vt.row(order[1]), vt.row(order[2])]);
    let d = Vector3::new(svd.singular_values[order[0]], svd.singular_values[order[1]], svd.singular_values[order[2]]);
    let mut sdiag = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * vt.determinant()) < 0.0 {
        sdiag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&sdiag) * vt;
    let scale = if with_scale {
        if var_s <= 0.0 {
            return None;
        }
        d.dot(&sdiag) / var_s
    } else {
        1.0
    };
    let translation = md - rotation * ms * scale;
    Some(Similarity { scale, rotation, translation, singular_values: d })
}

/// Least-squares rigid motion in the plane: `dst ≈ R src + t`.
pub fn rigid_2d(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Option<(Matrix2<f64>, Vector2<f64>)> {
    let n = src.len();
    if n == 0 || dst.len() != n {
        return None;
    }
    let nf = n as f64;
    let ms = src.iter().fold(Vector2::zeros(), |a, p| a + p) / nf;
    let md = dst.iter().fold(Vector2::zeros(), |a, p| a + p) / nf;
    let (mut sc, mut ss) = (0.0, 0.0);
    for i in 0..n {
        let a = src[i] - ms;
        let b = dst[i] - md;
        sc += a.dot(&b);
        ss += a.x * b.y - a.y * b.x;
    }
    let th = ss.atan2(sc);
    let (s, c) = th.sin_cos();
    let r = Matrix2::new(c, -s, s, c);
    Some((r, md - r * ms))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let th2 = w.norm_squared();
    let k = skew(w);
    if th2 < 1e-16 {
        return Matrix3::identity() + k + k * k * 0.5;
    }
    let th = th2.sqrt();
    Matrix3::identity() + k * (th.sin() / th) + k * k * ((1.0 - th.cos()) / th2)
}

/// Rotation angle of `a^T b` in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let r = a.transpose() * b;
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // Near zero, acos loses precision; use the skew part instead.
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    s.atan2(c)
}

/// Median with the mean of the two central values for even counts. Sorts
/// the slice in place. Returns `None` for an empty slice.
pub fn median_in_place(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Eigen-decomposition helper returning eigenvalues ascending with vectors.
pub fn sym_eigen_sorted(m: Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let e = SymmetricEigen::new(m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let vals = Vector3::new(e.eigenvalues[order[0]], e.eigenvalues[order[1]], e.eigenvalues[order[2]]);
    let vecs = Matrix3::from_columns(&[
        e.eigenvectors.column(order[0]),
        e.eigenvectors.column(order[1]),
        e.eigenvectors.column(order[2]),
    ]);
    (vals, vecs)
}
