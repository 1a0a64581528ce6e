//! Bundle adjustment: Levenberg-Marquardt over camera poses, scene points
//! and shared intrinsics (focal length, k1, k2), with optional GPS position
//! priors on camera centers.
//!
//! Points are eliminated with the Schur complement. The reduced camera
//! system is never formed; conjugate gradients run on implicit products
//! that cost O(#observations), preconditioned with the exact diagonal blocks
//! of the Schur complement.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix6, Matrix6x3, Vector2, Vector3, Vector6};

use crate::camera::{distort, distort_jacobian, CameraIntrinsics};
use crate::geometry::{skew, so3_exp};
use crate::{Error, Result};

/// Camera parametrized by its world-to-camera rotation and its center:
/// `X_cam = rotation * (X - center)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaCamera {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaObservation {
    pub camera: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
}

/// Soft constraint pulling a camera center towards `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaPrior {
    pub camera: usize,
    pub target: Vector3<f64>,
}

/// Soft constraint pulling the refined intrinsics `[fx, k1, k2]` towards a
/// calibration, with one standard deviation per parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntrinsicsPrior {
    pub target: CameraIntrinsics,
    pub sigma: Vector3<f64>,
}

impl IntrinsicsPrior {
    fn weights(&self) -> Vector3<f64> {
        self.sigma.map(|s| 1.0 / (s * s))
    }

    fn offset(&self, intr: &CameraIntrinsics) -> Vector3<f64> {
        Vector3::new(intr.fx - self.target.fx, intr.k1 - self.target.k1, intr.k2 - self.target.k2)
    }
}

#[derive(Debug, Clone)]
pub struct BaProblem {
    pub cameras: Vec<BaCamera>,
    pub points: Vec<Vector3<f64>>,
    pub observations: Vec<BaObservation>,
    pub priors: Vec<BaPrior>,
    pub prior_sigma: f64,
    pub intrinsics: CameraIntrinsics,
    pub refine_intrinsics: bool,
    /// Only used when the intrinsics are refined.
    pub intrinsics_prior: Option<IntrinsicsPrior>,
}

#[derive(Debug, Clone, Copy)]
pub struct BaOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
    /// Stop when the cost itself drops below this value.
    pub absolute_tolerance: f64,
    pub initial_lambda: f64,
    pub max_cg_iterations: usize,
    pub cg_tolerance: f64,
}

impl Default for BaOptions {
    fn default() -> Self {
        BaOptions {
            max_iterations: 100,
            relative_tolerance: 1e-9,
            absolute_tolerance: 1e-12,
            initial_lambda: 1e-4,
            max_cg_iterations: 500,
            cg_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    /// Cost before the first step and after every accepted step.
    pub cost_history: Vec<f64>,
}

/// Intrinsic parameters refined by bundle adjustment: focal length (with the
/// fy/fx ratio held fixed), k1 and k2.
pub const N_INTRINSICS: usize = 3;

/// Residual (projected minus observed pixel) and Jacobians of one
/// observation with respect to the camera increment `[dθ, dC]`, the point,
/// and the intrinsics `[fx, k1, k2]`. The rotation increment is applied on
/// the left: `R <- exp(dθ) R`. `None` if the point is not in front of the
/// camera.
pub fn observation_jacobian(
    cam: &BaCamera,
    x: &Vector3<f64>,
    intr: &CameraIntrinsics,
    pixel: &Vector2<f64>,
) -> Option<(Vector2<f64>, Matrix2x6<f64>, Matrix2x3<f64>, Matrix2x3<f64>)> {
    let xc = cam.rotation * (x - cam.center);
    if xc.z <= 0.0 {
        return None;
    }
    let iz = 1.0 / xc.z;
    let n = Vector2::new(xc.x * iz, xc.y * iz);
    let d = distort(&n, intr);
    let res = Vector2::new(intr.fx * d.x + intr.cx - pixel.x, intr.fy * d.y + intr.cy - pixel.y);
    let jn = Matrix2x3::new(iz, 0.0, -xc.x * iz * iz, 0.0, iz, -xc.y * iz * iz);
    let jd = distort_jacobian(&n, intr);
    let f = nalgebra::Matrix2::new(intr.fx, 0.0, 0.0, intr.fy);
    let jp = f * jd * jn; // d pixel / d X_cam
    let j_rot = jp * (-skew(&xc));
    let j_center = jp * (-cam.rotation);
    let j_point = jp * cam.rotation;
    let mut j_cam = Matrix2x6::zeros();
    j_cam.fixed_view_mut::<2, 3>(0, 0).copy_from(&j_rot);
    j_cam.fixed_view_mut::<2, 3>(0, 3).copy_from(&j_center);
    let r2 = n.norm_squared();
    let ratio = intr.fy / intr.fx;
    let j_intr = Matrix2x3::new(d.x, intr.fx * n.x * r2, intr.fx * n.x * r2 * r2, ratio * d.y, intr.fy * n.y * r2, intr.fy * n.y * r2 * r2);
    Some((res, j_cam, j_point, j_intr))
}

/// Residual only; `None` behind the camera.
pub fn observation_residual(cam: &BaCamera, x: &Vector3<f64>, intr: &CameraIntrinsics, pixel: &Vector2<f64>) -> Option<Vector2<f64>> {
    let xc = cam.rotation * (x - cam.center);
    if xc.z <= 0.0 {
        return None;
    }
    let n = Vector2::new(xc.x / xc.z, xc.y / xc.z);
    let d = distort(&n, intr);
    Some(Vector2::new(intr.fx * d.x + intr.cx - pixel.x, intr.fy * d.y + intr.cy - pixel.y))
}

/// Applies a camera increment `[dθ, dC]`.
pub fn apply_camera_step(cam: &BaCamera, step: &Vector6<f64>) -> BaCamera {
    let dth = Vector3::new(step[0], step[1], step[2]);
    let dc = Vector3::new(step[3], step[4], step[5]);
    BaCamera { rotation: so3_exp(&dth) * cam.rotation, center: cam.center + dc, fixed: cam.fixed }
}

/// Applies an intrinsics increment `[dfx, dk1, dk2]`, keeping fy/fx fixed.
pub fn apply_intrinsics_step(intr: &CameraIntrinsics, step: &Vector3<f64>) -> CameraIntrinsics {
    let ratio = intr.fy / intr.fx;
    let fx = intr.fx + step[0];
    CameraIntrinsics { fx, fy: fx * ratio, k1: intr.k1 + step[1], k2: intr.k2 + step[2], ..*intr }
}

impl BaProblem {
    /// Sum of squared pixel residuals plus squared, sigma-scaled prior
    /// residuals. Observations behind their camera are skipped when
    /// `behind_is_infinite` is false and make the cost infinite otherwise.
    fn cost_with(&self, cams: &[BaCamera], pts: &[Vector3<f64>], intr: &CameraIntrinsics, active: &[bool], behind_is_infinite: bool) -> f64 {
        let mut c = 0.0;
        for (o, &on) in self.observations.iter().zip(active) {
            if !on {
                continue;
            }
            match observation_residual(&cams[o.camera], &pts[o.point], intr, &o.pixel) {
                Some(r) => c += r.norm_squared(),
                None if behind_is_infinite => return f64::INFINITY,
                None => {}
            }
        }
        let w = 1.0 / (self.prior_sigma * self.prior_sigma);
        for p in &self.priors {
            c += (cams[p.camera].center - p.target).norm_squared() * w;
        }
        if let Some(ip) = self.intrinsics_prior.filter(|_| self.refine_intrinsics) {
            c += ip.offset(intr).component_mul(&ip.offset(intr)).dot(&ip.weights());
        }
        c
    }

    /// Current total cost; observations behind their camera are ignored.
    pub fn cost(&self) -> f64 {
        let active = vec![true; self.observations.len()];
        self.cost_with(&self.cameras, &self.points, &self.intrinsics, &active, false)
    }

    /// Largest reprojection error of every observation, in pixels
    /// (infinite behind the camera).
    pub fn reprojection_errors(&self) -> Vec<f64> {
        self.observations
            .iter()
            .map(|o| {
                observation_residual(&self.cameras[o.camera], &self.points[o.point], &self.intrinsics, &o.pixel)
                    .map_or(f64::INFINITY, |r| r.norm())
            })
            .collect()
    }
}

struct Linearization {
    res: Vec<Vector2<f64>>,
    jc: Vec<Matrix2x6<f64>>,
    jp: Vec<Matrix2x3<f64>>,
    jk: Vec<Matrix2x3<f64>>,
    // Normal-equation blocks (undamped).
    u: Vec<Matrix6<f64>>,
    v: Vec<Matrix3<f64>>,
    q: Matrix3<f64>,
    ck: Vec<Matrix6x3<f64>>,
    gc: Vec<Vector6<f64>>,
    gp: Vec<Vector3<f64>>,
    gk: Vector3<f64>,
}

/// Minimizes the bundle-adjustment cost in place.
pub fn bundle_adjust(problem: &mut BaProblem, opts: &BaOptions) -> Result<BaReport> {
    let nc = problem.cameras.len();
    let np = problem.points.len();
    let no = problem.observations.len();
    for o in &problem.observations {
        if o.camera >= nc || o.point >= np {
            return Err(Error::Validation("observation references a missing camera or point".into()));
        }
    }
    // Observations that start behind their camera carry no information.
    let active: Vec<bool> = problem
        .observations
        .iter()
        .map(|o| observation_residual(&problem.cameras[o.camera], &problem.points[o.point], &problem.intrinsics, &o.pixel).is_some())
        .collect();
    let refine_k = problem.refine_intrinsics;
    let prior_w = 1.0 / (problem.prior_sigma * problem.prior_sigma);

    let mut cost = problem.cost_with(&problem.cameras, &problem.points, &problem.intrinsics, &active, true);
    if !cost.is_finite() {
        return Err(Error::Numeric(format!("bundle adjustment initial cost is {cost}")));
    }
    let mut report = BaReport { initial_cost: cost, final_cost: cost, iterations: 0, accepted_steps: 0, cost_history: vec![cost] };
    let mut lambda = opts.initial_lambda;
    let mut nu = 2.0;
    let mut relinearize = true;
    let mut lin: Option<Linearization> = None;

    while report.iterations < opts.max_iterations && cost >= opts.absolute_tolerance {
        if relinearize {
            lin = Some(linearize(problem, &active, refine_k, prior_w));
            relinearize = false;
        }
        let l = lin.as_ref().expect("linearized above");
        report.iterations += 1;

        let (dc, dp, dk) = solve_damped(problem, l, &active, lambda, refine_k, opts);
        let new_cams: Vec<BaCamera> = problem
            .cameras
            .iter()
            .zip(&dc)
            .map(|(c, s)| if c.fixed { *c } else { apply_camera_step(c, s) })
            .collect();
        let new_pts: Vec<Vector3<f64>> = problem.points.iter().zip(&dp).map(|(x, s)| x + s).collect();
        let new_intr = if refine_k { apply_intrinsics_step(&problem.intrinsics, &dk) } else { problem.intrinsics };
        let new_cost = problem.cost_with(&new_cams, &new_pts, &new_intr, &active, true);

        // Predicted decrease of the linear model: -(2 g.d + |J d|^2).
        let mut jd2 = 0.0;
        let mut gd = 0.0;
        for (i, o) in problem.observations.iter().enumerate() {
            if !active[i] {
                continue;
            }
            let mut v = l.jp[i] * dp[o.point];
            if !problem.cameras[o.camera].fixed {
                v += l.jc[i] * dc[o.camera];
            }
            if refine_k {
                v += l.jk[i] * dk;
            }
            jd2 += v.norm_squared();
        }
        for p in &problem.priors {
            if !problem.cameras[p.camera].fixed {
                let d = Vector3::new(dc[p.camera][3], dc[p.camera][4], dc[p.camera][5]);
                jd2 += d.norm_squared() * prior_w;
            }
        }
        for c in 0..nc {
            gd += l.gc[c].dot(&dc[c]);
        }
        for p in 0..np {
            gd += l.gp[p].dot(&dp[p]);
        }
        gd += l.gk.dot(&dk);
        if let Some(ip) = problem.intrinsics_prior.filter(|_| refine_k) {
            jd2 += dk.component_mul(&dk).dot(&ip.weights());
        }
        let predicted = -(2.0 * gd + jd2);

        if new_cost.is_nan() {
            return Err(Error::Numeric("bundle adjustment produced a NaN cost".into()));
        }
        if new_cost < cost {
            let rho = if predicted > 0.0 { (cost - new_cost) / predicted } else { 0.0 };
            let decrease = (cost - new_cost) / cost;
            problem.cameras = new_cams;
            problem.points = new_pts;
            problem.intrinsics = new_intr;
            cost = new_cost;
            report.accepted_steps += 1;
            report.cost_history.push(cost);
            lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
            relinearize = true;
            if decrease < opts.relative_tolerance {
                break;
            }
        } else {
            lambda *= nu;
            nu *= 2.0;
            if lambda > 1e16 {
                break;
            }
        }
    }
    let _ = no;
    report.final_cost = cost;
    Ok(report)
}

fn linearize(problem: &BaProblem, active: &[bool], refine_k: bool, prior_w: f64) -> Linearization {
    let nc = problem.cameras.len();
    let np = problem.points.len();
    let no = problem.observations.len();
    let mut l = Linearization {
        res: vec![Vector2::zeros(); no],
        jc: vec![Matrix2x6::zeros(); no],
        jp: vec![Matrix2x3::zeros(); no],
        jk: vec![Matrix2x3::zeros(); no],
        u: vec![Matrix6::zeros(); nc],
        v: vec![Matrix3::zeros(); np],
        q: Matrix3::zeros(),
        ck: vec![Matrix6x3::zeros(); nc],
        gc: vec![Vector6::zeros(); nc],
        gp: vec![Vector3::zeros(); np],
        gk: Vector3::zeros(),
    };
    for (i, o) in problem.observations.iter().enumerate() {
        if !active[i] {
            continue;
        }
        let cam = &problem.cameras[o.camera];
        let Some((r, jc, jp, jk)) = observation_jacobian(cam, &problem.points[o.point], &problem.intrinsics, &o.pixel) else {
            continue;
        };
        let jc = if cam.fixed { Matrix2x6::zeros() } else { jc };
        let jk = if refine_k { jk } else { Matrix2x3::zeros() };
        l.res[i] = r;
        l.jc[i] = jc;
        l.jp[i] = jp;
        l.jk[i] = jk;
        l.u[o.camera] += jc.transpose() * jc;
        l.ck[o.camera] += jc.transpose() * jk;
        l.v[o.point] += jp.transpose() * jp;
        l.q += jk.transpose() * jk;
        l.gc[o.camera] += jc.transpose() * r;
        l.gp[o.point] += jp.transpose() * r;
        l.gk += jk.transpose() * r;
    }
    for p in &problem.priors {
        if problem.cameras[p.camera].fixed {
            continue;
        }
        let r = problem.cameras[p.camera].center - p.target;
        for k in 0..3 {
            l.u[p.camera][(3 + k, 3 + k)] += prior_w;
            l.gc[p.camera][3 + k] += prior_w * r[k];
        }
    }
    if let Some(ip) = problem.intrinsics_prior.filter(|_| refine_k) {
        let w = ip.weights();
        for k in 0..3 {
            l.q[(k, k)] += w[k];
        }
        l.gk += ip.offset(&problem.intrinsics).component_mul(&w);
    }
    l
}

/// Damped diagonal: `H_ii * (1 + lambda)` with a small floor so that
/// unconstrained directions stay invertible.
fn damp6(m: &Matrix6<f64>, lambda: f64) -> Matrix6<f64> {
    let mut d = *m;
    for i in 0..6 {
        d[(i, i)] += lambda * m[(i, i)].max(1e-9) + 1e-12;
    }
    d
}

fn damp3(m: &Matrix3<f64>, lambda: f64) -> Matrix3<f64> {
    let mut d = *m;
    for i in 0..3 {
        d[(i, i)] += lambda * m[(i, i)].max(1e-9) + 1e-12;
    }
    d
}

fn inv3(m: &Matrix3<f64>) -> Matrix3<f64> {
    m.cholesky().map(|c| c.inverse()).or_else(|| m.try_inverse()).unwrap_or_else(Matrix3::zeros)
}

fn inv6(m: &Matrix6<f64>) -> Matrix6<f64> {
    m.cholesky().map(|c| c.inverse()).or_else(|| m.try_inverse()).unwrap_or_else(Matrix6::zeros)
}

/// Reduced-system vector: one 6-block per camera plus the intrinsics block.
struct Reduced {
    c: Vec<Vector6<f64>>,
    k: Vector3<f64>,
}

impl Reduced {
    fn zeros(nc: usize) -> Self {
        Reduced { c: vec![Vector6::zeros(); nc], k: Vector3::zeros() }
    }
    fn dot(&self, o: &Reduced) -> f64 {
        self.c.iter().zip(&o.c).map(|(a, b)| a.dot(b)).sum::<f64>() + self.k.dot(&o.k)
    }
    fn axpy(&mut self, a: f64, x: &Reduced) {
        for (s, v) in self.c.iter_mut().zip(&x.c) {
            *s += v * a;
        }
        self.k += x.k * a;
    }
}

/// Solves the damped normal equations; returns camera, point and intrinsics
/// steps.
fn solve_damped(
    problem: &BaProblem,
    l: &Linearization,
    active: &[bool],
    lambda: f64,
    refine_k: bool,
    opts: &BaOptions,
) -> (Vec<Vector6<f64>>, Vec<Vector3<f64>>, Vector3<f64>) {
    let nc = problem.cameras.len();
    let np = problem.points.len();
    let obs = &problem.observations;
    let fixed: Vec<bool> = problem.cameras.iter().map(|c| c.fixed).collect();

    let ud: Vec<Matrix6<f64>> = l.u.iter().zip(&fixed).map(|(u, &f)| if f { Matrix6::identity() } else { damp6(u, lambda) }).collect();
    let vinv: Vec<Matrix3<f64>> = l.v.iter().map(|v| inv3(&damp3(v, lambda))).collect();
    let qd = if refine_k { damp3(&l.q, lambda) } else { Matrix3::identity() };

    // Right-hand side: -g_y + H_yp V^-1 g_p.
    let vg: Vec<Vector3<f64>> = (0..np).map(|p| vinv[p] * l.gp[p]).collect();
    let mut b = Reduced::zeros(nc);
    for c in 0..nc {
        b.c[c] = -l.gc[c];
    }
    b.k = -l.gk;
    for (i, o) in obs.iter().enumerate() {
        if !active[i] {
            continue;
        }
        let t = l.jp[i] * vg[o.point];
        b.c[o.camera] += l.jc[i].transpose() * t;
        b.k += l.jk[i].transpose() * t;
    }

    // Block-Jacobi preconditioner from the exact diagonal blocks of S.
    let mut sc = ud.clone();
    let mut sk = qd;
    for (i, o) in obs.iter().enumerate() {
        if !active[i] {
            continue;
        }
        let w = l.jc[i].transpose() * l.jp[i];
        sc[o.camera] -= w * vinv[o.point] * w.transpose();
        if refine_k {
            let z = l.jk[i].transpose() * l.jp[i];
            sk -= z * vinv[o.point] * z.transpose();
        }
    }
    let pc: Vec<Matrix6<f64>> = sc.iter().zip(&ud).map(|(s, u)| {
        let i = inv6(s);
        if i.iter().all(|v| v.is_finite()) && i != Matrix6::zeros() { i } else { inv6(u) }
    }).collect();
    let pk = if refine_k { inv3(&sk) } else { Matrix3::zeros() };

    let apply_s = |x: &Reduced| -> Reduced {
        let mut t = vec![Vector3::zeros(); np];
        for (i, o) in obs.iter().enumerate() {
            if !active[i] {
                continue;
            }
            let a = l.jc[i] * x.c[o.camera] + l.jk[i] * x.k;
            t[o.point] += l.jp[i].transpose() * a;
        }
        for p in 0..np {
            t[p] = vinv[p] * t[p];
        }
        let mut y = Reduced::zeros(nc);
        for c in 0..nc {
            y.c[c] = ud[c] * x.c[c];
            if refine_k {
                y.c[c] += l.ck[c] * x.k;
                y.k += l.ck[c].transpose() * x.c[c];
            }
        }
        y.k += qd * x.k;
        if !refine_k {
            y.k = x.k;
        }
        for (i, o) in obs.iter().enumerate() {
            if !active[i] {
                continue;
            }
            let bu = l.jp[i] * t[o.point];
            y.c[o.camera] -= l.jc[i].transpose() * bu;
            if refine_k {
                y.k -= l.jk[i].transpose() * bu;
            }
        }
        for c in 0..nc {
            if fixed[c] {
                y.c[c] = x.c[c];
            }
        }
        y
    };
    let precond = |r: &Reduced| -> Reduced {
        Reduced {
            c: r.c.iter().zip(&pc).zip(&fixed).map(|((v, m), &f)| if f { Vector6::zeros() } else { m * v }).collect(),
            k: if refine_k { pk * r.k } else { Vector3::zeros() },
        }
    };

    // Preconditioned conjugate gradients.
    let mut x = Reduced::zeros(nc);
    let mut r = Reduced { c: b.c.iter().zip(&fixed).map(|(v, &f)| if f { Vector6::zeros() } else { *v }).collect(), k: if refine_k { b.k } else { Vector3::zeros() } };
    let bnorm = r.dot(&r).sqrt();
    if bnorm > 0.0 {
        let mut z = precond(&r);
        let mut p = Reduced { c: z.c.clone(), k: z.k };
        let mut rz = r.dot(&z);
        for _ in 0..opts.max_cg_iterations {
            let ap = apply_s(&p);
            let pap = p.dot(&ap);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            x.axpy(alpha, &p);
            r.axpy(-alpha, &ap);
            if r.dot(&r).sqrt() <= opts.cg_tolerance * bnorm {
                break;
            }
            z = precond(&r);
            let rz_new = r.dot(&z);
            let beta = rz_new / rz;
            rz = rz_new;
            for (pc_, zc) in p.c.iter_mut().zip(&z.c) {
                *pc_ = zc + *pc_ * beta;
            }
            p.k = z.k + p.k * beta;
        }
    }

    // Back-substitution: dp = V^-1 (-g_p - H_py dy).
    let mut rhs: Vec<Vector3<f64>> = l.gp.iter().map(|g| -g).collect();
    for (i, o) in obs.iter().enumerate() {
        if !active[i] {
            continue;
        }
        let a = l.jc[i] * x.c[o.camera] + l.jk[i] * x.k;
        rhs[o.point] -= l.jp[i].transpose() * a;
    }
    let dp: Vec<Vector3<f64>> = (0..np).map(|p| vinv[p] * rhs[p]).collect();
    let dk = if refine_k { x.k } else { Vector3::zeros() };
    (x.c, dp, dk)
}
