//! Pinhole camera with Brown-Conrady distortion.
//!
//! Normalized image coordinates are `(x/z, y/z)` in the camera frame. Pixel
//! coordinates follow the usual convention: `u = fx * xd + cx`,
//! `v = fy * yd + cy`, where `(xd, yd)` is the distorted normalized point.
//! The camera looks along +z with +x to the right and +y down in the image.

use nalgebra::{Matrix2, Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const UNDISTORT_MAX_ITER: usize = 20;
const UNDISTORT_STEP_TOL: f64 = 1e-10;

/// Calibrated pinhole parameters and the five distortion coefficients in the
/// common `k1, k2, p1, p2, k3` layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Distortion-free camera.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        CameraIntrinsics { fx, fy, cx, cy, k1: 0.0, k2: 0.0, p1: 0.0, p2: 0.0, k3: 0.0, width, height }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Validation(format!("focal lengths must be positive: fx={} fy={}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image size must be positive".into()));
        }
        let all = [self.cx, self.cy, self.k1, self.k2, self.p1, self.p2, self.k3];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite intrinsic parameter".into()));
        }
        Ok(())
    }

    pub fn is_distortion_free(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0 && self.k3 == 0.0
    }

    /// Maps a distorted normalized point to pixels.
    pub fn to_pixel(&self, xd: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * xd.x + self.cx, self.fy * xd.y + self.cy)
    }

    /// Maps pixels to a distorted normalized point.
    pub fn from_pixel(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= self.width as f64 && px.y <= self.height as f64
    }
}

/// Rigid world-to-camera transform: `X_cam = rotation * X_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6Dof {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose6Dof {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose6Dof {
    pub fn identity() -> Self {
        Pose6Dof { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose6Dof { rotation, translation }
    }

    /// Pose from a world-to-camera rotation and the camera center in world
    /// coordinates.
    pub fn from_center(rotation: Matrix3<f64>, center: &Vector3<f64>) -> Self {
        Pose6Dof { rotation, translation: -(rotation * center) }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Pose6Dof) -> Pose6Dof {
        Pose6Dof {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose6Dof {
        let rt = self.rotation.transpose();
        Pose6Dof { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Orthonormal with determinant +1 within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        ortho <= tol && (r.determinant() - 1.0).abs() <= tol && self.translation.iter().all(|v| v.is_finite())
    }

    /// Projects the rotation back onto SO(3).
    pub fn orthonormalized(&self) -> Pose6Dof {
        let rot = Rotation3::from_matrix_eps(&self.rotation, 1e-15, 100, Rotation3::identity());
        Pose6Dof { rotation: rot.into_inner(), translation: self.translation }
    }

    /// Row-major rotation entries.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]]
    }
}

/// Brown-Conrady forward model on a normalized point.
pub fn distort(p: &Vector2<f64>, intr: &CameraIntrinsics) -> Vector2<f64> {
    let (x, y) = (p.x, p.y);
    let r2 = x * x + y * y;
    let radial = 1.0 + r2 * (intr.k1 + r2 * (intr.k2 + r2 * intr.k3));
    Vector2::new(
        x * radial + 2.0 * intr.p1 * x * y + intr.p2 * (r2 + 2.0 * x * x),
        y * radial + intr.p1 * (r2 + 2.0 * y * y) + 2.0 * intr.p2 * x * y,
    )
}

/// Jacobian of [`distort`] with respect to the normalized point.
pub fn distort_jacobian(p: &Vector2<f64>, intr: &CameraIntrinsics) -> Matrix2<f64> {
    let (x, y) = (p.x, p.y);
    let r2 = x * x + y * y;
    let radial = 1.0 + r2 * (intr.k1 + r2 * (intr.k2 + r2 * intr.k3));
    // d radial / d r2
    let dr = intr.k1 + 2.0 * intr.k2 * r2 + 3.0 * intr.k3 * r2 * r2;
    Matrix2::new(
        radial + 2.0 * x * x * dr + 2.0 * intr.p1 * y + 6.0 * intr.p2 * x,
        2.0 * x * y * dr + 2.0 * intr.p1 * x + 2.0 * intr.p2 * y,
        2.0 * x * y * dr + 2.0 * intr.p1 * x + 2.0 * intr.p2 * y,
        radial + 2.0 * y * y * dr + 6.0 * intr.p1 * y + 2.0 * intr.p2 * x,
    )
}

/// Pixel to undistorted normalized coordinates, inverting [`distort`] with
/// Newton's method.
pub fn undistort(pixel: &Vector2<f64>, intr: &CameraIntrinsics) -> Result<Vector2<f64>> {
    let target = intr.from_pixel(pixel);
    if intr.is_distortion_free() {
        return Ok(target);
    }
    let mut x = target;
    for _ in 0..UNDISTORT_MAX_ITER {
        let r = distort(&x, intr) - target;
        let j = distort_jacobian(&x, intr);
        let step = match j.try_inverse() {
            Some(inv) => inv * r,
            None => return Err(Error::Divergence(pixel.x, pixel.y)),
        };
        x -= step;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(pixel.x, pixel.y));
        }
        if step.norm() < UNDISTORT_STEP_TOL {
            // A root past the fold of the radial polynomial is not physical.
            let r2 = x.norm_squared();
            let radial = 1.0 + r2 * (intr.k1 + r2 * (intr.k2 + r2 * intr.k3));
            if radial <= 0.0 || distort_jacobian(&x, intr).determinant() <= 0.0 {
                return Err(Error::Divergence(pixel.x, pixel.y));
            }
            return Ok(x);
        }
    }
    Err(Error::Divergence(pixel.x, pixel.y))
}

/// Projects a world point to pixels; `None` when the point is not in front of
/// the camera.
pub fn project(world: &Vector3<f64>, pose: &Pose6Dof, intr: &CameraIntrinsics) -> Option<Vector2<f64>> {
    let xc = pose.transform(world);
    if xc.z <= 0.0 {
        return None;
    }
    let n = Vector2::new(xc.x / xc.z, xc.y / xc.z);
    Some(intr.to_pixel(&distort(&n, intr)))
}

/// World-frame viewing ray through a pixel: camera center and unit direction.
pub fn pixel_ray(
    pixel: &Vector2<f64>,
    pose: &Pose6Dof,
    intr: &CameraIntrinsics,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let n = undistort(pixel, intr)?;
    let dir = pose.rotation.transpose() * Vector3::new(n.x, n.y, 1.0);
    Ok((pose.center(), dir.normalize()))
}

/// Angle in radians between two directions.
pub fn ray_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    // atan2 of cross and dot is accurate for both tiny and near-pi angles.
    a.cross(b).norm().atan2(a.dot(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;

    fn intr(k1: f64, k2: f64, p1: f64, p2: f64, k3: f64) -> CameraIntrinsics {
        CameraIntrinsics { fx: 765.0, fy: 765.0, cx: 320.0, cy: 256.0, k1, k2, p1, p2, k3, width: 640, height: 512 }
    }

    #[test]
    fn distortion_identity_and_origin() {
        let zero = intr(0.0, 0.0, 0.0, 0.0, 0.0);
        let p = Vector2::new(0.3, -0.2);
        assert_eq!(distort(&p, &zero), p);
        let heavy = intr(-0.4, 0.2, 0.01, -0.02, 0.05);
        assert_eq!(distort(&Vector2::zeros(), &heavy), Vector2::zeros());
    }

    #[test]
    fn radial_polynomial_oracle() {
        let c = intr(-0.3, 0.0, 0.0, 0.0, 0.0);
        let d = distort(&Vector2::new(0.5, 0.0), &c);
        assert!((d.x - 0.4625).abs() < 1e-15 && d.y == 0.0);

        let px = c.to_pixel(&Vector2::new(0.4625, 0.0));
        let u = undistort(&px, &c).unwrap();
        assert!((u.x - 0.5).abs() < 1e-10 && u.y.abs() < 1e-12);
    }

    #[test]
    fn undistort_trivial_cases() {
        let zero = intr(0.0, 0.0, 0.0, 0.0, 0.0);
        let u = undistort(&Vector2::new(400.0, 100.0), &zero).unwrap();
        assert_eq!(u, Vector2::new(80.0 / 765.0, -156.0 / 765.0));
        let c = intr(-0.2, 0.05, 0.001, 0.002, 0.0);
        assert_eq!(undistort(&Vector2::new(320.0, 256.0), &c).unwrap(), Vector2::zeros());
    }

    #[test]
    fn pathological_coefficients_diverge() {
        let c = intr(-5.0, 0.0, 0.0, 0.0, 0.0);
        let err = undistort(&Vector2::new(639.0, 511.0), &c).unwrap_err();
        assert!(matches!(err, Error::Divergence(..)));
    }

    #[test]
    fn projection_examples() {
        let c = intr(0.0, 0.0, 0.0, 0.0, 0.0);
        let id = Pose6Dof::identity();
        let p = project(&Vector3::new(0.0, 0.0, 10.0), &id, &c).unwrap();
        assert_eq!(p, Vector2::new(320.0, 256.0));
        let p = project(&Vector3::new(1.0, 0.0, 10.0), &id, &c).unwrap();
        assert!((p.x - (765.0 * 0.1 + 320.0)).abs() < 1e-12 && p.y == 256.0);
        assert!(project(&Vector3::new(0.0, 0.0, -1.0), &id, &c).is_none());
        assert!(project(&Vector3::new(1.0, 1.0, 0.0), &id, &c).is_none());
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let c = intr(-0.1, 0.01, 0.0, 0.0, 0.0);
        let (o, d) = pixel_ray(&Vector2::new(320.0, 256.0), &Pose6Dof::identity(), &c).unwrap();
        assert_eq!(o, Vector3::zeros());
        assert_eq!(d, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn identity_composition_is_bit_identical() {
        let c = intr(-0.1, 0.01, 0.001, -0.001, 0.0);
        let rot = UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3).to_rotation_matrix().into_inner();
        let pose = Pose6Dof::new(rot, Vector3::new(1.0, 2.0, 3.0));
        let same = pose.compose(&Pose6Dof::identity());
        let x = Vector3::new(0.5, -0.3, 12.0);
        assert_eq!(project(&x, &pose, &c), project(&x, &same, &c));
    }

    #[test]
    fn pose_center_and_inverse() {
        let rot = UnitQuaternion::from_euler_angles(0.3, 0.1, -1.2).to_rotation_matrix().into_inner();
        let c = Vector3::new(5.0, -2.0, 20.0);
        let pose = Pose6Dof::from_center(rot, &c);
        assert!((pose.center() - c).norm() < 1e-12);
        assert!(pose.transform(&c).norm() < 1e-12);
        let round = pose.compose(&pose.inverse());
        assert!(round.is_valid(1e-12));
        assert!((round.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(round.translation.norm() < 1e-12);
    }

    #[test]
    fn distortion_jacobian_matches_finite_differences() {
        let c = intr(-0.25, 0.08, 0.003, -0.002, 0.01);
        let p = Vector2::new(0.31, -0.22);
        let j = distort_jacobian(&p, &c);
        let h = 1e-6;
        for k in 0..2 {
            let mut e = Vector2::zeros();
            e[k] = h;
            let fd = (distort(&(p + e), &c) - distort(&(p - e), &c)) / (2.0 * h);
            for r in 0..2 {
                assert!((fd[r] - j[(r, k)]).abs() < 1e-8);
            }
        }
    }

    fn arb_pose() -> impl Strategy<Value = Pose6Dof> {
        (-3.1f64..3.1, -1.5f64..1.5, -3.1f64..3.1, -50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0).prop_map(
            |(a, b, c, x, y, z)| {
                let rot = UnitQuaternion::from_euler_angles(a, b, c).to_rotation_matrix().into_inner();
                Pose6Dof::new(rot, Vector3::new(x, y, z))
            },
        )
    }

    proptest! {
        #[test]
        fn distort_undistort_inverse(
            x in -0.5f64..0.5, y in -0.5f64..0.5,
            k1 in -0.3f64..0.1, k2 in -0.05f64..0.05, p1 in -0.002f64..0.002, p2 in -0.002f64..0.002,
        ) {
            let c = intr(k1, k2, p1, p2, 0.0);
            let n = Vector2::new(x, y);
            let px = c.to_pixel(&distort(&n, &c));
            let back = undistort(&px, &c).unwrap();
            prop_assert!((back - n).norm() < 1e-8);
            // and the forward direction
            let again = c.to_pixel(&distort(&back, &c));
            prop_assert!((c.from_pixel(&again) - c.from_pixel(&px)).norm() < 1e-8);
        }

        #[test]
        fn ray_depth_reprojects(pose in arb_pose(), u in 0.0f64..640.0, v in 0.0f64..512.0, depth in 0.5f64..500.0) {
            let c = intr(-0.12, 0.02, 0.0005, -0.0003, 0.0);
            let px = Vector2::new(u, v);
            let (o, d) = pixel_ray(&px, &pose, &c).unwrap();
            let back = project(&(o + d * depth), &pose, &c).unwrap();
            prop_assert!((back - px).norm() < 1e-6);
        }

        #[test]
        fn poses_are_orthonormal(pose in arb_pose()) {
            prop_assert!(pose.is_valid(1e-9));
            prop_assert!(pose.inverse().is_valid(1e-9));
        }
    }
}
