//! Keyframe selection by travelled distance and inter-frame overlap.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geodesy::LtpPoint;
use crate::geometry::{convex_intersection_area, homography_dlt, quad_triangles, ransac_homography, rect, signed_area, RansacParams};
use crate::ingest::FeatureObservation;
use crate::tracking::ModuleTrack;

/// Identity of a 2-D point shared between frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PointKey {
    /// Point `k` (corners 0-3, center 4) of the module track at this index.
    Module { track: usize, point: u8 },
    Feature(u64),
}

/// Everything keyframe selection needs to know about one video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInfo {
    pub frame: u32,
    pub position: LtpPoint,
    /// Sorted by key.
    pub points: Vec<(PointKey, Vector2<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub frame: u32,
    pub gps: LtpPoint,
}

#[derive(Debug, Clone, Copy)]
pub struct KeyframeParams {
    pub d_min: f64,
    pub iou_min: f64,
    pub width: u32,
    pub height: u32,
    pub ransac: RansacParams,
    pub seed: u64,
}

impl KeyframeParams {
    pub fn new(width: u32, height: u32) -> Self {
        KeyframeParams { d_min: 0.75, iou_min: 0.85, width, height, ransac: RansacParams::default(), seed: 0 }
    }
}

/// Collects per-frame point observations from module tracks and feature
/// observations. `positions` supplies the LTP position of every frame to
/// include; frames without points are kept.
pub fn frame_infos(
    tracks: &[ModuleTrack],
    features: &[FeatureObservation],
    positions: &[(u32, LtpPoint)],
) -> Vec<FrameInfo> {
    let mut infos: Vec<FrameInfo> =
        positions.iter().map(|&(frame, position)| FrameInfo { frame, position, points: Vec::new() }).collect();
    infos.sort_by_key(|f| f.frame);
    let index = |f: u32| infos.binary_search_by_key(&f, |i| i.frame).ok();
    let mut add: Vec<(usize, PointKey, Vector2<f64>)> = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        for (&f, obs) in &t.observations {
            if let Some(i) = index(f) {
                for (k, p) in obs.points().iter().enumerate() {
                    add.push((i, PointKey::Module { track: ti, point: k as u8 }, *p));
                }
            }
        }
    }
    for o in features {
        if let Some(i) = index(o.frame) {
            add.push((i, PointKey::Feature(o.id), o.pixel));
        }
    }
    for (i, k, p) in add {
        infos[i].points.push((k, p));
    }
    for f in &mut infos {
        f.points.sort_by(|a, b| a.0.cmp(&b.0));
        f.points.dedup_by(|a, b| a.0 == b.0);
    }
    infos
}

/// Shared points of two frames, as (point in a, point in b).
pub fn correspondences(a: &FrameInfo, b: &FrameInfo) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
    let (mut i, mut j) = (0, 0);
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    while i < a.points.len() && j < b.points.len() {
        match a.points[i].0.cmp(&b.points[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                pa.push(a.points[i].1);
                pb.push(b.points[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    (pa, pb)
}

/// Overlap of two image rectangles after mapping the first through `h`:
/// intersection area over the area covered by both.
pub fn projected_rect_iou(h: &Matrix3<f64>, width: f64, height: f64) -> f64 {
    let r = rect(width, height);
    let mut q = [Vector2::zeros(); 4];
    for (k, p) in r.iter().enumerate() {
        let v = h * Vector3::new(p.x, p.y, 1.0);
        if !(v.z > 0.0) {
            return 0.0;
        }
        q[k] = Vector2::new(v.x / v.z, v.y / v.z);
    }
    if !crate::geometry::is_simple_quad(&q) {
        return 0.0;
    }
    let area_q = signed_area(&q).abs();
    let inter: f64 = quad_triangles(&q).iter().map(|t| convex_intersection_area(t, &r)).sum();
    let union = area_q + width * height - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Overlap between two frames estimated from a homography fitted to their
/// shared points. Fewer than four shared points give 0.
pub fn frame_iou(a: &FrameInfo, b: &FrameInfo, params: &KeyframeParams) -> f64 {
    let (pa, pb) = correspondences(a, b);
    if pa.len() < 4 {
        return 0.0;
    }
    let h = if pa.len() == 4 {
        homography_dlt(&pa, &pb)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ ((a.frame as u64) << 32 | b.frame as u64));
        ransac_homography(&pa, &pb, &params.ransac, &mut rng).map(|(h, _)| h)
    };
    match h {
        Some(h) => projected_rect_iou(&h, params.width as f64, params.height as f64),
        None => 0.0,
    }
}

/// Selects keyframes: the first frame, then every frame whose travelled
/// distance since the previous keyframe exceeds `d_min` or whose overlap with
/// the previous keyframe drops below `iou_min`.
pub fn select_keyframes(frames: &[FrameInfo], params: &KeyframeParams) -> Vec<Keyframe> {
    let mut out = Vec::new();
    let Some(first) = frames.first() else { return out };
    out.push(Keyframe { frame: first.frame, gps: first.position });
    let mut last_kf = 0usize;
    let mut travelled = 0.0;
    for i in 1..frames.len() {
        travelled += (frames[i].position.vec() - frames[i - 1].position.vec()).norm();
        let select = travelled > params.d_min || frame_iou(&frames[i], &frames[last_kf], params) < params.iou_min;
        if select {
            out.push(Keyframe { frame: frames[i].frame, gps: frames[i].position });
            last_kf = i;
            travelled = 0.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{project, CameraIntrinsics, Pose6Dof};
    use crate::geometry::so3_exp;
    use proptest::prelude::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::pinhole(765.0, 765.0, 320.0, 256.0, 640, 512)
    }

    fn nadir(e: f64, n: f64, yaw: f64) -> Pose6Dof {
        let down = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        Pose6Dof::from_center(so3_exp(&Vector3::new(0.0, 0.0, yaw)) * down, &Vector3::new(e, n, 20.0))
    }

    /// A flat grid of ground features seen from a nadir camera.
    fn frame(f: u32, e: f64, n: f64, yaw: f64) -> FrameInfo {
        let pose = nadir(e, n, yaw);
        let c = cam();
        let mut points = Vec::new();
        for i in -40..40 {
            for j in -40..40 {
                let x = Vector3::new(i as f64 * 0.7, j as f64 * 0.7, 0.0);
                if let Some(p) = project(&x, &pose, &c) {
                    if c.contains(&p) {
                        points.push((PointKey::Feature(((i + 40) * 100 + j + 40) as u64), p));
                    }
                }
            }
        }
        points.sort_by(|a, b| a.0.cmp(&b.0));
        FrameInfo { frame: f, position: LtpPoint::new(e, n, 20.0), points }
    }

    #[test]
    fn identical_frames_overlap_fully() {
        let a = frame(0, 0.0, 0.0, 0.0);
        let p = KeyframeParams::new(640, 512);
        assert!((frame_iou(&a, &a, &p) - 1.0).abs() < 1e-9);
        let empty = FrameInfo { frame: 1, position: LtpPoint::ORIGIN, points: vec![] };
        assert_eq!(frame_iou(&a, &empty, &p), 0.0);
    }

    #[test]
    fn half_width_shift_gives_one_third() {
        let h = Matrix3::new(1.0, 0.0, 320.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((projected_rect_iou(&h, 640.0, 512.0) - 1.0 / 3.0).abs() < 1e-12);
        // The same shift recovered from points: half the image is 320 px, i.e.
        // 320 / 765 * 20 m of eastward motion.
        let d = 320.0 / 765.0 * 20.0;
        let a = frame(0, 0.0, 0.0, 0.0);
        let b = frame(1, d, 0.0, 0.0);
        assert!((frame_iou(&b, &a, &KeyframeParams::new(640, 512)) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn noiseless_homography_reprojects_exactly() {
        let a = frame(0, 0.0, 0.0, 0.0);
        let b = frame(1, 1.3, -0.4, 0.2);
        let (pa, pb) = correspondences(&a, &b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, _) = ransac_homography(&pa, &pb, &RansacParams::default(), &mut rng).unwrap();
        for (p, q) in pa.iter().zip(&pb) {
            assert!((crate::geometry::apply_h(&h, p) - q).norm() < 1e-6);
        }
    }

    #[test]
    fn hovering_gives_one_keyframe() {
        let frames: Vec<_> = (0..30).map(|f| frame(f, 0.0, 0.0, 0.0)).collect();
        assert_eq!(select_keyframes(&frames, &KeyframeParams::new(640, 512)).len(), 1);
    }

    #[test]
    fn constant_speed_selects_every_second_frame() {
        // 4 m/s at 8 Hz.
        let frames: Vec<_> = (0..40).map(|f| frame(f, 0.5 * f as f64, 0.0, 0.0)).collect();
        let kf = select_keyframes(&frames, &KeyframeParams::new(640, 512));
        let idx: Vec<u32> = kf.iter().map(|k| k.frame).collect();
        assert_eq!(idx, (0..40).step_by(2).collect::<Vec<_>>());
    }

    #[test]
    fn yaw_without_translation_fires_overlap_rule() {
        let a = frame(0, 0.0, 0.0, 0.0);
        let b = frame(1, 0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let p = KeyframeParams::new(640, 512);
        assert!(frame_iou(&b, &a, &p) < 0.85);
        let kf = select_keyframes(&[a, b], &p);
        assert_eq!(kf.len(), 2);
    }

    proptest! {
        #[test]
        fn lower_distance_threshold_never_fewer_keyframes(
            steps in proptest::collection::vec(0.0f64..1.0, 2..60), d1 in 0.1f64..2.0, d2 in 0.1f64..2.0,
        ) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let mut e = 0.0;
            let frames: Vec<FrameInfo> = steps.iter().enumerate().map(|(i, s)| {
                e += s;
                FrameInfo { frame: i as u32, position: LtpPoint::new(e, 0.0, 20.0), points: vec![] }
            }).collect();
            let mk = |d| KeyframeParams { d_min: d, iou_min: 0.0, ..KeyframeParams::new(640, 512) };
            let n_lo = select_keyframes(&frames, &mk(lo)).len();
            let n_hi = select_keyframes(&frames, &mk(hi)).len();
            prop_assert!(n_lo >= n_hi);
            prop_assert_eq!(select_keyframes(&frames, &mk(lo)), select_keyframes(&frames, &mk(lo)));
        }

        #[test]
        fn higher_overlap_threshold_never_fewer_keyframes(i1 in 0.3f64..0.99, i2 in 0.3f64..0.99) {
            let (lo, hi) = if i1 < i2 { (i1, i2) } else { (i2, i1) };
            let frames: Vec<_> = (0..25).map(|f| frame(f, 0.6 * f as f64, 0.0, 0.0)).collect();
            let mk = |t| KeyframeParams { d_min: f64::INFINITY, iou_min: t, ..KeyframeParams::new(640, 512) };
            prop_assert!(select_keyframes(&frames, &mk(hi)).len() >= select_keyframes(&frames, &mk(lo)).len());
        }
    }
}
