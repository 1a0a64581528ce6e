//! Frame-to-frame association of module detections by quad IoU.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector2;

use crate::geometry::{convex_intersection_area, quad_triangles, signed_area};
use crate::ingest::{DetectionRecord, FrameDetections};

/// Frames a track may go unmatched before it is closed.
const MAX_COAST: u32 = 1;

/// Pixel observation of one module in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub quad: [Vector2<f64>; 4],
    pub center: Vector2<f64>,
}

impl Observation {
    pub fn points(&self) -> [Vector2<f64>; 5] {
        [self.quad[0], self.quad[1], self.quad[2], self.quad[3], self.center]
    }
}

/// One tracked module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleTrack {
    pub track_id: String,
    pub observations: BTreeMap<u32, Observation>,
    /// Upstream identities carried by the detections, if any.
    pub source_ids: BTreeSet<String>,
}

impl ModuleTrack {
    pub fn first_frame(&self) -> u32 {
        *self.observations.keys().next().expect("tracks are never empty")
    }

    pub fn last_frame(&self) -> u32 {
        *self.observations.keys().next_back().expect("tracks are never empty")
    }

    /// The identities used to look up patches and scores: the upstream IDs
    /// when present, otherwise the track ID.
    pub fn lookup_ids(&self) -> Vec<String> {
        if self.source_ids.is_empty() {
            vec![self.track_id.clone()]
        } else {
            self.source_ids.iter().cloned().collect()
        }
    }
}

fn bbox(q: &[Vector2<f64>; 4]) -> [f64; 4] {
    q.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |b, p| {
        [b[0].min(p.x), b[1].min(p.y), b[2].max(p.x), b[3].max(p.y)]
    })
}

fn bboxes_overlap(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

fn quad_key(q: &[Vector2<f64>; 4]) -> [u64; 8] {
    let mut k = [0u64; 8];
    for (i, p) in q.iter().enumerate() {
        k[2 * i] = p.x.to_bits();
        k[2 * i + 1] = p.y.to_bits();
    }
    k
}

/// Intersection over union of two simple quads. Degenerate quads give 0.
pub fn quad_iou(a: &[Vector2<f64>; 4], b: &[Vector2<f64>; 4]) -> f64 {
    // Evaluate in a canonical order so the result is exactly symmetric.
    let (a, b) = if quad_key(a) <= quad_key(b) { (a, b) } else { (b, a) };
    let area_a = signed_area(a).abs();
    let area_b = signed_area(b).abs();
    if !(area_a > 0.0) || !(area_b > 0.0) {
        return 0.0;
    }
    if !bboxes_overlap(&bbox(a), &bbox(b)) {
        return 0.0;
    }
    let ta = quad_triangles(a);
    let tb = quad_triangles(b);
    let mut inter = 0.0;
    for x in &ta {
        for y in &tb {
            inter += convex_intersection_area(x, y);
        }
    }
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Quad a track is matched against at frame `t`. A track that missed the
/// previous frame is extrapolated at its last observed velocity; otherwise
/// a stale box can overlap the next module of a regular row better than
/// that module's own track does.
fn reference_quad(track: &ModuleTrack, t: u32) -> [Vector2<f64>; 4] {
    let mut it = track.observations.iter().rev();
    let (&f1, last) = it.next().expect("tracks are never empty");
    let gap = t - f1;
    match it.next() {
        Some((&f0, prev)) if gap > 1 => {
            let v = (last.center - prev.center) / (f1 - f0) as f64;
            last.quad.map(|p| p + v * gap as f64)
        }
        _ => last.quad,
    }
}

/// Greedy IoU tracker. Detections are matched, in order of descending IoU,
/// to tracks last seen at most two frames earlier; ties go to the lower
/// detection index, then the older track. Zero-area detections are dropped.
pub fn track_frames(frames: &[FrameDetections], iou_threshold: f64) -> Vec<ModuleTrack> {
    let mut tracks: Vec<ModuleTrack> = Vec::new();
    // Indices into `tracks` that can still be extended.
    let mut open: Vec<usize> = Vec::new();
    let mut sorted: Vec<&FrameDetections> = frames.iter().collect();
    sorted.sort_by_key(|f| f.frame);
    for fd in sorted {
        let t = fd.frame;
        open.retain(|&i| t.saturating_sub(tracks[i].last_frame()) <= MAX_COAST + 1);
        let dets: Vec<&DetectionRecord> = fd.detections.iter().filter(|d| d.area() > 0.0).collect();
        let det_boxes: Vec<_> = dets.iter().map(|d| bbox(&d.quad)).collect();

        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (oi, &ti) in open.iter().enumerate() {
            let last = reference_quad(&tracks[ti], t);
            let tb = bbox(&last);
            for (di, d) in dets.iter().enumerate() {
                if !bboxes_overlap(&tb, &det_boxes[di]) {
                    continue;
                }
                let iou = quad_iou(&last, &d.quad);
                if iou > 0.0 && iou >= iou_threshold {
                    cands.push((iou, di, oi));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut det_used = vec![false; dets.len()];
        let mut trk_used = vec![false; open.len()];
        let mut assignment: Vec<Option<usize>> = vec![None; dets.len()];
        for (_, di, oi) in cands {
            if det_used[di] || trk_used[oi] {
                continue;
            }
            det_used[di] = true;
            trk_used[oi] = true;
            assignment[di] = Some(open[oi]);
        }
        for (di, d) in dets.iter().enumerate() {
            let obs = Observation { quad: d.quad, center: d.center };
            match assignment[di] {
                Some(ti) => {
                    tracks[ti].observations.insert(t, obs);
                    if let Some(id) = &d.id {
                        tracks[ti].source_ids.insert(id.clone());
                    }
                }
                None => {
                    let n = tracks.len();
                    tracks.push(ModuleTrack {
                        track_id: format!("{n:06}"),
                        observations: BTreeMap::from([(t, obs)]),
                        source_ids: d.id.iter().cloned().collect(),
                    });
                    open.push(n);
                }
            }
        }
    }
    tracks
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq(x: f64, y: f64, w: f64, h: f64) -> [Vector2<f64>; 4] {
        [Vector2::new(x, y), Vector2::new(x + w, y), Vector2::new(x + w, y + h), Vector2::new(x, y + h)]
    }

    fn det(frame: u32, q: [Vector2<f64>; 4]) -> DetectionRecord {
        let c = (q[0] + q[1] + q[2] + q[3]) / 4.0;
        DetectionRecord { frame, quad: q, center: c, confidence: 1.0, id: None }
    }

    #[test]
    fn iou_examples() {
        let a = sq(0.0, 0.0, 1.0, 1.0);
        assert_eq!(quad_iou(&a, &a), 1.0);
        assert_eq!(quad_iou(&a, &sq(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((quad_iou(&a, &sq(0.5, 0.0, 1.0, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
        let flat = [Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(2.0, 0.0), Vector2::new(3.0, 0.0)];
        assert_eq!(quad_iou(&a, &flat), 0.0);
    }

    #[test]
    fn drifting_detection_is_one_track() {
        let frames: Vec<_> = (0..10)
            .map(|t| FrameDetections { frame: t, detections: vec![det(t, sq(100.0 + 2.0 * t as f64, 50.0, 38.0, 59.0))] })
            .collect();
        let tracks = track_frames(&frames, 0.3);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].observations.len(), 10);
        assert_eq!(tracks[0].track_id, "000000");
    }

    #[test]
    fn disjoint_detections_never_swap() {
        let frames: Vec<_> = (0..10)
            .map(|t| {
                let s = 3.0 * t as f64;
                // Listed in alternating order to catch index-based matching.
                let mut d = vec![det(t, sq(10.0 + s, 10.0, 30.0, 30.0)), det(t, sq(300.0 - s, 200.0, 30.0, 30.0))];
                if t % 2 == 1 {
                    d.reverse();
                }
                FrameDetections { frame: t, detections: d }
            })
            .collect();
        let tracks = track_frames(&frames, 0.3);
        assert_eq!(tracks.len(), 2);
        for tr in &tracks {
            let xs: Vec<f64> = tr.observations.values().map(|o| o.quad[0].x).collect();
            let increasing = xs.windows(2).all(|w| w[1] > w[0]);
            let decreasing = xs.windows(2).all(|w| w[1] < w[0]);
            assert!(increasing || decreasing);
        }
    }

    #[test]
    fn one_frame_gap_coasts_two_frame_gap_splits() {
        let mk = |frames: &[u32]| -> Vec<FrameDetections> {
            frames.iter().map(|&t| FrameDetections { frame: t, detections: vec![det(t, sq(100.0, 50.0, 38.0, 59.0))] }).collect()
        };
        assert_eq!(track_frames(&mk(&[0, 1, 3, 4]), 0.3).len(), 1);
        let split = track_frames(&mk(&[0, 1, 4, 5]), 0.3);
        assert_eq!(split.len(), 2);
        assert_eq!(split[1].track_id, "000001");
    }

    #[test]
    fn coasting_track_does_not_steal_the_next_module() {
        // Abutting 56 px modules scrolling left at 22 px/frame; module k
        // leaves the image once its left edge would go negative.
        let frames: Vec<_> = (0..40)
            .map(|t| {
                let dets = (0..6)
                    .filter_map(|k| {
                        let x = 600.0 + 56.0 * k as f64 - 22.0 * t as f64;
                        (x >= 0.0 && x + 56.0 <= 640.0).then(|| {
                            let mut d = det(t, sq(x, 200.0, 56.0, 87.0));
                            d.id = Some(format!("m{k}"));
                            d
                        })
                    })
                    .collect();
                FrameDetections { frame: t, detections: dets }
            })
            .collect();
        let tracks = track_frames(&frames, 0.3);
        assert_eq!(tracks.len(), 6);
        assert!(tracks.iter().all(|t| t.source_ids.len() == 1));
    }

    #[test]
    fn upstream_ids_are_collected() {
        let mut a = det(0, sq(0.0, 0.0, 40.0, 40.0));
        a.id = Some("r0m3".into());
        let mut b = det(1, sq(4.0, 0.0, 40.0, 40.0));
        b.id = Some("r0m3".into());
        let tracks = track_frames(
            &[FrameDetections { frame: 0, detections: vec![a] }, FrameDetections { frame: 1, detections: vec![b] }],
            0.3,
        );
        assert_eq!(tracks[0].lookup_ids(), vec!["r0m3".to_string()]);
    }

    fn arb_quad() -> impl Strategy<Value = [Vector2<f64>; 4]> {
        (0.0f64..100.0, 0.0f64..100.0, 0.0f64..40.0, 0.0f64..40.0, -5.0f64..5.0)
            .prop_map(|(x, y, w, h, sk)| {
                [Vector2::new(x, y), Vector2::new(x + w, y + sk), Vector2::new(x + w, y + h), Vector2::new(x + sk, y + h)]
            })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_quad(), b in arb_quad()) {
            let ab = quad_iou(&a, &b);
            prop_assert_eq!(ab, quad_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn observation_count_conserved(
            frames in proptest::collection::vec(proptest::collection::vec(arb_quad(), 0..6), 1..12),
        ) {
            let fds: Vec<FrameDetections> = frames.iter().enumerate().map(|(t, qs)| FrameDetections {
                frame: t as u32,
                detections: qs.iter().map(|q| det(t as u32, *q)).collect(),
            }).collect();
            let kept: usize = fds.iter().flat_map(|f| &f.detections).filter(|d| d.area() > 0.0).count();
            let tracks = track_frames(&fds, 0.3);
            prop_assert_eq!(tracks.iter().map(|t| t.observations.len()).sum::<usize>(), kept);
            prop_assert_eq!(track_frames(&fds, 0.3), tracks);
        }
    }
}
