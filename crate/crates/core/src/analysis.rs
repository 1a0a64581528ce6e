//! Per-module thermal statistics, neighbourhood-relative temperatures and
//! anomaly ratios, plus map exports.

use std::path::Path;

use log::warn;
use nalgebra::Vector2;
use serde_json::json;

use crate::geodesy::GeoPoint;
use crate::ingest::Grid;
use crate::modulegeo::{write_json, ModuleGeometry};
use crate::{Error, Result};

/// Display range of temperature maps, in °C.
pub const CLIP_LO_C: f64 = 30.0;
pub const CLIP_HI_C: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchStats {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stat {
    Max,
    Min,
    Mean,
    Median,
}

impl PatchStats {
    pub fn get(&self, which: Stat) -> f64 {
        match which {
            Stat::Max => self.max,
            Stat::Min => self.min,
            Stat::Mean => self.mean,
            Stat::Median => self.median,
        }
    }
}

/// Statistics over the patch after cutting `ceil(border_frac * width)`
/// pixels from every side.
pub fn patch_stats(grid: &Grid<f64>, border_frac: f64) -> Result<PatchStats> {
    let b = (border_frac * grid.width as f64).ceil() as usize;
    if 2 * b >= grid.width || 2 * b >= grid.height {
        return Err(Error::Precondition(format!(
            "{}x{} patch is empty after cropping {b} pixels per side",
            grid.height, grid.width
        )));
    }
    let mut v = Vec::with_capacity((grid.height - 2 * b) * (grid.width - 2 * b));
    for r in b..grid.height - b {
        for c in b..grid.width - b {
            v.push(grid.get(r, c));
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let median = crate::geometry::median_in_place(&mut v).expect("non-empty interior");
    Ok(PatchStats { max: v[v.len() - 1], min: v[0], mean, median })
}

/// Mean of one statistic over the patches of a module.
pub fn module_temperature(stats: &[PatchStats], which: Stat) -> Option<f64> {
    if stats.is_empty() {
        return None;
    }
    Some(stats.iter().map(|s| s.get(which)).sum::<f64>() / stats.len() as f64)
}

/// Mean over patches of every statistic.
pub fn aggregate(stats: &[PatchStats]) -> Option<PatchStats> {
    Some(PatchStats {
        max: module_temperature(stats, Stat::Max)?,
        min: module_temperature(stats, Stat::Min)?,
        mean: module_temperature(stats, Stat::Mean)?,
        median: module_temperature(stats, Stat::Median)?,
    })
}

/// Fixed-point resolution of relative temperatures (2^-24 °C). Working on
/// integers makes the subtraction of a common offset cancel exactly.
const FIXED_SCALE: f64 = (1u64 << 24) as f64;

/// Relative maximum temperature of every module: its own value minus the
/// median over all other modules whose centers lie within `radius`
/// (horizontal distance). Modules without neighbours get 0 and `true` in the
/// second slot.
pub fn relative_temperatures(centers: &[Vector2<f64>], max_temps: &[f64], radius: f64) -> Vec<(f64, bool)> {
    assert_eq!(centers.len(), max_temps.len());
    let fixed: Vec<i64> = max_temps.iter().map(|t| (t * FIXED_SCALE).round() as i64).collect();
    let cell = radius.max(1e-9);
    let key = |p: &Vector2<f64>| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
    let mut grid: std::collections::HashMap<(i64, i64), Vec<usize>> = std::collections::HashMap::new();
    for (i, c) in centers.iter().enumerate() {
        grid.entry(key(c)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(centers.len());
    let mut neigh: Vec<i64> = Vec::new();
    for (i, c) in centers.iter().enumerate() {
        neigh.clear();
        let (gx, gy) = key(c);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for &j in grid.get(&(gx + dx, gy + dy)).into_iter().flatten() {
                    if j != i && (centers[j] - c).norm() <= radius {
                        neigh.push(fixed[j]);
                    }
                }
            }
        }
        if neigh.is_empty() {
            out.push((0.0, true));
            continue;
        }
        neigh.sort_unstable();
        let n = neigh.len();
        // Twice the median, kept integral.
        let twice_med = if n % 2 == 1 { 2 * neigh[n / 2] as i128 } else { neigh[n / 2 - 1] as i128 + neigh[n / 2] as i128 };
        let twice_rel = 2 * fixed[i] as i128 - twice_med;
        out.push((twice_rel as f64 / (2.0 * FIXED_SCALE), false));
    }
    out
}

/// Fraction of patches whose anomaly probability reaches `threshold`.
pub fn anomaly_ratio(scores: &[f64], threshold: f64) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    Some(scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64)
}

/// Everything the maps show about one module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleAnalysis {
    pub temperature: Option<PatchStats>,
    pub relative_max: Option<f64>,
    /// No other module within the neighbourhood radius.
    pub isolated: bool,
    pub n_patches: usize,
    pub anomaly_ratio: Option<f64>,
    pub n_scores: usize,
}

/// Per-module statistics from the patches and scores assigned to each
/// module. Patches that are empty after cropping are skipped with a warning.
pub fn analyze(
    modules: &[ModuleGeometry],
    patches: &[Vec<&Grid<f64>>],
    scores: &[Vec<f64>],
    border_frac: f64,
    radius: f64,
    threshold: f64,
) -> Vec<ModuleAnalysis> {
    let mut out: Vec<ModuleAnalysis> = modules
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let stats: Vec<PatchStats> = patches[i]
                .iter()
                .filter_map(|g| match patch_stats(g, border_frac) {
                    Ok(s) => Some(s),
                    Err(e) => {
                        warn!("module {:?}: patch skipped: {e}", m.track_ids);
                        None
                    }
                })
                .collect();
            ModuleAnalysis {
                temperature: aggregate(&stats),
                relative_max: None,
                isolated: false,
                n_patches: stats.len(),
                anomaly_ratio: anomaly_ratio(&scores[i], threshold),
                n_scores: scores[i].len(),
            }
        })
        .collect();
    let with_temp: Vec<usize> = (0..modules.len()).filter(|&i| out[i].temperature.is_some()).collect();
    let centers: Vec<Vector2<f64>> = with_temp.iter().map(|&i| modules[i].points[4].xy()).collect();
    let maxes: Vec<f64> = with_temp.iter().map(|&i| out[i].temperature.unwrap().max).collect();
    for (&i, (rel, iso)) in with_temp.iter().zip(relative_temperatures(&centers, &maxes, radius)) {
        out[i].relative_max = Some(rel);
        out[i].isolated = iso;
    }
    out
}

fn module_label(m: &ModuleGeometry) -> String {
    m.track_ids.join("+")
}

/// Map layers as GeoJSON polygons with thermal and anomaly properties.
pub fn maps_geojson(modules: &[ModuleGeometry], analysis: &[ModuleAnalysis], origin: &GeoPoint) -> serde_json::Value {
    let mut fc = crate::modulegeo::geojson(modules, origin);
    let features = fc["features"].as_array_mut().expect("feature array");
    for (f, a) in features.iter_mut().zip(analysis) {
        let p = f["properties"].as_object_mut().expect("properties");
        let t = a.temperature;
        p.insert("t_max".into(), json!(t.map(|t| t.max)));
        p.insert("t_mean".into(), json!(t.map(|t| t.mean)));
        p.insert("t_median".into(), json!(t.map(|t| t.median)));
        p.insert("t_min".into(), json!(t.map(|t| t.min)));
        p.insert("t_rel_max".into(), json!(a.relative_max));
        p.insert("isolated".into(), json!(a.isolated));
        p.insert("anomaly_ratio".into(), json!(a.anomaly_ratio));
        p.insert("n_patches".into(), json!(a.n_patches));
    }
    fc["metadata"] = json!({ "clip_lo": CLIP_LO_C, "clip_hi": CLIP_HI_C, "unit": "degC" });
    fc
}

/// Writes `maps.geojson` and `maps.csv` into `dir`.
pub fn export_maps(modules: &[ModuleGeometry], analysis: &[ModuleAnalysis], origin: &GeoPoint, dir: &Path) -> Result<()> {
    write_json(&dir.join("maps.geojson"), &maps_geojson(modules, analysis, origin))?;
    let path = dir.join("maps.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Validation(format!("{}: {e}", path.display()));
    w.write_record(["track_id", "lat", "lon", "t_max", "t_mean", "t_median", "t_min", "t_rel_max", "anomaly_ratio", "n_patches"])
        .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (m, a) in modules.iter().zip(analysis) {
        let c = m.geo(origin)[4];
        let t = a.temperature;
        w.write_record([
            module_label(m),
            c.latitude.to_string(),
            c.longitude.to_string(),
            opt(t.map(|t| t.max)),
            opt(t.map(|t| t.mean)),
            opt(t.map(|t| t.median)),
            opt(t.map(|t| t.min)),
            opt(a.relative_max),
            opt(a.anomaly_ratio),
            a.n_patches.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, v: f64) -> Grid<f64> {
        Grid::filled(h, w, v)
    }

    #[test]
    fn constant_patch() {
        let s = patch_stats(&grid(20, 20, 40.0), 0.05).unwrap();
        assert_eq!(s, PatchStats { max: 40.0, min: 40.0, mean: 40.0, median: 40.0 });
    }

    #[test]
    fn hot_pixel_inside_and_in_border() {
        let mut g = grid(20, 20, 35.0);
        g.set(10, 10, 60.0);
        let s = patch_stats(&g, 0.05).unwrap();
        assert_eq!((s.max, s.median), (60.0, 35.0));
        let mut g = grid(20, 20, 35.0);
        g.set(10, 0, 60.0);
        assert_eq!(patch_stats(&g, 0.05).unwrap().max, 35.0);
    }

    #[test]
    fn crop_uses_ceiling() {
        // ceil(0.05 * 24) = 2 pixels per side.
        let mut g = grid(40, 24, 30.0);
        g.set(5, 1, 90.0);
        g.set(5, 2, 50.0);
        assert_eq!(patch_stats(&g, 0.05).unwrap().max, 50.0);
        assert!(patch_stats(&grid(8, 8, 1.0), 0.5).is_err());
    }

    #[test]
    fn module_temperature_is_mean() {
        let p = |m| PatchStats { max: m, min: 0.0, mean: 0.0, median: 0.0 };
        assert_eq!(module_temperature(&[p(40.0)], Stat::Max), Some(40.0));
        assert_eq!(module_temperature(&[p(40.0), p(42.0), p(44.0)], Stat::Max), Some(42.0));
        assert_eq!(module_temperature(&[], Stat::Max), None);
    }

    fn grid3() -> Vec<Vector2<f64>> {
        (0..9).map(|i| Vector2::new((i % 3) as f64, (i / 3) as f64)).collect()
    }

    #[test]
    fn hot_center_of_three_by_three() {
        let mut t = vec![40.0; 9];
        t[4] = 50.0;
        // A radius of 1 m reaches the four edge neighbours only.
        let r = relative_temperatures(&grid3(), &t, 1.0);
        assert_eq!(r[4], (10.0, false));
        for i in [1, 3, 5, 7] {
            assert_eq!(r[i].0, 0.0, "edge {i}");
        }
    }

    #[test]
    fn isolated_modules_are_flagged() {
        let r = relative_temperatures(&[Vector2::new(0.0, 0.0), Vector2::new(100.0, 0.0)], &[40.0, 45.0], 7.0);
        assert_eq!(r, vec![(0.0, true), (0.0, true)]);
    }

    #[test]
    fn anomaly_ratio_examples() {
        assert_eq!(anomaly_ratio(&[0.9; 4], 0.5), Some(1.0));
        assert_eq!(anomaly_ratio(&[0.2, 0.7, 0.9, 0.1], 0.5), Some(0.5));
        assert_eq!(anomaly_ratio(&[], 0.5), None);
    }

    // Brute-force neighbourhood oracle in plain floating point.
    fn oracle(c: &[Vector2<f64>], t: &[f64], r: f64) -> Vec<f64> {
        (0..c.len())
            .map(|i| {
                let mut n: Vec<f64> = (0..c.len()).filter(|&j| j != i && (c[j] - c[i]).norm() <= r).map(|j| t[j]).collect();
                if n.is_empty() {
                    return 0.0;
                }
                n.sort_by(f64::total_cmp);
                let k = n.len();
                let med = if k % 2 == 1 { n[k / 2] } else { 0.5 * (n[k / 2 - 1] + n[k / 2]) };
                t[i] - med
            })
            .collect()
    }

    fn instance() -> impl Strategy<Value = (Vec<Vector2<f64>>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((0.0..30.0f64, 0.0..30.0f64).prop_map(|(x, y)| Vector2::new(x, y)), n),
                prop::collection::vec(20.0..80.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((c, t) in instance()) {
            let got = relative_temperatures(&c, &t, 7.0);
            for (g, o) in got.iter().zip(oracle(&c, &t, 7.0)) {
                prop_assert!((g.0 - o).abs() < 1e-6);
            }
        }

        #[test]
        fn offsets_cancel_exactly((c, t) in instance(), k in -400i32..400) {
            let shift = k as f64 / 8.0;
            let a = relative_temperatures(&c, &t, 7.0);
            let shifted: Vec<f64> = t.iter().map(|v| v + shift).collect();
            let b = relative_temperatures(&c, &shifted, 7.0);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn scaling_scales((c, t) in instance(), s in 0.1..10.0f64) {
            let a = relative_temperatures(&c, &t, 7.0);
            let scaled: Vec<f64> = t.iter().map(|v| v * s).collect();
            let b = relative_temperatures(&c, &scaled, 7.0);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.0 * s - y.0).abs() < 1e-5);
            }
        }

        #[test]
        fn raising_a_pixel_never_lowers_max_or_mean(v in prop::collection::vec(20.0..60.0f64, 400), idx in 0usize..400, d in 0.0..10.0f64) {
            let g = Grid::new(20, 20, v.clone()).unwrap();
            let mut h = g.clone();
            h.data[idx] += d;
            let (a, b) = (patch_stats(&g, 0.05).unwrap(), patch_stats(&h, 0.05).unwrap());
            prop_assert!(b.max >= a.max && b.mean >= a.mean - 1e-12);
        }

        #[test]
        fn ratio_monotone(s in prop::collection::vec(0.0..=1.0f64, 1..30), i in 0usize..30, up in 0.0..1.0f64, th in 0.0..=1.0f64, th2 in 0.0..=1.0f64) {
            let r = anomaly_ratio(&s, th).unwrap();
            let mut s2 = s.clone();
            let k = i % s.len();
            s2[k] = (s2[k] + up).min(1.0);
            prop_assert!(anomaly_ratio(&s2, th).unwrap() >= r);
            let (lo, hi) = (th.min(th2), th.max(th2));
            prop_assert!(anomaly_ratio(&s, hi).unwrap() <= anomaly_ratio(&s, lo).unwrap());
            let mut p = s.clone();
            p.reverse();
            prop_assert_eq!(anomaly_ratio(&p, th), anomaly_ratio(&s, th));
        }
    }

    #[test]
    fn maps_round_trip_and_empty() {
        let origin = GeoPoint::new(48.0, 11.0, Some(0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_maps(&[], &[], &origin, dir.path()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("maps.geojson")).unwrap()).unwrap();
        assert_eq!(v["features"].as_array().unwrap().len(), 0);
        assert_eq!(v["metadata"]["clip_lo"], 30.0);
        assert_eq!(v["metadata"]["clip_hi"], 50.0);
        let csv = std::fs::read_to_string(dir.path().join("maps.csv")).unwrap();
        assert_eq!(csv.trim(), "track_id,lat,lon,t_max,t_mean,t_median,t_min,t_rel_max,anomaly_ratio,n_patches");

        let pts = [nalgebra::Vector3::new(0.0, 1.0, 1.0), nalgebra::Vector3::new(1.0, 1.0, 1.0), nalgebra::Vector3::new(1.0, 0.0, 0.5), nalgebra::Vector3::new(0.0, 0.0, 0.5), nalgebra::Vector3::new(0.5, 0.5, 0.75)];
        let m = ModuleGeometry {
            track_ids: vec!["t1".into()],
            source_ids: Default::default(),
            points: pts,
            contributing_pairs: vec![],
            observations: Default::default(),
        };
        let a = ModuleAnalysis {
            temperature: Some(PatchStats { max: 45.5, min: 37.0, mean: 39.0, median: 38.5 }),
            relative_max: Some(6.25),
            isolated: false,
            n_patches: 3,
            anomaly_ratio: Some(2.0 / 3.0),
            n_scores: 3,
        };
        export_maps(&[m], &[a], &origin, dir.path()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("maps.geojson")).unwrap()).unwrap();
        let p = &v["features"][0]["properties"];
        assert_eq!(p["t_max"], 45.5);
        assert_eq!(p["t_rel_max"], 6.25);
        assert_eq!(p["anomaly_ratio"].as_f64().unwrap(), 2.0 / 3.0);
        let mut r = csv::Reader::from_path(dir.path().join("maps.csv")).unwrap();
        let row = r.records().next().unwrap().unwrap();
        assert_eq!(&row[0], "t1");
        assert_eq!(row[3].parse::<f64>().unwrap(), 45.5);
        assert_eq!(row[8].parse::<f64>().unwrap(), 2.0 / 3.0);
    }
}
