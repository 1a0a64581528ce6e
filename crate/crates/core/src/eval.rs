//! Accuracy metrics: horizontal RMSE, per-row aligned RMSE and AUROC, plus
//! the detector comparison table.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector2;
use serde::Serialize;

use crate::geodesy::LtpPoint;
use crate::geometry::rigid_2d;
use crate::{Error, Result};

/// Module condition. The ten anomaly classes follow the usual PV fault
/// taxonomy; `Healthy` is the negative class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum AnomalyClass {
    Healthy,
    /// Module-wide overheating.
    Mh,
    /// Overheated substring.
    Sh,
    /// Potential induced degradation.
    Pid,
    /// Multiple hot cells.
    CmPlus,
    /// Single hot cell.
    CsPlus,
    /// Multiple warm cells.
    Cm,
    /// Single warm cell.
    Cs,
    /// Diode failure.
    D,
    /// Hot spot on a cell.
    Chs,
    /// Soiling or shadowing.
    So,
}

impl AnomalyClass {
    pub const ANOMALIES: [AnomalyClass; 10] = [
        AnomalyClass::Mh,
        AnomalyClass::Sh,
        AnomalyClass::Pid,
        AnomalyClass::CmPlus,
        AnomalyClass::CsPlus,
        AnomalyClass::Cm,
        AnomalyClass::Cs,
        AnomalyClass::D,
        AnomalyClass::Chs,
        AnomalyClass::So,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AnomalyClass::Healthy => "healthy",
            AnomalyClass::Mh => "Mh",
            AnomalyClass::Sh => "Sh",
            AnomalyClass::Pid => "Pid",
            AnomalyClass::CmPlus => "Cm+",
            AnomalyClass::CsPlus => "Cs+",
            AnomalyClass::Cm => "Cm",
            AnomalyClass::Cs => "Cs",
            AnomalyClass::D => "D",
            AnomalyClass::Chs => "Chs",
            AnomalyClass::So => "So",
        }
    }

    pub fn is_anomaly(&self) -> bool {
        *self != AnomalyClass::Healthy
    }
}

impl fmt::Display for AnomalyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(AnomalyClass::Healthy)
            .chain(AnomalyClass::ANOMALIES)
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown anomaly class {s:?}")))
    }
}

/// Ground truth for one module.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledModule {
    pub track_id: String,
    /// Top-left corner.
    pub position: LtpPoint,
    pub row_id: u32,
    pub class: AnomalyClass,
}

fn check_pairs(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Validation(format!("{a} estimates but {b} truths")));
    }
    if a == 0 {
        return Err(Error::Undefined("RMSE of an empty set".into()));
    }
    Ok(())
}

/// Root mean square of the east-north deviations; altitude is ignored.
pub fn rmse(estimates: &[LtpPoint], truths: &[LtpPoint]) -> Result<f64> {
    check_pairs(estimates.len(), truths.len())?;
    let sum: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e.east - t.east).powi(2) + (e.north - t.north).powi(2))
        .sum();
    Ok((sum / estimates.len() as f64).sqrt())
}

/// Per-row RMSE after fitting, for every row, the rigid planar motion that
/// best maps the estimates onto the truths. Rows with fewer than two
/// modules are skipped.
pub fn rmse_per_row(estimates: &[LtpPoint], truths: &[LtpPoint], row_ids: &[u32]) -> Result<BTreeMap<u32, f64>> {
    check_pairs(estimates.len(), truths.len())?;
    if row_ids.len() != estimates.len() {
        return Err(Error::Validation(format!("{} row ids for {} points", row_ids.len(), estimates.len())));
    }
    let mut rows: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &r) in row_ids.iter().enumerate() {
        rows.entry(r).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for (row, idx) in rows {
        if idx.len() < 2 {
            log::warn!("row {row} has {} module(s); skipped in per-row RMSE", idx.len());
            continue;
        }
        let src: Vec<_> = idx.iter().map(|&i| Vector2::new(estimates[i].east, estimates[i].north)).collect();
        let dst: Vec<_> = idx.iter().map(|&i| Vector2::new(truths[i].east, truths[i].north)).collect();
        let (r, t) = rigid_2d(&src, &dst).expect("non-empty row");
        let aligned: Vec<_> = src
            .iter()
            .map(|p| {
                let q = r * p + t;
                LtpPoint::new(q.x, q.y, 0.0)
            })
            .collect();
        let tr: Vec<_> = dst.iter().map(|p| LtpPoint::new(p.x, p.y, 0.0)).collect();
        out.insert(row, rmse(&aligned, &tr)?);
    }
    Ok(out)
}

/// Area under the ROC curve. Tied scores are swept together, so the result
/// equals the Mann-Whitney statistic `P(pos > neg) + P(pos = neg) / 2`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    let p = labels.iter().filter(|&&l| l).count() as u128;
    let n = labels.len() as u128 - p;
    if p == 0 || n == 0 {
        return Err(Error::Undefined("AUROC needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Twice the trapezoid area in units of (1/P) x (1/N), kept integral so
    // the result is exact.
    let (mut tp, mut fp, mut twice_area) = (0u128, 0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
    }
    Ok(twice_area as f64 / (2 * p * n) as f64)
}

/// Scores of one module for the two detectors being compared. `None` means
/// the detector produced no value for the module.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorScores {
    pub class: AnomalyClass,
    pub relative_temperature: Option<f64>,
    pub anomaly_ratio: Option<f64>,
}

/// One row of the detector comparison table. `class` is `None` for the
/// pooled row over all anomaly classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AurocRow {
    pub class: Option<AnomalyClass>,
    pub positives: usize,
    pub negatives: usize,
    pub auroc_temperature: Option<f64>,
    pub auroc_anomaly_ratio: Option<f64>,
}

fn auroc_for(modules: &[DetectorScores], is_pos: impl Fn(AnomalyClass) -> bool, pick: impl Fn(&DetectorScores) -> Option<f64>) -> Option<f64> {
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for m in modules {
        let pos = is_pos(m.class);
        if !pos && m.class.is_anomaly() {
            continue;
        }
        if let Some(v) = pick(m) {
            s.push(v);
            l.push(pos);
        }
    }
    auroc(&s, &l).ok()
}

/// Per-class AUROC of both detectors against healthy modules, followed by
/// the pooled row. Classes without labeled modules are skipped.
pub fn compare_detectors(modules: &[DetectorScores]) -> Vec<AurocRow> {
    let negatives = modules.iter().filter(|m| !m.class.is_anomaly()).count();
    let mut rows = Vec::new();
    let classes = AnomalyClass::ANOMALIES.map(Some).into_iter().chain(std::iter::once(None));
    for class in classes {
        let is_pos = |c: AnomalyClass| match class {
            Some(k) => c == k,
            None => c.is_anomaly(),
        };
        let positives = modules.iter().filter(|m| is_pos(m.class)).count();
        if positives == 0 {
            continue;
        }
        rows.push(AurocRow {
            class,
            positives,
            negatives,
            auroc_temperature: auroc_for(modules, is_pos, |m| m.relative_temperature),
            auroc_anomaly_ratio: auroc_for(modules, is_pos, |m| m.anomaly_ratio),
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(e: f64, n: f64) -> LtpPoint {
        LtpPoint::new(e, n, 0.0)
    }

    /// Brute-force Mann-Whitney count over all positive/negative pairs.
    fn pair_count_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        twice += 2;
                    } else if scores[i] == scores[j] {
                        twice += 1;
                    }
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn rmse_examples() {
        let t = vec![p(1.0, 2.0), p(-4.0, 7.0)];
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert_eq!(rmse(&[p(3.0, 4.0)], &[p(0.0, 0.0)]).unwrap(), 5.0);
        let e = vec![p(1.0, 0.0), p(0.0, 1.0)];
        assert_eq!(rmse(&e, &[p(0.0, 0.0), p(0.0, 0.0)]).unwrap(), 1.0);
        assert!(matches!(rmse(&[], &[]), Err(Error::Undefined(_))));
        // Altitude is ignored.
        assert_eq!(rmse(&[LtpPoint::new(0.0, 0.0, 9.0)], &[p(0.0, 0.0)]).unwrap(), 0.0);
    }

    #[test]
    fn per_row_absorbs_rigid_motion() {
        let truths: Vec<_> = (0..20).map(|i| p((i % 10) as f64 * 0.99, (i / 10) as f64 * 6.0)).collect();
        let rows: Vec<u32> = (0..20).map(|i| i / 10).collect();
        let est: Vec<_> = truths
            .iter()
            .zip(&rows)
            .map(|(t, &r)| {
                let th = if r == 0 { 5f64.to_radians() } else { -0.3 };
                let (s, c) = th.sin_cos();
                p(c * t.east - s * t.north + 3.0 + r as f64, s * t.east + c * t.north - 7.0)
            })
            .collect();
        let per = rmse_per_row(&est, &truths, &rows).unwrap();
        assert_eq!(per.len(), 2);
        assert!(per.values().all(|&v| v < 1e-9), "{per:?}");
        assert!(rmse(&est, &truths).unwrap() > 1.0);

        let single = rmse_per_row(&est[..11], &truths[..11], &rows[..11]).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn per_row_scaled_row_matches_closed_form() {
        // Scaling a centered collinear row by s leaves, after the best rigid
        // fit, residuals (s-1)*x_i, so RMSE = |s-1| * rms(x).
        let xs: Vec<f64> = (0..31).map(|i| i as f64 - 15.0).collect();
        let truths: Vec<_> = xs.iter().map(|&x| p(x, 0.0)).collect();
        let est: Vec<_> = xs.iter().map(|&x| p(1.01 * x, 0.0)).collect();
        let rows = vec![0; xs.len()];
        let got = rmse_per_row(&est, &truths, &rows).unwrap()[&0];
        let rms_x = (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((got - 0.01 * rms_x).abs() < 1e-12);
        // Brute force over small rotations and translations never beats it.
        for k in -20..=20 {
            let th = k as f64 * 1e-4;
            let (s, c) = th.sin_cos();
            let moved: Vec<_> = est.iter().map(|q| p(c * q.east - s * q.north, s * q.east + c * q.north)).collect();
            assert!(rmse(&moved, &truths).unwrap() >= got - 1e-12);
        }
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::Undefined(_))));
    }

    #[test]
    fn detector_table() {
        let mut mods = Vec::new();
        for i in 0..10 {
            mods.push(DetectorScores { class: AnomalyClass::Healthy, relative_temperature: Some(i as f64 * 0.1), anomaly_ratio: Some(0.0) });
        }
        mods.push(DetectorScores { class: AnomalyClass::Sh, relative_temperature: Some(9.0), anomaly_ratio: Some(1.0) });
        mods.push(DetectorScores { class: AnomalyClass::Mh, relative_temperature: Some(0.45), anomaly_ratio: None });
        let rows = compare_detectors(&mods);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].class, Some(AnomalyClass::Mh));
        assert_eq!(rows[0].auroc_temperature, Some(0.5));
        assert_eq!(rows[0].auroc_anomaly_ratio, None);
        assert_eq!(rows[1].auroc_temperature, Some(1.0));
        assert_eq!(rows[2].class, None);
        assert_eq!(rows[2].positives, 2);

        // The same scores fed as both detectors give identical columns.
        let same: Vec<_> = mods
            .iter()
            .map(|m| DetectorScores { anomaly_ratio: m.relative_temperature, ..m.clone() })
            .collect();
        for r in compare_detectors(&same) {
            assert_eq!(r.auroc_temperature, r.auroc_anomaly_ratio);
        }
    }

    #[test]
    fn class_names_round_trip() {
        for c in std::iter::once(AnomalyClass::Healthy).chain(AnomalyClass::ANOMALIES) {
            assert_eq!(c.to_string().parse::<AnomalyClass>().unwrap(), c);
        }
        assert!("Xx".parse::<AnomalyClass>().is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..20).prop_map(|v| v as f64 / 4.0), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting((scores, labels) in instance()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), pair_count_oracle(&scores, &labels));
        }

        #[test]
        fn auroc_invariant_under_monotone_maps((scores, labels) in instance()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&mapped, &labels).unwrap());
        }

        #[test]
        fn alignment_never_increases_residual(
            pts in proptest::collection::vec((-30.0f64..30.0, -3.0f64..3.0, -0.5f64..0.5, -0.5f64..0.5), 2..40),
        ) {
            let truths: Vec<_> = pts.iter().map(|q| p(q.0, q.1)).collect();
            let est: Vec<_> = pts.iter().map(|q| p(q.0 + q.2, q.1 + q.3)).collect();
            let rows = vec![0u32; pts.len()];
            let per = rmse_per_row(&est, &truths, &rows).unwrap()[&0];
            prop_assert!(per <= rmse(&est, &truths).unwrap() + 1e-12);
        }
    }
}
