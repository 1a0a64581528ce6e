//! WGS-84 geodetic coordinates, local tangent plane (ENU) frames and GPS
//! trajectory interpolation.
//!
//! The LTP frame is east-north-up, anchored at a geodetic origin on the WGS-84
//! ellipsoid. Conversions go through earth-centered earth-fixed (ECEF)
//! coordinates, so a round trip is exact up to floating point.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// WGS-84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

/// A WGS-84 position in degrees. `altitude` is meters above the ellipsoid,
/// `None` when the receiver did not report a usable value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub latitude: f64,
    pub longitude: f64,
    pub altitude: Option<f64>,
}

impl GeoPoint {
    pub fn new(latitude: f64, longitude: f64, altitude: Option<f64>) -> Result<Self> {
        let p = GeoPoint { latitude, longitude, altitude };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.latitude.is_finite() || !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::InvalidCoordinate(format!("latitude {}", self.latitude)));
        }
        if !self.longitude.is_finite() || !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::InvalidCoordinate(format!("longitude {}", self.longitude)));
        }
        if let Some(alt) = self.altitude {
            if !alt.is_finite() {
                return Err(Error::InvalidCoordinate(format!("altitude {alt}")));
            }
        }
        Ok(())
    }

    /// Altitude with the unknown case mapped to zero.
    pub fn altitude_or_zero(&self) -> f64 {
        self.altitude.unwrap_or(0.0)
    }

    /// Earth-centered earth-fixed coordinates in meters.
    pub fn to_ecef(&self) -> Vector3<f64> {
        let lat = self.latitude.to_radians();
        let lon = self.longitude.to_radians();
        let h = self.altitude_or_zero();
        let (slat, clat) = lat.sin_cos();
        let (slon, clon) = lon.sin_cos();
        let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
        Vector3::new(
            (n + h) * clat * clon,
            (n + h) * clat * slon,
            (n * (1.0 - WGS84_E2) + h) * slat,
        )
    }

    /// Inverse of [`GeoPoint::to_ecef`]; iterates the latitude to convergence.
    pub fn from_ecef(x: &Vector3<f64>) -> GeoPoint {
        let p = x.x.hypot(x.y);
        let lon = x.y.atan2(x.x);
        let mut lat = x.z.atan2(p * (1.0 - WGS84_E2));
        for _ in 0..16 {
            let slat = lat.sin();
            let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
            let h = p * lat.cos() + x.z * slat - WGS84_A * (1.0 - WGS84_E2 * slat * slat).sqrt();
            let next = x.z.atan2(p * (1.0 - WGS84_E2 * n / (n + h)));
            let done = (next - lat).abs() < 1e-15;
            lat = next;
            if done {
                break;
            }
        }
        let slat = lat.sin();
        let h = p * lat.cos() + x.z * slat - WGS84_A * (1.0 - WGS84_E2 * slat * slat).sqrt();
        GeoPoint { latitude: lat.to_degrees(), longitude: lon.to_degrees(), altitude: Some(h) }
    }
}

/// A position in a local tangent plane frame, meters east, north and up.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LtpPoint {
    pub east: f64,
    pub north: f64,
    pub up: f64,
}

impl LtpPoint {
    pub const ORIGIN: LtpPoint = LtpPoint { east: 0.0, north: 0.0, up: 0.0 };

    pub fn new(east: f64, north: f64, up: f64) -> Self {
        LtpPoint { east, north, up }
    }

    pub fn vec(&self) -> Vector3<f64> {
        Vector3::new(self.east, self.north, self.up)
    }

    pub fn from_vec(v: &Vector3<f64>) -> Self {
        LtpPoint { east: v.x, north: v.y, up: v.z }
    }

    pub fn is_finite(&self) -> bool {
        self.east.is_finite() && self.north.is_finite() && self.up.is_finite()
    }

    /// Distance in the east-north plane.
    pub fn horizontal_distance(&self, other: &LtpPoint) -> f64 {
        (self.east - other.east).hypot(self.north - other.north)
    }
}

/// Rows are the east, north and up axes expressed in ECEF.
pub fn ecef_to_enu_rotation(origin: &GeoPoint) -> Matrix3<f64> {
    let (slat, clat) = origin.latitude.to_radians().sin_cos();
    let (slon, clon) = origin.longitude.to_radians().sin_cos();
    Matrix3::new(
        -slon, clon, 0.0,
        -slat * clon, -slat * slon, clat,
        clat * clon, clat * slon, slat,
    )
}

/// Converts `p` into the east-north-up frame anchored at `origin`.
pub fn wgs84_to_ltp(p: &GeoPoint, origin: &GeoPoint) -> Result<LtpPoint> {
    p.validate()?;
    origin.validate()?;
    let d = p.to_ecef() - origin.to_ecef();
    Ok(LtpPoint::from_vec(&(ecef_to_enu_rotation(origin) * d)))
}

/// Converts an LTP position back to WGS-84. The result always carries an
/// altitude.
pub fn ltp_to_wgs84(p: &LtpPoint, origin: &GeoPoint) -> GeoPoint {
    let ecef = origin.to_ecef() + ecef_to_enu_rotation(origin).transpose() * p.vec();
    GeoPoint::from_ecef(&ecef)
}

/// Re-expresses a point given in the frame anchored at `from` in the frame
/// anchored at `to`.
pub fn change_origin(p: &LtpPoint, from: &GeoPoint, to: &GeoPoint) -> Result<LtpPoint> {
    wgs84_to_ltp(&ltp_to_wgs84(p, from), to)
}

/// One GPS fix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsSample {
    /// Seconds on the receiver clock.
    pub time: f64,
    pub position: GeoPoint,
}

/// A GPS trajectory converted to LTP coordinates, ready for per-frame
/// interpolation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    origin: GeoPoint,
    times: Vec<f64>,
    positions: Vec<LtpPoint>,
}

impl Trajectory {
    /// Builds a trajectory in the frame anchored at `origin`. Samples must be
    /// strictly increasing in time.
    pub fn new(samples: &[GpsSample], origin: GeoPoint) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "trajectory needs at least 2 GPS samples, got {}",
                samples.len()
            )));
        }
        for w in samples.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::Validation(format!(
                    "GPS sample times not strictly increasing at t={}",
                    w[1].time
                )));
            }
        }
        let origin = GeoPoint { altitude: Some(origin.altitude_or_zero()), ..origin };
        let positions = samples
            .iter()
            .map(|s| {
                let pos = GeoPoint { altitude: Some(s.position.altitude_or_zero()), ..s.position };
                wgs84_to_ltp(&pos, &origin)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory { origin, times: samples.iter().map(|s| s.time).collect(), positions })
    }

    pub fn origin(&self) -> &GeoPoint {
        &self.origin
    }

    pub fn sample_positions(&self) -> &[LtpPoint] {
        &self.positions
    }

    /// Piecewise linear position at time `t`; clamps outside the sampled span.
    pub fn at(&self, t: f64) -> LtpPoint {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.positions[0];
        }
        if t >= self.times[n - 1] {
            return self.positions[n - 1];
        }
        // First sample strictly after t.
        let hi = self.times.partition_point(|&s| s <= t);
        let lo = hi - 1;
        let (t0, t1) = (self.times[lo], self.times[hi]);
        let w = (t - t0) / (t1 - t0);
        let a = self.positions[lo].vec();
        let b = self.positions[hi].vec();
        LtpPoint::from_vec(&(a + (b - a) * w))
    }
}

/// Interpolates one geodetic position per frame time. Interpolation runs in
/// the LTP frame anchored at the first sample.
pub fn interpolate_trajectory(samples: &[GpsSample], frame_times: &[f64]) -> Result<Vec<GeoPoint>> {
    let origin = samples
        .first()
        .map(|s| s.position)
        .ok_or_else(|| Error::InsufficientData("no GPS samples".into()))?;
    let traj = Trajectory::new(samples, origin)?;
    Ok(frame_times.iter().map(|&t| ltp_to_wgs84(&traj.at(t), traj.origin())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Geodetic -> ECEF written out directly from the ellipsoid definition,
    // independent of `to_ecef`.
    fn oracle_ecef(lat_deg: f64, lon_deg: f64, h: f64) -> Vector3<f64> {
        let a = 6378137.0_f64;
        let f = 1.0 / 298.257223563_f64;
        let b = a * (1.0 - f);
        let lat = lat_deg.to_radians();
        let lon = lon_deg.to_radians();
        let n = a * a / ((a * lat.cos()).powi(2) + (b * lat.sin()).powi(2)).sqrt();
        Vector3::new(
            (n + h) * lat.cos() * lon.cos(),
            (n + h) * lat.cos() * lon.sin(),
            (b * b / (a * a) * n + h) * lat.sin(),
        )
    }

    fn geo(lat: f64, lon: f64, alt: f64) -> GeoPoint {
        GeoPoint::new(lat, lon, Some(alt)).unwrap()
    }

    #[test]
    fn identity_maps_to_zero() {
        let o = geo(48.5, 10.25, 312.0);
        let p = wgs84_to_ltp(&o, &o).unwrap();
        assert_eq!(p.vec().norm(), 0.0);
    }

    #[test]
    fn small_northward_step_at_equator() {
        let o = geo(0.0, 0.0, 0.0);
        let p = geo(0.00001, 0.0, 0.0);
        let ltp = wgs84_to_ltp(&p, &o).unwrap();
        // At the equator the ECEF difference is (x, 0, z) and north = z.
        let d = oracle_ecef(0.00001, 0.0, 0.0) - oracle_ecef(0.0, 0.0, 0.0);
        assert!((ltp.north - d.z).abs() < 1e-9);
        assert!((ltp.north - 1.1057).abs() < 1e-4, "north = {}", ltp.north);
        assert!(ltp.east.abs() < 1e-12);
        assert!(ltp.up.abs() < 1e-4);

        let back = ltp_to_wgs84(&ltp, &o);
        assert!((back.latitude - 0.00001).abs() < 1e-12);
        assert!(back.longitude.abs() < 1e-12);
    }

    #[test]
    fn origin_maps_back_to_origin() {
        let o = geo(-33.9, 151.2, 40.0);
        let back = ltp_to_wgs84(&LtpPoint::ORIGIN, &o);
        assert!((back.latitude - o.latitude).abs() < 1e-12);
        assert!((back.longitude - o.longitude).abs() < 1e-12);
        assert!((back.altitude.unwrap() - 40.0).abs() < 1e-8);
    }

    #[test]
    fn out_of_range_coordinates_are_rejected() {
        assert!(matches!(GeoPoint::new(91.0, 0.0, None), Err(Error::InvalidCoordinate(_))));
        assert!(matches!(GeoPoint::new(0.0, -180.5, None), Err(Error::InvalidCoordinate(_))));
        let bad = GeoPoint { latitude: f64::NAN, longitude: 0.0, altitude: None };
        let o = geo(0.0, 0.0, 0.0);
        assert!(wgs84_to_ltp(&bad, &o).is_err());
    }

    #[test]
    fn change_of_origin_is_rigid() {
        let a = geo(49.1, 11.3, 0.0);
        let b_ltp = LtpPoint::new(80.0, -60.0, 0.0);
        let b = ltp_to_wgs84(&b_ltp, &a);
        let pts: Vec<LtpPoint> = (0..12)
            .map(|i| {
                let t = i as f64;
                LtpPoint::new(83.0 * t - 400.0, 47.0 * (t * 1.7).sin() * 10.0, 3.0 * t.cos())
            })
            .collect();
        let moved: Vec<LtpPoint> = pts.iter().map(|p| change_origin(p, &a, &b).unwrap()).collect();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d0 = (pts[i].vec() - pts[j].vec()).norm();
                let d1 = (moved[i].vec() - moved[j].vec()).norm();
                assert!((d0 - d1).abs() < 1e-6, "{d0} vs {d1}");
            }
        }
    }

    #[test]
    fn trajectory_hits_samples_and_midpoints_and_clamps() {
        let o = geo(49.0, 11.0, 0.0);
        let samples: Vec<GpsSample> = [(0.0, 0.0, 0.0), (1.0, 10.0, 4.0), (2.0, 12.0, -6.0)]
            .iter()
            .map(|&(t, e, n)| GpsSample {
                time: t,
                position: ltp_to_wgs84(&LtpPoint::new(e, n, 0.0), &o),
            })
            .collect();
        let traj = Trajectory::new(&samples, o).unwrap();
        let p1 = traj.at(1.0);
        assert!((p1.east - 10.0).abs() < 1e-8 && (p1.north - 4.0).abs() < 1e-8);
        let mid = traj.at(1.5);
        let s1 = traj.sample_positions()[1].vec();
        let s2 = traj.sample_positions()[2].vec();
        assert!((mid.vec() - (s1 + s2) / 2.0).norm() < 1e-12);
        assert_eq!(traj.at(7.0), traj.sample_positions()[2]);
        assert_eq!(traj.at(-3.0), traj.sample_positions()[0]);
    }

    #[test]
    fn trajectory_needs_two_samples() {
        let o = geo(49.0, 11.0, 0.0);
        let one = [GpsSample { time: 0.0, position: o }];
        assert!(matches!(Trajectory::new(&one, o), Err(Error::InsufficientData(_))));
        assert!(interpolate_trajectory(&one, &[0.0]).is_err());
    }

    #[test]
    fn unknown_altitude_is_zero() {
        let o = geo(49.0, 11.0, 0.0);
        let p = GeoPoint::new(49.0001, 11.0, None).unwrap();
        let q = GeoPoint::new(49.0001, 11.0, Some(0.0)).unwrap();
        assert_eq!(wgs84_to_ltp(&p, &o).unwrap(), wgs84_to_ltp(&q, &o).unwrap());
    }

    proptest! {
        #[test]
        fn round_trip_within_10km(
            lat in -80.0f64..80.0, lon in -179.0f64..179.0,
            e in -10_000.0f64..10_000.0, n in -10_000.0f64..10_000.0, u in -200.0f64..200.0,
        ) {
            let o = geo(lat, lon, 100.0);
            let p = ltp_to_wgs84(&LtpPoint::new(e, n, u), &o);
            let ltp = wgs84_to_ltp(&p, &o).unwrap();
            let back = ltp_to_wgs84(&ltp, &o);
            prop_assert!((back.latitude - p.latitude).abs() < 1e-9);
            prop_assert!((back.longitude - p.longitude).abs() < 1e-9);
            prop_assert!((ltp.east - e).abs() < 1e-6 && (ltp.north - n).abs() < 1e-6);
        }

        #[test]
        fn ltp_distance_matches_ecef_chord(
            lat in -70.0f64..70.0, lon in -170.0f64..170.0,
            dlat in -0.005f64..0.005, dlon in -0.005f64..0.005,
        ) {
            let o = geo(lat, lon, 0.0);
            let p = geo(lat + dlat, lon + dlon, 0.0);
            let chord = (oracle_ecef(lat + dlat, lon + dlon, 0.0) - oracle_ecef(lat, lon, 0.0)).norm();
            prop_assume!(chord > 1.0 && chord < 1000.0);
            let d = wgs84_to_ltp(&p, &o).unwrap().vec().norm();
            prop_assert!(((d - chord) / chord).abs() < 1e-3);
        }

        #[test]
        fn interpolation_exact_on_straight_lines(
            vx in -8.0f64..8.0, vy in -8.0f64..8.0, t in 0.0f64..9.0,
        ) {
            let o = geo(49.0, 11.0, 0.0);
            let samples: Vec<GpsSample> = (0..10).map(|i| {
                let s = i as f64;
                GpsSample { time: s, position: ltp_to_wgs84(&LtpPoint::new(vx * s, vy * s, 0.0), &o) }
            }).collect();
            let traj = Trajectory::new(&samples, o).unwrap();
            let p = traj.at(t);
            let first = traj.sample_positions()[0].vec();
            let last = traj.sample_positions()[9].vec();
            // Distance from the chord through the first and last samples.
            let dir = (last - first).normalize();
            let r = p.vec() - first;
            let off = (r - dir * r.dot(&dir)).norm();
            prop_assert!(off < 1e-6);
        }
    }
}
