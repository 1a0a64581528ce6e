//! Georeferencing of photovoltaic (PV) modules from aerial infrared surveys.
//!
//! The pipeline takes per-frame module detections, a GPS trajectory and
//! calibrated camera intrinsics, reconstructs keyframe poses with incremental
//! structure-from-motion and triangulates the four corners and the center of
//! every module into local tangent plane (LTP) and WGS-84 coordinates.
//! Per-module temperatures and anomaly ratios are mapped on top of the
//! geometry, and a synthetic scene generator plus metric suite validate every
//! stage against ground truth.
//!
//! Stages, in pipeline order:
//!
//! - [`ingest`]: parsing and validation of all external inputs.
//! - [`tracking`]: IoU association of detections into module tracks.
//! - [`keyframes`]: keyframe selection by travelled distance and overlap.
//! - [`sfm`]: two-view initialization, PnP registration, triangulation,
//!   GPS alignment and bundle adjustment.
//! - [`modulegeo`]: module triangulation, duplicate merging, graph refinement
//!   and GeoJSON export.
//! - [`analysis`]: thermal statistics and anomaly ratios.
//! - [`eval`]: RMSE, per-row RMSE and AUROC.
//!
//! ```
//! use pvgeo::geodesy::{wgs84_to_ltp, ltp_to_wgs84, GeoPoint};
//!
//! let origin = GeoPoint::new(49.0, 11.0, Some(0.0)).unwrap();
//! let p = GeoPoint::new(49.0001, 11.0002, Some(0.0)).unwrap();
//! let ltp = wgs84_to_ltp(&p, &origin).unwrap();
//! let back = ltp_to_wgs84(&ltp, &origin);
//! assert!((back.latitude - p.latitude).abs() < 1e-9);
//! ```

pub mod analysis;
pub mod camera;
pub mod config;
mod error;
pub mod eval;
pub mod geodesy;
pub mod geometry;
pub mod ingest;
pub mod keyframes;
pub mod modulegeo;
pub mod pipeline;
pub mod sfm;
pub mod synth;
pub mod tracking;

pub use error::{Error, Result};
