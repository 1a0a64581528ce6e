//! The guide under `book/`, compiled so its snippets run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/geodesy.md")]
pub mod geodesy {}
#[doc = include_str!("../../../book/src/camera.md")]
pub mod camera {}
#[doc = include_str!("../../../book/src/tracking.md")]
pub mod tracking {}
#[doc = include_str!("../../../book/src/keyframes.md")]
pub mod keyframes {}
#[doc = include_str!("../../../book/src/sfm.md")]
pub mod sfm {}
#[doc = include_str!("../../../book/src/modules.md")]
pub mod modules {}
#[doc = include_str!("../../../book/src/analysis.md")]
pub mod analysis {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/synthetic.md")]
pub mod synthetic {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
