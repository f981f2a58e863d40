//! fluxwrench: simulation, calibration, and wrench estimation for a soft
//! six-axis force/torque sensor that reads Hall-effect flux from magnets
//! embedded in an elastomer.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`se3`] — rigid-motion kinematics: twists, wrenches, exp/log, adjoint transport
//! * [`geometry`] — nominal sensor/magnet frame layout
//! * [`magnetics`] — dipole flux oracle, flux-to-position map, chip quantization
//! * [`registration`] — center-piece pose from reconstructed magnet positions
//! * [`calibration`] — fitting the flux-to-twist matrix A and stiffness K
//! * [`estimation`] — runtime wrench estimation, streaming, tool-tip composition
//! * [`sensitivity`] — singular-value error bounds, isotropy, range estimates
//! * [`datalog`] — serial capture parsing and dataset file formats
//! * [`synth`] — deterministic synthetic worlds and pose sets for experiments
//!
//! See the book under `book/` for a guided tour; its code snippets run as
//! doc-tests against this crate.

pub mod calibration;
pub mod datalog;
pub mod estimation;
pub mod geometry;
pub mod magnetics;
pub mod reference;
pub mod registration;
pub mod se3;
pub mod sensitivity;
pub mod synth;

pub use se3::{Transform, Twist, Wrench};

// The guide's code blocks compile and run as doc-tests so the book can never
// drift from the API. Chapters without runnable code are included too; their
// fences are marked non-Rust.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/rigid-motion.md")]
    mod rigid_motion {}
    #[doc = include_str!("../../../book/src/sensor-geometry.md")]
    mod sensor_geometry {}
    #[doc = include_str!("../../../book/src/magnetics.md")]
    mod magnetics {}
    #[doc = include_str!("../../../book/src/pose-from-flux.md")]
    mod pose_from_flux {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/sensitivity.md")]
    mod sensitivity {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
