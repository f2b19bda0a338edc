//! Passive sunlight interferometry: forward simulation of full-field Michelson
//! axial scans under incoherent illumination, and recovery of direct-only
//! transients, depth maps and coherence lengths from those scans.
//!
//! Units throughout: lengths in micrometers, wavenumbers in rad/µm, angles in
//! radians (the tracking simulator works in degrees, like the stages it models).
//!
//! The pieces:
//!
//! - [`optics`]: illumination spectra, coherence functions and lengths.
//! - [`scene`]: layered scenes with microstructure and indirect transport.
//! - [`forward`]: synthesis of intensity stacks and a phase-shifting oracle.
//! - [`reconstruct`]: transient estimation, depth, peaks, direct-only images.
//! - [`coherence`]: Gaussian fitting and coherence-length measurement.
//! - [`tracking`]: closed-loop Sun tracking with quantized stages.
//! - [`io`] and [`cli`]: file formats and the `sunif` command line.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coherence;
pub mod error;
pub mod forward;
pub mod io;
pub mod optics;
pub mod reconstruct;
pub mod scene;
pub mod tracking;

pub use error::{Error, Result};
