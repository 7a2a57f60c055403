//! Single-pixel (bucket detector) sensing simulation.
//!
//! The crate covers the whole measurement-domain pipeline: binary pattern
//! libraries and nested sensing operators ([`patterns`]), the forward model
//! and acquisition chain ([`sensing`]), calibration and whitening
//! ([`calibration`]), regularized reconstruction ([`reconstruction`]),
//! operator spectra and subspace isometry probes ([`diagnostics`]),
//! procedural scenes ([`synthdata`]) and the sampling-rate recognisability
//! sweeps that locate the safe interval ([`recognisability`]).

pub mod bits;
pub mod calibration;
pub mod diagnostics;
pub mod error;
pub mod patterns;
pub mod recognisability;
pub mod reconstruction;
pub mod rng;
pub mod sensing;
pub mod spmx;
pub mod synthdata;

pub use error::{Result, SpxError};
