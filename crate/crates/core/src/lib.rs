//! Signal recovery for multi-reference alignment with random translations,
//! uniform random dilations and additive white noise.
//!
//! The pipeline: accumulate noisy bispectra and power spectra
//! ([`moments`]), remove the additive-noise bias and invert the dilation
//! bias ([`unbias`]), estimate the nuisance parameters ([`estimate`]), and
//! turn the recovered bispectrum back into a signal ([`invert`]).
//! [`oracle`] holds independent reference computations, [`harness`] runs the
//! Monte Carlo sweeps.

pub mod error;
pub mod estimate;
pub mod grid;
pub mod harness;
pub mod invert;
pub mod io;
pub mod moments;
pub mod oracle;
pub mod signal_model;
pub mod spectra;
pub mod unbias;

pub use error::{Error, Result};
pub use grid::{Grid, Lattice};
pub use num_complex::Complex64;
pub use signal_model::{
    DilationConstants, LatentDraw, ModelParams, NoiseConvention, ObservationBatch, Signal, SignalId, ETA_MAX,
};
pub use spectra::{BispectrumField, Spectrum};
pub use unbias::{CenteredMoments, SolverConfig};
