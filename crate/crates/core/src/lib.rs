//! Simulator of a twofold time-interleaved DAC and a simulated-annealing
//! calibrator for its interleave image at `f_s/2 - f_out`.
//!
//! * [`spectral`]: closed-form line spectrum, analytic spur and level curves.
//! * [`waveform`]: RZ pulse-train synthesis and band-limited capture.
//! * [`plant`]: six-register control surface mapped onto physical impairments.
//! * [`meter`]: FFT spur measurement, the calibration cost function.
//! * [`anneal`]: simulated annealing and the grid-search baseline.
//! * [`experiment`]: batch experiments behind the `tidac` CLI.

pub mod anneal;
pub mod error;
pub mod experiment;
pub mod meter;
pub mod plant;
pub mod spectral;
pub mod waveform;

pub use error::{Error, Result};
