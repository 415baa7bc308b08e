//! Simulator and parameter-estimation toolkit for N two-level emitters
//! with spin-selective, magnetic-field-tunable transitions coupled to a
//! single optical cavity mode.
//!
//! The crate covers weak-probe transmission spectra, Purcell-broadened
//! linewidths, cavity-mediated collective modes (superradiant and
//! subradiant states), spin-controlled avoided crossings, single-shot
//! spin-readout statistics and least-squares parameter extraction.
//!
//! Every type is an immutable value after validation and every
//! operation is a pure function, so all of it is safe to call from any
//! number of concurrent contexts.

pub mod dispersive;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod model;
pub mod readout;
pub mod spectrum;

pub use error::Error;
