//! Equalize irregularly sampled, unequal-length eGFR series into fixed-size
//! vectors (Gaussian-process regression or linear interpolation) and
//! classify each patient's trend as stable or unstable.

pub mod classify;
pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod gpr;
pub mod interp;
pub mod seed;
pub mod synth;
pub mod timeseries;

pub use error::{Error, Result};
pub use timeseries::{BinaryLabel, LabelSet, Observation, PatientSeries, TrendAnnotation};
