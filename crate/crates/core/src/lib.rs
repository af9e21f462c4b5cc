//! First-passage-time statistics for tick-by-tick price data.
//!
//! The crate is `no_std` (with `alloc`). It covers the pure parts of the
//! pipeline: session cleaning and return paths ([`ingest`]), empirical
//! first-passage and survival probabilities ([`estimator`]), scaling
//! collapses and their dispersion ([`scaling`]), shuffle surrogates
//! ([`surrogate`]), modified Weibull/Student fits ([`fits`]) and seeded
//! synthetic processes with analytic oracles ([`synth`]).
//!
//! Parsing, file formats, threading and the command-line tool live in the
//! companion `fpt` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod estimator;
pub mod fits;
pub mod ingest;
pub mod math;
pub mod rng;
pub mod scaling;
pub mod surrogate;
pub mod synth;

pub use error::{Error, Result};
pub use estimator::{
    estimate_fpt, first_crossing, gaussian_gap, stddev_at_horizon, survival, wiener_fpt,
    FptAccumulator, FptSurface, GapTable, HorizonGrid, LevelGrid, Wing, WingSurface,
};
pub use fits::{crossover_report, eval_model, fit_model, CrossoverReport, Family, FitOptions, FitResult};
pub use ingest::{
    build_return_paths, clean_sessions, AnchorPolicy, CleaningReport, ReturnPath, SessionCalendar,
    TickRecord, TickSeries,
};
pub use scaling::{
    decay_exponent, dispersion_theta, scale_by_volatility, scale_time, AxisRole, CommonGrid,
    DecayFit, DispersionReport, ScaledCurve,
};
pub use surrogate::{shuffle_returns, shuffle_times, surrogate_experiment, SurrogateKind, SurrogateSpec};
pub use synth::{analytic_fpt, generate, Clock, IncrementDist, ProcessFamily, ProcessSpec};

/// Milliseconds per second; all timestamps and offsets are integer milliseconds.
pub const MS_PER_SEC: i64 = 1000;

/// Version of this crate, recorded in output provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
