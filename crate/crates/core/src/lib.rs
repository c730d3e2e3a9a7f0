//! Non-restarting, upper-bounded CUSUM charts for many parallel streams.
//!
//! Each stream runs a chart `S_t = phi(min(max(S_{t-1} + Z_t, 0), h))` where
//! `phi` rounds onto a finite grid. Because the chart lives on finitely many
//! states, the in-control law of `S_t` is the law of a finite Markov chain and
//! can be computed exactly ([`nulldist`]). Chart values become p-values through
//! the tail of that law, and a step-up procedure ([`fdr`]) decides at every time
//! point which streams are flagged out of control ([`monitor`]).
//!
//! [`simlab`] simulates regime-switching streams with known ground truth and
//! measures the realised false discovery rate under several definitions of a
//! false discovery.
//!
//! The chart, null-distribution, FDR and monitor layers are generic over the
//! scalar type (`f32`/`f64`). Null distributions are additionally generic over
//! the probability type, so they can be propagated in exact dyadic arithmetic
//! with [`exact::Dyadic`].

pub mod chart;
pub mod cli;
pub mod error;
pub mod exact;
pub mod fdr;
pub mod monitor;
pub mod nulldist;
pub mod scalar;
pub mod simlab;

pub use error::{Error, Result};
pub use scalar::{Probability, Scalar};

/// Double-precision chart configuration.
pub type ChartConfig64 = chart::ChartConfig<f64>;
/// Single-precision chart configuration.
pub type ChartConfig32 = chart::ChartConfig<f32>;
/// Double-precision chart state.
pub type ChartState64 = chart::ChartState<f64>;
/// Double-precision in-control model.
pub type InControlModel64 = nulldist::InControlModel<f64>;
/// Double-precision transition kernel.
pub type TransitionMatrix64 = nulldist::TransitionMatrix<f64>;
/// Double-precision null distribution.
pub type NullDistribution64 = nulldist::NullDistribution<f64>;
/// Null distribution carried in exact dyadic arithmetic over an `f64` grid.
pub type ExactNullDistribution = nulldist::NullDistribution<f64, exact::Dyadic>;
/// Double-precision p-values.
pub type PValueSet64 = fdr::PValueSet<f64>;
/// Double-precision monitor.
pub type Monitor64 = monitor::Monitor<f64>;
