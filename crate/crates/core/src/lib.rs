//! Behavioral edge-timestamp model of a synthesizable time-interleaved ADC.
//!
//! The converter is a voltage-to-time front end followed by a stochastic
//! time-to-digital converter (STDC). Sixteen such slices are interleaved
//! behind four quadrature phase interpolators. Every analog quantity is
//! carried as an edge timestamp in seconds; device mismatch is drawn from
//! seeded, per-instance random sub-streams so that Monte Carlo runs are
//! reproducible regardless of evaluation order.
//!
//! Module map:
//!
//! * [`time`], [`mismatch`]: shared numeric types, clocks, seeded randomness.
//! * [`v2t`]: V2T pair, sampling phase generator, phase folder.
//! * [`stdc`]: inverter chain, edge counting, adder tree, unfold, offset loop.
//! * [`pi`]: delay-chain phase interpolator with arbiters and path trim.
//! * [`system`]: the 16-channel interleaver, alignment, LUT and skew calibration.
//! * [`metrics`]: code-density linearity, coherent FFT, PI monitor, FoM.

pub mod error;
pub mod metrics;
pub mod mismatch;
pub mod pi;
pub mod stdc;
pub mod stimulus;
pub mod system;
pub mod time;
pub mod v2t;

pub use error::{Error, Result};
pub use mismatch::{Distribution, MismatchModel};
pub use time::{ClockSpec, Duration, Instant};
