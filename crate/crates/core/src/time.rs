//! Timestamps, durations and clock edge generation.
//!
//! Time is a double-precision number of seconds. Picosecond-scale steps on
//! nanosecond-scale spans keep roughly nine significant digits in reserve,
//! which is ample for sub-femtosecond bookkeeping.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mismatch::substream;

const PS: f64 = 1e-12;

/// An absolute point in simulated time, in seconds.
#[derive(Copy, Clone, Debug, Default, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Instant(pub f64);

/// A time difference in seconds. Signed when it is the difference of two
/// instants; non-negative when it is a width or a delay.
#[derive(Copy, Clone, Debug, Default, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Duration(pub f64);

impl Instant {
    pub const ZERO: Instant = Instant(0.0);

    pub fn from_secs(s: f64) -> Self {
        Instant(s)
    }

    pub fn from_ps(ps: f64) -> Self {
        Instant(ps * PS)
    }

    pub fn secs(self) -> f64 {
        self.0
    }

    pub fn as_ps(self) -> f64 {
        self.0 / PS
    }

    pub fn min(self, other: Instant) -> Instant {
        if other.0 < self.0 {
            other
        } else {
            self
        }
    }

    pub fn max(self, other: Instant) -> Instant {
        if other.0 > self.0 {
            other
        } else {
            self
        }
    }
}

impl Duration {
    pub const ZERO: Duration = Duration(0.0);

    pub fn from_secs(s: f64) -> Self {
        Duration(s)
    }

    pub fn from_ps(ps: f64) -> Self {
        Duration(ps * PS)
    }

    pub fn secs(self) -> f64 {
        self.0
    }

    pub fn as_ps(self) -> f64 {
        self.0 / PS
    }

    pub fn abs(self) -> Duration {
        Duration(self.0.abs())
    }

    pub fn is_sign_negative(self) -> bool {
        self.0 < 0.0
    }
}

impl fmt::Display for Instant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ps", self.as_ps())
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ps", self.as_ps())
    }
}

impl Add<Duration> for Instant {
    type Output = Instant;
    fn add(self, rhs: Duration) -> Instant {
        Instant(self.0 + rhs.0)
    }
}

impl AddAssign<Duration> for Instant {
    fn add_assign(&mut self, rhs: Duration) {
        self.0 += rhs.0;
    }
}

impl Sub<Duration> for Instant {
    type Output = Instant;
    fn sub(self, rhs: Duration) -> Instant {
        Instant(self.0 - rhs.0)
    }
}

impl SubAssign<Duration> for Instant {
    fn sub_assign(&mut self, rhs: Duration) {
        self.0 -= rhs.0;
    }
}

impl Sub for Instant {
    type Output = Duration;
    fn sub(self, rhs: Instant) -> Duration {
        Duration(self.0 - rhs.0)
    }
}

impl Add for Duration {
    type Output = Duration;
    fn add(self, rhs: Duration) -> Duration {
        Duration(self.0 + rhs.0)
    }
}

impl AddAssign for Duration {
    fn add_assign(&mut self, rhs: Duration) {
        self.0 += rhs.0;
    }
}

impl Sub for Duration {
    type Output = Duration;
    fn sub(self, rhs: Duration) -> Duration {
        Duration(self.0 - rhs.0)
    }
}

impl SubAssign for Duration {
    fn sub_assign(&mut self, rhs: Duration) {
        self.0 -= rhs.0;
    }
}

impl Neg for Duration {
    type Output = Duration;
    fn neg(self) -> Duration {
        Duration(-self.0)
    }
}

impl Mul<f64> for Duration {
    type Output = Duration;
    fn mul(self, rhs: f64) -> Duration {
        Duration(self.0 * rhs)
    }
}

impl Div<f64> for Duration {
    type Output = Duration;
    fn div(self, rhs: f64) -> Duration {
        Duration(self.0 / rhs)
    }
}

impl Div for Duration {
    type Output = f64;
    fn div(self, rhs: Duration) -> f64 {
        self.0 / rhs.0
    }
}

impl std::iter::Sum for Duration {
    fn sum<I: Iterator<Item = Duration>>(iter: I) -> Duration {
        Duration(iter.map(|d| d.0).sum())
    }
}

/// A periodic clock with optional Gaussian edge jitter.
///
/// Edge `k` sits at `phase0 + k * period + jitter_k`. The jitter of each edge
/// is drawn from its own keyed sub-stream, so it depends only on `(seed, k)`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockSpec {
    pub period: Duration,
    pub phase0: Instant,
    pub jitter_sigma: Duration,
    pub seed: u64,
}

/// Jitter draws are clipped at this many standard deviations.
const JITTER_CLIP: f64 = 6.0;

impl ClockSpec {
    pub fn new(period: Duration, phase0: Instant) -> Self {
        ClockSpec {
            period,
            phase0,
            jitter_sigma: Duration::ZERO,
            seed: 0,
        }
    }

    pub fn with_jitter(mut self, sigma: Duration, seed: u64) -> Self {
        self.jitter_sigma = sigma;
        self.seed = seed;
        self
    }

    pub fn frequency(&self) -> f64 {
        1.0 / self.period.secs()
    }

    /// Jitter must stay small enough that clipped draws can never reorder
    /// adjacent edges.
    pub fn validate(&self) -> Result<()> {
        if !(self.period.secs() > 0.0) || !self.period.secs().is_finite() {
            return Err(Error::invalid(format!(
                "clock period must be positive, got {}",
                self.period
            )));
        }
        if !(self.jitter_sigma.secs() >= 0.0) {
            return Err(Error::invalid("clock jitter sigma must be >= 0"));
        }
        if self.jitter_sigma.secs() * JITTER_CLIP * 2.0 >= self.period.secs() {
            return Err(Error::invalid(format!(
                "clock jitter sigma {} is too large for period {}",
                self.jitter_sigma, self.period
            )));
        }
        Ok(())
    }

    /// Jitter of edge `k`.
    pub fn jitter(&self, k: i64) -> Duration {
        if self.jitter_sigma.secs() == 0.0 {
            return Duration::ZERO;
        }
        let mut rng = substream(self.seed, "clock.jitter", k as u64);
        let z: f64 = StandardNormal.sample(&mut rng);
        self.jitter_sigma * z.clamp(-JITTER_CLIP, JITTER_CLIP)
    }

    /// Jitter-free time of edge `k`.
    pub fn nominal_edge(&self, k: i64) -> Instant {
        self.phase0 + self.period * k as f64
    }

    /// Time of edge `k`, including jitter.
    pub fn edge(&self, k: i64) -> Instant {
        self.nominal_edge(k) + self.jitter(k)
    }
}

/// All edges whose nominal time falls in `[t_start, t_end)`, jitter applied.
pub fn clock_edges(spec: &ClockSpec, t_start: Instant, t_end: Instant) -> Result<Vec<Instant>> {
    spec.validate()?;
    if t_start > t_end {
        return Err(Error::invalid("clock_edges requires t_start <= t_end"));
    }
    let mut k = ((t_start - spec.phase0) / spec.period).ceil() as i64;
    // Correct the estimate for rounding at the window edges.
    while spec.nominal_edge(k - 1) >= t_start {
        k -= 1;
    }
    while spec.nominal_edge(k) < t_start {
        k += 1;
    }
    let mut edges = Vec::new();
    while spec.nominal_edge(k) < t_end {
        edges.push(spec.edge(k));
        k += 1;
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(v: f64) -> Instant {
        Instant::from_ps(v)
    }

    #[test]
    fn arithmetic_closure() {
        let a = ps(100.0);
        let b = ps(250.0);
        assert!(((b - a).as_ps() - 150.0).abs() < 1e-9);
        assert!(((a - b).as_ps() + 150.0).abs() < 1e-9);
        assert_eq!(a + (b - a), b);
    }

    #[test]
    fn edges_arithmetic_sequence() {
        let spec = ClockSpec::new(Duration::from_ps(200.0), Instant::ZERO);
        let edges = clock_edges(&spec, Instant::ZERO, ps(1000.0)).unwrap();
        let got: Vec<f64> = edges.iter().map(|e| e.as_ps()).collect();
        assert_eq!(got.len(), 5);
        for (g, want) in got.iter().zip([0.0, 200.0, 400.0, 600.0, 800.0]) {
            assert!((g - want).abs() < 1e-9, "{g} vs {want}");
        }
    }

    #[test]
    fn edges_with_phase_offset() {
        let spec = ClockSpec::new(Duration::from_ps(200.0), ps(50.0));
        let edges = clock_edges(&spec, Instant::ZERO, ps(400.0)).unwrap();
        let got: Vec<f64> = edges.iter().map(|e| e.as_ps()).collect();
        assert_eq!(got.len(), 2);
        assert!((got[0] - 50.0).abs() < 1e-9);
        assert!((got[1] - 250.0).abs() < 1e-9);
    }

    #[test]
    fn jittered_mean_spacing() {
        let spec = ClockSpec::new(Duration::from_ps(200.0), Instant::ZERO)
            .with_jitter(Duration::from_ps(1.0), 11);
        let end = ps(200.0 * 100_000.0);
        let edges = clock_edges(&spec, Instant::ZERO, end).unwrap();
        assert_eq!(edges.len(), 100_000);
        let spacings: Vec<f64> = edges.windows(2).map(|w| (w[1] - w[0]).as_ps()).collect();
        assert!(spacings.iter().all(|&s| s > 0.0));
        let mean = spacings.iter().sum::<f64>() / spacings.len() as f64;
        assert!((mean - 200.0).abs() < 0.02, "mean spacing {mean}");
        // Jitter itself has the requested spread.
        let j: Vec<f64> = (0..100_000).map(|k| spec.jitter(k).as_ps()).collect();
        let jm = j.iter().sum::<f64>() / j.len() as f64;
        let js = (j.iter().map(|x| (x - jm).powi(2)).sum::<f64>() / j.len() as f64).sqrt();
        assert!((js - 1.0).abs() < 0.02, "jitter sigma {js}");
    }

    #[test]
    fn rejects_reversed_window_and_bad_period() {
        let spec = ClockSpec::new(Duration::from_ps(200.0), Instant::ZERO);
        assert!(clock_edges(&spec, ps(10.0), ps(5.0)).is_err());
        let bad = ClockSpec::new(Duration::ZERO, Instant::ZERO);
        assert!(clock_edges(&bad, ps(0.0), ps(5.0)).is_err());
    }
}
