//! Differential input stimuli.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::Instant;

/// Differential input voltage as a function of time.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Stimulus {
    Dc {
        volts: f64,
    },
    Sine {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Linear ramp from `start` (at t = 0) with `slope` V/s.
    Ramp {
        start: f64,
        slope: f64,
    },
}

impl Stimulus {
    pub fn sine(amplitude: f64, frequency: f64) -> Self {
        Stimulus::Sine {
            amplitude,
            frequency,
            phase: 0.0,
            offset: 0.0,
        }
    }

    pub fn value(&self, t: Instant) -> f64 {
        match *self {
            Stimulus::Dc { volts } => volts,
            Stimulus::Sine {
                amplitude,
                frequency,
                phase,
                offset,
            } => offset + amplitude * (2.0 * PI * frequency * t.secs() + phase).sin(),
            Stimulus::Ramp { start, slope } => start + slope * t.secs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Stimulus::Dc { volts } => volts.is_finite(),
            Stimulus::Sine {
                amplitude,
                frequency,
                phase,
                offset,
            } => amplitude >= 0.0 && frequency > 0.0 && phase.is_finite() && offset.is_finite(),
            Stimulus::Ramp { start, slope } => start.is_finite() && slope.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid stimulus {self:?}")))
        }
    }

    /// The stimulus seen behind `stages` cascaded first-order low-pass
    /// sections with corner `fc` Hz, in steady state.
    pub fn through_lowpass(&self, fc: f64, stages: u32) -> Stimulus {
        let n = f64::from(stages);
        match *self {
            Stimulus::Dc { .. } => *self,
            Stimulus::Sine {
                amplitude,
                frequency,
                phase,
                offset,
            } => {
                let r = frequency / fc;
                Stimulus::Sine {
                    amplitude: amplitude * (1.0 + r * r).powf(-n / 2.0),
                    frequency,
                    phase: phase - n * r.atan(),
                    offset,
                }
            }
            Stimulus::Ramp { start, slope } => {
                // A ramp emerges delayed by one time constant per stage.
                let delay = n / (2.0 * PI * fc);
                Stimulus::Ramp {
                    start: start - slope * delay,
                    slope,
                }
            }
        }
    }
}

/// Nearest frequency to `fin` with an odd number of cycles `J` in `n`
/// samples at `fs`, and `J` coprime to `n`.
pub fn nearest_coherent(fin: f64, fs: f64, n: usize) -> f64 {
    let j = coherent_cycles(fin, fs, n);
    j as f64 * fs / n as f64
}

/// Odd, `n`-coprime cycle count closest to `fin * n / fs`.
pub fn coherent_cycles(fin: f64, fs: f64, n: usize) -> u64 {
    let target = fin * n as f64 / fs;
    let max = (n / 2).max(1) as u64;
    let mut best = 1u64;
    let mut best_err = f64::INFINITY;
    let centre = target.round().clamp(1.0, max as f64) as u64;
    for d in 0..=max {
        for j in [centre.saturating_sub(d), centre + d] {
            if j == 0 || j > max || j % 2 == 0 || gcd(j, n as u64) != 1 {
                continue;
            }
            let err = (j as f64 - target).abs();
            if err < best_err {
                best_err = err;
                best = j;
            }
        }
        if best_err.is_finite() && (d as f64) > best_err + 1.0 {
            break;
        }
    }
    best
}

pub(crate) fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values() {
        let s = Stimulus::sine(0.2, 1e9);
        assert!((s.value(Instant(0.25e-9)) - 0.2).abs() < 1e-12);
        let r = Stimulus::Ramp { start: -0.1, slope: 1e9 };
        assert!((r.value(Instant(1e-10)) - 0.0).abs() < 1e-15);
        assert_eq!(Stimulus::Dc { volts: 0.3 }.value(Instant(5.0)), 0.3);
    }

    #[test]
    fn lowpass_sine() {
        let s = Stimulus::sine(1.0, 1e9).through_lowpass(1e9, 2);
        match s {
            Stimulus::Sine { amplitude, phase, .. } => {
                assert!((amplitude - 0.5).abs() < 1e-12);
                assert!((phase + PI / 2.0).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn coherent_choice() {
        let n = 8192;
        let fs = 20e9;
        let f = nearest_coherent(100e6, fs, n);
        let j = f * n as f64 / fs;
        assert!((j - j.round()).abs() < 1e-9);
        assert_eq!(j.round() as u64 % 2, 1);
        assert!((f - 100e6).abs() <= 2.0 * fs / n as f64);
        assert_eq!(coherent_cycles(41.0 * fs / n as f64, fs, n), 41);
    }
}
