//! Converter measurements: code-density linearity, coherent-FFT SNDR/ENOB,
//! the uncorrelated-sampling PI delay monitor, and the Walden figure of merit.

use std::f64::consts::PI;
use std::io::{self, Write};

use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mismatch::substream;
use crate::pi::PhaseInterpolator;
use crate::stimulus::{gcd, nearest_coherent};
use crate::time::Duration;

/// Channels assumed when tagging interleaving spurs.
pub const DEFAULT_CHANNELS: usize = 16;

/// Minimum capture length for the FFT test.
pub const MIN_FFT_LEN: usize = 4096;

/// Minimum samples per code for the delay monitor.
pub const MIN_MONITOR_SAMPLES: usize = 100_000;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramStimulus {
    Ramp,
    Sine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    /// Code of `dnl[0]` and `inl[0]`. The two extreme observed codes absorb
    /// over-range and are not reported.
    pub first_code: i32,
    pub dnl: Vec<f64>,
    pub inl: Vec<f64>,
    pub dnl_max: f64,
    pub inl_max: f64,
    pub missing_codes: Vec<i32>,
}

/// Counts per code over `lo..=hi`; codes outside are ignored.
pub fn code_histogram(codes: impl IntoIterator<Item = i32>, lo: i32, hi: i32) -> Vec<u64> {
    let mut h = vec![0u64; (hi - lo + 1).max(0) as usize];
    for c in codes {
        if (lo..=hi).contains(&c) {
            h[(c - lo) as usize] += 1;
        }
    }
    h
}

/// DNL and endpoint INL from a code-density histogram. `histogram[i]` holds
/// the hits of code `first_code + i`.
pub fn code_density_linearity(
    histogram: &[u64],
    first_code: i32,
    stimulus: HistogramStimulus,
) -> Result<LinearityReport> {
    let lo = histogram.iter().position(|&h| h > 0);
    let hi = histogram.iter().rposition(|&h| h > 0);
    let (lo, hi) = match (lo, hi) {
        (Some(lo), Some(hi)) if hi >= lo + 3 => (lo, hi),
        _ => return Err(Error::invalid("histogram spans too few codes")),
    };
    let span = &histogram[lo..=hi];
    let total: u64 = span.iter().sum();
    let required = 100 * span.len() as u64;
    if total < required {
        return Err(Error::UndersampledHistogram { total, required });
    }
    let interior = &span[1..span.len() - 1];
    let widths: Vec<f64> = match stimulus {
        HistogramStimulus::Ramp => interior.iter().map(|&h| h as f64).collect(),
        HistogramStimulus::Sine => {
            // Transition levels in units of the sine amplitude.
            let n = total as f64;
            let mut cum = span[0] as f64;
            let mut prev = -(PI * cum / n).cos();
            interior
                .iter()
                .map(|&h| {
                    cum += h as f64;
                    let t = -(PI * cum / n).cos();
                    let w = t - prev;
                    prev = t;
                    w
                })
                .collect()
        }
    };
    let mean = widths.iter().sum::<f64>() / widths.len() as f64;
    let dnl: Vec<f64> = interior
        .iter()
        .zip(&widths)
        .map(|(&h, &w)| if h == 0 { -1.0 } else { w / mean - 1.0 })
        .collect();
    let mut acc = 0.0;
    let running: Vec<f64> = dnl
        .iter()
        .map(|d| {
            acc += d;
            acc
        })
        .collect();
    let m = running.len();
    let (s0, s1) = (running[0], running[m - 1]);
    let mut inl: Vec<f64> = running
        .iter()
        .enumerate()
        .map(|(k, s)| s - s0 - (s1 - s0) * k as f64 / (m - 1).max(1) as f64)
        .collect();
    inl[0] = 0.0;
    inl[m - 1] = 0.0;
    let first = first_code + lo as i32 + 1;
    let missing_codes = interior
        .iter()
        .enumerate()
        .filter(|(_, &h)| h == 0)
        .map(|(i, _)| first + i as i32)
        .collect();
    Ok(LinearityReport {
        first_code: first,
        dnl_max: dnl.iter().fold(0.0, |a: f64, d| a.max(d.abs())),
        inl_max: inl.iter().fold(0.0, |a: f64, d| a.max(d.abs())),
        dnl,
        inl,
        missing_codes,
    })
}

pub fn write_linearity_csv<W: Write>(mut w: W, r: &LinearityReport) -> io::Result<()> {
    writeln!(w, "code,dnl_lsb,inl_lsb")?;
    for (i, (d, l)) in r.dnl.iter().zip(&r.inl).enumerate() {
        writeln!(w, "{},{:.6},{:.6}", r.first_code + i as i32, d, l)?;
    }
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpurKind {
    /// At `k * fs / M`: channel offset mismatch.
    Offset,
    /// At `±fin + k * fs / M`: channel gain or timing mismatch.
    Image,
    Harmonic,
    Other,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spur {
    pub bin: usize,
    pub dbc: f64,
    pub kind: SpurKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub n_samples: usize,
    pub sndr_db: f64,
    pub enob: f64,
    pub fundamental_bin: usize,
    pub signal_power: f64,
    /// Largest spurs, strongest first.
    pub spur_list: Vec<Spur>,
    pub max_image_spur_dbc: Option<f64>,
    pub max_offset_spur_dbc: Option<f64>,
}

/// Checks the coherent-sampling preconditions and returns the cycle count.
pub fn check_coherence(n: usize, fs: f64, fin: f64) -> Result<usize> {
    if n < MIN_FFT_LEN || !n.is_power_of_two() {
        return Err(Error::invalid(format!(
            "capture length {n} must be a power of two >= {MIN_FFT_LEN}"
        )));
    }
    if !(fs > 0.0) || !(fin > 0.0) {
        return Err(Error::invalid("fs and fin must be positive"));
    }
    let j = fin * n as f64 / fs;
    let jr = j.round();
    let coherent = (j - jr).abs() < 1e-6 * j.max(1.0)
        && jr >= 1.0
        && (jr as usize) < n / 2
        && jr as u64 % 2 == 1
        && gcd(jr as u64, n as u64) == 1;
    if !coherent {
        return Err(Error::NonCoherent {
            fin_hz: fin,
            suggested_hz: nearest_coherent(fin, fs, n),
        });
    }
    Ok(jr as usize)
}

/// One-sided power per bin (`0..=n/2`) of a rectangular-window FFT,
/// normalized so that the bins sum to the mean-square of `x`.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / (n as f64 * n as f64);
    (0..=n / 2)
        .map(|k| {
            let p = buf[k].norm_sqr() * scale;
            if k == 0 || (n % 2 == 0 && k == n / 2) {
                p
            } else {
                2.0 * p
            }
        })
        .collect()
}

fn fold_bin(b: i64, n: usize) -> usize {
    let n = n as i64;
    let r = b.rem_euclid(n);
    (if r > n / 2 { n - r } else { r }) as usize
}

fn classify(bin: usize, j: usize, n: usize, channels: usize) -> SpurKind {
    let step = n / channels.max(1);
    if channels > 1 && n % channels == 0 {
        for k in 0..=channels as i64 {
            let k = k * step as i64;
            if fold_bin(k, n) == bin {
                return SpurKind::Offset;
            }
            if fold_bin(k + j as i64, n) == bin || fold_bin(k - j as i64, n) == bin {
                return SpurKind::Image;
            }
        }
    }
    for h in 2..=9i64 {
        if fold_bin(h * j as i64, n) == bin {
            return SpurKind::Harmonic;
        }
    }
    SpurKind::Other
}

/// SNDR and ENOB of a coherent single-tone capture, with spurs tagged for a
/// 16-way interleaver.
pub fn sndr_enob(samples: &[f64], fs: f64, fin: f64) -> Result<SpectrumReport> {
    sndr_enob_interleaved(samples, fs, fin, DEFAULT_CHANNELS)
}

pub fn sndr_enob_interleaved(samples: &[f64], fs: f64, fin: f64, channels: usize) -> Result<SpectrumReport> {
    let n = samples.len();
    let j = check_coherence(n, fs, fin)?;
    let p = power_spectrum(samples);
    let total: f64 = p.iter().sum();
    let signal = p[j];
    let noise = (total - p[0] - signal).max(f64::MIN_POSITIVE);
    let sndr_db = 10.0 * (signal / noise).log10();
    let dbc = |v: f64| 10.0 * (v.max(f64::MIN_POSITIVE) / signal).log10();
    let mut spurs: Vec<Spur> = (1..p.len())
        .filter(|&b| b != j)
        .map(|b| Spur {
            bin: b,
            dbc: dbc(p[b]),
            kind: classify(b, j, n, channels),
        })
        .collect();
    spurs.sort_by(|a, b| b.dbc.total_cmp(&a.dbc).then(a.bin.cmp(&b.bin)));
    let max_of = |kind: SpurKind| spurs.iter().find(|s| s.kind == kind).map(|s| s.dbc);
    let max_image_spur_dbc = max_of(SpurKind::Image);
    let max_offset_spur_dbc = max_of(SpurKind::Offset);
    spurs.truncate(16);
    Ok(SpectrumReport {
        n_samples: n,
        sndr_db,
        enob: (sndr_db - 1.76) / 6.02,
        fundamental_bin: j,
        signal_power: signal,
        spur_list: spurs,
        max_image_spur_dbc,
        max_offset_spur_dbc,
    })
}

/// Asynchronous sampler used by the delay monitor. Its period is
/// `num / den` times the measured clock's period.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncorrelatedSampler {
    pub ratio_num: u64,
    pub ratio_den: u64,
    pub jitter_sigma: Duration,
    pub seed: u64,
}

impl Default for UncorrelatedSampler {
    fn default() -> Self {
        UncorrelatedSampler {
            ratio_num: 1_000_003,
            ratio_den: 999_983,
            jitter_sigma: Duration::from_ps(1.0),
            seed: 0,
        }
    }
}

/// Largest denominator treated as a correlating period ratio.
const CORRELATION_MAX_DEN: u64 = 1000;

impl UncorrelatedSampler {
    pub fn ratio(&self) -> f64 {
        self.ratio_num as f64 / self.ratio_den as f64
    }

    /// Rejects ratios within reach of a small-denominator fraction: the
    /// sample phases would then revisit only a few points of the period.
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if self.ratio_num == 0 || self.ratio_den == 0 {
            return Err(Error::invalid("sampler ratio must be positive"));
        }
        let x = self.ratio();
        let tol = 1.0 / n_samples.max(1) as f64;
        // Continued-fraction convergents h/k of the ratio.
        let (mut h0, mut h1) = (1u64, x.floor() as u64);
        let (mut k0, mut k1) = (0u64, 1u64);
        let mut frac = x - x.floor();
        loop {
            if ((k1 as f64) * x - h1 as f64).abs() < tol {
                return Err(Error::CorrelatedSampler { num: h1, den: k1 });
            }
            if frac < 1e-15 {
                break;
            }
            let inv = 1.0 / frac;
            let a = inv.floor() as u64;
            frac = inv - inv.floor();
            let (h2, k2) = (a * h1 + h0, a * k1 + k0);
            if k2 > CORRELATION_MAX_DEN {
                break;
            }
            (h0, h1, k0, k1) = (h1, h2, k1, k2);
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEstimate {
    pub code: u8,
    /// Estimated output delay after the input clock edge, in `[0, T)`.
    pub phase: Duration,
    /// The simulator's own phase for the code, reduced to `[0, T)`.
    pub true_phase: Duration,
    pub p_i: f64,
    pub p_q: f64,
    pub n_samples: usize,
}

/// Delay monitor: the PI output is XORed with in-phase and quadrature copies
/// of its input clock and the XOR outputs are sampled by an asynchronous
/// clock. The high fraction of the in-phase XOR is `2|d|/T`; the quadrature
/// XOR resolves the sign of `d`.
pub fn measure_pi_transfer_uncorrelated(
    pi: &PhaseInterpolator,
    codes: &[u8],
    sampler: &UncorrelatedSampler,
    n_samples: usize,
) -> Result<Vec<PhaseEstimate>> {
    if n_samples < MIN_MONITOR_SAMPLES {
        return Err(Error::invalid(format!(
            "delay monitor needs >= {MIN_MONITOR_SAMPLES} samples per code, got {n_samples}"
        )));
    }
    sampler.validate(n_samples)?;
    let t = pi.period.secs();
    let ts = t * sampler.ratio();
    let sigma = sampler.jitter_sigma.secs();
    codes
        .iter()
        .map(|&code| {
            let phi = pi.phase(code).secs().rem_euclid(t);
            let mut rng = substream(sampler.seed, "pi.monitor", u64::from(code));
            let start: f64 = rng.gen_range(0.0..t);
            let high = |x: f64| x.rem_euclid(t) < 0.5 * t;
            let (mut hi_i, mut hi_q) = (0usize, 0usize);
            for i in 0..n_samples {
                let mut s = start + ts * i as f64;
                if sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s += sigma * z;
                }
                let out = high(s - phi);
                hi_i += usize::from(out != high(s));
                hi_q += usize::from(out != high(s - 0.25 * t));
            }
            let p_i = hi_i as f64 / n_samples as f64;
            let p_q = hi_q as f64 / n_samples as f64;
            let mag = p_i * t / 2.0;
            let d = if p_q <= 0.5 { mag } else { t - mag };
            Ok(PhaseEstimate {
                code,
                phase: Duration(d.rem_euclid(t)),
                true_phase: Duration(phi),
                p_i,
                p_q,
                n_samples,
            })
        })
        .collect()
}

/// Differences of consecutive estimates, unwrapped across the clock period.
pub fn step_estimates(estimates: &[PhaseEstimate], period: Duration) -> Vec<Duration> {
    let t = period.secs();
    estimates
        .windows(2)
        .map(|w| {
            let mut d = w[1].phase.secs() - w[0].phase.secs();
            if d < -0.5 * t {
                d += t;
            } else if d > 0.5 * t {
                d -= t;
            }
            Duration(d)
        })
        .collect()
}

/// Walden figure of merit in joules per conversion step.
pub fn walden_fom(power_w: f64, enob: f64, rate: f64) -> Result<f64> {
    if !(power_w > 0.0) || !(rate > 0.0) || !enob.is_finite() {
        return Err(Error::invalid("walden_fom needs positive power and rate and a finite ENOB"));
    }
    Ok(power_w / (2f64.powf(enob) * rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pi::DelayChain;

    fn quantize(x: f64) -> f64 {
        x.round().clamp(-127.0, 127.0)
    }

    fn sine(n: usize, j: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|k| quantize(amp * (2.0 * PI * j as f64 * k as f64 / n as f64 + 0.3).sin()))
            .collect()
    }

    #[test]
    fn ideal_ramp_linearity() {
        let n = 1_000_000;
        let codes = (0..n).map(|i| quantize(-127.5 + 255.0 * (i as f64 + 0.5) / n as f64) as i32);
        let h = code_histogram(codes, -128, 127);
        let r = code_density_linearity(&h, -128, HistogramStimulus::Ramp).unwrap();
        assert!(r.dnl_max < 0.02, "dnl {}", r.dnl_max);
        assert!(r.inl_max < 0.02, "inl {}", r.inl_max);
        assert!(r.missing_codes.is_empty());
        assert_eq!(r.inl[0], 0.0);
        assert_eq!(*r.inl.last().unwrap(), 0.0);
    }

    #[test]
    fn ideal_sine_linearity() {
        let n = 1 << 20;
        let x = sine(n, 4099, 129.0);
        let h = code_histogram(x.iter().map(|&v| v as i32), -128, 127);
        let r = code_density_linearity(&h, -128, HistogramStimulus::Sine).unwrap();
        assert!(r.dnl_max < 0.05, "dnl {}", r.dnl_max);
        assert!(r.inl_max < 0.05, "inl {}", r.inl_max);
    }

    #[test]
    fn missing_code() {
        let mut h = vec![1000u64; 64];
        h[20] = 0;
        let r = code_density_linearity(&h, 0, HistogramStimulus::Ramp).unwrap();
        assert_eq!(r.missing_codes, vec![20]);
        assert_eq!(r.dnl[20 - r.first_code as usize], -1.0);
    }

    #[test]
    fn undersampled_rejected() {
        let h = vec![10u64; 64];
        assert!(matches!(
            code_density_linearity(&h, 0, HistogramStimulus::Ramp),
            Err(Error::UndersampledHistogram { .. })
        ));
    }

    #[test]
    fn parseval() {
        let x: Vec<f64> = (0..4096).map(|k| ((k * 7919) % 263) as f64 - 100.0).collect();
        let p: f64 = power_spectrum(&x).iter().sum();
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((p - ms).abs() / ms < 1e-9);
    }

    #[test]
    fn ideal_8bit_enob() {
        let n = 8192;
        let fs = 20e9;
        let j = 401;
        let r = sndr_enob(&sine(n, j, 127.0), fs, j as f64 * fs / n as f64).unwrap();
        assert!(r.enob > 7.85 && r.enob < 8.05, "enob {}", r.enob);
        assert_eq!(r.fundamental_bin, j);
        assert_eq!(r.enob, (r.sndr_db - 1.76) / 6.02);
    }

    #[test]
    fn ideal_n_bit_oracle() {
        let n = 8192;
        let j = 1001;
        for bits in [6u32, 8, 10] {
            let q = 2f64.powi(bits as i32 - 1);
            let x: Vec<f64> = (0..n)
                .map(|k| (q * (2.0 * PI * j as f64 * k as f64 / n as f64 + 0.1).sin() - 0.5).round() + 0.5)
                .map(|v: f64| v.clamp(-q + 0.5, q - 0.5))
                .collect();
            let r = sndr_enob(&x, 1.0, j as f64 / n as f64).unwrap();
            let theory = 6.02 * bits as f64 + 1.76;
            assert!((r.sndr_db - theory).abs() < 0.2, "{bits} bits: {} vs {theory}", r.sndr_db);
        }
    }

    #[test]
    fn half_amplitude_loses_6db() {
        let n = 8192;
        let j = 401;
        let f = j as f64 / n as f64;
        let full = sndr_enob(&sine(n, j, 127.0), 1.0, f).unwrap();
        let half = sndr_enob(&sine(n, j, 63.5), 1.0, f).unwrap();
        assert!((full.sndr_db - half.sndr_db - 6.02).abs() < 0.5);
    }

    #[test]
    fn non_coherent_rejected() {
        let x = vec![0.0; 8192];
        match sndr_enob(&x, 20e9, 1e9) {
            Err(Error::NonCoherent { suggested_hz, .. }) => {
                let j = suggested_hz * 8192.0 / 20e9;
                assert!((j - j.round()).abs() < 1e-9 && j.round() as u64 % 2 == 1);
            }
            other => panic!("{other:?}"),
        }
        assert!(sndr_enob(&vec![0.0; 1000], 1.0, 0.001).is_err());
    }

    #[test]
    fn image_spur_tagging() {
        let n = 8192;
        let j = 401;
        // Alternate the gain of every 4th sample.
        let x: Vec<f64> = (0..n)
            .map(|k| {
                let g = if k % 4 == 1 { 1.02 } else { 1.0 };
                g * 100.0 * (2.0 * PI * j as f64 * k as f64 / n as f64).sin()
            })
            .collect();
        let r = sndr_enob(&x, 1.0, j as f64 / n as f64).unwrap();
        assert_eq!(r.spur_list[0].kind, SpurKind::Image);
        assert!(r.max_image_spur_dbc.unwrap() > -50.0);
    }

    #[test]
    fn fom_examples() {
        let a = walden_fom(0.175, 5.6, 20e9).unwrap() * 1e12;
        assert!((a - 0.18).abs() < 0.005, "{a}");
        let b = walden_fom(8.6e-3, 5.9, 1.25e9).unwrap() * 1e12;
        assert!((b - 0.12).abs() < 0.005, "{b}");
        assert_eq!(walden_fom(1.0, 0.0, 1.0).unwrap(), 1.0);
        assert!(walden_fom(0.0, 5.0, 1.0).is_err());
    }

    #[test]
    fn correlated_sampler_rejected() {
        let s = UncorrelatedSampler {
            ratio_num: 5,
            ratio_den: 4,
            ..UncorrelatedSampler::default()
        };
        assert!(matches!(s.validate(1_000_000), Err(Error::CorrelatedSampler { num: 5, den: 4 })));
        assert!(UncorrelatedSampler::default().validate(1_000_000).is_ok());
    }

    #[test]
    fn monitor_resolves_one_step() {
        let pi = PhaseInterpolator::new(DelayChain::ideal(32, Duration::from_ps(12.5)), Duration::from_ps(200.0)).unwrap();
        let est = measure_pi_transfer_uncorrelated(&pi, &[100, 101], &UncorrelatedSampler::default(), 1_000_000).unwrap();
        let step = step_estimates(&est, pi.period)[0].as_ps();
        assert!((step - 0.78125).abs() < 0.25, "step {step}");
        for e in &est {
            assert!((e.phase - e.true_phase).abs().as_ps() < 0.25);
        }
    }

    #[test]
    fn monitor_sign_resolution() {
        let pi = PhaseInterpolator::new(DelayChain::ideal(32, Duration::from_ps(12.5)), Duration::from_ps(200.0)).unwrap();
        // Codes 0 and 200 land in different halves of the period.
        let est = measure_pi_transfer_uncorrelated(&pi, &[0, 200], &UncorrelatedSampler::default(), 200_000).unwrap();
        for e in &est {
            assert!((e.phase - e.true_phase).abs().as_ps() < 0.5, "{e:?}");
        }
    }
}
