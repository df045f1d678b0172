//! The 16-slice time-interleaved converter.
//!
//! Four phase interpolators share a quarter-rate input clock. Group `g`
//! samples on PI `g`'s output, and the four slices of a group take turns on
//! successive input-clock cycles, so slice `s = 4r + g` samples at
//! `800 ps * n + 50 ps * s` on the nominal 20 GS/s grid.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::check_coherence;
use crate::pi::{DelayChain, PhaseInterpolator, PiConfig, PI_CODES};
use crate::stdc::{adapt_offset, unfold, AdaptParams, InverterChain, RawCount, StdcConfig};
use crate::stimulus::Stimulus;
use crate::time::{ClockSpec, Duration, Instant};
use crate::v2t::{fold, gen_sampling_phases, PhaseOffsets, PhaseSet, V2tConfig, V2tPair};

pub const N_SLICES: usize = 16;
/// Output codes saturate at `±CODE_LIMIT`.
pub const CODE_LIMIT: i32 = 127;
pub const LUT_SIZE: usize = 256;
/// Index of code 0 in LUTs and per-slice histograms.
pub const LUT_ORIGIN: i32 = 128;
pub const CALIBRATION_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterleaverConfig {
    pub n_groups: usize,
    pub slices_per_group: usize,
    /// Aggregate sample rate in samples/s.
    pub aggregate_rate: f64,
    /// Quarter-rate clock feeding the PIs.
    pub input_clock: ClockSpec,
    pub pi: PiConfig,
    /// Run the blender-inversion trim on every PI at construction.
    pub trim_pi: bool,
    pub v2t: V2tConfig,
    pub stdc: StdcConfig,
    pub phases: PhaseOffsets,
    /// Input common-mode voltage.
    pub common_mode: f64,
    /// Timing error added to each group's sampling instants.
    pub skew_injection: Vec<Duration>,
    /// Corner of the optional two-stage first-order T&H filter.
    #[serde(default)]
    pub track_filter_hz: Option<f64>,
    /// Aligner depth per slice, in slice cycles.
    pub latency: Vec<usize>,
    pub adapt: AdaptParams,
}

impl Default for InterleaverConfig {
    fn default() -> Self {
        InterleaverConfig {
            n_groups: 4,
            slices_per_group: 4,
            aggregate_rate: 20e9,
            input_clock: ClockSpec::new(Duration::from_ps(200.0), Instant::ZERO),
            pi: PiConfig::default(),
            trim_pi: true,
            v2t: V2tConfig::default(),
            stdc: StdcConfig::default(),
            phases: PhaseOffsets::default(),
            common_mode: 0.6,
            skew_injection: vec![Duration::ZERO; 4],
            track_filter_hz: None,
            latency: vec![2; N_SLICES],
            adapt: AdaptParams::default(),
        }
    }
}

impl InterleaverConfig {
    pub fn n_slices(&self) -> usize {
        self.n_groups * self.slices_per_group
    }

    pub fn slice_period(&self) -> Duration {
        Duration(self.n_slices() as f64 / self.aggregate_rate)
    }

    /// Differential input voltage of one output LSB on a nominal slice.
    pub fn lsb_volts(&self) -> f64 {
        self.v2t.discharge_slope * self.stdc.tap_delay.secs()
    }

    /// PI code of group `g` that lands it on the nominal grid.
    pub fn base_pi_code(&self, g: usize) -> i32 {
        let spacing = (PI_CODES / self.n_groups) as i32;
        spacing / 2 + spacing * g as i32
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slices() != N_SLICES {
            return Err(Error::invalid(format!(
                "n_groups x slices_per_group must be {N_SLICES}, got {}",
                self.n_slices()
            )));
        }
        if PI_CODES % self.n_groups != 0 {
            return Err(Error::invalid("PI code range must split evenly across groups"));
        }
        if !(self.aggregate_rate > 0.0) {
            return Err(Error::invalid("aggregate_rate must be positive"));
        }
        self.input_clock.validate()?;
        let want = self.n_groups as f64 / self.aggregate_rate;
        if ((self.input_clock.period.secs() - want) / want).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "input clock period {} does not match {} groups at {} S/s",
                self.input_clock.period, self.n_groups, self.aggregate_rate
            )));
        }
        if self.skew_injection.len() != self.n_groups {
            return Err(Error::invalid("skew_injection needs one entry per group"));
        }
        if self.latency.len() != N_SLICES {
            return Err(Error::invalid("latency needs one entry per slice"));
        }
        if let Some(fc) = self.track_filter_hz {
            if !(fc > 0.0) {
                return Err(Error::invalid("track filter corner must be positive"));
            }
        }
        let half_range = (self.v2t.vdd - self.common_mode).min(self.common_mode - self.v2t.v_threshold);
        if !(half_range > 0.0) {
            return Err(Error::invalid("common mode must lie between V2T threshold and vdd"));
        }
        self.pi.validate()?;
        self.v2t.validate()?;
        self.stdc.validate()?;
        self.phases.validate()?;
        self.adapt.validate()
    }

    /// Largest pulse width any in-range input can produce.
    fn max_pulse_width(&self) -> Duration {
        let v_span = self.v2t.vdd - self.v2t.v_threshold * (1.0 - 6.0 * self.v2t.threshold_sigma_rel).max(0.0);
        let slope = self.v2t.discharge_slope * (1.0 - 6.0 * self.v2t.slope_sigma_rel).max(0.05);
        Duration(v_span / slope) + self.stdc.d_offset
    }
}

/// Look-up table from signed raw code to corrected code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lut {
    /// `mapping[c + 128]` is the corrected value of code `c`.
    pub mapping: Vec<i32>,
}

impl Lut {
    pub fn identity() -> Self {
        Lut {
            mapping: (0..LUT_SIZE as i32).map(|i| i - LUT_ORIGIN).collect(),
        }
    }

    pub fn apply(&self, code: i32) -> i32 {
        let i = (code + LUT_ORIGIN).clamp(0, LUT_SIZE as i32 - 1) as usize;
        self.mapping[i]
    }

    pub fn is_monotone(&self) -> bool {
        self.mapping.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.mapping.len() != LUT_SIZE {
            return Err(Error::invalid(format!("LUT must have {LUT_SIZE} entries")));
        }
        if !self.is_monotone() {
            return Err(Error::invalid("LUT mapping is not monotone"));
        }
        Ok(())
    }
}

/// Known stimulus used to build a LUT, in output LSB.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LutStimulus {
    Sine { amplitude_lsb: f64 },
    Ramp { lo_lsb: f64, hi_lsb: f64 },
}

/// Minimum hits for a reachable code in a LUT calibration histogram.
pub const LUT_MIN_HITS: u64 = 100;

/// Code-density linearization: each code maps to the ideal level at which
/// the stimulus' cumulative distribution equals the code's observed one.
/// `histogram` is indexed by `code + 128`. The lowest and highest observed
/// codes are partial end bins and are exempt from the coverage check.
pub fn build_lut(histogram: &[u64], stimulus: LutStimulus) -> Result<Lut> {
    if histogram.len() != LUT_SIZE {
        return Err(Error::invalid(format!("LUT histogram must have {LUT_SIZE} bins")));
    }
    let first = histogram.iter().position(|&h| h > 0);
    let last = histogram.iter().rposition(|&h| h > 0);
    let sparse: Vec<i32> = histogram
        .iter()
        .enumerate()
        .filter(|&(i, &h)| h > 0 && h < LUT_MIN_HITS && Some(i) != first && Some(i) != last)
        .map(|(i, _)| i as i32 - LUT_ORIGIN)
        .collect();
    if !sparse.is_empty() {
        return Err(Error::InsufficientCoverage { codes: sparse });
    }
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::InsufficientCoverage { codes: Vec::new() });
    }
    let n = total as f64;
    let mut below = 0u64;
    let mapping = histogram
        .iter()
        .map(|&h| {
            let f = (below as f64 + 0.5 * h as f64) / n;
            below += h;
            let x = match stimulus {
                LutStimulus::Sine { amplitude_lsb } => -amplitude_lsb * (std::f64::consts::PI * f).cos(),
                LutStimulus::Ramp { lo_lsb, hi_lsb } => lo_lsb + f * (hi_lsb - lo_lsb),
            };
            (x.round() as i32).clamp(-CODE_LIMIT, CODE_LIMIT)
        })
        .collect();
    let lut = Lut { mapping };
    lut.validate()?;
    Ok(lut)
}

/// Calibration applied during a capture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    /// One LUT per slice; empty means no LUT.
    #[serde(default)]
    pub luts: Vec<Lut>,
    /// One offset code per slice; empty means adapt from each capture.
    #[serde(default)]
    pub offset_codes: Vec<u32>,
    /// PI code correction per group; empty means none.
    #[serde(default)]
    pub pi_corrections: Vec<i32>,
}

impl Calibration {
    /// Every slice uses the offset code of an ideal chain.
    pub fn nominal_offsets(cfg: &InterleaverConfig) -> Self {
        Calibration {
            offset_codes: vec![cfg.stdc.nominal_offset_code(); N_SLICES],
            ..Calibration::default()
        }
    }

    pub fn correction(&self, g: usize) -> i32 {
        self.pi_corrections.get(g).copied().unwrap_or(0)
    }

    pub fn validate(&self, cfg: &InterleaverConfig) -> Result<()> {
        for (name, len) in [("luts", self.luts.len()), ("offset_codes", self.offset_codes.len())] {
            if len != 0 && len != N_SLICES {
                return Err(Error::invalid(format!("{name} must be empty or have {N_SLICES} entries")));
            }
        }
        if !self.pi_corrections.is_empty() && self.pi_corrections.len() != cfg.n_groups {
            return Err(Error::invalid("pi_corrections must be empty or have one entry per group"));
        }
        self.luts.iter().try_for_each(Lut::validate)
    }
}

/// Persisted calibration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationState {
    pub version: u32,
    pub master_seed: u64,
    pub config_hash: String,
    pub calibration: Calibration,
}

impl CalibrationState {
    pub fn new(master_seed: u64, config_hash: String, calibration: Calibration) -> Self {
        CalibrationState {
            version: CALIBRATION_VERSION,
            master_seed,
            config_hash,
            calibration,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration state serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let st: CalibrationState =
            serde_json::from_str(s).map_err(|e| Error::invalid(format!("calibration file: {e}")))?;
        if st.version != CALIBRATION_VERSION {
            return Err(Error::invalid(format!(
                "unsupported calibration file version {}",
                st.version
            )));
        }
        Ok(st)
    }
}

/// Per-slice output of a capture, including the aligner's reset entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceStream {
    pub slice: usize,
    pub instants: Vec<Instant>,
    pub raw: Vec<RawCount>,
    pub codes: Vec<i32>,
    pub corrected: Vec<i32>,
}

impl SliceStream {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capture {
    pub streams: Vec<SliceStream>,
    pub latencies: Vec<usize>,
    pub offset_codes: Vec<u32>,
}

impl Capture {
    pub fn align(&self) -> Result<AlignedStream> {
        align_outputs(&self.streams, &self.latencies)
    }

    /// Signed-code histogram per slice (indexed by `code + 128`), aligner
    /// reset entries excluded.
    pub fn slice_histograms(&self) -> Vec<Vec<u64>> {
        self.streams
            .iter()
            .zip(&self.latencies)
            .map(|(s, &lat)| {
                let mut h = vec![0u64; LUT_SIZE];
                for &c in &s.codes[lat..] {
                    h[(c + LUT_ORIGIN) as usize] += 1;
                }
                h
            })
            .collect()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedSample {
    pub slice: usize,
    pub instant: Instant,
    pub raw: RawCount,
    pub code: i32,
    pub corrected: i32,
}

/// Aggregate-rate output; sample `k` comes from slice `k % 16`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignedStream {
    pub samples: Vec<AlignedSample>,
}

impl AlignedStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn codes(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(s.code)).collect()
    }

    pub fn corrected(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(s.corrected)).collect()
    }

    pub fn is_time_ordered(&self) -> bool {
        self.samples.windows(2).all(|w| w[0].instant < w[1].instant)
    }
}

/// Drops each slice's aligner reset entries and interleaves the streams.
pub fn align_outputs(streams: &[SliceStream], latencies: &[usize]) -> Result<AlignedStream> {
    if streams.len() != latencies.len() || streams.is_empty() {
        return Err(Error::StreamLength(format!(
            "{} streams with {} latencies",
            streams.len(),
            latencies.len()
        )));
    }
    let mut len = None;
    for (s, &lat) in streams.iter().zip(latencies) {
        let n = s.len();
        if s.raw.len() != n || s.instants.len() != n || s.corrected.len() != n || n < lat {
            return Err(Error::StreamLength(format!("slice {} stream is malformed", s.slice)));
        }
        match len {
            None => len = Some(n - lat),
            Some(m) if m != n - lat => {
                return Err(Error::StreamLength(format!(
                    "slice {} has {} samples after latency, expected {m}",
                    s.slice,
                    n - lat
                )))
            }
            _ => {}
        }
    }
    let m = len.unwrap_or(0);
    let mut samples = Vec::with_capacity(m * streams.len());
    for i in 0..m {
        for (s, &lat) in streams.iter().zip(latencies) {
            let j = i + lat;
            samples.push(AlignedSample {
                slice: s.slice,
                instant: s.instants[j],
                raw: s.raw[j],
                code: s.codes[j],
                corrected: s.corrected[j],
            });
        }
    }
    Ok(AlignedStream { samples })
}

pub fn write_capture_csv<W: Write>(mut w: W, aligned: &AlignedStream) -> io::Result<()> {
    writeln!(w, "sample_index,slice,instant_seconds,raw_count,signed_code,corrected_code")?;
    for (k, s) in aligned.samples.iter().enumerate() {
        writeln!(
            w,
            "{},{},{:e},{},{},{}",
            k,
            s.slice,
            s.instant.secs(),
            s.raw.0,
            s.code,
            s.corrected
        )?;
    }
    Ok(())
}

/// The sampled hardware: PIs, V2T pairs and STDC chains with mismatch drawn.
#[derive(Clone, Debug)]
pub struct Interleaver {
    pub cfg: InterleaverConfig,
    pub pis: Vec<PhaseInterpolator>,
    pub pairs: Vec<V2tPair>,
    pub chains: Vec<InverterChain>,
    /// Output delay of an ideal PI at the group-0 code.
    pi_reference: Duration,
}

impl Interleaver {
    pub fn new(cfg: InterleaverConfig) -> Result<Self> {
        cfg.validate()?;
        let period = cfg.input_clock.period;
        let pis = (0..cfg.n_groups)
            .map(|g| {
                let mut pi = PhaseInterpolator::new(cfg.pi.chain(g), period)?;
                if cfg.trim_pi {
                    pi.trim_paths(cfg.pi.trim_step(), cfg.pi.max_trim_iters)?;
                }
                Ok(pi)
            })
            .collect::<Result<Vec<_>>>()?;
        let ideal = PhaseInterpolator::new(DelayChain::ideal(cfg.pi.n_taps, cfg.pi.unit_delay), period)?;
        let pi_reference = ideal.phase(cfg.base_pi_code(0) as u8);
        let slice_period = cfg.slice_period();
        let max_width = cfg.max_pulse_width();
        let chains = (0..N_SLICES)
            .map(|s| {
                let c = cfg.stdc.chain(s, slice_period);
                c.validate(max_width)?;
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs = (0..N_SLICES).map(|s| cfg.v2t.pair(s)).collect();
        Ok(Interleaver {
            cfg,
            pis,
            pairs,
            chains,
            pi_reference,
        })
    }

    pub fn group_of(&self, slice: usize) -> usize {
        slice % self.cfg.n_groups
    }

    /// Sampling instant of conversion `n` of `slice` (negative `n` allowed).
    pub fn sampling_instant(&self, slice: usize, n: i64, corrections: &[i32]) -> Instant {
        let g = self.group_of(slice);
        let r = (slice / self.cfg.n_groups) as i64;
        let code = self.cfg.base_pi_code(g) + corrections.get(g).copied().unwrap_or(0);
        let shift = code.div_euclid(PI_CODES as i32) as i64;
        let code = code.rem_euclid(PI_CODES as i32) as u8;
        let cycle = self.cfg.slices_per_group as i64 * n + r + shift;
        self.pis[g].output(code, &self.cfg.input_clock, cycle) - self.pi_reference + self.cfg.skew_injection[g]
    }

    pub fn phase_set(&self, slice: usize, n: i64, corrections: &[i32]) -> Result<PhaseSet> {
        let phi1 = self.sampling_instant(slice, n, corrections);
        gen_sampling_phases(phi1 - self.cfg.phases.track, &self.cfg.phases)
    }

    /// Mean timing error of each group relative to its nominal grid position.
    pub fn group_timing_error(&self, corrections: &[i32]) -> Vec<Duration> {
        let pitch = Duration(1.0 / self.cfg.aggregate_rate);
        (0..self.cfg.n_groups)
            .map(|g| self.sampling_instant(g, 0, corrections) - (Instant::ZERO + pitch * g as f64))
            .collect()
    }

    fn convert(&self, slice: usize, n: u64, v: f64, phases: &PhaseSet) -> Result<(bool, RawCount)> {
        let cm = self.cfg.common_mode;
        let (t_inp, t_inn) = self.pairs[slice].convert(cm + 0.5 * v, cm - 0.5 * v, phases.phi2)?;
        let pulse = fold(t_inp, t_inn, self.cfg.stdc.d_offset)?;
        Ok((pulse.sign, self.chains[slice].count_fast(&pulse, n)))
    }
}

/// Sampling phases of every slice for conversions `0..n_cycles`.
pub fn schedule_sampling(il: &Interleaver, corrections: &[i32], n_cycles: usize) -> Result<Vec<Vec<PhaseSet>>> {
    (0..N_SLICES)
        .map(|s| (0..n_cycles as i64).map(|n| il.phase_set(s, n, corrections)).collect())
        .collect()
}

/// Captures `n_samples` aggregate samples (a multiple of 16).
pub fn run_capture(il: &Interleaver, stimulus: &Stimulus, n_samples: usize, cal: &Calibration) -> Result<Capture> {
    if n_samples == 0 || n_samples % N_SLICES != 0 {
        return Err(Error::invalid(format!("n_samples must be a positive multiple of {N_SLICES}")));
    }
    stimulus.validate()?;
    cal.validate(&il.cfg)?;
    let seen = match il.cfg.track_filter_hz {
        Some(fc) => stimulus.through_lowpass(fc, 2),
        None => *stimulus,
    };
    let corrections: Vec<i32> = (0..il.cfg.n_groups).map(|g| cal.correction(g)).collect();
    let n_cycles = n_samples / N_SLICES;
    let mut streams = Vec::with_capacity(N_SLICES);
    let mut offsets = Vec::with_capacity(N_SLICES);
    for s in 0..N_SLICES {
        let lat = il.cfg.latency[s];
        let mut instants = Vec::with_capacity(lat + n_cycles);
        let mut signs = Vec::with_capacity(n_cycles);
        let mut raw = Vec::with_capacity(lat + n_cycles);
        for n in -(lat as i64)..0 {
            instants.push(il.phase_set(s, n, &corrections)?.phi1);
            raw.push(RawCount(0));
        }
        for n in 0..n_cycles {
            let ps = il.phase_set(s, n as i64, &corrections)?;
            let v = seen.value(ps.phi1);
            let (sign, count) = il.convert(s, n as u64, v, &ps).map_err(|e| e.at(s, n))?;
            instants.push(ps.phi1);
            signs.push(sign);
            raw.push(count);
        }
        let offset = match cal.offset_codes.get(s) {
            Some(&o) => o,
            None => adapt_offset(&raw[lat..], il.cfg.adapt, il.cfg.stdc.n_taps)?.offset_code,
        };
        let mut codes = vec![0; lat];
        codes.extend(
            raw[lat..]
                .iter()
                .zip(&signs)
                .map(|(&r, &sign)| unfold(r, offset, sign).code.clamp(-CODE_LIMIT, CODE_LIMIT)),
        );
        let corrected = match cal.luts.get(s) {
            Some(lut) => codes.iter().map(|&c| lut.apply(c)).collect(),
            None => codes.clone(),
        };
        offsets.push(offset);
        streams.push(SliceStream {
            slice: s,
            instants,
            raw,
            codes,
            corrected,
        });
    }
    Ok(Capture {
        streams,
        latencies: il.cfg.latency.clone(),
        offset_codes: offsets,
    })
}

/// Builds one LUT per slice from a calibration capture.
pub fn build_luts(capture: &Capture, stimulus: LutStimulus) -> Result<Vec<Lut>> {
    capture
        .slice_histograms()
        .iter()
        .enumerate()
        .map(|(s, h)| {
            build_lut(h, stimulus).map_err(|e| match e {
                Error::InsufficientCoverage { codes } => {
                    Error::invalid(format!("slice {s}: insufficient calibration coverage for codes {codes:?}"))
                }
                other => other,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewCalibration {
    /// PI code correction per group.
    pub corrections: Vec<i32>,
    /// Timing error per group estimated on the last capture, relative to
    /// the median group.
    pub residual_estimate: Vec<Duration>,
    pub iterations: usize,
}

/// Least-squares sine phase of the samples at indices `idx`.
fn fit_phase(x: &[f64], idx: &[usize], omega_per_sample: f64) -> f64 {
    // Normal equations for x = a sin + b cos + c.
    let mut m = [[0.0f64; 3]; 3];
    let mut r = [0.0f64; 3];
    for &k in idx {
        let th = omega_per_sample * k as f64;
        let v = [th.sin(), th.cos(), 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += v[i] * v[j];
            }
            r[i] += v[i] * x[k];
        }
    }
    let sol = solve3(m, r);
    sol[1].atan2(sol[0])
}

fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap_or(col);
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| m[row][k] * x[k]).sum();
        x[row] = (r[row] - s) / m[row][row];
    }
    x
}

fn wrap_pi(x: f64) -> f64 {
    use std::f64::consts::PI;
    (x + PI).rem_euclid(2.0 * PI) - PI
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Per-group timing error, relative to the median group, from a capture of
/// a coherent tone.
pub fn estimate_group_skew(aligned: &AlignedStream, n_groups: usize, fs: f64, fin: f64) -> Vec<Duration> {
    let x = aligned.corrected();
    let w = 2.0 * std::f64::consts::PI * fin / fs;
    let phases: Vec<f64> = (0..n_groups)
        .map(|g| {
            let idx: Vec<usize> = (0..x.len()).filter(|k| (k % N_SLICES) % n_groups == g).collect();
            fit_phase(&x, &idx, w)
        })
        .collect();
    let rel: Vec<f64> = phases.iter().map(|p| wrap_pi(p - phases[0])).collect();
    let mid = median(&rel);
    rel.iter()
        .map(|p| Duration(p - mid) / (2.0 * std::f64::consts::PI * fin))
        .collect()
}

/// Integer code moves that leave the smallest spread of residual timing
/// error across groups.
fn choose_code_moves(skew: &[Duration], step: Duration) -> Vec<i32> {
    let mut best: Option<((f64, f64, i64), Vec<i32>)> = None;
    for &anchor in skew {
        for m in 0..8 {
            let r = anchor + step * (m as f64 / 8.0);
            let moves: Vec<i32> = skew.iter().map(|&d| ((d - r) / step).round() as i32).collect();
            let res: Vec<f64> = skew
                .iter()
                .zip(&moves)
                .map(|(&d, &c)| (d - r - step * f64::from(c)).secs())
                .collect();
            let spread = res.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - res.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean = res.iter().sum::<f64>() / res.len() as f64;
            let ss: f64 = res.iter().map(|v| (v - mean).powi(2)).sum();
            let total: i64 = moves.iter().map(|&c| i64::from(c.abs())).sum();
            // Quantize the spread so that ties are decided by the later keys.
            let key = ((spread * 1e18).round(), (ss * 1e36).round(), total);
            if best.as_ref().map_or(true, |(k, _)| key < *k) {
                best = Some((key, moves));
            }
        }
    }
    best.map(|(_, m)| m).unwrap_or_default()
}

/// Closed-loop skew calibration: capture the tone, fit each group's phase,
/// move each group's PI code against its timing error, repeat until no
/// code moves. `base` supplies LUTs, offsets and starting corrections.
pub fn calibrate_skew(
    il: &Interleaver,
    tone: &Stimulus,
    n_samples: usize,
    base: &Calibration,
    max_iters: usize,
) -> Result<SkewCalibration> {
    let (amplitude, fin) = match *tone {
        Stimulus::Sine {
            amplitude, frequency, ..
        } => (amplitude, frequency),
        _ => return Err(Error::invalid("skew calibration needs a sine tone")),
    };
    let fs = il.cfg.aggregate_rate;
    check_coherence(n_samples, fs, fin)?;
    let half_scale = 0.5 * f64::from(CODE_LIMIT) * il.cfg.lsb_volts();
    if amplitude < half_scale {
        return Err(Error::invalid(format!(
            "skew calibration tone amplitude {amplitude} V is below half scale {half_scale} V"
        )));
    }
    let step = il.cfg.input_clock.period / PI_CODES as f64;
    let mut cal = base.clone();
    if cal.pi_corrections.is_empty() {
        cal.pi_corrections = vec![0; il.cfg.n_groups];
    }
    let mut residual = vec![Duration::ZERO; il.cfg.n_groups];
    for it in 1..=max_iters.max(1) {
        let aligned = run_capture(il, tone, n_samples, &cal)?.align()?;
        residual = estimate_group_skew(&aligned, il.cfg.n_groups, fs, fin);
        let moves = choose_code_moves(&residual, step);
        if moves.iter().all(|&c| c == 0) {
            return Ok(SkewCalibration {
                corrections: cal.pi_corrections,
                residual_estimate: residual,
                iterations: it,
            });
        }
        for (c, m) in cal.pi_corrections.iter_mut().zip(moves) {
            *c -= m;
        }
    }
    Ok(SkewCalibration {
        corrections: cal.pi_corrections,
        residual_estimate: residual,
        iterations: max_iters.max(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ideal() -> Interleaver {
        Interleaver::new(InterleaverConfig::default()).unwrap()
    }

    fn ps(v: f64) -> Duration {
        Duration::from_ps(v)
    }

    #[test]
    fn nominal_grid() {
        let il = ideal();
        let mut all: Vec<f64> = (0..N_SLICES)
            .flat_map(|s| (0..4).map(move |n| (s, n)))
            .map(|(s, n)| il.sampling_instant(s, n, &[]).as_ps())
            .collect();
        all.sort_by(f64::total_cmp);
        for (k, t) in all.iter().enumerate() {
            assert!((t - 50.0 * k as f64).abs() < 1e-6, "{k}: {t}");
        }
        assert!((il.sampling_instant(5, 1, &[]).as_ps() - 1050.0).abs() < 1e-6);
    }

    #[test]
    fn injected_skew_moves_one_phase() {
        let mut cfg = InterleaverConfig::default();
        cfg.skew_injection[1] = ps(5.0);
        let il = Interleaver::new(cfg).unwrap();
        for s in 0..N_SLICES {
            let want = 50.0 * s as f64 + if s % 4 == 1 { 5.0 } else { 0.0 };
            assert!((il.sampling_instant(s, 0, &[]).as_ps() - want).abs() < 1e-6);
        }
    }

    #[test]
    fn pi_code_step_and_wrap() {
        let il = ideal();
        let base = il.sampling_instant(2, 0, &[]);
        let up = il.sampling_instant(2, 0, &[0, 0, 1, 0]);
        assert!(((up - base).as_ps() - 0.78125).abs() < 1e-6);
        // Group 0 stepping below code 0 borrows from the previous clock cycle.
        let down = il.sampling_instant(0, 1, &[-40, 0, 0, 0]);
        assert!((down.as_ps() - (800.0 - 40.0 * 0.78125)).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_rate_arithmetic() {
        let mut cfg = InterleaverConfig::default();
        cfg.aggregate_rate = 19e9;
        assert!(Interleaver::new(cfg).is_err());
        let mut cfg = InterleaverConfig::default();
        cfg.n_groups = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_input_gives_zero() {
        let il = ideal();
        let cap = run_capture(&il, &Stimulus::Dc { volts: 0.0 }, 1024, &Calibration::default()).unwrap();
        let a = cap.align().unwrap();
        assert_eq!(a.len(), 1024);
        assert!(a.samples.iter().all(|s| s.code == 0));
        assert!(cap.offset_codes.iter().all(|&o| o == 25));
    }

    #[test]
    fn full_scale_dc() {
        let il = ideal();
        let cfg = &il.cfg;
        let v = 125.0 * cfg.lsb_volts();
        let cal = Calibration::nominal_offsets(cfg);
        let a = run_capture(&il, &Stimulus::Dc { volts: v }, 256, &cal).unwrap().align().unwrap();
        assert!(a.samples.iter().all(|s| s.code == 125));
        let a = run_capture(&il, &Stimulus::Dc { volts: -v }, 256, &cal).unwrap().align().unwrap();
        assert!(a.samples.iter().all(|s| s.code == -125));
    }

    #[test]
    fn underrange_carries_context() {
        let il = ideal();
        match run_capture(&il, &Stimulus::Dc { volts: 0.7 }, 64, &Calibration::default()) {
            Err(Error::Conversion { slice: 0, cycle: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    fn labelled(lat: &[usize], n: usize) -> Vec<SliceStream> {
        (0..N_SLICES)
            .map(|s| {
                let len = n + lat[s];
                SliceStream {
                    slice: s,
                    instants: (0..len)
                        .map(|i| Instant::from_ps(800.0 * (i as f64 - lat[s] as f64) + 50.0 * s as f64))
                        .collect(),
                    raw: vec![RawCount(0); len],
                    codes: vec![s as i32; len],
                    corrected: vec![s as i32; len],
                }
            })
            .collect()
    }

    #[test]
    fn align_labels_and_latency() {
        let lat: Vec<usize> = (0..N_SLICES).map(|s| 1 + (s * 7) % 4).collect();
        let a = align_outputs(&labelled(&lat, 10), &lat).unwrap();
        assert_eq!(a.len(), 160);
        for (k, s) in a.samples.iter().enumerate() {
            assert_eq!(s.code, (k % 16) as i32);
            assert_eq!(s.slice, k % 16);
        }
        assert!(a.is_time_ordered());
        let zero = align_outputs(&labelled(&[0; 16], 10), &[0; 16]).unwrap();
        assert_eq!(zero.codes(), a.codes());
        assert_eq!(
            zero.samples.iter().map(|s| s.instant).collect::<Vec<_>>(),
            a.samples.iter().map(|s| s.instant).collect::<Vec<_>>()
        );
    }

    #[test]
    fn align_rejects_ragged() {
        let lat = vec![2; 16];
        let mut st = labelled(&lat, 10);
        st[3].codes.pop();
        st[3].raw.pop();
        st[3].instants.pop();
        st[3].corrected.pop();
        assert!(matches!(align_outputs(&st, &lat), Err(Error::StreamLength(_))));
    }

    #[test]
    fn lut_identity_for_ideal_sine() {
        let il = ideal();
        let n = 1 << 20;
        let j = 4099.0;
        let tone = Stimulus::sine(130.0 * il.cfg.lsb_volts(), j * 20e9 / n as f64);
        let cap = run_capture(&il, &tone, n, &Calibration::nominal_offsets(&il.cfg)).unwrap();
        let luts = build_luts(&cap, LutStimulus::Sine { amplitude_lsb: 130.0 }).unwrap();
        for lut in &luts {
            for c in -CODE_LIMIT..=CODE_LIMIT {
                assert_eq!(lut.apply(c), c, "code {c}");
            }
        }
    }

    #[test]
    fn lut_sparse_codes_reported() {
        let mut h = vec![0u64; LUT_SIZE];
        for c in -50..=50 {
            h[(c + LUT_ORIGIN) as usize] = 1000;
        }
        h[(7 + LUT_ORIGIN) as usize] = 12;
        h[(51 + LUT_ORIGIN) as usize] = 3;
        match build_lut(&h, LutStimulus::Ramp { lo_lsb: -50.5, hi_lsb: 50.5 }) {
            Err(Error::InsufficientCoverage { codes }) => assert_eq!(codes, vec![7]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ramp_lut_identity() {
        let mut h = vec![0u64; LUT_SIZE];
        for c in -100..=100 {
            h[(c + LUT_ORIGIN) as usize] = 500;
        }
        let lut = build_lut(&h, LutStimulus::Ramp { lo_lsb: -100.5, hi_lsb: 100.5 }).unwrap();
        for c in -100..=100 {
            assert_eq!(lut.apply(c), c);
        }
        assert!(lut.is_monotone());
    }

    #[test]
    fn calibration_state_round_trip() {
        let st = CalibrationState::new(
            9,
            "abc".into(),
            Calibration {
                luts: vec![Lut::identity(); 16],
                offset_codes: vec![25; 16],
                pi_corrections: vec![0, -6, 1, 0],
            },
        );
        assert_eq!(CalibrationState::from_json(&st.to_json()).unwrap(), st);
    }

    #[test]
    fn code_moves_example() {
        let step = ps(0.78125);
        let moves = choose_code_moves(&[ps(0.0), ps(0.0), ps(5.0), ps(0.0)], step);
        assert_eq!(moves, vec![0, 0, 6, 0]);
        assert_eq!(choose_code_moves(&[Duration::ZERO; 4], step), vec![0; 4]);
    }

    #[test]
    fn skew_calibration_single_group() {
        let mut cfg = InterleaverConfig::default();
        cfg.skew_injection[2] = ps(5.0);
        let il = Interleaver::new(cfg).unwrap();
        let n = 8192;
        let tone = Stimulus::sine(120.0 * il.cfg.lsb_volts(), 1887.0 * 20e9 / n as f64);
        let cal = calibrate_skew(&il, &tone, n, &Calibration::nominal_offsets(&il.cfg), 4).unwrap();
        assert_eq!(cal.corrections, vec![0, 0, -6, 0]);
        let none = calibrate_skew(&ideal(), &tone, n, &Calibration::nominal_offsets(&il.cfg), 4).unwrap();
        assert_eq!(none.corrections, vec![0; 4]);
    }

    #[test]
    fn skew_calibration_rejects_bad_tone() {
        let il = ideal();
        let amp = 120.0 * il.cfg.lsb_volts();
        assert!(matches!(
            calibrate_skew(&il, &Stimulus::sine(amp, 1e9), 8192, &Calibration::default(), 4),
            Err(Error::NonCoherent { .. })
        ));
        let f = 1887.0 * 20e9 / 8192.0;
        assert!(calibrate_skew(&il, &Stimulus::sine(0.01, f), 8192, &Calibration::default(), 4).is_err());
    }
}
