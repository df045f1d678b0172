//! Stochastic time-to-digital converter.
//!
//! A clock edge launched into a chain of non-precise inverters produces one
//! delayed edge per tap. The folded pulse is quantized by counting the tap
//! edges that land inside it; the per-tap hits are summed by a balanced adder
//! tree and unfolded to a signed code by removing the offset count and
//! re-applying the sign from the phase folder. The offset count comes from a
//! background loop that tracks a robust minimum of the raw-count histogram.

use std::collections::VecDeque;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mismatch::{derive_seed, Distribution, MismatchModel};
use crate::time::{ClockSpec, Duration, Instant};
use crate::v2t::{fold, PulseSample};

/// Number of taps in the nominal chain.
pub const DEFAULT_TAPS: usize = 255;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RawCount(pub u32);

/// Signed output code of one slice together with the raw count behind it.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdcCode {
    pub code: i32,
    pub raw: RawCount,
}

/// Static description of every slice's STDC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StdcConfig {
    pub n_taps: usize,
    /// Nominal inverter delay (one LSB).
    pub tap_delay: Duration,
    #[serde(default)]
    pub sigma_rel: f64,
    #[serde(default)]
    pub distribution: Distribution,
    #[serde(default)]
    pub seed: u64,
    /// Minimum pulse width added by the phase folder.
    pub d_offset: Duration,
    /// How far the chain launch edge leads the pulse start.
    pub launch_lead: Duration,
    /// Divided-clock period as a multiple of the slice period.
    pub divider_ratio: u32,
    /// Jitter of the divided clock relative to the pulse.
    #[serde(default)]
    pub launch_jitter: Duration,
}

impl Default for StdcConfig {
    fn default() -> Self {
        StdcConfig {
            n_taps: DEFAULT_TAPS,
            tap_delay: Duration::from_ps(4.0),
            sigma_rel: 0.0,
            distribution: Distribution::Gaussian,
            seed: 0,
            d_offset: Duration::from_ps(100.0),
            launch_lead: Duration::from_ps(2.0),
            divider_ratio: 8,
            launch_jitter: Duration::ZERO,
        }
    }
}

impl StdcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_taps == 0 {
            return Err(Error::invalid("STDC needs at least one tap"));
        }
        if !(self.tap_delay.secs() > 0.0) {
            return Err(Error::invalid("STDC tap delay must be positive"));
        }
        if !(self.d_offset.secs() > 0.0) {
            return Err(Error::invalid("d_offset must be positive"));
        }
        if !(self.launch_lead.secs() >= 0.0) {
            return Err(Error::invalid("launch_lead must be >= 0"));
        }
        if self.divider_ratio == 0 {
            return Err(Error::invalid("divider_ratio must be >= 1"));
        }
        self.tap_model().validate()
    }

    pub fn tap_model(&self) -> MismatchModel {
        MismatchModel::new(
            self.tap_delay.secs(),
            self.sigma_rel,
            self.distribution,
            self.seed,
        )
    }

    /// Samples the chain of slice `instance`.
    pub fn chain(&self, instance: usize, slice_period: Duration) -> InverterChain {
        let model = MismatchModel {
            seed: derive_seed(self.seed, "stdc.taps", instance as u64),
            ..self.tap_model()
        };
        let delays = (0..self.n_taps as u64)
            .map(|i| Duration(model.sample_positive(i)))
            .collect();
        let divided_clock = ClockSpec::new(slice_period * f64::from(self.divider_ratio), Instant::ZERO)
            .with_jitter(
                self.launch_jitter,
                derive_seed(self.seed, "stdc.divclk", instance as u64),
            );
        InverterChain::new(delays, divided_clock, self.launch_lead)
    }

    /// Nominal offset code: the count at zero input on an ideal chain.
    pub fn nominal_offset_code(&self) -> u32 {
        ideal_count(self.d_offset, self.tap_delay, self.launch_lead)
    }
}

/// Count of an ideal chain with delay `tau` launched `lead` ahead of a pulse
/// of `width`: the number of `k >= 1` with `k * tau - lead` in `[0, width)`.
pub fn ideal_count(width: Duration, tau: Duration, lead: Duration) -> u32 {
    let hi = ((width + lead) / tau).ceil() as i64 - 1;
    let lo = ((lead / tau).ceil() as i64).max(1);
    (hi - lo + 1).max(0) as u32
}

/// One slice's inverter chain with its per-tap (mismatched) delays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverterChain {
    tap_delays: Vec<Duration>,
    /// Prefix sums of `tap_delays`: arrival of tap `i` after launch.
    cumulative: Vec<Duration>,
    pub divided_clock: ClockSpec,
    pub launch_lead: Duration,
}

impl InverterChain {
    pub fn new(tap_delays: Vec<Duration>, divided_clock: ClockSpec, launch_lead: Duration) -> Self {
        let mut acc = Duration::ZERO;
        let cumulative = tap_delays
            .iter()
            .map(|&d| {
                acc += d;
                acc
            })
            .collect();
        InverterChain {
            tap_delays,
            cumulative,
            divided_clock,
            launch_lead,
        }
    }

    /// A mismatch-free chain of `n_taps` delays of `tau`, launched exactly at
    /// the pulse start with a jitter-free divided clock.
    pub fn uniform(n_taps: usize, tau: Duration) -> Self {
        let clk = ClockSpec::new(Duration::from_ps(6400.0), Instant::ZERO);
        Self::new(vec![tau; n_taps], clk, Duration::ZERO)
    }

    pub fn n_taps(&self) -> usize {
        self.tap_delays.len()
    }

    pub fn tap_delays(&self) -> &[Duration] {
        &self.tap_delays
    }

    pub fn total_delay(&self) -> Duration {
        self.cumulative.last().copied().unwrap_or(Duration::ZERO)
    }

    pub fn mean_tap_delay(&self) -> Duration {
        self.total_delay() / self.n_taps() as f64
    }

    /// Checks the chain invariants for pulses up to `max_width`: positive tap
    /// delays, and a divided clock slow enough that each tap sees at most one
    /// edge per conversion.
    pub fn validate(&self, max_width: Duration) -> Result<()> {
        if self.tap_delays.is_empty() {
            return Err(Error::invalid("inverter chain has no taps"));
        }
        if self.tap_delays.iter().any(|d| !(d.secs() > 0.0)) {
            return Err(Error::invalid("inverter tap delays must be positive"));
        }
        self.divided_clock.validate()?;
        let need = max_width + self.total_delay() + self.launch_lead;
        if self.divided_clock.period <= need {
            return Err(Error::invalid(format!(
                "divided clock period {} must exceed max pulse width plus chain spread {}",
                self.divided_clock.period, need
            )));
        }
        Ok(())
    }

    /// Launch edge used for conversion `cycle` of a pulse starting at `pulse_start`.
    pub fn launch_edge(&self, pulse_start: Instant, cycle: u64) -> Instant {
        pulse_start - self.launch_lead + self.divided_clock.jitter(cycle as i64)
    }

    /// Convenience composition of [`stdc_convert`] for this chain.
    pub fn convert(&self, pulse: &PulseSample, offset_code: u32, cycle: u64) -> AdcCode {
        stdc_convert(pulse, self, offset_code, cycle)
    }

    /// Raw count of `pulse` by binary search over the cumulative delays.
    ///
    /// Equivalent to the structural path of [`stdc_convert`]; used where only
    /// the count matters.
    pub fn count_fast(&self, pulse: &PulseSample, cycle: u64) -> RawCount {
        let launch = self.launch_edge(pulse.start, cycle);
        let lo = pulse.start - launch;
        let hi = pulse.start + pulse.width - launch;
        let a = self.cumulative.partition_point(|c| *c < lo);
        let b = self.cumulative.partition_point(|c| *c < hi);
        RawCount((b - a) as u32)
    }
}

pub fn tap_edge_times(chain: &InverterChain, launch_edge: Instant) -> Vec<Instant> {
    chain.cumulative.iter().map(|&c| launch_edge + c).collect()
}

/// Marks the tap edges inside `[pulse_start, pulse_start + width)`.
pub fn count_edges_in_pulse(pulse: &PulseSample, pulse_start: Instant, edges: &[Instant]) -> (RawCount, Vec<bool>) {
    let end = pulse_start + pulse.width;
    let bits: Vec<bool> = edges.iter().map(|&e| e >= pulse_start && e < end).collect();
    let count = bits.iter().filter(|&&b| b).count() as u32;
    (RawCount(count), bits)
}

/// Balanced binary adder tree over the per-tap hit bits.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct AdderTree {
    n_inputs: usize,
}

impl AdderTree {
    pub fn new(n_inputs: usize) -> Self {
        AdderTree { n_inputs }
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    /// Number of adder levels between the tap bits and the final sum.
    pub fn depth(&self) -> u32 {
        let mut n = self.n_inputs.max(1);
        let mut d = 0;
        while n > 1 {
            n = n.div_ceil(2);
            d += 1;
        }
        d
    }

    pub fn sum(&self, bits: &[bool]) -> Result<RawCount> {
        if bits.len() != self.n_inputs {
            return Err(Error::invalid(format!(
                "adder tree expects {} inputs, got {}",
                self.n_inputs,
                bits.len()
            )));
        }
        let mut level: Vec<u32> = bits.iter().map(|&b| u32::from(b)).collect();
        let mut n = level.len();
        while n > 1 {
            let half = n.div_ceil(2);
            for i in 0..half {
                let a = level[2 * i];
                let b = if 2 * i + 1 < n { level[2 * i + 1] } else { 0 };
                level[i] = a + b;
            }
            n = half;
        }
        Ok(RawCount(level.first().copied().unwrap_or(0)))
    }
}

/// Population count of the 255 tap bits through the adder tree.
pub fn adder_tree_sum(bits: &[bool]) -> Result<RawCount> {
    AdderTree::new(DEFAULT_TAPS).sum(bits)
}

/// Removes the offset count and re-applies the folder's sign. Counts below
/// the offset clamp to zero magnitude.
pub fn unfold(raw: RawCount, offset_code: u32, sign: bool) -> AdcCode {
    let magnitude = raw.0.saturating_sub(offset_code) as i32;
    AdcCode {
        code: if sign { -magnitude } else { magnitude },
        raw,
    }
}

/// Full structural conversion: tap edges, window test, adder tree, unfold.
pub fn stdc_convert(pulse: &PulseSample, chain: &InverterChain, offset_code: u32, cycle: u64) -> AdcCode {
    let launch = chain.launch_edge(pulse.start, cycle);
    let edges = tap_edge_times(chain, launch);
    let (_, bits) = count_edges_in_pulse(pulse, pulse.start, &edges);
    let raw = AdderTree::new(chain.n_taps())
        .sum(&bits)
        .expect("bit vector length matches the chain");
    unfold(raw, offset_code, pulse.sign)
}

/// Parameters of the background offset loop.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptParams {
    /// Number of most recent raw counts kept in the histogram.
    pub window: usize,
    /// Cumulative fraction that defines the robust minimum.
    pub threshold: f64,
}

impl Default for AdaptParams {
    fn default() -> Self {
        AdaptParams {
            window: 10_000,
            threshold: 0.001,
        }
    }
}

impl AdaptParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::invalid("adaptation window must be >= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::invalid("adaptation threshold must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    pub offset_code: u32,
    /// Hits per raw code `0..=n_taps`.
    pub histogram: Vec<u64>,
    /// Number of samples in the histogram.
    pub window: usize,
}

/// Sliding-window histogram of raw counts.
#[derive(Clone, Debug)]
pub struct OffsetAdapter {
    params: AdaptParams,
    recent: VecDeque<RawCount>,
    histogram: Vec<u64>,
}

impl OffsetAdapter {
    pub fn new(params: AdaptParams, n_taps: usize) -> Result<Self> {
        params.validate()?;
        Ok(OffsetAdapter {
            params,
            recent: VecDeque::with_capacity(params.window),
            histogram: vec![0; n_taps + 1],
        })
    }

    pub fn push(&mut self, raw: RawCount) {
        let idx = (raw.0 as usize).min(self.histogram.len() - 1);
        if self.recent.len() == self.params.window {
            if let Some(old) = self.recent.pop_front() {
                let o = (old.0 as usize).min(self.histogram.len() - 1);
                self.histogram[o] -= 1;
            }
        }
        self.recent.push_back(RawCount(idx as u32));
        self.histogram[idx] += 1;
    }

    pub fn len(&self) -> usize {
        self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recent.is_empty()
    }

    /// Smallest code whose cumulative count reaches `threshold * window`.
    pub fn estimate(&self) -> Result<OffsetEstimate> {
        let total = self.recent.len();
        if total == 0 {
            return Err(Error::invalid("offset adaptation needs at least one sample"));
        }
        let target = (self.params.threshold * total as f64).max(f64::MIN_POSITIVE);
        let mut acc = 0u64;
        let mut offset_code = (self.histogram.len() - 1) as u32;
        for (code, &h) in self.histogram.iter().enumerate() {
            acc += h;
            if acc as f64 >= target {
                offset_code = code as u32;
                break;
            }
        }
        Ok(OffsetEstimate {
            offset_code,
            histogram: self.histogram.clone(),
            window: total,
        })
    }
}

pub fn adapt_offset(raw_stream: &[RawCount], params: AdaptParams, n_taps: usize) -> Result<OffsetEstimate> {
    if raw_stream.is_empty() {
        return Err(Error::invalid("offset adaptation needs a non-empty stream"));
    }
    let mut adapter = OffsetAdapter::new(params, n_taps)?;
    for &r in raw_stream {
        adapter.push(r);
    }
    adapter.estimate()
}

/// One point of a time-difference sweep.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferPoint {
    pub delta_t: Duration,
    pub raw: RawCount,
    pub code: i32,
}

/// Converts each input time difference `t_inp - t_inn` through the folder and chain.
pub fn transfer_sweep(
    chain: &InverterChain,
    d_offset: Duration,
    offset_code: u32,
    deltas: &[Duration],
) -> Result<Vec<TransferPoint>> {
    let t_inn = Instant::from_ps(1000.0);
    deltas
        .iter()
        .map(|&dt| {
            let pulse = fold(t_inn + dt, t_inn, d_offset)?;
            let out = stdc_convert(&pulse, chain, offset_code, 0);
            Ok(TransferPoint {
                delta_t: dt,
                raw: out.raw,
                code: out.code,
            })
        })
        .collect()
}

pub fn write_transfer_csv<W: Write>(mut w: W, points: &[TransferPoint]) -> io::Result<()> {
    writeln!(w, "delta_t_seconds,raw_count,signed_code")?;
    for p in points {
        writeln!(w, "{:e},{},{}", p.delta_t.secs(), p.raw.0, p.code)?;
    }
    Ok(())
}
