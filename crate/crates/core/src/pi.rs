//! Synthesizable phase interpolator.
//!
//! A 32-tap delay chain produces delayed copies of the input clock. Arbiters
//! find the tap `N` whose accumulated delay first reaches one clock period;
//! the mixer at that tap averages its edge with the next input-clock edge and
//! the mixers beyond it alias their nodes into the next cycle. Odd and even
//! taps feed separate mux trees; the encoder walks adjacent (odd, even) pairs
//! in a leapfrog order and a 16-step blender interpolates between the pair.
//!
//! Routing through the mux trees adds a per-wire skew. When the skew between
//! the two blender inputs exceeds the unit delay the phase rotation stops
//! being monotonic; an arbiter on the blender inputs detects this and the
//! offending path's buffer strength is trimmed.
//!
//! Wire indices are 1-based as in `phi_1 .. phi_32`. During a rotation the
//! encoder may select wire `N + 1`, which is wire 1 one clock period later.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mismatch::{derive_seed, Distribution, MismatchModel};
use crate::time::{ClockSpec, Duration, Instant};

pub const PI_TAPS: usize = 32;
pub const PI_CODES: usize = 256;
pub const BLEND_STEPS: u32 = 16;

/// Arbiter decision resolution: accumulated delays within this of the period
/// count as reaching it.
pub const ARBITER_RESOLUTION: Duration = Duration(1e-18);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiConfig {
    pub n_taps: usize,
    /// Nominal unit delay `T_D`.
    pub unit_delay: Duration,
    #[serde(default)]
    pub tap_sigma_rel: f64,
    /// Per-stage routing mismatch in the mux trees, relative to `T_D`.
    #[serde(default)]
    pub path_sigma_rel: f64,
    /// 2:1 mux stages between a tap and the blender input.
    pub mux_levels: u32,
    #[serde(default)]
    pub distribution: Distribution,
    #[serde(default)]
    pub seed: u64,
    /// Trim step as a fraction of `T_D`.
    pub trim_step_frac: f64,
    pub max_trim_iters: usize,
}

impl Default for PiConfig {
    fn default() -> Self {
        PiConfig {
            n_taps: PI_TAPS,
            unit_delay: Duration::from_ps(12.5),
            tap_sigma_rel: 0.0,
            path_sigma_rel: 0.0,
            mux_levels: 4,
            distribution: Distribution::Gaussian,
            seed: 0,
            trim_step_frac: 0.125,
            max_trim_iters: 64,
        }
    }
}

impl PiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_taps < 2 || self.n_taps % 2 != 0 {
            return Err(Error::invalid("PI chain needs an even number of taps >= 2"));
        }
        if !(self.unit_delay.secs() > 0.0) {
            return Err(Error::invalid("PI unit delay must be positive"));
        }
        if !(self.trim_step_frac > 0.0 && self.trim_step_frac < 1.0) {
            return Err(Error::invalid("trim step must be a fraction of T_D in (0, 1)"));
        }
        for s in [self.tap_sigma_rel, self.path_sigma_rel] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::invalid("PI sigma_rel must be >= 0"));
            }
        }
        Ok(())
    }

    /// Samples the delay chain and mux-tree skews of PI number `instance`.
    pub fn chain(&self, instance: usize) -> DelayChain {
        let td = self.unit_delay.secs();
        let taps = MismatchModel::new(
            td,
            self.tap_sigma_rel,
            self.distribution,
            derive_seed(self.seed, "pi.taps", instance as u64),
        );
        let stages = MismatchModel::new(
            td,
            self.path_sigma_rel,
            self.distribution,
            derive_seed(self.seed, "pi.paths", instance as u64),
        );
        let tap_delays = (0..self.n_taps as u64)
            .map(|i| Duration(taps.sample_positive(i)))
            .collect();
        let path_skews = (1..=self.n_taps)
            .map(|wire| {
                let tree = (wire % 2) as u64;
                let leaf = ((wire - 1) / 2) as u64;
                // Leaf routing plus one term per mux stage; wires that share a
                // mux share its term.
                let skew: f64 = (0..=u64::from(self.mux_levels))
                    .map(|level| {
                        let node = leaf >> level;
                        stages.deviation((tree << 32) | (level << 16) | node)
                    })
                    .sum();
                Duration(skew)
            })
            .collect();
        DelayChain {
            unit_delay_nominal: self.unit_delay,
            tap_delays,
            path_skews,
        }
    }

    pub fn trim_step(&self) -> Duration {
        self.unit_delay * self.trim_step_frac
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayChain {
    pub unit_delay_nominal: Duration,
    pub tap_delays: Vec<Duration>,
    /// Signed routing skew from each tap to its mux-tree output.
    pub path_skews: Vec<Duration>,
}

impl DelayChain {
    /// A mismatch-free chain of `n_taps` delays of `td`.
    pub fn ideal(n_taps: usize, td: Duration) -> Self {
        DelayChain {
            unit_delay_nominal: td,
            tap_delays: vec![td; n_taps],
            path_skews: vec![Duration::ZERO; n_taps],
        }
    }

    pub fn n_taps(&self) -> usize {
        self.tap_delays.len()
    }

    pub fn total_delay(&self) -> Duration {
        self.tap_delays.iter().copied().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap_delays.len() != self.path_skews.len() {
            return Err(Error::invalid("tap delay and path skew lists differ in length"));
        }
        if self.tap_delays.iter().any(|d| !(d.secs() > 0.0)) {
            return Err(Error::invalid("PI tap delays must be positive"));
        }
        Ok(())
    }
}

/// Per-path trim applied at the mux inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimState {
    pub trims: Vec<Duration>,
}

impl TrimState {
    pub fn zero(n: usize) -> Self {
        TrimState {
            trims: vec![Duration::ZERO; n],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.trims.iter().all(|t| t.secs() == 0.0)
    }
}

/// Result of the arbiters: how many unit delays fit in one clock period.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodQuantization {
    pub n_delays: usize,
    /// 1-based tap at the clock boundary (equal to `n_delays`).
    pub boundary_tap: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    OddToEven,
    EvenToOdd,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiSelect {
    /// Physical rotation segment (`0..N`).
    pub segment: usize,
    pub sel_odd: usize,
    pub sel_even: usize,
    /// Blender weight on the later input, `0..16`.
    pub blend_k: u32,
    pub direction: Direction,
}

impl PiSelect {
    /// `(from, to)` wires of the segment.
    pub fn wires(&self) -> (usize, usize) {
        match self.direction {
            Direction::OddToEven => (self.sel_odd, self.sel_even),
            Direction::EvenToOdd => (self.sel_even, self.sel_odd),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutputs {
    /// Tap arrival times before routing.
    pub taps: Vec<Instant>,
    /// Tap arrival times at the mux inputs (skew and trim applied).
    pub mux_inputs: Vec<Instant>,
}

pub fn propagate_chain(chain: &DelayChain, trim: &TrimState, clock_edge: Instant) -> ChainOutputs {
    let mut t = clock_edge;
    let taps: Vec<Instant> = chain
        .tap_delays
        .iter()
        .map(|&d| {
            t += d;
            t
        })
        .collect();
    let mux_inputs = taps
        .iter()
        .enumerate()
        .map(|(i, &tap)| tap + chain.path_skews[i] + trim.trims.get(i).copied().unwrap_or_default())
        .collect();
    ChainOutputs { taps, mux_inputs }
}

pub fn arbitrate_period(chain: &DelayChain, period: Duration) -> Result<PeriodQuantization> {
    let mut acc = Duration::ZERO;
    for (i, &d) in chain.tap_delays.iter().enumerate() {
        acc += d;
        if acc >= period - ARBITER_RESOLUTION {
            return Ok(PeriodQuantization {
                n_delays: i + 1,
                boundary_tap: i + 1,
            });
        }
    }
    Err(Error::ChainUnderspan {
        total_s: acc.secs(),
        period_s: period.secs(),
    })
}

/// Node times after the phase mixers: taps before the boundary pass through,
/// the boundary tap is averaged with the next clock edge, and taps beyond it
/// carry their node one period later.
pub fn apply_boundary_mixers(
    taps: &[Instant],
    clock_edge_next: Instant,
    q: PeriodQuantization,
    period: Duration,
) -> Vec<Instant> {
    let n = q.boundary_tap;
    let mut out = Vec::with_capacity(taps.len());
    for (i, &t) in taps.iter().enumerate() {
        let wire = i + 1;
        let v = if wire < n {
            t
        } else if wire == n {
            Instant(0.5 * (t.secs() + clock_edge_next.secs()))
        } else {
            out[wire - n - 1] + period
        };
        out.push(v);
    }
    out
}

/// Maps a code onto a rotation segment and blender weight.
///
/// The 256 codes are spread proportionally over the `N` physical segments;
/// with `N = 16` each segment holds exactly 16 codes. Segment `s` runs from
/// wire `s + 1` to wire `s + 2`, so consecutive segments share a wire and
/// alternately advance the odd and the even select.
pub fn encode(code: u8, q: PeriodQuantization) -> PiSelect {
    let pos = usize::from(code) * q.n_delays;
    let segment = pos / PI_CODES;
    let blend_k = ((pos % PI_CODES) / (PI_CODES / BLEND_STEPS as usize)) as u32;
    let from = segment + 1;
    let to = segment + 2;
    if from % 2 == 1 {
        PiSelect {
            segment,
            sel_odd: from,
            sel_even: to,
            blend_k,
            direction: Direction::OddToEven,
        }
    } else {
        PiSelect {
            segment,
            sel_odd: to,
            sel_even: from,
            blend_k,
            direction: Direction::EvenToOdd,
        }
    }
}

pub fn blend(t_a: Instant, t_b: Instant, k: u32) -> Instant {
    if k == 0 {
        return t_a;
    }
    t_a + (t_b - t_a) * (f64::from(k) / f64::from(BLEND_STEPS))
}

/// True when the arbiter sees the blender inputs in the wrong order. A tie
/// counts as an inversion because it makes the rotation stall.
pub fn detect_blender_inversion(t_odd: Instant, t_even: Instant, expected: Direction) -> bool {
    match expected {
        Direction::OddToEven => t_odd >= t_even,
        Direction::EvenToOdd => t_even >= t_odd,
    }
}

/// One PI instance: chain, trims and the arbiters' period decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseInterpolator {
    pub chain: DelayChain,
    pub trim: TrimState,
    pub quant: PeriodQuantization,
    pub period: Duration,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub code: u8,
    /// Output edge relative to the input clock edge.
    pub phase: Duration,
    /// Phase of the next code minus this one (code 255 wraps to code 0 of the next cycle).
    pub step: Duration,
    /// The blender arbiter fires on this code's segment.
    pub inversion: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimReport {
    pub trim: TrimState,
    pub iterations: usize,
    /// Segments inverted before trimming.
    pub initial_inversions: Vec<usize>,
}

impl PhaseInterpolator {
    pub fn new(chain: DelayChain, period: Duration) -> Result<Self> {
        chain.validate()?;
        if !(period.secs() > 0.0) {
            return Err(Error::invalid("PI clock period must be positive"));
        }
        let quant = arbitrate_period(&chain, period)?;
        if quant.n_delays >= chain.n_taps() {
            return Err(Error::ChainUnderspan {
                total_s: chain.total_delay().secs(),
                period_s: period.secs(),
            });
        }
        let n = chain.n_taps();
        Ok(PhaseInterpolator {
            chain,
            trim: TrimState::zero(n),
            quant,
            period,
        })
    }

    pub fn with_trim(mut self, trim: TrimState) -> Self {
        self.trim = trim;
        self
    }

    pub fn unit_delay(&self) -> Duration {
        self.chain.unit_delay_nominal
    }

    /// Times at the blender inputs of wires `1..=N+1` for the cycle launched
    /// at `edge` (`next` is the following input-clock edge).
    pub fn wire_times(&self, edge: Instant, next: Instant) -> Vec<Instant> {
        let n = self.quant.n_delays;
        let taps = propagate_chain(&self.chain, &TrimState::zero(0), edge).taps;
        let mixed = apply_boundary_mixers(&taps, next, self.quant, self.period);
        (1..=n + 1)
            .map(|wire| {
                let phys = (wire - 1) % n;
                let node = if wire <= mixed.len() {
                    mixed[wire - 1]
                } else {
                    mixed[wire - 1 - n] + self.period
                };
                node + self.chain.path_skews[phys] + self.trim.trims[phys]
            })
            .collect()
    }

    fn output_from_wires(&self, wires: &[Instant], code: u8) -> Instant {
        let sel = encode(code, self.quant);
        let (a, b) = sel.wires();
        blend(wires[a - 1], wires[b - 1], sel.blend_k)
    }

    /// Output edge for `code` in the cycle launched at `edge`.
    pub fn output_at(&self, code: u8, edge: Instant, next: Instant) -> Instant {
        self.output_from_wires(&self.wire_times(edge, next), code)
    }

    /// Output edge for `code` in cycle `cycle` of `clock`.
    pub fn output(&self, code: u8, clock: &ClockSpec, cycle: i64) -> Instant {
        self.output_at(code, clock.edge(cycle), clock.edge(cycle + 1))
    }

    /// Jitter-free output phase of `code` relative to its clock edge.
    pub fn phase(&self, code: u8) -> Duration {
        let edge = Instant::ZERO;
        self.output_at(code, edge, edge + self.period) - edge
    }

    /// Segments whose blender inputs are inverted.
    pub fn inversions(&self) -> Vec<usize> {
        let wires = self.wire_times(Instant::ZERO, Instant::ZERO + self.period);
        (0..self.quant.n_delays)
            .filter(|&s| {
                let sel = segment_select(s);
                detect_blender_inversion(wires[sel.sel_odd - 1], wires[sel.sel_even - 1], sel.direction)
            })
            .collect()
    }

    /// Full 256-code sweep over one jitter-free cycle.
    pub fn sweep(&self) -> Vec<SweepPoint> {
        let wires = self.wire_times(Instant::ZERO, Instant::ZERO + self.period);
        let inverted = self.inversions();
        let phases: Vec<Duration> = (0..PI_CODES)
            .map(|c| self.output_from_wires(&wires, c as u8) - Instant::ZERO)
            .collect();
        (0..PI_CODES)
            .map(|c| {
                let next = if c + 1 < PI_CODES {
                    phases[c + 1]
                } else {
                    phases[0] + self.period
                };
                let seg = encode(c as u8, self.quant).segment;
                SweepPoint {
                    code: c as u8,
                    phase: phases[c],
                    step: next - phases[c],
                    inversion: inverted.contains(&seg),
                }
            })
            .collect()
    }

    /// Trims mux-path delays until no blender arbiter fires.
    ///
    /// Each iteration moves the earlier-expected path of every inverted
    /// segment one step earlier. If that path is already at the trim limit,
    /// the later-expected path is moved one step later instead.
    pub fn trim_paths(&mut self, step: Duration, max_iters: usize) -> Result<TrimReport> {
        let limit = self.unit_delay();
        let n = self.quant.n_delays;
        let initial_inversions = self.inversions();
        let mut remaining = initial_inversions.clone();
        for iteration in 1..=max_iters.max(1) {
            if remaining.is_empty() {
                return Ok(TrimReport {
                    trim: self.trim.clone(),
                    iterations: iteration,
                    initial_inversions,
                });
            }
            let mut touched = vec![false; self.trim.trims.len()];
            for &s in &remaining {
                let (from, to) = segment_select(s).wires();
                let early = (from - 1) % n;
                let late = (to - 1) % n;
                if touched[early] || touched[late] {
                    continue;
                }
                if (self.trim.trims[early] - step).abs() < limit {
                    self.trim.trims[early] -= step;
                    touched[early] = true;
                } else if (self.trim.trims[late] + step).abs() < limit {
                    self.trim.trims[late] += step;
                    touched[late] = true;
                }
            }
            remaining = self.inversions();
        }
        if remaining.is_empty() {
            return Ok(TrimReport {
                trim: self.trim.clone(),
                iterations: max_iters.max(1),
                initial_inversions,
            });
        }
        Err(Error::UnconvergentTrim {
            iterations: max_iters.max(1),
            remaining: remaining.len(),
        })
    }

    pub fn is_monotone(&self) -> bool {
        self.sweep().iter().all(|p| p.step.secs() > 0.0)
    }
}

/// Select pattern of physical segment `s` (independent of `N`).
fn segment_select(s: usize) -> PiSelect {
    let (from, to) = (s + 1, s + 2);
    if from % 2 == 1 {
        PiSelect {
            segment: s,
            sel_odd: from,
            sel_even: to,
            blend_k: 0,
            direction: Direction::OddToEven,
        }
    } else {
        PiSelect {
            segment: s,
            sel_odd: to,
            sel_even: from,
            blend_k: 0,
            direction: Direction::EvenToOdd,
        }
    }
}

/// Output edge of one code: propagate, arbitrate, mix, encode, blend.
pub fn pi_output(code: u8, chain: &DelayChain, clock: &ClockSpec, trim: &TrimState, cycle: i64) -> Result<Instant> {
    let pi = PhaseInterpolator::new(chain.clone(), clock.period)?.with_trim(trim.clone());
    Ok(pi.output(code, clock, cycle))
}

/// Builds a PI and runs [`PhaseInterpolator::trim_paths`] on it.
pub fn trim_paths(chain: &DelayChain, clock: &ClockSpec, step: Duration, max_iters: usize) -> Result<TrimReport> {
    let mut pi = PhaseInterpolator::new(chain.clone(), clock.period)?;
    pi.trim_paths(step, max_iters)
}

pub fn write_sweep_csv<W: Write>(mut w: W, points: &[SweepPoint]) -> io::Result<()> {
    writeln!(w, "code,phase_seconds,step_seconds,inversion_flag")?;
    for p in points {
        writeln!(
            w,
            "{},{:e},{:e},{}",
            p.code,
            p.phase.secs(),
            p.step.secs(),
            u8::from(p.inversion)
        )?;
    }
    Ok(())
}
