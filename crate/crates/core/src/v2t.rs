//! Voltage-to-time front end: sampling phases, V2T pair and phase folder.
//!
//! Each V2T holds its sampled voltage on a capacitor and discharges it at a
//! constant rate from `phi2`. A buffer with a threshold below `VDD/2` fires
//! when the capacitor voltage crosses it, so the edge time is affine in the
//! sampled voltage. The pair's two edges encode the differential input as a
//! time difference, which the folder turns into a sign bit and an unsigned
//! pulse padded by `d_offset`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mismatch::{Distribution, MismatchModel};
use crate::time::{Duration, Instant};

/// Offsets of the four clock-generator phases within one conversion cycle.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOffsets {
    /// How far `phi1e` leads `phi1`.
    pub early: Duration,
    /// Track time from cycle start to the sampling edge `phi1`.
    pub track: Duration,
    /// How far `phi2l` trails `phi2`.
    pub late: Duration,
}

impl Default for PhaseOffsets {
    fn default() -> Self {
        PhaseOffsets {
            early: Duration::from_ps(5.0),
            track: Duration::from_ps(50.0),
            late: Duration::from_ps(5.0),
        }
    }
}

impl PhaseOffsets {
    pub fn validate(&self) -> Result<()> {
        if !(self.early.secs() > 0.0) {
            return Err(Error::invalid("phi1e must strictly precede phi1 (early > 0)"));
        }
        if !(self.late.secs() > 0.0) {
            return Err(Error::invalid("phi2l must strictly follow phi2 (late > 0)"));
        }
        if !(self.track.secs() >= 0.0) {
            return Err(Error::invalid("track time must be >= 0"));
        }
        Ok(())
    }
}

/// The four clock-generator phases of one conversion.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSet {
    /// Early phase for bottom-plate sampling.
    pub phi1e: Instant,
    /// Sampling edge.
    pub phi1: Instant,
    /// Discharge start.
    pub phi2: Instant,
    /// Late phase for settling.
    pub phi2l: Instant,
}

impl PhaseSet {
    pub fn is_ordered(&self) -> bool {
        self.phi1e < self.phi1 && self.phi1 <= self.phi2 && self.phi2 < self.phi2l
    }

    pub fn shifted(&self, by: Duration) -> PhaseSet {
        PhaseSet {
            phi1e: self.phi1e + by,
            phi1: self.phi1 + by,
            phi2: self.phi2 + by,
            phi2l: self.phi2l + by,
        }
    }
}

pub fn gen_sampling_phases(cycle_start: Instant, offsets: &PhaseOffsets) -> Result<PhaseSet> {
    offsets.validate()?;
    let phi1 = cycle_start + offsets.track;
    let phi2 = phi1;
    let set = PhaseSet {
        phi1e: phi1 - offsets.early,
        phi1,
        phi2,
        phi2l: phi2 + offsets.late,
    };
    debug_assert!(set.is_ordered());
    Ok(set)
}

/// Static description of the V2T converters of every slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct V2tConfig {
    pub vdd: f64,
    pub v_threshold: f64,
    /// Discharge rate in V/s.
    pub discharge_slope: f64,
    /// Sampling capacitance; informational, the slope is what the model uses.
    pub c_sample: f64,
    /// Discharge start used by the standalone edge-time helpers.
    #[serde(default)]
    pub t_phi2: Instant,
    #[serde(default)]
    pub slope_sigma_rel: f64,
    #[serde(default)]
    pub threshold_sigma_rel: f64,
    #[serde(default)]
    pub distribution: Distribution,
    #[serde(default)]
    pub seed: u64,
}

impl Default for V2tConfig {
    fn default() -> Self {
        V2tConfig {
            vdd: 0.9,
            v_threshold: 0.3,
            discharge_slope: 0.45e9,
            c_sample: 20e-15,
            t_phi2: Instant::ZERO,
            slope_sigma_rel: 0.0,
            threshold_sigma_rel: 0.0,
            distribution: Distribution::Gaussian,
            seed: 0,
        }
    }
}

impl V2tConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.vdd > 0.0) {
            return Err(Error::invalid("vdd must be positive"));
        }
        if !(self.v_threshold > 0.0 && self.v_threshold < self.vdd / 2.0) {
            return Err(Error::invalid(format!(
                "v_threshold must lie in (0, vdd/2), got {} V with vdd {} V",
                self.v_threshold, self.vdd
            )));
        }
        if !(self.discharge_slope > 0.0) {
            return Err(Error::invalid("discharge_slope must be positive"));
        }
        self.slope_model().validate()?;
        self.threshold_model().validate()?;
        Ok(())
    }

    pub fn slope_model(&self) -> MismatchModel {
        MismatchModel::new(
            self.discharge_slope,
            self.slope_sigma_rel,
            self.distribution,
            crate::mismatch::derive_seed(self.seed, "v2t.slope", 0),
        )
    }

    pub fn threshold_model(&self) -> MismatchModel {
        MismatchModel::new(
            self.v_threshold,
            self.threshold_sigma_rel,
            self.distribution,
            crate::mismatch::derive_seed(self.seed, "v2t.threshold", 0),
        )
    }

    /// Parameters of V2T number `instance` (slice `s` uses `2s` and `2s + 1`).
    pub fn instance(&self, instance: usize) -> V2tInstance {
        V2tInstance {
            slope: self.slope_model().sample_positive(instance as u64),
            threshold: self.threshold_model().sample_positive(instance as u64),
            vdd: self.vdd,
        }
    }

    /// The positive and negative V2T of slice `slice`.
    pub fn pair(&self, slice: usize) -> V2tPair {
        V2tPair {
            p: self.instance(2 * slice),
            n: self.instance(2 * slice + 1),
        }
    }
}

/// One V2T with its mismatch applied.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct V2tInstance {
    pub slope: f64,
    pub threshold: f64,
    pub vdd: f64,
}

impl V2tInstance {
    pub fn edge_time(&self, v_sampled: f64, t_phi2: Instant) -> Result<Instant> {
        if v_sampled < self.threshold {
            return Err(Error::Underrange {
                volts: v_sampled,
                threshold: self.threshold,
            });
        }
        if v_sampled > self.vdd {
            return Err(Error::Overrange {
                volts: v_sampled,
                vdd: self.vdd,
            });
        }
        Ok(t_phi2 + Duration((v_sampled - self.threshold) / self.slope))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct V2tPair {
    pub p: V2tInstance,
    pub n: V2tInstance,
}

impl V2tPair {
    /// `(t_inp, t_inn)` for differential inputs sampled into this pair.
    pub fn convert(&self, v_p: f64, v_n: f64, t_phi2: Instant) -> Result<(Instant, Instant)> {
        Ok((self.p.edge_time(v_p, t_phi2)?, self.n.edge_time(v_n, t_phi2)?))
    }
}

pub fn v2t_edge_time(v_sampled: f64, cfg: &V2tConfig, instance: usize) -> Result<Instant> {
    cfg.instance(instance).edge_time(v_sampled, cfg.t_phi2)
}

/// Edges of slice 0's pair at the configured discharge start.
pub fn v2t_pair(v_p: f64, v_n: f64, cfg: &V2tConfig) -> Result<(Instant, Instant)> {
    cfg.pair(0).convert(v_p, v_n, cfg.t_phi2)
}

/// Folded time-domain encoding of one conversion.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSample {
    /// True when the positive side fired first.
    pub sign: bool,
    pub width: Duration,
    /// Rising edge of the folded pulse (the earlier V2T edge).
    pub start: Instant,
}

/// Phase folder. Ties resolve to `sign = false`.
pub fn fold(t_inp: Instant, t_inn: Instant, d_offset: Duration) -> Result<PulseSample> {
    if !(d_offset.secs() > 0.0) {
        return Err(Error::invalid("d_offset must be positive"));
    }
    Ok(PulseSample {
        sign: t_inp < t_inn,
        width: (t_inp - t_inn).abs() + d_offset,
        start: t_inp.min(t_inn),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ideal_cfg() -> V2tConfig {
        V2tConfig {
            discharge_slope: 1e9,
            ..V2tConfig::default()
        }
    }

    #[test]
    fn phases_from_offsets() {
        let p = gen_sampling_phases(Instant::ZERO, &PhaseOffsets::default()).unwrap();
        assert!((p.phi1e.as_ps() - 45.0).abs() < 1e-9);
        assert!((p.phi1.as_ps() - 50.0).abs() < 1e-9);
        assert!((p.phi2.as_ps() - 50.0).abs() < 1e-9);
        assert!((p.phi2l.as_ps() - 55.0).abs() < 1e-9);
        assert!(p.is_ordered());
    }

    #[test]
    fn phases_reject_zero_early() {
        let off = PhaseOffsets {
            early: Duration::ZERO,
            ..PhaseOffsets::default()
        };
        assert!(gen_sampling_phases(Instant::ZERO, &off).is_err());
        let off = PhaseOffsets {
            late: Duration::ZERO,
            ..PhaseOffsets::default()
        };
        assert!(gen_sampling_phases(Instant::ZERO, &off).is_err());
    }

    #[test]
    fn phases_translate_with_cycle() {
        let off = PhaseOffsets::default();
        let a = gen_sampling_phases(Instant::from_ps(0.0), &off).unwrap();
        let b = gen_sampling_phases(Instant::from_ps(800.0), &off).unwrap();
        for (x, y) in [
            (a.phi1e, b.phi1e),
            (a.phi1, b.phi1),
            (a.phi2, b.phi2),
            (a.phi2l, b.phi2l),
        ] {
            assert!(((y - x).as_ps() - 800.0).abs() < 1e-9);
        }
    }

    #[test]
    fn edge_at_threshold_is_phi2() {
        let cfg = ideal_cfg();
        assert_eq!(v2t_edge_time(0.3, &cfg, 0).unwrap(), cfg.t_phi2);
    }

    #[test]
    fn edge_closed_form() {
        let cfg = ideal_cfg();
        let t = v2t_edge_time(0.75, &cfg, 0).unwrap();
        assert!((t.as_ps() - 450.0).abs() < 1e-9);
    }

    #[test]
    fn underrange_and_overrange_are_errors() {
        let cfg = ideal_cfg();
        assert!(matches!(
            v2t_edge_time(0.29, &cfg, 0),
            Err(Error::Underrange { .. })
        ));
        assert!(matches!(
            v2t_edge_time(0.95, &cfg, 0),
            Err(Error::Overrange { .. })
        ));
    }

    #[test]
    fn edge_monotone_in_voltage_under_mismatch() {
        let cfg = V2tConfig {
            slope_sigma_rel: 0.05,
            threshold_sigma_rel: 0.02,
            seed: 9,
            ..ideal_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = cfg.instance(3);
        for _ in 0..10_000 {
            let a: f64 = rng.gen_range(0.35..0.9);
            let b: f64 = rng.gen_range(0.35..0.9);
            if a == b {
                continue;
            }
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let tl = inst.edge_time(lo, Instant::ZERO).unwrap();
            let th = inst.edge_time(hi, Instant::ZERO).unwrap();
            assert!(tl < th);
        }
    }

    #[test]
    fn edge_is_affine() {
        let cfg = V2tConfig {
            slope_sigma_rel: 0.05,
            seed: 4,
            ..ideal_cfg()
        };
        let inst = cfg.instance(0);
        let vs: Vec<f64> = (0..50).map(|i| 0.35 + 0.01 * i as f64).collect();
        let ts: Vec<f64> = vs
            .iter()
            .map(|&v| inst.edge_time(v, Instant::ZERO).unwrap().secs())
            .collect();
        let n = vs.len() as f64;
        let mv = vs.iter().sum::<f64>() / n;
        let mt = ts.iter().sum::<f64>() / n;
        let sxy: f64 = vs.iter().zip(&ts).map(|(v, t)| (v - mv) * (t - mt)).sum();
        let sxx: f64 = vs.iter().map(|v| (v - mv).powi(2)).sum();
        let slope = sxy / sxx;
        let icpt = mt - slope * mv;
        for (v, t) in vs.iter().zip(&ts) {
            let fit = icpt + slope * v;
            assert!(((fit - t) / t.abs().max(1e-12)).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_symmetry_and_scale() {
        let cfg = ideal_cfg();
        let (a, b) = v2t_pair(0.6, 0.6, &cfg).unwrap();
        assert_eq!(a, b);
        let (a, b) = v2t_pair(0.7125, 0.4875, &cfg).unwrap();
        assert!(((a - b).as_ps() - 225.0).abs() < 1e-9);
        let (c, d) = v2t_pair(0.4875, 0.7125, &cfg).unwrap();
        assert_eq!((a - b).secs(), -(c - d).secs());
    }

    #[test]
    fn fold_examples() {
        let d = Duration::from_ps(100.0);
        let t = Instant::from_ps(300.0);
        let p = fold(t, t, d).unwrap();
        assert!(!p.sign);
        assert_eq!(p.width, d);
        let p = fold(Instant::from_ps(525.0), Instant::from_ps(300.0), d).unwrap();
        assert!(!p.sign);
        assert!((p.width.as_ps() - 325.0).abs() < 1e-9);
        assert!(fold(t, t, Duration::ZERO).is_err());
    }

    #[test]
    fn fold_is_symmetric() {
        let d = Duration::from_ps(100.0);
        let a = Instant::from_ps(123.0);
        let b = Instant::from_ps(456.5);
        let x = fold(a, b, d).unwrap();
        let y = fold(b, a, d).unwrap();
        assert_eq!(x.width, y.width);
        assert_ne!(x.sign, y.sign);
        assert_eq!(x.start, y.start);
    }

    #[test]
    fn end_to_end_time_encoding() {
        let cfg = ideal_cfg();
        let d = Duration::from_ps(100.0);
        for (vp, vn) in [(0.7, 0.5), (0.45, 0.8), (0.6, 0.61)] {
            let (a, b) = v2t_pair(vp, vn, &cfg).unwrap();
            let p = fold(a, b, d).unwrap();
            let want = (vp - vn as f64).abs() / cfg.discharge_slope;
            let got = (p.width - d).secs();
            assert!(((got - want) / want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn threshold_must_be_below_half_supply() {
        let cfg = V2tConfig {
            v_threshold: 0.46,
            ..V2tConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(V2tConfig::default().validate().is_ok());
    }
}
