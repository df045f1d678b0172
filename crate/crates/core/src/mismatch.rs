//! Seeded randomness and per-instance mismatch sampling.
//!
//! Every random draw in the model comes from a ChaCha8 sub-stream keyed by
//! `(seed, component, instance)`. A component's instances never share a
//! stream, so adding or evaluating instance `j` cannot perturb instance `i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical delays are clamped to this fraction of their nominal value.
pub const DELAY_CLAMP_FLOOR: f64 = 0.05;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed for a named component instance from a master seed.
pub fn derive_seed(master: u64, component: &str, instance: u64) -> u64 {
    splitmix(splitmix(master ^ fnv1a(component.as_bytes())) ^ instance)
}

/// An independent random stream for `(seed, component, instance)`.
pub fn substream(seed: u64, component: &str, instance: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(component.as_bytes())));
    rng.set_stream(instance);
    rng
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    #[default]
    Gaussian,
    /// Uniform with the same standard deviation as the Gaussian.
    Uniform,
}

/// Statistical description of one family of per-instance deviations.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchModel {
    pub nominal: f64,
    pub sigma_rel: f64,
    #[serde(default)]
    pub distribution: Distribution,
    pub seed: u64,
}

impl MismatchModel {
    pub fn new(nominal: f64, sigma_rel: f64, distribution: Distribution, seed: u64) -> Self {
        MismatchModel {
            nominal,
            sigma_rel,
            distribution,
            seed,
        }
    }

    /// A model that always returns `nominal`.
    pub fn ideal(nominal: f64) -> Self {
        Self::new(nominal, 0.0, Distribution::Gaussian, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_rel >= 0.0) || !self.sigma_rel.is_finite() {
            return Err(Error::invalid(format!(
                "sigma_rel must be >= 0, got {}",
                self.sigma_rel
            )));
        }
        if !self.nominal.is_finite() {
            return Err(Error::invalid("mismatch nominal must be finite"));
        }
        Ok(())
    }

    /// Unit-variance draw for `instance`.
    fn unit_draw(&self, instance: u64) -> f64 {
        let mut rng = substream(self.seed, "mismatch", instance);
        match self.distribution {
            Distribution::Gaussian => StandardNormal.sample(&mut rng),
            Distribution::Uniform => {
                let u: f64 = rng.gen_range(-1.0..1.0);
                u * 3f64.sqrt()
            }
        }
    }

    /// Value of `instance`, unclamped.
    pub fn sample(&self, instance: u64) -> f64 {
        if self.sigma_rel == 0.0 {
            return self.nominal;
        }
        self.nominal * (1.0 + self.sigma_rel * self.unit_draw(instance))
    }

    /// Value of `instance` when it parameterizes a physical delay or rate:
    /// never below `DELAY_CLAMP_FLOOR * nominal`.
    pub fn sample_positive(&self, instance: u64) -> f64 {
        self.sample(instance)
            .max(DELAY_CLAMP_FLOOR * self.nominal.abs())
    }

    /// Signed deviation of `instance` from nominal.
    pub fn deviation(&self, instance: u64) -> f64 {
        self.sample(instance) - self.nominal
    }
}

/// `count` unclamped samples for instances `0..count`.
pub fn sample_mismatch(model: &MismatchModel, count: usize) -> Result<Vec<f64>> {
    model.validate()?;
    if count == 0 {
        return Err(Error::invalid("sample_mismatch requires count >= 1"));
    }
    Ok((0..count as u64).map(|i| model.sample(i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const PS: f64 = 1e-12;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    #[test]
    fn zero_sigma_is_exact() {
        let m = MismatchModel::new(10.0 * PS, 0.0, Distribution::Gaussian, 7);
        let s = sample_mismatch(&m, 255).unwrap();
        assert_eq!(s.len(), 255);
        assert!(s.iter().all(|&x| x == 10.0 * PS));
    }

    #[test]
    fn gaussian_moments() {
        let m = MismatchModel::new(10.0 * PS, 0.1, Distribution::Gaussian, 7);
        let s: Vec<f64> = sample_mismatch(&m, 100_000)
            .unwrap()
            .into_iter()
            .map(|x| x / PS)
            .collect();
        let (mean, sd) = moments(&s);
        assert!((mean - 10.0).abs() < 0.02, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
    }

    #[test]
    fn uniform_moments() {
        let m = MismatchModel::new(10.0 * PS, 0.1, Distribution::Uniform, 3);
        let s: Vec<f64> = sample_mismatch(&m, 100_000)
            .unwrap()
            .into_iter()
            .map(|x| x / PS)
            .collect();
        let (mean, sd) = moments(&s);
        assert!((mean - 10.0).abs() < 0.02, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
        assert!(s.iter().all(|x| (x - 10.0).abs() <= 3f64.sqrt() + 1e-9));
    }

    #[test]
    fn deterministic_and_instance_independent() {
        let m = MismatchModel::new(10.0 * PS, 0.1, Distribution::Gaussian, 7);
        let a = sample_mismatch(&m, 255).unwrap();
        let b = sample_mismatch(&m, 255).unwrap();
        assert_eq!(a, b);
        // The first 100 instances do not depend on how many are drawn.
        let c = sample_mismatch(&m, 100).unwrap();
        assert_eq!(&a[..100], &c[..]);
        assert_eq!(m.sample(42), a[42]);
    }

    #[test]
    fn rejects_negative_sigma_and_zero_count() {
        let m = MismatchModel::new(1.0, -0.1, Distribution::Gaussian, 0);
        assert!(sample_mismatch(&m, 4).is_err());
        let ok = MismatchModel::ideal(1.0);
        assert!(sample_mismatch(&ok, 0).is_err());
    }

    #[test]
    fn clamp_floor() {
        let m = MismatchModel::new(1.0, 5.0, Distribution::Gaussian, 1);
        let min = (0..10_000)
            .map(|i| m.sample_positive(i))
            .fold(f64::INFINITY, f64::min);
        assert!(min >= DELAY_CLAMP_FLOOR);
        assert!((min - DELAY_CLAMP_FLOOR).abs() < 1e-15);
    }

    #[test]
    fn derived_seeds_differ_by_component_and_instance() {
        let a = derive_seed(1, "stdc", 0);
        assert_ne!(a, derive_seed(1, "stdc", 1));
        assert_ne!(a, derive_seed(1, "pi", 0));
        assert_ne!(a, derive_seed(2, "stdc", 0));
        assert_eq!(a, derive_seed(1, "stdc", 0));
    }
}
