//! Run configuration: a strict TOML schema covering every experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use synadc::metrics::{check_coherence, UncorrelatedSampler};
use synadc::mismatch::derive_seed;
use synadc::pi::PiConfig;
use synadc::stdc::{AdaptParams, StdcConfig};
use synadc::stimulus::Stimulus;
use synadc::system::{Calibration, InterleaverConfig};
use synadc::time::{ClockSpec, Duration, Instant};
use synadc::v2t::{PhaseOffsets, V2tConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every component seed is derived from this value.
    pub master_seed: u64,
    pub adc: AdcSection,
    pub pi: PiConfig,
    pub system: SystemSection,
    pub stimulus: Stimulus,
    pub capture: CaptureSection,
    #[serde(default)]
    pub slice_transfer: Option<TransferSection>,
    #[serde(default)]
    pub pi_monitor: Option<MonitorSection>,
    #[serde(default)]
    pub montecarlo: Option<MonteCarloSection>,
    #[serde(default)]
    pub fom: Option<FomSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdcSection {
    pub v2t: V2tConfig,
    pub stdc: StdcConfig,
    pub adapt: AdaptParams,
    pub phases: PhaseOffsets,
    pub common_mode: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// Each capture adapts its own offset codes.
    Adapt,
    /// The ideal-chain offset code on every slice.
    Nominal,
    /// Offset codes adapted once on the calibration capture.
    Calibrated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSwitches {
    pub offsets: OffsetMode,
    pub lut: bool,
    pub skew: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n_groups: usize,
    pub slices_per_group: usize,
    pub aggregate_rate: f64,
    pub input_clock_jitter: Duration,
    pub skew_injection: Vec<Duration>,
    pub trim_pi: bool,
    #[serde(default)]
    pub track_filter_hz: Option<f64>,
    pub latency: Vec<usize>,
    pub calibration: CalibrationSwitches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureSection {
    /// Aggregate samples of the measurement capture.
    pub n_samples: usize,
    /// Aggregate samples of the LUT/offset calibration capture.
    pub calibration_samples: usize,
    /// Calibration sine frequency; coherent with `calibration_samples`.
    pub calibration_tone_hz: f64,
    /// Calibration sine amplitude in LSB; slightly over full scale.
    pub calibration_amplitude_lsb: f64,
    pub skew_samples: usize,
    pub skew_tone_hz: f64,
    pub skew_amplitude_lsb: f64,
    pub skew_max_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub slice: usize,
    pub delta_min: Duration,
    pub delta_max: Duration,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSection {
    pub samples_per_code: usize,
    pub ratio_num: u64,
    pub ratio_den: u64,
    pub jitter_sigma: Duration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub trials: usize,
    /// Trial `i` runs with master seed `first_seed + i`.
    pub first_seed: u64,
    /// Aggregate samples of each trial's linearity histogram.
    pub histogram_samples: usize,
    pub histogram_tone_hz: f64,
    pub histogram_amplitude_lsb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FomSection {
    pub power_w: f64,
    pub rate: f64,
    /// Taken from an adc-sine run of this config when absent.
    #[serde(default)]
    pub enob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// SHA-256 of the config's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serializes to JSON");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Interleaver configuration with component seeds derived from `seed`.
    pub fn interleaver_with_seed(&self, seed: u64) -> InterleaverConfig {
        let s = &self.system;
        let mut v2t = self.adc.v2t.clone();
        v2t.seed = derive_seed(seed, "v2t", 0);
        let mut stdc = self.adc.stdc.clone();
        stdc.seed = derive_seed(seed, "stdc", 0);
        let mut pi = self.pi.clone();
        pi.seed = derive_seed(seed, "pi", 0);
        let period = Duration(s.n_groups as f64 / s.aggregate_rate);
        InterleaverConfig {
            n_groups: s.n_groups,
            slices_per_group: s.slices_per_group,
            aggregate_rate: s.aggregate_rate,
            input_clock: ClockSpec::new(period, Instant::ZERO)
                .with_jitter(s.input_clock_jitter, derive_seed(seed, "input_clock", 0)),
            pi,
            trim_pi: s.trim_pi,
            v2t,
            stdc,
            phases: self.adc.phases,
            common_mode: self.adc.common_mode,
            skew_injection: s.skew_injection.clone(),
            track_filter_hz: s.track_filter_hz,
            latency: s.latency.clone(),
            adapt: self.adc.adapt,
        }
    }

    pub fn interleaver(&self) -> InterleaverConfig {
        self.interleaver_with_seed(self.master_seed)
    }

    /// PI configuration with its seed derived from the master seed.
    pub fn pi_config(&self) -> PiConfig {
        self.interleaver().pi
    }

    pub fn sampler(&self) -> UncorrelatedSampler {
        let mut s = UncorrelatedSampler {
            seed: derive_seed(self.master_seed, "sampler", 0),
            ..UncorrelatedSampler::default()
        };
        if let Some(m) = &self.pi_monitor {
            s.ratio_num = m.ratio_num;
            s.ratio_den = m.ratio_den;
            s.jitter_sigma = m.jitter_sigma;
        }
        s
    }

    pub fn lsb_volts(&self) -> f64 {
        self.adc.v2t.discharge_slope * self.adc.stdc.tap_delay.secs()
    }

    pub fn calibration_tone(&self) -> Stimulus {
        Stimulus::sine(
            self.capture.calibration_amplitude_lsb * self.lsb_volts(),
            self.capture.calibration_tone_hz,
        )
    }

    pub fn skew_tone(&self) -> Stimulus {
        Stimulus::sine(self.capture.skew_amplitude_lsb * self.lsb_volts(), self.capture.skew_tone_hz)
    }

    /// Offsets to use before any calibration capture has run.
    pub fn base_calibration(&self) -> Calibration {
        match self.system.calibration.offsets {
            OffsetMode::Nominal => Calibration::nominal_offsets(&self.interleaver()),
            _ => Calibration::default(),
        }
    }

    /// Cross-field checks. Non-coherent tones are reported as such so the
    /// caller can tell them apart from schema errors.
    pub fn validate(&self) -> Result<(), CliError> {
        self.interleaver().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.stimulus.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let fs = self.system.aggregate_rate;
        let c = &self.capture;
        if let Stimulus::Sine { frequency, .. } = self.stimulus {
            check_coherence(c.n_samples, fs, frequency)?;
        } else if c.n_samples == 0 || c.n_samples % 16 != 0 {
            return Err(CliError::Config("capture.n_samples must be a positive multiple of 16".into()));
        }
        let cal = &self.system.calibration;
        if cal.lut || cal.offsets == OffsetMode::Calibrated {
            check_coherence(c.calibration_samples, fs, c.calibration_tone_hz)?;
        }
        if cal.skew {
            check_coherence(c.skew_samples, fs, c.skew_tone_hz)?;
            if c.skew_max_iters == 0 {
                return Err(CliError::Config("capture.skew_max_iters must be >= 1".into()));
            }
        }
        if let Some(t) = &self.slice_transfer {
            if t.points < 2 || !(t.delta_max > t.delta_min) || t.slice >= 16 {
                return Err(CliError::Config("slice_transfer needs points >= 2, delta_max > delta_min, slice < 16".into()));
            }
        }
        if let Some(m) = &self.montecarlo {
            if m.trials == 0 {
                return Err(CliError::Config("montecarlo.trials must be >= 1".into()));
            }
            check_coherence(m.histogram_samples, fs, m.histogram_tone_hz)?;
        }
        if let Some(f) = &self.fom {
            if !(f.power_w > 0.0 && f.rate > 0.0) {
                return Err(CliError::Config("fom power_w and rate must be positive".into()));
            }
        }
        Ok(())
    }
}

pub fn output_dir(cfg: &RunConfig, over: Option<&Path>) -> std::path::PathBuf {
    over.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.clone().into())
}
