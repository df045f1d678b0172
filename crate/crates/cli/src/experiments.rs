use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use synadc::metrics::{
    code_density_linearity, measure_pi_transfer_uncorrelated, sndr_enob, step_estimates, walden_fom,
    write_linearity_csv, HistogramStimulus, LinearityReport, PhaseEstimate, SpectrumReport,
};
use synadc::pi::{write_sweep_csv, PhaseInterpolator, SweepPoint};
use synadc::stdc::{transfer_sweep, write_transfer_csv, TransferPoint};
use synadc::system::{
    build_luts, calibrate_skew, run_capture, write_capture_csv, Calibration, CalibrationState, Interleaver,
    LutStimulus, SkewCalibration, LUT_ORIGIN,
};
use synadc::time::{Duration, Instant};
use synadc::v2t::fold;
use synadc::stimulus::Stimulus;

use crate::config::{OffsetMode, RunConfig};
use crate::CliError;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Experiment {
    SliceTransfer,
    AdcSine,
    PiSweep,
    PiTrim,
    MonteCarlo,
    Calibrate,
    Fom,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::SliceTransfer,
        Experiment::AdcSine,
        Experiment::PiSweep,
        Experiment::PiTrim,
        Experiment::MonteCarlo,
        Experiment::Calibrate,
        Experiment::Fom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::SliceTransfer => "slice-transfer",
            Experiment::AdcSine => "adc-sine",
            Experiment::PiSweep => "pi-sweep",
            Experiment::PiTrim => "pi-trim",
            Experiment::MonteCarlo => "montecarlo",
            Experiment::Calibrate => "calibrate",
            Experiment::Fom => "fom",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown experiment {s:?}")))
    }
}

/// One output file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    experiment: &'a str,
    config_hash: &'a str,
    master_seed: u64,
    result: T,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    exp: Experiment,
    hash: String,
    out: Vec<Artifact>,
}

impl<'a> Ctx<'a> {
    fn json<T: Serialize>(&mut self, name: &str, result: T) {
        let env = Envelope {
            experiment: self.exp.name(),
            config_hash: &self.hash,
            master_seed: self.cfg.master_seed,
            result,
        };
        let mut bytes = serde_json::to_vec_pretty(&env).expect("report serializes");
        bytes.push(b'\n');
        self.out.push(Artifact {
            name: name.into(),
            bytes,
        });
    }

    fn csv(&mut self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) {
        let mut bytes = format!(
            "# experiment={} config_hash={} master_seed={}\n",
            self.exp.name(),
            self.hash,
            self.cfg.master_seed
        )
        .into_bytes();
        body(&mut bytes).expect("writing to memory cannot fail");
        self.out.push(Artifact {
            name: name.into(),
            bytes,
        });
    }
}

/// Runs `exp` and returns its artifacts. `calibration` is an optional
/// previously written calibration file (used by `adc-sine` and `fom`).
pub fn run_experiment(
    exp: Experiment,
    cfg: &RunConfig,
    calibration: Option<&CalibrationState>,
) -> Result<Vec<Artifact>, CliError> {
    cfg.validate()?;
    let mut ctx = Ctx {
        cfg,
        exp,
        hash: cfg.hash(),
        out: Vec::new(),
    };
    if let Some(st) = calibration {
        if st.config_hash != ctx.hash {
            return Err(CliError::Precondition(format!(
                "calibration file was produced for config {} but this config hashes to {}",
                st.config_hash, ctx.hash
            )));
        }
    }
    match exp {
        Experiment::SliceTransfer => slice_transfer(&mut ctx)?,
        Experiment::AdcSine => {
            let report = adc_sine(&mut ctx, calibration)?;
            ctx.json("spectrum.json", report);
        }
        Experiment::PiSweep => pi_sweep(&mut ctx)?,
        Experiment::PiTrim => pi_trim(&mut ctx)?,
        Experiment::MonteCarlo => montecarlo(&mut ctx)?,
        Experiment::Calibrate => {
            let il = Interleaver::new(cfg.interleaver())?;
            let (cal, skew) = calibrate_system(cfg, &il)?;
            let st = CalibrationState::new(cfg.master_seed, ctx.hash.clone(), cal);
            let mut bytes = st.to_json().into_bytes();
            bytes.push(b'\n');
            ctx.out.push(Artifact {
                name: "calibration.json".into(),
                bytes,
            });
            ctx.json("calibration_summary.json", CalibrationSummary::new(&st.calibration, skew));
        }
        Experiment::Fom => fom(&mut ctx, calibration)?,
    }
    Ok(ctx.out)
}

#[derive(Serialize)]
struct CalibrationSummary {
    offset_codes: Vec<u32>,
    lut_slices: usize,
    pi_corrections: Vec<i32>,
    skew: Option<SkewCalibration>,
}

impl CalibrationSummary {
    fn new(cal: &Calibration, skew: Option<SkewCalibration>) -> Self {
        CalibrationSummary {
            offset_codes: cal.offset_codes.clone(),
            lut_slices: cal.luts.len(),
            pi_corrections: cal.pi_corrections.clone(),
            skew,
        }
    }
}

/// Offset, LUT and skew calibration as selected by the config switches.
pub fn calibrate_system(cfg: &RunConfig, il: &Interleaver) -> Result<(Calibration, Option<SkewCalibration>), CliError> {
    let sw = &cfg.system.calibration;
    let mut cal = cfg.base_calibration();
    if sw.lut || sw.offsets == OffsetMode::Calibrated {
        let cap = run_capture(il, &cfg.calibration_tone(), cfg.capture.calibration_samples, &cal)?;
        if sw.offsets == OffsetMode::Calibrated {
            cal.offset_codes = cap.offset_codes.clone();
        }
        if sw.lut {
            cal.luts = build_luts(
                &cap,
                LutStimulus::Sine {
                    amplitude_lsb: cfg.capture.calibration_amplitude_lsb,
                },
            )?;
        }
    }
    let mut skew = None;
    if sw.skew {
        let sk = calibrate_skew(
            il,
            &cfg.skew_tone(),
            cfg.capture.skew_samples,
            &cal,
            cfg.capture.skew_max_iters,
        )?;
        cal.pi_corrections = sk.corrections.clone();
        skew = Some(sk);
    }
    Ok((cal, skew))
}

#[derive(Serialize)]
struct TransferSummary {
    slice: usize,
    offset_code: u32,
    points: usize,
    monotone_violations: usize,
    min_code: i32,
    max_code: i32,
}

fn slice_transfer(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let sec = cfg.slice_transfer.clone().ok_or_else(|| {
        CliError::Config("slice-transfer needs a [slice_transfer] section".into())
    })?;
    let il = cfg.interleaver();
    let chain = il.stdc.chain(sec.slice, il.slice_period());
    let t0 = Instant::from_ps(1000.0);
    let offset = chain
        .count_fast(&fold(t0, t0, il.stdc.d_offset)?, 0)
        .0;
    let deltas: Vec<Duration> = (0..sec.points)
        .map(|i| sec.delta_min + (sec.delta_max - sec.delta_min) * (i as f64 / (sec.points - 1) as f64))
        .collect();
    let pts = transfer_sweep(&chain, il.stdc.d_offset, offset, &deltas)?;
    let summary = TransferSummary {
        slice: sec.slice,
        offset_code: offset,
        points: pts.len(),
        monotone_violations: transfer_violations(&pts),
        min_code: pts.iter().map(|p| p.code).min().unwrap_or(0),
        max_code: pts.iter().map(|p| p.code).max().unwrap_or(0),
    };
    ctx.csv("transfer.csv", |w| write_transfer_csv(w, &pts));
    ctx.json("transfer.json", summary);
    Ok(())
}

pub fn transfer_violations(pts: &[TransferPoint]) -> usize {
    pts.windows(2).filter(|w| w[1].code < w[0].code).count()
}

/// Measurement capture of the configured stimulus, with SNDR/ENOB when the
/// stimulus is a sine.
#[derive(Clone, Debug, Serialize)]
pub struct AdcSineReport {
    pub n_samples: usize,
    pub offset_codes: Vec<u32>,
    pub pi_corrections: Vec<i32>,
    pub lut_applied: bool,
    pub spectrum: Option<SpectrumReport>,
    pub mean_code: f64,
}

fn adc_sine(ctx: &mut Ctx, calibration: Option<&CalibrationState>) -> Result<AdcSineReport, CliError> {
    let cfg = ctx.cfg;
    let il = Interleaver::new(cfg.interleaver())?;
    let cal = match calibration {
        Some(st) => st.calibration.clone(),
        None => calibrate_system(cfg, &il)?.0,
    };
    let (report, aligned) = measure_sine(cfg, &il, &cal)?;
    ctx.csv("capture.csv", |w| write_capture_csv(w, &aligned));
    Ok(report)
}

pub fn measure_sine(
    cfg: &RunConfig,
    il: &Interleaver,
    cal: &Calibration,
) -> Result<(AdcSineReport, synadc::system::AlignedStream), CliError> {
    let cap = run_capture(il, &cfg.stimulus, cfg.capture.n_samples, cal)?;
    let aligned = cap.align()?;
    let x = aligned.corrected();
    let spectrum = match cfg.stimulus {
        Stimulus::Sine { frequency, .. } => Some(sndr_enob(&x, cfg.system.aggregate_rate, frequency)?),
        _ => None,
    };
    let report = AdcSineReport {
        n_samples: x.len(),
        offset_codes: cap.offset_codes.clone(),
        pi_corrections: cal.pi_corrections.clone(),
        lut_applied: !cal.luts.is_empty(),
        spectrum,
        mean_code: x.iter().sum::<f64>() / x.len() as f64,
    };
    Ok((report, aligned))
}

#[derive(Serialize)]
struct SweepSummary {
    n_delays: usize,
    trimmed: bool,
    monotone: bool,
    mean_step_ps: f64,
    min_step_ps: f64,
    max_step_ps: f64,
    /// Worst step deviation from the mean, relative to the mean.
    max_step_dnl: f64,
    inverted_segments: Vec<usize>,
    monitor: Option<MonitorSummary>,
}

#[derive(Serialize)]
struct MonitorSummary {
    samples_per_code: usize,
    estimated_monotone: bool,
    mean_estimated_step_ps: f64,
    max_abs_error_ps: f64,
}

fn build_pi(cfg: &RunConfig) -> Result<PhaseInterpolator, CliError> {
    let il = cfg.interleaver();
    Ok(PhaseInterpolator::new(il.pi.chain(0), il.input_clock.period)?)
}

fn sweep_stats(pi: &PhaseInterpolator, sweep: &[SweepPoint], trimmed: bool) -> SweepSummary {
    let steps: Vec<f64> = sweep.iter().map(|p| p.step.as_ps()).collect();
    let mean = steps.iter().sum::<f64>() / steps.len() as f64;
    SweepSummary {
        n_delays: pi.quant.n_delays,
        trimmed,
        monotone: steps.iter().all(|&s| s > 0.0),
        mean_step_ps: mean,
        min_step_ps: steps.iter().cloned().fold(f64::INFINITY, f64::min),
        max_step_ps: steps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        max_step_dnl: steps.iter().map(|s| (s / mean - 1.0).abs()).fold(0.0, f64::max),
        inverted_segments: pi.inversions(),
        monitor: None,
    }
}

fn pi_sweep(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let mut pi = build_pi(cfg)?;
    if cfg.system.trim_pi {
        pi.trim_paths(cfg.pi.trim_step(), cfg.pi.max_trim_iters)?;
    }
    let sweep = pi.sweep();
    let mut summary = sweep_stats(&pi, &sweep, cfg.system.trim_pi);
    ctx.csv("pi_sweep.csv", |w| write_sweep_csv(w, &sweep));
    if let Some(m) = &cfg.pi_monitor {
        let codes: Vec<u8> = (0..=255).collect();
        let est = measure_pi_transfer_uncorrelated(&pi, &codes, &cfg.sampler(), m.samples_per_code)?;
        let steps = step_estimates(&est, pi.period);
        summary.monitor = Some(MonitorSummary {
            samples_per_code: m.samples_per_code,
            estimated_monotone: steps.iter().all(|s| s.secs() > 0.0),
            mean_estimated_step_ps: steps.iter().map(|s| s.as_ps()).sum::<f64>() / steps.len() as f64,
            max_abs_error_ps: est
                .iter()
                .map(|e| wrapped_error(e, pi.period))
                .fold(0.0, f64::max),
        });
        ctx.csv("pi_monitor.csv", |w| write_monitor_csv(w, &est));
    }
    ctx.json("pi_sweep.json", summary);
    Ok(())
}

fn wrapped_error(e: &PhaseEstimate, period: Duration) -> f64 {
    let t = period.secs();
    let d = (e.phase - e.true_phase).secs();
    Duration((d + 0.5 * t).rem_euclid(t) - 0.5 * t).as_ps().abs()
}

fn write_monitor_csv(w: &mut Vec<u8>, est: &[PhaseEstimate]) -> std::io::Result<()> {
    use std::io::Write;
    writeln!(w, "code,estimated_phase_seconds,true_phase_seconds,p_i,p_q")?;
    for e in est {
        writeln!(
            w,
            "{},{:e},{:e},{:.6},{:.6}",
            e.code,
            e.phase.secs(),
            e.true_phase.secs(),
            e.p_i,
            e.p_q
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrimSummary {
    initial_inversions: Vec<usize>,
    iterations: usize,
    trims_ps: Vec<f64>,
    pre: SweepSummary,
    post: SweepSummary,
}

fn pi_trim(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let mut pi = build_pi(cfg)?;
    let pre_sweep = pi.sweep();
    let pre = sweep_stats(&pi, &pre_sweep, false);
    let report = pi.trim_paths(cfg.pi.trim_step(), cfg.pi.max_trim_iters)?;
    let post_sweep = pi.sweep();
    let post = sweep_stats(&pi, &post_sweep, true);
    ctx.csv("pi_sweep_pre.csv", |w| write_sweep_csv(w, &pre_sweep));
    ctx.csv("pi_sweep_post.csv", |w| write_sweep_csv(w, &post_sweep));
    ctx.json(
        "pi_trim.json",
        TrimSummary {
            initial_inversions: report.initial_inversions.clone(),
            iterations: report.iterations,
            trims_ps: report.trim.trims.iter().map(|t| t.as_ps()).collect(),
            pre,
            post,
        },
    );
    Ok(())
}

/// Results of one Monte Carlo trial.
#[derive(Clone, Debug, Serialize)]
pub struct TrialResult {
    pub seed: u64,
    /// Worst DNL and INL over slices, from the sine histogram capture.
    pub dnl_max: f64,
    pub inl_max: f64,
    pub enob: f64,
    pub sndr_db: f64,
    pub pi_inverted_segments: usize,
    pub pi_trim_iterations: usize,
}

/// Per-slice linearity from a long sine capture (signed codes, before LUT).
pub fn slice_linearity(cfg: &RunConfig, il: &Interleaver, cal: &Calibration) -> Result<Vec<LinearityReport>, CliError> {
    let mc = cfg
        .montecarlo
        .as_ref()
        .ok_or_else(|| CliError::Config("linearity needs a [montecarlo] section".into()))?;
    let tone = Stimulus::sine(mc.histogram_amplitude_lsb * cfg.lsb_volts(), mc.histogram_tone_hz);
    let cap = run_capture(il, &tone, mc.histogram_samples, cal)?;
    cap.slice_histograms()
        .iter()
        .map(|h| Ok(code_density_linearity(h, -LUT_ORIGIN, HistogramStimulus::Sine)?))
        .collect()
}

pub fn run_trial(base: &RunConfig, seed: u64) -> Result<(TrialResult, Vec<LinearityReport>), CliError> {
    let mut cfg = base.clone();
    cfg.master_seed = seed;
    let il = Interleaver::new(cfg.interleaver())?;
    let (cal, _) = calibrate_system(&cfg, &il)?;
    let lin = slice_linearity(&cfg, &il, &cal)?;
    let (report, _) = measure_sine(&cfg, &il, &cal)?;
    let spectrum = report
        .spectrum
        .ok_or_else(|| CliError::Config("montecarlo needs a sine stimulus".into()))?;
    let mut pi = build_pi(&cfg)?;
    let pi_inverted_segments = pi.inversions().len();
    let trim = pi.trim_paths(cfg.pi.trim_step(), cfg.pi.max_trim_iters)?;
    Ok((
        TrialResult {
            seed,
            dnl_max: lin.iter().map(|r| r.dnl_max).fold(0.0, f64::max),
            inl_max: lin.iter().map(|r| r.inl_max).fold(0.0, f64::max),
            enob: spectrum.enob,
            sndr_db: spectrum.sndr_db,
            pi_inverted_segments,
            pi_trim_iterations: trim.iterations,
        },
        lin,
    ))
}

/// Runs every configured trial in parallel; results are in seed order.
pub fn run_trials(cfg: &RunConfig) -> Result<Vec<TrialResult>, CliError> {
    let mc = cfg
        .montecarlo
        .as_ref()
        .ok_or_else(|| CliError::Config("montecarlo needs a [montecarlo] section".into()))?;
    (0..mc.trials as u64)
        .into_par_iter()
        .map(|i| run_trial(cfg, mc.first_seed + i).map(|(t, _)| t))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Percentiles {
    pub min: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Percentiles {
            min: v[0],
            p5: q(0.05),
            p50: q(0.5),
            p95: q(0.95),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Serialize)]
struct MonteCarloSummary {
    trials: usize,
    dnl_max: Percentiles,
    inl_max: Percentiles,
    enob: Percentiles,
    sndr_db: Percentiles,
    pi_inverted_trials: usize,
}

fn montecarlo(ctx: &mut Ctx) -> Result<(), CliError> {
    let trials = run_trials(ctx.cfg)?;
    let col = |f: fn(&TrialResult) -> f64| trials.iter().map(f).collect::<Vec<_>>();
    let summary = MonteCarloSummary {
        trials: trials.len(),
        dnl_max: Percentiles::of(&col(|t| t.dnl_max)),
        inl_max: Percentiles::of(&col(|t| t.inl_max)),
        enob: Percentiles::of(&col(|t| t.enob)),
        sndr_db: Percentiles::of(&col(|t| t.sndr_db)),
        pi_inverted_trials: trials.iter().filter(|t| t.pi_inverted_segments > 0).count(),
    };
    ctx.csv("montecarlo.csv", |w| {
        use std::io::Write;
        writeln!(w, "seed,dnl_max,inl_max,enob,sndr_db,pi_inverted_segments,pi_trim_iterations")?;
        for t in &trials {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6},{},{}",
                t.seed, t.dnl_max, t.inl_max, t.enob, t.sndr_db, t.pi_inverted_segments, t.pi_trim_iterations
            )?;
        }
        Ok(())
    });
    ctx.json("montecarlo.json", summary);
    // Per-slice linearity of the first trial, for plotting.
    if let Some(t) = trials.first() {
        let (_, lin) = run_trial(ctx.cfg, t.seed)?;
        if let Some(worst) = lin.iter().max_by(|a, b| a.dnl_max.total_cmp(&b.dnl_max)) {
            ctx.csv("linearity_worst_slice.csv", |w| write_linearity_csv(w, worst));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct FomReport {
    power_w: f64,
    rate: f64,
    enob: f64,
    enob_source: &'static str,
    fom_j_per_step: f64,
    fom_pj_per_step: f64,
}

fn fom(ctx: &mut Ctx, calibration: Option<&CalibrationState>) -> Result<(), CliError> {
    let f = ctx
        .cfg
        .fom
        .clone()
        .ok_or_else(|| CliError::Config("fom needs a [fom] section".into()))?;
    let (enob, enob_source) = match f.enob {
        Some(e) => (e, "config"),
        None => {
            let il = Interleaver::new(ctx.cfg.interleaver())?;
            let cal = match calibration {
                Some(st) => st.calibration.clone(),
                None => calibrate_system(ctx.cfg, &il)?.0,
            };
            let (r, _) = measure_sine(ctx.cfg, &il, &cal)?;
            let e = r
                .spectrum
                .ok_or_else(|| CliError::Config("fom without enob needs a sine stimulus".into()))?
                .enob;
            (e, "adc-sine")
        }
    };
    let j = walden_fom(f.power_w, enob, f.rate)?;
    ctx.json(
        "fom.json",
        FomReport {
            power_w: f.power_w,
            rate: f.rate,
            enob,
            enob_source,
            fom_j_per_step: j,
            fom_pj_per_step: j * 1e12,
        },
    );
    Ok(())
}
