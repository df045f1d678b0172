use proptest::prelude::*;
use rand::Rng;

use synadc::pi::{PhaseInterpolator, PiConfig};
use synadc::mismatch::substream;
use synadc::stdc::{adder_tree_sum, tap_edge_times, transfer_sweep, RawCount, StdcConfig, DEFAULT_TAPS};
use synadc::v2t::PulseSample;
use synadc::system::{align_outputs, build_lut, LutStimulus, SliceStream, LUT_SIZE};
use synadc::{Duration, Instant};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adder_tree_is_popcount(bits in prop::collection::vec(any::<bool>(), DEFAULT_TAPS)) {
        let want = bits.iter().filter(|&&b| b).count() as u32;
        prop_assert_eq!(adder_tree_sum(&bits).unwrap(), RawCount(want));
    }

    #[test]
    fn stdc_transfer_is_monotone(seed in any::<u64>(), sigma in 0.0f64..0.2) {
        let cfg = StdcConfig { sigma_rel: sigma, seed, ..StdcConfig::default() };
        let chain = cfg.chain(3, Duration::from_ps(800.0));
        let deltas: Vec<Duration> = (0..=400).map(|i| Duration::from_ps(-500.0 + 2.5 * i as f64)).collect();
        let pts = transfer_sweep(&chain, cfg.d_offset, cfg.nominal_offset_code(), &deltas).unwrap();
        prop_assert!(pts.windows(2).all(|w| w[1].code >= w[0].code));
    }

    #[test]
    fn lut_from_any_covered_histogram_is_monotone(
        hits in prop::collection::vec(100u64..5000, 120..=250),
        shift in 0usize..6,
    ) {
        let mut h = vec![0u64; LUT_SIZE];
        for (i, &c) in hits.iter().enumerate() {
            if i + shift < LUT_SIZE {
                h[i + shift] = c;
            }
        }
        let lut = build_lut(&h, LutStimulus::Sine { amplitude_lsb: 130.0 }).unwrap();
        prop_assert!(lut.is_monotone());
        let lut = build_lut(&h, LutStimulus::Ramp { lo_lsb: -128.0, hi_lsb: 127.0 }).unwrap();
        prop_assert!(lut.is_monotone());
    }

    #[test]
    fn alignment_conserves_samples(
        lat in prop::collection::vec(0usize..5, 16),
        m in 1usize..40,
    ) {
        let streams: Vec<SliceStream> = (0..16)
            .map(|s| {
                let n = m + lat[s];
                let idx: Vec<i64> = (0..n as i64).map(|j| j - lat[s] as i64).collect();
                SliceStream {
                    slice: s,
                    instants: idx.iter().map(|&j| Instant::from_ps((16 * j + s as i64) as f64 * 50.0)).collect(),
                    raw: vec![RawCount(0); n],
                    codes: idx.iter().map(|&j| if j < 0 { 0 } else { (16 * j + s as i64) as i32 }).collect(),
                    corrected: vec![0; n],
                }
            })
            .collect();
        let out = align_outputs(&streams, &lat).unwrap();
        prop_assert_eq!(out.len(), 16 * m);
        prop_assert!(out.is_time_ordered());
        for (k, s) in out.samples.iter().enumerate() {
            prop_assert_eq!(s.slice, k % 16);
            prop_assert_eq!(s.code, k as i32);
        }
    }

    #[test]
    fn pi_is_monotone_after_trim(seed in any::<u64>()) {
        let cfg = PiConfig { tap_sigma_rel: 0.02, path_sigma_rel: 0.15, seed, ..PiConfig::default() };
        let mut pi = PhaseInterpolator::new(cfg.chain(0), Duration::from_ps(200.0)).unwrap();
        pi.trim_paths(cfg.trim_step(), cfg.max_trim_iters).unwrap();
        prop_assert!(pi.is_monotone());
        prop_assert!(pi.inversions().is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn count_is_monotone_in_width(seed in any::<u64>(), start_ps in 0.0f64..1e4) {
        let cfg = StdcConfig { sigma_rel: 0.15, seed, ..StdcConfig::default() };
        let chain = cfg.chain(0, Duration::from_ps(800.0));
        let start = Instant::from_ps(start_ps);
        let mut last = 0;
        for i in 0..=1100 {
            let pulse = PulseSample { sign: false, width: Duration::from_ps(i as f64), start };
            let n = chain.count_fast(&pulse, 0).0;
            prop_assert!(n >= last);
            last = n;
        }
    }
}

#[test]
fn tap_edges_are_quasi_uniform() {
    let cfg = StdcConfig { sigma_rel: 0.1, seed: 11, ..StdcConfig::default() };
    let chain = cfg.chain(0, Duration::from_ps(800.0));
    let spacing = chain.mean_tap_delay().secs();
    let mut rng = substream(11, "quasi-uniform", 0);
    let n = 100_000;
    let mut u: Vec<f64> = (0..n)
        .map(|_| {
            let launch = Instant::from_ps(rng.gen_range(0.0..6400.0));
            let edges = tap_edge_times(&chain, launch);
            let e = edges[rng.gen_range(0..edges.len())];
            e.secs().rem_euclid(spacing) / spacing
        })
        .collect();
    u.sort_by(f64::total_cmp);
    let ks = u
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - x).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.05, "KS statistic {ks}");
}
