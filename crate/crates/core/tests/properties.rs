mod common;

use hpss_core::baseline::{median_filter_1d, median_hpss, MaskMode, MedianConfig};
use hpss_core::dsp::{self, GlobalStats, MagSpec, N_BINS, SAMPLE_RATE};
use hpss_core::metrics::{decompose, sdr_sir_sar};
use hpss_core::network::{read_checkpoint, write_checkpoint, Checkpoint, NetworkConfig, ThreeWayMDenseNet};
use hpss_core::tensor::{ops, Tensor, Var};
use hpss_core::training::{self, schedule_epoch, ScheduleDecision, TrainConfig, TrainState};
use proptest::prelude::*;

fn rms_rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Direct zero-padded "same" cross-correlation.
fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let mut out = vec![0.0; n * co * h * w];
    for bn in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yi = y as isize + ky as isize - (kh / 2) as isize;
                                let xi = xx as isize + kx as isize - (kw / 2) as isize;
                                if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                                    continue;
                                }
                                let iv = x.data()[((bn * ci + c) * h + yi as usize) * w + xi as usize];
                                acc += iv * k.data()[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bn * co + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn stft_round_trip(x in (1100usize..6000).prop_flat_map(signal)) {
        let spec = dsp::stft(&x, SAMPLE_RATE).unwrap();
        let y = dsp::istft(&spec);
        prop_assert_eq!(y.len(), x.len());
        prop_assert!(rms_rel(&y, &x) < 1e-9);
    }

    #[test]
    fn complementary_masks_reconstruct(x in signal(3000), seed in any::<u64>()) {
        let spec = dsp::stft(&x, SAMPLE_RATE).unwrap();
        let mag = spec.magnitude();
        let m = common::uniform(&[mag.bins * mag.frames], 0.0, 1.0, seed).into_data();
        let m_p = MagSpec::new(mag.bins, mag.frames, m).unwrap();
        let (p, h) = dsp::apply_masks(&m_p, &m_p.map(|v| 1.0 - v), &spec).unwrap();
        let sum: Vec<f64> = p.iter().zip(&h).map(|(a, b)| a + b).collect();
        prop_assert!(rms_rel(&sum, &x) < 1e-9);
    }

    #[test]
    fn patch_round_trip(frames in 1usize..400, seed in any::<u64>()) {
        let data = common::uniform(&[N_BINS * frames], 0.0, 5.0, seed).into_data();
        let mag = MagSpec::new(N_BINS, frames, data).unwrap();
        let patches = dsp::patchify(&mag).unwrap();
        prop_assert_eq!(dsp::depatchify(&patches, frames).unwrap(), mag);
    }

    #[test]
    fn normalized_values_in_unit_interval(lo in 0.0f64..2.0, span in 0.1f64..5.0, seed in any::<u64>()) {
        let stats = GlobalStats { min_val: lo, max_val: lo + span };
        let raw = common::uniform(&[N_BINS * 128], 0.0, 200.0, seed).into_data();
        let n = dsp::normalize(&dsp::MagPatch::new(raw).unwrap(), &stats).unwrap();
        prop_assert!(n.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn median_filter_bounds(x in prop::collection::vec(-5.0f64..5.0, 1..60), half in 0usize..10) {
        let y = median_filter_1d(&x, 2 * half + 1).unwrap();
        prop_assert_eq!(y.len(), x.len());
        let (lo, hi) = x.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(y.iter().all(|v| *v >= lo && *v <= hi));
    }

    #[test]
    fn soft_masks_partition_unity_and_scale_free(seed in any::<u64>(), c in 0.01f64..100.0) {
        let x = MagSpec::new(24, 40, common::uniform(&[24 * 40], 0.01, 3.0, seed).into_data()).unwrap();
        let cfg = MedianConfig { l_harm: 7, l_perc: 5, eps: 0.0, ..Default::default() };
        let (m_p, m_h) = median_hpss(&x, &cfg).unwrap();
        prop_assert!(m_p.data.iter().zip(&m_h.data).all(|(a, b)| (a + b - 1.0).abs() < 1e-12));
        let (s_p, _) = median_hpss(&x.map(|v| c * v), &cfg).unwrap();
        prop_assert!(m_p.data.iter().zip(&s_p.data).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn frame_permutation_commutes_without_time_filtering(seed in any::<u64>(), perm in Just((0..30).collect::<Vec<usize>>()).prop_shuffle()) {
        let x = MagSpec::new(16, 30, common::uniform(&[16 * 30], 0.0, 2.0, seed).into_data()).unwrap();
        let cfg = MedianConfig { l_harm: 1, l_perc: 5, mask_mode: MaskMode::Soft { power: 2.0 }, eps: 1e-12 };
        let mut xp = MagSpec::filled(16, 30, 0.0);
        for b in 0..16 {
            for (t, &src) in perm.iter().enumerate() {
                xp.set(b, t, x.get(b, src));
            }
        }
        let (m, _) = median_hpss(&x, &cfg).unwrap();
        let (mp, _) = median_hpss(&xp, &cfg).unwrap();
        for b in 0..16 {
            for (t, &src) in perm.iter().enumerate() {
                prop_assert_eq!(mp.get(b, t), m.get(b, src));
            }
        }
    }

    #[test]
    fn decomposition_identities(seed in any::<u64>(), c in 0.01f64..100.0) {
        let n = 512;
        let s = common::uniform(&[n], -1.0, 1.0, seed).into_data();
        let o = common::uniform(&[n], -1.0, 1.0, seed ^ 1).into_data();
        let est = common::uniform(&[n], -1.0, 1.0, seed ^ 2).into_data();
        let d = decompose(&est, &s, &o).unwrap();
        let e = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let gap: f64 = (0..n).map(|i| (d.s_target[i] + d.e_interf[i] + d.e_artif[i] - est[i]).powi(2)).sum();
        prop_assert!(gap.sqrt() / e(&est).sqrt() < 1e-10);
        prop_assert!((e(&d.s_target) + e(&d.e_interf) + e(&d.e_artif) - e(&est)).abs() / e(&est) < 1e-10);
        let m = sdr_sir_sar(&d);
        let scaled: Vec<f64> = est.iter().map(|v| c * v).collect();
        let ms = sdr_sir_sar(&decompose(&scaled, &s, &o).unwrap());
        prop_assert!((m.sdr_db - ms.sdr_db).abs() < 1e-9);
        prop_assert!((m.sir_db - ms.sir_db).abs() < 1e-9);
        prop_assert!((m.sar_db - ms.sar_db).abs() < 1e-9);
    }

    #[test]
    fn schedule_replays_identically(history in prop::collection::vec(0.0f64..2.0, 1..60)) {
        let cfg = TrainConfig::default();
        let replay = || {
            let mut state = TrainState::new(&cfg);
            let d: Vec<ScheduleDecision> = history.iter().map(|&v| schedule_epoch(v, &mut state, &cfg)).collect();
            (d, state.lr, state.epochs_since_improve_lr, state.epochs_since_improve_stop)
        };
        prop_assert_eq!(replay(), replay());
    }

    #[test]
    fn loss_vanishes_only_at_exact_targets(seed in any::<u64>(), bump in 1e-3f64..0.5) {
        let shape = [1, 4, 5];
        let x = common::uniform(&shape, 0.1, 2.0, seed);
        let m_p = common::uniform(&shape, 0.0, 1.0, seed ^ 7);
        let m_h = common::uniform(&shape, 0.0, 1.0, seed ^ 9);
        let target = |m: &Tensor| Tensor::new(shape, m.data().iter().zip(x.data()).map(|(a, b)| a * b).collect()).unwrap();
        let (p, h) = (target(&m_p), target(&m_h));
        let (vp, vh) = (Var::constant(m_p.clone()), Var::constant(m_h.clone()));
        prop_assert_eq!(training::loss(&vp, &vh, &x, &p, &h, 0.5, 0.5).unwrap().value().item(), 0.0);
        let mut off = m_p.clone();
        off.data_mut()[3] += bump;
        let l = training::loss(&Var::constant(off), &vh, &x, &p, &h, 0.5, 0.5).unwrap().value().item();
        prop_assert!(l > 0.0);
    }

    #[test]
    fn conv_matches_direct_sum(
        (n, ci, co, h, w) in (1usize..3, 1usize..3, 1usize..3, 1usize..9, 1usize..9),
        (kh, kw) in prop::sample::select(vec![(1, 1), (3, 3), (13, 1), (1, 13), (5, 3)]),
        seed in any::<u64>(),
    ) {
        let x = common::uniform(&[n, ci, h, w], -1.0, 1.0, seed);
        let k = common::uniform(&[co, ci, kh, kw], -1.0, 1.0, seed ^ 3);
        let b = common::uniform(&[co], -1.0, 1.0, seed ^ 5);
        let y = ops::conv2d(&Var::constant(x.clone()), &Var::constant(k.clone()), &Var::constant(b.clone())).unwrap();
        let reference = naive_conv(&x, &k, &b);
        prop_assert!(y.value().data().iter().zip(&reference).all(|(a, r)| (a - r).abs() < 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 4, ..ProptestConfig::default() })]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), lo in 0.0f64..1.0, span in 0.1f64..10.0) {
        let config = NetworkConfig::small();
        let net = ThreeWayMDenseNet::new(config.clone()).unwrap();
        let ckpt = Checkpoint { config, stats: GlobalStats { min_val: lo, max_val: lo + span }, params: net.init_params(seed) };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        prop_assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), ckpt);
    }
}
