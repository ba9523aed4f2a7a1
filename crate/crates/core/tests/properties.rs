//! Property tests for the invariants of each module, checked against small
//! independent oracles written out here.

use hdr_vdiff::attention::Partition;
use hdr_vdiff::autoencoder::{Autoencoder, AutoencoderConfig, SourceKind};
use hdr_vdiff::autograd::Var;
use hdr_vdiff::datapipe::{build_network_input, make_sequence, synthesize_ldr, HdrFrame, LdrFrame};
use hdr_vdiff::diffusion::{ddim_step, forward_step_with_alpha, q_sample, DiffusionSchedule, ScheduleKind};
use hdr_vdiff::ldm::exposure_embedding;
use hdr_vdiff::loss::{tcam_loss, LossWeights, PerceptionNet};
use hdr_vdiff::metrics::{psnr_t, ssim};
use hdr_vdiff::nn::ParamStore;
use hdr_vdiff::tcam::{patch_match, SpatialGate};
use hdr_vdiff::tensor::Tensor;
use hdr_vdiff::tonemap::{inverse_mu_law, mu_law};
use hdr_vdiff::zica::{attention_rowsum_check, ZicaBlock};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, &mut rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn linear_channels_are_gamma_over_exposure(seed in 0u64..1000, e in 0.05f64..32.0, h in 1usize..6, w in 1usize..6) {
        let ldr = LdrFrame::new(uniform(&[h, w, 3], 0.0, 1.0, seed), e, 0).unwrap();
        let input = build_network_input(&ldr);
        let ch = input.channels().data();
        for (p, px) in ldr.pixels().data().chunks(3).enumerate() {
            for c in 0..3 {
                prop_assert_eq!(ch[p * 6 + c], px[c]);
                let expect = px[c].powf(2.2) / e;
                prop_assert!((ch[p * 6 + 3 + c] - expect).abs() <= 1e-12 * expect.max(1.0));
            }
        }
    }

    #[test]
    fn well_exposed_round_trip_is_within_half_a_step(seed in 0u64..1000, e in 0.5f64..16.0) {
        let hdr = HdrFrame::new(uniform(&[4, 4, 3], 0.0, 1.0 / e, seed), 0).unwrap();
        let ldr = synthesize_ldr(&hdr, e, 2.2, 8).unwrap();
        let input = build_network_input(&ldr);
        for (p, &x) in hdr.pixels().data().iter().enumerate() {
            let got = input.channels().data()[(p / 3) * 6 + 3 + p % 3];
            let v = (x * e).powf(1.0 / 2.2);
            let half = 0.5 / 255.0;
            let lo = (v - half).max(0.0).powf(2.2);
            let hi = (v + half).min(1.0).powf(2.2);
            let bound = ((x * e - lo).max(hi - x * e)) / e;
            prop_assert!((got - x).abs() <= bound + 1e-12, "{} vs {} (bound {})", got, x, bound);
        }
    }

    #[test]
    fn exposures_cycle_through_the_pattern(n in 1usize..9, p in prop::collection::vec(0.1f64..20.0, 2..=3)) {
        let frames: Vec<HdrFrame> = (0..n).map(|i| HdrFrame::new(Tensor::full([2, 2, 3], 0.1), i).unwrap()).collect();
        let seq = make_sequence(&frames, &p, 0).unwrap();
        for (k, f) in seq.frames.iter().enumerate() {
            prop_assert_eq!(f.exposure(), p[k % p.len()]);
            prop_assert_eq!(f.index(), k);
        }
    }

    #[test]
    fn mu_law_inverts(x in 0.0f64..1.0, mu in 1.0f64..10000.0) {
        let y = mu_law(x, mu);
        prop_assert!((0.0..=1.0).contains(&y));
        prop_assert!((inverse_mu_law(y, mu) - x).abs() < 1e-10);
    }

    #[test]
    fn alpha_bar_is_the_running_product(steps in 2usize..300, b0 in 1e-5f64..1e-2, span in 1e-4f64..0.2, cosine in any::<bool>()) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = DiffusionSchedule::new(steps, b0, (b0 + span).min(0.5), kind).unwrap();
        let mut prod = 1.0;
        let mut prev = 1.0;
        for t in 1..=steps {
            prod *= s.alpha(t).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            prop_assert!((ab - prod).abs() <= 1e-12);
            prop_assert!(ab < prev && ab > 0.0);
            prev = ab;
        }
    }

    #[test]
    fn unit_alpha_forward_step_is_identity(seed in 0u64..1000) {
        let z = uniform(&[2, 4, 3, 3], -3.0, 3.0, seed);
        let n = uniform(&[2, 4, 3, 3], -3.0, 3.0, seed + 1);
        prop_assert_eq!(forward_step_with_alpha(&z, 1.0, &n).unwrap(), z);
    }

    #[test]
    fn deterministic_ddim_recovers_z0_from_true_noise(seed in 0u64..1000, t in 1usize..1000) {
        let s = DiffusionSchedule::new(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let z0 = uniform(&[1, 4, 4, 4], -2.0, 2.0, seed);
        let eps = Tensor::randn([1, 4, 4, 4], &mut rng(seed + 7));
        let zt = q_sample(&z0, t, &s, &eps).unwrap().latent;
        let back = ddim_step(&zt, &eps, t, 0, &s, 0.0, None).unwrap();
        let tol = 1e-9 / s.alpha_bar(t).unwrap().sqrt();
        prop_assert!(back.max_abs_diff(&z0).unwrap() < tol.max(1e-9));
    }

    #[test]
    fn exposure_embedding_matches_formula(e in -8.0f64..8.0, half in 1usize..32) {
        let d = 2 * half;
        let emb = exposure_embedding(e, d).unwrap();
        for n in 0..half {
            let s = (e / 10000f64.powf((2 * n) as f64 / d as f64)).sin();
            let c = (e / 10000f64.powf((2 * n + 1) as f64 / d as f64)).cos();
            prop_assert!((emb[2 * n] - s).abs() < 1e-12);
            prop_assert!((emb[2 * n + 1] - c).abs() < 1e-12);
        }
    }
}

/// Brute-force NCC matching written independently of the library.
fn oracle_match(a: &Tensor, b: &Tensor, patch: usize, radius: i32) -> Vec<(i32, i32)> {
    let (c, h, w) = (a.shape()[0], a.shape()[1] as i32, a.shape()[2] as i32);
    let r = (patch / 2) as i32;
    let vec_at = |t: &Tensor, y: i32, x: i32| -> Vec<f64> {
        let mut v = Vec::new();
        for ch in 0..c {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    v.push(if yy >= 0 && xx >= 0 && yy < h && xx < w {
                        t.data()[(ch * h as usize + yy as usize) * w as usize + xx as usize]
                    } else {
                        0.0
                    });
                }
            }
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let v: Vec<f64> = v.iter().map(|x| x - m).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            v.iter().map(|x| x / n).collect()
        } else {
            vec![0.0; v.len()]
        }
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = vec_at(a, y, x);
            let mut best = (f64::NEG_INFINITY, i32::MAX, (0, 0));
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h || xx >= w {
                        continue;
                    }
                    let q = vec_at(b, yy, xx);
                    let s: f64 = p.iter().zip(&q).map(|(u, v)| u * v).sum();
                    let d = dy * dy + dx * dx;
                    if s > best.0 || (s == best.0 && d < best.1) {
                        best = (s, d, (dy, dx));
                    }
                }
            }
            out.push(best.2);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn patch_match_agrees_with_brute_force(seed in 0u64..1000, side in 3usize..10, patch in prop::sample::select(vec![1usize, 3, 5]), radius in 0i32..4) {
        let a = uniform(&[2, side, side], 0.0, 1.0, seed);
        let b = uniform(&[2, side, side], 0.0, 1.0, seed + 1);
        let m = patch_match(&a, &b, patch, radius as usize).unwrap();
        prop_assert_eq!(m.offsets, oracle_match(&a, &b, patch, radius));
    }

    #[test]
    fn gate_weights_are_open_interval(seed in 0u64..1000, c in 1usize..5) {
        let mut ps = ParamStore::new();
        let gate = SpatialGate::new(&mut ps, "gate", c, &mut rng(seed));
        let r = Var::constant(uniform(&[1, c, 5, 5], -2.0, 2.0, seed + 1));
        let m = Var::constant(uniform(&[1, c, 5, 5], -2.0, 2.0, seed + 2));
        let a = gate.attention(&ps, &r, &m, 0.0).unwrap();
        prop_assert!(a.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn loss_terms_are_nonnegative_and_vanish_only_at_equality(seed in 0u64..1000, t in 1usize..4, same in any::<bool>()) {
        let net = PerceptionNet::new();
        let gt = uniform(&[1, t, 3, 8, 8], 0.0, 1.0, seed);
        let pred = if same { gt.clone() } else { uniform(&[1, t, 3, 8, 8], 0.0, 1.0, seed + 1) };
        let l = tcam_loss(&Var::constant(pred), &Var::constant(gt), &LossWeights::default(), &net).unwrap();
        prop_assert!(l.l1 >= 0.0 && l.temporal >= 0.0 && l.perception >= 0.0);
        let total = l.total.data()[0];
        prop_assert_eq!(total == 0.0, same);
    }

    #[test]
    fn zica_rows_sum_to_one(seed in 0u64..1000, c in prop::sample::select(vec![4usize, 8]), side in prop::sample::select(vec![4usize, 8]), grid in any::<bool>()) {
        let mut ps = ParamStore::new();
        let part = if grid { Partition::Grid(2) } else { Partition::Window(2) };
        let block = ZicaBlock::new(&mut ps, "z", c, 6, 1.0, part, &mut rng(seed));
        let f_r = uniform(&[1, c, side, side], -1.0, 1.0, seed + 1);
        let f_d = uniform(&[1, 6, side, side], -1.0, 1.0, seed + 2);
        prop_assert!(attention_rowsum_check(&block, &ps, &f_r, &f_d).unwrap() < 1e-12);
    }

    #[test]
    fn psnr_t_matches_direct_formula(seed in 0u64..1000, peak in 0.5f64..4.0) {
        let a = HdrFrame::new(uniform(&[8, 8, 3], 0.0, 4.0, seed), 0).unwrap();
        let b = HdrFrame::new(uniform(&[8, 8, 3], 0.0, 4.0, seed + 1), 0).unwrap();
        let tm = |v: f64| (1.0 + 5000.0 * (v / peak).clamp(0.0, 1.0)).ln() / 5001f64.ln();
        let mse = a.pixels().data().iter().zip(b.pixels().data()).map(|(x, y)| (tm(*x) - tm(*y)).powi(2)).sum::<f64>() / 192.0;
        let expect = 10.0 * (1.0 / mse).log10();
        prop_assert!((psnr_t(&a, &b, peak, 5000.0).unwrap() - expect).abs() < 1e-9);
        prop_assert_eq!(psnr_t(&a, &b, peak, 5000.0).unwrap(), psnr_t(&b, &a, peak, 5000.0).unwrap());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..1000) {
        let a = uniform(&[12, 12, 3], 0.0, 1.0, seed);
        let b = uniform(&[12, 12, 3], 0.0, 1.0, seed + 1);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 && s >= -1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn autoencoder_shapes_hold_for_any_size(h in 1usize..40, w in 1usize..40, seed in 0u64..100) {
        let cfg = AutoencoderConfig { widths: vec![4, 4, 8, 8], ..AutoencoderConfig::default() };
        let ae = Autoencoder::new(cfg, seed).unwrap();
        let img = uniform(&[h, w, 3], 0.0, 1.0, seed);
        let z = ae.encode(&img, SourceKind::HdrTonemapped).unwrap();
        prop_assert_eq!(z.values.shape(), &[1, 4, h.div_ceil(8), w.div_ceil(8)]);
        let (out, feats) = ae.decode(&z).unwrap();
        prop_assert_eq!(out.shape(), &[8 * h.div_ceil(8), 8 * w.div_ceil(8), 3]);
        prop_assert_eq!(feats.maps.len(), 4);
    }
}
