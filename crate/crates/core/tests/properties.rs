use proptest::prelude::*;

use scsplit::data::{synthesize_dataset, PatchSampler, Split, SplitCounts, SynthConfig};
use scsplit::eval;
use scsplit::infer::{self, tile_frame, stitch, Aggregation};
use scsplit::mixing::{convert_w_to_t, mix, sample_t, Channel, MixingRatio, TSamplerConfig};
use scsplit::nets::{RegHead, RegSpec, Regressor};
use scsplit::scin;
use scsplit::{rng, Image};

fn image(h: usize, w: usize, lo: f32, hi: f32) -> impl Strategy<Value = Image> {
    prop::collection::vec(lo..hi, h * w).prop_map(move |v| Image::new(h, w, v).unwrap())
}

fn image_pair(max: usize) -> impl Strategy<Value = (Image, Image)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| (image(h, w, 0.0, 10.0), image(h, w, 0.0, 10.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mix_is_linear_in_t((c0, c1) in image_pair(12), t in 0.0f32..=1.0) {
        let t = MixingRatio::new(t).unwrap();
        let a = mix(&c0, &c1, t).unwrap();
        let b = mix(&c0, &c1, t.complement()).unwrap();
        for i in 0..a.len() {
            let lhs = a.data()[i] + b.data()[i];
            let rhs = c0.data()[i] + c1.data()[i];
            prop_assert!((lhs - rhs).abs() <= 1e-5 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn mix_is_monotone_where_c1_exceeds_c0(
        lo in 0.0f32..5.0,
        gap in 0.01f32..5.0,
        t1 in 0.0f32..0.999,
        dt in 0.001f32..1.0,
    ) {
        let c0 = Image::filled(2, 2, lo);
        let c1 = Image::filled(2, 2, lo + gap);
        let t2 = (t1 + dt).min(1.0);
        let a = mix(&c0, &c1, MixingRatio::new(t1).unwrap()).unwrap();
        let b = mix(&c0, &c1, MixingRatio::new(t2).unwrap()).unwrap();
        prop_assert!(a.data()[0] < b.data()[0]);
    }

    #[test]
    fn w_to_t_matches_direct_construction((c0, c1) in image_pair(8), w in 0.0f32..=1.0, ch in 0usize..2) {
        let wanted = Channel::from_index(ch).unwrap();
        let got = mix(&c0, &c1, convert_w_to_t(w, wanted).unwrap()).unwrap();
        let (want_img, other) = if wanted == Channel::C0 { (&c0, &c1) } else { (&c1, &c0) };
        let direct = want_img.zip_map(other, |a, b| w * a + (1.0 - w) * b).unwrap();
        for (g, d) in got.data().iter().zip(direct.data()) {
            prop_assert!((g - d).abs() <= 1e-5 * d.abs().max(1.0));
        }
    }

    #[test]
    fn sampled_ratio_is_in_unit_interval(seed in any::<u64>(), a in 0.0f32..4.0) {
        let cfg = TSamplerConfig { a, ..TSamplerConfig::default() };
        let mut r = rng::stream(seed, 0);
        for _ in 0..50 {
            let t = sample_t(&cfg, &mut r).get();
            prop_assert!((0.0..=1.0).contains(&t));
        }
    }

    #[test]
    fn bin_index_is_floor_clamped(t in 0.0f32..=1.0, n in 1usize..300) {
        let b = scin::bin_index(MixingRatio::new(t).unwrap(), n);
        prop_assert_eq!(b, ((t * n as f32).floor() as usize).min(n - 1));
    }

    #[test]
    fn bin_samples_stay_in_their_bin(seed in any::<u64>(), n in 1usize..200, pick in any::<prop::sample::Index>()) {
        let bin = pick.index(n);
        let mut r = rng::stream(seed, 1);
        let t = scin::sample_t_in_bin(bin, n, &mut r);
        prop_assert_eq!(scin::bin_index(t, n), bin);
    }

    #[test]
    fn mean_aggregation_is_permutation_invariant_and_scale_equivariant(
        v in prop::collection::vec(0.0f32..1.0, 1..200),
        shuffle_seed in any::<u64>(),
        scale in 0.01f32..10.0,
    ) {
        use rand::seq::SliceRandom;
        let m = infer::mean(&v);
        let mut p = v.clone();
        p.shuffle(&mut rng::stream(shuffle_seed, 0));
        prop_assert!((infer::mean(&p) - m).abs() <= 1e-12);
        let scaled: Vec<f32> = v.iter().map(|x| x * scale).collect();
        prop_assert!((infer::mean(&scaled) - scale as f64 * m).abs() <= 1e-6 * (scale as f64 * m).abs().max(1e-6));
        let agg = infer::aggregate(&v, Aggregation::Mean, None).unwrap();
        prop_assert_eq!(agg.t, m as f32);
    }

    #[test]
    fn median_and_mode_lie_within_the_sample(v in prop::collection::vec(0.0f32..1.0, 1..100)) {
        let lo = v.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = v.iter().copied().fold(0.0, f32::max) as f64;
        let med = infer::median(&v);
        prop_assert!(med >= lo && med <= hi);
        let mode = infer::mode(&v);
        prop_assert!((0.0..=1.0).contains(&mode));
    }

    #[test]
    fn tiling_then_stitching_is_identity(
        h in 1usize..40,
        w in 1usize..40,
        size_frac in 0.1f64..1.0,
        stride_frac in 0.01f64..1.0,
        seed in any::<u64>(),
    ) {
        let size = ((h.min(w) as f64 * size_frac).ceil() as usize).max(1);
        let stride = ((size as f64 * stride_frac).ceil() as usize).clamp(1, size);
        let mut r = rng::stream(seed, 0);
        let f = Image::from_fn(h, w, |_, _| rand::Rng::random::<f32>(&mut r) * 4.0 - 2.0);
        let tiles = tile_frame(&f, size, stride).unwrap();
        prop_assert_eq!(stitch(&tiles, h, w, size - stride).unwrap(), f);
    }

    #[test]
    fn psnr_matches_its_definition((a, b) in image_pair(16)) {
        let (lo, hi) = b.min_max();
        prop_assume!(hi > lo);
        let range = hi as f64 - lo as f64;
        let mse: f64 = a.data().iter().zip(b.data()).map(|(&p, &g)| (p as f64 - g as f64).powi(2)).sum::<f64>()
            / a.len() as f64;
        prop_assume!(mse > 0.0);
        let want = (20.0 * range.log10() - 10.0 * mse.log10()).min(100.0);
        let got = eval::psnr(&a, &b).unwrap();
        prop_assert!((got.db - want).abs() <= 1e-6, "{} vs {}", got.db, want);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded((a, b) in (11usize..24, 11usize..24).prop_flat_map(|(h, w)| (image(h, w, 0.0, 1.0), image(h, w, 0.0, 1.0)))) {
        let s = eval::ssim(&a, &b).unwrap();
        prop_assert!((s - eval::ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        prop_assert!((eval::ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn regressor_output_is_bounded_for_any_finite_input(seed in any::<u64>(), amp in 0.0f32..1e4) {
        let reg = Regressor::new(RegSpec { depth: 2, base_width: 3, head: RegHead::SigmoidBounded, hidden: 4 }, seed).unwrap();
        let mut r = rng::stream(seed, 2);
        let x = Image::from_fn(8, 8, |_, _| (rand::Rng::random::<f32>(&mut r) - 0.5) * amp);
        let t = reg.forward(&x).unwrap();
        prop_assert!((0.0..=1.0).contains(&t), "{t}");
    }
}

#[test]
fn pairing_matches_crop_of_pre_summed_frame() {
    let fs = synthesize_dataset(&SynthConfig {
        frame_size: (40, 36),
        frames_per_split: SplitCounts { train: 4, val: 1, test: 1 },
        ..SynthConfig::default()
    })
    .unwrap();
    let half = MixingRatio::new(0.5).unwrap();
    let sampler = PatchSampler::new(&fs, Split::Train, 16).unwrap();
    let mut r = rng::stream(5, 0);
    for _ in 0..200 {
        let p = sampler.sample(&mut r);
        let (f0, f1) = fs.frame(p.frame_index);
        let whole = mix(f0, f1, half).unwrap().crop(p.y, p.x, 16, 16).unwrap();
        assert_eq!(mix(&p.c0, &p.c1, half).unwrap(), whole);
        assert!(fs.split_indices(Split::Train).contains(&p.frame_index));
    }
}

#[test]
fn normalization_roundtrips_for_any_ratio() {
    let fs = synthesize_dataset(&SynthConfig::default()).unwrap();
    let table = scin::build_table(&fs, 32, 20, 10, 1).unwrap();
    let (f0, f1) = fs.frame(0);
    let mut r = rng::stream(9, 0);
    for _ in 0..100 {
        let t = MixingRatio::new(rand::Rng::random::<f32>(&mut r)).unwrap();
        let x = mix(f0, f1, t).unwrap();
        let back = scin::denormalize(&scin::normalize(&x, t, &table).unwrap(), t, &table).unwrap();
        let scale = x.min_max().1.abs().max(x.min_max().0.abs());
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1e-6 * scale);
        }
    }
}
