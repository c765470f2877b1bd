use lowlight_fsda::objectives::{cosine_loss, psnr_metric, ssim, LossReport, SourceTerms, SsimConfig};
use lowlight_fsda::raw::{normalize_and_amplify, pack_bayer, quantize8, unpack_bayer, BayerPattern, BitDomain, RawFrame, SrgbImage};
use lowlight_fsda::tensor::{Graph, Tensor};
use lowlight_fsda::train::Aug;
use proptest::prelude::*;

fn tensor(shape: [usize; 3], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn image(c: usize, h: usize, w: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(lo..hi, c * h * w).prop_map(move |d| tensor([c, h, w], d))
}

fn frame(h: usize, w: usize, mosaic: Vec<u16>) -> RawFrame {
    RawFrame {
        height: h,
        width: w,
        mosaic,
        black_level: 512,
        saturation: 16383,
        bayer_pattern: BayerPattern::Rggb,
        exposure_s: 0.1,
        ratio: 100.0,
        camera_id: "P".into(),
    }
}

fn ssim_value(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(y.clone()));
    let s = ssim(&mut g, a, b, &SsimConfig::default()).unwrap();
    g.value(s).item()
}

fn srgb(t: &Tensor<f64>) -> SrgbImage {
    SrgbImage::new(t.cast(), BitDomain::Sixteen).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pack_then_unpack_is_bitwise_identity(
        (h, w, mosaic) in (1usize..12, 1usize..12).prop_flat_map(|(hh, ww)| {
            (Just(2 * hh), Just(2 * ww), prop::collection::vec(any::<u16>(), 4 * hh * ww))
        })
    ) {
        let f = frame(h, w, mosaic.clone());
        let packed = pack_bayer(&f).unwrap();
        prop_assert_eq!(packed.shape(), &[4, h / 2, w / 2]);
        let back = unpack_bayer(&packed).unwrap();
        let back: Vec<u16> = back.data().iter().map(|&v| v as u16).collect();
        prop_assert_eq!(back, mosaic);
    }

    #[test]
    fn amplification_is_bounded_and_monotone(
        x in prop::collection::vec(0.0f32..20000.0, 16),
        dx in 0.0f32..500.0,
        r1 in 1.0f64..400.0,
        dr in 0.0f64..100.0,
    ) {
        let t = Tensor::new([4, 2, 2], x.clone()).unwrap();
        let up = Tensor::new([4, 2, 2], x.iter().map(|v| v + dx).collect()).unwrap();
        let base = normalize_and_amplify(&t, 512.0, 16383.0, r1).unwrap();
        let brighter = normalize_and_amplify(&up, 512.0, 16383.0, r1).unwrap();
        let louder = normalize_and_amplify(&t, 512.0, 16383.0, r1 + dr).unwrap();
        for i in 0..16 {
            let b = base.data()[i];
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert!(brighter.data()[i] >= b);
            prop_assert!(louder.data()[i] >= b);
        }
    }

    #[test]
    fn cosine_loss_ignores_positive_scale(p in image(3, 4, 4, 0.01, 1.0), t in image(3, 4, 4, 0.01, 1.0)) {
        let loss = |alpha: f64| {
            let mut g = Graph::new();
            let scaled = Tensor::from_fn(p.shape().to_vec(), |i| alpha * p.data()[i]);
            let (a, b) = (g.constant(scaled), g.constant(t.clone()));
            let l = cosine_loss(&mut g, a, b).unwrap();
            g.value(l).item()
        };
        let base = loss(1.0);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
        for alpha in [1e-3, 1e3] {
            prop_assert!((loss(alpha) - base).abs() < 1e-6, "alpha {}: {} vs {}", alpha, loss(alpha), base);
        }
    }

    #[test]
    fn ssim_is_symmetric_bounded_and_reflexive(x in image(1, 16, 16, 0.0, 1.0), y in image(1, 16, 16, 0.0, 1.0)) {
        let xy = ssim_value(&x, &y);
        prop_assert!((xy - ssim_value(&y, &x)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&xy));
        prop_assert!((ssim_value(&x, &x) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_as_the_error_grows(
        gt in image(3, 8, 8, 0.25, 0.75),
        n in image(3, 8, 8, -1.0, 1.0),
        a in 0.001f64..0.1,
        k in 1.5f64..2.5,
    ) {
        let noisy = |s: f64| srgb(&Tensor::from_fn(gt.shape().to_vec(), |i| gt.data()[i] + s * n.data()[i]));
        let target = srgb(&gt);
        let near = psnr_metric(&noisy(a), &target).unwrap();
        let far = psnr_metric(&noisy(a * k), &target).unwrap();
        prop_assert!(near > far, "{} <= {}", near, far);
    }

    #[test]
    fn augmentation_group_laws(t in image(2, 3, 5, -1.0, 1.0), hflip: bool, vflip: bool, rot in 0u8..4) {
        let aug = Aug { hflip, vflip, rot };
        let out = aug.apply(&t).unwrap();
        let mut a: Vec<f64> = t.data().to_vec();
        let mut b: Vec<f64> = out.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b, "a permutation of the values");
        let expect: &[usize] = if rot % 2 == 0 { &[2, 3, 5] } else { &[2, 5, 3] };
        prop_assert_eq!(out.shape(), expect);

        let quarter = Aug { rot: 1, ..Aug::default() };
        let mut r = t.clone();
        for _ in 0..4 {
            r = quarter.apply(&r).unwrap();
        }
        prop_assert_eq!(&r, &t);
        let flips = Aug { hflip, vflip, rot: 0 };
        prop_assert_eq!(&flips.apply(&flips.apply(&t).unwrap()).unwrap(), &t);
    }

    #[test]
    fn depth_to_space_inverts_space_to_depth(t in image(3, 4, 6, -1.0, 1.0)) {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let down = g.space_to_depth(x, 2).unwrap();
        prop_assert_eq!(g.shape(down), &[12, 2, 3]);
        let up = g.depth_to_space(down, 2).unwrap();
        prop_assert_eq!(g.value(up), &t);
    }

    #[test]
    fn loss_report_identities_are_exact(vals in prop::collection::vec(0.0f64..10.0, 3), with_ssim: bool) {
        let mut g = Graph::<f64>::new();
        let scalar = |g: &mut Graph<f64>, v: f64| g.constant(Tensor::new([1], vec![v]).unwrap());
        let (lt, cs, ss) = (scalar(&mut g, vals[0]), scalar(&mut g, vals[1]), scalar(&mut g, vals[2]));
        let ssim = with_ssim.then_some(ss);
        let total = match ssim {
            Some(s) => g.add(cs, s).unwrap(),
            None => cs,
        };
        let terms = SourceTerms { total, first: cs, ssim };
        let r = LossReport::from_graph(&g, lt, Some(&terms));
        prop_assert_eq!(r.l_source, r.l_cs + r.l_ssim);
        prop_assert_eq!(r.l_total, r.l_target + r.l_source);
        prop_assert_eq!(r.l_ssim == 0.0, !with_ssim || vals[2] == 0.0);
        let alone = LossReport::from_graph(&g, lt, None);
        prop_assert_eq!(alone.l_total, alone.l_target);
    }

    #[test]
    fn quantize8_lands_on_the_grid_and_is_idempotent(t in image(3, 4, 4, -0.2, 1.2)) {
        let q = quantize8(&SrgbImage::new(t.cast(), BitDomain::Sixteen).unwrap());
        prop_assert_eq!(q.domain, BitDomain::Eight);
        for &v in q.pixels.data() {
            let k = f64::from(v) * 255.0;
            prop_assert!((k - k.round()).abs() < 1e-3 && (0.0..=255.0).contains(&k.round()));
        }
        prop_assert_eq!(&quantize8(&q), &q);
    }
}
