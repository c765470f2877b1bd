use lowlight_fsda::nets::{init_bundle, Domain, Mode, ModelBundle};
use lowlight_fsda::objectives::psnr_metric;
use lowlight_fsda::raw::{BitDomain, SrgbImage};
use lowlight_fsda::synth::{default_profiles, generate_pairs, PairSettings, ScenePair};
use lowlight_fsda::tensor::Tensor;
use lowlight_fsda::train::{
    converter_pairs, evaluate, evaluate_with, pretrain_converter, select_k_shot, train, train_target_only,
    write_history_csv, ConverterConfig, HistoryRow, TrainConfig,
};
use lowlight_fsda::Error;

fn data(n_src: usize, n_tgt: usize, size: usize) -> (Vec<ScenePair>, Vec<ScenePair>) {
    let (a, b) = default_profiles();
    let s = PairSettings::default();
    (
        generate_pairs(&a, n_src, size, size, 1, &s).unwrap(),
        generate_pairs(&b, n_tgt, size, size, 2, &s).unwrap(),
    )
}

fn tiny_cfg(mode: Mode) -> TrainConfig {
    TrainConfig {
        k: 2,
        crop: 32,
        steps_per_epoch: 3,
        epochs: 2,
        channel_base: 4,
        mode,
        seed: 5,
        ..TrainConfig::desk()
    }
}

fn ready_bundle(seed: u64, mode: Mode, src: &[ScenePair]) -> ModelBundle<f32> {
    let mut b = init_bundle(seed, mode, 4).unwrap();
    let cfg = ConverterConfig {
        budget: 3,
        crop: 32,
        ..ConverterConfig::default()
    };
    pretrain_converter(&mut b, &converter_pairs(src), &cfg).unwrap();
    b
}

fn bits(b: &ModelBundle<f32>) -> Vec<u32> {
    b.params.iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

fn csv(h: &[HistoryRow]) -> Vec<u8> {
    let mut out = Vec::new();
    write_history_csv(&mut out, h).unwrap();
    out
}

#[test]
fn zero_epochs_leave_bundle_unchanged() {
    let (src, tgt) = data(3, 2, 64);
    let mut b = ready_bundle(0, Mode::Proposed, &src);
    let before = bits(&b);
    let h = train(&mut b, &src, &tgt, &TrainConfig { epochs: 0, ..tiny_cfg(Mode::Proposed) }).unwrap();
    assert!(h.is_empty());
    assert_eq!(bits(&b), before);
}

#[test]
fn converter_is_frozen_and_one_update_per_step() {
    let (src, tgt) = data(3, 2, 64);
    let mut b = ready_bundle(0, Mode::Proposed, &src);
    let conv_before: Vec<_> = b.converter_ids().iter().map(|&id| b.params.value(id).clone()).collect();
    let enc_id = b.params.id("enc_target.conv0.weight").unwrap();
    let enc_before = b.params.value(enc_id).clone();
    let cfg = tiny_cfg(Mode::Proposed);
    let h = train(&mut b, &src, &tgt, &cfg).unwrap();
    assert_eq!(h.len(), cfg.steps_per_epoch * cfg.epochs);
    for (id, before) in b.converter_ids().into_iter().zip(conv_before) {
        assert_eq!(b.params.value(id), &before, "{}", b.params.get(id).name);
    }
    assert_ne!(b.params.value(enc_id), &enc_before);
    for r in &h {
        assert_eq!((r.loss.l_cs + r.loss.l_ssim), r.loss.l_source);
        assert_eq!(r.loss.l_target + r.loss.l_source, r.loss.l_total);
        assert!(r.loss.l_ssim > 0.0);
    }
}

#[test]
fn training_is_deterministic() {
    let (src, tgt) = data(3, 2, 64);
    let run = || {
        let mut b = ready_bundle(9, Mode::SeparateEncDec, &src);
        let h = train(&mut b, &src, &tgt, &tiny_cfg(Mode::SeparateEncDec)).unwrap();
        (bits(&b), csv(&h))
    };
    assert_eq!(run(), run());
}

#[test]
fn source_loss_modes_share_target_draws() {
    let (src, tgt) = data(3, 2, 64);
    let first_target_loss = |mode: Mode| {
        let mut b = ready_bundle(1, mode, &src);
        let h = train(&mut b, &src, &tgt, &tiny_cfg(mode)).unwrap();
        h[0].loss.l_target
    };
    let p = first_target_loss(Mode::Proposed);
    assert_eq!(p, first_target_loss(Mode::SourceL1));
    assert_eq!(p, first_target_loss(Mode::NoSourceSsim));
    assert_eq!(p, first_target_loss(Mode::TargetOnly));
}

#[test]
fn source_l1_and_no_ssim_report_compositions() {
    let (src, tgt) = data(3, 2, 64);
    let mut b = init_bundle(1, Mode::SourceL1, 4).unwrap();
    let h = train(&mut b, &src, &tgt, &tiny_cfg(Mode::SourceL1)).unwrap();
    assert!(h.iter().all(|r| r.loss.l_ssim == 0.0 && r.loss.l_cs > 0.0));
    let mut b = init_bundle(1, Mode::NoSourceSsim, 4).unwrap();
    let h = train(&mut b, &src, &tgt, &tiny_cfg(Mode::NoSourceSsim)).unwrap();
    assert!(h.iter().all(|r| r.loss.l_ssim == 0.0 && r.loss.l_cs <= 1.0));
}

#[test]
fn target_only_loss_decreases() {
    let (_, tgt) = data(0, 2, 64);
    let mut b = init_bundle(3, Mode::TargetOnly, 4).unwrap();
    let cfg = TrainConfig { steps_per_epoch: 20, epochs: 6, ..tiny_cfg(Mode::TargetOnly) };
    let h = train_target_only(&mut b, &tgt, &cfg).unwrap();
    let avg = |r: &[HistoryRow]| r.iter().map(|r| r.loss.l_target).sum::<f64>() / r.len() as f64;
    assert!(avg(&h[h.len() - 20..]) < avg(&h[..20]), "{} vs {}", avg(&h[h.len() - 20..]), avg(&h[..20]));
    assert!(h.iter().all(|r| r.loss.l_source == 0.0));
}

#[test]
fn train_validates_inputs() {
    let (src, tgt) = data(2, 3, 64);
    let mut b = init_bundle(0, Mode::NoSourceSsim, 4).unwrap();
    let cfg = tiny_cfg(Mode::NoSourceSsim);
    assert!(matches!(train(&mut b, &src, &tgt, &cfg), Err(Error::Config(_))), "3 targets with k = 2");
    let big = TrainConfig { crop: 96, ..cfg.clone() };
    assert!(matches!(train(&mut b, &src, &tgt[..2], &big), Err(Error::Config(_))));
    let wrong_mode = TrainConfig { mode: Mode::Proposed, ..cfg };
    assert!(matches!(train(&mut b, &src, &tgt[..2], &wrong_mode), Err(Error::Config(_))));
    assert!(train_target_only(&mut b, &tgt[..2], &tiny_cfg(Mode::TargetOnly)).is_err());
}

#[test]
fn k_shot_selection_is_stratified() {
    let (_, tgt) = data(0, 8, 32);
    let shots = select_k_shot(&tgt, 4, &[100.0, 300.0], 7).unwrap();
    let count = |r: f64| shots.iter().filter(|p| p.short.ratio == r).count();
    assert_eq!((count(100.0), count(300.0)), (2, 2));
    let again = select_k_shot(&tgt, 4, &[100.0, 300.0], 7).unwrap();
    assert_eq!(shots, again);
    assert!(matches!(select_k_shot(&tgt, 9, &[100.0], 0), Err(Error::Config(_))));
}

#[test]
fn pretraining_edge_cases() {
    let (src, _) = data(2, 0, 32);
    let mut b = init_bundle(0, Mode::Proposed, 4).unwrap();
    let before = bits(&b);
    let zero = ConverterConfig { budget: 0, crop: 32, ..ConverterConfig::default() };
    let r = pretrain_converter(&mut b, &converter_pairs(&src), &zero).unwrap();
    assert_eq!(bits(&b), before);
    assert!(r.losses.is_empty());
    assert!(b.converter_ready);
    assert!(matches!(pretrain_converter(&mut b, &[], &zero), Err(Error::Argument(_))));
}

#[test]
fn evaluation_oracles() {
    let (_, tgt) = data(0, 3, 32);
    let perfect = evaluate_with(&tgt, |p| Ok(p.gt.clone())).unwrap();
    assert_eq!(perfect.rows.len(), 3);
    assert_eq!(perfect.mean_psnr, f64::INFINITY);
    assert!((perfect.mean_ssim - 1.0).abs() < 1e-6);

    let half = evaluate_with(&tgt, |p| {
        SrgbImage::new(Tensor::full(p.gt.pixels.shape().to_vec(), 0.5f32), BitDomain::Sixteen)
    })
    .unwrap();
    for (row, p) in half.rows.iter().zip(&tgt) {
        let d = p.gt.pixels.data();
        let mse = d.iter().map(|&v| (f64::from(v) - 0.5).powi(2)).sum::<f64>() / d.len() as f64;
        assert!((row.psnr - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    }
    assert!(evaluate_with(&[], |p| Ok(p.gt.clone())).is_err());

    let b = init_bundle(0, Mode::TargetOnly, 4).unwrap();
    let r = evaluate(&b, &tgt, Domain::Target).unwrap();
    assert_eq!(r.rows.len(), 3);
    let direct = psnr_metric(&b.full_forward(&tgt[0].short, Domain::Target).unwrap(), &tgt[0].gt).unwrap();
    assert_eq!(r.rows[0].psnr, direct);
}
