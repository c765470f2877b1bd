//! Optimizer, augmentation, converter pretraining, the joint few-shot
//! training loop and evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Domain, Mode, ModelBundle};
use crate::objectives::{l1_loss, psnr_metric, source_loss, ssim_metric, total_loss, LossReport};
use crate::raw::{prepare_input, SrgbImage};
use crate::seed::derive_seed;
use crate::synth::ScenePair;
use crate::tensor::{crop_chw, Graph, ParamStore, Real, Tensor};

fn default_ratio_set() -> Vec<f64> {
    crate::synth::DEFAULT_RATIOS.to_vec()
}

/// Joint training hyper-parameters. Defaults are the full-scale values;
/// [`TrainConfig::desk`] gives the small CPU preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    /// Raw-mosaic crop side; the packed input is half of it.
    pub crop: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub lr0: f64,
    /// First epoch trained at `lr0 · lr_decay_factor`.
    pub lr_decay_start: usize,
    /// Further decay by `lr_decay_factor` every this many epochs.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub mode: Mode,
    pub ratio_set: Vec<f64>,
    pub channel_base: usize,
    /// Let the converter receive updates during joint training.
    pub train_converter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 4,
            crop: 512,
            steps_per_epoch: 161,
            epochs: 2500,
            lr0: 1e-4,
            lr_decay_start: 2000,
            lr_decay_every: 1000,
            lr_decay_factor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            mode: Mode::Proposed,
            ratio_set: default_ratio_set(),
            channel_base: 32,
            train_converter: false,
        }
    }
}

impl TrainConfig {
    /// CPU-sized preset used by the experiments and tests.
    pub fn desk() -> Self {
        TrainConfig {
            crop: 64,
            steps_per_epoch: 40,
            epochs: 300,
            lr_decay_start: 200,
            lr_decay_every: 100,
            channel_base: 8,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.crop == 0 || self.crop % 32 != 0 {
            return Err(Error::Config(format!("crop must be a positive multiple of 32, got {}", self.crop)));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return Err(Error::Config("learning-rate schedule must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.ratio_set.is_empty() || self.ratio_set.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config("ratio_set must hold positive ratios".into()));
        }
        if self.channel_base < 4 {
            return Err(Error::Config("channel_base must be >= 4".into()));
        }
        Ok(())
    }

    /// Step schedule: `lr0` before `lr_decay_start`, then one factor per
    /// started `lr_decay_every` block.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_decay_start {
            return self.lr0;
        }
        let drops = (epoch - self.lr_decay_start) / self.lr_decay_every + 1;
        self.lr0 * self.lr_decay_factor.powi(drops as i32)
    }
}

/// Adam moment buffers, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter from its
/// stored gradient.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} moment buffers for {} parameters", state.m.len(), params.len()),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - state.beta2.powi(t));
    let lr = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(state.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != p.value.numel() || p.grad.len() != p.value.numel() {
            return Err(Error::dim("adam_step", format!("buffer size mismatch for {}", p.name)));
        }
        if !p.trainable {
            continue;
        }
        let w = p.value.data_mut();
        for j in 0..w.len() {
            let g = p.grad[j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            w[j] = w[j] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Dihedral augmentation: flips, then `rot` quarter turns counter-clockwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Aug {
    pub hflip: bool,
    pub vflip: bool,
    pub rot: u8,
}

impl Aug {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Aug {
            hflip: rng.random(),
            vflip: rng.random(),
            rot: rng.random_range(0..4),
        }
    }

    /// Deterministic draw from a seed.
    pub fn from_seed(seed: u64) -> Self {
        Aug::sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn apply<T: Real>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, mut h, mut w) = t.chw()?;
        let mut cur = t.data().to_vec();
        if self.hflip {
            for row in cur.chunks_mut(w) {
                row.reverse();
            }
        }
        if self.vflip {
            for plane in cur.chunks_mut(h * w) {
                for y in 0..h / 2 {
                    for x in 0..w {
                        plane.swap(y * w + x, (h - 1 - y) * w + x);
                    }
                }
            }
        }
        for _ in 0..self.rot % 4 {
            // counter-clockwise: out(y, x) = in(x, w - 1 - y), out is w×h
            let mut next = vec![T::zero(); cur.len()];
            for ch in 0..c {
                let src = &cur[ch * h * w..(ch + 1) * h * w];
                let dst = &mut next[ch * h * w..(ch + 1) * h * w];
                for y in 0..w {
                    for x in 0..h {
                        dst[y * h + x] = src[x * w + (w - 1 - y)];
                    }
                }
            }
            cur = next;
            std::mem::swap(&mut h, &mut w);
        }
        Tensor::new([c, h, w], cur)
    }
}

/// Input, ground truth and 8-bit ground truth of one training crop.
#[derive(Clone, Debug, PartialEq)]
pub struct PairCrop {
    pub input: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub gt_pp: Tensor<f32>,
}

/// Same augmentation on all three tensors; the input is Bayer-packed.
pub fn augment(crop: &PairCrop, aug: Aug) -> Result<PairCrop> {
    Ok(PairCrop {
        input: aug.apply(&crop.input)?,
        gt: aug.apply(&crop.gt)?,
        gt_pp: aug.apply(&crop.gt_pp)?,
    })
}

/// A pair with its network input prepared once.
struct Staged {
    input: Tensor<f32>,
    gt: Tensor<f32>,
    gt_pp: Tensor<f32>,
}

impl Staged {
    fn new(p: &ScenePair) -> Result<Self> {
        Ok(Staged {
            input: prepare_input(&p.short)?,
            gt: p.gt.pixels.clone(),
            gt_pp: p.gt_pp.pixels.clone(),
        })
    }

    fn draw(&self, crop: usize, rng: &mut ChaCha8Rng) -> Result<PairCrop> {
        let (_, h, w) = self.gt.chw()?;
        let y0 = 2 * rng.random_range(0..=(h - crop) / 2);
        let x0 = 2 * rng.random_range(0..=(w - crop) / 2);
        let aug = Aug::sample(rng);
        let c = PairCrop {
            input: crop_chw(&self.input, y0 / 2, x0 / 2, crop / 2, crop / 2)?,
            gt: crop_chw(&self.gt, y0, x0, crop, crop)?,
            gt_pp: crop_chw(&self.gt_pp, y0, x0, crop, crop)?,
        };
        augment(&c, aug)
    }
}

fn stage_all(pairs: &[ScenePair], crop: usize, what: &str) -> Result<Vec<Staged>> {
    for p in pairs {
        if p.short.height < crop || p.short.width < crop {
            return Err(Error::Config(format!(
                "crop {crop} larger than {what} scene {} ({}x{})",
                p.scene_id, p.short.height, p.short.width
            )));
        }
    }
    pairs.iter().map(Staged::new).collect()
}

/// Picks `k` pairs round-robin over the exposure ratios in `ratio_set`
/// (so two per ratio when `k` allows), shuffling within each ratio.
pub fn select_k_shot(pairs: &[ScenePair], k: usize, ratio_set: &[f64], seed: u64) -> Result<Vec<ScenePair>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > pairs.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} available target scenes",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "k-shot"));
    let mut groups: Vec<Vec<usize>> = ratio_set
        .iter()
        .map(|&r| (0..pairs.len()).filter(|&i| pairs[i].short.ratio == r).collect())
        .collect();
    let mut rest: Vec<usize> = (0..pairs.len())
        .filter(|&i| !ratio_set.contains(&pairs[i].short.ratio))
        .collect();
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    rest.shuffle(&mut rng);
    groups.push(rest);
    let mut chosen = Vec::with_capacity(k);
    let mut cursor = vec![0; groups.len()];
    while chosen.len() < k {
        for (g, c) in groups.iter().zip(cursor.iter_mut()) {
            if chosen.len() < k && *c < g.len() {
                chosen.push(g[*c]);
                *c += 1;
            }
        }
    }
    Ok(chosen.into_iter().map(|i| pairs[i].clone()).collect())
}

/// Converter pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConverterConfig {
    pub budget: usize,
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
    /// Every n-th pair is held out for validation.
    pub holdout_every: usize,
}

impl Default for ConverterConfig {
    fn default() -> Self {
        ConverterConfig {
            budget: 3000,
            crop: 64,
            lr: 2e-3,
            seed: 0,
            holdout_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub val_mae: f64,
    /// Training ℓ1 per step.
    pub losses: Vec<f64>,
    pub train_pairs: usize,
    pub val_pairs: usize,
}

/// Mean absolute error of the converter against the 8-bit targets.
pub fn converter_mae(bundle: &ModelBundle<f32>, pairs: &[(SrgbImage, SrgbImage)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("no pairs to score".into()));
    }
    let mut total = 0.0;
    for (x, y) in pairs {
        let pred = bundle.convert(x)?;
        total += pred
            .pixels
            .data()
            .iter()
            .zip(y.pixels.data())
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .sum::<f64>()
            / pred.pixels.numel() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Fits the converter to `(16-bit, 8-bit)` pairs with ℓ1 and Adam, then
/// freezes it. Every `holdout_every`-th pair is kept out for validation.
pub fn pretrain_converter(
    bundle: &mut ModelBundle<f32>,
    pairs: &[(SrgbImage, SrgbImage)],
    cfg: &ConverterConfig,
) -> Result<PretrainReport> {
    if pairs.is_empty() {
        return Err(Error::Argument("converter pretraining needs at least one pair".into()));
    }
    let hold = cfg.holdout_every;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, p) in pairs.iter().enumerate() {
        if pairs.len() > 1 && hold > 0 && i % hold == hold - 1 {
            val.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    if val.is_empty() {
        val = train.clone();
    }
    for (x, _) in &train {
        if x.height() < cfg.crop || x.width() < cfg.crop || cfg.crop % 4 != 0 {
            return Err(Error::Config(format!(
                "converter crop {} does not fit a {}x{} image",
                cfg.crop,
                x.height(),
                x.width()
            )));
        }
    }

    bundle.set_converter_trainable(true);
    let ids = bundle.converter_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "converter"));
    let mut adam = AdamState::new(&bundle.params, 0.9, 0.999, 1e-8);
    // only converter tensors move
    let trainable_before: Vec<bool> = bundle.params.iter().map(|(_, p)| p.trainable).collect();
    for id in bundle.params.ids().collect::<Vec<_>>() {
        if !ids.contains(&id) {
            bundle.params.set_trainable(id, false);
        }
    }
    let mut losses = Vec::with_capacity(cfg.budget);
    for step in 0..cfg.budget {
        let (x, y) = &train[rng.random_range(0..train.len())];
        let y0 = 2 * rng.random_range(0..=(x.height() - cfg.crop) / 2);
        let x0 = 2 * rng.random_range(0..=(x.width() - cfg.crop) / 2);
        let aug = Aug::sample(&mut rng);
        let xin = aug.apply(&crop_chw(&x.pixels, y0, x0, cfg.crop, cfg.crop)?)?;
        let yt = aug.apply(&crop_chw(&y.pixels, y0, x0, cfg.crop, cfg.crop)?)?;
        let mut g = Graph::new();
        let xi = g.constant(xin);
        let yi = g.constant(yt);
        let pred = bundle.converter_forward(&mut g, xi)?;
        let loss = l1_loss(&mut g, pred, yi)?;
        g.backward(loss)?;
        losses.push(f64::from(g.value(loss).item()));
        bundle.params.zero_grads();
        g.accumulate_param_grads(&mut bundle.params);
        // cosine decay to 10% keeps the tail of the curve smooth
        let frac = step as f64 / cfg.budget.max(1) as f64;
        let lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        adam_step(&mut bundle.params, &mut adam, lr)?;
    }
    bundle.params.zero_grads();
    for (id, t) in bundle.params.ids().collect::<Vec<_>>().into_iter().zip(trainable_before) {
        bundle.params.set_trainable(id, t);
    }
    bundle.set_converter_trainable(false);
    bundle.converter_ready = true;
    let val_mae = converter_mae(bundle, &val)?;
    Ok(PretrainReport {
        val_mae,
        losses,
        train_pairs: train.len(),
        val_pairs: val.len(),
    })
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossReport,
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,step,l_target,l_cs,l_ssim,l_source,l_total,lr";

/// Writes the loss history as CSV with round-trippable floats.
pub fn write_history_csv(out: &mut impl Write, rows: &[HistoryRow]) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in rows {
        let l = &r.loss;
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.epoch, r.step, l.l_target, l.l_cs, l.l_ssim, l.l_source, l.l_total, r.lr
        )?;
    }
    Ok(())
}

/// Joint few-shot training of `bundle` in place.
///
/// Each step draws one source crop and one target crop from independent
/// seeded streams, so the target draws do not depend on the mode.
pub fn train(
    bundle: &mut ModelBundle<f32>,
    source_set: &[ScenePair],
    target_set: &[ScenePair],
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRow>> {
    cfg.validate()?;
    if bundle.mode != cfg.mode {
        return Err(Error::Config(format!(
            "bundle mode {} differs from configured mode {}",
            bundle.mode, cfg.mode
        )));
    }
    if target_set.len() != cfg.k {
        return Err(Error::Config(format!(
            "target set holds {} pairs but k = {}",
            target_set.len(),
            cfg.k
        )));
    }
    let single = cfg.mode == Mode::TargetOnly;
    if !single && source_set.is_empty() {
        return Err(Error::Config("source set is empty".into()));
    }
    let source = if single { Vec::new() } else { stage_all(source_set, cfg.crop, "source")? };
    let target = stage_all(target_set, cfg.crop, "target")?;

    let converter_ids = bundle.converter_ids();
    for &id in &converter_ids {
        bundle.params.set_trainable(id, cfg.train_converter);
    }
    let mut adam = AdamState::new(&bundle.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng_s = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "source-draws"));
    let mut rng_t = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "target-draws"));
    let mut history = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for step in 0..cfg.steps_per_epoch {
            let t_crop = target[rng_t.random_range(0..target.len())].draw(cfg.crop, &mut rng_t)?;
            let mut g = Graph::new();
            let t_in = g.constant(t_crop.input);
            let t_gt = g.constant(t_crop.gt);
            let t_pred = bundle.pipeline_forward(&mut g, t_in, Domain::Target)?;
            let l_target = l1_loss(&mut g, t_pred, t_gt)?;
            let (loss, terms) = if single {
                (l_target, None)
            } else {
                let s_crop = source[rng_s.random_range(0..source.len())].draw(cfg.crop, &mut rng_s)?;
                let s_in = g.constant(s_crop.input);
                let s_gt = g.constant(s_crop.gt);
                let s_pp = g.constant(s_crop.gt_pp);
                let s_pred = bundle.pipeline_forward(&mut g, s_in, Domain::Source)?;
                let terms = source_loss(&mut g, bundle, s_pred, s_gt, s_pp)?;
                (total_loss(&mut g, l_target, terms.total)?, Some(terms))
            };
            g.backward(loss)?;
            bundle.params.zero_grads();
            g.accumulate_param_grads(&mut bundle.params);
            adam_step(&mut bundle.params, &mut adam, lr)?;
            history.push(HistoryRow {
                epoch,
                step,
                loss: LossReport::from_graph(&g, l_target, terms.as_ref()),
                lr,
            });
        }
    }
    bundle.params.zero_grads();
    for &id in &converter_ids {
        bundle.params.set_trainable(id, false);
    }
    Ok(history)
}

/// The k-shot-only baseline: one encoder and the enhancer trained on the
/// target pairs with ℓ1 alone.
pub fn train_target_only(
    bundle: &mut ModelBundle<f32>,
    target_set: &[ScenePair],
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRow>> {
    if bundle.mode != Mode::TargetOnly {
        return Err(Error::Config(format!(
            "train_target_only needs a target_only bundle, got {}",
            bundle.mode
        )));
    }
    let cfg = TrainConfig {
        mode: Mode::TargetOnly,
        ..cfg.clone()
    };
    train(bundle, &[], target_set, &cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub scene_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "scene_id,psnr,ssim")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.scene_id, r.psnr, r.ssim)?;
        }
        writeln!(out, "mean,{},{}", self.mean_psnr, self.mean_ssim)
    }
}

/// Scores predictions produced by `predict` against each pair's ground truth.
pub fn evaluate_with(
    test_set: &[ScenePair],
    mut predict: impl FnMut(&ScenePair) -> Result<SrgbImage>,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    let mut rows = Vec::with_capacity(test_set.len());
    for p in test_set {
        let pred = predict(p)?;
        rows.push(EvalRow {
            scene_id: p.scene_id.clone(),
            psnr: psnr_metric(&pred, &p.gt)?,
            ssim: ssim_metric(&pred, &p.gt)?,
        });
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
    })
}

/// Full-frame inference on every test pair through the `domain` pipeline.
pub fn evaluate(bundle: &ModelBundle<f32>, test_set: &[ScenePair], domain: Domain) -> Result<EvalReport> {
    evaluate_with(test_set, |p| bundle.full_forward(&p.short, domain))
}

/// Pairs for converter pretraining from a set of scenes.
pub fn converter_pairs(pairs: &[ScenePair]) -> Vec<(SrgbImage, SrgbImage)> {
    pairs.iter().map(|p| (p.gt.clone(), p.gt_pp.clone())).collect()
}

/// Ratio → count of pairs, for reporting.
pub fn ratio_histogram(pairs: &[ScenePair]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for p in pairs {
        *m.entry(format!("{}", p.short.ratio)).or_insert(0) += 1;
    }
    m
}
