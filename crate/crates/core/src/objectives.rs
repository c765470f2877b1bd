//! Training losses and evaluation metrics.

use crate::error::{Error, Result};
use crate::nets::{Mode, ModelBundle};
use crate::raw::{grayscale, SrgbImage};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Stabilizer in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;
/// Lower bound on the MSE inside the PSNR logarithm.
pub const PSNR_MSE_FLOOR: f64 = 1e-12;

/// Per-step loss values.
///
/// `l_cs` carries the first source term: the cosine loss, or the ℓ1 loss in
/// [`Mode::SourceL1`]. Source terms are zero when the mode has no source
/// pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_target: f64,
    pub l_cs: f64,
    pub l_ssim: f64,
    pub l_source: f64,
    pub l_total: f64,
}

/// Gaussian-window SSIM settings on a unit dynamic range.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimConfig {
    pub size: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            size: 11,
            sigma: 1.5,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
        }
    }
}

impl SsimConfig {
    /// Row-major `size × size` window, normalized to sum to one.
    pub fn window(&self) -> Vec<f64> {
        let c = (self.size as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.size)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        let g: Vec<f64> = g.iter().map(|v| v / s).collect();
        let mut w = Vec::with_capacity(self.size * self.size);
        for a in &g {
            for b in &g {
                w.push(a * b);
            }
        }
        w
    }
}

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(
            op,
            format!("shape mismatch {:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(g, "l1_loss", pred, gt)?;
    let d = g.sub(pred, gt)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `1 − ⟨p, t⟩ / (‖p‖·‖t‖ + ε)` over the flattened images.
pub fn cosine_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(g, "cosine_loss", pred, gt)?;
    let pt = g.mul(pred, gt)?;
    let dot = g.sum(pt);
    let pp = g.mul(pred, pred)?;
    let pp = g.sum(pp);
    let tt = g.mul(gt, gt)?;
    let tt = g.sum(tt);
    let np = g.sqrt(pp);
    let nt = g.sqrt(tt);
    let den = g.mul(np, nt)?;
    let den = g.add_scalar(den, COSINE_EPS);
    let cos = g.div(dot, den)?;
    let neg = g.scale(cos, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean SSIM over the valid region of two `[1, H, W]` images.
pub fn ssim<T: Real>(g: &mut Graph<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    same_shape(g, "ssim", x, y)?;
    let (c, h, w) = g.value(x).chw()?;
    if c != 1 {
        return Err(Error::dim("ssim", format!("expected 1 channel, got {c}")));
    }
    if h < cfg.size || w < cfg.size {
        return Err(Error::dim(
            "ssim",
            format!("image {h}x{w} smaller than {0}x{0} window", cfg.size),
        ));
    }
    let win: Vec<T> = cfg.window().into_iter().map(T::from_f64_lossy).collect();
    let k = g.constant(Tensor::new([1, 1, cfg.size, cfg.size], win)?);
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let mx = g.conv2d(x, k, None, 1, 0)?;
    let my = g.conv2d(y, k, None, 1, 0)?;
    let exx = g.conv2d(xx, k, None, 1, 0)?;
    let eyy = g.conv2d(yy, k, None, 1, 0)?;
    let exy = g.conv2d(xy, k, None, 1, 0)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let sxx = g.sub(exx, mx2)?;
    let syy = g.sub(eyy, my2)?;
    let sxy = g.sub(exy, mxy)?;

    let a = g.scale(mxy, 2.0);
    let a = g.add_scalar(a, cfg.c1);
    let b = g.scale(sxy, 2.0);
    let b = g.add_scalar(b, cfg.c2);
    let num = g.mul(a, b)?;
    let c = g.add(mx2, my2)?;
    let c = g.add_scalar(c, cfg.c1);
    let d = g.add(sxx, syy)?;
    let d = g.add_scalar(d, cfg.c2);
    let den = g.mul(c, d)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// `1 − ssim(x, y)`.
pub fn ssim_loss<T: Real>(g: &mut Graph<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    let s = ssim(g, x, y, cfg)?;
    let neg = g.scale(s, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Source-domain nodes of one step.
#[derive(Clone, Copy, Debug)]
pub struct SourceTerms {
    pub total: Var,
    /// Cosine term, or the ℓ1 term in [`Mode::SourceL1`].
    pub first: Var,
    pub ssim: Option<Var>,
}

/// Mode-dependent source loss on 16-bit-domain prediction `s_pred`.
///
/// The SSIM term compares the grey converter output against the grey 8-bit
/// ground truth; gradients flow through the converter into `s_pred`.
pub fn source_loss<T: Real>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    s_pred: Var,
    s_gt: Var,
    s_gt_pp: Var,
) -> Result<SourceTerms> {
    match bundle.mode {
        Mode::TargetOnly => Err(Error::Contract("target_only mode has no source loss".into())),
        Mode::SourceL1 => {
            let l1 = l1_loss(g, s_pred, s_gt)?;
            Ok(SourceTerms {
                total: l1,
                first: l1,
                ssim: None,
            })
        }
        Mode::NoSourceSsim => {
            let cs = cosine_loss(g, s_pred, s_gt)?;
            Ok(SourceTerms {
                total: cs,
                first: cs,
                ssim: None,
            })
        }
        Mode::Proposed | Mode::SeparateEncDec | Mode::CombinedEncoder => {
            if !bundle.converter_ready {
                return Err(Error::Contract(
                    "source SSIM loss needs a pretrained converter".into(),
                ));
            }
            let cs = cosine_loss(g, s_pred, s_gt)?;
            let converted = bundle.converter_forward(g, s_pred)?;
            let gx = grayscale(g, converted)?;
            let gy = grayscale(g, s_gt_pp)?;
            let l_ssim = ssim_loss(g, gx, gy, &SsimConfig::default())?;
            let total = g.add(cs, l_ssim)?;
            Ok(SourceTerms {
                total,
                first: cs,
                ssim: Some(l_ssim),
            })
        }
    }
}

/// `l_target + l_source`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, l_target: Var, l_source: Var) -> Result<Var> {
    g.add(l_target, l_source)
}

impl LossReport {
    /// Reads the scalar values of a finished step; the source and total
    /// fields are recomputed from their parts so the identities are exact.
    pub fn from_graph<T: Real>(g: &Graph<T>, l_target: Var, source: Option<&SourceTerms>) -> Self {
        let read = |v: Var| g.value(v).item().to_f64_lossy();
        let l_target = read(l_target);
        let (l_cs, l_ssim) = match source {
            Some(s) => (read(s.first), s.ssim.map_or(0.0, read)),
            None => (0.0, 0.0),
        };
        let l_source = l_cs + l_ssim;
        LossReport {
            l_target,
            l_cs,
            l_ssim,
            l_source,
            l_total: l_target + l_source,
        }
    }
}

fn check_pair(op: &'static str, pred: &SrgbImage, gt: &SrgbImage) -> Result<()> {
    if pred.pixels.shape() != gt.pixels.shape() {
        return Err(Error::dim(
            op,
            format!(
                "shape mismatch {:?} vs {:?}",
                pred.pixels.shape(),
                gt.pixels.shape()
            ),
        ));
    }
    Ok(())
}

/// PSNR in dB with unit peak; `+inf` when the images are identical.
pub fn psnr_metric(pred: &SrgbImage, gt: &SrgbImage) -> Result<f64> {
    check_pair("psnr_metric", pred, gt)?;
    let n = pred.pixels.numel() as f64;
    let mse = pred
        .pixels
        .data()
        .iter()
        .zip(gt.pixels.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse.max(PSNR_MSE_FLOOR)).log10())
}

/// Mean of the per-channel SSIM of two RGB images.
pub fn ssim_metric(pred: &SrgbImage, gt: &SrgbImage) -> Result<f64> {
    check_pair("ssim_metric", pred, gt)?;
    let (_, h, w) = pred.pixels.chw()?;
    let n = h * w;
    let cfg = SsimConfig::default();
    let mut total = 0.0;
    for ch in 0..3 {
        let plane = |t: &Tensor<f32>| -> Result<Tensor<f64>> {
            let d = t.data()[ch * n..(ch + 1) * n].iter().map(|&v| f64::from(v)).collect();
            Tensor::new([1, h, w], d)
        };
        let mut g = Graph::<f64>::new();
        let x = g.constant(plane(&pred.pixels)?);
        let y = g.constant(plane(&gt.pixels)?);
        let s = ssim(&mut g, x, y, &cfg)?;
        total += g.value(s).item();
    }
    Ok(total / 3.0)
}
