//! The finite-difference gradient suite run by `gradcheck` and the tests.
//!
//! Inputs to non-smooth ops are drawn away from their kinks so a central
//! difference never straddles one; the whole-network checks detect and
//! replace straddling probes instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nets::{Domain, Mode, ModelBundle};
use crate::objectives::{cosine_loss, l1_loss, source_loss, ssim_loss, SsimConfig};
use crate::seed::derive_seed;
use crate::tensor::{GradCheck, GradCheckReport, Graph, Tensor, Var};

/// Tolerance for single ops and the plain network composite.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for anything that contains SSIM.
pub const SSIM_TOLERANCE: f64 = 1e-3;
const EPSILON: f64 = 1e-5;
/// The source loss sits near 1 and some of its gradients near the `1e-8`
/// denominator floor; at `1e-5` a single ulp of the loss is already
/// `1e-3` relative there.
const SOURCE_EPSILON: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[gap, 1]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Random weighted sum, so every output element gets a distinct cotangent.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn checker(seed: u64, tolerance: f64, max_probes: Option<usize>) -> GradCheck {
    GradCheck {
        epsilon: EPSILON,
        tolerance,
        max_probes,
        seed,
        skip_kinks: false,
    }
}

/// Whole networks have too many ReLU and pooling kinks to keep every one
/// away from the probes, so those checks replace straddling probes instead.
fn composite_checker(seed: u64, tolerance: f64, max_probes: usize, epsilon: f64) -> GradCheck {
    GradCheck {
        epsilon,
        skip_kinks: true,
        ..checker(seed, tolerance, Some(max_probes))
    }
}

/// Runs every check once with inputs drawn from `seed`. `tolerance`
/// overrides both default tolerances when given.
pub fn gradient_suite(seed: u64, tolerance: Option<f64>) -> Vec<GradCheckReport> {
    let op_tol = tolerance.unwrap_or(OP_TOLERANCE);
    let ssim_tol = tolerance.unwrap_or(SSIM_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradcheck"));
    let ws = derive_seed(seed, "cotangent");
    let full = checker(seed, op_tol, None);
    let mut out = Vec::new();

    let x = uniform(&mut rng, &[2, 6, 5], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    out.push(full.run(
        "conv2d",
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            weighted_sum(g, y, ws)
        },
        &[x.clone(), w.clone(), b.clone()],
    ));
    out.push(full.run(
        "conv2d_stride2",
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            weighted_sum(g, y, ws)
        },
        &[x, w, b],
    ));

    let x = uniform(&mut rng, &[3, 3, 2], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
    let b = uniform(&mut rng, &[2], -1.0, 1.0);
    out.push(full.run(
        "conv2d_transpose",
        |g, v| {
            let y = g.conv2d_transpose(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, ws)
        },
        &[x, w, b],
    ));

    // distinct values 0.05 apart: no window can tie within epsilon
    let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.05 - 0.8).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::new([2, 4, 4], vals).expect("32 values");
    out.push(full.run(
        "max_pool2",
        |g, v| {
            let y = g.max_pool2(v[0])?;
            weighted_sum(g, y, ws)
        },
        &[x],
    ));

    let x = uniform(&mut rng, &[8, 3, 2], -1.0, 1.0);
    out.push(full.run(
        "depth_to_space",
        |g, v| {
            let y = g.depth_to_space(v[0], 2)?;
            weighted_sum(g, y, ws)
        },
        &[x],
    ));

    let x = away_from_zero(&mut rng, &[2, 4, 4], 0.05);
    out.push(full.run(
        "leaky_relu",
        |g, v| {
            let y = g.leaky_relu(v[0], 0.2);
            weighted_sum(g, y, ws)
        },
        &[x],
    ));

    let x = uniform(&mut rng, &[2, 4, 4], -4.0, 4.0);
    out.push(full.run(
        "sigmoid",
        |g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, ws)
        },
        &[x],
    ));

    let x = Tensor::from_fn([2, 4, 4], |_| match rng.random_range(0..3) {
        0 => rng.random_range(-0.5..-0.05),
        1 => rng.random_range(0.05..0.95),
        _ => rng.random_range(1.05..1.5),
    });
    out.push(full.run(
        "clamp01",
        |g, v| {
            let y = g.clamp01(v[0]);
            weighted_sum(g, y, ws)
        },
        &[x],
    ));

    let gt = uniform(&mut rng, &[3, 4, 4], 0.0, 1.0);
    let offset = away_from_zero(&mut rng, &[3, 4, 4], 0.05);
    let pred = Tensor::from_fn([3, 4, 4], |i| gt.data()[i] + 0.3 * offset.data()[i]);
    out.push(full.run("l1_loss", |g, v| l1_loss(g, v[0], v[1]), &[pred, gt]));

    let a = uniform(&mut rng, &[3, 4, 4], 0.0, 1.0);
    let b = uniform(&mut rng, &[3, 4, 4], 0.0, 1.0);
    out.push(full.run("cosine_loss", |g, v| cosine_loss(g, v[0], v[1]), &[a, b]));

    let x = uniform(&mut rng, &[1, 14, 13], 0.0, 1.0);
    let y = uniform(&mut rng, &[1, 14, 13], 0.0, 1.0);
    let cfg = SsimConfig::default();
    out.push(checker(seed, ssim_tol, Some(48)).run(
        "one_minus_ssim",
        |g, v| ssim_loss(g, v[0], v[1], &cfg),
        &[x, y],
    ));

    out.push(network_composite(seed, op_tol, &mut rng));
    out.push(source_composite(seed, ssim_tol, &mut rng));
    out
}

/// Parameters perturbed by the composite checks: shallow, deepest, an
/// upsampling layer and the head.
const PROBED_PARAMS: [&str; 4] = [
    "enc_target.conv0.weight",
    "enhancer.down4.b.weight",
    "enhancer.up0.weight",
    "head.bias",
];

fn network_composite(seed: u64, tol: f64, rng: &mut ChaCha8Rng) -> GradCheckReport {
    let bundle = match ModelBundle::<f64>::init(seed, Mode::Proposed, 4) {
        Ok(b) => b,
        Err(_) => return failed("encoder_unet_l1", tol),
    };
    let ids: Vec<_> = PROBED_PARAMS.iter().map(|n| bundle.params.id(n).expect("known name")).collect();
    let x = uniform(rng, &[4, 16, 16], 0.0, 1.0);
    let t = uniform(rng, &[3, 32, 32], 0.2, 0.8);
    // Per-pixel weights: with a plain mean of ±1/N terms a bias gradient can
    // cancel to exactly zero, leaving the finite difference pure roundoff.
    let w = uniform(rng, &[3, 32, 32], 0.5, 1.5);
    let mut inputs = vec![x, t];
    inputs.extend(ids.iter().map(|&id| bundle.params.value(id).clone()));
    composite_checker(seed, tol, 12, EPSILON).run(
        "encoder_unet_l1",
        |g, v| {
            for (k, &id) in ids.iter().enumerate() {
                g.bind_param(id, v[2 + k]);
            }
            let y = bundle.pipeline_forward(g, v[0], Domain::Target)?;
            let w = g.constant(w.clone());
            let (yw, tw) = (g.mul(y, w)?, g.mul(v[1], w)?);
            l1_loss(g, yw, tw)
        },
        &inputs,
    )
}

fn source_composite(seed: u64, tol: f64, rng: &mut ChaCha8Rng) -> GradCheckReport {
    let mut bundle = match ModelBundle::<f64>::init(seed, Mode::Proposed, 4) {
        Ok(b) => b,
        Err(_) => return failed("source_cosine_ssim", tol),
    };
    bundle.converter_ready = true;
    bundle.set_converter_trainable(false);
    let pred = uniform(rng, &[3, 16, 16], 0.05, 0.95);
    let gt = uniform(rng, &[3, 16, 16], 0.05, 0.95);
    let pp = uniform(rng, &[3, 16, 16], 0.0, 1.0);
    composite_checker(seed, tol, 24, SOURCE_EPSILON).run(
        "source_cosine_ssim",
        |g, v| Ok(source_loss(g, &bundle, v[0], v[1], v[2])?.total),
        &[pred, gt, pp],
    )
}

fn failed(name: &str, tol: f64) -> GradCheckReport {
    GradCheckReport {
        op_name: name.to_string(),
        max_rel_error: f64::INFINITY,
        tolerance: tol,
        passed: false,
    }
}
