//! Synthetic two-camera simulator.
//!
//! Procedural radiance scenes are exposed through a camera model
//! (colour response, heteroscedastic Gaussian noise, black level, clipping)
//! to give paired short/long-exposure data whose source/target domain gap
//! is known by construction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw::{isp_oracle, rggb_color, BayerPattern, PostProcess, RawFrame, SrgbImage};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Long-exposure time of every ground-truth capture, in seconds.
pub const LONG_EXPOSURE_S: f64 = 10.0;
/// Scene radiance that a long exposure maps to [`FILL_FRACTION`] of range.
pub const REFERENCE_RADIANCE: f64 = 0.25;
pub const FILL_FRACTION: f64 = 0.4;
/// Upper clip of generated radiance; keeps long exposures below saturation.
pub const MAX_RADIANCE: f32 = 0.6;
/// Exposure ratios of the default target camera setup.
pub const DEFAULT_RATIOS: [f64; 2] = [100.0, 300.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraProfile {
    pub camera_id: String,
    /// Scene linear RGB → sensor RGB, row per sensor channel.
    pub color_matrix: [[f64; 3]; 3],
    pub wb_gains: [f64; 3],
    /// Signal-dependent variance coefficient (counts).
    pub noise_a: f64,
    /// Signal-independent read-noise variance (counts²).
    pub noise_b: f64,
    pub black_level: u32,
    pub saturation: u32,
}

pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub(crate) fn inverse3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = det3(m);
    if det.abs() < 1e-12 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            // adjugate: cofactor of (c, r)
            let (r0, r1) = ([1, 0, 0][c], [2, 2, 1][c]);
            let (c0, c1) = ([1, 0, 0][r], [2, 2, 1][r]);
            let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            *v = sign * minor / det;
        }
    }
    Some(inv)
}

impl CameraProfile {
    pub fn validate(&self) -> Result<()> {
        if self.color_matrix.iter().flatten().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config(format!(
                "{}: colour matrix entries must be nonnegative",
                self.camera_id
            )));
        }
        if det3(&self.color_matrix).abs() < 1e-9 {
            return Err(Error::Config(format!("{}: colour matrix is singular", self.camera_id)));
        }
        if self.wb_gains.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Config(format!("{}: white-balance gains must be positive", self.camera_id)));
        }
        if !(self.noise_a >= 0.0) || !(self.noise_b >= 0.0) {
            return Err(Error::Config(format!("{}: noise coefficients must be >= 0", self.camera_id)));
        }
        if self.saturation <= self.black_level || self.saturation > u32::from(u16::MAX) {
            return Err(Error::Config(format!(
                "{}: need black_level < saturation <= 65535",
                self.camera_id
            )));
        }
        Ok(())
    }

    /// Inverse colour matrix with each row rescaled to sum to one.
    pub fn correction_matrix(&self) -> Result<[[f64; 3]; 3]> {
        let mut inv = inverse3(&self.color_matrix)
            .ok_or_else(|| Error::Config(format!("{}: colour matrix is singular", self.camera_id)))?;
        for row in &mut inv {
            let s: f64 = row.iter().sum();
            if s.abs() < 1e-12 {
                return Err(Error::Config(format!(
                    "{}: correction row sums to zero",
                    self.camera_id
                )));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(inv)
    }

    /// Counts per unit radiance per second.
    pub fn gain_constant(&self) -> f64 {
        FILL_FRACTION * f64::from(self.saturation - self.black_level) / (REFERENCE_RADIANCE * LONG_EXPOSURE_S)
    }
}

/// The two fixed cameras: `A` (source-like, clean) and `B` (target-like,
/// hue-rotated response, different white balance, ~6× read-noise variance).
pub fn default_profiles() -> (CameraProfile, CameraProfile) {
    let a = CameraProfile {
        camera_id: "A".into(),
        color_matrix: [[0.70, 0.20, 0.10], [0.15, 0.70, 0.15], [0.10, 0.20, 0.70]],
        wb_gains: [1.15, 1.0, 0.90],
        noise_a: 1.0,
        noise_b: 4.0,
        black_level: 512,
        saturation: 16383,
    };
    // A's response rotated by 20 degrees about the grey axis, rounded.
    let b = CameraProfile {
        camera_id: "B".into(),
        color_matrix: [[0.667, 0.111, 0.222], [0.279, 0.680, 0.041], [0.004, 0.309, 0.687]],
        wb_gains: [0.88, 1.0, 1.20],
        noise_a: 2.0,
        noise_b: 25.0,
        black_level: 600,
        saturation: 16000,
    };
    (a, b)
}

/// Linear scene radiance, `[3, H, W]`, nonnegative.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub radiance: Tensor<f32>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.radiance.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.radiance.shape()[2]
    }
}

/// Procedural scene: smooth gradient background, soft elliptical blobs,
/// hard-edged rectangles and fine striped texture, rescaled to a random
/// mean radiance.
pub fn generate_scene(seed: u64, height: usize, width: usize) -> Result<Scene> {
    if height % 2 != 0 || width % 2 != 0 {
        return Err(Error::dim("generate_scene", format!("extents must be even, got {height}x{width}")));
    }
    if height < 32 || width < 32 {
        return Err(Error::dim("generate_scene", format!("extents must be >= 32, got {height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scene"));
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)] };
    let (hf, wf) = (height as f64, width as f64);
    let n = height * width;
    let mut img = vec![0.0f64; 3 * n];

    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (fu, fv, phase): (f64, f64, f64) = (
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    for y in 0..height {
        for x in 0..width {
            let u = 2.0 * x as f64 / wf - 1.0;
            let v = 2.0 * y as f64 / hf - 1.0;
            let t = (0.5 + 0.35 * (theta.cos() * u + theta.sin() * v)).clamp(0.0, 1.0);
            let m = 1.0 + 0.2 * (fu * u + fv * v + phase).sin();
            for c in 0..3 {
                img[c * n + y * width + x] = m * (c0[c] * (1.0 - t) + c1[c] * t);
            }
        }
    }

    let blobs = rng.random_range(3..=6);
    for _ in 0..blobs {
        let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
        let ry = rng.random_range(0.06..0.3) * hf;
        let rx = rng.random_range(0.06..0.3) * wf;
        let rot: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let col = color(&mut rng);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let a = (dx * rot.cos() + dy * rot.sin()) / rx;
                let b = (-dx * rot.sin() + dy * rot.cos()) / ry;
                let d = (a * a + b * b).sqrt();
                let alpha = ((1.15 - d) / 0.15).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for c in 0..3 {
                        let p = &mut img[c * n + y * width + x];
                        *p = *p * (1.0 - alpha) + col[c] * alpha;
                    }
                }
            }
        }
    }

    let rects = rng.random_range(2..=5);
    for r in 0..rects {
        let y0 = rng.random_range(0..height - 4);
        let x0 = rng.random_range(0..width - 4);
        let y1 = (y0 + rng.random_range(4..=height / 2)).min(height);
        let x1 = (x0 + rng.random_range(4..=width / 2)).min(width);
        let col = color(&mut rng);
        // the first rectangle carries a fine stripe pattern
        let (freq, angle): (f64, f64) = (rng.random_range(0.15..0.45), rng.random_range(0.0..std::f64::consts::PI));
        for y in y0..y1 {
            for x in x0..x1 {
                let stripe = if r == 0 {
                    1.0 + 0.35 * (std::f64::consts::TAU * freq * (x as f64 * angle.cos() + y as f64 * angle.sin())).sin()
                } else {
                    1.0
                };
                for c in 0..3 {
                    img[c * n + y * width + x] = col[c] * stripe;
                }
            }
        }
    }

    // fine global texture
    let (tf, ta): (f64, f64) = (rng.random_range(0.2..0.5), rng.random_range(0.0..std::f64::consts::PI));
    for y in 0..height {
        for x in 0..width {
            let s = 1.0
                + 0.06
                    * (std::f64::consts::TAU * tf * (x as f64 * ta.cos() + y as f64 * ta.sin())).sin()
                    * (0.37 * x as f64 + 0.23 * y as f64).cos();
            for c in 0..3 {
                img[c * n + y * width + x] *= s;
            }
        }
    }

    let target_mean: f64 = rng.random_range(0.12..0.3);
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    let scale = target_mean / mean.max(1e-9);
    let radiance: Vec<f32> = img
        .iter()
        .map(|&v| ((v * scale) as f32).clamp(0.0, MAX_RADIANCE))
        .collect();
    Ok(Scene {
        id: format!("scene-{seed:016x}"),
        seed,
        radiance: Tensor::new([3, height, width], radiance)?,
    })
}

/// Noise-free sensor signal above black level, in counts, per mosaic site.
pub fn sensor_signal(scene: &Scene, profile: &CameraProfile, exposure_s: f64) -> Vec<f64> {
    let (h, w) = (scene.height(), scene.width());
    let n = h * w;
    let rad = scene.radiance.data();
    let kt = profile.gain_constant() * exposure_s;
    let mut out = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let row = &profile.color_matrix[rggb_color(y, x)];
            let i = y * w + x;
            let s = row[0] * f64::from(rad[i]) + row[1] * f64::from(rad[n + i]) + row[2] * f64::from(rad[2 * n + i]);
            out.push(kt * s);
        }
    }
    out
}

/// Exposes a scene: colour response, optional Gaussian noise with variance
/// `noise_a·μ + noise_b`, black level offset, rounding, clipping.
pub fn capture(
    scene: &Scene,
    profile: &CameraProfile,
    exposure_s: f64,
    noise_seed: u64,
    noise_enabled: bool,
) -> Result<RawFrame> {
    if !(exposure_s > 0.0) {
        return Err(Error::Config(format!("exposure must be positive, got {exposure_s}")));
    }
    profile.validate()?;
    let signal = sensor_signal(scene, profile, exposure_s);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let black = f64::from(profile.black_level);
    let sat = f64::from(profile.saturation);
    let mosaic = signal
        .iter()
        .map(|&mu| {
            let v = if noise_enabled {
                let z: f64 = StandardNormal.sample(&mut rng);
                mu + z * (profile.noise_a * mu + profile.noise_b).sqrt()
            } else {
                mu
            };
            (v + black).round().clamp(0.0, sat) as u16
        })
        .collect();
    Ok(RawFrame {
        height: scene.height(),
        width: scene.width(),
        mosaic,
        black_level: profile.black_level,
        saturation: profile.saturation,
        bayer_pattern: BayerPattern::Rggb,
        exposure_s,
        ratio: 1.0,
        camera_id: profile.camera_id.clone(),
    })
}

/// Short input, ISP ground truth and its 8-bit post-processed version.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub short: RawFrame,
    pub gt: SrgbImage,
    pub gt_pp: SrgbImage,
    pub scene_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSettings {
    pub ratio_set: Vec<f64>,
    pub long_exposure_s: f64,
    pub noise_enabled: bool,
    pub post: PostProcess,
}

impl Default for PairSettings {
    fn default() -> Self {
        PairSettings {
            ratio_set: DEFAULT_RATIOS.to_vec(),
            long_exposure_s: LONG_EXPOSURE_S,
            noise_enabled: true,
            post: PostProcess::default(),
        }
    }
}

pub fn make_pair(scene: &Scene, profile: &CameraProfile, ratio: f64, settings: &PairSettings) -> Result<ScenePair> {
    if !settings.ratio_set.iter().any(|&r| r == ratio) {
        return Err(Error::Config(format!(
            "ratio {ratio} not in configured set {:?}",
            settings.ratio_set
        )));
    }
    let noise_seed = derive_seed(scene.seed, &format!("noise/{}/{ratio}", profile.camera_id));
    let mut short = capture(
        scene,
        profile,
        settings.long_exposure_s / ratio,
        noise_seed,
        settings.noise_enabled,
    )?;
    short.ratio = ratio;
    let long = capture(scene, profile, settings.long_exposure_s, 0, false)?;
    let gt = isp_oracle(&long, profile)?;
    let gt_pp = settings.post.to_eight_bit(&gt);
    Ok(ScenePair {
        short,
        gt,
        gt_pp,
        scene_id: scene.id.clone(),
    })
}

/// `count` pairs from one camera; ratios cycle through `settings.ratio_set`.
pub fn generate_pairs(
    profile: &CameraProfile,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
    settings: &PairSettings,
) -> Result<Vec<ScenePair>> {
    if settings.ratio_set.is_empty() {
        return Err(Error::Config("ratio set is empty".into()));
    }
    (0..count)
        .map(|i| {
            let scene = generate_scene(derive_seed(seed, &format!("scene/{i}")), height, width)?;
            let ratio = settings.ratio_set[i % settings.ratio_set.len()];
            make_pair(&scene, profile, ratio, settings)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid_and_differ() {
        let (a, b) = default_profiles();
        a.validate().unwrap();
        b.validate().unwrap();
        assert_ne!(a.color_matrix, b.color_matrix);
        assert_ne!(a.wb_gains, b.wb_gains);
        assert!(b.noise_b >= 4.0 * a.noise_b);
        assert_ne!(a.noise_a, b.noise_a);
    }

    #[test]
    fn inverse_is_inverse() {
        let (a, _) = default_profiles();
        let inv = inverse3(&a.color_matrix).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let v: f64 = (0..3).map(|k| a.color_matrix[r][k] * inv[k][c]).sum();
                assert!((v - if r == c { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scene_determinism() {
        let s1 = generate_scene(11, 32, 48).unwrap();
        let s2 = generate_scene(11, 32, 48).unwrap();
        let s3 = generate_scene(12, 32, 48).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1.radiance, s3.radiance);
        assert_ne!(s1.id, s3.id);
        assert!(generate_scene(1, 33, 32).is_err());
        assert!(generate_scene(1, 30, 32).is_err());
    }

    #[test]
    fn zero_radiance_gives_black_level() {
        let (a, _) = default_profiles();
        let scene = Scene {
            id: "dark".into(),
            seed: 0,
            radiance: Tensor::zeros([3, 4, 4]),
        };
        let f = capture(&scene, &a, 1.0, 0, false).unwrap();
        assert!(f.mosaic.iter().all(|&v| u32::from(v) == a.black_level));
    }

    #[test]
    fn ratio_outside_set_is_rejected() {
        let (a, _) = default_profiles();
        let scene = generate_scene(1, 32, 32).unwrap();
        assert!(matches!(
            make_pair(&scene, &a, 50.0, &PairSettings::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_exposure_follows_ratio() {
        let (a, _) = default_profiles();
        let scene = generate_scene(1, 32, 32).unwrap();
        let p = make_pair(&scene, &a, 100.0, &PairSettings::default()).unwrap();
        assert!((p.short.exposure_s - 0.1).abs() < 1e-12);
        assert_eq!(p.short.ratio, 100.0);
    }
}
