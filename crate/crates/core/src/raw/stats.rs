use super::{luma_weights, SrgbImage};
use crate::error::{Error, Result};

pub const INTENSITY_BINS: usize = 256;
pub const DERIV_BINS: usize = 256;
/// Bins per axis of the joint filter-response histogram.
pub const JOINT_BINS: usize = 64;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// First- and second-order image statistics of a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    /// Histogram of all channel values over `[0, 1]`.
    pub intensity: Vec<f64>,
    /// Histogram of horizontal and vertical forward differences of luma
    /// over `[-1, 1]`; bin `DERIV_BINS / 2` holds zero.
    pub derivative: Vec<f64>,
    /// Row-major `JOINT_BINS × JOINT_BINS` histogram of (Sobel-x, Sobel-y)
    /// luma responses clamped to `[-1, 1]`.
    pub joint: Vec<f64>,
}

impl StatsReport {
    /// Sum of the L1 distances of the three histograms.
    pub fn l1_distance(&self, other: &StatsReport) -> f64 {
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        l1(&self.intensity, &other.intensity)
            + l1(&self.derivative, &other.derivative)
            + l1(&self.joint, &other.joint)
    }
}

fn bin(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = (v - lo) / (hi - lo) * bins as f64;
    (t.floor().max(0.0) as usize).min(bins - 1)
}

fn normalize(h: &mut [f64]) {
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
}

pub fn domain_statistics(images: &[SrgbImage]) -> Result<StatsReport> {
    if images.is_empty() {
        return Err(Error::Argument("domain_statistics needs at least one image".into()));
    }
    let mut intensity = vec![0.0; INTENSITY_BINS];
    let mut derivative = vec![0.0; DERIV_BINS];
    let mut joint = vec![0.0; JOINT_BINS * JOINT_BINS];
    let [wr, wg, wb] = luma_weights();
    for img in images {
        let (_, h, w) = img.pixels.chw()?;
        let d = img.pixels.data();
        for &v in d {
            intensity[bin(f64::from(v), 0.0, 1.0, INTENSITY_BINS)] += 1.0;
        }
        let n = h * w;
        let luma: Vec<f64> = (0..n)
            .map(|i| wr * f64::from(d[i]) + wg * f64::from(d[n + i]) + wb * f64::from(d[2 * n + i]))
            .collect();
        for y in 0..h {
            for x in 0..w {
                let v = luma[y * w + x];
                if x + 1 < w {
                    derivative[bin(luma[y * w + x + 1] - v, -1.0, 1.0, DERIV_BINS)] += 1.0;
                }
                if y + 1 < h {
                    derivative[bin(luma[(y + 1) * w + x] - v, -1.0, 1.0, DERIV_BINS)] += 1.0;
                }
            }
        }
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let (mut gx, mut gy) = (0.0, 0.0);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let v = luma[(y + ky - 1) * w + x + kx - 1];
                        gx += SOBEL_X[ky][kx] * v;
                        gy += SOBEL_Y[ky][kx] * v;
                    }
                }
                let bx = bin(gx.clamp(-1.0, 1.0), -1.0, 1.0, JOINT_BINS);
                let by = bin(gy.clamp(-1.0, 1.0), -1.0, 1.0, JOINT_BINS);
                joint[by * JOINT_BINS + bx] += 1.0;
            }
        }
    }
    normalize(&mut intensity);
    normalize(&mut derivative);
    normalize(&mut joint);
    Ok(StatsReport {
        intensity,
        derivative,
        joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw::BitDomain;
    use crate::tensor::Tensor;

    fn constant(v: f32) -> SrgbImage {
        SrgbImage::new(Tensor::full([3, 8, 8], v), BitDomain::Sixteen).unwrap()
    }

    #[test]
    fn constant_image_concentrates_mass() {
        let r = domain_statistics(&[constant(0.3)]).unwrap();
        assert_eq!(r.intensity.iter().filter(|&&v| v > 0.0).count(), 1);
        assert!((r.intensity[bin(0.3f32 as f64, 0.0, 1.0, INTENSITY_BINS)] - 1.0).abs() < 1e-12);
        assert!((r.derivative[DERIV_BINS / 2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histograms_sum_to_one() {
        let img = SrgbImage::new(
            Tensor::from_fn([3, 9, 7], |i| ((i * 37) % 101) as f32 / 100.0),
            BitDomain::Sixteen,
        )
        .unwrap();
        let r = domain_statistics(&[img, constant(0.9)]).unwrap();
        for h in [&r.intensity, &r.derivative, &r.joint] {
            assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_list_is_argument_error() {
        assert!(matches!(domain_statistics(&[]), Err(Error::Argument(_))));
    }
}
