//! Raw-domain preprocessing and the reference ISP.
//!
//! The network input path is `pack_bayer → normalize_and_amplify`. The ISP
//! (`isp_oracle`) renders the 16-bit-domain sRGB ground truth, and
//! [`PostProcess`] + [`quantize8`] produce the 8-bit targets used by the
//! converter network.

mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::CameraProfile;
use crate::tensor::{Graph, Real, Tensor, Var};

pub use stats::{domain_statistics, StatsReport, DERIV_BINS, INTENSITY_BINS, JOINT_BINS};

/// Colour filter layout of the mosaic. Only RGGB is produced or accepted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BayerPattern {
    #[serde(rename = "RGGB")]
    Rggb,
}

/// One Bayer mosaic plus the metadata needed to normalize it.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    /// Row-major sensor counts.
    pub mosaic: Vec<u16>,
    pub black_level: u32,
    pub saturation: u32,
    pub bayer_pattern: BayerPattern,
    pub exposure_s: f64,
    /// Long-exposure time divided by this frame's exposure time.
    pub ratio: f64,
    pub camera_id: String,
}

impl RawFrame {
    pub fn validate(&self) -> Result<()> {
        if self.height % 2 != 0 || self.width % 2 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::dim(
                "raw frame",
                format!("mosaic extents must be even and positive, got {}x{}", self.height, self.width),
            ));
        }
        if self.mosaic.len() != self.height * self.width {
            return Err(Error::dim(
                "raw frame",
                format!("{} samples for a {}x{} mosaic", self.mosaic.len(), self.height, self.width),
            ));
        }
        if self.saturation <= self.black_level {
            return Err(Error::Config(format!(
                "saturation {} must exceed black level {}",
                self.saturation, self.black_level
            )));
        }
        if !(self.exposure_s > 0.0) || !(self.ratio > 0.0) {
            return Err(Error::Config("exposure and ratio must be positive".into()));
        }
        if let Some(v) = self.mosaic.iter().find(|&&v| u32::from(v) > self.saturation) {
            return Err(Error::Config(format!(
                "sample {v} exceeds saturation {}",
                self.saturation
            )));
        }
        Ok(())
    }

    /// Copy of the `h×w` window at `(y0, x0)`; offsets must be even so the
    /// RGGB phase is kept.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<RawFrame> {
        if y0 % 2 != 0 || x0 % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("raw crop", "offsets and extents must be even"));
        }
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::dim(
                "raw crop",
                format!("window {h}x{w} at ({y0},{x0}) exceeds {}x{}", self.height, self.width),
            ));
        }
        let mut mosaic = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            mosaic.extend_from_slice(&self.mosaic[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(RawFrame {
            height: h,
            width: w,
            mosaic,
            ..self.clone()
        })
    }
}

/// Which of the two sRGB domains an image lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDomain {
    /// Linear-to-sRGB rendered output at full precision (ground truth, predictions).
    Sixteen,
    /// Display post-processed, 8-bit quantized output.
    Eight,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrgbImage {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub domain: BitDomain,
}

impl SrgbImage {
    pub fn new(pixels: Tensor<f32>, domain: BitDomain) -> Result<Self> {
        let (c, _, _) = pixels.chw()?;
        if c != 3 {
            return Err(Error::dim("srgb image", format!("expected 3 channels, got {c}")));
        }
        Ok(SrgbImage { pixels, domain })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Luma plane `[1, H, W]`.
    pub fn grayscale(&self) -> Tensor<f32> {
        let mut g = Graph::new();
        let x = g.constant(self.pixels.clone());
        let y = grayscale(&mut g, x).expect("three channels");
        g.value(y).clone()
    }
}

fn pack_plane<T: Real>(data: &[T], h: usize, w: usize) -> Result<Tensor<T>> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("pack_bayer", format!("extents must be even, got {h}x{w}")));
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut out = vec![T::zero(); 4 * ph * pw];
    for (ch, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let dst = &mut out[ch * ph * pw..(ch + 1) * ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                dst[y * pw + x] = data[(2 * y + dy) * w + 2 * x + dx];
            }
        }
    }
    Tensor::new([4, ph, pw], out)
}

/// RGGB mosaic → `[4, H/2, W/2]` with channels R, G(even row), G(odd row), B.
pub fn pack_bayer(frame: &RawFrame) -> Result<Tensor<f32>> {
    if frame.mosaic.len() != frame.height * frame.width {
        return Err(Error::dim("pack_bayer", "mosaic length does not match extents"));
    }
    let data: Vec<f32> = frame.mosaic.iter().map(|&v| f32::from(v)).collect();
    pack_plane(&data, frame.height, frame.width)
}

/// Inverse of [`pack_bayer`]; returns the `[H, W]` mosaic.
pub fn unpack_bayer<T: Real>(packed: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, ph, pw) = packed.chw()?;
    if c != 4 {
        return Err(Error::dim("unpack_bayer", format!("expected 4 channels, got {c}")));
    }
    let (h, w) = (2 * ph, 2 * pw);
    let mut out = vec![T::zero(); h * w];
    for (ch, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let src = &packed.data()[ch * ph * pw..(ch + 1) * ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                out[(2 * y + dy) * w + 2 * x + dx] = src[y * pw + x];
            }
        }
    }
    Tensor::new([h, w], out)
}

/// `min(ratio · max(x − black, 0) / (saturation − black), 1)` elementwise.
pub fn normalize_and_amplify(packed: &Tensor<f32>, black_level: f64, saturation: f64, ratio: f64) -> Result<Tensor<f32>> {
    if saturation <= black_level {
        return Err(Error::Config(format!(
            "saturation {saturation} must exceed black level {black_level}"
        )));
    }
    if !(ratio > 0.0) {
        return Err(Error::Config(format!("exposure ratio must be positive, got {ratio}")));
    }
    let scale = ratio / (saturation - black_level);
    let data = packed
        .data()
        .iter()
        .map(|&x| ((f64::from(x) - black_level).max(0.0) * scale).min(1.0) as f32)
        .collect();
    Tensor::new(packed.shape().to_vec(), data)
}

/// Network input for a frame: packed, black-subtracted, amplified by its ratio.
pub fn prepare_input(frame: &RawFrame) -> Result<Tensor<f32>> {
    let packed = pack_bayer(frame)?;
    normalize_and_amplify(
        &packed,
        f64::from(frame.black_level),
        f64::from(frame.saturation),
        frame.ratio,
    )
}

/// sRGB opto-electronic transfer curve on `[0, 1]`.
pub fn srgb_encode(x: f64) -> f64 {
    if x <= 0.0031308 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    }
}

/// Colour filter at mosaic site `(y, x)`: 0 = R, 1 = G, 2 = B.
pub fn rggb_color(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Bilinear demosaic of a normalized RGGB plane into `[3, H, W]`.
///
/// Missing samples are the mean of same-colour sites in the 3×3
/// neighbourhood (in-bounds only), which is the classic bilinear kernel.
pub fn demosaic_bilinear(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let site = rggb_color(y, x);
            for c in 0..3 {
                let v = if c == site {
                    plane[y * w + x]
                } else {
                    let mut acc = 0.0;
                    let mut n = 0usize;
                    for ny in y.saturating_sub(1)..(y + 2).min(h) {
                        for nx in x.saturating_sub(1)..(x + 2).min(w) {
                            if rggb_color(ny, nx) == c {
                                acc += plane[ny * w + nx];
                                n += 1;
                            }
                        }
                    }
                    acc / n as f64
                };
                out[c * h * w + y * w + x] = v;
            }
        }
    }
    out
}

/// Reference ISP: normalize (with the frame's ratio) → bilinear demosaic →
/// white balance → colour correction → clamp → sRGB curve.
pub fn isp_oracle(frame: &RawFrame, profile: &CameraProfile) -> Result<SrgbImage> {
    frame.validate()?;
    let (h, w) = (frame.height, frame.width);
    let black = f64::from(frame.black_level);
    let range = f64::from(frame.saturation) - black;
    let plane: Vec<f64> = frame
        .mosaic
        .iter()
        .map(|&v| ((f64::from(v) - black).max(0.0) * frame.ratio / range).min(1.0))
        .collect();
    let rgb = demosaic_bilinear(&plane, h, w);
    let ccm = profile.correction_matrix()?;
    let n = h * w;
    let mut out = vec![0.0f32; 3 * n];
    for i in 0..n {
        let cam = [
            rgb[i] * profile.wb_gains[0],
            rgb[n + i] * profile.wb_gains[1],
            rgb[2 * n + i] * profile.wb_gains[2],
        ];
        for (c, row) in ccm.iter().enumerate() {
            let lin = row[0] * cam[0] + row[1] * cam[1] + row[2] * cam[2];
            out[c * n + i] = srgb_encode(lin.clamp(0.0, 1.0)) as f32;
        }
    }
    SrgbImage::new(Tensor::new([3, h, w], out)?, BitDomain::Sixteen)
}

/// `round(x · 255) / 255`.
pub fn quantize8(img: &SrgbImage) -> SrgbImage {
    let data = img
        .pixels
        .data()
        .iter()
        .map(|&v| (f64::from(v.clamp(0.0, 1.0)) * 255.0).round() as f32 / 255.0)
        .collect();
    SrgbImage {
        pixels: Tensor::new(img.pixels.shape().to_vec(), data).expect("same shape"),
        domain: BitDomain::Eight,
    }
}

/// Fixed display rendering applied to 16-bit-domain images before 8-bit
/// quantization: per-channel gains followed by a power tone curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostProcess {
    pub gains: [f64; 3],
    pub exponent: f64,
}

impl Default for PostProcess {
    fn default() -> Self {
        PostProcess {
            gains: [1.06, 1.0, 0.94],
            exponent: 0.8,
        }
    }
}

impl PostProcess {
    /// Continuous (unquantized) rendering.
    pub fn render(&self, img: &SrgbImage) -> SrgbImage {
        let (_, h, w) = img.pixels.chw().expect("rank 3");
        let n = h * w;
        let data = img
            .pixels
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let g = self.gains[i / n];
                (f64::from(v) * g).clamp(0.0, 1.0).powf(self.exponent) as f32
            })
            .collect();
        SrgbImage {
            pixels: Tensor::new([3, h, w], data).expect("same shape"),
            domain: BitDomain::Sixteen,
        }
    }

    /// The 8-bit target: `quantize8(render(img))`.
    pub fn to_eight_bit(&self, img: &SrgbImage) -> SrgbImage {
        quantize8(&self.render(img))
    }
}

/// Luma weights; blue is defined as the remainder so the three sum to one.
pub const LUMA_RED: f64 = 0.299;
pub const LUMA_GREEN: f64 = 0.587;
pub fn luma_weights() -> [f64; 3] {
    [LUMA_RED, LUMA_GREEN, 1.0 - LUMA_RED - LUMA_GREEN]
}

/// Differentiable `0.299 R + 0.587 G + 0.114 B` on a `[3, H, W]` node.
pub fn grayscale<T: Real>(g: &mut Graph<T>, img: Var) -> Result<Var> {
    let (c, _, _) = g.value(img).chw()?;
    if c != 3 {
        return Err(Error::dim("grayscale", format!("expected 3 channels, got {c}")));
    }
    let weights: Vec<T> = luma_weights().iter().map(|&v| T::from_f64_lossy(v)).collect();
    let w = g.constant(Tensor::new([1, 3, 1, 1], weights)?);
    g.conv2d(img, w, None, 1, 0)
}

/// Half-resolution camera-native view of a frame: amplified R, mean G, B.
/// Used for raw-domain statistics where no ISP should hide the camera.
pub fn camera_preview(frame: &RawFrame) -> Result<SrgbImage> {
    let input = prepare_input(frame)?;
    let (_, ph, pw) = input.chw()?;
    let n = ph * pw;
    let d = input.data();
    let mut out = Vec::with_capacity(3 * n);
    out.extend_from_slice(&d[..n]);
    out.extend((0..n).map(|i| 0.5 * (d[n + i] + d[2 * n + i])));
    out.extend_from_slice(&d[3 * n..]);
    SrgbImage::new(Tensor::new([3, ph, pw], out)?, BitDomain::Sixteen)
}
