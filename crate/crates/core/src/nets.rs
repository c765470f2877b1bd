//! Model zoo: per-domain encoders, the shared U-Net enhancer with its
//! pixel-shuffle head, and the 16-to-8-bit converter used by the source
//! SSIM loss.
//!
//! Layers only hold [`ParamId`]s; the weights live in the bundle's
//! [`ParamStore`], so two paths that name the same id share storage.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw::{prepare_input, BitDomain, RawFrame, SrgbImage};
use crate::seed::derive_seed;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
const ENHANCER_LEVELS: usize = 5;
const CONVERTER_LEVELS: usize = 3;

/// Training/wiring variant of a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Separate encoders, shared enhancer, cosine + grey SSIM on source.
    Proposed,
    /// Separate encoders and separate 12-channel heads.
    SeparateEncDec,
    /// One encoder for both domains.
    CombinedEncoder,
    /// Proposed wiring with an ℓ1 source loss.
    SourceL1,
    /// Proposed wiring with cosine loss only on source.
    NoSourceSsim,
    /// Single pipeline trained on the k target pairs only.
    TargetOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Proposed,
        Mode::SeparateEncDec,
        Mode::CombinedEncoder,
        Mode::SourceL1,
        Mode::NoSourceSsim,
        Mode::TargetOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Proposed => "proposed",
            Mode::SeparateEncDec => "separate_enc_dec",
            Mode::CombinedEncoder => "combined_encoder",
            Mode::SourceL1 => "source_l1",
            Mode::NoSourceSsim => "no_source_ssim",
            Mode::TargetOnly => "target_only",
        }
    }

    pub fn index(self) -> usize {
        Mode::ALL.iter().position(|&m| m == self).expect("listed")
    }

    pub fn from_index(i: usize) -> Option<Mode> {
        Mode::ALL.get(i).copied()
    }

    /// Whether both domains share one encoder parameter set.
    pub fn shares_encoder(self) -> bool {
        matches!(self, Mode::CombinedEncoder | Mode::TargetOnly)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::Config(format!("unknown domain {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl ConvLayer {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        g.conv2d(x, w, Some(b), 1, self.padding)
    }

    fn forward_lrelu<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Three 3×3 conv + leaky-ReLU layers at full packed resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub layers: Vec<ConvLayer>,
}

impl Encoder {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let (c, _, _) = g.value(x).chw()?;
        if c != 4 {
            return Err(Error::dim("encoder", format!("expected 4 packed channels, got {c}")));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward_lrelu(g, p, h)?;
        }
        Ok(h)
    }
}

/// Encoder-decoder with skip concatenation; returns full-resolution features.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub down: Vec<[ConvLayer; 2]>,
    pub up: Vec<UpLayer>,
    pub up_convs: Vec<[ConvLayer; 2]>,
}

impl UNet {
    pub fn levels(&self) -> usize {
        self.down.len()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let (_, h, w) = g.value(x).chw()?;
        let align = 1 << (self.levels() - 1);
        if h % align != 0 || w % align != 0 {
            return Err(Error::dim(
                "unet",
                format!("extents {h}x{w} must be divisible by {align}"),
            ));
        }
        let mut skips = Vec::with_capacity(self.levels());
        let mut cur = x;
        for (level, [a, b]) in self.down.iter().enumerate() {
            cur = a.forward_lrelu(g, p, cur)?;
            cur = b.forward_lrelu(g, p, cur)?;
            if level + 1 < self.levels() {
                skips.push(cur);
                cur = g.max_pool2(cur)?;
            }
        }
        for (up, [a, b]) in self.up.iter().zip(&self.up_convs) {
            let w = g.param(p, up.weight);
            let bias = g.param(p, up.bias);
            let upsampled = g.conv2d_transpose(cur, w, Some(bias))?;
            let skip = skips.pop().expect("one skip per upsampling");
            cur = g.concat_channels(skip, upsampled)?;
            cur = a.forward_lrelu(g, p, cur)?;
            cur = b.forward_lrelu(g, p, cur)?;
        }
        Ok(cur)
    }
}

/// Final 12-channel projection(s) of the enhancer.
#[derive(Clone, Debug, PartialEq)]
pub enum Heads {
    Shared(ConvLayer),
    PerDomain { source: ConvLayer, target: ConvLayer },
}

impl Heads {
    pub fn for_domain(&self, domain: Domain) -> &ConvLayer {
        match (self, domain) {
            (Heads::Shared(h), _) => h,
            (Heads::PerDomain { source, .. }, Domain::Source) => source,
            (Heads::PerDomain { target, .. }, Domain::Target) => target,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Converter {
    pub unet: UNet,
    pub head: ConvLayer,
}

/// All networks of one experiment plus the weights they index.
#[derive(Clone, Debug)]
pub struct ModelBundle<T = f32> {
    pub params: ParamStore<T>,
    pub encoder_source: Encoder,
    pub encoder_target: Encoder,
    pub enhancer: UNet,
    pub heads: Heads,
    pub converter: Converter,
    pub mode: Mode,
    pub channel_base: usize,
    /// Set once the converter holds pretrained weights.
    pub converter_ready: bool,
}

/// Encoder widths: `{16, 32, 64} · cb / 16`.
pub fn encoder_widths(cb: usize) -> [usize; 3] {
    [cb, 2 * cb, 4 * cb]
}

/// Enhancer U-Net widths: `{32, ..., 512} · cb / 32`.
pub fn enhancer_widths(cb: usize) -> [usize; ENHANCER_LEVELS] {
    [cb, 2 * cb, 4 * cb, 8 * cb, 16 * cb]
}

/// Converter U-Net widths: `{16, 32, 64} · cb / 16`.
pub fn converter_widths(cb: usize) -> [usize; CONVERTER_LEVELS] {
    [cb, 2 * cb, 4 * cb]
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    seed: u64,
}

impl<T: Real> Builder<'_, T> {
    fn normal(&mut self, name: &str, shape: [usize; 4], std: f64) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name));
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_lossy(z * std)
        });
        self.params.insert(name, t)
    }

    fn zeros(&mut self, name: &str, n: usize) -> Result<ParamId> {
        self.params.insert(name, Tensor::zeros([n]))
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<ConvLayer> {
        let fan_in = (c_in * k * k) as f64;
        Ok(ConvLayer {
            weight: self.normal(&format!("{name}.weight"), [c_out, c_in, k, k], (2.0 / fan_in).sqrt())?,
            bias: self.zeros(&format!("{name}.bias"), c_out)?,
            padding: k / 2,
        })
    }

    fn up(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<UpLayer> {
        // every output pixel of a stride-2 2x2 transpose sees c_in inputs
        Ok(UpLayer {
            weight: self.normal(&format!("{name}.weight"), [c_in, c_out, 2, 2], (2.0 / c_in as f64).sqrt())?,
            bias: self.zeros(&format!("{name}.bias"), c_out)?,
        })
    }

    fn encoder(&mut self, name: &str, cb: usize) -> Result<Encoder> {
        let widths = encoder_widths(cb);
        let mut layers = Vec::new();
        let mut c_in = 4;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(self.conv(&format!("{name}.conv{i}"), c_in, w, 3)?);
            c_in = w;
        }
        Ok(Encoder { layers })
    }

    fn unet(&mut self, name: &str, c_in: usize, widths: &[usize]) -> Result<UNet> {
        let mut down = Vec::new();
        let mut prev = c_in;
        for (l, &w) in widths.iter().enumerate() {
            down.push([
                self.conv(&format!("{name}.down{l}.a"), prev, w, 3)?,
                self.conv(&format!("{name}.down{l}.b"), w, w, 3)?,
            ]);
            prev = w;
        }
        let mut up = Vec::new();
        let mut up_convs = Vec::new();
        for l in (0..widths.len() - 1).rev() {
            let w = widths[l];
            up.push(self.up(&format!("{name}.up{l}"), widths[l + 1], w)?);
            up_convs.push([
                self.conv(&format!("{name}.up{l}.a"), 2 * w, w, 3)?,
                self.conv(&format!("{name}.up{l}.b"), w, w, 3)?,
            ]);
        }
        Ok(UNet { down, up, up_convs })
    }
}

impl<T: Real> ModelBundle<T> {
    /// Fresh bundle; every tensor is seeded from `(seed, parameter name)`,
    /// so networks common to two modes start from identical weights.
    pub fn init(seed: u64, mode: Mode, channel_base: usize) -> Result<Self> {
        if channel_base < 4 {
            return Err(Error::Config(format!("channel_base must be >= 4, got {channel_base}")));
        }
        let cb = channel_base;
        let mut params = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            seed,
        };
        let (encoder_source, encoder_target) = match mode {
            Mode::CombinedEncoder => {
                let e = b.encoder("enc_shared", cb)?;
                (e.clone(), e)
            }
            Mode::TargetOnly => {
                let e = b.encoder("enc_target", cb)?;
                (e.clone(), e)
            }
            _ => (b.encoder("enc_source", cb)?, b.encoder("enc_target", cb)?),
        };
        let feat = encoder_widths(cb)[2];
        let ew = enhancer_widths(cb);
        let enhancer = b.unet("enhancer", feat, &ew)?;
        let heads = if mode == Mode::SeparateEncDec {
            Heads::PerDomain {
                source: b.conv("head_source", ew[0], 12, 3)?,
                target: b.conv("head_target", ew[0], 12, 3)?,
            }
        } else {
            Heads::Shared(b.conv("head", ew[0], 12, 3)?)
        };
        let cw = converter_widths(cb);
        let converter = Converter {
            unet: b.unet("converter", 3, &cw)?,
            head: b.conv("converter.head", cw[0], 3, 1)?,
        };
        Ok(ModelBundle {
            params,
            encoder_source,
            encoder_target,
            enhancer,
            heads,
            converter,
            mode,
            channel_base,
            converter_ready: false,
        })
    }

    pub fn encoder(&self, domain: Domain) -> &Encoder {
        match domain {
            Domain::Source => &self.encoder_source,
            Domain::Target => &self.encoder_target,
        }
    }

    /// Same structure and ids in another precision.
    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            params: self.params.cast(),
            encoder_source: self.encoder_source.clone(),
            encoder_target: self.encoder_target.clone(),
            enhancer: self.enhancer.clone(),
            heads: self.heads.clone(),
            converter: self.converter.clone(),
            mode: self.mode,
            channel_base: self.channel_base,
            converter_ready: self.converter_ready,
        }
    }

    pub fn is_converter_param(&self, id: ParamId) -> bool {
        self.params.get(id).name.starts_with("converter.")
    }

    pub fn converter_ids(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.is_converter_param(id)).collect()
    }

    pub fn set_converter_trainable(&mut self, trainable: bool) {
        for id in self.converter_ids() {
            self.params.set_trainable(id, trainable);
        }
    }

    /// Total scalar count over every network in the bundle.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Encoder → U-Net → 12-channel head → depth-to-space → clamp.
    /// `input` is a packed, normalized, amplified `[4, h, w]` node.
    pub fn pipeline_forward(&self, g: &mut Graph<T>, input: Var, domain: Domain) -> Result<Var> {
        let feats = self.encoder(domain).forward(g, &self.params, input)?;
        self.enhancer_forward(g, feats, domain)
    }

    /// Enhancer on encoder features `[C, h, w]`; output `[3, 2h, 2w]` in `[0, 1]`.
    pub fn enhancer_forward(&self, g: &mut Graph<T>, feats: Var, domain: Domain) -> Result<Var> {
        let body = self.enhancer.forward(g, &self.params, feats)?;
        let pred = self.heads.for_domain(domain).forward(g, &self.params, body)?;
        let rgb = g.depth_to_space(pred, 2)?;
        Ok(g.clamp01(rgb))
    }

    /// 16-bit-domain `[3, H, W]` → continuous 8-bit-domain prediction in `(0, 1)`.
    pub fn converter_forward(&self, g: &mut Graph<T>, img: Var) -> Result<Var> {
        let (c, _, _) = g.value(img).chw()?;
        if c != 3 {
            return Err(Error::dim("converter", format!("expected 3 channels, got {c}")));
        }
        let body = self.converter.unet.forward(g, &self.params, img)?;
        let out = self.converter.head.forward(g, &self.params, body)?;
        Ok(g.sigmoid(out))
    }
}

impl ModelBundle<f32> {
    /// Inference on a whole frame: `H×W` raw in, `3×H×W` sRGB out.
    pub fn full_forward(&self, frame: &RawFrame, domain: Domain) -> Result<SrgbImage> {
        if frame.height % 32 != 0 || frame.width % 32 != 0 {
            return Err(Error::dim(
                "full_forward",
                format!(
                    "frame {}x{} must have extents divisible by 32",
                    frame.height, frame.width
                ),
            ));
        }
        let input = prepare_input(frame)?;
        let mut g = Graph::new();
        let x = g.constant(input);
        let y = self.pipeline_forward(&mut g, x, domain)?;
        SrgbImage::new(g.value(y).clone(), BitDomain::Sixteen)
    }

    /// Converter applied outside any training graph.
    pub fn convert(&self, img: &SrgbImage) -> Result<SrgbImage> {
        let mut g = Graph::new();
        let x = g.constant(img.pixels.clone());
        let y = self.converter_forward(&mut g, x)?;
        SrgbImage::new(g.value(y).clone(), BitDomain::Eight)
    }
}

/// Convenience for `ModelBundle::<f32>::init`.
pub fn init_bundle(seed: u64, mode: Mode, channel_base: usize) -> Result<ModelBundle<f32>> {
    ModelBundle::init(seed, mode, channel_base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_round_trips_through_str_and_index() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(Mode::from_index(m.index()), Some(m));
        }
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = init_bundle(3, Mode::Proposed, 4).unwrap();
        let b = init_bundle(3, Mode::Proposed, 4).unwrap();
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn combined_encoder_allocates_one_set() {
        let b = init_bundle(0, Mode::CombinedEncoder, 4).unwrap();
        assert_eq!(b.encoder_source, b.encoder_target);
        let enc_params = b.params.iter().filter(|(_, p)| p.name.starts_with("enc_")).count();
        assert_eq!(enc_params, 6);
        let p = init_bundle(0, Mode::Proposed, 4).unwrap();
        assert_ne!(p.encoder_source, p.encoder_target);
    }

    #[test]
    fn separate_mode_has_two_heads() {
        let b = init_bundle(0, Mode::SeparateEncDec, 4).unwrap();
        assert!(matches!(b.heads, Heads::PerDomain { .. }));
        let p = init_bundle(0, Mode::Proposed, 4).unwrap();
        assert!(matches!(p.heads, Heads::Shared(_)));
    }

    #[test]
    fn small_channel_base_rejected() {
        assert!(init_bundle(0, Mode::Proposed, 3).is_err());
    }

    #[test]
    fn shared_modules_start_identical_across_modes() {
        let p = init_bundle(9, Mode::Proposed, 4).unwrap();
        let s = init_bundle(9, Mode::SourceL1, 4).unwrap();
        let t = init_bundle(9, Mode::TargetOnly, 4).unwrap();
        for name in ["enhancer.down0.a.weight", "enc_target.conv0.weight", "head.weight"] {
            let v = p.params.value(p.params.id(name).unwrap());
            assert_eq!(v, s.params.value(s.params.id(name).unwrap()));
            assert_eq!(v, t.params.value(t.params.id(name).unwrap()));
        }
    }

    #[test]
    fn encoder_rejects_wrong_channels() {
        let b = init_bundle(0, Mode::Proposed, 4).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([3, 16, 16]));
        assert!(matches!(
            b.encoder_source.forward(&mut g, &b.params, x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn enhancer_rejects_indivisible_extents() {
        let b = init_bundle(0, Mode::Proposed, 4).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([16, 24, 24]));
        assert!(b.enhancer_forward(&mut g, x, Domain::Target).is_err());
    }
}
