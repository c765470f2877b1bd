//! On-disk formats: binary PGM/PPM, scene directories with JSON sidecars,
//! and the checksummed checkpoint container.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Mode, ModelBundle};
use crate::raw::{BayerPattern, BitDomain, RawFrame, SrgbImage};
use crate::synth::ScenePair;
use crate::tensor::Tensor;

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// A decoded binary netpbm image (P5 grey or P6 RGB), samples interleaved
/// per pixel as stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Netpbm {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Netpbm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for &s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Netpbm> {
        let mut cur = Cursor { bytes, pos: 0, path };
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(cur.err("expected magic P5 or P6")),
        };
        cur.pos = 2;
        let width = cur.header_number("width")?;
        let height = cur.header_number("height")?;
        let maxval = cur.header_number("maxval")?;
        if width == 0 || height == 0 {
            return Err(cur.err("image extents must be positive"));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(cur.err(&format!("maxval {maxval} outside 1..=65535")));
        }
        match bytes.get(cur.pos) {
            Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(cur.err("expected a single whitespace byte after maxval")),
        }
        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| cur.err("image extents overflow"))?;
        let width_bytes = if maxval > 255 { 2 } else { 1 };
        let need = count * width_bytes;
        let data = &bytes[cur.pos..];
        if data.len() != need {
            return Err(cur.err(&format!("expected {need} sample bytes, found {}", data.len())));
        }
        let samples: Vec<u16> = if width_bytes == 2 {
            data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            data.iter().map(|&b| u16::from(b)).collect()
        };
        if let Some(i) = samples.iter().position(|&s| usize::from(s) > maxval) {
            cur.pos += i * width_bytes;
            return Err(cur.err(&format!("sample exceeds maxval {maxval}")));
        }
        Ok(Netpbm {
            channels,
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn read(path: &Path) -> Result<Netpbm> {
        Netpbm::decode(&read_file(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, what: &str) -> Error {
        Error::format(self.path, format!("byte {}: {what}", self.pos))
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn header_number(&mut self, what: &str) -> Result<usize> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(self.err(&format!("expected whitespace before {what}")));
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(&format!("expected decimal {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(self.path, format!("byte {start}: {what} out of range")))
    }
}

/// 16-bit planar image → P6 samples (maxval 65535 for `Sixteen`, 255 for `Eight`).
pub fn srgb_to_netpbm(img: &SrgbImage) -> Netpbm {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let maxval: u16 = match img.domain {
        BitDomain::Sixteen => 65535,
        BitDomain::Eight => 255,
    };
    let d = img.pixels.data();
    let mut samples = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            let v = f64::from(d[c * n + i]).clamp(0.0, 1.0);
            samples.push((v * f64::from(maxval)).round() as u16);
        }
    }
    Netpbm {
        channels: 3,
        width: w,
        height: h,
        maxval,
        samples,
    }
}

pub fn netpbm_to_srgb(p: &Netpbm, domain: BitDomain, path: &Path) -> Result<SrgbImage> {
    if p.channels != 3 {
        return Err(Error::format(path, "expected an RGB (P6) image"));
    }
    let n = p.width * p.height;
    let mut data = vec![0.0f32; 3 * n];
    let m = f32::from(p.maxval);
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = f32::from(p.samples[3 * i + c]) / m;
        }
    }
    SrgbImage::new(Tensor::new([3, p.height, p.width], data)?, domain)
}

/// JSON sidecar of a stored scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub black_level: u32,
    pub saturation: u32,
    pub bayer_pattern: BayerPattern,
    pub exposure_s: f64,
    pub ratio: f64,
    pub camera_id: String,
    pub scene_id: String,
}

pub const SHORT_FILE: &str = "short.pgm";
pub const META_FILE: &str = "meta.json";
pub const GT_FILE: &str = "gt.ppm";
pub const GT_PP_FILE: &str = "gt_pp.ppm";

pub fn save_scene(dir: &Path, pair: &ScenePair) -> Result<()> {
    let f = &pair.short;
    f.validate()?;
    if pair.gt.height() != f.height || pair.gt.width() != f.width {
        return Err(Error::dim("save_scene", "ground truth extents differ from the mosaic"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mosaic = Netpbm {
        channels: 1,
        width: f.width,
        height: f.height,
        maxval: 65535,
        samples: f.mosaic.clone(),
    };
    mosaic.write(&dir.join(SHORT_FILE))?;
    let meta = SceneMeta {
        black_level: f.black_level,
        saturation: f.saturation,
        bayer_pattern: f.bayer_pattern,
        exposure_s: f.exposure_s,
        ratio: f.ratio,
        camera_id: f.camera_id.clone(),
        scene_id: pair.scene_id.clone(),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("plain struct serializes");
    write_atomic(&dir.join(META_FILE), &json)?;
    srgb_to_netpbm(&pair.gt).write(&dir.join(GT_FILE))?;
    srgb_to_netpbm(&pair.gt_pp).write(&dir.join(GT_PP_FILE))?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<SceneMeta> {
    let path = dir.join(META_FILE);
    let bytes = read_file(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))
}

/// Reads only the short exposure and its sidecar.
pub fn load_frame(dir: &Path) -> Result<(RawFrame, SceneMeta)> {
    let meta = load_meta(dir)?;
    let path = dir.join(SHORT_FILE);
    let pgm = Netpbm::read(&path)?;
    if pgm.channels != 1 {
        return Err(Error::format(&path, "expected a greyscale (P5) mosaic"));
    }
    let frame = RawFrame {
        height: pgm.height,
        width: pgm.width,
        mosaic: pgm.samples,
        black_level: meta.black_level,
        saturation: meta.saturation,
        bayer_pattern: meta.bayer_pattern,
        exposure_s: meta.exposure_s,
        ratio: meta.ratio,
        camera_id: meta.camera_id.clone(),
    };
    frame.validate().map_err(|e| Error::format(&path, e.to_string()))?;
    Ok((frame, meta))
}

pub fn load_scene(dir: &Path) -> Result<ScenePair> {
    let (short, meta) = load_frame(dir)?;
    let gt_path = dir.join(GT_FILE);
    let gt = netpbm_to_srgb(&Netpbm::read(&gt_path)?, BitDomain::Sixteen, &gt_path)?;
    let pp_path = dir.join(GT_PP_FILE);
    let gt_pp = netpbm_to_srgb(&Netpbm::read(&pp_path)?, BitDomain::Eight, &pp_path)?;
    for (img, p) in [(&gt, &gt_path), (&gt_pp, &pp_path)] {
        if img.height() != short.height || img.width() != short.width {
            return Err(Error::format(p, "extents differ from the mosaic"));
        }
    }
    Ok(ScenePair {
        short,
        gt,
        gt_pp,
        scene_id: meta.scene_id,
    })
}

/// Scene directories are named `NNNN-<scene id>` so listing order is
/// generation order.
pub fn save_dataset(dir: &Path, pairs: &[ScenePair]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let sub = dir.join(format!("{i:04}-{}", p.scene_id));
            save_scene(&sub, p).map(|_| sub)
        })
        .collect()
}

/// Sub-directories holding a scene sidecar, sorted by name.
pub fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.join(META_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ScenePair>> {
    scene_dirs(dir)?.iter().map(|d| load_scene(d)).collect()
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NTA1";
const META_MODE: &str = "meta.mode";
const META_CHANNEL_BASE: &str = "meta.channel_base";
const META_CONVERTER_READY: &str = "meta.converter_ready";

struct Entry<'a> {
    name: &'a str,
    shape: &'a [usize],
    data: &'a [f32],
}

pub fn encode_checkpoint(bundle: &ModelBundle<f32>) -> Vec<u8> {
    let mode = [bundle.mode.index() as f32];
    let cb = [bundle.channel_base as f32];
    let ready = [if bundle.converter_ready { 1.0 } else { 0.0 }];
    let mut entries = vec![
        Entry { name: META_MODE, shape: &[], data: &mode },
        Entry { name: META_CHANNEL_BASE, shape: &[], data: &cb },
        Entry { name: META_CONVERTER_READY, shape: &[], data: &ready },
    ];
    for (_, p) in bundle.params.iter() {
        entries.push(Entry {
            name: &p.name,
            shape: p.value.shape(),
            data: p.value.data(),
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in &entries {
        out.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u64).to_le_bytes());
        for &d in e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("byte {}: unexpected end of entries", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("byte {}: value too large", self.pos - 8)))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelBundle<f32>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 + 4 {
        return Err(Error::Corruption {
            path: path.into(),
            detail: format!("file is truncated ({} bytes)", bytes.len()),
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "byte 0: bad magic, expected NTA1"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corruption {
            path: path.into(),
            detail: format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
        });
    }
    let mut r = Reader { bytes: body, pos: 4, path };
    let count = r.u64()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u64()?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, format!("byte {at}: entry name is not utf-8")))?
            .to_string();
        let rank = r.u64()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(path, format!("entry {name}: extents overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::format(path, "entry too large"))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
        tensors.push((name, shape, data));
    }
    if r.pos != body.len() {
        return Err(Error::format(path, format!("byte {}: trailing bytes after entries", r.pos)));
    }
    let scalar = |key: &str| -> Result<f32> {
        tensors
            .iter()
            .find(|(n, s, _)| n == key && s.is_empty())
            .map(|(_, _, d)| d[0])
            .ok_or_else(|| Error::format(path, format!("missing scalar entry {key}")))
    };
    let mode_idx = scalar(META_MODE)?;
    let mode = Mode::from_index(mode_idx as usize)
        .filter(|_| mode_idx.fract() == 0.0 && mode_idx >= 0.0)
        .ok_or_else(|| Error::format(path, format!("unknown mode index {mode_idx}")))?;
    let cb = scalar(META_CHANNEL_BASE)?;
    if !(cb >= 4.0) || cb.fract() != 0.0 {
        return Err(Error::format(path, format!("invalid channel_base {cb}")));
    }
    let ready = scalar(META_CONVERTER_READY)? != 0.0;
    let mut bundle = ModelBundle::<f32>::init(0, mode, cb as usize)?;
    bundle.converter_ready = ready;
    let mut seen = 0;
    for (name, shape, data) in tensors {
        if name.starts_with("meta.") {
            continue;
        }
        let id = bundle
            .params
            .id(&name)
            .ok_or_else(|| Error::format(path, format!("unexpected parameter {name} for mode {mode}")))?;
        let p = bundle.params.get_mut(id);
        if p.value.shape() != shape.as_slice() {
            return Err(Error::format(
                path,
                format!("parameter {name}: shape {shape:?}, expected {:?}", p.value.shape()),
            ));
        }
        p.value = Tensor::new(shape, data)?;
        seen += 1;
    }
    if seen != bundle.params.len() {
        return Err(Error::format(
            path,
            format!("{} of {} parameters present", seen, bundle.params.len()),
        ));
    }
    Ok(bundle)
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle<f32>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(bundle))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle<f32>> {
    decode_checkpoint(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_bundle;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn netpbm_round_trip_both_depths() {
        for maxval in [255u16, 65535] {
            let img = Netpbm {
                channels: 3,
                width: 3,
                height: 2,
                maxval,
                samples: (0..18).map(|i| (i * 97 % (usize::from(maxval) + 1)) as u16).collect(),
            };
            assert_eq!(Netpbm::decode(&img.encode(), p()).unwrap(), img);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5 # grey\n2 # w\n1\n255\n\x01\x02";
        let img = Netpbm::decode(bytes, p()).unwrap();
        assert_eq!(img.samples, vec![1, 2]);
    }

    #[test]
    fn malformed_header_reports_offset() {
        let err = Netpbm::decode(b"P5\n2 x\n255\n", p()).unwrap_err().to_string();
        assert!(err.contains("byte 5"), "{err}");
        let err = Netpbm::decode(b"P7\n", p()).unwrap_err().to_string();
        assert!(err.contains("byte 0"), "{err}");
        let err = Netpbm::decode(b"P5\n2 1\n255\n\x01", p()).unwrap_err().to_string();
        assert!(err.contains("sample bytes"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let b = init_bundle(5, Mode::SeparateEncDec, 4).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&b), p()).unwrap();
        assert_eq!(back.mode, b.mode);
        assert_eq!(back.channel_base, 4);
        for ((_, x), (_, y)) in b.params.iter().zip(back.params.iter()) {
            assert_eq!(x.name, y.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.value), bits(&y.value));
        }
    }

    #[test]
    fn checkpoint_errors_are_classified() {
        let bytes = encode_checkpoint(&init_bundle(1, Mode::Proposed, 4).unwrap());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, p()), Err(Error::Format { .. })));
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x01;
        assert!(matches!(decode_checkpoint(&flipped, p()), Err(Error::Corruption { .. })));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() / 2], p()),
            Err(Error::Corruption { .. })
        ));
        assert!(matches!(decode_checkpoint(&bytes[..6], p()), Err(Error::Corruption { .. })));
    }
}
