//! Dataset layout, image decoding, RAW storage and Bayer packing.
//!
//! Layout: `<root>/<track>/<split>/{srgb,raw}/<id>.png` plus `<split>/meta.json`.
//! sRGB is 8-bit RGB; RAW is 16-bit RGB with the value scaled by 65535.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isp::{make_synthetic_pair, IspParams};
use crate::ops::{pixel_shuffle, pixel_unshuffle, to_f64_vec};

pub const SRGB_DIR: &str = "srgb";
pub const RAW_DIR: &str = "raw";
pub const PARAMS_DIR: &str = "params";
pub const META_FILE: &str = "meta.json";
pub const RAW_BIT_DEPTH: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    S7,
    P20,
    Synth,
}

impl Track {
    pub fn dir_name(self) -> &'static str {
        match self {
            Track::S7 => "s7",
            Track::P20 => "p20",
            Track::Synth => "synth",
        }
    }

    /// Fixed `(height, width)` of challenge tracks; synthetic data may be any size.
    pub fn expected_dims(self) -> Option<(usize, usize)> {
        match self {
            Track::S7 => Some((504, 504)),
            Track::P20 => Some((496, 496)),
            Track::Synth => None,
        }
    }
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Track {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s7" => Ok(Track::S7),
            "p20" => Ok(Track::P20),
            "synth" => Ok(Track::Synth),
            other => Err(Error::Config(format!("unknown track `{other}` (expected s7, p20 or synth)"))),
        }
    }
}

/// Sidecar record describing a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub track: Track,
    pub srgb_bit_depth: u32,
    pub raw_bit_depth: u32,
    pub channel_order: String,
    pub count: usize,
}

impl SplitMeta {
    pub fn new(track: Track, count: usize) -> Self {
        Self {
            track,
            srgb_bit_depth: 8,
            raw_bit_depth: RAW_BIT_DEPTH,
            channel_order: "RGB".into(),
            count,
        }
    }

    pub fn write(&self, split_dir: &Path) -> Result<()> {
        let path = split_dir.join(META_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(split_dir: &Path) -> Result<Self> {
        let path = split_dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEntry {
    pub id: String,
    pub srgb: PathBuf,
    pub raw: PathBuf,
}

/// Matched sRGB/RAW files of one split, sorted by id.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub track: Track,
    pub split_dir: PathBuf,
    pub pairs: Vec<PairEntry>,
}

pub fn split_dir(root: &Path, track: Track, split: &str) -> PathBuf {
    root.join(track.dir_name()).join(split)
}

impl DatasetIndex {
    /// Indexes `<root>/<track>/<split>`; every sRGB file needs a RAW file with the same id.
    pub fn open(root: &Path, track: Track, split: &str) -> Result<Self> {
        let dir = split_dir(root, track, split);
        let srgb_dir = dir.join(SRGB_DIR);
        let raw_dir = dir.join(RAW_DIR);
        let mut pairs = Vec::new();
        for entry in fs::read_dir(&srgb_dir).map_err(|e| Error::io(&srgb_dir, e))? {
            let path = entry.map_err(|e| Error::io(&srgb_dir, e))?.path();
            if !path.is_file() || path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let id = match path.file_stem().and_then(|s| s.to_str()) {
                Some(id) => id.to_string(),
                None => continue,
            };
            let raw = raw_dir.join(format!("{id}.png"));
            if !raw.is_file() {
                return Err(Error::io(
                    &raw,
                    std::io::Error::new(std::io::ErrorKind::NotFound, format!("no RAW file for `{id}`")),
                ));
            }
            pairs.push(PairEntry { id, srgb: path, raw });
        }
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self {
            track,
            split_dir: dir,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stored ISP parameters of a synthetic pair, if present.
    pub fn isp_params(&self, entry: &PairEntry) -> Result<Option<IspParams>> {
        let path = self.split_dir.join(PARAMS_DIR).join(format!("{}.json", entry.id));
        if !path.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }
}

fn check_dims(path: &Path, track: Track, h: usize, w: usize) -> Result<()> {
    if let Some((eh, ew)) = track.expected_dims() {
        if (h, w) != (eh, ew) {
            return Err(Error::Dimensions {
                path: path.to_path_buf(),
                expected: format!("{eh}x{ew}x3"),
                found: format!("{h}x{w}x3"),
            });
        }
    }
    Ok(())
}

fn planar(interleaved: impl Iterator<Item = f32>, h: usize, w: usize) -> Result<Tensor> {
    let hwc: Vec<f32> = interleaved.collect();
    Ok(Tensor::from_vec(hwc, (h, w, 3), &Device::Cpu)?.permute((2, 0, 1))?.contiguous()?)
}

/// Decodes an 8-bit sRGB image to `(3, H, W)` f32 in `[0, 1]`.
pub fn load_srgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    planar(img.into_raw().into_iter().map(|v| v as f32 / 255.0), h, w)
}

/// Decodes a 16-bit RAW image to `(3, H, W)` f32 in `[0, 1]`.
pub fn load_raw(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    planar(img.into_raw().into_iter().map(|v| v as f32 / 65535.0), h, w)
}

/// Loads one pair, checking both images against the track's dimensions and each other.
pub fn load_pair(entry: &PairEntry, track: Track) -> Result<(Tensor, Tensor)> {
    let srgb = load_srgb(&entry.srgb)?;
    let (_, h, w) = srgb.dims3()?;
    check_dims(&entry.srgb, track, h, w)?;
    let raw = load_raw(&entry.raw)?;
    let (_, rh, rw) = raw.dims3()?;
    if (rh, rw) != (h, w) {
        return Err(Error::Dimensions {
            path: entry.raw.clone(),
            expected: format!("{h}x{w}x3"),
            found: format!("{rh}x{rw}x3"),
        });
    }
    Ok((srgb, raw))
}

/// Interleaved `H·W·3` values of a `(3, H, W)` or `(1, 3, H, W)` image.
fn interleaved(img: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let img = match img.rank() {
        4 if img.dims()[0] == 1 => img.squeeze(0)?,
        _ => img.clone(),
    };
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            op: "save_image",
            lhs: img.dims().to_vec(),
            rhs: vec![3, h, w],
        });
    }
    Ok((h, w, to_f64_vec(&img.permute((1, 2, 0))?)?))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

pub fn save_srgb(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w, px) = interleaved(img)?;
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, px.iter().map(|&v| quantize(v, 255.0) as u8).collect())
            .expect("buffer length matches dimensions");
    ensure_parent(path)?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_raw(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w, px) = interleaved(img)?;
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, px.iter().map(|&v| quantize(v, 65535.0) as u16).collect())
            .expect("buffer length matches dimensions");
    ensure_parent(path)?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Gamma-brightened 8-bit preview of a linear RAW image.
pub fn save_raw_visualization(raw: &Tensor, path: &Path) -> Result<()> {
    let preview = raw.clamp(0.0, 1.0)?.to_dtype(DType::F64)?.powf(1.0 / 2.2)?;
    save_srgb(&preview, path)
}

fn bayer_dims(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Indivisible {
            op,
            height: h,
            width: w,
            divisor: 2,
        });
    }
    Ok(())
}

/// `(B, 1, H, W)` RGGB mosaic to `(B, 4, H/2, W/2)` planes in R, G, G, B order.
pub fn pack_bayer(mosaic: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = mosaic.dims4()?;
    if c != 1 {
        return Err(Error::ShapeMismatch {
            op: "pack_bayer",
            lhs: mosaic.dims().to_vec(),
            rhs: vec![b, 1, h, w],
        });
    }
    bayer_dims("pack_bayer", h, w)?;
    pixel_unshuffle(mosaic, 2)
}

/// Inverse of [`pack_bayer`].
pub fn unpack_bayer(planes: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = planes.dims4()?;
    if c != 4 {
        return Err(Error::ShapeMismatch {
            op: "unpack_bayer",
            lhs: planes.dims().to_vec(),
            rhs: vec![b, 4, h, w],
        });
    }
    pixel_shuffle(planes, 2)
}

/// Per-pair seeds of a synthetic dataset.
pub fn synthetic_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

/// Writes `count` synthetic pairs of `size x size` under `<root>/synth/<split>`.
pub fn write_synthetic_split(root: &Path, split: &str, seed: u64, count: usize, size: usize) -> Result<DatasetIndex> {
    let dir = split_dir(root, Track::Synth, split);
    for sub in [SRGB_DIR, RAW_DIR, PARAMS_DIR] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, s) in synthetic_seeds(seed, count).into_iter().enumerate() {
        let id = format!("{i:04}");
        let (srgb, raw, params) = make_synthetic_pair(s, size)?;
        save_srgb(&srgb, &dir.join(SRGB_DIR).join(format!("{id}.png")))?;
        save_raw(&raw, &dir.join(RAW_DIR).join(format!("{id}.png")))?;
        let path = dir.join(PARAMS_DIR).join(format!("{id}.json"));
        fs::write(&path, serde_json::to_string_pretty(&params)? + "\n").map_err(|e| Error::io(&path, e))?;
    }
    SplitMeta::new(Track::Synth, count).write(&dir)?;
    DatasetIndex::open(root, Track::Synth, split)
}

/// Decoded pairs held in memory as `(3, H, W)` tensors, in index order.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub ids: Vec<String>,
    pub srgb: Vec<Tensor>,
    pub raw: Vec<Tensor>,
    /// Ground-truth ISP parameters when known (synthetic data).
    pub params: Vec<Option<IspParams>>,
}

impl PairSet {
    pub fn load(index: &DatasetIndex) -> Result<Self> {
        let mut set = Self::empty();
        for entry in &index.pairs {
            let (s, r) = load_pair(entry, index.track)?;
            set.ids.push(entry.id.clone());
            set.srgb.push(s);
            set.raw.push(r);
            set.params.push(index.isp_params(entry)?);
        }
        Ok(set)
    }

    /// In-memory synthetic pairs using the same seeds as [`write_synthetic_split`], quantized
    /// exactly as storage would.
    pub fn synthetic(seed: u64, count: usize, size: usize) -> Result<Self> {
        let mut set = Self::empty();
        for (i, s) in synthetic_seeds(seed, count).into_iter().enumerate() {
            let (srgb, raw, params) = make_synthetic_pair(s, size)?;
            let q = |t: &Tensor, max: f64| -> Result<Tensor> {
                Ok(((t.clamp(0.0, 1.0)? * max)?.round()? / max)?.squeeze(0)?.to_dtype(DType::F32)?)
            };
            set.ids.push(format!("{i:04}"));
            set.srgb.push(q(&srgb, 255.0)?);
            set.raw.push(q(&raw, 65535.0)?);
            set.params.push(Some(params));
        }
        Ok(set)
    }

    fn empty() -> Self {
        Self {
            ids: Vec::new(),
            srgb: Vec::new(),
            raw: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stacks the selected pairs into `(B, 3, H, W)` sRGB and RAW batches.
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<(Tensor, Tensor)> {
        let s: Vec<&Tensor> = indices.iter().map(|&i| &self.srgb[i]).collect();
        let r: Vec<&Tensor> = indices.iter().map(|&i| &self.raw[i]).collect();
        Ok((Tensor::stack(&s, 0)?.to_dtype(dtype)?, Tensor::stack(&r, 0)?.to_dtype(dtype)?))
    }
}
