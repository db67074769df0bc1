//! Paired-image loading, resizing, augmentation and dataset expansion.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use thiserror::Error;

use crate::codec::{decode_mask, encode_mask, ClassPalette, CodecError, IndexMask};
use crate::parallel;
use crate::phantom::SamplePair;
use crate::rng::{derive_seed, hash_str, Rng};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("image {0} has no mask with the same name")]
    MissingMask(String),
    #[error("image and mask for {0} have different dimensions")]
    DimensionMismatch(String),
    #[error("mask {name}: {source}")]
    Codec {
        name: String,
        #[source]
        source: CodecError,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Sorted `*.png` file names directly inside `dir`.
pub fn png_names(dir: &Path) -> Result<Vec<String>, PipelineError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn read_gray(path: &Path) -> Result<GrayImage, PipelineError> {
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|source| PipelineError::Image { path: path.to_path_buf(), source })
}

pub fn read_mask(path: &Path, palette: &ClassPalette) -> Result<IndexMask, PipelineError> {
    let rgb = image::open(path)
        .map_err(|source| PipelineError::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    encode_mask(&rgb, palette, 0).map_err(|source| PipelineError::Codec {
        name: path.display().to_string(),
        source,
    })
}

pub fn write_mask(path: &Path, mask: &IndexMask, palette: &ClassPalette) -> Result<(), PipelineError> {
    decode_mask(mask, palette)
        .save(path)
        .map_err(|source| PipelineError::Image { path: path.to_path_buf(), source })
}

pub fn write_gray(path: &Path, image: &GrayImage) -> Result<(), PipelineError> {
    image
        .save(path)
        .map_err(|source| PipelineError::Image { path: path.to_path_buf(), source })
}

/// Reads `<image_dir>/*.png` and the same-named files in `mask_dir`, sorted by name.
pub fn load_pairs(
    image_dir: &Path,
    mask_dir: &Path,
    palette: &ClassPalette,
) -> Result<Vec<SamplePair>, PipelineError> {
    let names = png_names(image_dir)?;
    names
        .into_iter()
        .map(|name| {
            let mask_path = mask_dir.join(&name);
            if !mask_path.is_file() {
                return Err(PipelineError::MissingMask(name));
            }
            let radiograph = read_gray(&image_dir.join(&name))?;
            let mask = read_mask(&mask_path, palette)?;
            if radiograph.dimensions() != (mask.width() as u32, mask.height() as u32) {
                return Err(PipelineError::DimensionMismatch(name));
            }
            let id = name[..name.len() - 4].to_string();
            Ok(SamplePair { id, radiograph, mask })
        })
        .collect()
}

/// Writes pairs as `<root>/images/<id>.png` and `<root>/masks/<id>.png`.
pub fn save_pairs(root: &Path, pairs: &[SamplePair], palette: &ClassPalette) -> Result<(), PipelineError> {
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&masks).map_err(io_err(&masks))?;
    for p in pairs {
        write_gray(&images.join(format!("{}.png", p.id)), &p.radiograph)?;
        write_mask(&masks.join(format!("{}.png", p.id)), &p.mask, palette)?;
    }
    Ok(())
}

/// Source coordinate for output pixel `dst` when resampling `src_len -> dst_len`
/// with aligned pixel centers.
fn source_center(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    if (sw, sh) == (width, height) {
        return img.clone();
    }
    let src = img.as_raw();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = source_center(y, sh, height).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..width {
            let fx = source_center(x, sw, width).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let p = |xx: usize, yy: usize| f64::from(src[yy * sw + xx]);
            let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
            let bot = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
            out.push((top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::from_raw(width as u32, height as u32, out).expect("sized buffer")
}

/// Nearest-neighbor resampling; class ids are never blended.
pub fn resize_nearest(mask: &IndexMask, width: usize, height: usize) -> IndexMask {
    let (sw, sh) = (mask.width(), mask.height());
    if (sw, sh) == (width, height) {
        return mask.clone();
    }
    let pick = |d: usize, s: usize, dl: usize| (((d as f64 + 0.5) * s as f64 / dl as f64) as usize).min(s - 1);
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = pick(y, sh, height);
        for x in 0..width {
            data.push(mask.get(pick(x, sw, width), sy));
        }
    }
    IndexMask::new(width, height, data).expect("resampled ids stay valid")
}

pub fn resize_pair(pair: &SamplePair, size: usize) -> SamplePair {
    SamplePair {
        id: pair.id.clone(),
        radiograph: resize_bilinear(&pair.radiograph, size, size),
        mask: resize_nearest(&pair.mask, size, size),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub rotation_degrees: Vec<f64>,
    pub allow_hflip: bool,
    pub allow_vflip: bool,
    /// Chance of each allowed flip being applied.
    pub flip_probability: f64,
    pub max_translate: usize,
    /// Maximum absolute intensity shift on the `[-1, 1]` scale.
    pub intensity_delta: f64,
    pub expansion_factor: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_degrees: vec![0.0, 5.0, -5.0, 10.0, -10.0, 90.0, 180.0, 270.0],
            allow_hflip: true,
            allow_vflip: true,
            flip_probability: 0.5,
            max_translate: 16,
            intensity_delta: 0.1,
            expansion_factor: 360,
        }
    }
}

impl AugmentSpec {
    /// No-op augmentation.
    pub fn identity() -> Self {
        Self {
            rotation_degrees: vec![0.0],
            allow_hflip: false,
            allow_vflip: false,
            flip_probability: 0.5,
            max_translate: 0,
            intensity_delta: 0.0,
            expansion_factor: 1,
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidSpec(m));
        if self.expansion_factor < 1 {
            return bad("expansion_factor must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.intensity_delta) {
            return bad(format!("intensity_delta {} outside [0, 1]", self.intensity_delta));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad(format!("flip_probability {} outside [0, 1]", self.flip_probability));
        }
        if self.max_translate >= image_size {
            return bad(format!("max_translate {} >= image size {image_size}", self.max_translate));
        }
        if self.rotation_degrees.is_empty() || self.rotation_degrees.iter().any(|a| !a.is_finite()) {
            return bad("rotation_degrees must be a non-empty list of finite angles".into());
        }
        Ok(())
    }
}

/// Concrete transform drawn for one augmented sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Clockwise in image coordinates (y pointing down).
    pub rotation_degrees: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub translate: (i64, i64),
    pub intensity_delta: f64,
}

impl AugmentParams {
    pub fn sample(spec: &AugmentSpec, id: &str, seed: u64) -> Self {
        let mut rng = Rng::new(derive_seed(seed, &[hash_str(id)]));
        let idx = rng.int_range(0, spec.rotation_degrees.len() as i64 - 1) as usize;
        let hflip = spec.allow_hflip && rng.bernoulli(spec.flip_probability);
        let vflip = spec.allow_vflip && rng.bernoulli(spec.flip_probability);
        let t = spec.max_translate as i64;
        let translate = (rng.int_range(-t, t), rng.int_range(-t, t));
        let intensity_delta = if spec.intensity_delta > 0.0 {
            rng.range(-spec.intensity_delta, spec.intensity_delta)
        } else {
            0.0
        };
        Self { rotation_degrees: spec.rotation_degrees[idx], hflip, vflip, translate, intensity_delta }
    }

    /// Maps an output pixel center back to continuous source coordinates.
    /// Forward order is flip, rotate about the center, then translate.
    pub fn source_of(&self, x: usize, y: usize, width: usize, height: usize) -> (f64, f64) {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let px = x as f64 - self.translate.0 as f64 - cx;
        let py = y as f64 - self.translate.1 as f64 - cy;
        let (s, c) = exact_sin_cos(self.rotation_degrees);
        // inverse rotation
        let mut qx = c * px + s * py;
        let mut qy = -s * px + c * py;
        if self.hflip {
            qx = -qx;
        }
        if self.vflip {
            qy = -qy;
        }
        (qx + cx, qy + cy)
    }

    pub fn is_identity(&self) -> bool {
        exact_sin_cos(self.rotation_degrees) == (0.0, 1.0)
            && !self.hflip
            && !self.vflip
            && self.translate == (0, 0)
            && self.intensity_delta == 0.0
    }
}

fn exact_sin_cos(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    match r {
        0.0 => (0.0, 1.0),
        90.0 => (1.0, 0.0),
        180.0 => (0.0, -1.0),
        270.0 => (-1.0, 0.0),
        _ => r.to_radians().sin_cos(),
    }
}

/// Nearest-neighbor warp of any per-pixel value grid, `fill` outside the source.
pub fn warp_nearest<T: Copy>(
    src: &[T],
    width: usize,
    height: usize,
    params: &AugmentParams,
    fill: T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = params.source_of(x, y, width, height);
            let (rx, ry) = (sx.round(), sy.round());
            if rx >= 0.0 && ry >= 0.0 && rx < width as f64 && ry < height as f64 {
                out.push(src[ry as usize * width + rx as usize]);
            } else {
                out.push(fill);
            }
        }
    }
    out
}

fn warp_bilinear(src: &[u8], width: usize, height: usize, params: &AugmentParams, fill: f64) -> Vec<f64> {
    let sample = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            fill
        } else {
            f64::from(src[y as usize * width + x as usize])
        }
    };
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = params.source_of(x, y, width, height);
            // snap tiny rounding noise so integer sources stay exact
            let sx = if (sx - sx.round()).abs() < 1e-9 { sx.round() } else { sx };
            let sy = if (sy - sy.round()).abs() < 1e-9 { sy.round() } else { sy };
            let (x0, y0) = (sx.floor(), sy.floor());
            let (wx, wy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let top = sample(x0, y0) * (1.0 - wx) + sample(x0 + 1, y0) * wx;
            let bot = sample(x0, y0 + 1) * (1.0 - wx) + sample(x0 + 1, y0 + 1) * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

pub fn apply_augment(pair: &SamplePair, params: &AugmentParams) -> SamplePair {
    let (w, h) = (pair.width(), pair.height());
    let mask_data = warp_nearest(pair.mask.data(), w, h, params, 0u8);
    let darkest = pair.radiograph.as_raw().iter().copied().min().unwrap_or(0);
    let shift = params.intensity_delta * 127.5;
    let gray: Vec<u8> = warp_bilinear(pair.radiograph.as_raw(), w, h, params, f64::from(darkest))
        .into_iter()
        .map(|v| (v + shift).round().clamp(0.0, 255.0) as u8)
        .collect();
    SamplePair {
        id: pair.id.clone(),
        radiograph: GrayImage::from_raw(w as u32, h as u32, gray).expect("sized buffer"),
        mask: IndexMask::new(w, h, mask_data).expect("warped ids stay valid"),
    }
}

/// Random geometric and intensity augmentation, deterministic per `(pair.id, seed)`.
pub fn augment(pair: &SamplePair, spec: &AugmentSpec, seed: u64) -> SamplePair {
    apply_augment(pair, &AugmentParams::sample(spec, &pair.id, seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SamplePair>,
    pub input_size: usize,
}

impl Dataset {
    /// Resizes every pair to `input_size`.
    pub fn prepare(pairs: &[SamplePair], input_size: usize) -> Self {
        let pairs = parallel::map_indices(pairs.len(), |i| resize_pair(&pairs[i], input_size));
        Self { pairs, input_size }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn expansion_seed(seed: u64, index: usize, copy: usize) -> u64 {
    derive_seed(seed, &[index as u64, copy as u64])
}

/// `|pairs| * expansion_factor` samples; copy 0 of each pair is the original.
pub fn expand_dataset(
    pairs: &[SamplePair],
    spec: &AugmentSpec,
    seed: u64,
) -> Result<Dataset, PipelineError> {
    let input_size = pairs.first().map_or(0, |p| p.width());
    if let Some(first) = pairs.first() {
        spec.validate(first.width().min(first.height()))?;
    } else if spec.expansion_factor < 1 {
        return Err(PipelineError::InvalidSpec("expansion_factor must be >= 1".into()));
    }
    let factor = spec.expansion_factor;
    let out = parallel::map_indices(pairs.len() * factor, |j| {
        let (i, k) = (j / factor, j % factor);
        let src = &pairs[i];
        if k == 0 && factor == 1 {
            return src.clone();
        }
        let mut aug = if k == 0 {
            src.clone()
        } else {
            augment(src, spec, expansion_seed(seed, i, k))
        };
        aug.id = format!("{}-aug{k:03}", src.id);
        aug
    });
    Ok(Dataset { pairs: out, input_size })
}
