//! Class palette and conversions between RGB masks, class-index masks and
//! the `[-1, 1]` float range seen by the networks.

use image::{GrayImage, RgbImage};
use thiserror::Error;

pub const NUM_CLASSES: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("pixel ({x}, {y}) has color {rgb:?} which is not within tolerance of any palette entry")]
    UnknownColor { x: u32, y: u32, rgb: [u8; 3] },
    #[error("mask dimensions must be positive, got {width}x{height}")]
    EmptyMask { width: usize, height: usize },
    #[error("mask data length {len} does not match {width}x{height}")]
    LengthMismatch { width: usize, height: usize, len: usize },
    #[error("class id {0} is out of range")]
    InvalidClass(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaletteEntry {
    pub class_id: u8,
    pub name: &'static str,
    pub rgb: [u8; 3],
}

/// The fixed 8-entry class table. Entry `i` always has `class_id == i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    entries: [PaletteEntry; NUM_CLASSES],
}

pub const BACKGROUND: u8 = 0;
pub const CARIES: u8 = 1;
pub const ENAMEL: u8 = 2;
pub const DENTIN: u8 = 3;
pub const PULP: u8 = 4;
pub const CROWN: u8 = 5;
pub const RESTORATION: u8 = 6;
pub const ROOT_CANAL: u8 = 7;

pub fn default_palette() -> ClassPalette {
    let e = |class_id, name, rgb| PaletteEntry { class_id, name, rgb };
    ClassPalette {
        entries: [
            e(BACKGROUND, "background", [0, 0, 0]),
            e(CARIES, "caries", [0, 0, 255]),
            e(ENAMEL, "enamel", [0, 255, 0]),
            e(DENTIN, "dentin", [255, 255, 0]),
            e(PULP, "pulp", [255, 0, 0]),
            e(CROWN, "crown", [255, 224, 189]),
            e(RESTORATION, "restoration", [255, 165, 0]),
            e(ROOT_CANAL, "root_canal", [0, 255, 255]),
        ],
    }
}

impl Default for ClassPalette {
    fn default() -> Self {
        default_palette()
    }
}

impl ClassPalette {
    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn color(&self, class_id: u8) -> [u8; 3] {
        self.entries[class_id as usize].rgb
    }

    pub fn name(&self, class_id: u8) -> &'static str {
        self.entries[class_id as usize].name
    }

    pub fn class_by_name(&self, name: &str) -> Option<u8> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.class_id)
    }

    /// Nearest palette entry by squared Euclidean RGB distance, lowest id on ties.
    pub fn nearest(&self, rgb: [u8; 3]) -> (u8, u32) {
        let mut best = (0u8, u32::MAX);
        for e in &self.entries {
            let d: u32 = (0..3)
                .map(|k| {
                    let diff = i32::from(rgb[k]) - i32::from(e.rgb[k]);
                    (diff * diff) as u32
                })
                .sum();
            if d < best.1 {
                best = (e.class_id, d);
            }
        }
        best
    }
}

/// Row-major map of class ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl IndexMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, CodecError> {
        if width == 0 || height == 0 {
            return Err(CodecError::EmptyMask { width, height });
        }
        if data.len() != width * height {
            return Err(CodecError::LengthMismatch { width, height, len: data.len() });
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(CodecError::InvalidClass(bad));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, class_id: u8) -> Self {
        assert!(width > 0 && height > 0 && (class_id as usize) < NUM_CLASSES);
        Self { width, height, data: vec![class_id; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class_id: u8) {
        assert!((class_id as usize) < NUM_CLASSES);
        self.data[y * self.width + x] = class_id;
    }

    /// Which classes occur at least once.
    pub fn present_classes(&self) -> [bool; NUM_CLASSES] {
        let mut out = [false; NUM_CLASSES];
        for &v in &self.data {
            out[v as usize] = true;
        }
        out
    }
}

pub fn encode_mask(
    image: &RgbImage,
    palette: &ClassPalette,
    tolerance: u32,
) -> Result<IndexMask, CodecError> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(CodecError::EmptyMask { width: w as usize, height: h as usize });
    }
    let tol_sq = u64::from(tolerance) * u64::from(tolerance);
    let mut data = Vec::with_capacity((w * h) as usize);
    for (x, y, px) in image.enumerate_pixels() {
        let (class_id, dist_sq) = palette.nearest(px.0);
        if u64::from(dist_sq) > tol_sq {
            return Err(CodecError::UnknownColor { x, y, rgb: px.0 });
        }
        data.push(class_id);
    }
    Ok(IndexMask { width: w as usize, height: h as usize, data })
}

pub fn decode_mask(mask: &IndexMask, palette: &ClassPalette) -> RgbImage {
    let mut img = RgbImage::new(mask.width as u32, mask.height as u32);
    for (px, &c) in img.pixels_mut().zip(&mask.data) {
        px.0 = palette.color(c);
    }
    img
}

pub fn normalize_value(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

/// Clamp to `[-1, 1]` and map back to a byte, rounding half up.
pub fn denormalize_value(v: f64) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 127.5 + 0.5).floor().min(255.0) as u8
}

pub fn normalize(values: &[u8]) -> Vec<f64> {
    values.iter().map(|&v| normalize_value(v)).collect()
}

pub fn denormalize(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| denormalize_value(v)).collect()
}

/// Grayscale image as a `1 x H x W` float plane in `[-1, 1]`.
pub fn normalize_gray(image: &GrayImage) -> Vec<f64> {
    normalize(image.as_raw())
}

/// Planar `3 x H x W` float representation of a mask in `[-1, 1]`.
pub fn mask_to_planes(mask: &IndexMask, palette: &ClassPalette) -> Vec<f64> {
    let n = mask.width * mask.height;
    let mut out = vec![0.0; 3 * n];
    for (i, &c) in mask.data.iter().enumerate() {
        let rgb = palette.color(c);
        for k in 0..3 {
            out[k * n + i] = normalize_value(rgb[k]);
        }
    }
    out
}

/// Turns planar `3 x H x W` generator output into class decisions.
pub fn quantize_output(
    planes: &[f64],
    width: usize,
    height: usize,
    palette: &ClassPalette,
) -> IndexMask {
    let n = width * height;
    assert_eq!(planes.len(), 3 * n, "expected 3 planes of {width}x{height}");
    let data = (0..n)
        .map(|i| {
            let rgb = [
                denormalize_value(planes[i]),
                denormalize_value(planes[n + i]),
                denormalize_value(planes[2 * n + i]),
            ];
            palette.nearest(rgb).0
        })
        .collect();
    IndexMask { width, height, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn brute_nearest(rgb: [u8; 3]) -> u8 {
        // Independent scan in f64 over every palette color.
        let p = default_palette();
        let mut best = (0u8, f64::INFINITY);
        for id in 0..8u8 {
            let c = p.color(id);
            let d = ((rgb[0] as f64 - c[0] as f64).powi(2)
                + (rgb[1] as f64 - c[1] as f64).powi(2)
                + (rgb[2] as f64 - c[2] as f64).powi(2))
            .sqrt();
            if d < best.1 {
                best = (id, d);
            }
        }
        best.0
    }

    #[test]
    fn palette_layout() {
        let p = default_palette();
        let names: Vec<_> = p.entries().iter().map(|e| e.name).collect();
        assert_eq!(
            names,
            ["background", "caries", "enamel", "dentin", "pulp", "crown", "restoration", "root_canal"]
        );
        for (i, e) in p.entries().iter().enumerate() {
            assert_eq!(e.class_id as usize, i);
        }
        assert_eq!(p.entries()[0].rgb, [0, 0, 0]);
        // caries is blue
        assert_eq!(p.color(CARIES), [0, 0, 255]);
        for a in 0..8 {
            for b in (a + 1)..8 {
                assert_ne!(p.entries()[a].rgb, p.entries()[b].rgb);
            }
        }
    }

    #[test]
    fn encode_examples() {
        let p = default_palette();
        let one = |rgb, tol| encode_mask(&RgbImage::from_pixel(1, 1, Rgb(rgb)), &p, tol);
        assert_eq!(one([0, 0, 255], 0).unwrap().get(0, 0), CARIES);
        assert_eq!(one([0, 0, 0], 0).unwrap().get(0, 0), BACKGROUND);
        assert_eq!(brute_nearest([10, 0, 250]), CARIES);
        assert_eq!(one([10, 0, 250], 32).unwrap().get(0, 0), CARIES);
        assert!(matches!(
            one([10, 0, 250], 0),
            Err(CodecError::UnknownColor { x: 0, y: 0, rgb: [10, 0, 250] })
        ));
    }

    #[test]
    fn decode_examples() {
        let p = default_palette();
        let zero = IndexMask::filled(3, 2, 0);
        assert!(decode_mask(&zero, &p).pixels().all(|px| px.0 == [0, 0, 0]));

        let m = IndexMask::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let img = decode_mask(&m, &p);
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 255]);
        assert_eq!(img.get_pixel(1, 0).0, [0, 255, 0]);
        assert_eq!(img.get_pixel(0, 1).0, [255, 255, 0]);
        assert_eq!(img.get_pixel(1, 1).0, [255, 0, 0]);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_value(0), -1.0);
        assert_eq!(normalize_value(255), 1.0);
        assert!((normalize_value(128) - (128.0 / 127.5 - 1.0)).abs() < 1e-15);
        assert!((normalize_value(128) - 0.003921568627).abs() < 1e-9);
        assert_eq!(denormalize_value(-1.0), 0);
        assert_eq!(denormalize_value(1.37), 255);
        assert_eq!(denormalize_value(0.0), 128);
    }

    #[test]
    fn byte_normalization_is_lossless() {
        for v in 0..=255u8 {
            assert_eq!(denormalize_value(normalize_value(v)), v);
        }
    }

    #[test]
    fn quantize_examples() {
        let p = default_palette();
        let q = |rgb: [f64; 3]| quantize_output(&rgb, 1, 1, &p).get(0, 0);
        assert_eq!(q([-1.0, -1.0, -1.0]), BACKGROUND);
        assert_eq!(q([1.0, -1.0, -1.0]), PULP);
        let bytes = [0.9, 0.7, 0.4].map(denormalize_value);
        assert_eq!(brute_nearest(bytes), CROWN);
        assert_eq!(q([0.9, 0.7, 0.4]), CROWN);
    }

    #[test]
    fn invalid_masks_rejected() {
        assert!(IndexMask::new(0, 3, vec![]).is_err());
        assert!(IndexMask::new(2, 2, vec![0, 1, 2]).is_err());
        assert_eq!(IndexMask::new(1, 1, vec![8]), Err(CodecError::InvalidClass(8)));
    }

    fn arb_mask() -> impl Strategy<Value = IndexMask> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0u8..8, w * h)
                .prop_map(move |d| IndexMask::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(m in arb_mask()) {
            let p = default_palette();
            prop_assert_eq!(encode_mask(&decode_mask(&m, &p), &p, 0).unwrap(), m);
        }

        #[test]
        fn quantize_is_idempotent(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let p = default_palette();
            let mut r = crate::rng::Rng::new(seed);
            let planes: Vec<f64> = (0..3 * w * h).map(|_| r.range(-1.2, 1.2)).collect();
            let first = quantize_output(&planes, w, h, &p);
            let again = quantize_output(&mask_to_planes(&first, &p), w, h, &p);
            prop_assert_eq!(first, again);
        }

        #[test]
        fn tolerance_zero_rejects_off_palette(rgb in any::<[u8; 3]>()) {
            let p = default_palette();
            let img = RgbImage::from_pixel(1, 1, Rgb(rgb));
            let on_palette = p.entries().iter().any(|e| e.rgb == rgb);
            prop_assert_eq!(encode_mask(&img, &p, 0).is_ok(), on_palette);
        }
    }
}
