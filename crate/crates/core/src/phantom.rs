//! Procedural bitewing phantoms: nested tooth anatomy rendered into a
//! grayscale radiograph with a matching class mask.

use image::GrayImage;
use thiserror::Error;

use crate::codec::{
    IndexMask, BACKGROUND, CARIES, CROWN, DENTIN, ENAMEL, NUM_CLASSES, PULP, RESTORATION,
    ROOT_CANAL,
};
use crate::parallel;
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
}

/// One training or evaluation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub radiograph: GrayImage,
    pub mask: IndexMask,
}

impl SamplePair {
    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }
}

/// Per-tooth probabilities of the optional structures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassProbabilities {
    pub caries: f64,
    pub crown: f64,
    pub restoration: f64,
    pub root_canal: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub teeth_count_range: (usize, usize),
    pub class_probabilities: ClassProbabilities,
    /// Standard deviation of additive noise, in grayscale levels.
    pub noise_sigma: f64,
    pub blur_radius: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            teeth_count_range: (2, 4),
            class_probabilities: ClassProbabilities {
                caries: 0.5,
                crown: 0.25,
                restoration: 0.3,
                root_canal: 0.3,
            },
            noise_sigma: 12.0,
            blur_radius: 1,
        }
    }
}

impl PhantomSpec {
    /// Small phantoms for desk-scale experiments (64 px, two or three teeth).
    pub fn tiny() -> Self {
        Self { image_size: 64, teeth_count_range: (2, 3), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.image_size < 32 {
            return bad(format!("image_size {} < 32", self.image_size));
        }
        let (lo, hi) = self.teeth_count_range;
        if lo < 1 || hi < lo {
            return bad(format!("teeth_count_range ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        let p = &self.class_probabilities;
        for (name, v) in [
            ("caries", p.caries),
            ("crown", p.crown),
            ("restoration", p.restoration),
            ("root_canal", p.root_canal),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} probability {v} outside [0, 1]"));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if self.blur_radius >= self.image_size / 2 {
            return bad(format!("blur_radius {} too large", self.blur_radius));
        }
        Ok(())
    }
}

/// Mean grayscale level per class before blur and noise. Background is the
/// darkest level and enamel the brightest.
pub const CLASS_INTENSITY: [f64; NUM_CLASSES] = [
    25.0,  // background
    95.0,  // caries
    240.0, // enamel
    140.0, // dentin
    75.0,  // pulp
    225.0, // crown
    210.0, // restoration
    180.0, // root canal
];

/// Points within `radius` of the vertical segment `x = cx, y in [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub cx: f64,
    pub y0: f64,
    pub y1: f64,
    pub radius: f64,
}

impl Capsule {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let yc = y.clamp(self.y0, self.y1);
        let (dx, dy) = (x - self.cx, y - yc);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / self.ax;
        let v = (y - self.cy) / self.ay;
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Analytic shapes making up one tooth.
#[derive(Debug, Clone, PartialEq)]
pub struct ToothGeometry {
    pub enamel: Capsule,
    pub dentin: Capsule,
    pub pulp: Capsule,
    /// Crown cap: this capsule restricted to `y < enamel.y0`.
    pub crown: Option<Capsule>,
    pub root_canal: Option<Rect>,
    pub restoration: Option<Ellipse>,
    pub caries: Option<Ellipse>,
}

impl ToothGeometry {
    pub fn in_crown(&self, x: f64, y: f64) -> bool {
        self.crown.is_some_and(|c| y < self.enamel.y0 && c.contains(x, y))
    }

    /// Paints this tooth's classes at a point onto `current`.
    fn classify(&self, x: f64, y: f64, current: u8) -> u8 {
        let in_enamel = self.enamel.contains(x, y);
        let in_crown = self.in_crown(x, y);
        if !in_enamel && !in_crown {
            return current;
        }
        let in_dentin = self.dentin.contains(x, y);
        let mut c = if in_dentin { DENTIN } else if in_crown { CROWN } else { ENAMEL };
        if self.pulp.contains(x, y) {
            c = PULP;
        }
        if self.root_canal.is_some_and(|r| r.contains(x, y)) {
            c = ROOT_CANAL;
        }
        if self.restoration.is_some_and(|r| r.contains(x, y)) {
            c = RESTORATION;
        }
        if (c == ENAMEL || c == DENTIN) && self.caries.is_some_and(|e| e.contains(x, y)) {
            c = CARIES;
        }
        c
    }
}

/// Draws tooth geometry for one phantom. Consumes the random stream in a
/// fixed order so the layout depends only on `(seed, spec)`.
pub fn sample_teeth(rng: &mut Rng, spec: &PhantomSpec) -> Vec<ToothGeometry> {
    let s = spec.image_size as f64;
    let (lo, hi) = spec.teeth_count_range;
    let n = rng.int_range(lo as i64, hi as i64) as usize;
    let slot = s / n as f64;
    let probs = spec.class_probabilities;
    (0..n)
        .map(|i| {
            let cx = slot * (i as f64 + 0.5) + rng.range(-0.05, 0.05) * slot;
            let r = slot * rng.range(0.30, 0.36);
            let top = s * rng.range(0.10, 0.20);
            let bottom = s * rng.range(0.80, 0.92);
            let y0 = top + r;
            let y1 = (bottom - r).max(y0);
            let enamel = Capsule { cx, y0, y1, radius: r };
            let dentin = Capsule { cx, y0, y1, radius: r * 0.72 };
            let pulp = Capsule { cx, y0: (y0 + r * 0.3).min(y1), y1, radius: r * 0.34 };

            let has_crown = rng.bernoulli(probs.crown);
            let has_canal = rng.bernoulli(probs.root_canal);
            let has_restoration = rng.bernoulli(probs.restoration);
            let has_caries = rng.bernoulli(probs.caries);

            let crown = has_crown.then_some(Capsule { radius: r * 1.08, ..enamel });
            let root_canal = has_canal.then(|| {
                let hw = (r * 0.14).max(1.0).min(r * 0.3);
                Rect { x0: cx - hw, x1: cx + hw, y0: 0.5 * (pulp.y0 + pulp.y1), y1: pulp.y1 }
            });
            let restoration = has_restoration.then(|| Ellipse {
                cx: cx + rng.range(-0.3, 0.3) * r,
                cy: y0 - rng.range(0.3, 0.6) * r,
                ax: rng.range(0.30, 0.45) * r,
                ay: rng.range(0.20, 0.35) * r,
            });
            let caries = has_caries.then(|| {
                let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                let angle = rng.range(0.0, std::f64::consts::FRAC_PI_2);
                let rad = 0.86 * r;
                let along = rng.range(0.0, 1.0) * (y1 - y0);
                // Either on the rounded top or down the side wall.
                let (ex, ey) = if rng.bernoulli(0.5) {
                    (cx + side * rad * angle.cos(), y0 - rad * angle.sin())
                } else {
                    (cx + side * rad, y0 + along)
                };
                Ellipse {
                    cx: ex,
                    cy: ey,
                    ax: (rng.range(0.18, 0.28) * r).max(1.2),
                    ay: (rng.range(0.18, 0.28) * r).max(1.2),
                }
            });
            ToothGeometry { enamel, dentin, pulp, crown, root_canal, restoration, caries }
        })
        .collect()
}

/// Rasterizes geometry at pixel centers.
pub fn render_mask(teeth: &[ToothGeometry], size: usize) -> IndexMask {
    let mut mask = IndexMask::filled(size, size, BACKGROUND);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let c = teeth.iter().fold(BACKGROUND, |c, t| t.classify(fx, fy, c));
            mask.set(x, y, c);
        }
    }
    mask
}

fn box_blur(values: &[f64], size: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return values.to_vec();
    }
    let r = radius as isize;
    let n = size as isize;
    let window = (2 * radius + 1) as f64;
    let clamp = |i: isize| i.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..size {
        for x in 0..size {
            let s: f64 = (-r..=r).map(|d| values[y * size + clamp(x as isize + d)]).sum();
            tmp[y * size + x] = s / window;
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..size {
        for x in 0..size {
            let s: f64 = (-r..=r).map(|d| tmp[clamp(y as isize + d) * size + x]).sum();
            out[y * size + x] = s / window;
        }
    }
    out
}

/// Class intensities, then box blur, then additive Gaussian noise.
pub fn render_radiograph(mask: &IndexMask, spec: &PhantomSpec, rng: &mut Rng) -> GrayImage {
    let size = mask.width();
    let base: Vec<f64> = mask.data().iter().map(|&c| CLASS_INTENSITY[c as usize]).collect();
    let blurred = box_blur(&base, size, spec.blur_radius);
    let pixels = blurred
        .iter()
        .map(|&v| (v + spec.noise_sigma * rng.normal()).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::from_raw(size as u32, size as u32, pixels).expect("buffer sized to image")
}

fn phantom_from_seed(id: String, seed: u64, spec: &PhantomSpec) -> SamplePair {
    let mut rng = Rng::new(seed);
    let teeth = sample_teeth(&mut rng, spec);
    let mask = render_mask(&teeth, spec.image_size);
    let radiograph = render_radiograph(&mask, spec, &mut rng);
    SamplePair { id, radiograph, mask }
}

pub fn generate_phantom(seed: u64, spec: &PhantomSpec) -> Result<SamplePair, PhantomError> {
    spec.validate()?;
    Ok(phantom_from_seed(format!("phantom-{seed}"), seed, spec))
}

/// Seed used for element `index` of a generated dataset.
pub fn dataset_item_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

pub fn generate_dataset(
    seed: u64,
    spec: &PhantomSpec,
    n: usize,
) -> Result<Vec<SamplePair>, PhantomError> {
    spec.validate()?;
    if n == 0 {
        return Err(PhantomError::InvalidSpec("dataset size must be at least 1".into()));
    }
    Ok(parallel::map_indices(n, |i| {
        phantom_from_seed(format!("phantom-{seed}-{i}"), dataset_item_seed(seed, i), spec)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn teeth_for(seed: u64, spec: &PhantomSpec) -> Vec<ToothGeometry> {
        sample_teeth(&mut Rng::new(seed), spec)
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(1, &spec).unwrap();
        let b = generate_phantom(1, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(2, &spec).unwrap();
        assert_ne!(a.mask, c.mask);
    }

    #[test]
    fn forced_caries_appears() {
        let mut spec = PhantomSpec::default();
        spec.class_probabilities.caries = 1.0;
        spec.teeth_count_range = (3, 3);
        let p = generate_phantom(7, &spec).unwrap();
        let count = p.mask.data().iter().filter(|&&c| c == CARIES).count();
        assert!(count > 0);
    }

    #[test]
    fn dataset_ids_and_prefix_stability() {
        let spec = PhantomSpec::tiny();
        let big = generate_dataset(3, &spec, 40).unwrap();
        assert_eq!(big.len(), 40);
        assert_eq!(big[5].id, "phantom-3-5");
        let small = generate_dataset(3, &spec, 10).unwrap();
        assert_eq!(&big[..10], &small[..]);

        let single = generate_dataset(3, &spec, 1).unwrap();
        let direct = generate_phantom(dataset_item_seed(3, 0), &spec).unwrap();
        assert_eq!(single[0].mask, direct.mask);
        assert_eq!(single[0].radiograph, direct.radiograph);
    }

    #[test]
    fn invalid_specs() {
        let s = PhantomSpec { image_size: 16, ..PhantomSpec::default() };
        assert!(generate_phantom(0, &s).is_err());
        let s = PhantomSpec { teeth_count_range: (0, 2), ..PhantomSpec::default() };
        assert!(s.validate().is_err());
        let mut s = PhantomSpec::default();
        s.class_probabilities.crown = 1.5;
        assert!(s.validate().is_err());
        assert!(generate_dataset(0, &PhantomSpec::default(), 0).is_err());
    }

    #[test]
    fn anatomy_is_nested() {
        for seed in 0..30u64 {
            let spec = PhantomSpec {
                class_probabilities: ClassProbabilities {
                    caries: 0.5,
                    crown: 0.5,
                    restoration: 0.5,
                    root_canal: 0.5,
                },
                ..PhantomSpec::tiny()
            };
            let teeth = teeth_for(seed, &spec);
            let mask = render_mask(&teeth, spec.image_size);
            let size = spec.image_size;
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    for t in &teeth {
                        if t.pulp.contains(fx, fy) {
                            assert!(t.dentin.contains(fx, fy));
                        }
                        if t.dentin.contains(fx, fy) {
                            assert!(t.enamel.contains(fx, fy) || t.in_crown(fx, fy));
                        }
                        if let Some(rc) = t.root_canal {
                            if rc.contains(fx, fy) {
                                assert!(t.pulp.contains(fx, fy));
                            }
                        }
                    }
                    let c = mask.get(x, y);
                    if c == PULP {
                        assert!(teeth.iter().any(|t| t.dentin.contains(fx, fy)));
                    }
                    if c == DENTIN {
                        assert!(teeth
                            .iter()
                            .any(|t| t.enamel.contains(fx, fy) || t.in_crown(fx, fy)));
                    }
                    assert!((c as usize) < NUM_CLASSES);
                }
            }
        }
    }

    #[test]
    fn radiograph_matches_mask_shape() {
        let p = generate_phantom(11, &PhantomSpec::tiny()).unwrap();
        assert_eq!(p.radiograph.dimensions(), (64, 64));
        assert_eq!((p.width(), p.height()), (64, 64));
    }

    #[test]
    fn parallel_equals_sequential() {
        let spec = PhantomSpec::tiny();
        let par = generate_dataset(5, &spec, 6).unwrap();
        let seq: Vec<_> = (0..6)
            .map(|i| phantom_from_seed(format!("phantom-5-{i}"), dataset_item_seed(5, i), &spec))
            .collect();
        assert_eq!(par, seq);
    }
}
