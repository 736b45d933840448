//! Training-time augmentation. Geometric transforms move the image and its
//! landmarks together; photometric transforms and cutout touch pixels only.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::{Border, Image, LandmarkSet, Point};
use crate::rng::{self, Rng};
use crate::{Error, Result};

const MAX_REDRAWS: usize = 10;
const MAX_OUT_OF_FRAME: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub geometric_prob: f64,
    pub rotation_deg: f64,
    /// Maximum translation as a fraction of the image side.
    pub translation_frac: f64,
    pub scale_range: (f64, f64),
    pub shear_deg: f64,
    /// Maximum magnitude of the projective row entries, per pixel.
    pub projective: f64,
    pub gamma_prob: f64,
    pub gamma_range: (f64, f64),
    pub salt_pepper_prob: f64,
    pub salt_pepper_max: f64,
    pub median_prob: f64,
    pub median_kernel: usize,
    pub blur_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub noise_prob: f64,
    pub noise_sigma_max: f64,
    pub cutout_prob: f64,
    pub cutout_fraction: f64,
    pub jitter_px: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            geometric_prob: 0.5,
            rotation_deg: 10.0,
            translation_frac: 0.05,
            scale_range: (0.9, 1.1),
            shear_deg: 5.0,
            projective: 1e-4,
            gamma_prob: 0.3,
            gamma_range: (0.5, 2.0),
            salt_pepper_prob: 0.1,
            salt_pepper_max: 0.02,
            median_prob: 0.1,
            median_kernel: 3,
            blur_prob: 0.1,
            blur_kernel: 5,
            blur_sigma: 1.0,
            noise_prob: 0.3,
            noise_sigma_max: 0.02,
            cutout_prob: 0.5,
            cutout_fraction: 0.1,
            jitter_px: 1.0,
        }
    }
}

impl AugmentationConfig {
    /// A configuration that changes nothing.
    pub fn disabled() -> Self {
        Self {
            geometric_prob: 0.0,
            gamma_prob: 0.0,
            salt_pepper_prob: 0.0,
            median_prob: 0.0,
            blur_prob: 0.0,
            noise_prob: 0.0,
            cutout_prob: 0.0,
            jitter_px: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("geometric_prob", self.geometric_prob),
            ("gamma_prob", self.gamma_prob),
            ("salt_pepper_prob", self.salt_pepper_prob),
            ("median_prob", self.median_prob),
            ("blur_prob", self.blur_prob),
            ("noise_prob", self.noise_prob),
            ("cutout_prob", self.cutout_prob),
            ("salt_pepper_max", self.salt_pepper_max),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "augment.{name} = {p} must lie in [0, 1]"
                )));
            }
        }
        let nonneg = [
            ("rotation_deg", self.rotation_deg),
            ("translation_frac", self.translation_frac),
            ("shear_deg", self.shear_deg),
            ("projective", self.projective),
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma_max", self.noise_sigma_max),
            ("jitter_px", self.jitter_px),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("augment.{name} = {v} must be >= 0")));
            }
        }
        for (name, (lo, hi)) in [
            ("scale_range", self.scale_range),
            ("gamma_range", self.gamma_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "augment.{name} = ({lo}, {hi}) must be positive and ordered"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.cutout_fraction) {
            return Err(Error::Config(format!(
                "augment.cutout_fraction = {} must lie in [0, 1)",
                self.cutout_fraction
            )));
        }
        for (name, k) in [
            ("median_kernel", self.median_kernel),
            ("blur_kernel", self.blur_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("augment.{name} = {k} must be odd")));
            }
        }
        Ok(())
    }
}

/// Projective transform of pixel-centre coordinates, row-major 3x3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Self = Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    /// Rotation by `theta` radians; with `y` pointing down a positive angle
    /// turns clockwise on screen.
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn scaling(s: f64) -> Self {
        Self([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn shear(kx: f64, ky: f64) -> Self {
        Self([[1.0, kx, 0.0], [ky, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn projective(px: f64, py: f64) -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])
    }

    /// Conjugates `self` so it acts about `c` instead of the origin.
    pub fn about(self, c: Point) -> Self {
        Self::translation(c.x, c.y)
            .then_after(self)
            .then_after(Self::translation(-c.x, -c.y))
    }

    /// Matrix product `self * other` (apply `other` first).
    pub fn then_after(self, other: Self) -> Self {
        let (a, b) = (self.0, other.0);
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Self(m)
    }

    pub fn determinant(&self) -> f64 {
        let m = self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::DegenerateTransform(format!(
                "singular homography (det {det:e})"
            )));
        }
        let m = self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let inv = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        Ok(Self(inv.map(|row| row.map(|v| v / det))))
    }

    pub fn apply(&self, p: Point) -> Result<Point> {
        let m = self.0;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if !w.is_finite() || w.abs() < 1e-12 {
            return Err(Error::DegenerateTransform(format!(
                "point ({}, {}) maps to infinity",
                p.x, p.y
            )));
        }
        Ok(Point::new(
            (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
            (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
        ))
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn symmetric(rng: &mut Rng, a: f64) -> f64 {
    uniform(rng, -a, a)
}

/// Draws rotation, translation, scale, shear and projective components and
/// composes them about the centre of a `width x height` image. Draws that
/// fold the image (a corner mapped behind the camera) are re-drawn; after
/// repeated failures the identity is returned.
pub fn sample_homography(
    cfg: &AugmentationConfig,
    width: usize,
    height: usize,
    rng: &mut Rng,
) -> Homography {
    let c = Point::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let side = width.max(height) as f64;
    for _ in 0..MAX_REDRAWS {
        let theta = symmetric(rng, cfg.rotation_deg).to_radians();
        let tx = symmetric(rng, cfg.translation_frac * side);
        let ty = symmetric(rng, cfg.translation_frac * side);
        let s = uniform(rng, cfg.scale_range.0, cfg.scale_range.1);
        let kx = symmetric(rng, cfg.shear_deg).to_radians().tan();
        let ky = symmetric(rng, cfg.shear_deg).to_radians().tan();
        let px = symmetric(rng, cfg.projective);
        let py = symmetric(rng, cfg.projective);
        let h = Homography::translation(tx, ty)
            .then_after(Homography::rotation(theta))
            .then_after(Homography::scaling(s))
            .then_after(Homography::shear(kx, ky))
            .then_after(Homography::projective(px, py))
            .about(c);
        if is_well_behaved(&h, width, height) {
            return h;
        }
    }
    Homography::IDENTITY
}

fn is_well_behaved(h: &Homography, width: usize, height: usize) -> bool {
    if h.determinant().abs() < 1e-6 {
        return false;
    }
    let (w, hh) = (width as f64 - 1.0, height as f64 - 1.0);
    [(0.0, 0.0), (w, 0.0), (0.0, hh), (w, hh)]
        .iter()
        .all(|&(x, y)| {
            let m = h.0;
            m[2][0] * x + m[2][1] * y + m[2][2] > 1e-3
        })
}

/// Resamples `img` under `h` (inverse mapping, bilinear, zero fill) and maps
/// each landmark forward.
pub fn warp(img: &Image, lms: &LandmarkSet, h: &Homography) -> Result<(Image, LandmarkSet)> {
    lms.require_pixel_frame_of(img)?;
    let points = lms
        .points()
        .iter()
        .map(|&p| h.apply(p))
        .collect::<Result<Vec<_>>>()?;
    let warped = warp_image(img, h)?;
    Ok((warped, LandmarkSet::pixel(points, img)?))
}

pub fn warp_image(img: &Image, h: &Homography) -> Result<Image> {
    if *h == Homography::IDENTITY {
        return Ok(img.clone());
    }
    let inv = h.inverse()?;
    let (w, hh) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w * hh);
    for y in 0..hh {
        for x in 0..w {
            let v = match inv.apply(Point::new(x as f64, y as f64)) {
                Ok(p) => img.sample(p.x, p.y, Border::Zero),
                Err(_) => 0.0,
            };
            out.push(v);
        }
    }
    Ok(Image::from_clipped(w, hh, img.spacing(), out, img.id()))
}

pub fn gamma(img: &Image, g: f64) -> Image {
    let mut out = img.clone();
    if g != 1.0 {
        out.map_pixels(|v| (v as f64).powf(g) as f32);
    }
    out
}

/// Sets each pixel to 0 or 1 (equally likely) with probability `fraction`.
pub fn salt_and_pepper(img: &Image, fraction: f64, rng: &mut Rng) -> Image {
    let mut out = img.clone();
    out.map_pixels(|v| {
        if rng.random::<f64>() < fraction {
            if rng.random::<bool>() {
                1.0
            } else {
                0.0
            }
        } else {
            v
        }
    });
    out
}

pub fn median_blur(img: &Image, kernel: usize) -> Image {
    let r = (kernel / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut window = Vec::with_capacity(kernel * kernel);
    let mut out = Vec::with_capacity(img.pixels().len());
    for y in 0..h {
        for x in 0..w {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let xs = (x + dx).clamp(0, w - 1) as usize;
                    let ys = (y + dy).clamp(0, h - 1) as usize;
                    window.push(img.get(xs, ys));
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
            out.push(*m);
        }
    }
    Image::from_clipped(img.width(), img.height(), img.spacing(), out, img.id())
}

/// Separable gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Image, sigma: f64, kernel: usize) -> Image {
    if sigma <= 0.0 || kernel <= 1 {
        return img.clone();
    }
    let r = (kernel / 2) as i64;
    let weights: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|v| v / total).collect();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wt) in (-r..=r).zip(&weights) {
                    let (xs, ys) = if horizontal {
                        ((x + k).clamp(0, w - 1), y)
                    } else {
                        (x, (y + k).clamp(0, h - 1))
                    };
                    acc += wt * src[(ys * w + xs) as usize] as f64;
                }
                dst[(y * w + x) as usize] = acc as f32;
            }
        }
        dst
    };
    let tmp = pass(img.pixels(), true);
    let out = pass(&tmp, false);
    Image::from_clipped(img.width(), img.height(), img.spacing(), out, img.id())
}

pub fn add_noise(img: &Image, sigma: f64, rng: &mut Rng) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let out = img
        .pixels()
        .iter()
        .map(|&v| v + normal.sample(rng) as f32)
        .collect();
    Image::from_clipped(img.width(), img.height(), img.spacing(), out, img.id())
}

/// Applies each photometric transform with its configured probability.
pub fn photometric(img: &Image, cfg: &AugmentationConfig, rng: &mut Rng) -> Image {
    let mut out = img.clone();
    if rng.random::<f64>() < cfg.gamma_prob {
        let g = uniform(rng, cfg.gamma_range.0.ln(), cfg.gamma_range.1.ln()).exp();
        out = gamma(&out, g);
    }
    if rng.random::<f64>() < cfg.salt_pepper_prob {
        let f = uniform(rng, 0.0, cfg.salt_pepper_max);
        out = salt_and_pepper(&out, f, rng);
    }
    if rng.random::<f64>() < cfg.median_prob {
        out = median_blur(&out, cfg.median_kernel);
    }
    if rng.random::<f64>() < cfg.blur_prob {
        let s = uniform(rng, 0.0, cfg.blur_sigma);
        out = gaussian_blur(&out, s, cfg.blur_kernel);
    }
    if rng.random::<f64>() < cfg.noise_prob {
        let s = uniform(rng, 0.0, cfg.noise_sigma_max);
        out = add_noise(&out, s, rng);
    }
    out
}

/// Side of the cutout square covering `fraction` of the image area.
pub fn cutout_side(width: usize, height: usize, fraction: f64) -> usize {
    (fraction * (width * height) as f64).sqrt().round() as usize
}

/// Zeroes one square of area `fraction * width * height`, centred at a
/// uniformly drawn pixel and clipped to the image.
pub fn cutout(img: &Image, fraction: f64, rng: &mut Rng) -> Image {
    let side = cutout_side(img.width(), img.height(), fraction);
    if side == 0 {
        return img.clone();
    }
    let cx = rng.random_range(0..img.width()) as i64;
    let cy = rng.random_range(0..img.height()) as i64;
    let x0 = (cx - side as i64 / 2).max(0) as usize;
    let y0 = (cy - side as i64 / 2).max(0) as usize;
    let x1 = ((cx - side as i64 / 2 + side as i64).max(0) as usize).min(img.width());
    let y1 = ((cy - side as i64 / 2 + side as i64).max(0) as usize).min(img.height());
    let w = img.width();
    let mut px = img.pixels().to_vec();
    for y in y0..y1 {
        px[y * w + x0..y * w + x1].fill(0.0);
    }
    Image::from_clipped(img.width(), img.height(), img.spacing(), px, img.id())
}

/// Adds independent `U(-amplitude, amplitude)` noise to every coordinate.
pub fn jitter_targets(lms: &LandmarkSet, amplitude: f64, rng: &mut Rng) -> Result<LandmarkSet> {
    if amplitude == 0.0 {
        return Ok(lms.clone());
    }
    let pts = lms
        .points()
        .iter()
        .map(|p| {
            let dx = symmetric(rng, amplitude);
            let dy = symmetric(rng, amplitude);
            Point::new(p.x + dx, p.y + dy)
        })
        .collect();
    LandmarkSet::new(pts, lms.frame())
}

fn out_of_frame_fraction(points: &[Point], width: usize, height: usize) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let (w, h) = (width as f64 - 0.5, height as f64 - 0.5);
    let outside = points
        .iter()
        .filter(|p| p.x < -0.5 || p.y < -0.5 || p.x > w || p.y > h)
        .count();
    outside as f64 / points.len() as f64
}

/// Full stochastic pipeline for one training sample.
pub fn augment(
    img: &Image,
    lms: &LandmarkSet,
    cfg: &AugmentationConfig,
    rng: &mut Rng,
) -> Result<(Image, LandmarkSet)> {
    lms.require_pixel_frame_of(img)?;
    let (mut image, mut targets) = (img.clone(), lms.clone());
    if rng.random::<f64>() < cfg.geometric_prob {
        for _ in 0..MAX_REDRAWS {
            let h = sample_homography(cfg, img.width(), img.height(), rng);
            let mapped = lms
                .points()
                .iter()
                .map(|&p| h.apply(p))
                .collect::<Result<Vec<_>>>();
            if let Ok(points) = mapped {
                if out_of_frame_fraction(&points, img.width(), img.height()) <= MAX_OUT_OF_FRAME {
                    image = warp_image(img, &h)?;
                    targets = LandmarkSet::pixel(points, img)?;
                    break;
                }
            }
        }
    }
    image = photometric(&image, cfg, rng);
    if rng.random::<f64>() < cfg.cutout_prob {
        image = cutout(&image, cfg.cutout_fraction, rng);
    }
    targets = jitter_targets(&targets, cfg.jitter_px, rng)?;
    Ok((image, targets))
}

/// Random stream for sample `index` in `epoch`; the augmentation of a sample
/// depends on nothing else.
pub fn sample_stream(master_seed: u64, epoch: usize, index: usize) -> Rng {
    rng::stream(
        master_seed,
        &[rng::tag::AUGMENT, epoch as u64, index as u64],
    )
}
