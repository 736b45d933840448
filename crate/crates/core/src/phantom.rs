//! Deterministic synthetic knee radiographs with exact landmark labels.
//!
//! A phantom is a femur above a tibia separated by a joint space. The tibial
//! plateau carries two intercondylar spines and the femur two condyles around
//! a notch. Landmarks 0-8 sit on the tibial plateau at evenly spaced
//! positions between its corners and 9-15 on the femoral condyle contour,
//! both numbered left to right. The pseudo KL grade narrows the joint space
//! and roughens both contours.
//!
//! The generator draws a right knee; left knees are its exact mirror image.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::{
    flip_horizontal, save_png16, write_annotations, AnnotationRecord, Image, LandmarkSet, Point,
    Side,
};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Contour parameters of the tibial landmarks, from the left corner to the right.
pub const TIBIAL_POSITIONS: [f64; 9] = [-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0];
/// Contour parameters of the femoral landmarks.
pub const FEMORAL_POSITIONS: [f64; 7] = [-0.95, -0.63, -0.32, 0.0, 0.32, 0.63, 0.95];

const MAX_REDRAWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// Side of one knee image in pixels.
    pub side: usize,
    pub spacing_mm: f64,
    pub count: usize,
    pub seed: u64,
    /// Two knees side by side in one image of width `2 * side`.
    pub bilateral: bool,
    pub tibia_half_width_mm: (f64, f64),
    pub joint_space_mm: (f64, f64),
    /// Largest in-plane tilt of the knee.
    pub tilt_deg: f64,
    /// Largest offset of the joint centre from the image centre.
    pub offset_mm: f64,
    /// Contour roughness added per KL grade.
    pub roughness_mm_per_kl: f64,
    pub edge_mm: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            side: 480,
            spacing_mm: 0.3,
            count: 16,
            seed: 0,
            bilateral: false,
            tibia_half_width_mm: (34.0, 40.0),
            joint_space_mm: (5.0, 8.0),
            tilt_deg: 4.0,
            offset_mm: 8.0,
            roughness_mm_per_kl: 0.5,
            edge_mm: 0.6,
            noise_sigma: 0.02,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 64 {
            return Err(Error::Config(format!(
                "phantom side {} must be >= 64",
                self.side
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("phantom count must be >= 1".into()));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(Error::Config(format!(
                "phantom spacing {} must be > 0",
                self.spacing_mm
            )));
        }
        let (lo, hi) = self.tibia_half_width_mm;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(
                "tibia_half_width_mm must be positive and ordered".into(),
            ));
        }
        let (lo, hi) = self.joint_space_mm;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(
                "joint_space_mm must be positive and ordered".into(),
            ));
        }
        if self.edge_mm.is_nan() || self.edge_mm <= 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config(
                "edge_mm must be > 0 and noise_sigma >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One generated image with its knee annotations (two for bilateral images).
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub image: Image,
    pub records: Vec<AnnotationRecord>,
}

/// Random shape of one knee, in millimetres relative to the joint centre.
#[derive(Debug, Clone)]
struct Knee {
    center: Point,
    tilt: f64,
    tibia_w: f64,
    femur_w: f64,
    gap: f64,
    spine_height: f64,
    notch_depth: f64,
    condyle_curve: f64,
    plateau_slope: f64,
    /// `(amplitude, frequency, phase)` terms of the contour roughness.
    tibia_rough: Vec<(f64, f64, f64)>,
    femur_rough: Vec<(f64, f64, f64)>,
    tibia_level: f64,
    femur_level: f64,
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn roughness(terms: &[(f64, f64, f64)], u: f64) -> f64 {
    terms.iter().map(|&(a, f, p)| a * (f * u + p).sin()).sum()
}

impl Knee {
    fn draw(spec: &PhantomSpec, kl: u8, rng: &mut Rng) -> Self {
        let range = |rng: &mut Rng, (lo, hi): (f64, f64)| {
            if lo < hi {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let sym = |rng: &mut Rng, a: f64| {
            if a > 0.0 {
                rng.random_range(-a..a)
            } else {
                0.0
            }
        };
        let extent_mm = spec.side as f64 * spec.spacing_mm;
        let center = Point::new(
            extent_mm / 2.0 + sym(rng, spec.offset_mm),
            extent_mm / 2.0 + sym(rng, spec.offset_mm),
        );
        let tibia_w = range(rng, spec.tibia_half_width_mm);
        let femur_w = tibia_w * range(rng, (1.0, 1.08));
        let gap = (range(rng, spec.joint_space_mm) - 0.9 * kl as f64).max(1.5);
        let amp = spec.roughness_mm_per_kl * kl as f64;
        let rough = |rng: &mut Rng| -> Vec<(f64, f64, f64)> {
            (0..3)
                .map(|k| {
                    let a = amp * rng.random_range(0.3..1.0) / (k + 1) as f64;
                    let f = rng.random_range(4.0..9.0) * (k + 1) as f64;
                    (a, f, rng.random_range(0.0..std::f64::consts::TAU))
                })
                .collect()
        };
        let tibia_rough = rough(rng);
        let femur_rough = rough(rng);
        Self {
            center,
            tilt: sym(rng, spec.tilt_deg).to_radians(),
            tibia_w,
            femur_w,
            gap,
            spine_height: range(rng, (2.0, 3.5)),
            notch_depth: range(rng, (5.0, 8.0)),
            condyle_curve: range(rng, (8.0, 12.0)),
            plateau_slope: range(rng, (2.0, 4.0)),
            tibia_rough,
            femur_rough,
            tibia_level: range(rng, (0.55, 0.65)),
            femur_level: range(rng, (0.6, 0.7)),
        }
    }

    /// Depth of the tibial plateau below the joint centre at contour position `u`.
    fn tibia_y(&self, u: f64) -> f64 {
        let spines = self.spine_height * (-((u.abs() - 0.12) / 0.07).powi(2)).exp();
        self.gap / 2.0 + self.plateau_slope * u.powi(4) - spines + roughness(&self.tibia_rough, u)
    }

    /// Height of the femoral contour above the joint centre (negative `y`).
    fn femur_y(&self, u: f64) -> f64 {
        let condyles = self.condyle_curve * (u.abs() - 0.5).powi(2);
        let notch = self.notch_depth * (-(u / 0.18).powi(2)).exp();
        -self.gap / 2.0 - condyles - notch + roughness(&self.femur_rough, u)
    }

    /// Landmarks in canonical (untilted, centre-relative) millimetres.
    fn canonical_landmarks(&self) -> Vec<Point> {
        let tibia = TIBIAL_POSITIONS
            .iter()
            .map(|&u| Point::new(u * self.tibia_w, self.tibia_y(u)));
        let femur = FEMORAL_POSITIONS
            .iter()
            .map(|&u| Point::new(u * self.femur_w, self.femur_y(u)));
        tibia.chain(femur).collect()
    }

    fn to_world(&self, p: Point) -> Point {
        let (s, c) = self.tilt.sin_cos();
        Point::new(
            self.center.x + c * p.x - s * p.y,
            self.center.y + s * p.x + c * p.y,
        )
    }

    fn to_canonical(&self, p: Point) -> Point {
        let (s, c) = self.tilt.sin_cos();
        let (dx, dy) = (p.x - self.center.x, p.y - self.center.y);
        Point::new(c * dx + s * dy, -s * dx + c * dy)
    }

    /// Noise-free intensity at a world point (millimetres).
    fn intensity(&self, world: Point, edge: f64, extent: f64) -> f64 {
        let p = self.to_canonical(world);
        let background = 0.1 + 0.05 * (world.y / extent) + 0.08 * (-(p.x / 60.0).powi(2)).exp();
        // Shafts narrow away from the joint.
        let taper = |depth: f64| 1.0 - 0.22 * sigmoid((depth - 30.0) / 5.0);

        let tw = self.tibia_w * taper(p.y);
        let u_t = (p.x / self.tibia_w).clamp(-1.2, 1.2);
        let tibia = sigmoid((p.y - self.tibia_y(u_t)) / edge) * sigmoid((tw - p.x.abs()) / edge);
        let fw = self.femur_w * taper(-p.y);
        let u_f = (p.x / self.femur_w).clamp(-1.2, 1.2);
        let femur = sigmoid((self.femur_y(u_f) - p.y) / edge) * sigmoid((fw - p.x.abs()) / edge);

        background + self.tibia_level * tibia + self.femur_level * femur
    }
}

fn kl_for(seed: u64, index: usize, side: Side) -> u8 {
    let mut r = rng::stream(seed, &[rng::tag::PHANTOM, index as u64, side as u64, 1]);
    r.random_range(0..=4)
}

/// Renders one right knee of `spec.side` pixels and returns it with its
/// landmarks in pixel coordinates.
fn render_right(
    spec: &PhantomSpec,
    seed_coords: &[u64],
    kl: u8,
    id: &str,
) -> Result<(Image, Vec<Point>)> {
    let mut r = rng::stream(spec.seed, seed_coords);
    let n = spec.side;
    let s = spec.spacing_mm;
    let margin_px = 8.0;
    let mut knee = Knee::draw(spec, kl, &mut r);
    let mut points = Vec::new();
    for attempt in 0..=MAX_REDRAWS {
        points = knee
            .canonical_landmarks()
            .into_iter()
            .map(|p| {
                let w = knee.to_world(p);
                Point::new(w.x / s - 0.5, w.y / s - 0.5)
            })
            .collect();
        let inside = points.iter().all(|p| {
            p.x > margin_px
                && p.y > margin_px
                && p.x < n as f64 - 1.0 - margin_px
                && p.y < n as f64 - 1.0 - margin_px
        });
        if inside {
            break;
        }
        if attempt == MAX_REDRAWS {
            return Err(Error::Config(format!(
                "phantom of {n} px at {s} mm/px cannot hold the knee; increase side"
            )));
        }
        knee = Knee::draw(spec, kl, &mut r);
    }
    let extent = n as f64 * s;
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("valid sigma");
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            // Pixel centres sit at (index + 0.5) * spacing in millimetres.
            let world = Point::new((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            let mut v = knee.intensity(world, spec.edge_mm, extent);
            if spec.noise_sigma > 0.0 {
                v += noise.sample(&mut r);
            }
            pixels.push(v as f32);
        }
    }
    Ok((Image::from_clipped(n, n, s, pixels, id), points))
}

/// Renders one knee of the given side. Left knees are the mirror image of the
/// right knee drawn from the same random stream.
pub fn render_knee(
    spec: &PhantomSpec,
    index: usize,
    side: Side,
    kl: u8,
    id: &str,
) -> Result<(Image, Vec<Point>)> {
    let coords = [rng::tag::PHANTOM, index as u64];
    let (img, pts) = render_right(spec, &coords, kl, id)?;
    match side {
        Side::Right => Ok((img, pts)),
        Side::Left => {
            let lms = LandmarkSet::pixel(pts, &img)?;
            let (img, lms) = flip_horizontal(&img, &lms)?;
            Ok((img, lms.into_points()))
        }
    }
}

fn file_name(index: usize) -> PathBuf {
    PathBuf::from(format!("phantom_{index:04}.png"))
}

/// Single-knee phantoms. Consecutive images pair up as the right and left knee
/// of one synthetic patient.
pub fn generate(spec: &PhantomSpec) -> Result<Vec<PhantomSample>> {
    spec.validate()?;
    if spec.bilateral {
        return generate_bilateral(spec);
    }
    (0..spec.count)
        .map(|i| {
            let side = if i % 2 == 0 { Side::Right } else { Side::Left };
            let patient = format!("P{:04}", i / 2);
            let kl = kl_for(spec.seed, i / 2, side);
            let name = file_name(i);
            let (image, points) = render_knee(spec, i, side, kl, &name.to_string_lossy())?;
            let record = AnnotationRecord::high_cost(
                name,
                spec.spacing_mm,
                patient,
                side,
                kl,
                Some(points[4]),
                points,
            );
            Ok(PhantomSample {
                image,
                records: vec![record],
            })
        })
        .collect()
}

/// Bilateral phantoms: the image's left half shows the patient's right knee
/// and the right half the left knee, as on a standard radiograph. Annotation
/// coordinates refer to the full image.
pub fn generate_bilateral(spec: &PhantomSpec) -> Result<Vec<PhantomSample>> {
    spec.validate()?;
    let n = spec.side;
    (0..spec.count)
        .map(|i| {
            let patient = format!("P{i:04}");
            let name = file_name(i);
            let id = name.to_string_lossy().to_string();
            let mut pixels = vec![0.0f32; 2 * n * n];
            let mut records = Vec::new();
            for (half, side) in [Side::Right, Side::Left].into_iter().enumerate() {
                let kl = kl_for(spec.seed, i, side);
                let (img, pts) = render_knee(spec, 2 * i + half, side, kl, &id)?;
                for (y, row) in img.pixels().chunks_exact(n).enumerate() {
                    pixels[y * 2 * n + half * n..y * 2 * n + (half + 1) * n].copy_from_slice(row);
                }
                let shift = (half * n) as f64;
                let pts: Vec<Point> = pts.iter().map(|p| Point::new(p.x + shift, p.y)).collect();
                records.push(AnnotationRecord::high_cost(
                    name.clone(),
                    spec.spacing_mm,
                    patient.clone(),
                    side,
                    kl,
                    Some(pts[4]),
                    pts,
                ));
            }
            let image = Image::new(2 * n, n, spec.spacing_mm, pixels, id)?;
            Ok(PhantomSample { image, records })
        })
        .collect()
}

/// Writes every image as a 16-bit PNG plus `annotations.csv` into `dir` and
/// returns the annotation path.
pub fn write_corpus(samples: &[PhantomSample], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::new();
    for s in samples {
        let path = dir.join(&s.records[0].image);
        save_png16(&s.image, &path)?;
        records.extend(s.records.iter().cloned());
    }
    let csv = dir.join("annotations.csv");
    write_annotations(&records, &csv)?;
    Ok(csv)
}
