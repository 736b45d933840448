//! Images with physical spacing, landmark sets and ROI geometry.

mod annotations;
mod geometry;
mod io;

pub use annotations::{
    read_annotations, write_annotations, AnnotationRecord, Side, KNEE_LANDMARKS,
};
pub use geometry::{
    crop_roi, flip_horizontal, resample, resize, split_bilateral, to_normalized, to_pixels,
    RoiTransform,
};
pub use io::{load_png, save_png16};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Grayscale raster, row-major, intensities in `[0, 1]`, isotropic spacing in mm/px.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    spacing: f64,
    pixels: Vec<f32>,
    id: String,
}

/// How out-of-bounds samples are resolved during interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    Zero,
    Clamp,
}

impl Image {
    pub fn new(
        width: usize,
        height: usize,
        spacing: f64,
        pixels: Vec<f32>,
        id: impl Into<String>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pixel spacing must be positive, got {spacing}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "pixel buffer has {} values, expected {}x{}={}",
                pixels.len(),
                width,
                height,
                width * height
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("pixel intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            spacing,
            pixels,
            id: id.into(),
        })
    }

    pub fn filled(
        width: usize,
        height: usize,
        spacing: f64,
        value: f32,
        id: impl Into<String>,
    ) -> Result<Self> {
        Self::new(width, height, spacing, vec![value; width * height], id)
    }

    /// Builds an image from raw values, clipping them into `[0, 1]`.
    pub(crate) fn from_clipped(
        width: usize,
        height: usize,
        spacing: f64,
        mut pixels: Vec<f32>,
        id: impl Into<String>,
    ) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self {
            width,
            height,
            spacing,
            pixels,
            id: id.into(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Replaces pixel values in place; values are clipped to `[0, 1]`.
    pub fn map_pixels(&mut self, mut f: impl FnMut(f32) -> f32) {
        for v in &mut self.pixels {
            let out = f(*v);
            *v = if out.is_nan() {
                0.0
            } else {
                out.clamp(0.0, 1.0)
            };
        }
    }

    /// Bilinear sample at pixel-centre coordinates `(x, y)`.
    pub fn sample(&self, x: f64, y: f64, border: Border) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let p00 = self.pixel_or(x0, y0, border);
        let p10 = self.pixel_or(x0 + 1, y0, border);
        let p01 = self.pixel_or(x0, y0 + 1, border);
        let p11 = self.pixel_or(x0 + 1, y0 + 1, border);
        let top = p00 * (1.0 - fx) + p10 * fx;
        let bottom = p01 * (1.0 - fx) + p11 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }

    #[inline]
    fn pixel_or(&self, x: i64, y: i64, border: Border) -> f64 {
        let (w, h) = (self.width as i64, self.height as i64);
        match border {
            Border::Zero => {
                if x < 0 || y < 0 || x >= w || y >= h {
                    0.0
                } else {
                    self.pixels[(y * w + x) as usize] as f64
                }
            }
            Border::Clamp => {
                let xc = x.clamp(0, w - 1);
                let yc = y.clamp(0, h - 1);
                self.pixels[(yc * w + xc) as usize] as f64
            }
        }
    }
}

/// Coordinate frame of a [`LandmarkSet`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Frame {
    /// Pixel-centre coordinates of an image with the given dimensions.
    Pixel { width: usize, height: usize },
    /// `x / width`, `y / height`.
    Normalized,
}

/// Ordered landmarks; the index is the landmark ID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<Point>,
    frame: Frame,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>, frame: Frame) -> Result<Self> {
        if let Some(p) = points
            .iter()
            .find(|p| !(p.x.is_finite() && p.y.is_finite()))
        {
            return Err(Error::Range(format!(
                "non-finite landmark ({}, {})",
                p.x, p.y
            )));
        }
        if frame == Frame::Normalized {
            if let Some(p) = points
                .iter()
                .find(|p| !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y))
            {
                return Err(Error::Range(format!(
                    "normalized landmark ({}, {}) outside [0, 1]",
                    p.x, p.y
                )));
            }
        }
        Ok(Self { points, frame })
    }

    pub fn pixel(points: Vec<Point>, image: &Image) -> Result<Self> {
        Self::new(
            points,
            Frame::Pixel {
                width: image.width(),
                height: image.height(),
            },
        )
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub(crate) fn require_pixel_frame_of(&self, image: &Image) -> Result<()> {
        match self.frame {
            Frame::Pixel { width, height }
                if width == image.width() && height == image.height() =>
            {
                Ok(())
            }
            other => Err(Error::InvalidArgument(format!(
                "landmarks in frame {other:?} do not belong to image {} ({}x{})",
                image.id(),
                image.width(),
                image.height()
            ))),
        }
    }
}
