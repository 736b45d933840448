use serde::{Deserialize, Serialize};

use super::{Border, Frame, Image, LandmarkSet, Point};
use crate::{Error, Result};

/// Bilinear resampling to a new isotropic spacing.
///
/// Output sides are `round(side * spacing / target)`. Pixel centres map through
/// `src = (dst + 0.5) / s - 0.5` with `s = spacing / target`; samples past the
/// border are clamped so constant images stay constant.
pub fn resample(img: &Image, target_spacing: f64) -> Result<Image> {
    if !(target_spacing > 0.0 && target_spacing.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target_spacing}"
        )));
    }
    let s = img.spacing() / target_spacing;
    let out_w = ((img.width() as f64 * s).round() as usize).max(1);
    let out_h = ((img.height() as f64 * s).round() as usize).max(1);
    if out_w == img.width() && out_h == img.height() && s == 1.0 {
        return Ok(img.clone());
    }
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = (y as f64 + 0.5) / s - 0.5;
        for x in 0..out_w {
            let sx = (x as f64 + 0.5) / s - 0.5;
            pixels.push(img.sample(sx, sy, Border::Clamp));
        }
    }
    Ok(Image::from_clipped(
        out_w,
        out_h,
        target_spacing,
        pixels,
        img.id(),
    ))
}

/// Bilinear resize to `out_w x out_h` pixels. Spacing follows the horizontal scale.
pub fn resize(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {out_w}x{out_h}"
        )));
    }
    if out_w == img.width() && out_h == img.height() {
        return Ok(img.clone());
    }
    let sx = out_w as f64 / img.width() as f64;
    let sy = out_h as f64 / img.height() as f64;
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let src_y = (y as f64 + 0.5) / sy - 0.5;
        for x in 0..out_w {
            let src_x = (x as f64 + 0.5) / sx - 0.5;
            pixels.push(img.sample(src_x, src_y, Border::Clamp));
        }
    }
    Ok(Image::from_clipped(
        out_w,
        out_h,
        img.spacing() / sx,
        pixels,
        img.id(),
    ))
}

/// Square crop of `round(size_mm / spacing)` px centred on `center_mm`.
///
/// Regions outside the source are zero-padded. A centre outside the image is not
/// an error; the returned transform is flagged instead.
pub fn crop_roi(img: &Image, center_mm: Point, size_mm: f64) -> Result<(Image, RoiTransform)> {
    if !(size_mm > 0.0 && size_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "crop size must be positive, got {size_mm}"
        )));
    }
    if !(center_mm.x.is_finite() && center_mm.y.is_finite()) {
        return Err(Error::InvalidArgument("crop centre is not finite".into()));
    }
    let side = ((size_mm / img.spacing()).round() as usize).max(1);
    let cx = center_mm.x / img.spacing();
    let cy = center_mm.y / img.spacing();
    let half = (side as f64 - 1.0) / 2.0;
    let ox = (cx - half).round() as i64;
    let oy = (cy - half).round() as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut pixels = vec![0.0f32; side * side];
    for y in 0..side as i64 {
        let sy = oy + y;
        if sy < 0 || sy >= h {
            continue;
        }
        for x in 0..side as i64 {
            let sx = ox + x;
            if sx >= 0 && sx < w {
                pixels[(y * side as i64 + x) as usize] = img.get(sx as usize, sy as usize);
            }
        }
    }
    let out_of_bounds = cx < 0.0 || cy < 0.0 || cx > (w - 1) as f64 || cy > (h - 1) as f64;
    let transform = RoiTransform {
        source_id: img.id().to_string(),
        origin: Point::new(ox as f64, oy as f64),
        crop_side: side as f64,
        scale: 1.0,
        out_side: side,
        flip: false,
        out_of_bounds,
    };
    let crop = Image::from_clipped(side, side, img.spacing(), pixels, img.id());
    Ok((crop, transform))
}

/// Mirrors an image left-to-right together with its landmarks.
///
/// Landmark IDs are renumbered so they stay ordered left-to-right: for the
/// 16-point knee layout the tibial (0-8) and femoral (9-15) groups are each
/// reversed; single-point sets keep their index; any other count is reversed
/// as one group.
pub fn flip_horizontal(img: &Image, lms: &LandmarkSet) -> Result<(Image, LandmarkSet)> {
    lms.require_pixel_frame_of(img)?;
    let (w, h) = (img.width(), img.height());
    let src = img.pixels();
    let mut pixels = Vec::with_capacity(w * h);
    for row in src.chunks_exact(w) {
        pixels.extend(row.iter().rev());
    }
    let flipped = Image {
        width: w,
        height: h,
        spacing: img.spacing(),
        pixels,
        id: img.id().to_string(),
    };
    let mirrored: Vec<Point> = lms
        .points()
        .iter()
        .map(|p| Point::new((w as f64 - 1.0) - p.x, p.y))
        .collect();
    let points = reorder_after_flip(mirrored);
    Ok((flipped, LandmarkSet::new(points, lms.frame())?))
}

pub(crate) fn reorder_after_flip(mut points: Vec<Point>) -> Vec<Point> {
    match points.len() {
        0 | 1 => {}
        super::KNEE_LANDMARKS => {
            points[..9].reverse();
            points[9..].reverse();
        }
        _ => points.reverse(),
    }
    points
}

/// Splits a bilateral radiograph into `[0, w/2)` and `[w/2, w)` column halves.
pub fn split_bilateral(img: &Image) -> Result<(Image, Image)> {
    let w = img.width();
    if w < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split an image of width {w}"
        )));
    }
    let lw = w / 2;
    let rw = w - lw;
    let mut left = Vec::with_capacity(lw * img.height());
    let mut right = Vec::with_capacity(rw * img.height());
    for row in img.pixels().chunks_exact(w) {
        left.extend_from_slice(&row[..lw]);
        right.extend_from_slice(&row[lw..]);
    }
    let h = img.height();
    Ok((
        Image::from_clipped(lw, h, img.spacing(), left, format!("{}#L", img.id())),
        Image::from_clipped(rw, h, img.spacing(), right, format!("{}#R", img.id())),
    ))
}

pub fn to_normalized(lms: &LandmarkSet, img: &Image) -> Result<LandmarkSet> {
    lms.require_pixel_frame_of(img)?;
    let (w, h) = (img.width() as f64, img.height() as f64);
    let points = lms
        .points()
        .iter()
        .map(|p| Point::new(p.x / w, p.y / h))
        .collect();
    LandmarkSet::new(points, Frame::Normalized)
}

pub fn to_pixels(lms: &LandmarkSet, img: &Image) -> Result<LandmarkSet> {
    if lms.frame() != Frame::Normalized {
        return Err(Error::InvalidArgument(
            "to_pixels expects normalized landmarks".into(),
        ));
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    let points = lms
        .points()
        .iter()
        .map(|p| Point::new(p.x * w, p.y * h))
        .collect();
    LandmarkSet::pixel(points, img)
}

/// Maps source-image pixel coordinates into an ROI frame and back.
///
/// Forward: `q = (p - origin + 0.5) * scale - 0.5`, then `q.x = out_side - 1 - q.x`
/// when `flip` is set. Every crop / resample / resize step used by the pipeline
/// is of this form, so a chain of them collapses into one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiTransform {
    pub source_id: String,
    /// Top-left of the crop in source pixels.
    pub origin: Point,
    /// Crop side in source pixels.
    pub crop_side: f64,
    /// Output pixels per source pixel.
    pub scale: f64,
    /// Output side in pixels.
    pub out_side: usize,
    pub flip: bool,
    /// The requested crop centre lay outside the source image.
    pub out_of_bounds: bool,
}

impl RoiTransform {
    pub fn identity(source_id: impl Into<String>, side: usize) -> Self {
        Self {
            source_id: source_id.into(),
            origin: Point::default(),
            crop_side: side as f64,
            scale: 1.0,
            out_side: side,
            flip: false,
            out_of_bounds: false,
        }
    }

    pub fn forward(&self, p: Point) -> Point {
        let x = (p.x - self.origin.x + 0.5) * self.scale - 0.5;
        let y = (p.y - self.origin.y + 0.5) * self.scale - 0.5;
        if self.flip {
            Point::new(self.out_side as f64 - 1.0 - x, y)
        } else {
            Point::new(x, y)
        }
    }

    pub fn inverse(&self, q: Point) -> Point {
        let x = if self.flip {
            self.out_side as f64 - 1.0 - q.x
        } else {
            q.x
        };
        Point::new(
            (x + 0.5) / self.scale - 0.5 + self.origin.x,
            (q.y + 0.5) / self.scale - 0.5 + self.origin.y,
        )
    }

    /// Follows this transform with a bilinear resize of the output to `out_side`.
    pub fn then_resize(mut self, out_side: usize) -> Self {
        assert!(!self.flip, "resize must precede the flip");
        self.scale *= out_side as f64 / self.out_side as f64;
        self.out_side = out_side;
        self
    }

    pub fn then_flip(mut self) -> Self {
        self.flip = !self.flip;
        self
    }

    /// Re-expresses a transform defined on a resampled image (resample factor
    /// `factor` = new px per old px) relative to the original image.
    pub fn after_resample(mut self, factor: f64) -> Self {
        self.origin = Point::new(self.origin.x / factor, self.origin.y / factor);
        self.crop_side /= factor;
        self.scale *= factor;
        self
    }

    /// Re-expresses a transform defined on a sub-image whose top-left corner sits
    /// at `offset` in the parent image.
    pub fn after_offset(mut self, offset: Point) -> Self {
        self.origin = Point::new(self.origin.x + offset.x, self.origin.y + offset.y);
        self
    }

    pub fn forward_set(&self, lms: &[Point]) -> Vec<Point> {
        let mut pts: Vec<Point> = lms.iter().map(|&p| self.forward(p)).collect();
        if self.flip {
            pts = reorder_after_flip(pts);
        }
        pts
    }

    pub fn inverse_set(&self, lms: &[Point]) -> Vec<Point> {
        let mut pts: Vec<Point> = lms.iter().map(|&p| self.inverse(p)).collect();
        if self.flip {
            pts = reorder_after_flip(pts);
        }
        pts
    }
}
