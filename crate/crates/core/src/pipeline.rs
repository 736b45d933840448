//! Sample preparation, two-stage inference, the run configuration document
//! and prediction CSVs.
//!
//! Stage A localises each knee's joint centre on a half of a bilateral
//! radiograph resampled to 1 mm. Stage B crops 140 mm around the centre at
//! 0.3 mm, mirrors left knees, and predicts the 16 landmarks. With two stages
//! the crop is re-centred on the predicted landmark 4 and stage B runs once more.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::imaging::{
    crop_roi, flip_horizontal, load_png, read_annotations, resample, resize, split_bilateral,
    AnnotationRecord, Image, LandmarkSet, Point, RoiTransform, Side,
};
use crate::losses::{LossKind, WingParams};
use crate::nn::HourglassModel;
use crate::training::{predict, Checkpoint, Sample};
use crate::{Error, Result};

pub const ROI_SPACING_MM: f64 = 1.0;
pub const LANDMARK_SPACING_MM: f64 = 0.3;
pub const CROP_MM: f64 = 140.0;
/// Landmark whose prediction re-centres the second stage.
pub const RECENTER_LANDMARK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub roi_checkpoint: PathBuf,
    pub landmark_checkpoint: PathBuf,
    pub roi_spacing: f64,
    pub landmark_spacing: f64,
    pub crop_mm: f64,
    pub stages: u8,
    pub input: PathBuf,
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            roi_checkpoint: PathBuf::new(),
            landmark_checkpoint: PathBuf::new(),
            roi_spacing: ROI_SPACING_MM,
            landmark_spacing: LANDMARK_SPACING_MM,
            crop_mm: CROP_MM,
            stages: 2,
            input: PathBuf::new(),
            output: PathBuf::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("roi spacing", self.roi_spacing),
            ("landmark spacing", self.landmark_spacing),
            ("crop size", self.crop_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !matches!(self.stages, 1 | 2) {
            return Err(Error::Config(format!(
                "stages must be 1 or 2, got {}",
                self.stages
            )));
        }
        Ok(())
    }
}

/// Spacing, crop size and input side used to build network inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub roi_spacing: f64,
    pub landmark_spacing: f64,
    pub crop_mm: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            roi_spacing: ROI_SPACING_MM,
            landmark_spacing: LANDMARK_SPACING_MM,
            crop_mm: CROP_MM,
        }
    }
}

impl From<&PipelineConfig> for Geometry {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            roi_spacing: c.roi_spacing,
            landmark_spacing: c.landmark_spacing,
            crop_mm: c.crop_mm,
        }
    }
}

fn mirror(img: &Image) -> Result<Image> {
    Ok(flip_horizontal(img, &LandmarkSet::pixel(Vec::new(), img)?)?.0)
}

/// Stage A input: `part` (a half or a whole image whose top-left corner sits at
/// `offset` in the source) resampled to `spacing`, padded square and resized to
/// `side`.
pub fn roi_input(
    part: &Image,
    offset: Point,
    spacing: f64,
    side: usize,
) -> Result<(Image, RoiTransform)> {
    let factor = part.spacing() / spacing;
    let r = resample(part, spacing)?;
    let extent = r.width().max(r.height());
    let center = Point::new(
        (r.width() as f64 - 1.0) / 2.0 * spacing,
        (r.height() as f64 - 1.0) / 2.0 * spacing,
    );
    let (crop, t) = crop_roi(&r, center, extent as f64 * spacing)?;
    let input = resize(&crop, side, side)?;
    Ok((
        input,
        t.then_resize(side)
            .after_resample(factor)
            .after_offset(offset),
    ))
}

/// Stage B input: a `crop_mm` square around `center` (source pixels) at
/// `spacing`, resized to `side`, mirrored for left knees.
pub fn landmark_input(
    img: &Image,
    center: Point,
    side: Side,
    geometry: &Geometry,
    input_side: usize,
) -> Result<(Image, RoiTransform)> {
    let factor = img.spacing() / geometry.landmark_spacing;
    let r = if factor == 1.0 {
        img.clone()
    } else {
        resample(img, geometry.landmark_spacing)?
    };
    let c = Point::new(
        ((center.x + 0.5) * factor - 0.5) * geometry.landmark_spacing,
        ((center.y + 0.5) * factor - 0.5) * geometry.landmark_spacing,
    );
    let (crop, t) = crop_roi(&r, c, geometry.crop_mm)?;
    if t.out_of_bounds {
        return Err(Error::DegenerateTransform(format!(
            "crop centre ({:.1}, {:.1}) lies outside image {}",
            center.x,
            center.y,
            img.id()
        )));
    }
    let input = resize(&crop, input_side, input_side)?;
    let t = t.then_resize(input_side).after_resample(factor);
    match side {
        Side::Right => Ok((input, t)),
        Side::Left => Ok((mirror(&input)?, t.then_flip())),
    }
}

/// Which part of an image shows a knee.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Two knees: the image's left half shows the right knee.
    Bilateral,
    /// One knee filling the image.
    Single(Side),
}

/// The image part holding `side` and its offset in the source.
pub fn knee_part(img: &Image, layout: Layout, side: Side) -> Result<(Image, Point)> {
    match layout {
        Layout::Single(_) => Ok((img.clone(), Point::default())),
        Layout::Bilateral => {
            let (left, right) = split_bilateral(img)?;
            match side {
                Side::Right => Ok((left, Point::default())),
                Side::Left => {
                    let off = Point::new(left.width() as f64, 0.0);
                    Ok((right, off))
                }
            }
        }
    }
}

/// Side shown by the half of a bilateral image containing `x`.
pub fn side_at(img: &Image, x: f64) -> Side {
    if x < (img.width() / 2) as f64 {
        Side::Right
    } else {
        Side::Left
    }
}

/// ROI-model sample for one knee: the target is the joint centre.
pub fn roi_sample(
    img: &Image,
    record: &AnnotationRecord,
    layout: Layout,
    geometry: &Geometry,
    input_side: usize,
) -> Result<Sample> {
    let center = record.joint_center().ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{}: record has no joint centre",
            record.image.display()
        ))
    })?;
    let side = match layout {
        Layout::Bilateral => side_at(img, center.x),
        Layout::Single(s) => s,
    };
    let (part, offset) = knee_part(img, layout, side)?;
    let (image, transform) = roi_input(&part, offset, geometry.roi_spacing, input_side)?;
    Ok(Sample {
        image,
        targets: vec![transform.forward(center)],
        transform,
        source_spacing: img.spacing(),
        source_targets: vec![center],
        kl: record.kl,
        id: format!("{}:{}", record.image.display(), record.side.code()),
        side: record.side,
    })
}

/// Landmark-model sample for one knee, cropped around the annotated centre.
pub fn landmark_sample(
    img: &Image,
    record: &AnnotationRecord,
    geometry: &Geometry,
    input_side: usize,
) -> Result<Sample> {
    if !record.is_high_cost() {
        return Err(Error::InvalidArgument(format!(
            "{}: landmark training needs 16 landmarks",
            record.image.display()
        )));
    }
    let center = record.joint_center().expect("high-cost record");
    let (image, transform) = landmark_input(img, center, record.side, geometry, input_side)?;
    Ok(Sample {
        image,
        targets: transform.forward_set(&record.landmarks),
        transform,
        source_spacing: img.spacing(),
        source_targets: record.landmarks.clone(),
        kl: record.kl,
        id: format!("{}:{}", record.image.display(), record.side.code()),
        side: record.side,
    })
}

/// Annotations plus their decoded images.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Records without the exclude flag.
    pub records: Vec<AnnotationRecord>,
    pub images: Vec<Image>,
    /// Index into `images` for each record.
    pub image_of: Vec<usize>,
}

impl Dataset {
    /// Reads an annotation CSV; image paths are relative to its directory.
    pub fn load(csv: impl AsRef<Path>) -> Result<Self> {
        let csv = csv.as_ref();
        let base = csv.parent().unwrap_or(Path::new("."));
        let records: Vec<AnnotationRecord> = read_annotations(csv)?
            .into_iter()
            .filter(|r| !r.exclude)
            .collect();
        let mut index: BTreeMap<PathBuf, usize> = BTreeMap::new();
        let mut images = Vec::new();
        let mut image_of = Vec::with_capacity(records.len());
        for r in &records {
            let i = match index.get(&r.image) {
                Some(&i) => i,
                None => {
                    let img =
                        load_png(base.join(&r.image), r.spacing_mm, r.image.to_string_lossy())?;
                    images.push(img);
                    index.insert(r.image.clone(), images.len() - 1);
                    images.len() - 1
                }
            };
            image_of.push(i);
        }
        Ok(Self {
            records,
            images,
            image_of,
        })
    }

    pub fn from_parts(
        records: Vec<AnnotationRecord>,
        images: Vec<Image>,
        image_of: Vec<usize>,
    ) -> Self {
        Self {
            records,
            images,
            image_of,
        }
    }

    /// An image is bilateral when two records point at it.
    pub fn layout(&self, record: usize) -> Layout {
        let img = self.image_of[record];
        if self.image_of.iter().filter(|&&i| i == img).count() > 1 {
            Layout::Bilateral
        } else {
            Layout::Single(self.records[record].side)
        }
    }

    pub fn roi_samples(
        &self,
        ids: &[usize],
        geometry: &Geometry,
        input_side: usize,
    ) -> Result<Vec<Sample>> {
        ids.iter()
            .map(|&i| {
                roi_sample(
                    &self.images[self.image_of[i]],
                    &self.records[i],
                    self.layout(i),
                    geometry,
                    input_side,
                )
            })
            .collect()
    }

    pub fn landmark_samples(
        &self,
        ids: &[usize],
        geometry: &Geometry,
        input_side: usize,
    ) -> Result<Vec<Sample>> {
        ids.iter()
            .map(|&i| {
                landmark_sample(
                    &self.images[self.image_of[i]],
                    &self.records[i],
                    geometry,
                    input_side,
                )
            })
            .collect()
    }
}

/// Landmarks of one knee in source pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct KneePrediction {
    pub side: Side,
    /// Stage A joint centre.
    pub center: Point,
    pub landmarks: Vec<Point>,
    /// Transform of the final stage B crop.
    pub transform: RoiTransform,
}

/// ROI and landmark models with the crop geometry.
pub struct Pipeline {
    pub roi: HourglassModel<f32>,
    pub landmark: HourglassModel<f32>,
    pub geometry: Geometry,
    pub stages: u8,
}

impl Pipeline {
    pub fn new(
        roi: HourglassModel<f32>,
        landmark: HourglassModel<f32>,
        geometry: Geometry,
        stages: u8,
    ) -> Result<Self> {
        if roi.config().landmarks != 1 {
            return Err(Error::IncompatibleCheckpoint(format!(
                "ROI model must predict one point, it predicts {}",
                roi.config().landmarks
            )));
        }
        if landmark.config().landmarks <= RECENTER_LANDMARK {
            return Err(Error::IncompatibleCheckpoint(format!(
                "landmark model predicts {} points; re-centring needs landmark {RECENTER_LANDMARK}",
                landmark.config().landmarks
            )));
        }
        if !matches!(stages, 1 | 2) {
            return Err(Error::Config(format!(
                "stages must be 1 or 2, got {stages}"
            )));
        }
        Ok(Self {
            roi,
            landmark,
            geometry,
            stages,
        })
    }

    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let roi = Checkpoint::load(&cfg.roi_checkpoint)?.to_model()?;
        let landmark = Checkpoint::load(&cfg.landmark_checkpoint)?.to_model()?;
        Self::new(roi, landmark, Geometry::from(cfg), cfg.stages)
    }

    /// Stage A: joint centre of the knee on `side`, in source pixels.
    pub fn locate(&mut self, img: &Image, layout: Layout, side: Side) -> Result<Point> {
        let (part, offset) = knee_part(img, layout, side)?;
        let s = self.roi.config().input_size;
        let (input, t) = roi_input(&part, offset, self.geometry.roi_spacing, s)?;
        let pred = predict(&mut self.roi, &[&input], 1)?;
        Ok(t.inverse(pred[0][0]))
    }

    /// Stage B around a given centre; returns landmarks in source pixels.
    pub fn landmarks_at(
        &mut self,
        img: &Image,
        center: Point,
        side: Side,
    ) -> Result<(Vec<Point>, RoiTransform)> {
        let s = self.landmark.config().input_size;
        let (input, t) = landmark_input(img, center, side, &self.geometry, s)?;
        let pred = predict(&mut self.landmark, &[&input], 1)?;
        Ok((t.inverse_set(&pred[0]), t))
    }

    pub fn infer_knee(
        &mut self,
        img: &Image,
        layout: Layout,
        side: Side,
    ) -> Result<KneePrediction> {
        let center = self.locate(img, layout, side)?;
        let (mut landmarks, mut transform) = self.landmarks_at(img, center, side)?;
        if self.stages == 2 {
            (landmarks, transform) = self.landmarks_at(img, landmarks[RECENTER_LANDMARK], side)?;
        }
        Ok(KneePrediction {
            side,
            center,
            landmarks,
            transform,
        })
    }

    /// Every knee in `img`: right then left for bilateral images.
    pub fn infer(&mut self, img: &Image, layout: Layout) -> Result<Vec<KneePrediction>> {
        match layout {
            Layout::Single(side) => Ok(vec![self.infer_knee(img, layout, side)?]),
            Layout::Bilateral => [Side::Right, Side::Left]
                .into_iter()
                .map(|side| self.infer_knee(img, layout, side))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image: String,
    pub knee_side: String,
    pub id: usize,
    pub x_px: f64,
    pub y_px: f64,
}

pub fn prediction_rows(image: &str, knees: &[KneePrediction]) -> Vec<PredictionRow> {
    knees
        .iter()
        .flat_map(|k| {
            k.landmarks
                .iter()
                .enumerate()
                .map(move |(id, p)| PredictionRow {
                    image: image.to_string(),
                    knee_side: k.side.code().to_string(),
                    id,
                    x_px: p.x,
                    y_px: p.y,
                })
        })
        .collect()
}

pub fn write_predictions(rows: &[PredictionRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let mut r =
        csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                line: i as u64 + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Groups prediction rows into `(image, side) -> points ordered by id`.
pub fn group_predictions(rows: &[PredictionRow]) -> Result<BTreeMap<(String, Side), Vec<Point>>> {
    let mut out: BTreeMap<(String, Side), Vec<(usize, Point)>> = BTreeMap::new();
    for r in rows {
        let side = Side::parse(&r.knee_side)
            .ok_or_else(|| Error::InvalidArgument(format!("knee side `{}`", r.knee_side)))?;
        out.entry((r.image.clone(), side))
            .or_default()
            .push((r.id, Point::new(r.x_px, r.y_px)));
    }
    out.into_iter()
        .map(|(k, mut v)| {
            v.sort_by_key(|p| p.0);
            if v.iter().enumerate().any(|(i, p)| p.0 != i) {
                return Err(Error::InvalidArgument(format!(
                    "{} {}: landmark ids are not 0..{}",
                    k.0,
                    k.1.code(),
                    v.len()
                )));
            }
            Ok((k, v.into_iter().map(|p| p.1).collect()))
        })
        .collect()
}

const SECTIONS: [&str; 9] = [
    "train", "model", "loss", "wing", "mixup", "augment", "pipeline", "phantom", "cv",
];

/// Flat `section.key = value` document. `#` starts a comment; blank lines
/// are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, (String, u64)>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i as u64 + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {content:?}")))?;
            let key = key.trim();
            let value = value.trim();
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| err(format!("key `{key}` has no section")))?;
            if !SECTIONS.contains(&section) {
                return Err(err(format!("unknown section `{section}`")));
            }
            if field.is_empty() || value.is_empty() {
                return Err(err(format!("empty key or value in {content:?}")));
            }
            if entries
                .insert(key.to_string(), (value.to_string(), line))
                .is_some()
            {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|v| v.0.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Overwrites fields of `target` from every `section.field` key. Nested
    /// structs are addressed with further dots.
    pub fn apply<T: Serialize + DeserializeOwned>(&self, section: &str, target: &T) -> Result<T> {
        let prefix = format!("{section}.");
        let mut value = serde_json::to_value(target).map_err(|e| Error::Config(e.to_string()))?;
        for (key, (raw, line)) in &self.entries {
            let Some(path) = key.strip_prefix(&prefix) else {
                continue;
            };
            let slot = path
                .split('.')
                .try_fold(&mut value, |v, part| v.get_mut(part))
                .ok_or_else(|| Error::Parse {
                    line: *line,
                    message: format!("unknown key `{key}`"),
                })?;
            *slot = parse_like(slot, raw).ok_or_else(|| Error::Parse {
                line: *line,
                message: format!("`{key}`: cannot parse {raw:?}"),
            })?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loss selection from `loss.kind` and `wing.w` / `wing.c` (or `wing.eps`).
    pub fn loss(&self, base: LossKind) -> Result<LossKind> {
        let number = |key: &str| -> Result<Option<f64>> {
            self.get(key)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Config(format!("`{key}` is not a number: {v:?}")))
                })
                .transpose()
        };
        let kind = self.get("loss.kind").unwrap_or(base.name());
        Ok(match kind {
            "wing" => {
                let current = match base {
                    LossKind::Wing(p) => p,
                    _ => WingParams::default(),
                };
                let w = number("wing.w")?.unwrap_or(current.w);
                match (number("wing.c")?, number("wing.eps")?) {
                    (Some(_), Some(_)) => {
                        return Err(Error::Config(
                            "set either wing.c or wing.eps, not both".into(),
                        ))
                    }
                    (_, Some(eps)) => LossKind::Wing(WingParams::from_w_eps(w, eps)?),
                    (c, None) => LossKind::Wing(WingParams::from_w_c(w, c.unwrap_or(current.c))?),
                }
            }
            "l1" => LossKind::L1,
            "l2" => LossKind::L2,
            "elastic" => LossKind::Elastic,
            other => return Err(Error::Config(format!("unknown loss `{other}`"))),
        })
    }
}

fn parse_like(current: &serde_json::Value, raw: &str) -> Option<serde_json::Value> {
    use serde_json::Value;
    match current {
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Bool(_) => match raw {
            "true" | "on" | "1" => Some(Value::Bool(true)),
            "false" | "off" | "0" => Some(Value::Bool(false)),
            _ => None,
        },
        Value::Array(_) => {
            let text = if raw.starts_with('[') {
                raw.to_string()
            } else {
                format!("[{raw}]")
            };
            serde_json::from_str::<Value>(&text)
                .ok()
                .filter(Value::is_array)
        }
        Value::Number(_) => serde_json::from_str::<Value>(raw)
            .ok()
            .filter(Value::is_number),
        _ => serde_json::from_str(raw).ok(),
    }
}
