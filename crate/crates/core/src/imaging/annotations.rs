//! Annotation CSV.
//!
//! Header: `image,spacing_mm,patient_id,side,kl,cx,cy,x0,y0,...,x15,y15` with an
//! optional trailing `exclude` column (`0`/`1`). Low-cost rows carry only the
//! joint centre and leave `x0..y15` empty.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Image, LandmarkSet, Point};
use crate::{Error, Result};

pub const KNEE_LANDMARKS: usize = 16;

const FIXED_COLUMNS: [&str; 7] = [
    "image",
    "spacing_mm",
    "patient_id",
    "side",
    "kl",
    "cx",
    "cy",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn code(self) -> &'static str {
        match self {
            Side::Left => "L",
            Side::Right => "R",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "L" => Some(Side::Left),
            "R" => Some(Side::Right),
            _ => None,
        }
    }
}

/// One knee: either a low-cost joint-centre label or the full 16-point annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: PathBuf,
    pub spacing_mm: f64,
    pub patient_id: String,
    pub side: Side,
    pub kl: u8,
    pub center: Option<Point>,
    /// One point (the centre) for low-cost labels, sixteen for high-cost ones.
    pub landmarks: Vec<Point>,
    pub exclude: bool,
}

impl AnnotationRecord {
    pub fn low_cost(
        image: impl Into<PathBuf>,
        spacing_mm: f64,
        patient_id: impl Into<String>,
        side: Side,
        kl: u8,
        center: Point,
    ) -> Self {
        Self {
            image: image.into(),
            spacing_mm,
            patient_id: patient_id.into(),
            side,
            kl,
            center: Some(center),
            landmarks: vec![center],
            exclude: false,
        }
    }

    pub fn high_cost(
        image: impl Into<PathBuf>,
        spacing_mm: f64,
        patient_id: impl Into<String>,
        side: Side,
        kl: u8,
        center: Option<Point>,
        landmarks: Vec<Point>,
    ) -> Self {
        Self {
            image: image.into(),
            spacing_mm,
            patient_id: patient_id.into(),
            side,
            kl,
            center,
            landmarks,
            exclude: false,
        }
    }

    pub fn is_high_cost(&self) -> bool {
        self.landmarks.len() == KNEE_LANDMARKS
    }

    /// Joint centre: the explicit label, else the tibial centre (landmark 4).
    pub fn joint_center(&self) -> Option<Point> {
        self.center
            .or_else(|| self.is_high_cost().then(|| self.landmarks[4]))
    }

    pub fn landmark_set(&self, image: &Image) -> Result<LandmarkSet> {
        LandmarkSet::pixel(self.landmarks.clone(), image)
    }

    pub fn validate(&self, line: u64) -> Result<()> {
        let schema = |message: String| Error::Schema { line, message };
        if self.kl > 4 {
            return Err(schema(format!("KL grade {} outside 0..=4", self.kl)));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(schema(format!(
                "spacing {} must be positive",
                self.spacing_mm
            )));
        }
        match self.landmarks.len() {
            1 => {
                if self.center != Some(self.landmarks[0]) {
                    return Err(schema(
                        "low-cost record must carry its single point as the centre".into(),
                    ));
                }
            }
            KNEE_LANDMARKS => {}
            n => return Err(schema(format!("{n} landmarks; expected 1 or 16"))),
        }
        Ok(())
    }
}

fn header(with_exclude: bool) -> Vec<String> {
    let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for i in 0..KNEE_LANDMARKS {
        cols.push(format!("x{i}"));
        cols.push(format!("y{i}"));
    }
    if with_exclude {
        cols.push("exclude".into());
    }
    cols
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(file)
}

fn read_from(reader: impl std::io::Read) -> Result<Vec<AnnotationRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let head: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let with_exclude = if head == header(false) {
        false
    } else if head == header(true) {
        true
    } else {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected annotation header".into(),
        });
    };
    let width = head.len();

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| Error::Parse { line, message };
        if row.len() != width {
            return Err(parse_err(format!("{} fields, expected {width}", row.len())));
        }
        let num = |idx: usize| -> Result<Option<f64>> {
            let s = row[idx].trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| parse_err(format!("column {} is not a number: {s:?}", head[idx])))
        };
        let spacing_mm = num(1)?.ok_or_else(|| parse_err("missing spacing_mm".into()))?;
        let side = Side::parse(row[3].trim())
            .ok_or_else(|| parse_err(format!("side must be L or R, got {:?}", &row[3])))?;
        let kl: u8 = row[4]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("kl must be an integer, got {:?}", &row[4])))?;
        let center = match (num(5)?, num(6)?) {
            (Some(x), Some(y)) => Some(Point::new(x, y)),
            (None, None) => None,
            _ => return Err(parse_err("centre has only one coordinate".into())),
        };
        let mut landmarks = Vec::new();
        for i in 0..KNEE_LANDMARKS {
            match (num(7 + 2 * i)?, num(8 + 2 * i)?) {
                (Some(x), Some(y)) => landmarks.push(Point::new(x, y)),
                (None, None) => {}
                _ => return Err(parse_err(format!("landmark {i} has only one coordinate"))),
            }
        }
        if landmarks.is_empty() {
            match center {
                Some(c) => landmarks.push(c),
                None => {
                    return Err(Error::Schema {
                        line,
                        message: "row has neither landmarks nor a centre".into(),
                    })
                }
            }
        }
        let exclude = if with_exclude {
            match row[width - 1].trim() {
                "" | "0" => false,
                "1" => true,
                other => return Err(parse_err(format!("exclude must be 0 or 1, got {other:?}"))),
            }
        } else {
            false
        };
        let record = AnnotationRecord {
            image: PathBuf::from(&row[0]),
            spacing_mm,
            patient_id: row[2].to_string(),
            side,
            kl,
            center,
            landmarks,
            exclude,
        };
        record.validate(line)?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_annotations(records: &[AnnotationRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_to(records, file).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn write_to(records: &[AnnotationRecord], writer: impl std::io::Write) -> Result<()> {
    let with_exclude = records.iter().any(|r| r.exclude);
    let mut wtr = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::io("<annotations>", std::io::Error::other(e));
    wtr.write_record(header(with_exclude)).map_err(csv_err)?;
    for (i, r) in records.iter().enumerate() {
        r.validate(i as u64 + 2)?;
        let mut row: Vec<String> = vec![
            r.image.to_string_lossy().into_owned(),
            r.spacing_mm.to_string(),
            r.patient_id.clone(),
            r.side.code().to_string(),
            r.kl.to_string(),
        ];
        match r.center {
            Some(c) => {
                row.push(c.x.to_string());
                row.push(c.y.to_string());
            }
            None => row.extend([String::new(), String::new()]),
        }
        if r.is_high_cost() {
            for p in &r.landmarks {
                row.push(p.x.to_string());
                row.push(p.y.to_string());
            }
        } else {
            row.extend(std::iter::repeat_n(String::new(), 2 * KNEE_LANDMARKS));
        }
        if with_exclude {
            row.push(if r.exclude { "1" } else { "0" }.to_string());
        }
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<annotations>", e))?;
    Ok(())
}
