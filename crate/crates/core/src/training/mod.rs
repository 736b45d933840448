//! Training loop, optimizer, cross-validation splits and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod cv;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, transfer_init, Checkpoint};
pub use cv::{make_cv_splits, FoldSplit};

use crate::augment::{self, AugmentationConfig};
use crate::eval::{ErrorMatrix, FoldMetrics, ImageInfo, Subset};
use crate::imaging::{Image, LandmarkSet, Point, RoiTransform, Side};
use crate::losses::{mix_inputs, mixup_criterion, permute_batch, Criterion, LossKind, MixupDraw};
use crate::nn::{HourglassModel, Mode, ModelConfig, Tensor};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixupConfig {
    pub enabled: bool,
    pub alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 0.75,
        }
    }
}

/// Unit of the radial errors used for validation PCK.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalUnit {
    /// Source-image millimetres.
    Mm,
    /// Pixels of the `S x S` network input.
    Px,
}

impl std::str::FromStr for EvalUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mm" => Ok(EvalUnit::Mm),
            "px" => Ok(EvalUnit::Px),
            other => Err(Error::Config(format!("unknown evaluation unit `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub loss: LossKind,
    /// Measure loss differences in heatmap pixels rather than normalised units.
    pub pixel_loss: bool,
    pub mixup: MixupConfig,
    pub augment: AugmentationConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub eval_unit: EvalUnit,
    /// Landmarks whose mean PCK selects the best checkpoint.
    pub selection: Subset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            weight_decay: 0.0,
            epochs: 500,
            loss: LossKind::default(),
            pixel_loss: true,
            mixup: MixupConfig::default(),
            augment: AugmentationConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            eval_unit: EvalUnit::Mm,
            selection: Subset::Ablation,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be >= 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.mixup.enabled && !(self.mixup.alpha > 0.0 && self.mixup.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "mixup alpha {} must be > 0",
                self.mixup.alpha
            )));
        }
        if let Some(&id) = self
            .selection
            .ids(self.model.landmarks)
            .iter()
            .find(|&&i| i >= self.model.landmarks)
        {
            return Err(Error::Config(format!(
                "selection landmark {id} does not exist for M = {}",
                self.model.landmarks
            )));
        }
        self.augment.validate()?;
        self.model.validate()
    }

    pub fn criterion(&self) -> Criterion {
        let scale = if self.pixel_loss {
            self.model.heatmap_size() as f64
        } else {
            1.0
        };
        Criterion::new(self.loss, scale)
    }
}

/// One network input with its targets and the way back to the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `S x S` network input.
    pub image: Image,
    /// Targets in input pixels.
    pub targets: Vec<Point>,
    /// Source pixels to input pixels.
    pub transform: RoiTransform,
    pub source_spacing: f64,
    /// Targets in source pixels, in the source landmark order.
    pub source_targets: Vec<Point>,
    pub kl: u8,
    pub id: String,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub pck1: f64,
    pub pck15: f64,
    pub pck2: f64,
    pub pck25: f64,
    pub outliers: f64,
}

impl HistoryRow {
    fn new(epoch: usize, loss: f64, m: &FoldMetrics) -> Self {
        Self {
            epoch,
            loss,
            pck1: m.pck[0].1,
            pck15: m.pck[1].1,
            pck2: m.pck[2].1,
            pck25: m.pck[3].1,
            outliers: m.outliers,
        }
    }

    pub fn mean_pck(&self) -> f64 {
        (self.pck1 + self.pck15 + self.pck2 + self.pck25) / 4.0
    }
}

pub fn write_history(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<HistoryRow>> {
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

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the highest mean validation PCK (earliest on ties).
    pub best: Checkpoint,
    pub best_epoch: usize,
    /// Weights after the final epoch.
    pub last: Checkpoint,
    pub history: Vec<HistoryRow>,
}

/// Stacks `S x S` images into a `(B, 1, S, S)` tensor.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{} images",
                w,
                h,
                img.width(),
                img.height()
            )));
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// Targets in input pixels as a `(B, M, 2)` tensor of normalised coordinates.
pub fn target_tensor(targets: &[Vec<Point>], side: usize) -> Result<Tensor<f32>> {
    let m = targets.first().map_or(0, Vec::len);
    let s = side as f64;
    let mut data = Vec::with_capacity(targets.len() * m * 2);
    for t in targets {
        if t.len() != m {
            return Err(Error::Shape(
                "targets of different lengths in one batch".into(),
            ));
        }
        for p in t {
            data.push((p.x / s) as f32);
            data.push((p.y / s) as f32);
        }
    }
    Tensor::new(vec![targets.len(), m, 2], data)
}

/// Eval-mode predictions in input pixels, one point list per image.
pub fn predict(
    model: &mut HourglassModel<f32>,
    images: &[&Image],
    batch_size: usize,
) -> Result<Vec<Vec<Point>>> {
    let s = model.config().input_size as f64;
    let m = model.config().landmarks;
    let mut rng = rng::stream(0, &[rng::tag::DROPOUT]);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let y = model.forward(&batch_tensor(chunk)?, Mode::Eval, &mut rng)?;
        for row in y.data().chunks_exact(2 * m) {
            out.push(
                row.chunks_exact(2)
                    .map(|c| Point::new(c[0] as f64 * s, c[1] as f64 * s))
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Radial errors of eval-mode predictions for every sample, in `unit`.
pub fn evaluate_samples(
    model: &mut HourglassModel<f32>,
    samples: &[Sample],
    unit: EvalUnit,
    batch_size: usize,
) -> Result<ErrorMatrix> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let preds = predict(model, &images, batch_size)?;
    let mut matrix = ErrorMatrix::new(model.config().landmarks);
    for (s, pred) in samples.iter().zip(preds) {
        let errors: Vec<f64> = match unit {
            EvalUnit::Px => pred
                .iter()
                .zip(&s.targets)
                .map(|(p, t)| p.distance(*t))
                .collect(),
            EvalUnit::Mm => s
                .transform
                .inverse_set(&pred)
                .iter()
                .zip(&s.source_targets)
                .map(|(p, t)| p.distance(*t) * s.source_spacing)
                .collect(),
        };
        matrix.push(
            ImageInfo {
                id: s.id.clone(),
                kl: Some(s.kl),
                dataset: String::new(),
            },
            &errors,
        )?;
    }
    Ok(matrix)
}

/// Forward and backward passes for one mini-batch, accumulating
/// `lambda' * dL(p1, o1) + (1 - lambda') * dL(p2, o')` into the parameter
/// gradients. The mixed pass is skipped when `lambda' = 1`. Returns the loss.
pub fn train_step(
    model: &mut HourglassModel<f32>,
    criterion: &Criterion,
    x: &Tensor<f32>,
    targets: &Tensor<f32>,
    draw: &MixupDraw,
    rng: &mut rng::Rng,
) -> Result<f64> {
    let pred = model.forward(x, Mode::Train, rng)?;
    let (plain, mut grad) = criterion.loss_and_grad(&pred, targets)?;
    grad.scale(draw.lambda_prime as f32);
    model.backward(&grad)?;
    let mut mixed = 0.0;
    if draw.lambda_prime < 1.0 {
        let xm = mix_inputs(x, draw)?;
        let t2 = permute_batch(targets, &draw.permutation)?;
        let pred = model.forward(&xm, Mode::Train, rng)?;
        let (l, mut grad) = criterion.loss_and_grad(&pred, &t2)?;
        grad.scale((1.0 - draw.lambda_prime) as f32);
        model.backward(&grad)?;
        mixed = l;
    }
    Ok(mixup_criterion(plain, mixed, draw.lambda_prime))
}

fn diverged(
    epoch: usize,
    reason: String,
    best: &Option<(f64, usize, Checkpoint)>,
    history: &[HistoryRow],
) -> Error {
    Error::TrainingDiverged {
        epoch,
        reason,
        last_good: best.as_ref().map(|b| Box::new(b.2.clone())),
        history: history.to_vec(),
    }
}

/// Trains on `train` and selects the best epoch on `val` (or on `train` when
/// `val` is empty). `init` replaces the seeded initialisation, e.g. after
/// [`transfer_init`].
pub fn train(
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    init: Option<HourglassModel<f32>>,
    on_epoch: &mut dyn FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut model = match init {
        Some(m) if *m.config() != cfg.model => {
            return Err(Error::Config(
                "initial model configuration differs from the training configuration".into(),
            ))
        }
        Some(m) => m,
        None => HourglassModel::new(cfg.model.clone(), cfg.seed)?,
    };
    let s = cfg.model.input_size;
    let m = cfg.model.landmarks;
    for sample in train.iter().chain(val) {
        if sample.image.width() != s || sample.image.height() != s || sample.targets.len() != m {
            return Err(Error::Shape(format!(
                "sample {} is {}x{} with {} targets; model expects {s}x{s} with {m}",
                sample.id,
                sample.image.width(),
                sample.image.height(),
                sample.targets.len()
            )));
        }
    }
    let val = if val.is_empty() { train } else { val };
    let criterion = cfg.criterion();
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(
            cfg.seed,
            &[rng::tag::SHUFFLE, epoch as u64],
        ));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(idx.len());
            let mut targets = Vec::with_capacity(idx.len());
            for &i in idx {
                let sample = &train[i];
                let lms = LandmarkSet::pixel(sample.targets.clone(), &sample.image)?;
                let mut r = augment::sample_stream(cfg.seed, epoch, i);
                let (img, t) = augment::augment(&sample.image, &lms, &cfg.augment, &mut r)?;
                images.push(img);
                targets.push(t.into_points());
            }
            let x = batch_tensor(&images.iter().collect::<Vec<_>>())?;
            let y = target_tensor(&targets, s)?;
            let coords = [epoch as u64, b as u64];
            let mut drop_rng = rng::stream(cfg.seed, &[rng::tag::DROPOUT, coords[0], coords[1]]);
            model.zero_grad();
            let draw = if cfg.mixup.enabled {
                let mut r = rng::stream(cfg.seed, &[rng::tag::MIXUP, coords[0], coords[1]]);
                MixupDraw::sample(idx.len(), cfg.mixup.alpha, &mut r)?
            } else {
                MixupDraw::from_lambda(1.0, (0..idx.len()).collect())
            };
            let loss = train_step(&mut model, &criterion, &x, &y, &draw, &mut drop_rng)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, format!("loss is {loss}"), &best, &history));
            }
            match adam.step(&mut model, cfg.lr, cfg.weight_decay) {
                Err(Error::Divergence { name }) => {
                    return Err(diverged(
                        epoch,
                        format!("non-finite gradient for `{name}`"),
                        &best,
                        &history,
                    ))
                }
                other => other?,
            }
            loss_sum += loss * idx.len() as f64;
        }
        let errors = evaluate_samples(&mut model, val, cfg.eval_unit, cfg.batch_size)?;
        let metrics = errors.evaluate(&cfg.selection)?;
        let row = HistoryRow::new(epoch, loss_sum / train.len() as f64, &metrics);
        on_epoch(&row);
        let score = metrics.mean_pck();
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, Checkpoint::from_model(&model)));
        }
        history.push(row);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: Checkpoint::from_model(&model),
        history,
    })
}
