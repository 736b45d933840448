use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kneemark::ablation::{full_grid, run_point, table_grid, write_report, AblationRow};
use kneemark::augment::AugmentationConfig;
use kneemark::eval::{write_cdf_csv, ErrorMatrix, EvaluationReport, ImageInfo, Subset};
use kneemark::imaging::{read_annotations, AnnotationRecord, Side};
use kneemark::phantom::{generate, write_corpus, PhantomSpec};
use kneemark::pipeline::{
    group_predictions, prediction_rows, read_predictions, write_predictions, Dataset, Geometry,
    Pipeline, PipelineConfig, RunConfig,
};
use kneemark::training::{
    make_cv_splits, train, transfer_init, write_history, Checkpoint, Sample, TrainConfig,
    TrainOutcome,
};
use kneemark::Error;
use serde::{Deserialize, Serialize};

use crate::{
    AblateArgs, EvaluateArgs, GenPhantomArgs, Grid, InferArgs, TrainArgs, TrainLandmarksArgs,
};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct CvConfig {
    folds: usize,
    fold: usize,
    seed: u64,
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn set<T: ToString>(rc: &mut RunConfig, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        rc.set(key, v.to_string());
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

pub fn gen_phantom(a: &GenPhantomArgs) -> Result<()> {
    let mut rc = run_config(a.config.as_deref())?;
    set(&mut rc, "phantom.count", &a.count);
    set(&mut rc, "phantom.seed", &a.seed);
    set(&mut rc, "phantom.side", &a.side);
    set(&mut rc, "phantom.spacing_mm", &a.spacing);
    if a.bilateral {
        rc.set("phantom.bilateral", "true");
    }
    let spec: PhantomSpec = rc.apply("phantom", &PhantomSpec::default())?;
    let csv = write_corpus(&generate(&spec)?, &a.out)?;
    println!("{}", csv.display());
    Ok(())
}

struct Resolved {
    train: TrainConfig,
    cv: CvConfig,
    geometry: Geometry,
}

fn resolve(a: &TrainArgs) -> Result<Resolved> {
    let mut rc = run_config(a.config.as_deref())?;
    set(&mut rc, "train.epochs", &a.epochs);
    set(&mut rc, "train.lr", &a.lr);
    set(&mut rc, "train.batch_size", &a.batch_size);
    set(&mut rc, "train.weight_decay", &a.weight_decay);
    set(&mut rc, "train.seed", &a.seed);
    set(&mut rc, "train.eval_unit", &a.eval_unit);
    set(&mut rc, "model.width", &a.width);
    set(&mut rc, "model.depth", &a.depth);
    set(&mut rc, "model.input_size", &a.input_size);
    set(&mut rc, "model.dropout", &a.dropout);
    set(&mut rc, "model.block", &a.block);
    set(&mut rc, "loss.kind", &a.loss);
    set(&mut rc, "mixup.alpha", &a.mixup_alpha);
    if a.no_mixup {
        rc.set("mixup.enabled", "off");
    }
    set(&mut rc, "cv.folds", &a.folds);
    set(&mut rc, "cv.fold", &a.fold);
    set(&mut rc, "pipeline.roi_spacing", &a.roi_spacing);
    set(&mut rc, "pipeline.landmark_spacing", &a.landmark_spacing);
    set(&mut rc, "pipeline.crop_mm", &a.crop_mm);

    let mut cfg: TrainConfig = rc.apply("train", &TrainConfig::default())?;
    cfg.model = rc.apply("model", &cfg.model)?;
    cfg.mixup = rc.apply("mixup", &cfg.mixup)?;
    cfg.augment = rc.apply("augment", &cfg.augment)?;
    cfg.loss = rc.loss(cfg.loss)?;
    if a.no_augment {
        cfg.augment = AugmentationConfig::disabled();
    }
    let cv = rc.apply(
        "cv",
        &CvConfig {
            seed: cfg.seed,
            ..CvConfig::default()
        },
    )?;
    let pipeline: PipelineConfig = rc.apply("pipeline", &PipelineConfig::default())?;
    pipeline.validate()?;
    Ok(Resolved {
        train: cfg,
        cv,
        geometry: Geometry::from(&pipeline),
    })
}

fn split(records: &[AnnotationRecord], cv: &CvConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    if cv.folds == 0 {
        return Ok(((0..records.len()).collect(), Vec::new()));
    }
    if cv.fold >= cv.folds {
        bail!("fold {} outside 0..{}", cv.fold, cv.folds);
    }
    Ok(make_cv_splits(records, cv.folds, cv.seed)?.partition(cv.fold))
}

fn finish(a: &TrainArgs, result: kneemark::Result<TrainOutcome>) -> Result<()> {
    let history = a
        .history
        .clone()
        .unwrap_or_else(|| a.out.join("history.csv"));
    let outcome = match result {
        Ok(o) => o,
        Err(Error::TrainingDiverged {
            epoch,
            reason,
            last_good,
            history: rows,
        }) => {
            if let Some(ckpt) = last_good {
                ckpt.save(&a.out)?;
                write_history(&rows, &history)?;
            }
            bail!("training diverged at epoch {epoch}: {reason}");
        }
        Err(e) => return Err(e.into()),
    };
    outcome.best.save(&a.out)?;
    write_history(&outcome.history, &history)?;
    let row = &outcome.history[outcome.best_epoch - 1];
    println!(
        "best epoch {} of {}: PCK {:.2} / {:.2} / {:.2} / {:.2}, outliers {:.2}",
        outcome.best_epoch,
        outcome.history.len(),
        row.pck1,
        row.pck15,
        row.pck2,
        row.pck25,
        row.outliers
    );
    Ok(())
}

fn progress(verbose: bool) -> impl FnMut(&kneemark::training::HistoryRow) {
    move |r| {
        if verbose {
            eprintln!(
                "epoch {:>4}  loss {:.5}  pck {:.2} {:.2} {:.2} {:.2}",
                r.epoch, r.loss, r.pck1, r.pck15, r.pck2, r.pck25
            );
        }
    }
}

pub fn train_roi(a: &TrainArgs) -> Result<()> {
    let Resolved {
        train: mut cfg,
        cv,
        geometry,
    } = resolve(a)?;
    cfg.model.landmarks = 1;
    cfg.selection = Subset::All;
    let ds = Dataset::load(&a.annotations)?;
    let (tr, va) = split(&ds.records, &cv)?;
    let s = cfg.model.input_size;
    let train_set = ds.roi_samples(&tr, &geometry, s)?;
    let val_set = ds.roi_samples(&va, &geometry, s)?;
    let result = train(&train_set, &val_set, &cfg, None, &mut progress(a.verbose));
    finish(a, result)
}

fn landmark_sets(
    a: &TrainArgs,
    cfg: &TrainConfig,
    cv: &CvConfig,
    geometry: &Geometry,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let ds = Dataset::load(&a.annotations)?;
    let (tr, va) = split(&ds.records, cv)?;
    let s = cfg.model.input_size;
    Ok((
        ds.landmark_samples(&tr, geometry, s)?,
        ds.landmark_samples(&va, geometry, s)?,
    ))
}

pub fn train_landmarks(a: &TrainLandmarksArgs) -> Result<()> {
    let Resolved {
        train: cfg,
        cv,
        geometry,
    } = resolve(&a.train)?;
    let (train_set, val_set) = landmark_sets(&a.train, &cfg, &cv, &geometry)?;
    let init = match &a.pretrained {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            Some(transfer_init(&cfg.model, &ckpt, cfg.seed)?)
        }
        None => None,
    };
    let result = train(
        &train_set,
        &val_set,
        &cfg,
        init,
        &mut progress(a.train.verbose),
    );
    finish(&a.train, result)
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let mut rc = run_config(a.config.as_deref())?;
    set(
        &mut rc,
        "pipeline.roi_checkpoint",
        &a.roi.as_deref().map(path_str),
    );
    set(
        &mut rc,
        "pipeline.landmark_checkpoint",
        &a.landmarks.as_deref().map(path_str),
    );
    set(&mut rc, "pipeline.input", &a.input.as_deref().map(path_str));
    set(&mut rc, "pipeline.output", &a.out.as_deref().map(path_str));
    set(&mut rc, "pipeline.stages", &a.stages);
    set(&mut rc, "pipeline.roi_spacing", &a.roi_spacing);
    set(&mut rc, "pipeline.landmark_spacing", &a.landmark_spacing);
    set(&mut rc, "pipeline.crop_mm", &a.crop_mm);
    let cfg: PipelineConfig = rc.apply("pipeline", &PipelineConfig::default())?;
    for (name, p) in [
        ("--roi", &cfg.roi_checkpoint),
        ("--landmarks", &cfg.landmark_checkpoint),
        ("--input", &cfg.input),
        ("--out", &cfg.output),
    ] {
        if p.as_os_str().is_empty() {
            bail!("{name} is required");
        }
    }
    let mut pipeline = Pipeline::load(&cfg)?;
    let ds = Dataset::load(&cfg.input)?;
    let mut rows = Vec::new();
    for (i, img) in ds.images.iter().enumerate() {
        let Some(first) = ds.image_of.iter().position(|&k| k == i) else {
            continue;
        };
        let knees = pipeline
            .infer(img, ds.layout(first))
            .with_context(|| format!("image {}", ds.records[first].image.display()))?;
        rows.extend(prediction_rows(&path_str(&ds.records[first].image), &knees));
    }
    write_predictions(&rows, &cfg.output)?;
    println!("{} predictions for {} images", rows.len(), ds.images.len());
    Ok(())
}

fn error_matrix(
    records: &[&AnnotationRecord],
    preds: &BTreeMap<(String, Side), Vec<kneemark::imaging::Point>>,
    dataset: &str,
) -> Result<ErrorMatrix> {
    let m = records
        .first()
        .map(|r| r.landmarks.len())
        .context("no annotated knees")?;
    let mut matrix = ErrorMatrix::new(m);
    for r in records {
        let key = (path_str(&r.image), r.side);
        let pred = preds
            .get(&key)
            .with_context(|| format!("no prediction for {} {}", key.0, r.side.code()))?;
        if pred.len() != r.landmarks.len() {
            bail!(
                "{} {}: {} predicted landmarks, {} annotated",
                key.0,
                r.side.code(),
                pred.len(),
                r.landmarks.len()
            );
        }
        let errors: Vec<f64> = pred
            .iter()
            .zip(&r.landmarks)
            .map(|(p, q)| p.distance(*q) * r.spacing_mm)
            .collect();
        matrix.push(
            ImageInfo {
                id: format!("{}:{}", key.0, r.side.code()),
                kl: Some(r.kl),
                dataset: dataset.to_string(),
            },
            &errors,
        )?;
    }
    Ok(matrix)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let subset: Subset = a.subset.parse()?;
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        a.annotations
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let records: Vec<AnnotationRecord> = read_annotations(&a.annotations)?
        .into_iter()
        .filter(|r| !r.exclude)
        .collect();
    let preds = group_predictions(&read_predictions(&a.predictions)?)?;
    let all: Vec<&AnnotationRecord> = records.iter().collect();
    let full = error_matrix(&all, &preds, &dataset)?;
    let folds = match a.folds {
        None | Some(0) => vec![full.evaluate(&subset)?],
        Some(k) => {
            let split = make_cv_splits(&records, k, a.seed)?;
            (0..k)
                .map(|f| {
                    let val: Vec<&AnnotationRecord> =
                        split.partition(f).1.iter().map(|&i| &records[i]).collect();
                    Ok(error_matrix(&val, &preds, &dataset)?.evaluate(&subset)?)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let report = EvaluationReport::from_folds(&dataset, &subset, folds)?;
    print!("{}", report.summary_table());
    if let Some(p) = &a.json {
        report.write_json(p)?;
    }
    if let Some(p) = &a.csv {
        report.write_csv(p)?;
    }
    if let Some(p) = &a.cdf {
        write_cdf_csv(
            &full.cumulative_distribution(&subset.ids(full.landmarks()))?,
            p,
        )?;
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let points = match a.grid {
        Grid::Table => table_grid(),
        Grid::Full => full_grid(),
    };
    let out: PathBuf = a.train.out.clone();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    if a.dry_run {
        let rows: Vec<AblationRow> = points.iter().map(AblationRow::planned).collect();
        for p in &points {
            println!("{}", p.label());
        }
        write_report(&rows, &out)?;
        return Ok(());
    }
    if a.pretrained.is_none() && points.iter().any(|p| p.finetune) {
        bail!("the grid has fine-tuning rows; pass --pretrained <roi-ckpt>");
    }
    let Resolved {
        train: base,
        cv,
        geometry,
    } = resolve(&a.train)?;
    let pretrained = match &a.pretrained {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let (train_set, val_set) = landmark_sets(&a.train, &base, &cv, &geometry)?;
    let mut rows = Vec::with_capacity(points.len());
    for p in &points {
        let row = run_point(p, &base, &train_set, &val_set, pretrained.as_ref())
            .with_context(|| p.label())?;
        println!(
            "{}  PCK@2 {:.2}  outliers {:.2}",
            p.label(),
            row.pck2.unwrap_or_default(),
            row.outliers.unwrap_or_default()
        );
        rows.push(row);
        write_report(&rows, &out)?;
    }
    Ok(())
}
