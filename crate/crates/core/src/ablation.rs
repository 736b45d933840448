//! Ablation grid over loss, block, MixUp, weight decay, dropout, target
//! jitter, cutout and fine-tuning.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::Subset;
use crate::losses::{LossKind, WingParams};
use crate::nn::{BlockKind, ModelConfig};
use crate::training::{evaluate_samples, train, transfer_init, Checkpoint, Sample, TrainConfig};
use crate::{Error, Result};

pub const LOSSES: [&str; 4] = ["l1", "l2", "elastic", "wing"];
pub const BLOCKS: [BlockKind; 2] = [BlockKind::Hmp, BlockKind::Bottleneck];
pub const MIXUP_ALPHAS: [f64; 5] = [0.0, 0.1, 0.2, 0.5, 0.75];
pub const WEIGHT_DECAYS: [f64; 2] = [0.0, 1e-4];
pub const CUTOUT_PCTS: [u32; 4] = [0, 5, 10, 25];

/// One configuration of the grid. `mixup_alpha = 0` disables MixUp and
/// `cutout_pct = 0` disables cutout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub loss: String,
    pub block: BlockKind,
    pub mixup_alpha: f64,
    pub weight_decay: f64,
    pub dropout: bool,
    pub jitter: bool,
    pub cutout_pct: u32,
    pub finetune: bool,
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl AblationPoint {
    /// Wing loss, HMP block, no MixUp, weight decay 1e-4, dropout, nothing else.
    pub fn baseline() -> Self {
        Self {
            loss: "wing".into(),
            block: BlockKind::Hmp,
            mixup_alpha: 0.0,
            weight_decay: 1e-4,
            dropout: true,
            jitter: false,
            cutout_pct: 0,
            finetune: false,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "loss={} block={} alpha={} wd={} dropout={} jitter={} cutout={} finetune={}",
            self.loss,
            match self.block {
                BlockKind::Hmp => "hmp",
                BlockKind::Bottleneck => "bottleneck",
            },
            self.mixup_alpha,
            self.weight_decay,
            on_off(self.dropout),
            on_off(self.jitter),
            self.cutout_pct,
            on_off(self.finetune)
        )
    }

    /// `base` with this point's settings. Enabled options that are zero in
    /// `base` fall back to the library defaults.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.loss = match self.loss.as_str() {
            "l1" => LossKind::L1,
            "l2" => LossKind::L2,
            "elastic" => LossKind::Elastic,
            _ => match base.loss {
                LossKind::Wing(p) => LossKind::Wing(p),
                _ => LossKind::Wing(WingParams::default()),
            },
        };
        cfg.model.block = self.block;
        cfg.mixup.enabled = self.mixup_alpha > 0.0;
        if cfg.mixup.enabled {
            cfg.mixup.alpha = self.mixup_alpha;
        }
        cfg.weight_decay = self.weight_decay;
        cfg.model.dropout = match (self.dropout, base.model.dropout) {
            (false, _) => 0.0,
            (true, 0.0) => ModelConfig::default().dropout,
            (true, p) => p,
        };
        let defaults = crate::augment::AugmentationConfig::default();
        cfg.augment.jitter_px = match (self.jitter, base.augment.jitter_px) {
            (false, _) => 0.0,
            (true, 0.0) => defaults.jitter_px,
            (true, j) => j,
        };
        if self.cutout_pct == 0 {
            cfg.augment.cutout_prob = 0.0;
        } else {
            cfg.augment.cutout_fraction = self.cutout_pct as f64 / 100.0;
            if cfg.augment.cutout_prob == 0.0 {
                cfg.augment.cutout_prob = defaults.cutout_prob;
            }
        }
        cfg
    }
}

/// The model-selection sequence: losses, block, MixUp with and
/// without weight decay, dropout, jitter, cutout and fine-tuning.
pub fn table_grid() -> Vec<AblationPoint> {
    let base = AblationPoint::baseline();
    let mut rows = Vec::new();
    for loss in ["l2", "l1", "elastic", "wing"] {
        rows.push(AblationPoint {
            loss: loss.into(),
            ..base.clone()
        });
    }
    rows.push(AblationPoint {
        block: BlockKind::Bottleneck,
        ..base.clone()
    });
    for wd in [1e-4, 0.0] {
        for alpha in [0.1, 0.2, 0.5, 0.75] {
            rows.push(AblationPoint {
                mixup_alpha: alpha,
                weight_decay: wd,
                ..base.clone()
            });
        }
    }
    let best = AblationPoint {
        mixup_alpha: 0.75,
        weight_decay: 0.0,
        ..base
    };
    rows.push(AblationPoint {
        dropout: false,
        ..best.clone()
    });
    rows.push(AblationPoint {
        jitter: true,
        ..best.clone()
    });
    for pct in [5, 10, 25] {
        rows.push(AblationPoint {
            cutout_pct: pct,
            ..best.clone()
        });
    }
    rows.push(AblationPoint {
        cutout_pct: 10,
        finetune: true,
        ..best
    });
    rows
}

/// Every combination of the axes.
pub fn full_grid() -> Vec<AblationPoint> {
    let mut rows = Vec::new();
    for loss in LOSSES {
        for block in BLOCKS {
            for alpha in MIXUP_ALPHAS {
                for wd in WEIGHT_DECAYS {
                    for dropout in [true, false] {
                        for jitter in [false, true] {
                            for cutout_pct in CUTOUT_PCTS {
                                for finetune in [false, true] {
                                    rows.push(AblationPoint {
                                        loss: loss.into(),
                                        block,
                                        mixup_alpha: alpha,
                                        weight_decay: wd,
                                        dropout,
                                        jitter,
                                        cutout_pct,
                                        finetune,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    rows
}

/// One report line: the configuration and its validation metrics. Metrics
/// are empty for dry runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub loss: String,
    pub block: String,
    pub mixup_alpha: f64,
    pub weight_decay: f64,
    pub dropout: bool,
    pub jitter: bool,
    pub cutout_pct: u32,
    pub finetune: bool,
    pub best_epoch: Option<usize>,
    pub pck1: Option<f64>,
    pub pck15: Option<f64>,
    pub pck2: Option<f64>,
    pub pck25: Option<f64>,
    pub outliers: Option<f64>,
}

impl AblationRow {
    pub fn planned(p: &AblationPoint) -> Self {
        Self {
            loss: p.loss.clone(),
            block: match p.block {
                BlockKind::Hmp => "hmp".into(),
                BlockKind::Bottleneck => "bottleneck".into(),
            },
            mixup_alpha: p.mixup_alpha,
            weight_decay: p.weight_decay,
            dropout: p.dropout,
            jitter: p.jitter,
            cutout_pct: p.cutout_pct,
            finetune: p.finetune,
            best_epoch: None,
            pck1: None,
            pck15: None,
            pck2: None,
            pck25: None,
            outliers: None,
        }
    }
}

/// Trains `point` applied to `base` and scores the selected checkpoint on
/// `val` over the ablation landmark subset. Fine-tuning rows start from
/// `pretrained`.
pub fn run_point(
    point: &AblationPoint,
    base: &TrainConfig,
    train_set: &[Sample],
    val: &[Sample],
    pretrained: Option<&Checkpoint>,
) -> Result<AblationRow> {
    let cfg = point.apply(base);
    let init = match (point.finetune, pretrained) {
        (false, _) => None,
        (true, Some(ckpt)) => Some(transfer_init(&cfg.model, ckpt, cfg.seed)?),
        (true, None) => {
            return Err(Error::InvalidArgument(
                "fine-tuning rows need a pretrained ROI checkpoint".into(),
            ))
        }
    };
    let outcome = train(train_set, val, &cfg, init, &mut |_| {})?;
    let mut model = outcome.best.to_model::<f32>()?;
    let scored = if val.is_empty() { train_set } else { val };
    let metrics = evaluate_samples(&mut model, scored, cfg.eval_unit, cfg.batch_size)?
        .evaluate(&Subset::Ablation)?;
    let pck = |k: usize| Some(metrics.pck[k].1);
    Ok(AblationRow {
        best_epoch: Some(outcome.best_epoch),
        pck1: pck(0),
        pck15: pck(1),
        pck2: pck(2),
        pck25: pck(3),
        outliers: Some(metrics.outliers),
        ..AblationRow::planned(point)
    })
}

pub fn write_report(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
