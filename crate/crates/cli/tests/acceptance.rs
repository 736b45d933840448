//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kneemark::augment::{
    augment, photometric, sample_homography, sample_stream, warp, AugmentationConfig,
};
use kneemark::eval::{ErrorMatrix, ImageInfo, Subset, OUTLIER_MM, PCK_RADII_MM};
use kneemark::imaging::{AnnotationRecord, Image, LandmarkSet, Point, Side};
use kneemark::losses::{mix_inputs, mixup_batch, MixupDraw, WingParams};
use kneemark::nn::layers::{BatchNorm2d, Conv2d, Dropout, MaxPool2, Relu, Upsample2};
use kneemark::nn::ops::{self, Mode};
use kneemark::nn::{
    check_module, BlockKind, GradcheckOptions, GradcheckReport, HourglassModel, ModelConfig,
    Module, Param, ResidualBlock, Tensor,
};
use kneemark::phantom::{generate, PhantomSpec};
use kneemark::pipeline::{landmark_sample, roi_sample, Geometry, Layout, Pipeline};
use kneemark::rng::{self, Rng};
use kneemark::training::checkpoint::{BLOB_FILE, MANIFEST_FILE};
use kneemark::training::*;
use kneemark::Error;
use rand::Rng as _;

const GRAD_TOL: f64 = 1e-4;
const GRAD_TOL_MODEL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const UNIFORM_TOL: f64 = 1e-12;
const SHIFT_TOL: f64 = 1e-10;
const WING_CONTINUITY_TOL: f64 = 1e-12;
const WING_EPS: f64 = 12.2395;
const WING_EPS_TOL: f64 = 1e-3;
const WING_BOUNDARY_TOL: f64 = 1e-9;
const MIXUP_DRAWS: usize = 100_000;
const HOMOGRAPHIES: usize = 100;
const SPIKE_TOL_PX: f64 = 1.0;
const INVERSE_TOL_PX: f64 = 1e-6;
const METRIC_MATRICES: u64 = 1000;
const PCK_SUM_TOL: f64 = 1e-12;
const CV_PATIENTS: usize = 200;
const CV_FOLDS: usize = 5;
const OVERFIT_EPOCHS: usize = 300;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const PCK_RADIUS_PX: f64 = 2.0;
const TRANSFER_ROI_EPOCHS: usize = 30;
const TRANSFER_MAX_EPOCHS: usize = 80;
const TRANSFER_THRESHOLD_PCT: f64 = 50.0;
const TRANSFER_SEEDS: u64 = 5;
const TRANSFER_MIN_WINS: usize = 4;
const TRANSFER_BUDGET: Duration = Duration::from_secs(1800);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Debug>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| format!("{e:?}"))
}

// 1. gradients

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[99]);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

struct SoftArgmax {
    beta: f64,
    cache: Option<(Tensor<f64>, Tensor<f64>)>,
}

impl Module<f64> for SoftArgmax {
    fn forward(&mut self, x: &Tensor<f64>, _: Mode, _: &mut Rng) -> kneemark::Result<Tensor<f64>> {
        let (c, p) = ops::soft_argmax_forward(x, self.beta)?;
        self.cache = Some((c.clone(), p));
        Ok(c)
    }

    fn backward(&mut self, dy: &Tensor<f64>) -> kneemark::Result<Tensor<f64>> {
        let (c, p) = self.cache.take().expect("forward first");
        ops::soft_argmax_backward(dy, &p, &c, self.beta)
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<f64>)) {}

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<f64>)) {}
}

struct GradLog {
    worst: f64,
    checked: usize,
    kinks: usize,
}

impl GradLog {
    fn check<M: Module<f64>>(
        &mut self,
        what: &str,
        m: &mut M,
        x: &Tensor<f64>,
        opts: GradcheckOptions,
        tol: f64,
    ) -> Result<(), String> {
        let r: GradcheckReport = ok(check_module(m, x, &opts))?;
        self.checked += r.checked;
        self.kinks += r.kinks;
        ensure(r.checked > 0, || format!("{what}: nothing checked"))?;
        ensure(r.max_rel_error < tol, || {
            format!(
                "{what}: relative error {:e} at {}",
                r.max_rel_error, r.worst
            )
        })?;
        if tol == GRAD_TOL {
            self.worst = self.worst.max(r.max_rel_error);
        }
        Ok(())
    }
}

fn opts(mode: Mode) -> GradcheckOptions {
    GradcheckOptions {
        mode,
        ..GradcheckOptions::default()
    }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut log = GradLog {
        worst: 0.0,
        checked: 0,
        kinks: 0,
    };
    let mut r = rng::stream(7, &[]);
    for (k, stride, pad) in [(3, 1, 1), (1, 1, 0), (7, 2, 3)] {
        let mut conv = Conv2d::<f64>::new(3, 4, k, stride, pad, &mut r);
        log.check(
            "conv2d",
            &mut conv,
            &random(&[2, 3, 9, 9], 1),
            opts(Mode::Train),
            GRAD_TOL,
        )?;
    }
    let x = random(&[3, 3, 4, 5], 2);
    for mode in [Mode::Train, Mode::Eval] {
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.visit_mut("", &mut |n, p: &mut Param<f64>| {
            if n == "running_var" {
                p.value.data_mut().copy_from_slice(&[0.5, 2.0, 1.2]);
            }
        });
        log.check("batchnorm2d", &mut bn, &x, opts(mode), GRAD_TOL)?;
    }
    let x = random(&[2, 2, 6, 8], 3);
    log.check(
        "maxpool",
        &mut MaxPool2::default(),
        &x,
        opts(Mode::Train),
        GRAD_TOL,
    )?;
    log.check("upsample", &mut Upsample2, &x, opts(Mode::Train), GRAD_TOL)?;
    log.check(
        "relu",
        &mut Relu::default(),
        &x,
        opts(Mode::Train),
        GRAD_TOL,
    )?;
    log.check(
        "dropout",
        &mut Dropout::new(0.3),
        &x,
        opts(Mode::Eval),
        GRAD_TOL,
    )?;
    let x = random(&[2, 8, 6, 6], 5);
    for (what, kind) in [
        ("bottleneck", BlockKind::Bottleneck),
        ("hmp", BlockKind::Hmp),
    ] {
        for width in [8, 16] {
            let mut block = ok(ResidualBlock::<f64>::new(kind, 8, width, &mut r))?;
            log.check(what, &mut block, &x, opts(Mode::Train), GRAD_TOL)?;
        }
    }
    for beta in [0.5, 1.0, 3.0] {
        let mut sa = SoftArgmax { beta, cache: None };
        log.check(
            "soft-argmax",
            &mut sa,
            &random(&[2, 3, 5, 7], 6),
            opts(Mode::Train),
            GRAD_TOL,
        )?;
    }
    let mut model_worst: f64 = 0.0;
    for block in [BlockKind::Hmp, BlockKind::Bottleneck] {
        let cfg = ModelConfig {
            width: 4,
            depth: 1,
            landmarks: 2,
            input_size: 16,
            block,
            ..ModelConfig::default()
        };
        let mut model = ok(HourglassModel::<f64>::new(cfg, 3))?;
        model.set_input_grad(true);
        let o = GradcheckOptions {
            max_per_tensor: Some(24),
            ..opts(Mode::Eval)
        };
        let report = ok(check_module(&mut model, &random(&[2, 1, 16, 16], 8), &o))?;
        ensure(report.max_rel_error < GRAD_TOL_MODEL, || {
            format!(
                "model {block:?}: {:e} at {}",
                report.max_rel_error, report.worst
            )
        })?;
        log.checked += report.checked;
        log.kinks += report.kinks;
        model_worst = model_worst.max(report.max_rel_error);
    }
    let elapsed = t0.elapsed();
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "layers max rel {:.1e} (< {GRAD_TOL:e}), model max rel {model_worst:.1e} (< {GRAD_TOL_MODEL:e}), {} elements, {} kinks skipped, {:.1?}",
        log.worst, log.checked, log.kinks, elapsed
    ))
}

// 2. soft-argmax

fn heatmap(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
    Tensor::new(
        vec![1, 1, h, w],
        (0..h * w).map(|k| f(k / w, k % w)).collect(),
    )
    .unwrap()
}

fn coords(t: &Tensor<f64>, beta: f64) -> Result<(f64, f64), String> {
    let (c, _) = ok(ops::soft_argmax_forward(t, beta))?;
    Ok((c.data()[0], c.data()[1]))
}

fn soft_argmax_analytics() -> Outcome {
    for (h, w) in [(4, 4), (6, 10), (64, 64), (7, 3)] {
        let (x, y) = coords(&heatmap(h, w, |_, _| 0.3), 1.0)?;
        let (ex, ey) = (
            (w as f64 - 1.0) / (2.0 * w as f64),
            (h as f64 - 1.0) / (2.0 * h as f64),
        );
        ensure(
            (x - ex).abs() < UNIFORM_TOL && (y - ey).abs() < UNIFORM_TOL,
            || format!("uniform {h}x{w}: ({x}, {y}) vs ({ex}, {ey})"),
        )?;
    }
    let mut r = rng::stream(21, &[]);
    let mut worst_shift: f64 = 0.0;
    for _ in 0..200 {
        let vals: Vec<f64> = (0..48).map(|_| r.random_range(-5.0..5.0)).collect();
        let shift = r.random_range(-100.0..100.0);
        let beta = r.random_range(0.1..4.0);
        let a = coords(&heatmap(6, 8, |j, i| vals[j * 8 + i]), beta)?;
        let b = coords(&heatmap(6, 8, |j, i| vals[j * 8 + i] + shift), beta)?;
        worst_shift = worst_shift.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
    }
    ensure(worst_shift < SHIFT_TOL, || {
        format!("shift changed output by {worst_shift:e}")
    })?;
    let spike = heatmap(8, 8, |j, i| if (i, j) == (5, 2) { 1.0 } else { 0.0 });
    let target = (5.0 / 8.0, 2.0 / 8.0);
    let mut d = Vec::new();
    for beta in [1.0, 2.0, 4.0, 8.0, 16.0] {
        let (x, y) = coords(&spike, beta)?;
        d.push(((x - target.0).powi(2) + (y - target.1).powi(2)).sqrt());
    }
    ensure(d.windows(2).all(|w| w[1] < w[0]), || {
        format!("distances not decreasing: {d:?}")
    })?;
    Ok(format!(
        "shift error {worst_shift:.1e}, distance over beta {d:.3?}"
    ))
}

// 3. wing loss

fn wing_loss() -> Outcome {
    let mut worst: f64 = 0.0;
    for (w, c) in [(15.0, 3.0), (10.0, 2.0), (0.5, 0.1), (40.0, 39.0)] {
        let p = ok(WingParams::from_w_c(w, c))?;
        ensure(
            (p.c - (p.w - p.w * (p.w / p.eps).ln_1p())).abs() < WING_CONTINUITY_TOL,
            || format!("C != w - w ln(1 + w/eps) for w {w}"),
        )?;
        let log_branch = p.w * (p.w / p.eps).ln_1p();
        let linear_branch = p.w - p.c;
        worst = worst.max((log_branch - linear_branch).abs());
        ensure(
            (p.value(w) - linear_branch).abs() < WING_CONTINUITY_TOL,
            || format!("value at w {w}"),
        )?;
    }
    ensure(worst < WING_CONTINUITY_TOL, || {
        format!("jump {worst:e} at |d| = w")
    })?;
    let p = ok(WingParams::from_w_c(15.0, 3.0))?;
    ensure((p.eps - WING_EPS).abs() <= WING_EPS_TOL, || {
        format!("eps {}", p.eps)
    })?;
    ensure((p.value(15.0) - 12.0).abs() <= WING_BOUNDARY_TOL, || {
        format!("boundary {}", p.value(15.0))
    })?;
    ensure((p.value(-15.0) - 12.0).abs() <= WING_BOUNDARY_TOL, || {
        "boundary at -w".to_string()
    })?;
    for d in [15.000001, 16.0, 100.0, 1e6] {
        ensure(p.slope(d) == 1.0 && p.slope(-d) == -1.0, || {
            format!("slope at {d}: {}", p.slope(d))
        })?;
    }
    Ok(format!(
        "eps {:.6}, boundary {}, jump {worst:.1e}",
        p.eps,
        p.value(15.0)
    ))
}

// 4. mixup

fn phantom_spec(count: usize, seed: u64, bilateral: bool) -> PhantomSpec {
    PhantomSpec {
        count,
        seed,
        side: 240,
        spacing_mm: 0.6,
        bilateral,
        ..PhantomSpec::default()
    }
}

fn coarse_geometry() -> Geometry {
    Geometry {
        landmark_spacing: 0.6,
        ..Geometry::default()
    }
}

fn grads(model: &HourglassModel<f32>) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    model.visit(&mut |_, p| {
        if p.trainable {
            out.push(p.grad.data().iter().map(|v| v.to_bits()).collect())
        }
    });
    out
}

fn mixup() -> Outcome {
    let mut r = rng::stream(11, &[]);
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for _ in 0..MIXUP_DRAWS {
        let d = ok(MixupDraw::sample(4, 0.75, &mut r))?;
        lo = lo.min(d.lambda_prime);
        hi = hi.max(d.lambda_prime);
    }
    ensure(lo >= 0.5 && hi <= 1.0, || {
        format!("lambda' in [{lo}, {hi}]")
    })?;

    let samples: Vec<Sample> = ok(generate(&phantom_spec(4, 7, false)))?
        .iter()
        .map(|s| landmark_sample(&s.image, &s.records[0], &coarse_geometry(), 16).unwrap())
        .collect();
    let cfg = TrainConfig {
        model: ModelConfig {
            width: 4,
            depth: 1,
            input_size: 16,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let x = ok(batch_tensor(&images))?;
    let t: Vec<Vec<Point>> = samples.iter().map(|s| s.targets.clone()).collect();
    let y = ok(target_tensor(&t, 16))?;
    let criterion = cfg.criterion();

    // plain step by hand: forward, loss, backward
    let mut plain = ok(HourglassModel::<f32>::new(cfg.model.clone(), 1))?;
    let pred = ok(plain.forward(&x, Mode::Train, &mut rng::stream(1, &[])))?;
    let (l_plain, g) = ok(criterion.loss_and_grad(&pred, &y))?;
    ok(plain.backward(&g))?;

    let mut mixed = ok(HourglassModel::<f32>::new(cfg.model.clone(), 1))?;
    let draw = MixupDraw::from_lambda(1.0, vec![2, 0, 3, 1]);
    let l_mixed = ok(train_step(
        &mut mixed,
        &criterion,
        &x,
        &y,
        &draw,
        &mut rng::stream(1, &[]),
    ))?;
    ensure(l_plain.to_bits() == l_mixed.to_bits(), || {
        format!("loss {l_plain} vs {l_mixed}")
    })?;
    ensure(grads(&plain) == grads(&mixed), || {
        "gradients differ".to_string()
    })?;
    ensure(ok(mix_inputs(&x, &draw))? == x, || {
        "lambda' = 1 changed the inputs".to_string()
    })?;

    let row = [0.25f64, 0.5, 0.75, 0.125];
    let dup = ok(Tensor::new(vec![5, 4], row.repeat(5)))?;
    for _ in 0..100 {
        let m = ok(mixup_batch(&dup, &dup, 0.75, &mut r))?;
        let max = m
            .inputs
            .data()
            .iter()
            .zip(dup.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(max < 1e-15, || format!("duplicate batch moved by {max:e}"))?;
    }
    Ok(format!(
        "lambda' range [{lo:.4}, {hi:.4}] over {MIXUP_DRAWS} draws, unit lambda bit-identical"
    ))
}

// 5. augmentation

fn argmax(img: &Image) -> Point {
    let (k, _) = img
        .pixels()
        .iter()
        .enumerate()
        .fold((0, f32::MIN), |b, (k, &v)| if v > b.1 { (k, v) } else { b });
    Point::new((k % img.width()) as f64, (k / img.width()) as f64)
}

fn augmentation() -> Outcome {
    let cfg = AugmentationConfig::default();
    let mut r = rng::stream(5, &[]);
    let (mut worst_spike, mut worst_inverse): (f64, f64) = (0.0, 0.0);
    let canvas = ok(Image::filled(64, 64, 1.0, 0.5, "c"))?;
    for _ in 0..HOMOGRAPHIES {
        let h = sample_homography(&cfg, 64, 64, &mut r);
        let at = (r.random_range(16..48usize), r.random_range(16..48usize));
        let mut px = vec![0.0f32; 64 * 64];
        px[at.1 * 64 + at.0] = 1.0;
        let img = ok(Image::new(64, 64, 1.0, px, "spike"))?;
        let lms = ok(LandmarkSet::pixel(
            vec![Point::new(at.0 as f64, at.1 as f64)],
            &img,
        ))?;
        let (wi, wl) = ok(warp(&img, &lms, &h))?;
        worst_spike = worst_spike.max(argmax(&wi).distance(wl.points()[0]));

        let pts: Vec<Point> = (0..16)
            .map(|_| Point::new(r.random_range(0.0..63.0), r.random_range(0.0..63.0)))
            .collect();
        let lms = ok(LandmarkSet::pixel(pts.clone(), &canvas))?;
        let (i2, l2) = ok(warp(&canvas, &lms, &h))?;
        let inv = ok(h.inverse())?;
        let (_, back) = ok(warp(&i2, &l2, &inv))?;
        for (a, b) in pts.iter().zip(back.points()) {
            worst_inverse = worst_inverse.max(a.distance(*b));
        }
    }
    ensure(worst_spike <= SPIKE_TOL_PX, || {
        format!("spike off by {worst_spike} px")
    })?;
    ensure(worst_inverse < INVERSE_TOL_PX, || {
        format!("inverse off by {worst_inverse:e} px")
    })?;

    let photo = AugmentationConfig {
        geometric_prob: 0.0,
        gamma_prob: 1.0,
        salt_pepper_prob: 1.0,
        median_prob: 1.0,
        blur_prob: 1.0,
        noise_prob: 1.0,
        cutout_prob: 1.0,
        jitter_px: 0.0,
        ..AugmentationConfig::default()
    };
    let img = ok(Image::filled(32, 32, 1.0, 0.4, "p"))?;
    let lms = ok(LandmarkSet::pixel(
        vec![Point::new(3.3, 4.4), Point::new(20.1, 9.9)],
        &img,
    ))?;
    for k in 0..50 {
        let mut s = sample_stream(3, 0, k);
        let (out, l) = ok(augment(&img, &lms, &photo, &mut s))?;
        ensure(out != img, || {
            "photometric ops left the image unchanged".to_string()
        })?;
        let same = l
            .points()
            .iter()
            .zip(lms.points())
            .all(|(a, b)| a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits());
        ensure(same, || format!("landmarks moved: {:?}", l.points()))?;
        let p = photometric(&img, &photo, &mut s);
        ensure(p.pixels().iter().all(|v| (0.0..=1.0).contains(v)), || {
            "pixel outside [0, 1]".to_string()
        })?;
    }
    Ok(format!("spike tracking {worst_spike:.3} px, inverse {worst_inverse:.1e} px over {HOMOGRAPHIES} homographies"))
}

// 6. metrics

fn random_matrix(seed: u64) -> ErrorMatrix {
    let mut r = rng::stream(seed, &[]);
    let n = r.random_range(1..12);
    let mut out = ErrorMatrix::new(16);
    for i in 0..n {
        let row: Vec<f64> = (0..16)
            .map(|_| match r.random_range(0..4) {
                0 => r.random_range(0..=120) as f64 / 10.0,
                1 => OUTLIER_MM,
                _ => r.random_range(0.0..15.0),
            })
            .collect();
        let info = ImageInfo {
            id: format!("{seed}-{i}"),
            kl: Some(r.random_range(0..5)),
            dataset: "synthetic".into(),
        };
        out.push(info, &row).unwrap();
    }
    out
}

fn brute_recall(values: &[f64], r: f64) -> f64 {
    let mut hits = 0usize;
    for &e in values {
        if e <= r {
            hits += 1;
        }
    }
    100.0 * hits as f64 / values.len() as f64
}

fn metrics_oracle() -> Outcome {
    let mut worst_sum: f64 = 0.0;
    for seed in 0..METRIC_MATRICES {
        let m = random_matrix(seed);
        for subset in [Subset::Ablation, Subset::Test, Subset::All] {
            let ids = subset.ids(16);
            let mut values = Vec::new();
            for i in 0..m.rows() {
                for &l in &ids {
                    values.push(m.row(i)[l]);
                }
            }
            for r in PCK_RADII_MM {
                let got = ok(m.pck(r, &ids))?;
                ensure(got == brute_recall(&values, r), || {
                    format!("matrix {seed} pck@{r}: {got}")
                })?;
            }
            for (t, rec) in ok(m.cumulative_distribution(&ids))? {
                ensure(rec == brute_recall(&values, t), || {
                    format!("matrix {seed} cdf at {t}")
                })?;
            }
        }
        let mut all = Vec::new();
        for i in 0..m.rows() {
            all.extend_from_slice(m.row(i));
        }
        let mut outliers = 0usize;
        for &e in &all {
            if e > OUTLIER_MM {
                outliers += 1;
            }
        }
        let rate = ok(m.outlier_rate())?;
        ensure(rate == 100.0 * outliers as f64 / all.len() as f64, || {
            format!("matrix {seed} outliers {rate}")
        })?;
        let ids = Subset::All.ids(16);
        let (inliers, n) = ok(m.pck_count(OUTLIER_MM, &ids))?;
        let (out, _) = ok(m.outlier_count())?;
        ensure(inliers + out == n, || {
            format!("matrix {seed}: {inliers} + {out} != {n}")
        })?;
        let sum = ok(m.pck(OUTLIER_MM, &ids))? + rate;
        worst_sum = worst_sum.max((sum - 100.0).abs());
    }
    ensure(worst_sum <= PCK_SUM_TOL, || {
        format!("pck(10) + outliers off 100 by {worst_sum:e}")
    })?;
    Ok(format!(
        "{METRIC_MATRICES} matrices exact, |pck(10) + outliers - 100| <= {worst_sum:.1e}"
    ))
}

// 7. cross-validation

fn cv_splitter() -> Outcome {
    let mut r = rng::stream(31, &[]);
    let mut records = Vec::new();
    for p in 0..CV_PATIENTS {
        let kl = r.random_range(0..5u8);
        for side in [Side::Right, Side::Left] {
            records.push(AnnotationRecord::low_cost(
                format!("img{p}_{}.png", side.code()),
                0.3,
                format!("P{p:03}"),
                side,
                kl,
                Point::new(10.0, 10.0),
            ));
        }
    }
    let split = ok(make_cv_splits(&records, CV_FOLDS, 4))?;
    let mut owner: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    let mut seen = vec![0usize; records.len()];
    for f in 0..CV_FOLDS {
        let (train, val) = split.partition(f);
        let v: BTreeSet<&str> = val
            .iter()
            .map(|&i| records[i].patient_id.as_str())
            .collect();
        let t: BTreeSet<&str> = train
            .iter()
            .map(|&i| records[i].patient_id.as_str())
            .collect();
        ensure(v.is_disjoint(&t), || format!("fold {f} shares patients"))?;
        for &i in &val {
            seen[i] += 1;
            owner
                .entry(records[i].patient_id.as_str())
                .or_default()
                .insert(f);
        }
    }
    ensure(seen.iter().all(|&c| c == 1), || {
        "a knee is not validated exactly once".to_string()
    })?;
    ensure(owner.values().all(|f| f.len() == 1), || {
        "a patient spans folds".to_string()
    })?;
    let mut grade_total = [0usize; 5];
    let mut per_fold = vec![[0usize; 5]; CV_FOLDS];
    for rec in records.iter().step_by(2) {
        grade_total[rec.kl as usize] += 1;
        let f = *owner[rec.patient_id.as_str()].iter().next().unwrap();
        per_fold[f][rec.kl as usize] += 1;
    }
    let mut worst: f64 = 0.0;
    for counts in &per_fold {
        for g in 0..5 {
            worst = worst.max((counts[g] as f64 - grade_total[g] as f64 / CV_FOLDS as f64).abs());
        }
    }
    ensure(worst <= 1.0, || {
        format!("per-fold KL count deviates by {worst}")
    })?;
    Ok(format!("{CV_PATIENTS} patients x 2 knees, {CV_FOLDS} folds exclusive, max KL deviation {worst:.2} patients"))
}

// 8. overfit

fn overfit_config(seed: u64, epochs: usize, landmarks: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        epochs,
        mixup: MixupConfig {
            enabled: false,
            ..MixupConfig::default()
        },
        augment: AugmentationConfig::disabled(),
        model: ModelConfig {
            width: 8,
            depth: 3,
            landmarks,
            input_size: 64,
            dropout: 0.0,
            ..ModelConfig::default()
        },
        seed,
        eval_unit: EvalUnit::Px,
        selection: Subset::All,
        ..TrainConfig::default()
    }
}

fn overfit() -> Outcome {
    let t0 = Instant::now();
    let g = Geometry::default();
    let corpus = ok(generate(&PhantomSpec {
        count: 16,
        seed: 1,
        ..PhantomSpec::default()
    }))?;
    let samples: Vec<Sample> = corpus
        .iter()
        .map(|s| landmark_sample(&s.image, &s.records[0], &g, 64))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let cfg = overfit_config(0, OVERFIT_EPOCHS, 16);
    let mut first_full = None;
    let outcome = ok(train(&samples, &[], &cfg, None, &mut |row| {
        if row.pck2 == 100.0 && first_full.is_none() {
            first_full = Some(row.epoch);
        }
    }))?;
    let mut model = ok(outcome.best.to_model::<f32>())?;
    let errors = ok(evaluate_samples(&mut model, &samples, EvalUnit::Px, 16))?;
    let all = Subset::All.ids(16);
    let pck = ok(errors.pck(PCK_RADIUS_PX, &all))?;
    ensure(pck == 100.0, || {
        format!(
            "training PCK@2px {pck}% at best epoch {}",
            outcome.best_epoch
        )
    })?;

    // stage B through the pipeline with the ground-truth centre as ROI
    let roi = ok(HourglassModel::<f32>::new(
        ModelConfig {
            landmarks: 1,
            ..cfg.model.clone()
        },
        0,
    ))?;
    let mut pipeline = ok(Pipeline::new(roi, model, g, 1))?;
    let mut worst: f64 = 0.0;
    for s in &corpus {
        let r = &s.records[0];
        let (pred, t) = ok(pipeline.landmarks_at(&s.image, r.center.unwrap(), r.side))?;
        for (p, q) in t.forward_set(&pred).iter().zip(t.forward_set(&r.landmarks)) {
            worst = worst.max(p.distance(q));
        }
    }
    ensure(worst <= PCK_RADIUS_PX, || {
        format!("stage B with true centre off by {worst:.2} input px")
    })?;
    let elapsed = t0.elapsed();
    ensure(elapsed < OVERFIT_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "PCK@2px 100% first at epoch {}, stage B worst {worst:.2} px, {elapsed:.1?}",
        first_full.map_or("-".to_string(), |e| e.to_string())
    ))
}

// 9. transfer

fn first_epoch_at(history: &[HistoryRow], threshold: f64) -> Option<usize> {
    history
        .iter()
        .find(|r| r.pck2 >= threshold)
        .map(|r| r.epoch)
}

fn transfer() -> Outcome {
    let t0 = Instant::now();
    let g = Geometry::default();
    let bilateral = ok(generate(&PhantomSpec {
        count: 32,
        seed: 100,
        bilateral: true,
        ..PhantomSpec::default()
    }))?;
    let mut roi = Vec::new();
    for s in &bilateral {
        for r in &s.records {
            roi.push(ok(roi_sample(&s.image, r, Layout::Bilateral, &g, 64))?);
        }
    }
    let roi_cfg = overfit_config(0, TRANSFER_ROI_EPOCHS, 1);
    let pretrained = ok(train(&roi, &[], &roi_cfg, None, &mut |_| {}))?.last;

    let unilateral = ok(generate(&PhantomSpec {
        count: 32,
        seed: 200,
        ..PhantomSpec::default()
    }))?;
    let samples: Vec<Sample> = unilateral
        .iter()
        .map(|s| landmark_sample(&s.image, &s.records[0], &g, 64))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (train_set, val) = samples.split_at(16);
    let mut wins = 0;
    let mut log = Vec::new();
    for seed in 1..=TRANSFER_SEEDS {
        let cfg = overfit_config(seed, TRANSFER_MAX_EPOCHS, 16);
        let scratch = ok(train(train_set, val, &cfg, None, &mut |_| {}))?;
        let init = ok(transfer_init(&cfg.model, &pretrained, seed))?;
        let moved = ok(train(train_set, val, &cfg, Some(init), &mut |_| {}))?;
        let a = first_epoch_at(&scratch.history, TRANSFER_THRESHOLD_PCT);
        let b = first_epoch_at(&moved.history, TRANSFER_THRESHOLD_PCT);
        let win = match (b, a) {
            (Some(b), Some(a)) => b <= a,
            (Some(_), None) => true,
            (None, _) => false,
        };
        wins += win as usize;
        let show = |e: Option<usize>| e.map_or("never".to_string(), |e| e.to_string());
        log.push(format!(
            "seed {seed}: transfer {} vs scratch {}",
            show(b),
            show(a)
        ));
    }
    let elapsed = t0.elapsed();
    ensure(elapsed < TRANSFER_BUDGET, || format!("took {elapsed:?}"))?;
    ensure(wins >= TRANSFER_MIN_WINS, || {
        format!("{wins}/{TRANSFER_SEEDS} seeds: {}", log.join("; "))
    })?;
    Ok(format!(
        "{wins}/{TRANSFER_SEEDS} seeds reach {TRANSFER_THRESHOLD_PCT}% val PCK@2px no later ({}), {elapsed:.1?}",
        log.join("; ")
    ))
}

// 10. end-to-end determinism

fn run(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_kneemark"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let e = e.map_err(|e| e.to_string())?;
        v.push((
            e.file_name().to_string_lossy().into_owned(),
            fs::read(e.path()).map_err(|e| e.to_string())?,
        ));
    }
    v.sort();
    Ok(v)
}

fn end_to_end_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    run(&[
        "gen-phantom",
        "--out",
        &d("uni"),
        "--count",
        "6",
        "--seed",
        "3",
        "--side",
        "240",
        "--spacing",
        "0.6",
    ])?;
    run(&[
        "gen-phantom",
        "--out",
        &d("bil"),
        "--count",
        "3",
        "--seed",
        "4",
        "--side",
        "240",
        "--spacing",
        "0.6",
        "--bilateral",
    ])?;
    let small = [
        "--width",
        "4",
        "--depth",
        "2",
        "--input-size",
        "32",
        "--batch-size",
        "4",
        "--landmark-spacing",
        "0.6",
    ];
    let uni = d("uni/annotations.csv");
    let bil = d("bil/annotations.csv");
    let train_lm = |out: &str| -> Result<(), String> {
        let mut args = vec![
            "train-landmarks",
            "--annotations",
            &uni,
            "--out",
            out,
            "--epochs",
            "3",
            "--seed",
            "9",
        ];
        args.extend_from_slice(&small);
        run(&args)
    };
    train_lm(&d("lm_a"))?;
    train_lm(&d("lm_b"))?;
    let a = dir_bytes(Path::new(&d("lm_a")))?;
    ensure(a.len() == 3, || {
        format!(
            "checkpoint files {:?}",
            a.iter().map(|f| &f.0).collect::<Vec<_>>()
        )
    })?;
    ensure(a == dir_bytes(Path::new(&d("lm_b")))?, || {
        "train-landmarks checkpoints differ".to_string()
    })?;

    let roi = d("roi");
    let mut args = vec![
        "train-roi",
        "--annotations",
        &bil,
        "--out",
        &roi,
        "--epochs",
        "2",
        "--seed",
        "9",
    ];
    args.extend_from_slice(&small);
    run(&args)?;
    let lm = d("lm_a");
    for out in ["p1.csv", "p2.csv"] {
        run(&[
            "infer",
            "--roi",
            &roi,
            "--landmarks",
            &lm,
            "--input",
            &bil,
            "--out",
            &d(out),
            "--stages",
            "2",
            "--landmark-spacing",
            "0.6",
        ])?;
    }
    let p1 = fs::read(d("p1.csv")).map_err(|e| e.to_string())?;
    ensure(
        p1 == fs::read(d("p2.csv")).map_err(|e| e.to_string())?,
        || "prediction CSVs differ".to_string(),
    )?;
    ensure(
        String::from_utf8_lossy(&p1).lines().count() == 1 + 3 * 2 * 16,
        || "prediction row count".to_string(),
    )?;
    Ok(format!(
        "checkpoints ({} files) and {}-byte prediction CSVs byte-identical",
        a.len(),
        p1.len()
    ))
}

// 11. checkpoint round trip

fn checkpoint_round_trip() -> Outcome {
    let cfg = ModelConfig {
        width: 4,
        depth: 2,
        landmarks: 16,
        input_size: 32,
        ..ModelConfig::default()
    };
    let mut model = ok(HourglassModel::<f32>::new(cfg, 5))?;
    let mut k = 0.0f32;
    model.visit_mut(&mut |_, p| {
        for v in p.value.data_mut() {
            k += 0.731;
            *v += 0.01 * k.sin();
        }
    });
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(save_checkpoint(&model, &a))?;
    let loaded: HourglassModel<f32> = ok(load_checkpoint(&a))?;
    ok(save_checkpoint(&loaded, &b))?;
    let bytes = dir_bytes(&a)?;
    ensure(bytes == dir_bytes(&b)?, || {
        "save -> load -> save changed bytes".to_string()
    })?;

    let manifest = a.join(MANIFEST_FILE);
    let original = fs::read_to_string(&manifest).map_err(|e| e.to_string())?;
    let mut kinds = Vec::new();
    fs::write(&manifest, &original[..original.len() / 2]).map_err(|e| e.to_string())?;
    let err = Checkpoint::load(&a).err();
    ensure(matches!(err, Some(Error::CheckpointManifest(_))), || {
        format!("malformed manifest gave {err:?}")
    })?;
    kinds.push("manifest");

    let mut v: serde_json::Value = serde_json::from_str(&original).map_err(|e| e.to_string())?;
    v["tensors"][0]["shape"][0] = serde_json::json!(999);
    fs::write(&manifest, v.to_string()).map_err(|e| e.to_string())?;
    let err = Checkpoint::load(&a).err();
    ensure(
        matches!(err, Some(Error::CheckpointShapeMismatch { .. })),
        || format!("bad shape gave {err:?}"),
    )?;
    kinds.push("shape");

    let mut v: serde_json::Value = serde_json::from_str(&original).map_err(|e| e.to_string())?;
    v["format_version"] = serde_json::json!(99);
    fs::write(&manifest, v.to_string()).map_err(|e| e.to_string())?;
    let err = Checkpoint::load(&a).err();
    ensure(matches!(err, Some(Error::CheckpointVersion { .. })), || {
        format!("bad version gave {err:?}")
    })?;
    kinds.push("version");

    fs::write(&manifest, &original).map_err(|e| e.to_string())?;
    let blob = fs::read(a.join(BLOB_FILE)).map_err(|e| e.to_string())?;
    fs::write(a.join(BLOB_FILE), &blob[..blob.len() - 4]).map_err(|e| e.to_string())?;
    let err = Checkpoint::load(&a).err();
    ensure(
        matches!(err, Some(Error::CheckpointTruncated { .. })),
        || format!("short blob gave {err:?}"),
    )?;
    kinds.push("truncated");
    Ok(format!(
        "{} bytes round trip identically; distinct errors for {}",
        bytes.iter().map(|f| f.1.len()).sum::<usize>(),
        kinds.join(", ")
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient suite", gradient_suite),
        ("soft-argmax analytics", soft_argmax_analytics),
        ("wing loss", wing_loss),
        ("mixup", mixup),
        ("augmentation consistency", augmentation),
        ("metrics oracle", metrics_oracle),
        ("cv splitter", cv_splitter),
        ("overfit", overfit),
        ("transfer direction", transfer),
        ("end-to-end determinism", end_to_end_determinism),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut err = std::io::stderr();
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let line = match result {
            Ok(detail) => format!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                format!("criterion {:>2} {name}: FAIL ({detail})", i + 1)
            }
        };
        writeln!(err, "{line}").unwrap();
    }
    if failed > 0 {
        writeln!(err, "{failed} acceptance criteria failed").unwrap();
        std::process::exit(1);
    }
}
