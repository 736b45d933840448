use kneemark::nn::blocks::PreActConv;
use kneemark::nn::layers::{BatchNorm2d, Conv2d, Dropout, MaxPool2, Relu, Upsample2};
use kneemark::nn::ops::{self, Mode};
use kneemark::nn::{
    check_module, BlockKind, GradcheckOptions, HourglassModel, ModelConfig, Module, Param,
    ResidualBlock, Tensor,
};
use kneemark::rng::{self, Rng};
use rand::Rng as _;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[99]);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn init_rng() -> Rng {
    rng::stream(7, &[])
}

fn assert_grad<M: Module<f64>>(m: &mut M, x: &Tensor<f64>, opts: GradcheckOptions, tol: f64) {
    assert_grad_kinks(m, x, opts, tol, 0.02)
}

fn assert_grad_kinks<M: Module<f64>>(
    m: &mut M,
    x: &Tensor<f64>,
    opts: GradcheckOptions,
    tol: f64,
    max_kinks: f64,
) {
    let report = check_module(m, x, &opts).unwrap();
    assert!(report.checked > 0);
    assert!(
        report.kink_fraction() <= max_kinks,
        "{} kinks",
        report.kinks
    );
    assert!(
        report.max_rel_error < tol,
        "max relative error {} at {}",
        report.max_rel_error,
        report.worst
    );
}

fn opts(mode: Mode) -> GradcheckOptions {
    GradcheckOptions {
        mode,
        ..GradcheckOptions::default()
    }
}

#[test]
fn conv2d_gradients() {
    for (k, stride, pad) in [(3, 1, 1), (1, 1, 0), (7, 2, 3), (3, 2, 0)] {
        let mut conv = Conv2d::<f64>::new(3, 4, k, stride, pad, &mut init_rng());
        assert_grad(
            &mut conv,
            &random(&[2, 3, 9, 9], 1),
            opts(Mode::Train),
            1e-4,
        );
    }
}

#[test]
fn batchnorm_gradients_both_modes() {
    let mut bn = BatchNorm2d::<f64>::new(3);
    bn.visit_mut("", &mut |n, p: &mut Param<f64>| {
        let v: &[f64] = match n {
            "weight" => &[1.5, -0.7, 0.3],
            "bias" => &[0.1, 0.2, -0.3],
            "running_mean" => &[0.2, -0.1, 0.05],
            _ => &[0.5, 2.0, 1.2],
        };
        p.value.data_mut().copy_from_slice(v);
    });
    let x = random(&[3, 3, 4, 5], 2);
    assert_grad(&mut bn, &x, opts(Mode::Train), 1e-4);
    assert_grad(&mut bn, &x, opts(Mode::Eval), 1e-4);
}

#[test]
fn pooling_and_upsampling_gradients() {
    let x = random(&[2, 2, 6, 8], 3);
    assert_grad(&mut MaxPool2::default(), &x, opts(Mode::Train), 1e-4);
    assert_grad(&mut Upsample2, &x, opts(Mode::Train), 1e-4);
}

#[test]
fn relu_and_dropout_gradients() {
    let x = random(&[2, 3, 5, 5], 4);
    assert_grad(&mut Relu::default(), &x, opts(Mode::Train), 1e-4);
    assert_grad(&mut Dropout::new(0.3), &x, opts(Mode::Eval), 1e-4);
    assert_grad(&mut Dropout::new(0.3), &x, opts(Mode::Train), 1e-4);
}

#[test]
fn residual_block_gradients() {
    let x = random(&[2, 8, 6, 6], 5);
    let mut r = init_rng();
    let mut pre = PreActConv::<f64>::new(8, 4, 3, &mut r);
    assert_grad(&mut pre, &x, opts(Mode::Train), 1e-4);
    for kind in [BlockKind::Hmp, BlockKind::Bottleneck] {
        for m in [8, 16] {
            let mut block = ResidualBlock::<f64>::new(kind, 8, m, &mut r).unwrap();
            assert_eq!(block.has_projection(), m != 8);
            assert_grad(&mut block, &x, opts(Mode::Train), 1e-4);
            assert_grad(&mut block, &x, opts(Mode::Eval), 1e-4);
        }
    }
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
        let (c, p) = self.cache.take().unwrap();
        ops::soft_argmax_backward(dy, &p, &c, self.beta)
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<f64>)) {}

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<f64>)) {}
}

#[test]
fn soft_argmax_gradients() {
    for beta in [0.5, 1.0, 3.0] {
        let mut sa = SoftArgmax { beta, cache: None };
        assert_grad(&mut sa, &random(&[2, 3, 5, 7], 6), opts(Mode::Train), 1e-4);
    }
}

#[test]
fn whole_model_gradients() {
    for block in [BlockKind::Hmp, BlockKind::Bottleneck] {
        let cfg = ModelConfig {
            width: 4,
            depth: 1,
            landmarks: 2,
            input_size: 16,
            beta: 1.0,
            dropout: 0.25,
            block,
        };
        let mut model = HourglassModel::<f64>::new(cfg, 3).unwrap();
        model.set_input_grad(true);
        let x = random(&[2, 1, 16, 16], 8);
        // Batch statistics over two tiny images put many ReLU thresholds
        // within reach of the perturbation in training mode.
        for (mode, max_kinks) in [(Mode::Eval, 0.02), (Mode::Train, 0.2)] {
            let o = GradcheckOptions {
                max_per_tensor: Some(24),
                ..opts(mode)
            };
            assert_grad_kinks(&mut model, &x, o, 1e-3, max_kinks);
        }
    }
}

#[test]
fn zero_kernels_make_blocks_identity() {
    let mut r = init_rng();
    let x = random(&[2, 8, 4, 4], 9);
    for kind in [BlockKind::Hmp, BlockKind::Bottleneck] {
        let mut block = ResidualBlock::<f64>::new(kind, 8, 8, &mut r).unwrap();
        block.zero_convolutions();
        let y = block.forward(&x, Mode::Train, &mut r).unwrap();
        assert_eq!(y, x);
    }
}

#[test]
fn hmp_requires_width_divisible_by_four() {
    let mut r = init_rng();
    assert!(ResidualBlock::<f32>::hmp(8, 6, &mut r).is_err());
    assert!(ResidualBlock::<f32>::bottleneck(8, 7, &mut r).is_err());
    let b = ResidualBlock::<f32>::hmp(8, 16, &mut r).unwrap();
    assert_eq!(b.stage_widths(), [8, 4, 4]);
}
