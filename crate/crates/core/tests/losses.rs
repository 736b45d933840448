use kneemark::losses::{mixup_batch, mixup_criterion, Criterion, LossKind, MixupDraw, WingParams};
use kneemark::nn::Tensor;
use kneemark::rng;
use proptest::prelude::*;

/// `2 * int_{1/2}^{1} g(x) x^(a-1) (1-x)^(a-1) dx` with `1 - x = s^4` to remove
/// the endpoint singularity, composite Simpson in `s`.
fn half_beta_integral(alpha: f64, g: impl Fn(f64) -> f64) -> f64 {
    let top = 0.5f64.powf(0.25);
    let n = 200_000;
    let h = top / n as f64;
    let f = |s: f64| {
        let x = 1.0 - s.powi(4);
        g(x) * x.powf(alpha - 1.0) * 4.0 * s.powf(4.0 * alpha - 1.0)
    };
    let mut acc = f(0.0) + f(top);
    for k in 1..n {
        acc += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 * acc * h / 3.0
}

#[test]
fn lambda_prime_mean_matches_integral() {
    let alpha = 0.75;
    let expected = half_beta_integral(alpha, |x| x) / half_beta_integral(alpha, |_| 1.0);
    let mut r = rng::stream(11, &[]);
    let n = 100_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let d = MixupDraw::sample(4, alpha, &mut r).unwrap();
        assert!((0.5..=1.0).contains(&d.lambda_prime));
        sum += d.lambda_prime;
    }
    let mean = sum / n as f64;
    assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
}

#[test]
fn wing_slope_is_exactly_one_outside_the_window() {
    let p = WingParams::default();
    for d in [15.0, 15.5, 40.0, 1e6] {
        assert_eq!(p.slope(d), 1.0);
        assert_eq!(p.slope(-d), -1.0);
    }
    assert!((p.slope(3.0) - 15.0 / (p.eps + 3.0)).abs() < 1e-15);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let kinds = [
        LossKind::Wing(WingParams::from_w_c(0.4, 0.1).unwrap()),
        LossKind::L1,
        LossKind::L2,
        LossKind::Elastic,
    ];
    let pred = Tensor::new(vec![1, 3, 2], vec![0.1, 0.52, 0.9, 0.33, 0.75, 0.05]).unwrap();
    let target = Tensor::new(vec![1, 3, 2], vec![0.3, 0.5, 0.2, 0.31, 0.5, 0.5]).unwrap();
    for kind in kinds {
        for scale in [1.0, 4.0] {
            let c = Criterion::new(kind, scale);
            let (_, g) = c.loss_and_grad::<f64>(&pred, &target).unwrap();
            for k in 0..pred.len() {
                let h = 1e-6;
                let mut p = pred.data().to_vec();
                p[k] += h;
                let up = c.loss(&p, target.data()).unwrap();
                p[k] -= 2.0 * h;
                let down = c.loss(&p, target.data()).unwrap();
                let numeric = (up - down) / (2.0 * h);
                let err = (numeric - g.data()[k]).abs() / numeric.abs().max(1e-3);
                assert!(err < 1e-6, "{kind:?} scale {scale} elem {k}: {err}");
            }
        }
    }
}

#[test]
fn mixup_with_lambda_one_is_plain_loss() {
    let x = Tensor::new(vec![2, 2], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
    let d = MixupDraw::from_lambda(1.0, vec![1, 0]);
    assert_eq!(kneemark::losses::mix_inputs(&x, &d).unwrap(), x);
    assert_eq!(mixup_criterion(0.123, 99.0, 1.0), 0.123);
}

#[test]
fn duplicate_batch_mixing_is_identity() {
    let mut r = rng::stream(2, &[]);
    let row = [0.25f64, 0.5, 0.75];
    let x = Tensor::new(vec![3, 3], row.repeat(3)).unwrap();
    for _ in 0..50 {
        let m = mixup_batch(&x, &x, 0.75, &mut r).unwrap();
        for (a, b) in m.inputs.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let l = mixup_criterion(1.5, 1.5, m.draw.lambda_prime);
        assert!((l - 1.5).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn wing_is_continuous_for_any_parameters(w in 0.01f64..50.0, ratio in 0.01f64..0.99) {
        let p = WingParams::from_w_c(w, w * ratio).unwrap();
        let inner = p.w * (p.w / p.eps).ln_1p();
        prop_assert!((inner - (p.w - p.c)).abs() < 1e-12 * w.max(1.0));
        let q = WingParams::from_w_eps(w, p.eps).unwrap();
        prop_assert!((q.c - p.c).abs() < 1e-9 * w.max(1.0));
    }

    #[test]
    fn wing_is_even_and_nonnegative(d in -100.0f64..100.0) {
        let p = WingParams::default();
        prop_assert_eq!(p.value(d), p.value(-d));
        prop_assert!(p.value(d) >= 0.0);
        prop_assert_eq!(p.value(d) == 0.0, d == 0.0);
    }

    #[test]
    fn permutation_is_a_bijection(b in 1usize..20, seed in 0u64..1000) {
        let mut r = rng::stream(seed, &[]);
        let d = MixupDraw::sample(b, 0.75, &mut r).unwrap();
        let mut p = d.permutation.clone();
        p.sort();
        prop_assert_eq!(p, (0..b).collect::<Vec<_>>());
    }
}
