//! Central finite-difference verification of analytic gradients.
//!
//! Each element is differenced with steps `h` and `h / 2`. Where the two
//! estimates disagree the function is not smooth on that scale (a ReLU
//! threshold or max-pool tie lies within the step) and the element is counted
//! as a kink instead of being compared.

use rand::Rng as _;

use super::layers::Module;
use super::ops::Mode;
use super::tensor::{Param, Tensor};
use crate::rng;
use crate::Result;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Relative disagreement between the two step sizes above which an
    /// element is treated as a kink.
    pub kink_tolerance: f64,
    /// Check at most this many evenly spaced elements per array.
    pub max_per_tensor: Option<usize>,
    pub check_input: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            mode: Mode::Train,
            seed: 0,
            kink_tolerance: 2e-5,
            max_per_tensor: None,
            check_input: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    /// Largest element-wise relative error over every compared element.
    pub max_rel_error: f64,
    /// Name and index of the worst element.
    pub worst: String,
    pub checked: usize,
    pub kinks: usize,
}

impl GradcheckReport {
    fn record(
        &mut self,
        name: &str,
        idx: usize,
        analytic: f64,
        numeric: [f64; 2],
        tol: f64,
        floor: f64,
    ) {
        let rel = |a: f64, b: f64| {
            let denom = a.abs().max(b.abs()).max(floor);
            if denom == 0.0 {
                0.0
            } else {
                (a - b).abs() / denom
            }
        };
        if rel(numeric[0], numeric[1]) > tol {
            self.kinks += 1;
            return;
        }
        let err = rel(analytic, numeric[1]);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err;
            self.worst = format!(
                "{name}[{idx}]: analytic {analytic:e}, numeric {:e}",
                numeric[1]
            );
        }
    }

    /// Fraction of examined elements that were skipped as kinks.
    pub fn kink_fraction(&self) -> f64 {
        let total = self.checked + self.kinks;
        if total == 0 {
            0.0
        } else {
            self.kinks as f64 / total as f64
        }
    }
}

/// Scalar probe `L = sum(w * f(x))` with fixed random weights `w`. Every
/// forward pass reuses the same random stream so dropout masks are fixed.
struct Probe {
    weights: Option<Tensor<f64>>,
    opts: GradcheckOptions,
}

impl Probe {
    fn loss<M: Module<f64>>(&mut self, m: &mut M, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let mut r = rng::stream(self.opts.seed, &[rng::tag::DROPOUT]);
        let y = m.forward(x, self.opts.mode, &mut r)?;
        let w = self.weights.get_or_insert_with(|| {
            let mut wr = rng::stream(self.opts.seed, &[rng::tag::HEAD]);
            let data = (0..y.len()).map(|_| wr.random_range(-1.0..1.0)).collect();
            Tensor::new(y.shape().to_vec(), data).expect("same shape")
        });
        let l = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok((l, w.clone()))
    }
}

fn indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

fn set_param<M: Module<f64>>(module: &mut M, name: &str, idx: usize, delta: f64) {
    module.visit_mut("", &mut |n, p| {
        if n == name {
            p.value.data_mut()[idx] += delta;
        }
    });
}

/// Compares analytic parameter (and optionally input) gradients of `module`
/// against central differences of a random linear functional of its output.
pub fn check_module<M: Module<f64>>(
    module: &mut M,
    x: &Tensor<f64>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut probe = Probe {
        weights: None,
        opts: opts.clone(),
    };
    module.visit_mut("", &mut |_, p| p.zero_grad());
    let (_, w) = probe.loss(module, x)?;
    let dx = module.backward(&w)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    module.visit("", &mut |n, p: &Param<f64>| {
        if p.trainable {
            analytic.push((n.to_string(), p.grad.data().to_vec()));
        }
    });

    // Relative errors are measured against a floor proportional to the largest
    // gradient anywhere, so exactly-zero gradients do not amplify round-off.
    let max_abs = analytic
        .iter()
        .flat_map(|(_, g)| g.iter())
        .chain(if opts.check_input { dx.data() } else { &[] })
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = 1e-3 * max_abs + 1e-12;
    let steps = [opts.step, opts.step / 2.0];
    let tol = opts.kink_tolerance;
    let mut report = GradcheckReport::default();

    for (name, grad) in &analytic {
        for idx in indices(grad.len(), opts.max_per_tensor) {
            let mut numeric = [0.0; 2];
            for (k, &h) in steps.iter().enumerate() {
                set_param(module, name, idx, h);
                let plus = probe.loss(module, x)?.0;
                set_param(module, name, idx, -2.0 * h);
                let minus = probe.loss(module, x)?.0;
                set_param(module, name, idx, h);
                numeric[k] = (plus - minus) / (2.0 * h);
            }
            report.record(name, idx, grad[idx], numeric, tol, floor);
        }
    }

    if opts.check_input {
        for idx in indices(x.len(), opts.max_per_tensor) {
            let mut numeric = [0.0; 2];
            for (k, &h) in steps.iter().enumerate() {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let plus = probe.loss(module, &xp)?.0;
                xp.data_mut()[idx] -= 2.0 * h;
                let minus = probe.loss(module, &xp)?.0;
                numeric[k] = (plus - minus) / (2.0 * h);
            }
            report.record("input", idx, dx.data()[idx], numeric, tol, floor);
        }
    }
    Ok(report)
}
