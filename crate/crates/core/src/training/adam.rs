//! Adam with coupled L2 weight decay.

use crate::nn::{Float, Module, Param};
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates for every trainable array, in visiting order.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update of every trainable array of `module`.
    /// `wd * param` is added to each gradient first.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<T: Float, M: Module<T> + ?Sized>(
        &mut self,
        module: &mut M,
        lr: f64,
        wd: f64,
    ) -> Result<()> {
        let mut bad = None;
        let mut sizes = Vec::new();
        module.visit("", &mut |name, p| {
            if p.trainable {
                sizes.push(p.value.len());
                if bad.is_none() && !p.grad.all_finite() {
                    bad = Some(name.to_string());
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::Divergence { name });
        }
        if self.m.is_empty() {
            self.m = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.v = self.m.clone();
        }
        if self.m.iter().map(Vec::len).ne(sizes.iter().copied()) {
            return Err(Error::Shape(
                "optimizer state does not match the parameter layout".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            let (m, v) = (&mut ms[k], &mut vs[k]);
            k += 1;
            let Param { value, grad, .. } = p;
            for (((x, g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let xf = x.as_f64();
                let g = g.as_f64() + wd * xf;
                *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                *x = T::of(xf - lr * (*mi / bc1) / ((*vi / bc2).sqrt() + EPSILON));
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, Tensor};
    use crate::rng::Rng;

    struct Scalars(Vec<(&'static str, Param<f64>)>);

    impl Module<f64> for Scalars {
        fn forward(&mut self, x: &Tensor<f64>, _: Mode, _: &mut Rng) -> Result<Tensor<f64>> {
            Ok(x.clone())
        }

        fn backward(&mut self, dy: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(dy.clone())
        }

        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            for (n, p) in &self.0 {
                f(n, p)
            }
        }

        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            for (n, p) in &mut self.0 {
                f(n, p)
            }
        }
    }

    fn scalar(name: &'static str, v: f64, g: f64) -> (&'static str, Param<f64>) {
        let mut p = Param::trainable(Tensor::full(&[1], v));
        p.grad = Tensor::full(&[1], g);
        (name, p)
    }

    fn value(m: &Scalars, i: usize) -> f64 {
        m.0[i].1.value.data()[0]
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = Scalars(vec![scalar("w", 0.5, 1.0)]);
        AdamState::new().step(&mut m, 1e-3, 0.0).unwrap();
        let expected = 0.5 - 1e-3 * 1.0 / (1.0 + EPSILON);
        assert!((value(&m, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut m = Scalars(vec![scalar("w", 0.25, 3.0)]);
        let mut s = AdamState::new();
        for _ in 0..5 {
            s.step(&mut m, 0.0, 0.0).unwrap();
        }
        assert_eq!(value(&m, 0), 0.25);
    }

    #[test]
    fn buffers_are_skipped() {
        let mut m = Scalars(vec![
            scalar("w", 1.0, 1.0),
            ("b", Param::buffer(Tensor::full(&[1], 7.0))),
        ]);
        AdamState::new().step(&mut m, 1e-2, 0.0).unwrap();
        assert_eq!(value(&m, 1), 7.0);
        assert!(value(&m, 0) < 1.0);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut m = Scalars(vec![scalar("w", -2.0, 0.0)]);
        let mut s = AdamState::new();
        let mut last = 2.0;
        for _ in 0..20 {
            s.step(&mut m, 1e-2, 1e-4).unwrap();
            let now = value(&m, 0).abs();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut m = Scalars(vec![
            scalar("a", 1.0, 0.5),
            scalar("b.weight", 1.0, f64::NAN),
        ]);
        match AdamState::new().step(&mut m, 1e-3, 0.0) {
            Err(Error::Divergence { name }) => assert_eq!(name, "b.weight"),
            other => panic!("{other:?}"),
        }
        assert_eq!(value(&m, 0), 1.0);
    }
}
