//! AdamW with decoupled weight decay and global-norm clipping.

use ndarray::ArrayD;

use crate::params::Parameters;
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { lr, beta1, beta2, eps, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` are in the visit order of `params`, which
    /// must not change between calls.
    pub fn step<P: Parameters<F>>(&mut self, params: &mut P, grads: &[ArrayD<F>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::one() - F::lit(self.beta1.powi(self.step as i32));
        let c2 = F::one() - F::lit(self.beta2.powi(self.step as i32));
        let lr = F::lit(self.lr);
        let wd = F::lit(self.weight_decay);
        let eps = F::lit(self.eps);
        for ((g, m), v) in grads.iter().zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
            });
        }
        let mut i = 0;
        let (ms, vs) = (&self.m, &self.v);
        params.visit_mut(&mut |_, mut p| {
            ndarray::Zip::from(&mut p).and(&ms[i]).and(&vs[i]).for_each(|p, &m, &v| {
                let update = (m / c1) / ((v / c2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            });
            i += 1;
        });
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm<F: Real>(grads: &[ArrayD<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so the global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [ArrayD<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayViewD, ArrayViewMutD};

    struct One(ndarray::Array1<f64>);
    impl Parameters<f64> for One {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
            f("x", self.0.view().into_dyn());
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
            f("x", self.0.view_mut().into_dyn());
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected first step is lr · sign(g) (up to eps) without decay.
        let mut p = One(arr1(&[1.0, -2.0]));
        let mut opt = AdamW::<f64>::new(0.1, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut p, &[arr1(&[0.5, -3.0]).into_dyn()]);
        assert!((p.0[0] - 0.9).abs() < 1e-6);
        assert!((p.0[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = One(arr1(&[2.0]));
        let mut opt = AdamW::<f64>::new(0.1, 0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut p, &[arr1(&[0.0]).into_dyn()]);
        assert!((p.0[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = One(arr1(&[1.5]));
        let mut opt = AdamW::<f64>::new(0.0, 0.9, 0.999, 1e-8, 0.01);
        opt.step(&mut p, &[arr1(&[4.0]).into_dyn()]);
        assert_eq!(p.0[0], 1.5);
    }

    #[test]
    fn clipping() {
        let mut g = vec![arr1(&[3.0, 4.0]).into_dyn()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![arr1(&[0.3]).into_dyn()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0]], 0.3);
    }
}
