//! Named-parameter traversal shared by the optimizer, checkpoints and
//! gradient checks.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Var};
use crate::real::Real;

/// Anything that owns trainable tensors. `visit` and `visit_mut` must yield
/// the same names in the same order.
pub trait Parameters<F: Real> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, ArrayViewD<'a, F>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }

    /// Registers every tensor on `g` in visit order.
    fn bind_all(&self, g: &mut Graph<F>, trainable: bool) -> Vec<Var> {
        let mut vars = Vec::new();
        self.visit(&mut |_, v| vars.push(g.leaf(v.to_owned(), trainable)));
        vars
    }

    /// Gradients for `vars` (from [`Parameters::bind_all`]), zero-filled where a
    /// parameter did not influence the loss.
    fn collect_grads(&self, vars: &[Var], grads: &Gradients<F>) -> Vec<ArrayD<F>> {
        let mut out = Vec::new();
        let mut i = 0;
        self.visit(&mut |_, v| {
            out.push(
                grads
                    .get(vars[i])
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(v.raw_dim())),
            );
            i += 1;
        });
        out
    }
}

/// Normal(0, std) truncated at ±2·std.
pub(crate) fn trunc_normal<F: Real, R: Rng>(rng: &mut R, std: f64) -> F {
    let normal = Normal::new(0.0, std).expect("finite std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return F::lit(v);
        }
    }
}
