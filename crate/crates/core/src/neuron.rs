//! Parametric leaky integrate-and-fire neurons.
//!
//! Each step charges the membrane towards the input, fires when the charged
//! potential reaches threshold, and hard-resets fired sites:
//!
//! ```text
//! H_t = V_{t-1} + k · (X_t − (V_{t-1} − V_reset)),   k = 1/τ = sigmoid(w)
//! S_t = Θ(H_t − V_th),                              Θ(0) = 1
//! V_t = V_reset · S_t + H_t · (1 − S_t)
//! ```

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::real::Real;

pub fn sigmoid<F: Real>(w: F) -> F {
    F::one() / (F::one() + (-w).exp())
}

/// Learnable decay plus fixed threshold and reset potentials.
///
/// `w` holds either one shared value or one value per channel; the leak
/// factor for channel `c` is `sigmoid(w[c])`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlifParams<F> {
    pub w: Array1<F>,
    pub v_threshold: F,
    pub v_reset: F,
}

impl<F: Real> Default for PlifParams<F> {
    fn default() -> Self {
        Self {
            w: Array1::zeros(1),
            v_threshold: F::one(),
            v_reset: F::zero(),
        }
    }
}

impl<F: Real> PlifParams<F> {
    /// Shared decay with membrane time constant `tau` (> 1).
    pub fn with_tau(tau: F, v_threshold: F, v_reset: F) -> Self {
        let k = F::one() / tau;
        Self {
            w: Array1::from_elem(1, (k / (F::one() - k)).ln()),
            v_threshold,
            v_reset,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.w.len() != 1 && self.w.len() != channels {
            return invalid(format!(
                "PLIF decay has {} entries, expected 1 or {channels}",
                self.w.len()
            ));
        }
        if !(self.v_threshold > self.v_reset) {
            return invalid("PLIF threshold must exceed the reset potential");
        }
        Ok(())
    }

    /// Leak factor `1/τ` for channel `c`.
    pub fn leak(&self, c: usize) -> F {
        sigmoid(self.w[if self.w.len() == 1 { 0 } else { c }])
    }

    pub fn tau(&self, c: usize) -> F {
        F::one() / self.leak(c)
    }
}

/// Membrane potentials, one per `(channel, frame)` site.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState<F> {
    pub v: Array2<F>,
}

impl<F: Real> NeuronState<F> {
    pub fn new(channels: usize, frames: usize, params: &PlifParams<F>) -> Self {
        Self {
            v: Array2::from_elem((channels, frames), params.v_reset),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    #[default]
    Arctan,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub kind: SurrogateKind,
    pub alpha: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::Arctan,
            alpha: 2.0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return invalid("surrogate alpha must be positive");
        }
        Ok(())
    }
}

/// Backward-pass stand-in for dΘ/du: `α / (2 (1 + (π α u / 2)²))`.
pub fn heaviside_surrogate_grad<F: Real>(u: F, cfg: &SurrogateConfig) -> F {
    match cfg.kind {
        SurrogateKind::Arctan => {
            let alpha = F::lit(cfg.alpha);
            let two = F::lit(2.0);
            let z = F::PI() * alpha * u / two;
            alpha / (two * (F::one() + z * z))
        }
    }
}

/// One charge/fire/reset step over a `[C, L]` slab.
pub fn plif_step<F: Real>(
    x: ArrayView2<F>,
    state: &NeuronState<F>,
    params: &PlifParams<F>,
) -> Result<(Array2<F>, NeuronState<F>)> {
    if x.dim() != state.v.dim() {
        return invalid(format!(
            "input {:?} and membrane {:?} shapes differ",
            x.dim(),
            state.v.dim()
        ));
    }
    params.validate(x.nrows())?;
    let mut spikes = Array2::zeros(x.dim());
    let mut v = state.v.clone();
    for (c, ((xr, mut vr), mut sr)) in x
        .outer_iter()
        .zip(v.outer_iter_mut())
        .zip(spikes.outer_iter_mut())
        .enumerate()
    {
        let k = params.leak(c);
        for ((&xi, vi), si) in xr.iter().zip(vr.iter_mut()).zip(sr.iter_mut()) {
            if xi.is_nan() {
                return Err(Error::Numerical("NaN input to PLIF neuron".into()));
            }
            let (h, s) = charge_and_fire(xi, *vi, k, params);
            *si = s;
            *vi = reset(h, s, params);
        }
    }
    Ok((spikes, NeuronState { v }))
}

#[inline]
pub(crate) fn charge_and_fire<F: Real>(x: F, v_prev: F, k: F, p: &PlifParams<F>) -> (F, F) {
    let h = v_prev + k * (x - (v_prev - p.v_reset));
    let s = if h - p.v_threshold >= F::zero() {
        F::one()
    } else {
        F::zero()
    };
    (h, s)
}

#[inline]
pub(crate) fn reset<F: Real>(h: F, s: F, p: &PlifParams<F>) -> F {
    p.v_reset * s + h * (F::one() - s)
}

/// Runs a fresh neuron layer over `[T, C, L]`, returning spikes and the
/// charged potentials `H_t`.
pub(crate) fn plif_sequence_traced<F: Real>(
    xs: ArrayView3<F>,
    params: &PlifParams<F>,
) -> Result<(Array3<F>, Array3<F>)> {
    let (t_len, c_len, l_len) = xs.dim();
    if t_len == 0 {
        return invalid("PLIF sequence needs at least one timestep");
    }
    params.validate(c_len)?;
    if xs.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN input to PLIF neuron".into()));
    }
    let mut spikes = Array3::zeros(xs.dim());
    let mut charged = Array3::zeros(xs.dim());
    let mut v = Array2::from_elem((c_len, l_len), params.v_reset);
    for t in 0..t_len {
        let xt = xs.index_axis(Axis(0), t);
        let mut st = spikes.index_axis_mut(Axis(0), t);
        let mut ht = charged.index_axis_mut(Axis(0), t);
        for c in 0..c_len {
            let k = params.leak(c);
            Zip::from(xt.row(c))
                .and(v.row_mut(c))
                .and(st.row_mut(c))
                .and(ht.row_mut(c))
                .for_each(|&x, vi, si, hi| {
                    let (h, s) = charge_and_fire(x, *vi, k, params);
                    *hi = h;
                    *si = s;
                    *vi = reset(h, s, params);
                });
        }
    }
    Ok((spikes, charged))
}

/// Spike train of a fresh neuron layer driven by `xs` (`[T, C, L]`).
pub fn plif_sequence<F: Real>(xs: ArrayView3<F>, params: &PlifParams<F>) -> Result<Array3<F>> {
    plif_sequence_traced(xs, params).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_params() -> PlifParams<f64> {
        PlifParams::default()
    }

    #[test]
    fn tau_two_constant_drive_never_fires() {
        let p = default_params();
        assert!((p.tau(0) - 2.0).abs() < 1e-15);
        let mut state = NeuronState::new(1, 1, &p);
        let mut hs = vec![];
        for _ in 0..3 {
            let x = arr2(&[[1.0]]);
            let h = state.v[[0, 0]] + 0.5 * (1.0 - state.v[[0, 0]]);
            hs.push(h);
            let (s, next) = plif_step(x.view(), &state, &p).unwrap();
            assert_eq!(s[[0, 0]], 0.0);
            state = next;
        }
        assert_eq!(hs, vec![0.5, 0.75, 0.875]);
        assert_eq!(state.v[[0, 0]], 0.875);
    }

    #[test]
    fn firing_at_exact_threshold() {
        let p = default_params();
        let state = NeuronState::new(1, 1, &p);
        let (s, next) = plif_step(arr2(&[[2.0]]).view(), &state, &p).unwrap();
        assert_eq!(s[[0, 0]], 1.0);
        assert_eq!(next.v[[0, 0]], 0.0);
    }

    #[test]
    fn quiescent_without_input() {
        let p = default_params();
        let xs = Array3::<f64>::zeros((50, 2, 3));
        let s = plif_sequence(xs.view(), &p).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nan_rejected() {
        let p = default_params();
        let state = NeuronState::new(1, 1, &p);
        assert!(matches!(
            plif_step(arr2(&[[f64::NAN]]).view(), &state, &p),
            Err(Error::Numerical(_))
        ));
        let xs = Array3::from_elem((2, 1, 1), f64::NAN);
        assert!(plif_sequence(xs.view(), &p).is_err());
    }

    #[test]
    fn empty_sequence_rejected() {
        let xs = Array3::<f64>::zeros((0, 2, 2));
        assert!(matches!(
            plif_sequence(xs.view(), &default_params()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn single_step_sequence_matches_step() {
        let p = PlifParams::with_tau(3.0, 0.4, -0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = Array3::from_shape_fn((1, 3, 4), |_| rng.random_range(-1.0..2.0));
        let seq = plif_sequence(xs.view(), &p).unwrap();
        let (s, _) = plif_step(xs.index_axis(Axis(0), 0), &NeuronState::new(3, 4, &p), &p).unwrap();
        assert_eq!(seq.index_axis(Axis(0), 0), s);
    }

    #[test]
    fn per_channel_decay() {
        let mut p = default_params();
        p.w = Array1::from(vec![0.0, 5.0]);
        let xs = Array3::from_elem((1, 2, 1), 1.2);
        let s = plif_sequence(xs.view(), &p).unwrap();
        // k=0.5 -> H=0.6 (silent); k≈0.993 -> H≈1.19 (fires)
        assert_eq!(s[[0, 0, 0]], 0.0);
        assert_eq!(s[[0, 1, 0]], 1.0);
        p.w = Array1::zeros(3);
        assert!(plif_sequence(xs.view(), &p).is_err());
    }

    #[test]
    fn surrogate_shape() {
        let cfg = SurrogateConfig::default();
        assert_eq!(heaviside_surrogate_grad(0.0f64, &cfg), 1.0);
        assert!(heaviside_surrogate_grad(1e9f64, &cfg) < 1e-15);
        assert!(heaviside_surrogate_grad(-1e9f64, &cfg) < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let u: f64 = rng.random_range(-10.0..10.0);
            let g = heaviside_surrogate_grad(u, &cfg);
            assert_eq!(g, heaviside_surrogate_grad(-u, &cfg));
            assert!(g > 0.0 && g <= 1.0);
        }
    }

    proptest! {
        #[test]
        fn spikes_binary_and_compositional(
            seed in any::<u64>(),
            t_len in 1usize..8,
            w in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = PlifParams { w: Array1::from_elem(1, w), v_threshold: 0.7, v_reset: -0.2 };
            let xs = Array3::from_shape_fn((t_len, 2, 3), |_| rng.random_range(-2.0..3.0));
            let seq = plif_sequence(xs.view(), &p).unwrap();
            prop_assert!(seq.iter().all(|&s| s == 0.0 || s == 1.0));
            let mut state = NeuronState::new(2, 3, &p);
            for t in 0..t_len {
                let (s, next) = plif_step(xs.index_axis(Axis(0), t), &state, &p).unwrap();
                prop_assert_eq!(s, seq.index_axis(Axis(0), t).to_owned());
                state = next;
            }
        }

        #[test]
        fn sub_threshold_input_with_unit_tau_is_silent(
            xs in proptest::collection::vec(-5.0f64..0.999, 1..32),
        ) {
            // k → 1 (τ = 1): H = V_reset + X < V_th whenever X < V_th − V_reset.
            let p = PlifParams { w: Array1::from_elem(1, 40.0), v_threshold: 1.0, v_reset: 0.0 };
            let arr = Array3::from_shape_vec((xs.len(), 1, 1), xs).unwrap();
            let s = plif_sequence(arr.view(), &p).unwrap();
            prop_assert!(s.iter().all(|&v| v == 0.0));
        }

        #[test]
        fn potential_relaxes_towards_drive(x in 0.0f64..0.99, w in -2.0f64..2.0) {
            // Constant sub-threshold drive: H_t moves monotonically towards
            // V_reset + X without overshooting.
            let p = PlifParams { w: Array1::from_elem(1, w), v_threshold: 1.0, v_reset: 0.0 };
            let arr = Array3::from_elem((20, 1, 1), x);
            let (s, h) = plif_sequence_traced(arr.view(), &p).unwrap();
            prop_assert!(s.iter().all(|&v| v == 0.0));
            let mut prev = 0.0;
            for &ht in h.iter() {
                prop_assert!(ht >= prev - 1e-15 && ht <= x + 1e-15);
                prev = ht;
            }
        }
    }
}
