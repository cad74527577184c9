//! Teacher-to-student distillation objective: adapter-aligned feature loss,
//! log-magnitude loss and anti-wrapped phase losses.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::{gelu_array, pointwise_forward, wrap_residual, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::params::Parameters;
use crate::real::Real;

/// `|x − 2π·round(x / 2π)|`, the principal absolute value of a phase error.
pub fn anti_wrap<F: Real>(x: F) -> F {
    wrap_residual(x).abs()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterActivation {
    #[default]
    Gelu,
    Identity,
}

/// Square projection applied to a student tap before comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<F> {
    /// `[C, C]`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub activation: AdapterActivation,
}

impl<F: Real> Adapter<F> {
    /// Identity projection, zero bias.
    pub fn identity(channels: usize, activation: AdapterActivation) -> Self {
        Self {
            weight: Array2::eye(channels),
            bias: Array1::zeros(channels),
            activation,
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    /// `F(z)` for a `[T, C, L]` tap.
    pub fn apply(&self, z: &Array3<F>) -> Result<Array3<F>> {
        if z.dim().1 != self.channels() || self.weight.dim() != (self.channels(), self.channels()) {
            return invalid(format!("adapter of width {} applied to {:?}", self.channels(), z.dim()));
        }
        let y = pointwise_forward(z.view(), self.weight.view(), self.bias.as_slice().expect("contiguous"));
        Ok(match self.activation {
            AdapterActivation::Identity => y,
            AdapterActivation::Gelu => gelu_array(&y.into_dyn())
                .into_dimensionality()
                .expect("rank preserved"),
        })
    }
}

/// One adapter per distilled block pair.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Adapters<F>(pub Vec<Adapter<F>>);

impl<F: Real> Adapters<F> {
    pub fn identity(count: usize, channels: usize, activation: AdapterActivation) -> Self {
        Self((0..count).map(|_| Adapter::identity(channels, activation)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<F: Real> Parameters<F> for Adapters<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, ArrayViewD<'a, F>)) {
        for (i, a) in self.0.iter().enumerate() {
            f(&format!("adapters.{i}.weight"), a.weight.view().into_dyn());
            f(&format!("adapters.{i}.bias"), a.bias.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        for (i, a) in self.0.iter_mut().enumerate() {
            f(&format!("adapters.{i}.weight"), a.weight.view_mut().into_dyn());
            f(&format!("adapters.{i}.bias"), a.bias.view_mut().into_dyn());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdWeights {
    pub lambda_feat: f64,
    pub lambda_p: f64,
    pub lambda_m: f64,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self {
            lambda_feat: 1.0,
            lambda_p: 1.0,
            lambda_m: 1.0,
        }
    }
}

impl KdWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("lambda_feat", self.lambda_feat), ("lambda_p", self.lambda_p), ("lambda_m", self.lambda_m)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{n} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Student/teacher tap index pairs. With the temporal shift enabled each
/// student tap is matched to the teacher tap one block deeper, leaving the
/// last student block unpaired.
pub fn tap_pairs(n_blocks: usize, tsm_enabled: bool) -> Vec<(usize, usize)> {
    if tsm_enabled {
        (0..n_blocks.saturating_sub(1)).map(|n| (n, n + 1)).collect()
    } else {
        (0..n_blocks).map(|n| (n, n)).collect()
    }
}

/// `Σₙ mean((F(z_stu) − z_tea)²)` over already-paired taps.
pub fn feature_loss<F: Real>(taps_stu: &[Array3<F>], taps_tea: &[Array3<F>], adapters: &[Adapter<F>]) -> Result<F> {
    if taps_stu.len() != taps_tea.len() || taps_stu.len() != adapters.len() {
        return invalid(format!(
            "feature loss needs equal counts (student {}, teacher {}, adapters {})",
            taps_stu.len(),
            taps_tea.len(),
            adapters.len()
        ));
    }
    let mut total = F::zero();
    for ((s, t), a) in taps_stu.iter().zip(taps_tea).zip(adapters) {
        if s.dim() != t.dim() {
            return invalid(format!("tap shapes {:?} and {:?} differ", s.dim(), t.dim()));
        }
        let fs = a.apply(s)?;
        let n = F::lit(fs.len().max(1) as f64);
        total += Zip::from(&fs).and(t).fold(F::zero(), |acc, &x, &y| acc + (x - y) * (x - y)) / n;
    }
    Ok(total)
}

/// `mean |ln a_stu − ln a_tea|`.
pub fn magnitude_loss<F: Real>(a_stu: ArrayView2<F>, a_tea: ArrayView2<F>) -> Result<F> {
    if a_stu.dim() != a_tea.dim() {
        return invalid(format!("magnitude shapes {:?} and {:?} differ", a_stu.dim(), a_tea.dim()));
    }
    if a_stu.iter().chain(a_tea.iter()).any(|&a| !(a > F::zero())) {
        return invalid("magnitudes must be strictly positive");
    }
    let n = F::lit(a_stu.len().max(1) as f64);
    Ok(Zip::from(&a_stu).and(&a_tea).fold(F::zero(), |acc, &s, &t| acc + (s.ln() - t.ln()).abs()) / n)
}

/// Instantaneous phase, group delay and phase time difference losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseLosses<F> {
    pub ip: F,
    pub gd: F,
    pub ptd: F,
    pub total: F,
}

fn mean_anti_wrap<F: Real>(d: impl Iterator<Item = F>) -> F {
    let (sum, n) = d.fold((F::zero(), 0usize), |(s, n), x| (s + anti_wrap(x), n + 1));
    sum / F::lit(n.max(1) as f64)
}

fn forward_diff<F: Real>(x: ArrayView2<F>, axis: usize) -> Array2<F> {
    let n = x.len_of(Axis(axis));
    let hi = x.slice_axis(Axis(axis), ndarray::Slice::from(1..n));
    let lo = x.slice_axis(Axis(axis), ndarray::Slice::from(0..n - 1));
    &hi - &lo
}

/// Phase losses on `[F, L]` phase arrays; differences run along frequency
/// (axis 0) for group delay and time (axis 1) for the time difference.
pub fn phase_loss<F: Real>(phi_stu: ArrayView2<F>, phi_tea: ArrayView2<F>) -> Result<PhaseLosses<F>> {
    if phi_stu.dim() != phi_tea.dim() {
        return invalid(format!("phase shapes {:?} and {:?} differ", phi_stu.dim(), phi_tea.dim()));
    }
    let (bins, frames) = phi_stu.dim();
    if bins < 2 || frames < 2 {
        return invalid(format!("phase loss needs at least 2 bins and 2 frames, got {bins}x{frames}"));
    }
    let ip = mean_anti_wrap(Zip::from(&phi_tea).and(&phi_stu).map_collect(|&t, &s| t - s).into_iter());
    let gd = mean_anti_wrap((forward_diff(phi_tea, 0) - forward_diff(phi_stu, 0)).into_iter());
    let ptd = mean_anti_wrap((forward_diff(phi_tea, 1) - forward_diff(phi_stu, 1)).into_iter());
    Ok(PhaseLosses { ip, gd, ptd, total: ip + gd + ptd })
}

/// Unweighted distillation components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdComponents<F> {
    pub feature: F,
    pub magnitude: F,
    pub phase: F,
}

/// `λ_feat·L_feat + λ_P·L_P + λ_M·L_M`.
pub fn kd_loss<F: Real>(c: &KdComponents<F>, w: &KdWeights) -> F {
    F::lit(w.lambda_feat) * c.feature + F::lit(w.lambda_p) * c.phase + F::lit(w.lambda_m) * c.magnitude
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AdapterVars {
    pub weight: Var,
    pub bias: Var,
}

pub(crate) fn bind_adapters<F: Real>(a: &Adapters<F>, g: &mut Graph<F>, trainable: bool) -> (Vec<Var>, Vec<AdapterVars>) {
    let flat = a.bind_all(g, trainable);
    let vars = flat.chunks(2).map(|c| AdapterVars { weight: c[0], bias: c[1] }).collect();
    (flat, vars)
}

/// Loss nodes of the distillation objective.
#[derive(Clone, Copy, Debug)]
pub(crate) struct KdNodes {
    pub total: Var,
    pub feature: Var,
    pub magnitude: Var,
    pub ip: Var,
    pub gd: Var,
    pub ptd: Var,
}

pub(crate) struct KdInputs<'a> {
    pub taps_stu: &'a [Var],
    pub taps_tea: &'a [Var],
    pub pairs: &'a [(usize, usize)],
    pub log_mag_stu: Var,
    pub log_mag_tea: Var,
    pub phase_stu: Var,
    pub phase_tea: Var,
}

pub(crate) fn kd_graph<F: Real>(
    g: &mut Graph<F>,
    inputs: &KdInputs<'_>,
    adapters: &[AdapterVars],
    activations: &[AdapterActivation],
    w: &KdWeights,
) -> Result<KdNodes> {
    if inputs.pairs.len() != adapters.len() {
        return invalid(format!("{} tap pairs but {} adapters", inputs.pairs.len(), adapters.len()));
    }
    let zero = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[])));
    let mut feature = zero;
    for ((&(s, t), a), act) in inputs.pairs.iter().zip(adapters).zip(activations) {
        let zs = *inputs.taps_stu.get(s).ok_or_else(|| Error::InvalidInput("student tap index out of range".into()))?;
        let zt = *inputs.taps_tea.get(t).ok_or_else(|| Error::InvalidInput("teacher tap index out of range".into()))?;
        let mut y = g.pointwise(zs, a.weight, a.bias)?;
        if *act == AdapterActivation::Gelu {
            y = g.gelu(y);
        }
        let d = g.sub(y, zt)?;
        let sq = g.mul(d, d)?;
        let m = g.mean(sq);
        feature = g.add(feature, m)?;
    }
    let dm = g.sub(inputs.log_mag_stu, inputs.log_mag_tea)?;
    let am = g.abs(dm);
    let magnitude = g.mean(am);

    let dp = g.sub(inputs.phase_tea, inputs.phase_stu)?;
    let aw = g.anti_wrap(dp);
    let ip = g.mean(aw);
    let mut diffs = [ip; 2];
    for (axis, out) in diffs.iter_mut().enumerate() {
        let dt = g.diff(inputs.phase_tea, axis)?;
        let ds = g.diff(inputs.phase_stu, axis)?;
        let d = g.sub(dt, ds)?;
        let a = g.anti_wrap(d);
        *out = g.mean(a);
    }
    let [gd, ptd] = diffs;
    let p1 = g.add(ip, gd)?;
    let phase = g.add(p1, ptd)?;

    let f = g.scale(feature, F::lit(w.lambda_feat));
    let p = g.scale(phase, F::lit(w.lambda_p));
    let m = g.scale(magnitude, F::lit(w.lambda_m));
    let fp = g.add(f, p)?;
    let total = g.add(fp, m)?;
    Ok(KdNodes { total, feature, magnitude, ip, gd, ptd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rand2(seed: u64, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
    }

    fn rand3(seed: u64, shape: (usize, usize, usize)) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(shape, || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn anti_wrap_values() {
        assert_eq!(anti_wrap(0.0f64), 0.0);
        assert!((anti_wrap(3.0 * PI) - PI).abs() < 1e-12);
        assert!((anti_wrap(PI / 3.0) - PI / 3.0).abs() < 1e-12);
        assert!((anti_wrap(2.0 * PI - PI / 3.0) - PI / 3.0).abs() < 1e-12);
        assert!((anti_wrap(PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn feature_loss_cases() {
        let z = rand3(1, (1, 4, 5));
        let id = Adapter::<f64>::identity(4, AdapterActivation::Identity);
        assert_eq!(feature_loss(&[z.clone()], &[z.clone()], &[id.clone()]).unwrap(), 0.0);
        let mut shift = id.clone();
        shift.bias.fill(1.0);
        assert!((feature_loss(&[z.clone()], &[z.clone()], &[shift]).unwrap() - 1.0).abs() < 1e-12);
        let gelu = Adapter::<f64>::identity(4, AdapterActivation::Gelu);
        assert!(feature_loss(&[z.clone()], &[rand3(2, (1, 4, 5))], &[gelu]).unwrap() > 0.0);
        assert!(feature_loss(&[z.clone()], &[], &[id.clone()]).is_err());
        assert!(feature_loss(&[z.clone()], &[rand3(2, (1, 4, 6))], &[id]).is_err());
    }

    #[test]
    fn magnitude_loss_cases() {
        let a = rand2(3, (5, 4), 0.1, 3.0);
        assert_eq!(magnitude_loss(a.view(), a.view()).unwrap(), 0.0);
        let e = a.mapv(|v| v * std::f64::consts::E);
        assert!((magnitude_loss(e.view(), a.view()).unwrap() - 1.0).abs() < 1e-12);
        let b = rand2(4, (5, 4), 0.1, 3.0);
        let l = magnitude_loss(a.view(), b.view()).unwrap();
        let l7 = magnitude_loss((&a * 7.0).view(), (&b * 7.0).view()).unwrap();
        assert!((l - l7).abs() < 1e-12);
        let mut z = a.clone();
        z[[0, 0]] = 0.0;
        assert!(matches!(magnitude_loss(z.view(), a.view()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn phase_loss_offsets() {
        let p = rand2(5, (6, 5), -PI, PI);
        let zero = phase_loss(p.view(), p.view()).unwrap();
        assert_eq!(zero.total, 0.0);
        let wrapped = phase_loss((&p + 2.0 * PI).view(), p.view()).unwrap();
        assert!(wrapped.total < 1e-12);
        let half = phase_loss((&p + PI).view(), p.view()).unwrap();
        assert!((half.ip - PI).abs() < 1e-12);
        assert!(half.gd < 1e-12 && half.ptd < 1e-12);
        assert!((half.total - PI).abs() < 1e-12);
        assert!(phase_loss(p.slice(ndarray::s![..1, ..]), p.slice(ndarray::s![..1, ..])).is_err());
    }

    #[test]
    fn kd_loss_arithmetic() {
        let c = KdComponents { feature: 1.0, phase: 2.0, magnitude: 3.0 };
        let w = KdWeights { lambda_feat: 1.0, lambda_p: 0.5, lambda_m: 2.0 };
        assert_eq!(kd_loss(&c, &w), 8.0);
        let z = KdWeights { lambda_feat: 0.0, lambda_p: 0.0, lambda_m: 0.0 };
        assert_eq!(kd_loss(&c, &z), 0.0);
        assert!(KdWeights { lambda_p: -1.0, ..KdWeights::default() }.validate().is_err());
    }

    #[test]
    fn pairing() {
        assert_eq!(tap_pairs(3, true), vec![(0, 1), (1, 2)]);
        assert_eq!(tap_pairs(2, false), vec![(0, 0), (1, 1)]);
        assert!(tap_pairs(1, true).is_empty());
    }

    #[test]
    fn graph_matches_array_losses() {
        let ts = [rand3(10, (1, 4, 6)), rand3(11, (1, 4, 6))];
        let tt = [rand3(12, (1, 4, 6)), rand3(13, (1, 4, 6))];
        let ls = rand2(14, (5, 6), -2.0, 2.0);
        let lt = rand2(15, (5, 6), -2.0, 2.0);
        let ps = rand2(16, (5, 6), -4.0, 4.0);
        let pt = rand2(17, (5, 6), -4.0, 4.0);
        let mut adapters = Adapters::<f64>::identity(2, 4, AdapterActivation::Gelu);
        adapters.0[1].weight[[0, 1]] = 0.3;
        let w = KdWeights { lambda_feat: 0.7, lambda_p: 1.3, lambda_m: 0.4 };

        let mut g = Graph::<f64>::default();
        let s: Vec<Var> = ts.iter().map(|t| g.constant(t.clone().into_dyn())).collect();
        let t: Vec<Var> = tt.iter().map(|t| g.constant(t.clone().into_dyn())).collect();
        let (_, av) = bind_adapters(&adapters, &mut g, true);
        let inputs = KdInputs {
            taps_stu: &s,
            taps_tea: &t,
            pairs: &[(0, 0), (1, 1)],
            log_mag_stu: g.constant(ls.clone().into_dyn()),
            log_mag_tea: g.constant(lt.clone().into_dyn()),
            phase_stu: g.constant(ps.clone().into_dyn()),
            phase_tea: g.constant(pt.clone().into_dyn()),
        };
        let acts = [AdapterActivation::Gelu; 2];
        let nodes = kd_graph(&mut g, &inputs, &av, &acts, &w).unwrap();

        let feat = feature_loss(&ts, &tt, &adapters.0).unwrap();
        let mag = magnitude_loss(ls.mapv(f64::exp).view(), lt.mapv(f64::exp).view()).unwrap();
        let ph = phase_loss(ps.view(), pt.view()).unwrap();
        let close = |v: Var, e: f64| assert!((g.value(v)[[]] - e).abs() < 1e-12, "{} vs {e}", g.value(v)[[]]);
        close(nodes.feature, feat);
        close(nodes.magnitude, mag);
        close(nodes.ip, ph.ip);
        close(nodes.gd, ph.gd);
        close(nodes.ptd, ph.ptd);
        close(nodes.total, kd_loss(&KdComponents { feature: feat, magnitude: mag, phase: ph.total }, &w));
    }

    proptest! {
        #[test]
        fn anti_wrap_properties(x in -100.0f64..100.0, k in -20i32..20) {
            let a = anti_wrap(x);
            prop_assert!((0.0..=PI).contains(&a));
            prop_assert!((a - anti_wrap(-x)).abs() < 1e-9);
            prop_assert!((a - anti_wrap(x + 2.0 * PI * k as f64)).abs() < 1e-9);
        }

        #[test]
        fn phase_loss_wrap_invariant(seed in any::<u64>(), k in -5i32..5) {
            let p = rand2(seed, (4, 4), -PI, PI);
            let q = rand2(seed ^ 1, (4, 4), -PI, PI);
            let base = phase_loss(p.view(), q.view()).unwrap();
            let shifted = phase_loss((&p + 2.0 * PI * k as f64).view(), q.view()).unwrap();
            prop_assert!((base.total - shifted.total).abs() < 1e-9);
            prop_assert!(base.ip >= 0.0 && base.gd >= 0.0 && base.ptd >= 0.0);
        }
    }
}
