//! Tape-based reverse-mode differentiation over n-d tensors.
//!
//! Every operation appends a node holding its value and enough context for
//! the vector-Jacobian product. `backward` walks the tape once in reverse
//! creation order, so gradient accumulation is deterministic.

use ndarray::{s, Array2, Array3, ArrayD, ArrayView3, Axis, Ix2, Ix3, IxDyn, Zip};

use crate::block::{tsm_shift_adjoint, tsm_shift_array, TsmConfig};
use crate::dsp::{SpectralKernel, StftConfig};
use crate::error::{invalid, Error, Result};
use crate::neuron::{heaviside_surrogate_grad, plif_sequence_traced, reset, PlifParams, SurrogateConfig};
use crate::real::Real;

pub type Tensor<F> = ArrayD<F>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    Cos(Var),
    Sin(Var),
    Gelu(Var),
    ClampMax(Var, F),
    ClampMin(Var, F),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var, b: Var },
    Depthwise { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array3<F>, rstd: Array2<F> },
    Pointwise { x: Var, w: Var, b: Var },
    Plif { x: Var, w: Var, params: PlifParams<F>, charged: Array3<F>, surrogate: SurrogateConfig },
    Tsm { x: Var, cfg: TsmConfig },
    ChannelScale { x: Var, s: Var },
    MeanTime(Var),
    RepeatTime(Var),
    Istft { re: Var, im: Var, cfg: StftConfig },
    Stft { x: Var, cfg: StftConfig },
    ComplexAbs(Var),
    AntiWrap(Var),
    Diff { x: Var, axis: usize },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    surrogate: SurrogateConfig,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new(SurrogateConfig::default())
    }
}

fn as3<F: Real>(t: &Tensor<F>) -> ArrayView3<'_, F> {
    t.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

fn as2<F: Real>(t: &Tensor<F>) -> ndarray::ArrayView2<'_, F> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn as1<F: Real>(t: &Tensor<F>) -> ndarray::ArrayView1<'_, F> {
    t.view().into_dimensionality::<ndarray::Ix1>().expect("rank-1 tensor")
}

fn sign<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Principal-value residual `x − 2π·round(x / 2π)` with half-away-from-zero
/// rounding.
pub(crate) fn wrap_residual<F: Real>(x: F) -> F {
    x - F::TAU() * (x / F::TAU()).round()
}

fn gelu<F: Real>(x: F) -> F {
    F::lit(0.5) * x * (F::one() + (x / F::SQRT_2()).erf())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let cdf = F::lit(0.5) * (F::one() + (x / F::SQRT_2()).erf());
    let pdf = (-(x * x) / F::lit(2.0)).exp() / (F::TAU()).sqrt();
    cdf + x * pdf
}

pub(crate) fn gelu_array<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.mapv(gelu)
}

// --- forward kernels -------------------------------------------------------

/// Same-padded 1-D convolution: `x [T, Cin, L]`, `w [Cout, Cin, K]`, `b [Cout]`.
pub(crate) fn conv1d_forward<F: Real>(x: ArrayView3<F>, w: ArrayView3<F>, b: &[F]) -> Array3<F> {
    let (t_len, _, l_len) = x.dim();
    let (c_out, _, k_len) = w.dim();
    let pad = k_len / 2;
    let mut y = Array3::zeros((t_len, c_out, l_len));
    for t in 0..t_len {
        let mut yt = y.index_axis_mut(Axis(0), t);
        for (o, mut row) in yt.outer_iter_mut().enumerate() {
            row.fill(b[o]);
        }
        for k in 0..k_len {
            let wk = w.slice(s![.., .., k]).to_owned();
            let (lo, hi) = tap_range(k, pad, l_len);
            if lo >= hi {
                continue;
            }
            let xs = x.slice(s![t, .., (lo + k - pad)..(hi + k - pad)]);
            let mut ys = yt.slice_mut(s![.., lo..hi]);
            ndarray::linalg::general_mat_mul(F::one(), &wk, &xs, F::one(), &mut ys);
        }
    }
    y
}

/// Output positions `l` for which tap `k` reads an in-range input `l + k − pad`.
fn tap_range(k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

pub(crate) fn depthwise_forward<F: Real>(x: ArrayView3<F>, w: ndarray::ArrayView2<F>, b: &[F]) -> Array3<F> {
    let (t_len, c_len, l_len) = x.dim();
    let k_len = w.ncols();
    let pad = k_len / 2;
    let mut y = Array3::zeros((t_len, c_len, l_len));
    for t in 0..t_len {
        for c in 0..c_len {
            for l in 0..l_len {
                let mut acc = b[c];
                for k in 0..k_len {
                    let src = l as isize + k as isize - pad as isize;
                    if src >= 0 && (src as usize) < l_len {
                        acc = acc + w[[c, k]] * x[[t, c, src as usize]];
                    }
                }
                y[[t, c, l]] = acc;
            }
        }
    }
    y
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;

/// Channel-wise layer norm per `(t, l)`; returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_forward<F: Real>(
    x: ArrayView3<F>,
    gain: &[F],
    bias: &[F],
) -> (Array3<F>, Array3<F>, Array2<F>) {
    let (t_len, c_len, l_len) = x.dim();
    let mut xhat = Array3::zeros(x.dim());
    let mut rstd = Array2::zeros((t_len, l_len));
    let n = F::lit(c_len as f64);
    let eps = F::lit(LAYER_NORM_EPS);
    for t in 0..t_len {
        for l in 0..l_len {
            let col = x.slice(s![t, .., l]);
            let mean = col.sum() / n;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            rstd[[t, l]] = r;
            for c in 0..c_len {
                xhat[[t, c, l]] = (x[[t, c, l]] - mean) * r;
            }
        }
    }
    let mut y = xhat.clone();
    for c in 0..c_len {
        y.slice_mut(s![.., c, ..]).mapv_inplace(|v| v * gain[c] + bias[c]);
    }
    (y, xhat, rstd)
}

pub(crate) fn pointwise_forward<F: Real>(x: ArrayView3<F>, w: ndarray::ArrayView2<F>, b: &[F]) -> Array3<F> {
    let (t_len, _, l_len) = x.dim();
    let c_out = w.nrows();
    let mut y = Array3::zeros((t_len, c_out, l_len));
    for t in 0..t_len {
        let mut yt = y.index_axis_mut(Axis(0), t);
        for (o, mut row) in yt.outer_iter_mut().enumerate() {
            row.fill(b[o]);
        }
        ndarray::linalg::general_mat_mul(F::one(), &w, &x.index_axis(Axis(0), t), F::one(), &mut yt);
    }
    y
}

fn slice_of<F: Real>(t: &Tensor<F>) -> Vec<F> {
    t.iter().copied().collect()
}

impl<F: Real> Graph<F> {
    pub fn new(surrogate: SurrogateConfig) -> Self {
        Self {
            nodes: Vec::new(),
            surrogate,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return invalid(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.abs());
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.ln());
        self.push(v, Op::Ln(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.cos());
        self.push(v, Op::Cos(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.sin());
        self.push(v, Op::Sin(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = gelu_array(self.value(a));
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn clamp_max(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).mapv(|x| x.min(c));
        self.push(v, Op::ClampMax(a, c), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).mapv(|x| x.max(c));
        self.push(v, Op::ClampMin(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::lit(self.value(a).len().max(1) as f64);
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum() / n);
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if src.len() != shape.iter().product::<usize>() {
            return invalid(format!("cannot reshape {:?} into {shape:?}", src.shape()));
        }
        let v = ArrayD::from_shape_vec(IxDyn(shape), src.iter().copied().collect())
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.ndim() || start + len > src.shape()[axis] {
            return invalid(format!(
                "narrow axis {axis} [{start}, {}) out of range for {:?}",
                start + len,
                src.shape()
            ));
        }
        let v = src
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        Ok(self.push(v, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return invalid(format!("matmul of {:?} and {:?}", va.shape(), vb.shape()));
        }
        let v = as2(va).dot(&as2(vb)).into_dyn();
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ndim() != 3 || vw.ndim() != 3 || vw.shape()[1] != vx.shape()[1] || vb.shape() != [vw.shape()[0]] {
            return invalid(format!(
                "conv1d shapes x{:?} w{:?} b{:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            ));
        }
        let y = conv1d_forward(as3(vx), as3(vw), &slice_of(vb)).into_dyn();
        Ok(self.push(y, Op::Conv1d { x, w, b }, &[x, w, b]))
    }

    pub fn depthwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ndim() != 3 || vw.ndim() != 2 || vw.shape()[0] != vx.shape()[1] || vb.shape() != [vx.shape()[1]] {
            return invalid(format!(
                "depthwise shapes x{:?} w{:?} b{:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            ));
        }
        let y = depthwise_forward(as3(vx), as2(vw), &slice_of(vb)).into_dyn();
        Ok(self.push(y, Op::Depthwise { x, w, b }, &[x, w, b]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        if vx.ndim() != 3 || vg.shape() != [vx.shape()[1]] || vb.shape() != vg.shape() {
            return invalid(format!(
                "layer_norm shapes x{:?} gain{:?} bias{:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            ));
        }
        let (y, xhat, rstd) = layer_norm_forward(as3(vx), &slice_of(vg), &slice_of(vb));
        Ok(self.push(y.into_dyn(), Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    pub fn pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ndim() != 3 || vw.ndim() != 2 || vw.shape()[1] != vx.shape()[1] || vb.shape() != [vw.shape()[0]] {
            return invalid(format!(
                "pointwise shapes x{:?} w{:?} b{:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            ));
        }
        let y = pointwise_forward(as3(vx), as2(vw), &slice_of(vb)).into_dyn();
        Ok(self.push(y, Op::Pointwise { x, w, b }, &[x, w, b]))
    }

    /// PLIF layer over `[T, C, L]`; `w` is the `[1]` or `[C]` decay parameter.
    /// Threshold and reset are taken from `fixed`.
    pub fn plif(&mut self, x: Var, w: Var, fixed: &PlifParams<F>) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 {
            return invalid(format!("plif expects [T, C, L], got {:?}", vx.shape()));
        }
        let params = PlifParams {
            w: self.value(w).iter().copied().collect(),
            v_threshold: fixed.v_threshold,
            v_reset: fixed.v_reset,
        };
        let (spikes, charged) = plif_sequence_traced(as3(vx), &params)?;
        let surrogate = self.surrogate;
        Ok(self.push(
            spikes.into_dyn(),
            Op::Plif { x, w, params, charged, surrogate },
            &[x, w],
        ))
    }

    pub fn tsm(&mut self, x: Var, cfg: &TsmConfig) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 {
            return invalid(format!("tsm expects [T, C, L], got {:?}", vx.shape()));
        }
        let shifted = tsm_shift_array(as3(vx), cfg)?;
        let alpha = F::lit(cfg.alpha);
        let y = (shifted * alpha + as3(vx)).into_dyn();
        Ok(self.push(y, Op::Tsm { x, cfg: cfg.clone() }, &[x]))
    }

    /// `x [T, C, L] ⊙ s [C]` broadcast over timesteps and frames.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vx.ndim() != 3 || vs.shape() != [vx.shape()[1]] {
            return invalid(format!("scale_channels shapes x{:?} s{:?}", vx.shape(), vs.shape()));
        }
        let sv = as1(vs).to_owned().into_shape_with_order((1, vs.len(), 1)).expect("reshape");
        let y = (&as3(vx) * &sv).into_dyn();
        Ok(self.push(y, Op::ChannelScale { x, s }, &[x, s]))
    }

    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 || vx.shape()[0] == 0 {
            return invalid(format!("mean_time expects [T>=1, C, L], got {:?}", vx.shape()));
        }
        let y = vx.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        Ok(self.push(y, Op::MeanTime(x), &[x]))
    }

    pub fn repeat_time(&mut self, x: Var, t_len: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 || vx.shape()[0] != 1 || t_len == 0 {
            return invalid(format!("repeat_time expects [1, C, L], got {:?}", vx.shape()));
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = t_len;
        let y = vx.broadcast(IxDyn(&shape)).expect("broadcast over T").to_owned();
        Ok(self.push(y, Op::RepeatTime(x), &[x]))
    }

    /// Overlap-add synthesis of `re + i·im` (`[bins, frames]`) into a waveform.
    pub fn istft(&mut self, re: Var, im: Var, cfg: &StftConfig) -> Result<Var> {
        self.same_shape(re, im, "istft")?;
        let kernel = SpectralKernel::new(cfg)?;
        let (vr, vi) = (self.value(re), self.value(im));
        if vr.ndim() != 2 {
            return invalid("istft expects [bins, frames] inputs");
        }
        let y = kernel.inverse(as2(vr), as2(vi), None)?;
        let y = ArrayD::from_shape_vec(IxDyn(&[y.len()]), y).expect("1-d");
        Ok(self.push(y, Op::Istft { re, im, cfg: cfg.clone() }, &[re, im]))
    }

    /// STFT of a 1-d signal into a stacked `[2, bins, frames]` (re, im) tensor.
    pub fn stft(&mut self, x: Var, cfg: &StftConfig) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 1 {
            return invalid("stft expects a 1-d signal");
        }
        let kernel = SpectralKernel::new(cfg)?;
        let (re, im) = kernel.forward(&slice_of(vx))?;
        let y = ndarray::stack(Axis(0), &[re.view(), im.view()]).expect("equal shapes").into_dyn();
        Ok(self.push(y, Op::Stft { x, cfg: cfg.clone() }, &[x]))
    }

    /// `|re + i·im|` of a stacked `[2, ...]` tensor.
    pub fn complex_abs(&mut self, z: Var) -> Result<Var> {
        let vz = self.value(z);
        if vz.ndim() < 1 || vz.shape()[0] != 2 {
            return invalid("complex_abs expects a leading axis of length 2");
        }
        let re = vz.index_axis(Axis(0), 0);
        let im = vz.index_axis(Axis(0), 1);
        let y = Zip::from(&re).and(&im).map_collect(|&r, &i| r.hypot(i));
        Ok(self.push(y, Op::ComplexAbs(z), &[z]))
    }

    pub fn anti_wrap(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| wrap_residual(a).abs());
        self.push(v, Op::AntiWrap(x), &[x])
    }

    /// Forward difference along `axis`; that axis shrinks by one.
    pub fn diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() || vx.shape()[axis] < 2 {
            return invalid(format!("diff along axis {axis} of {:?}", vx.shape()));
        }
        let n = vx.shape()[axis];
        let hi = vx.slice_axis(Axis(axis), ndarray::Slice::from(1..n));
        let lo = vx.slice_axis(Axis(axis), ndarray::Slice::from(0..n - 1));
        let v = &hi - &lo;
        Ok(self.push(v, Op::Diff { x, axis }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::InvalidState("loss variable is not on this graph".into()))?;
        if node.value.len() != 1 {
            return Err(Error::InvalidState(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::InvalidState(
                "loss is detached from every trainable parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(node.value.raw_dim(), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            for (input, gi) in self.vjp(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => *acc += &gi,
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.mapv(|x| -x))],
            Op::Mul(a, b) => vec![(*a, g * val(*b)), (*b, g * val(*a))],
            Op::Scale(a, c) => vec![(*a, g.mapv(|x| x * *c))],
            Op::Abs(a) => vec![(*a, Zip::from(g).and(val(*a)).map_collect(|&gi, &x| gi * sign(x)))],
            Op::Exp(a) => vec![(*a, g * &node.value)],
            Op::Ln(a) => vec![(*a, Zip::from(g).and(val(*a)).map_collect(|&gi, &x| gi / x))],
            Op::Cos(a) => vec![(*a, Zip::from(g).and(val(*a)).map_collect(|&gi, &x| -gi * x.sin()))],
            Op::Sin(a) => vec![(*a, Zip::from(g).and(val(*a)).map_collect(|&gi, &x| gi * x.cos()))],
            Op::Gelu(a) => vec![(*a, Zip::from(g).and(val(*a)).map_collect(|&gi, &x| gi * gelu_grad(x)))],
            Op::ClampMax(a, c) => vec![(
                *a,
                Zip::from(g).and(val(*a)).map_collect(|&gi, &x| if x <= *c { gi } else { F::zero() }),
            )],
            Op::ClampMin(a, c) => vec![(
                *a,
                Zip::from(g).and(val(*a)).map_collect(|&gi, &x| if x >= *c { gi } else { F::zero() }),
            )],
            Op::Sum(a) => {
                let s = g.iter().next().copied().unwrap_or_else(F::zero);
                vec![(*a, ArrayD::from_elem(val(*a).raw_dim(), s))]
            }
            Op::Mean(a) => {
                let n = F::lit(val(*a).len().max(1) as f64);
                let s = g.iter().next().copied().unwrap_or_else(F::zero) / n;
                vec![(*a, ArrayD::from_elem(val(*a).raw_dim(), s))]
            }
            Op::Reshape(a) => {
                let gi = ArrayD::from_shape_vec(val(*a).raw_dim(), g.iter().copied().collect())
                    .expect("same element count");
                vec![(*a, gi)]
            }
            Op::Narrow { x, axis, start } => {
                let mut gi = ArrayD::zeros(val(*x).raw_dim());
                let len = g.shape()[*axis];
                gi.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                    .assign(g);
                vec![(*x, gi)]
            }
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                let ga = g2.dot(&as2(val(*b)).t()).into_dyn();
                let gb = as2(val(*a)).t().dot(&g2).into_dyn();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv1d { x, w, b } => {
                let (gx, gw, gb) = conv1d_backward(as3(val(*x)), as3(val(*w)), as3(g));
                vec![(*x, gx.into_dyn()), (*w, gw.into_dyn()), (*b, gb.into_dyn())]
            }
            Op::Depthwise { x, w, b } => {
                let (gx, gw, gb) = depthwise_backward(as3(val(*x)), as2(val(*w)), as3(g));
                vec![(*x, gx.into_dyn()), (*w, gw.into_dyn()), (*b, gb.into_dyn())]
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (gx, gg, gb) = layer_norm_backward(xhat, rstd, &slice_of(val(*gain)), as3(g));
                vec![(*x, gx.into_dyn()), (*gain, gg.into_dyn()), (*bias, gb.into_dyn())]
            }
            Op::Pointwise { x, w, b } => {
                let (gx, gw, gb) = pointwise_backward(as3(val(*x)), as2(val(*w)), as3(g));
                vec![(*x, gx.into_dyn()), (*w, gw.into_dyn()), (*b, gb.into_dyn())]
            }
            Op::Plif { x, w, params, charged, surrogate } => {
                let (gx, gw) = plif_backward(as3(val(*x)), params, charged, as3(&node.value), as3(g), surrogate);
                vec![(*x, gx.into_dyn()), (*w, gw.into_dyn())]
            }
            Op::Tsm { x, cfg } => {
                let g3 = as3(g);
                let adj = tsm_shift_adjoint(g3, cfg)?;
                vec![(*x, (adj * F::lit(cfg.alpha) + g3).into_dyn())]
            }
            Op::ChannelScale { x, s } => {
                let vs = val(*s);
                let sv = as1(vs).to_owned().into_shape_with_order((1, vs.len(), 1)).expect("reshape");
                let g3 = as3(g);
                let gx = (&g3 * &sv).into_dyn();
                let gs = (&g3 * &as3(val(*x))).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn();
                vec![(*x, gx), (*s, gs)]
            }
            Op::MeanTime(x) => {
                let t_len = val(*x).shape()[0];
                let gi = g.broadcast(val(*x).raw_dim()).expect("broadcast").mapv(|v| v / F::lit(t_len as f64));
                vec![(*x, gi)]
            }
            Op::RepeatTime(x) => vec![(*x, g.sum_axis(Axis(0)).insert_axis(Axis(0)))],
            Op::Istft { re, im, cfg } => {
                let kernel = SpectralKernel::new(cfg)?;
                let frames = val(*re).shape()[1];
                let (gr, gi) = kernel.inverse_adjoint(&slice_of(g), frames)?;
                vec![(*re, gr.into_dyn()), (*im, gi.into_dyn())]
            }
            Op::Stft { x, cfg } => {
                let kernel = SpectralKernel::new(cfg)?;
                let gre = g.index_axis(Axis(0), 0).into_dimensionality::<Ix2>().expect("2-d");
                let gim = g.index_axis(Axis(0), 1).into_dimensionality::<Ix2>().expect("2-d");
                let gx = kernel.forward_adjoint(gre, gim, val(*x).len());
                vec![(*x, ArrayD::from_shape_vec(IxDyn(&[gx.len()]), gx).expect("1-d"))]
            }
            Op::ComplexAbs(z) => {
                let vz = val(*z);
                let mut gz = ArrayD::zeros(vz.raw_dim());
                let re = vz.index_axis(Axis(0), 0);
                let im = vz.index_axis(Axis(0), 1);
                let (mut gre, mut gim) = gz.view_mut().split_at(Axis(0), 1);
                Zip::from(gre.index_axis_mut(Axis(0), 0))
                    .and(gim.index_axis_mut(Axis(0), 0))
                    .and(&re)
                    .and(&im)
                    .and(&node.value)
                    .and(g)
                    .for_each(|gr, gi, &r, &i, &m, &gm| {
                        if m > F::zero() {
                            *gr = gm * r / m;
                            *gi = gm * i / m;
                        }
                    });
                vec![(*z, gz)]
            }
            Op::AntiWrap(x) => {
                let gi = Zip::from(g).and(val(*x)).map_collect(|&gi, &a| {
                    let r = wrap_residual(a);
                    if r == F::zero() || r.abs() >= F::PI() {
                        F::zero()
                    } else {
                        gi * sign(r)
                    }
                });
                vec![(*x, gi)]
            }
            Op::Diff { x, axis } => {
                let n = val(*x).shape()[*axis];
                let mut gi = ArrayD::zeros(val(*x).raw_dim());
                {
                    let mut hi = gi.slice_axis_mut(Axis(*axis), ndarray::Slice::from(1..n));
                    hi += g;
                }
                {
                    let mut lo = gi.slice_axis_mut(Axis(*axis), ndarray::Slice::from(0..n - 1));
                    lo -= g;
                }
                vec![(*x, gi)]
            }
        };
        Ok(out)
    }
}

// --- backward kernels ------------------------------------------------------

fn conv1d_backward<F: Real>(
    x: ArrayView3<F>,
    w: ArrayView3<F>,
    g: ArrayView3<F>,
) -> (Array3<F>, Array3<F>, ndarray::Array1<F>) {
    let (t_len, c_in, l_len) = x.dim();
    let (c_out, _, k_len) = w.dim();
    let pad = k_len / 2;
    let mut gx = Array3::zeros((t_len, c_in, l_len));
    let mut gw = Array3::zeros((c_out, c_in, k_len));
    for k in 0..k_len {
        let (lo, hi) = tap_range(k, pad, l_len);
        if lo >= hi {
            continue;
        }
        let wk = w.slice(s![.., .., k]).to_owned();
        let mut gwk = Array2::zeros((c_out, c_in));
        for t in 0..t_len {
            let gs = g.slice(s![t, .., lo..hi]);
            let xs = x.slice(s![t, .., (lo + k - pad)..(hi + k - pad)]);
            ndarray::linalg::general_mat_mul(F::one(), &gs, &xs.t(), F::one(), &mut gwk);
            let mut gxs = gx.slice_mut(s![t, .., (lo + k - pad)..(hi + k - pad)]);
            ndarray::linalg::general_mat_mul(F::one(), &wk.t(), &gs, F::one(), &mut gxs);
        }
        gw.slice_mut(s![.., .., k]).assign(&gwk);
    }
    let gb = g.sum_axis(Axis(2)).sum_axis(Axis(0));
    (gx, gw, gb)
}

fn depthwise_backward<F: Real>(
    x: ArrayView3<F>,
    w: ndarray::ArrayView2<F>,
    g: ArrayView3<F>,
) -> (Array3<F>, Array2<F>, ndarray::Array1<F>) {
    let (t_len, c_len, l_len) = x.dim();
    let k_len = w.ncols();
    let pad = k_len / 2;
    let mut gx = Array3::zeros(x.dim());
    let mut gw = Array2::zeros(w.dim());
    for t in 0..t_len {
        for c in 0..c_len {
            for l in 0..l_len {
                let gy = g[[t, c, l]];
                for k in 0..k_len {
                    let src = l as isize + k as isize - pad as isize;
                    if src >= 0 && (src as usize) < l_len {
                        let src = src as usize;
                        gw[[c, k]] = gw[[c, k]] + gy * x[[t, c, src]];
                        gx[[t, c, src]] = gx[[t, c, src]] + gy * w[[c, k]];
                    }
                }
            }
        }
    }
    let gb = g.sum_axis(Axis(2)).sum_axis(Axis(0));
    (gx, gw, gb)
}

fn layer_norm_backward<F: Real>(
    xhat: &Array3<F>,
    rstd: &Array2<F>,
    gain: &[F],
    g: ArrayView3<F>,
) -> (Array3<F>, ndarray::Array1<F>, ndarray::Array1<F>) {
    let (t_len, c_len, l_len) = xhat.dim();
    let gb = g.sum_axis(Axis(2)).sum_axis(Axis(0));
    let gg = (&g * xhat).sum_axis(Axis(2)).sum_axis(Axis(0));
    let mut gx = Array3::zeros(xhat.dim());
    let n = F::lit(c_len as f64);
    for t in 0..t_len {
        for l in 0..l_len {
            let mut mean_g = F::zero();
            let mut mean_gx = F::zero();
            for c in 0..c_len {
                let gh = g[[t, c, l]] * gain[c];
                mean_g = mean_g + gh;
                mean_gx = mean_gx + gh * xhat[[t, c, l]];
            }
            mean_g = mean_g / n;
            mean_gx = mean_gx / n;
            let r = rstd[[t, l]];
            for c in 0..c_len {
                let gh = g[[t, c, l]] * gain[c];
                gx[[t, c, l]] = r * (gh - mean_g - xhat[[t, c, l]] * mean_gx);
            }
        }
    }
    (gx, gg, gb)
}

fn pointwise_backward<F: Real>(
    x: ArrayView3<F>,
    w: ndarray::ArrayView2<F>,
    g: ArrayView3<F>,
) -> (Array3<F>, Array2<F>, ndarray::Array1<F>) {
    let t_len = x.dim().0;
    let mut gx = Array3::zeros(x.dim());
    let mut gw = Array2::zeros(w.dim());
    for t in 0..t_len {
        let gt = g.index_axis(Axis(0), t);
        let xt = x.index_axis(Axis(0), t);
        ndarray::linalg::general_mat_mul(F::one(), &gt, &xt.t(), F::one(), &mut gw);
        let mut gxt = gx.index_axis_mut(Axis(0), t);
        ndarray::linalg::general_mat_mul(F::one(), &w.t(), &gt, F::zero(), &mut gxt);
    }
    let gb = g.sum_axis(Axis(2)).sum_axis(Axis(0));
    (gx, gw, gb)
}

/// Backpropagation through time for a PLIF layer, with the surrogate
/// derivative standing in for dΘ/du (including inside the reset path).
fn plif_backward<F: Real>(
    x: ArrayView3<F>,
    params: &PlifParams<F>,
    charged: &Array3<F>,
    spikes: ArrayView3<F>,
    g: ArrayView3<F>,
    surrogate: &SurrogateConfig,
) -> (Array3<F>, ndarray::Array1<F>) {
    let (t_len, c_len, l_len) = x.dim();
    let mut gx = Array3::zeros(x.dim());
    let mut gw = ndarray::Array1::zeros(params.w.len());
    let shared = params.w.len() == 1;
    for c in 0..c_len {
        let k = params.leak(c);
        let mut gk = F::zero();
        for l in 0..l_len {
            let mut gv = F::zero();
            for t in (0..t_len).rev() {
                let h = charged[[t, c, l]];
                let s = spikes[[t, c, l]];
                let sg = heaviside_surrogate_grad(h - params.v_threshold, surrogate);
                let gh = g[[t, c, l]] * sg + gv * ((F::one() - s) + (params.v_reset - h) * sg);
                let v_prev = if t == 0 {
                    params.v_reset
                } else {
                    reset(charged[[t - 1, c, l]], spikes[[t - 1, c, l]], params)
                };
                gx[[t, c, l]] = gh * k;
                gk = gk + gh * (x[[t, c, l]] - v_prev + params.v_reset);
                gv = gh * (F::one() - k);
            }
        }
        let dw = gk * k * (F::one() - k);
        let idx = if shared { 0 } else { c };
        gw[idx] = gw[idx] + dw;
    }
    (gx, gw)
}
