//! ConvNeXt blocks: the spiking student variant with amplitude shortcut and
//! temporal shift, and the continuous teacher variant.

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::neuron::{PlifParams, SurrogateConfig};
use crate::params::{trunc_normal, Parameters};
use crate::real::Real;

/// Channel split for the temporal shift: channels `[0, c_minus)` read the
/// next timestep, `[c_minus, c_zero)` stay put, `[c_zero, c_one)` read the
/// previous timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsmConfig {
    pub c_minus: usize,
    pub c_zero: usize,
    pub c_one: usize,
    pub alpha: f64,
}

impl TsmConfig {
    /// Quarter / three-quarter split with residual weight 0.5.
    pub fn for_channels(channels: usize) -> Self {
        Self {
            c_minus: channels / 4,
            c_zero: 3 * channels / 4,
            c_one: channels,
            alpha: 0.5,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.c_one != channels {
            return invalid(format!(
                "TSM split covers {} channels but the tensor has {channels}",
                self.c_one
            ));
        }
        if !(self.c_minus < self.c_zero && self.c_zero <= self.c_one) && !(self.c_minus == 0 && self.c_zero == 0) {
            return invalid(format!(
                "TSM bounds must satisfy 0 <= c_minus < c_zero <= c_one (got {}, {}, {})",
                self.c_minus, self.c_zero, self.c_one
            ));
        }
        if !self.alpha.is_finite() {
            return invalid("TSM alpha must be finite");
        }
        Ok(())
    }
}

pub(crate) fn tsm_shift_array<F: Real>(z: ArrayView3<F>, cfg: &TsmConfig) -> Result<Array3<F>> {
    let (t_len, c_len, _) = z.dim();
    if t_len == 0 {
        return invalid("TSM needs at least one timestep");
    }
    cfg.validate(c_len)?;
    let mut out = Array3::zeros(z.dim());
    out.slice_mut(s![.., cfg.c_minus..cfg.c_zero, ..])
        .assign(&z.slice(s![.., cfg.c_minus..cfg.c_zero, ..]));
    if t_len > 1 {
        out.slice_mut(s![..t_len - 1, ..cfg.c_minus, ..])
            .assign(&z.slice(s![1.., ..cfg.c_minus, ..]));
        out.slice_mut(s![1.., cfg.c_zero..cfg.c_one, ..])
            .assign(&z.slice(s![..t_len - 1, cfg.c_zero..cfg.c_one, ..]));
    }
    Ok(out)
}

/// Transpose of the shift: the forward group scatters back one step later,
/// the backward group one step earlier.
pub(crate) fn tsm_shift_adjoint<F: Real>(g: ArrayView3<F>, cfg: &TsmConfig) -> Result<Array3<F>> {
    let (t_len, c_len, _) = g.dim();
    cfg.validate(c_len)?;
    let mut out = Array3::zeros(g.dim());
    out.slice_mut(s![.., cfg.c_minus..cfg.c_zero, ..])
        .assign(&g.slice(s![.., cfg.c_minus..cfg.c_zero, ..]));
    if t_len > 1 {
        out.slice_mut(s![1.., ..cfg.c_minus, ..])
            .assign(&g.slice(s![..t_len - 1, ..cfg.c_minus, ..]));
        out.slice_mut(s![..t_len - 1, cfg.c_zero..cfg.c_one, ..])
            .assign(&g.slice(s![1.., cfg.c_zero..cfg.c_one, ..]));
    }
    Ok(out)
}

/// Shifted features `Z_shift` (zero padded at the sequence ends).
pub fn tsm_shift<F: Real>(z: ArrayView3<F>, cfg: &TsmConfig) -> Result<Array3<F>> {
    tsm_shift_array(z, cfg)
}

/// `α · Z_shift + Z_org`.
pub fn tsm_apply<F: Real>(z: ArrayView3<F>, cfg: &TsmConfig) -> Result<Array3<F>> {
    let shifted = tsm_shift_array(z, cfg)?;
    Ok(shifted * F::lit(cfg.alpha) + z)
}

/// `|Z_in| ⊙ Z_out`.
pub fn amplitude_shortcut<F: Real>(z_in: ArrayView3<F>, z_out: ArrayView3<F>) -> Result<Array3<F>> {
    if z_in.dim() != z_out.dim() {
        return invalid(format!(
            "amplitude shortcut shapes {:?} and {:?} differ",
            z_in.dim(),
            z_out.dim()
        ));
    }
    Ok(ndarray::Zip::from(&z_in)
        .and(&z_out)
        .map_collect(|&a, &b| a.abs() * b))
}

/// ConvNeXt weights shared by the teacher and student blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<F> {
    /// `[C, K]`
    pub dw_weight: Array2<F>,
    pub dw_bias: Array1<F>,
    pub norm_gain: Array1<F>,
    pub norm_bias: Array1<F>,
    /// `[C_mid, C]`
    pub pw1_weight: Array2<F>,
    pub pw1_bias: Array1<F>,
    /// `[C, C_mid]`
    pub pw2_weight: Array2<F>,
    pub pw2_bias: Array1<F>,
    pub layer_scale: Array1<F>,
}

impl<F: Real> BlockWeights<F> {
    /// Truncated-normal (σ = 0.02) weights, zero biases, unit norm gain.
    pub fn init<R: Rng>(dim: usize, mid: usize, kernel: usize, layer_scale: f64, rng: &mut R) -> Self {
        let mut tn = |shape: (usize, usize)| Array2::from_shape_simple_fn(shape, || trunc_normal::<F, _>(rng, 0.02));
        Self {
            dw_weight: tn((dim, kernel)),
            dw_bias: Array1::zeros(dim),
            norm_gain: Array1::ones(dim),
            norm_bias: Array1::zeros(dim),
            pw1_weight: tn((mid, dim)),
            pw1_bias: Array1::zeros(mid),
            pw2_weight: tn((dim, mid)),
            pw2_bias: Array1::zeros(dim),
            layer_scale: Array1::from_elem(dim, F::lit(layer_scale)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dw_weight.nrows()
    }

    pub fn mid(&self) -> usize {
        self.pw1_weight.nrows()
    }

    pub fn kernel(&self) -> usize {
        self.dw_weight.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, k, m) = (self.dim(), self.kernel(), self.mid());
        let ok = k % 2 == 1
            && self.dw_bias.len() == c
            && self.norm_gain.len() == c
            && self.norm_bias.len() == c
            && self.pw1_weight.dim() == (m, c)
            && self.pw1_bias.len() == m
            && self.pw2_weight.dim() == (c, m)
            && self.pw2_bias.len() == c
            && self.layer_scale.len() == c;
        if !ok {
            return invalid(format!("inconsistent block weights (C={c}, C_mid={m}, K={k})"));
        }
        Ok(())
    }

    pub(crate) fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BlockVars {
        let mut leaf = |a: ArrayD<F>| g.leaf(a, trainable);
        BlockVars {
            dw_weight: leaf(self.dw_weight.clone().into_dyn()),
            dw_bias: leaf(self.dw_bias.clone().into_dyn()),
            norm_gain: leaf(self.norm_gain.clone().into_dyn()),
            norm_bias: leaf(self.norm_bias.clone().into_dyn()),
            pw1_weight: leaf(self.pw1_weight.clone().into_dyn()),
            pw1_bias: leaf(self.pw1_bias.clone().into_dyn()),
            pw2_weight: leaf(self.pw2_weight.clone().into_dyn()),
            pw2_bias: leaf(self.pw2_bias.clone().into_dyn()),
            layer_scale: leaf(self.layer_scale.clone().into_dyn()),
        }
    }
}

impl<F: Real> Parameters<F> for BlockWeights<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, ArrayViewD<'a, F>)) {
        f("dw_weight", self.dw_weight.view().into_dyn());
        f("dw_bias", self.dw_bias.view().into_dyn());
        f("norm_gain", self.norm_gain.view().into_dyn());
        f("norm_bias", self.norm_bias.view().into_dyn());
        f("pw1_weight", self.pw1_weight.view().into_dyn());
        f("pw1_bias", self.pw1_bias.view().into_dyn());
        f("pw2_weight", self.pw2_weight.view().into_dyn());
        f("pw2_bias", self.pw2_bias.view().into_dyn());
        f("layer_scale", self.layer_scale.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f("dw_weight", self.dw_weight.view_mut().into_dyn());
        f("dw_bias", self.dw_bias.view_mut().into_dyn());
        f("norm_gain", self.norm_gain.view_mut().into_dyn());
        f("norm_bias", self.norm_bias.view_mut().into_dyn());
        f("pw1_weight", self.pw1_weight.view_mut().into_dyn());
        f("pw1_bias", self.pw1_bias.view_mut().into_dyn());
        f("pw2_weight", self.pw2_weight.view_mut().into_dyn());
        f("pw2_bias", self.pw2_bias.view_mut().into_dyn());
        f("layer_scale", self.layer_scale.view_mut().into_dyn());
    }
}

/// The two neuron layers of a spiking block (before `pw1` and before `pw2`).
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronPair<F> {
    pub plif1: PlifParams<F>,
    pub plif2: PlifParams<F>,
}

impl<F: Real> NeuronPair<F> {
    pub fn validate(&self, dim: usize, mid: usize) -> Result<()> {
        self.plif1.validate(dim)?;
        self.plif2.validate(mid)
    }

    pub(crate) fn bind(&self, g: &mut Graph<F>, trainable: bool) -> NeuronVars {
        NeuronVars {
            plif1: g.leaf(self.plif1.w.clone().into_dyn(), trainable),
            plif2: g.leaf(self.plif2.w.clone().into_dyn(), trainable),
        }
    }
}

impl<F: Real> Parameters<F> for NeuronPair<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, ArrayViewD<'a, F>)) {
        f("plif1_w", self.plif1.w.view().into_dyn());
        f("plif2_w", self.plif2.w.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f("plif1_w", self.plif1.w.view_mut().into_dyn());
        f("plif2_w", self.plif2.w.view_mut().into_dyn());
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockVars {
    pub dw_weight: Var,
    pub dw_bias: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub pw1_weight: Var,
    pub pw1_bias: Var,
    pub pw2_weight: Var,
    pub pw2_bias: Var,
    pub layer_scale: Var,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NeuronVars {
    pub plif1: Var,
    pub plif2: Var,
}

/// Nonlinearity placed in front of a pointwise convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Plif,
    Gelu,
    Identity,
}

/// Wiring of a block. The spiking and continuous blocks differ only here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub before_pw1: Gate,
    pub before_pw2: Gate,
    pub amplitude_shortcut: bool,
}

impl BlockLayout {
    pub const SPIKING: Self = Self {
        before_pw1: Gate::Plif,
        before_pw2: Gate::Plif,
        amplitude_shortcut: true,
    };
    pub const CONTINUOUS: Self = Self {
        before_pw1: Gate::Identity,
        before_pw2: Gate::Gelu,
        amplitude_shortcut: false,
    };
}

/// Nodes of interest produced while building one block.
pub(crate) struct BlockTrace {
    pub output: Var,
    /// Spike tensors feeding `pw1` and `pw2` (only for `Gate::Plif`).
    pub spikes: [Option<Var>; 2],
}

pub(crate) fn block_graph<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    w: &BlockVars,
    neurons: Option<(&NeuronVars, &NeuronPair<F>)>,
    layout: BlockLayout,
    tsm: Option<&TsmConfig>,
) -> Result<BlockTrace> {
    let h = match tsm {
        Some(cfg) => g.tsm(x, cfg)?,
        None => x,
    };
    let d = g.depthwise(h, w.dw_weight, w.dw_bias)?;
    let z_in = g.layer_norm(d, w.norm_gain, w.norm_bias)?;
    let mut spikes = [None, None];
    let mut gate = |g: &mut Graph<F>, v: Var, which: Gate, slot: usize| -> Result<Var> {
        Ok(match which {
            Gate::Identity => v,
            Gate::Gelu => g.gelu(v),
            Gate::Plif => {
                let (vars, params) = neurons
                    .ok_or_else(|| Error::InvalidInput("spiking gate without neuron parameters".into()))?;
                let (wv, p) = if slot == 0 {
                    (vars.plif1, &params.plif1)
                } else {
                    (vars.plif2, &params.plif2)
                };
                let s = g.plif(v, wv, p)?;
                spikes[slot] = Some(s);
                s
            }
        })
    };
    let s1 = gate(g, z_in, layout.before_pw1, 0)?;
    let e = g.pointwise(s1, w.pw1_weight, w.pw1_bias)?;
    let s2 = gate(g, e, layout.before_pw2, 1)?;
    let z_out = g.pointwise(s2, w.pw2_weight, w.pw2_bias)?;
    let r = if layout.amplitude_shortcut {
        let mag = g.abs(z_in);
        g.mul(mag, z_out)?
    } else {
        z_out
    };
    let scaled = g.scale_channels(r, w.layer_scale)?;
    let output = g.add(x, scaled)?;
    Ok(BlockTrace { output, spikes })
}

/// Binary spike tensor recorded at one neuron layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteRecord {
    pub block: usize,
    /// 1 for the neuron before `pw1`, 2 for the one before `pw2`.
    pub plif_index: usize,
    /// `[T, C_site, L]`, entries in {0, 1}.
    pub spikes: Array3<u8>,
    /// Accumulate operations gated by one spike at this site (the fan-out of
    /// the following pointwise convolution).
    pub fan_out: usize,
}

impl SiteRecord {
    pub fn ones(&self) -> usize {
        self.spikes.iter().filter(|&&s| s == 1).count()
    }

    pub fn firing_rate(&self) -> f64 {
        if self.spikes.is_empty() {
            0.0
        } else {
            self.ones() as f64 / self.spikes.len() as f64
        }
    }
}

/// Spike activity collected during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpikeProbe {
    pub sites: Vec<SiteRecord>,
}

impl SpikeProbe {
    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn total_spikes(&self) -> usize {
        self.sites.iter().map(SiteRecord::ones).sum()
    }

    /// Mean rate weighted by the accumulate operations each site gates.
    pub fn weighted_rate(&self) -> Option<f64> {
        let (num, den) = self.sites.iter().fold((0.0, 0.0), |(n, d), s| {
            (n + (s.ones() * s.fan_out) as f64, d + (s.spikes.len() * s.fan_out) as f64)
        });
        (den > 0.0).then(|| num / den)
    }

    pub fn n_blocks(&self) -> usize {
        self.sites.iter().map(|s| s.block + 1).max().unwrap_or(0)
    }

    pub(crate) fn record<F: Real>(&mut self, block: usize, plif_index: usize, spikes: &ArrayD<F>, fan_out: usize) -> Result<()> {
        let arr = spikes
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::InvalidState(e.to_string()))?;
        let bits = arr.mapv(|v| {
            if v == F::one() {
                1u8
            } else {
                0u8
            }
        });
        if arr.iter().any(|&v| v != F::zero() && v != F::one()) {
            return Err(Error::InvalidState("non-binary value on a spike path".into()));
        }
        self.sites.push(SiteRecord { block, plif_index, spikes: bits, fan_out });
        Ok(())
    }
}

fn check_finite<F: Real>(a: &Array3<F>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite values in {what}")))
    }
}

/// Spiking block over `[T, C, L]` features. When `probe` is given, both
/// neuron layers' spikes are appended as block `block_index`.
pub fn spiking_block_forward<F: Real>(
    x: ArrayView3<F>,
    w: &BlockWeights<F>,
    neurons: &NeuronPair<F>,
    tsm: Option<&TsmConfig>,
    surrogate: SurrogateConfig,
    probe: Option<(&mut SpikeProbe, usize)>,
) -> Result<Array3<F>> {
    w.validate()?;
    neurons.validate(w.dim(), w.mid())?;
    if x.dim().1 != w.dim() {
        return invalid(format!("block expects {} channels, got {}", w.dim(), x.dim().1));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN in block input".into()));
    }
    let mut g = Graph::new(surrogate);
    let xv = g.constant(x.to_owned().into_dyn());
    let vars = w.bind(&mut g, false);
    let nv = neurons.bind(&mut g, false);
    let trace = block_graph(&mut g, xv, &vars, Some((&nv, neurons)), BlockLayout::SPIKING, tsm)?;
    if let Some((probe, idx)) = probe {
        let [s1, s2] = trace.spikes;
        probe.record(idx, 1, g.value(s1.expect("spiking gate")), w.mid())?;
        probe.record(idx, 2, g.value(s2.expect("spiking gate")), w.dim())?;
    }
    let out = to_array3(g.value(trace.output))?;
    check_finite(&out, "spiking block output")?;
    Ok(out)
}

/// Continuous ConvNeXt block over `[1, C, L]` features.
pub fn ann_block_forward<F: Real>(x: ArrayView3<F>, w: &BlockWeights<F>) -> Result<Array3<F>> {
    w.validate()?;
    if x.dim().0 != 1 {
        return invalid("continuous block runs a single timestep");
    }
    if x.dim().1 != w.dim() {
        return invalid(format!("block expects {} channels, got {}", w.dim(), x.dim().1));
    }
    let mut g = Graph::default();
    let xv = g.constant(x.to_owned().into_dyn());
    let vars = w.bind(&mut g, false);
    let trace = block_graph(&mut g, xv, &vars, None, BlockLayout::CONTINUOUS, None)?;
    let out = to_array3(g.value(trace.output))?;
    check_finite(&out, "block output")?;
    Ok(out)
}

pub(crate) fn to_array3<F: Real>(t: &ArrayD<F>) -> Result<Array3<F>> {
    t.clone()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::InvalidState(e.to_string()))
}

/// Rate of ones along all axes of a binary tensor.
pub fn firing_rate_of<F: Real>(spikes: ArrayView3<F>) -> f64 {
    if spikes.is_empty() {
        return 0.0;
    }
    spikes.iter().filter(|&&v| v == F::one()).count() as f64 / spikes.len() as f64
}
