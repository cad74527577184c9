//! Generator assembly: mel embedding, block stack, timestep readout and the
//! iSTFT head.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::block::{block_graph, to_array3, BlockLayout, BlockVars, BlockWeights, NeuronPair, NeuronVars, SpikeProbe, TsmConfig};
use crate::dsp::{ComplexSpectrum, MelConfig, StftConfig};
use crate::error::{invalid, Error, Result};
use crate::neuron::{PlifParams, SurrogateConfig};
use crate::params::{trunc_normal, Parameters};
use crate::real::Real;

/// Upper clip applied to log-magnitudes before `exp`.
pub const LOG_MAGNITUDE_CLIP: f64 = 4.605_170_185_988_092; // ln(100)

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Snn,
    Ann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuronConfig {
    pub v_threshold: f64,
    pub v_reset: f64,
    /// Initial membrane time constant (> 1).
    pub tau_init: f64,
    /// One decay parameter per channel instead of one per layer.
    pub per_channel: bool,
    pub surrogate: SurrogateConfig,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            v_threshold: 1.0,
            v_reset: 0.0,
            tau_init: 2.0,
            per_channel: false,
            surrogate: SurrogateConfig::default(),
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_init > 1.0) || !self.tau_init.is_finite() {
            return Err(Error::InvalidConfig(format!("tau_init must be finite and > 1, got {}", self.tau_init)));
        }
        if !(self.v_threshold > self.v_reset) {
            return Err(Error::InvalidConfig("v_threshold must exceed v_reset".into()));
        }
        self.surrogate.validate().map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub(crate) fn params<F: Real>(&self, channels: usize) -> PlifParams<F> {
        let mut p = PlifParams::with_tau(F::lit(self.tau_init), F::lit(self.v_threshold), F::lit(self.v_reset));
        if self.per_channel {
            p.w = Array1::from_elem(channels, p.w[0]);
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_mels: usize,
    pub dim: usize,
    pub intermediate: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    pub embed_kernel: usize,
    pub timesteps: usize,
    pub tsm_enabled: bool,
    /// Explicit channel split; `None` uses the quarter split of `dim`.
    pub tsm: Option<TsmConfig>,
    pub stft: StftConfig,
    pub mode: Mode,
    pub neuron: NeuronConfig,
    pub layer_scale_init: f64,
    pub init_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_mels: 100,
            dim: 512,
            intermediate: 1536,
            n_blocks: 8,
            kernel: 7,
            embed_kernel: 7,
            timesteps: 4,
            tsm_enabled: true,
            tsm: None,
            stft: StftConfig::default(),
            mode: Mode::Snn,
            neuron: NeuronConfig::default(),
            layer_scale_init: 1e-6,
            init_std: 0.02,
        }
    }
}

impl GeneratorConfig {
    /// Continuous counterpart with identical dimensions.
    pub fn teacher(&self) -> Self {
        Self {
            mode: Mode::Ann,
            timesteps: 1,
            tsm_enabled: false,
            tsm: None,
            ..self.clone()
        }
    }

    /// Spiking model with `n_blocks` blocks of width `dim` (intermediate `3·dim`).
    pub fn toy_snn(n_blocks: usize, dim: usize, timesteps: usize) -> Self {
        Self {
            dim,
            intermediate: 3 * dim,
            n_blocks,
            timesteps,
            ..Self::default()
        }
    }

    pub fn toy_ann(n_blocks: usize, dim: usize) -> Self {
        Self::toy_snn(n_blocks, dim, 1).teacher()
    }

    pub fn n_bins(&self) -> usize {
        self.stft.n_bins()
    }

    /// Mel analysis matching the model input (default range and floor).
    pub fn mel_config(&self) -> MelConfig {
        MelConfig {
            stft: self.stft.clone(),
            n_mels: self.n_mels,
            ..MelConfig::default()
        }
    }

    pub fn tsm_config(&self) -> Option<TsmConfig> {
        if self.tsm_enabled {
            Some(self.tsm.clone().unwrap_or_else(|| TsmConfig::for_channels(self.dim)))
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_mels == 0 || self.dim == 0 || self.intermediate == 0 {
            return bad("n_mels, dim and intermediate must be positive".into());
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1".into());
        }
        if self.kernel % 2 == 0 || self.embed_kernel % 2 == 0 {
            return bad(format!("kernels must be odd (kernel={}, embed_kernel={})", self.kernel, self.embed_kernel));
        }
        if self.timesteps == 0 {
            return bad("timesteps must be at least 1".into());
        }
        if self.mode == Mode::Ann && (self.timesteps != 1 || self.tsm_enabled) {
            return bad(format!(
                "ann mode requires timesteps = 1 and tsm disabled (timesteps={}, tsm_enabled={})",
                self.timesteps, self.tsm_enabled
            ));
        }
        if let Some(t) = self.tsm_config() {
            t.validate(self.dim).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        self.stft.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if self.mode == Mode::Snn {
            self.neuron.validate()?;
        }
        if !self.layer_scale_init.is_finite() || !(self.init_std >= 0.0) {
            return bad("layer_scale_init and init_std must be finite, init_std >= 0".into());
        }
        Ok(())
    }
}

/// All generator tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights<F> {
    /// `[C, n_mels, K_embed]`
    pub embed_weight: Array3<F>,
    pub embed_bias: Array1<F>,
    pub embed_norm_gain: Array1<F>,
    pub embed_norm_bias: Array1<F>,
    pub blocks: Vec<BlockWeights<F>>,
    /// One pair per block in spiking mode, empty otherwise.
    pub neurons: Vec<NeuronPair<F>>,
    pub final_norm_gain: Array1<F>,
    pub final_norm_bias: Array1<F>,
    /// `[n_fft + 2, C]`
    pub head_weight: Array2<F>,
    pub head_bias: Array1<F>,
}

impl<F: Real> GeneratorWeights<F> {
    pub fn init(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = cfg.init_std;
        let c = cfg.dim;
        let embed_weight = Array3::from_shape_simple_fn((c, cfg.n_mels, cfg.embed_kernel), || trunc_normal::<F, _>(&mut rng, std));
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for _ in 0..cfg.n_blocks {
            let mut b = BlockWeights::init(c, cfg.intermediate, cfg.kernel, cfg.layer_scale_init, &mut rng);
            if std != 0.02 {
                let r = F::lit(std / 0.02);
                for a in [&mut b.dw_weight, &mut b.pw1_weight, &mut b.pw2_weight] {
                    a.mapv_inplace(|v| v * r);
                }
            }
            blocks.push(b);
        }
        let neurons = match cfg.mode {
            Mode::Snn => (0..cfg.n_blocks)
                .map(|_| NeuronPair {
                    plif1: cfg.neuron.params(c),
                    plif2: cfg.neuron.params(cfg.intermediate),
                })
                .collect(),
            Mode::Ann => Vec::new(),
        };
        let out = cfg.stft.n_fft + 2;
        let head_weight = Array2::from_shape_simple_fn((out, c), || trunc_normal::<F, _>(&mut rng, std));
        Ok(Self {
            embed_weight,
            embed_bias: Array1::zeros(c),
            embed_norm_gain: Array1::ones(c),
            embed_norm_bias: Array1::zeros(c),
            blocks,
            neurons,
            final_norm_gain: Array1::ones(c),
            final_norm_bias: Array1::zeros(c),
            head_weight,
            head_bias: Array1::zeros(out),
        })
    }

    /// Checks every tensor against the dimensions implied by `cfg`.
    pub fn check(&self, cfg: &GeneratorConfig) -> Result<()> {
        let c = cfg.dim;
        let mismatch = |what: &str| Err(Error::InvalidCheckpoint(format!("{what} does not match the configuration")));
        if self.embed_weight.dim() != (c, cfg.n_mels, cfg.embed_kernel) {
            return mismatch("embed.weight");
        }
        for (n, a) in [
            ("embed.bias", &self.embed_bias),
            ("embed_norm.gain", &self.embed_norm_gain),
            ("embed_norm.bias", &self.embed_norm_bias),
            ("final_norm.gain", &self.final_norm_gain),
            ("final_norm.bias", &self.final_norm_bias),
        ] {
            if a.len() != c {
                return mismatch(n);
            }
        }
        if self.blocks.len() != cfg.n_blocks {
            return mismatch("block count");
        }
        for b in &self.blocks {
            if b.validate().is_err() || b.dim() != c || b.mid() != cfg.intermediate || b.kernel() != cfg.kernel {
                return mismatch("block tensors");
            }
        }
        let expect_neurons = if cfg.mode == Mode::Snn { cfg.n_blocks } else { 0 };
        if self.neurons.len() != expect_neurons {
            return mismatch("neuron count");
        }
        for n in &self.neurons {
            if n.validate(c, cfg.intermediate).is_err() {
                return mismatch("neuron parameters");
            }
        }
        if self.head_weight.dim() != (cfg.stft.n_fft + 2, c) || self.head_bias.len() != cfg.stft.n_fft + 2 {
            return mismatch("head");
        }
        Ok(())
    }
}

impl<F: Real> Parameters<F> for GeneratorWeights<F> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, ArrayViewD<'a, F>)) {
        f("embed.weight", self.embed_weight.view().into_dyn());
        f("embed.bias", self.embed_bias.view().into_dyn());
        f("embed_norm.gain", self.embed_norm_gain.view().into_dyn());
        f("embed_norm.bias", self.embed_norm_bias.view().into_dyn());
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |n, v| f(&format!("blocks.{i}.{n}"), v));
        }
        for (i, p) in self.neurons.iter().enumerate() {
            p.visit(&mut |n, v| f(&format!("neurons.{i}.{n}"), v));
        }
        f("final_norm.gain", self.final_norm_gain.view().into_dyn());
        f("final_norm.bias", self.final_norm_bias.view().into_dyn());
        f("head.weight", self.head_weight.view().into_dyn());
        f("head.bias", self.head_bias.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f("embed.weight", self.embed_weight.view_mut().into_dyn());
        f("embed.bias", self.embed_bias.view_mut().into_dyn());
        f("embed_norm.gain", self.embed_norm_gain.view_mut().into_dyn());
        f("embed_norm.bias", self.embed_norm_bias.view_mut().into_dyn());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |n, v| f(&format!("blocks.{i}.{n}"), v));
        }
        for (i, p) in self.neurons.iter_mut().enumerate() {
            p.visit_mut(&mut |n, v| f(&format!("neurons.{i}.{n}"), v));
        }
        f("final_norm.gain", self.final_norm_gain.view_mut().into_dyn());
        f("final_norm.bias", self.final_norm_bias.view_mut().into_dyn());
        f("head.weight", self.head_weight.view_mut().into_dyn());
        f("head.bias", self.head_bias.view_mut().into_dyn());
    }
}

/// Graph handles for every generator tensor, in [`Parameters::visit`] order.
pub(crate) struct ModelVars {
    pub flat: Vec<Var>,
    pub embed_weight: Var,
    pub embed_bias: Var,
    pub embed_norm_gain: Var,
    pub embed_norm_bias: Var,
    pub blocks: Vec<BlockVars>,
    pub neurons: Vec<NeuronVars>,
    pub final_norm_gain: Var,
    pub final_norm_bias: Var,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ModelVars {
    pub fn bind<F: Real>(w: &GeneratorWeights<F>, g: &mut Graph<F>, trainable: bool) -> Self {
        let flat = w.bind_all(g, trainable);
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("visit order covers every tensor");
        let embed_weight = next();
        let embed_bias = next();
        let embed_norm_gain = next();
        let embed_norm_bias = next();
        let blocks = (0..w.blocks.len())
            .map(|_| BlockVars {
                dw_weight: next(),
                dw_bias: next(),
                norm_gain: next(),
                norm_bias: next(),
                pw1_weight: next(),
                pw1_bias: next(),
                pw2_weight: next(),
                pw2_bias: next(),
                layer_scale: next(),
            })
            .collect();
        let neurons = (0..w.neurons.len())
            .map(|_| NeuronVars { plif1: next(), plif2: next() })
            .collect();
        let final_norm_gain = next();
        let final_norm_bias = next();
        let head_weight = next();
        let head_bias = next();
        Self {
            flat,
            embed_weight,
            embed_bias,
            embed_norm_gain,
            embed_norm_bias,
            blocks,
            neurons,
            final_norm_gain,
            final_norm_bias,
            head_weight,
            head_bias,
        }
    }
}

/// Graph nodes produced by one generator forward pass.
pub(crate) struct ForwardNodes {
    pub waveform: Var,
    /// Clipped log-magnitude `ln A`, `[F, L]`.
    pub log_magnitude: Var,
    pub magnitude: Var,
    pub phase: Var,
    /// Timestep-averaged block outputs, `[1, C, L]` each.
    pub taps: Vec<Var>,
    /// `(block, plif_index, spikes)`.
    pub spikes: Vec<(usize, usize, Var)>,
}

/// Result of [`Generator::forward`].
#[derive(Clone, Debug)]
pub struct GeneratorOutput<F> {
    pub waveform: Vec<F>,
    pub spectrum: ComplexSpectrum<F>,
    /// One `[1, C, L]` tensor per block.
    pub taps: Vec<Array3<F>>,
    /// Spikes at every neuron layer (empty in ANN mode).
    pub probe: SpikeProbe,
}

impl<F> GeneratorOutput<F> {
    /// Firing rate of each neuron layer, in probe order.
    pub fn firing_rates(&self) -> Vec<f64> {
        self.probe.sites.iter().map(|s| s.firing_rate()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<F> {
    pub config: GeneratorConfig,
    pub weights: GeneratorWeights<F>,
}

impl<F: Real> Generator<F> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let weights = GeneratorWeights::init(&config, seed)?;
        Ok(Self { config, weights })
    }

    pub fn from_parts(config: GeneratorConfig, weights: GeneratorWeights<F>) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        Ok(Self { config, weights })
    }

    /// Spiking model with a different number of timesteps (same weights).
    pub fn with_timesteps(&self, timesteps: usize) -> Result<Self> {
        if self.config.mode == Mode::Ann {
            return Err(Error::InvalidConfig("timesteps cannot be changed in ann mode".into()));
        }
        let config = GeneratorConfig { timesteps, ..self.config.clone() };
        config.validate()?;
        Ok(Self { config, weights: self.weights.clone() })
    }

    pub(crate) fn check_mel(&self, mel: ArrayView2<F>) -> Result<()> {
        if mel.nrows() != self.config.n_mels {
            return invalid(format!("mel has {} rows, model expects {}", mel.nrows(), self.config.n_mels));
        }
        if mel.ncols() == 0 {
            return invalid("mel has no frames");
        }
        if mel.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite mel input".into()));
        }
        Ok(())
    }

    /// Records the forward pass on `g`.
    pub(crate) fn build(&self, g: &mut Graph<F>, vars: &ModelVars, mel: Var) -> Result<ForwardNodes> {
        self.build_with_layout(g, vars, mel, None)
    }

    pub(crate) fn build_with_layout(
        &self,
        g: &mut Graph<F>,
        vars: &ModelVars,
        mel: Var,
        layout: Option<BlockLayout>,
    ) -> Result<ForwardNodes> {
        let cfg = &self.config;
        let x = embed_graph(g, vars, mel)?;
        let mut h = g.repeat_time(x, cfg.timesteps)?;
        let tsm = cfg.tsm_config();
        let layout = layout.unwrap_or(match cfg.mode {
            Mode::Snn => BlockLayout::SPIKING,
            Mode::Ann => BlockLayout::CONTINUOUS,
        });
        let mut taps = Vec::with_capacity(cfg.n_blocks);
        let mut spikes = Vec::new();
        for (i, bv) in vars.blocks.iter().enumerate() {
            let neurons = vars.neurons.get(i).zip(self.weights.neurons.get(i));
            let tr = block_graph(g, h, bv, neurons, layout, tsm.as_ref())?;
            h = tr.output;
            taps.push(g.mean_time(h)?);
            for (j, s) in tr.spikes.iter().enumerate() {
                if let Some(s) = s {
                    spikes.push((i, j + 1, *s));
                }
            }
        }
        let feats = *taps.last().expect("at least one block");
        let (log_magnitude, magnitude, phase, waveform) = head_graph(g, vars, feats, &cfg.stft)?;
        Ok(ForwardNodes { waveform, log_magnitude, magnitude, phase, taps, spikes })
    }

    pub fn forward(&self, mel: ArrayView2<F>) -> Result<GeneratorOutput<F>> {
        self.forward_inner(mel, None)
    }

    pub(crate) fn forward_inner(&self, mel: ArrayView2<F>, layout: Option<BlockLayout>) -> Result<GeneratorOutput<F>> {
        self.check_mel(mel)?;
        let mut g = Graph::new(self.config.neuron.surrogate);
        let vars = ModelVars::bind(&self.weights, &mut g, false);
        let m = g.constant(mel.to_owned().into_dyn());
        let nodes = self.build_with_layout(&mut g, &vars, m, layout)?;
        self.collect(&g, &nodes)
    }

    pub(crate) fn collect(&self, g: &Graph<F>, nodes: &ForwardNodes) -> Result<GeneratorOutput<F>> {
        let waveform: Vec<F> = g.value(nodes.waveform).iter().copied().collect();
        if waveform.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite waveform".into()));
        }
        let magnitude = as2(g.value(nodes.magnitude))?;
        let phase = as2(g.value(nodes.phase))?;
        let spectrum = ComplexSpectrum::new(magnitude, phase)?;
        let taps = nodes.taps.iter().map(|&t| to_array3(g.value(t))).collect::<Result<Vec<_>>>()?;
        let mut probe = SpikeProbe::default();
        for &(block, idx, s) in &nodes.spikes {
            let fan_out = if idx == 1 { self.config.intermediate } else { self.config.dim };
            probe.record(block, idx, g.value(s), fan_out)?;
        }
        Ok(GeneratorOutput { waveform, spectrum, taps, probe })
    }
}

fn as2<F: Real>(t: &ArrayD<F>) -> Result<Array2<F>> {
    t.clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::InvalidState(e.to_string()))
}

fn embed_graph<F: Real>(g: &mut Graph<F>, vars: &ModelVars, mel: Var) -> Result<Var> {
    let shape = g.value(mel).shape().to_vec();
    if shape.len() != 2 {
        return invalid("mel must be [n_mels, L]");
    }
    let x = g.reshape(mel, &[1, shape[0], shape[1]])?;
    let y = g.conv1d(x, vars.embed_weight, vars.embed_bias)?;
    g.layer_norm(y, vars.embed_norm_gain, vars.embed_norm_bias)
}

fn head_graph<F: Real>(g: &mut Graph<F>, vars: &ModelVars, feats: Var, stft: &StftConfig) -> Result<(Var, Var, Var, Var)> {
    let n = g.layer_norm(feats, vars.final_norm_gain, vars.final_norm_bias)?;
    let p = g.pointwise(n, vars.head_weight, vars.head_bias)?;
    let shape = g.value(p).shape().to_vec();
    let rows = g.reshape(p, &[shape[1], shape[2]])?;
    let bins = stft.n_bins();
    let m = g.narrow(rows, 0, 0, bins)?;
    let phase = g.narrow(rows, 0, bins, bins)?;
    let log_magnitude = g.clamp_max(m, F::lit(LOG_MAGNITUDE_CLIP));
    let magnitude = g.exp(log_magnitude);
    let c = g.cos(phase);
    let s = g.sin(phase);
    let re = g.mul(magnitude, c)?;
    let im = g.mul(magnitude, s)?;
    let waveform = g.istft(re, im, stft)?;
    Ok((log_magnitude, magnitude, phase, waveform))
}

/// Input convolution plus norm: `[n_mels, L]` → `[1, C, L]`.
pub fn embed<F: Real>(mel: ArrayView2<F>, weights: &GeneratorWeights<F>) -> Result<Array3<F>> {
    if mel.nrows() != weights.embed_weight.dim().1 {
        return invalid(format!("mel has {} rows, embedding expects {}", mel.nrows(), weights.embed_weight.dim().1));
    }
    let mut g = Graph::default();
    let vars = ModelVars::bind(weights, &mut g, false);
    let m = g.constant(mel.to_owned().into_dyn());
    let y = embed_graph(&mut g, &vars, m)?;
    to_array3(g.value(y))
}

/// Direct coding: the same features at every timestep.
pub fn encode_time<F: Real>(x: ArrayView3<F>, timesteps: usize) -> Result<Array3<F>> {
    let (one, c, l) = x.dim();
    if one != 1 || timesteps == 0 {
        return invalid(format!("encode_time expects [1, C, L] and T >= 1, got {:?} and T={timesteps}", x.dim()));
    }
    Ok(x.broadcast((timesteps, c, l)).expect("broadcast over T").to_owned())
}

/// Mean over timesteps.
pub fn readout<F: Real>(x: ArrayView3<F>) -> Result<Array3<F>> {
    if x.dim().0 == 0 {
        return invalid("readout needs at least one timestep");
    }
    Ok(x.mean_axis(ndarray::Axis(0)).expect("nonempty").insert_axis(ndarray::Axis(0)))
}

/// Final norm, projection to `n_fft + 2` rows, exp-clipped magnitude and
/// inverse STFT.
pub fn head<F: Real>(
    features: ArrayView3<F>,
    weights: &GeneratorWeights<F>,
    stft: &StftConfig,
) -> Result<(ComplexSpectrum<F>, Vec<F>)> {
    if features.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN in head input".into()));
    }
    if weights.head_weight.nrows() != stft.n_fft + 2 {
        return invalid("head projection does not match the STFT size");
    }
    let mut g = Graph::default();
    let vars = ModelVars::bind(weights, &mut g, false);
    let f = g.constant(features.to_owned().into_dyn());
    let (_, mag, phase, wave) = head_graph(&mut g, &vars, f, stft)?;
    let spec = ComplexSpectrum::new(as2(g.value(mag))?, as2(g.value(phase))?)?;
    Ok((spec, g.value(wave).iter().copied().collect()))
}
