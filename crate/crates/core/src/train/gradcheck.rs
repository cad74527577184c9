//! Central-difference verification of recorded gradients.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mel_loss_graph, teacher_target, MelDistance};
use crate::autograd::{Graph, Var};
use crate::distill::{bind_adapters, kd_graph, tap_pairs, AdapterActivation, Adapters, KdInputs, KdWeights};
use crate::dsp::{mel_filterbank, mel_spectrogram, StftConfig};
use crate::error::{invalid, Result};
use crate::model::{Generator, GeneratorConfig, ModelVars};
use crate::params::Parameters;
use crate::real::Precision;

/// Largest FD-checkable parameter count.
pub const MAX_CHECKED_PARAMS: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradCheckScope {
    /// Every generator parameter.
    #[default]
    All,
    /// Final norm and head only (downstream of every spike).
    Downstream,
    /// Adapter parameters under the full distillation loss.
    Adapters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[flat index]` of the worst parameter.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient returned by `loss` with central differences for
/// every entry whose tensor name passes `filter`. `loss` must bind `params`
/// with [`Parameters::bind_all`] and return the loss node together with the
/// bound variables.
pub fn grad_check_params<P, L>(
    params: &P,
    eps: f64,
    floor: f64,
    filter: impl Fn(&str) -> bool,
    loss: L,
) -> Result<GradCheckReport>
where
    P: Parameters<f64> + Clone,
    L: Fn(&P, &mut Graph<f64>) -> Result<(Var, Vec<Var>)>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return invalid(format!("eps must be positive and finite, got {eps}"));
    }
    let mut g = Graph::default();
    let (l, vars) = loss(params, &mut g)?;
    let grads = g.backward(l)?;
    let analytic = params.collect_grads(&vars, &grads);
    let value = |p: &P| -> Result<f64> {
        let mut g = Graph::default();
        let (l, _) = loss(p, &mut g)?;
        Ok(g.value(l)[[]])
    };
    let mut names = Vec::new();
    params.visit(&mut |n, v| names.push((n.to_string(), v.len())));
    if names.iter().filter(|(n, _)| filter(n)).map(|(_, k)| k).sum::<usize>() > MAX_CHECKED_PARAMS {
        return invalid(format!("more than {MAX_CHECKED_PARAMS} parameters selected"));
    }
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), analytic: 0.0, numeric: 0.0, n_checked: 0 };
    for (t, (name, len)) in names.iter().enumerate() {
        if !filter(name) {
            continue;
        }
        for j in 0..*len {
            let shifted = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                let mut k = 0;
                p.visit_mut(&mut |_, mut v| {
                    if k == t {
                        v.as_slice_mut().expect("contiguous")[j] += delta;
                    }
                    k += 1;
                });
                value(&p)
            };
            let numeric = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
            let a = analytic[t].as_slice().expect("contiguous")[j];
            let err = relative_error(a, numeric, floor);
            if err > report.max_rel_err || report.n_checked == 0 {
                report.max_rel_err = err;
                report.worst = format!("{name}[{j}]");
                report.analytic = a;
                report.numeric = numeric;
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}

/// Settings for [`grad_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub model: GeneratorConfig,
    pub frames: usize,
    pub eps: f64,
    pub floor: f64,
    pub precision: Precision,
    pub scope: GradCheckScope,
    pub distance: MelDistance,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: GeneratorConfig::default(),
            frames: 6,
            eps: 1e-5,
            floor: 1e-8,
            precision: Precision::F64,
            scope: GradCheckScope::All,
            distance: MelDistance::L2,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    /// Continuous two-block toy (`C = 8`, `C_mid = 16`, 8 mels, `n_fft = 64`,
    /// hop 16) with weights large enough that every block shapes the output.
    pub fn toy_ann(scope: GradCheckScope) -> Self {
        let model = GeneratorConfig {
            n_mels: 8,
            dim: 8,
            intermediate: 16,
            n_blocks: 2,
            layer_scale_init: 0.5,
            init_std: 0.2,
            stft: StftConfig { n_fft: 64, n_hop: 16, ..StftConfig::default() },
            ..GeneratorConfig::default()
        }
        .teacher();
        Self { model, scope, ..Self::default() }
    }
}

/// Gradient check of the mel reconstruction loss (plus the distillation
/// loss for [`GradCheckScope::Adapters`]) on a random input.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.precision != Precision::F64 {
        return invalid("gradient checks require f64 precision");
    }
    if !(cfg.eps > 0.0) {
        return invalid(format!("eps must be positive, got {}", cfg.eps));
    }
    if cfg.frames < 2 {
        return invalid("gradient check needs at least 2 frames");
    }
    let model = Generator::<f64>::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mel_in = Array2::from_shape_simple_fn((cfg.model.n_mels, cfg.frames), || rng.random_range(-6.0..0.0));
    let ref_len = cfg.frames * cfg.model.stft.n_hop;
    let reference: Vec<f64> = (0..ref_len).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mel_cfg = cfg.model.mel_config();
    let ref_mel = mel_spectrogram(&reference, &mel_cfg)?;
    let fb = mel_filterbank::<f64>(&mel_cfg)?;

    let mel_loss = |gen: &Generator<f64>, g: &mut Graph<f64>, vars: &ModelVars| -> Result<(Var, crate::model::ForwardNodes)> {
        let m = g.constant(mel_in.clone().into_dyn());
        let nodes = gen.build(g, vars, m)?;
        let fbv = g.constant(fb.clone().into_dyn());
        let l = mel_loss_graph(g, nodes.waveform, ref_len, &ref_mel, fbv, &mel_cfg, cfg.distance)?;
        Ok((l, nodes))
    };

    match cfg.scope {
        GradCheckScope::All | GradCheckScope::Downstream => {
            let downstream = cfg.scope == GradCheckScope::Downstream;
            let filter = |n: &str| !downstream || n.starts_with("final_norm.") || n.starts_with("head.");
            grad_check_params(&model.weights, cfg.eps, cfg.floor, filter, |w, g| {
                let gen = Generator { config: model.config.clone(), weights: w.clone() };
                let vars = ModelVars::bind(w, g, true);
                let (l, _) = mel_loss(&gen, g, &vars)?;
                Ok((l, vars.flat))
            })
        }
        GradCheckScope::Adapters => {
            let teacher = Generator::<f64>::new(cfg.model.teacher(), cfg.seed.wrapping_add(1))?;
            let target = teacher_target(&teacher, &mel_in)?;
            let pairs = tap_pairs(cfg.model.n_blocks, cfg.model.tsm_enabled);
            let mut adapters = Adapters::<f64>::identity(pairs.len(), cfg.model.dim, AdapterActivation::Gelu);
            for a in &mut adapters.0 {
                a.weight.mapv_inplace(|v| v + rng.random_range(-0.2..0.2));
                a.bias = Array1::from_shape_simple_fn(a.bias.len(), || rng.random_range(-0.2..0.2));
            }
            grad_check_params(&adapters, cfg.eps, cfg.floor, |_| true, |ad, g| {
                let vars = ModelVars::bind(&model.weights, g, false);
                let (mel_l, nodes) = mel_loss(&model, g, &vars)?;
                let (flat, avars) = bind_adapters(ad, g, true);
                let taps_tea: Vec<Var> = target.taps.iter().map(|a| g.constant(a.clone())).collect();
                let inputs = KdInputs {
                    taps_stu: &nodes.taps,
                    taps_tea: &taps_tea,
                    pairs: &pairs,
                    log_mag_stu: nodes.log_magnitude,
                    log_mag_tea: g.constant(target.log_magnitude.clone()),
                    phase_stu: nodes.phase,
                    phase_tea: g.constant(target.phase.clone()),
                };
                let acts = vec![AdapterActivation::Gelu; ad.len()];
                let kd = kd_graph(g, &inputs, &avars, &acts, &KdWeights::default())?;
                let total = g.add(mel_l, kd.total)?;
                Ok((total, flat))
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_settings() {
        let base = GradCheckConfig::default();
        assert!(grad_check(&GradCheckConfig { eps: 0.0, ..base.clone() }).is_err());
        assert!(grad_check(&GradCheckConfig { precision: Precision::F32, ..base.clone() }).is_err());
        // Default dimensions are far beyond what FD can cover.
        assert!(grad_check(&GradCheckConfig { model: GeneratorConfig::default().teacher(), ..base }).is_err());
    }

    #[test]
    fn toy_downstream_and_adapter_gradients() {
        for scope in [GradCheckScope::Downstream, GradCheckScope::Adapters] {
            let r = grad_check(&GradCheckConfig::toy_ann(scope)).unwrap();
            assert!(r.n_checked > 0);
            assert!(r.max_rel_err < 1e-5, "{scope:?}: {r:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }
}
