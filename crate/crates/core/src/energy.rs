//! Analytical operation counting and picojoule energy estimates for the
//! ConvNeXt block stack.
//!
//! Depthwise convolutions are counted as multiply-accumulates at every
//! timestep. Pointwise convolutions are accumulate-only in spiking mode,
//! gated by the firing rate of the neuron layer feeding them, and
//! multiply-accumulates in continuous mode. Embedding, head projection,
//! normalisation and elementwise operations are not counted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::block::SpikeProbe;
use crate::error::{Error, Result};
use crate::model::{GeneratorConfig, Mode};

/// Printed with every report.
pub const SCOPE_NOTE: &str =
    "counts cover the ConvNeXt block stack only; embedding, head, norms and elementwise ops are excluded";

/// Energy per arithmetic operation in picojoules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self { e_mac: 4.6, e_ac: 0.9 }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        if self.e_mac > 0.0 && self.e_ac > 0.0 && self.e_mac.is_finite() && self.e_ac.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "energy constants must be positive, got e_mac={} e_ac={}",
                self.e_mac, self.e_ac
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpKind {
    Mac,
    Ac,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Mac => "MAC",
            OpKind::Ac => "AC",
        }
    }
}

/// Exact operation count for one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub layer: String,
    pub kind: OpKind,
    pub count: u64,
    pub gated_by_rate: bool,
    /// `(block, plif_index)` of the neuron layer whose spikes gate this row.
    pub site: Option<(usize, usize)>,
}

/// Per-layer counts for `frames` mel frames.
pub fn count_ops(cfg: &GeneratorConfig, frames: usize) -> Result<Vec<OpCount>> {
    if frames == 0 {
        return Err(Error::InvalidInput("frame count must be at least 1".into()));
    }
    cfg.validate()?;
    let spiking = cfg.mode == Mode::Snn;
    let t = cfg.timesteps as u64;
    let (c, m, k, l) = (cfg.dim as u64, cfg.intermediate as u64, cfg.kernel as u64, frames as u64);
    let pw_kind = if spiking { OpKind::Ac } else { OpKind::Mac };
    let mut out = Vec::with_capacity(3 * cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        out.push(OpCount {
            layer: format!("blocks.{b}.dwconv"),
            kind: OpKind::Mac,
            count: k * c * l * t,
            gated_by_rate: false,
            site: None,
        });
        for (idx, (cin, cout)) in [(c, m), (m, c)].into_iter().enumerate() {
            out.push(OpCount {
                layer: format!("blocks.{b}.pwconv{}", idx + 1),
                kind: pw_kind,
                count: cin * cout * l * t,
                gated_by_rate: spiking,
                site: spiking.then_some((b, idx + 1)),
            });
        }
    }
    Ok(out)
}

/// Measured rate at one neuron layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRate {
    pub block: usize,
    pub plif_index: usize,
    pub ones: u64,
    pub total: u64,
    pub rate: f64,
    /// Accumulates this site gates when every neuron fires.
    pub gated_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiringRates {
    pub sites: Vec<SiteRate>,
    /// Mean over sites weighted by `gated_ops`.
    pub mean: f64,
}

impl FiringRates {
    pub fn get(&self, block: usize, plif_index: usize) -> Option<f64> {
        self.sites
            .iter()
            .find(|s| s.block == block && s.plif_index == plif_index)
            .map(|s| s.rate)
    }
}

/// Per-site rates `ones / (T·C_site·L)` and their gated-op weighted mean.
pub fn measure_firing_rates(probe: &SpikeProbe) -> Result<FiringRates> {
    if probe.is_empty() {
        return Err(Error::InvalidState("spike probe is empty".into()));
    }
    let mut sites = Vec::with_capacity(probe.sites.len());
    let (mut num, mut den) = (0u128, 0u128);
    for s in &probe.sites {
        let ones = s.ones() as u64;
        let total = s.spikes.len() as u64;
        let gated = total * s.fan_out as u64;
        num += ones as u128 * s.fan_out as u128;
        den += gated as u128;
        sites.push(SiteRate {
            block: s.block,
            plif_index: s.plif_index,
            ones,
            total,
            rate: if total == 0 { 0.0 } else { ones as f64 / total as f64 },
            gated_ops: gated,
        });
    }
    let mean = if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(FiringRates { sites, mean })
}

/// Rates from raster events `[block, plif_index, t, c, l]` of a run with
/// `frames` frames on the shapes of `cfg`.
pub fn rates_from_events(events: &[[usize; 5]], cfg: &GeneratorConfig, frames: usize) -> Result<FiringRates> {
    cfg.validate()?;
    if cfg.mode != Mode::Snn {
        return Err(Error::InvalidConfig("spike rates need a spiking configuration".into()));
    }
    if frames == 0 {
        return Err(Error::InvalidInput("frame count must be at least 1".into()));
    }
    let width = |idx: usize| if idx == 1 { cfg.dim } else { cfg.intermediate };
    let mut ones = vec![[0u64; 2]; cfg.n_blocks];
    let mut sorted = events.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("duplicate spike event".into()));
    }
    for &[b, idx, t, c, l] in &sorted {
        if b >= cfg.n_blocks || !(1..=2).contains(&idx) || t >= cfg.timesteps || c >= width(idx) || l >= frames {
            return Err(Error::InvalidInput(format!("spike event {:?} outside the configured shapes", [b, idx, t, c, l])));
        }
        ones[b][idx - 1] += 1;
    }
    let mut sites = Vec::with_capacity(2 * cfg.n_blocks);
    let (mut num, mut den) = (0u128, 0u128);
    for (b, counts) in ones.iter().enumerate() {
        for idx in 1..=2 {
            let total = (cfg.timesteps * width(idx) * frames) as u64;
            let fan_out = width(3 - idx) as u64;
            let k = counts[idx - 1];
            num += u128::from(k) * u128::from(fan_out);
            den += u128::from(total) * u128::from(fan_out);
            sites.push(SiteRate {
                block: b,
                plif_index: idx,
                ones: k,
                total,
                rate: k as f64 / total as f64,
                gated_ops: total * fan_out,
            });
        }
    }
    Ok(FiringRates { sites, mean: num as f64 / den as f64 })
}

/// Where rate-gated rows take their firing rate from.
#[derive(Clone, Copy, Debug)]
pub enum RateSource<'a> {
    Fixed(f64),
    Measured(&'a FiringRates),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub layer: String,
    pub kind: OpKind,
    pub count: u64,
    pub rate: Option<f64>,
    pub energy_pj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub rows: Vec<EnergyRow>,
    pub mac_pj: f64,
    pub ac_pj: f64,
    pub total_pj: f64,
    pub firing_rate_mean: Option<f64>,
}

fn check_rate(r: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&r) {
        Ok(r)
    } else {
        Err(Error::InvalidInput(format!("firing rate {r} outside [0, 1]")))
    }
}

/// Picojoules per row: `count·e_mac` for MAC rows, `count·r·e_ac` for AC rows.
pub fn estimate_energy(counts: &[OpCount], rates: Option<RateSource<'_>>, k: &EnergyConstants) -> Result<EnergyReport> {
    k.validate()?;
    let mut rows = Vec::with_capacity(counts.len());
    let (mut mac_pj, mut ac_pj) = (0.0, 0.0);
    for op in counts {
        let rate = if op.gated_by_rate {
            let r = match rates {
                None => None,
                Some(RateSource::Fixed(r)) => Some(r),
                Some(RateSource::Measured(m)) => op.site.and_then(|(b, i)| m.get(b, i)),
            };
            Some(check_rate(r.ok_or_else(|| {
                Error::InvalidInput(format!("no firing rate for rate-gated layer {}", op.layer))
            })?)?)
        } else {
            None
        };
        let per_op = match op.kind {
            OpKind::Mac => k.e_mac,
            OpKind::Ac => k.e_ac,
        };
        let energy_pj = op.count as f64 * rate.unwrap_or(1.0) * per_op;
        match op.kind {
            OpKind::Mac => mac_pj += energy_pj,
            OpKind::Ac => ac_pj += energy_pj,
        }
        rows.push(EnergyRow { layer: op.layer.clone(), kind: op.kind, count: op.count, rate, energy_pj });
    }
    let firing_rate_mean = match rates {
        _ if !counts.iter().any(|c| c.gated_by_rate) => None,
        Some(RateSource::Fixed(r)) => Some(r),
        Some(RateSource::Measured(m)) => Some(m.mean),
        None => None,
    };
    Ok(EnergyReport { rows, mac_pj, ac_pj, total_pj: mac_pj + ac_pj, firing_rate_mean })
}

impl EnergyReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>4} {:>16} {:>8} {:>14}", "layer", "kind", "ops", "rate", "energy_pj");
        for r in &self.rows {
            let rate = r.rate.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{:<20} {:>4} {:>16} {:>8} {:>14.4e}",
                r.layer,
                r.kind.as_str(),
                r.count,
                rate,
                r.energy_pj
            );
        }
        let _ = writeln!(s, "MAC total: {:.4e} pJ", self.mac_pj);
        let _ = writeln!(s, "AC total: {:.4e} pJ", self.ac_pj);
        let _ = writeln!(s, "total: {:.4e} pJ", self.total_pj);
        if let Some(r) = self.firing_rate_mean {
            let _ = writeln!(s, "mean firing rate: {r:.4}");
        }
        let _ = writeln!(s, "note: {SCOPE_NOTE}");
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,ops,rate,energy_pj\n");
        for r in &self.rows {
            let rate = r.rate.map_or_else(String::new, |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{},{}", r.layer, r.kind.as_str(), r.count, rate, r.energy_pj);
        }
        s
    }
}

/// One spiking variant to price against the continuous baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    pub timesteps: usize,
    pub rate: f64,
}

impl Scenario {
    pub fn new(label: impl Into<String>, timesteps: usize, rate: f64) -> Self {
        Self { label: label.into(), timesteps, rate }
    }

    /// Reported spiking variants with their average firing rates.
    pub fn reported() -> Vec<Scenario> {
        vec![
            Scenario::new("Spiking Vocos (8-step)", 8, 0.147),
            Scenario::new("Spiking Vocos (4-step)", 4, 0.129),
            Scenario::new("  + TSM", 4, 0.141),
            Scenario::new("  + Distillation", 4, 0.180),
            Scenario::new("  + TSM & Distillation", 4, 0.176),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub timesteps: Option<usize>,
    pub rate: Option<f64>,
    pub total_pj: f64,
    pub ratio_vs_ann: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTable {
    pub frames: usize,
    pub ann_total_pj: f64,
    /// Continuous baseline first, then each scenario. Empty for an empty
    /// scenario list.
    pub rows: Vec<TableRow>,
}

/// Prices each scenario on the shapes of `cfg` at `frames` frames.
pub fn report_table(cfg: &GeneratorConfig, frames: usize, scenarios: &[Scenario], k: &EnergyConstants) -> Result<EnergyTable> {
    let ann_total_pj = estimate_energy(&count_ops(&cfg.teacher(), frames)?, None, k)?.total_pj;
    let mut rows = Vec::with_capacity(scenarios.len() + 1);
    if !scenarios.is_empty() {
        rows.push(TableRow { label: "Vocos (ANN)".into(), timesteps: None, rate: None, total_pj: ann_total_pj, ratio_vs_ann: 1.0 });
    }
    for sc in scenarios {
        let snn = GeneratorConfig { mode: Mode::Snn, timesteps: sc.timesteps, ..cfg.clone() };
        let total = estimate_energy(&count_ops(&snn, frames)?, Some(RateSource::Fixed(sc.rate)), k)?.total_pj;
        rows.push(TableRow {
            label: sc.label.clone(),
            timesteps: Some(sc.timesteps),
            rate: Some(sc.rate),
            total_pj: total,
            ratio_vs_ann: total / ann_total_pj,
        });
    }
    Ok(EnergyTable { frames, ann_total_pj, rows })
}

impl EnergyTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<26} {:>2} {:>8} {:>14} {:>9}", "model", "T", "rate", "energy_pj", "vs_ann");
        for r in &self.rows {
            let t = r.timesteps.map_or_else(|| "-".into(), |v| v.to_string());
            let rate = r.rate.map_or_else(|| "/".into(), |v| format!("{:.1}%", 100.0 * v));
            let _ = writeln!(
                s,
                "{:<26} {:>2} {:>8} {:>14} {:>8.2}%",
                r.label,
                t,
                rate,
                if r.total_pj >= 1e8 { format!("{:.2}e9", r.total_pj / 1e9) } else { format!("{:.3e}", r.total_pj) },
                100.0 * r.ratio_vs_ann
            );
        }
        let _ = writeln!(s, "L = {} frames; {SCOPE_NOTE}", self.frames);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,timesteps,rate,energy_pj,ratio_vs_ann\n");
        for r in &self.rows {
            let t = r.timesteps.map_or_else(String::new, |v| v.to_string());
            let rate = r.rate.map_or_else(String::new, |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{},{}", r.label.trim(), t, rate, r.total_pj, r.ratio_vs_ann);
        }
        s
    }
}

/// Totals by layer family, keyed `dwconv` / `pwconv`.
pub fn totals_by_family(report: &EnergyReport) -> BTreeMap<&'static str, f64> {
    let mut m = BTreeMap::new();
    for r in &report.rows {
        let key = if r.layer.ends_with("dwconv") { "dwconv" } else { "pwconv" };
        *m.entry(key).or_insert(0.0) += r.energy_pj;
    }
    m
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;

    use super::*;
    use crate::block::SiteRecord;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn defaults_snn(t: usize) -> GeneratorConfig {
        GeneratorConfig { timesteps: t, ..GeneratorConfig::default() }
    }

    #[test]
    fn ann_mac_total_matches_hand_count() {
        let counts = count_ops(&GeneratorConfig::default().teacher(), 1000).unwrap();
        let total: u64 = counts.iter().map(|c| c.count).sum();
        assert_eq!(total, 8 * (7 * 512 + 2 * 512 * 1536) * 1000);
        assert_eq!(total, 12_611_584_000);
        assert!(counts.iter().all(|c| c.kind == OpKind::Mac && !c.gated_by_rate));
        let e = estimate_energy(&counts, None, &EnergyConstants::default()).unwrap();
        assert!(rel(e.total_pj, 58.0e9) < 1e-3);
    }

    #[test]
    fn snn_hand_formula() {
        let counts = count_ops(&defaults_snn(4), 1000).unwrap();
        let e = estimate_energy(&counts, Some(RateSource::Fixed(0.129)), &EnergyConstants::default()).unwrap();
        let hand = 8.0 * 2.0 * 512.0 * 1536.0 * 1000.0 * 4.0 * 0.129 * 0.9 + 8.0 * 7.0 * 512.0 * 1000.0 * 4.0 * 4.6;
        assert!(rel(e.total_pj, hand) < 1e-12);
        assert!(rel(e.total_pj, 6.4e9) < 0.01);
        let e8 = estimate_energy(&count_ops(&defaults_snn(8), 1000).unwrap(), Some(RateSource::Fixed(0.147)), &EnergyConstants::default())
            .unwrap();
        assert!(rel(e8.total_pj, 14.4e9) < 0.01);
    }

    #[test]
    fn zero_rate_leaves_depthwise_only() {
        let counts = count_ops(&defaults_snn(4), 1000).unwrap();
        let e = estimate_energy(&counts, Some(RateSource::Fixed(0.0)), &EnergyConstants::default()).unwrap();
        assert_eq!(e.ac_pj, 0.0);
        assert!(rel(e.total_pj, 8.0 * 7.0 * 512.0 * 1000.0 * 4.0 * 4.6) < 1e-12);
        let fam = totals_by_family(&e);
        assert_eq!(fam["pwconv"], 0.0);
    }

    #[test]
    fn linear_in_frames_timesteps_and_rate() {
        let k = EnergyConstants::default();
        let cfg = GeneratorConfig::toy_snn(1, 16, 2);
        let one = count_ops(&cfg, 1).unwrap();
        let many = count_ops(&cfg, 1000).unwrap();
        for (a, b) in one.iter().zip(&many) {
            assert_eq!(a.count * 1000, b.count);
        }
        let doubled = count_ops(&GeneratorConfig { timesteps: 4, ..cfg.clone() }, 1).unwrap();
        for (a, b) in one.iter().zip(&doubled) {
            assert_eq!(a.count * 2, b.count);
        }
        let a = estimate_energy(&one, Some(RateSource::Fixed(0.1)), &k).unwrap();
        let b = estimate_energy(&one, Some(RateSource::Fixed(0.3)), &k).unwrap();
        assert!(rel(b.ac_pj, 3.0 * a.ac_pj) < 1e-12);
        assert_eq!(a.mac_pj, b.mac_pj);
    }

    #[test]
    fn missing_or_bad_rate_rejected() {
        let counts = count_ops(&defaults_snn(4), 10).unwrap();
        let k = EnergyConstants::default();
        assert!(matches!(estimate_energy(&counts, None, &k), Err(Error::InvalidInput(_))));
        assert!(matches!(estimate_energy(&counts, Some(RateSource::Fixed(1.5)), &k), Err(Error::InvalidInput(_))));
        let partial = FiringRates { sites: vec![], mean: 0.0 };
        assert!(matches!(estimate_energy(&counts, Some(RateSource::Measured(&partial)), &k), Err(Error::InvalidInput(_))));
        assert!(count_ops(&defaults_snn(4), 0).is_err());
        assert!(EnergyConstants { e_mac: 0.0, e_ac: 0.9 }.validate().is_err());
    }

    fn site(block: usize, idx: usize, spikes: Array3<u8>, fan_out: usize) -> SiteRecord {
        SiteRecord { block, plif_index: idx, spikes, fan_out }
    }

    #[test]
    fn measured_rates_trivial_cases() {
        assert!(matches!(measure_firing_rates(&SpikeProbe::default()), Err(Error::InvalidState(_))));
        let zeros = SpikeProbe { sites: vec![site(0, 1, Array3::zeros((2, 3, 4)), 5)] };
        assert_eq!(measure_firing_rates(&zeros).unwrap().mean, 0.0);
        let ones = SpikeProbe { sites: vec![site(0, 1, Array3::ones((2, 3, 4)), 5)] };
        assert_eq!(measure_firing_rates(&ones).unwrap().mean, 1.0);
        let half = Array3::from_shape_fn((2, 3, 4), |(t, c, l)| ((t + c + l) % 2) as u8);
        let r = measure_firing_rates(&SpikeProbe { sites: vec![site(0, 1, half, 5)] }).unwrap();
        assert_eq!(r.mean, 0.5);
        assert_eq!(r.sites[0].rate, 0.5);
    }

    #[test]
    fn mean_weights_by_gated_ops() {
        let probe = SpikeProbe {
            sites: vec![site(0, 1, Array3::ones((1, 2, 1)), 3), site(0, 2, Array3::zeros((1, 6, 1)), 1)],
        };
        let r = measure_firing_rates(&probe).unwrap();
        assert!((r.mean - 0.5).abs() < 1e-15);
        let probe = SpikeProbe {
            sites: vec![site(0, 1, Array3::ones((1, 2, 1)), 9), site(0, 2, Array3::zeros((1, 6, 1)), 1)],
        };
        assert!((measure_firing_rates(&probe).unwrap().mean - 0.75).abs() < 1e-15);
    }

    #[test]
    fn measured_and_mean_entry_points_agree() {
        let cfg = GeneratorConfig::toy_snn(2, 4, 3);
        let frames = 5;
        let shape = |idx: usize| (3, if idx == 1 { cfg.dim } else { cfg.intermediate }, frames);
        let mut sites = Vec::new();
        for b in 0..2 {
            for idx in 1..=2 {
                let fan = if idx == 1 { cfg.intermediate } else { cfg.dim };
                let arr = Array3::from_shape_fn(shape(idx), |(t, c, l)| ((t * 7 + c * 3 + l + b * idx) % (2 + b + idx) == 0) as u8);
                sites.push(site(b, idx, arr, fan));
            }
        }
        let rates = measure_firing_rates(&SpikeProbe { sites }).unwrap();
        let counts = count_ops(&cfg, frames).unwrap();
        let k = EnergyConstants::default();
        let a = estimate_energy(&counts, Some(RateSource::Measured(&rates)), &k).unwrap();
        let b = estimate_energy(&counts, Some(RateSource::Fixed(rates.mean)), &k).unwrap();
        assert!(rel(a.total_pj, b.total_pj) < 1e-12);
        assert_eq!(a.firing_rate_mean, Some(rates.mean));
    }

    #[test]
    fn reported_table_rows() {
        let t = report_table(&GeneratorConfig::default(), 1000, &Scenario::reported(), &EnergyConstants::default()).unwrap();
        assert_eq!(t.rows.len(), 6);
        assert!(rel(t.rows[0].total_pj, 58.0e9) < 1e-3);
        let want = [14.4e9, 6.4e9, 6.9e9, 8.7e9, 8.5e9];
        for (row, w) in t.rows[1..].iter().zip(want) {
            assert!(rel(row.total_pj, w) < 0.01, "{} {}", row.label, row.total_pj);
            assert!(row.total_pj < t.ann_total_pj);
        }
        assert!((100.0 * t.rows[5].ratio_vs_ann - 14.7).abs() < 0.2);
        assert!(t.to_text().contains("ConvNeXt block stack only"));
        assert_eq!(t.to_csv().lines().count(), 7);
    }

    #[test]
    fn event_rates_match_probe_rates() {
        let cfg = GeneratorConfig::toy_snn(2, 4, 3);
        let frames = 5;
        let mut sites = Vec::new();
        let mut events = Vec::new();
        for b in 0..2 {
            for idx in 1..=2 {
                let (ch, fan) = if idx == 1 { (cfg.dim, cfg.intermediate) } else { (cfg.intermediate, cfg.dim) };
                let arr = Array3::from_shape_fn((3, ch, frames), |(t, c, l)| ((t + 2 * c + l * b + idx) % 3 == 0) as u8);
                for ((t, c, l), &v) in arr.indexed_iter() {
                    if v == 1 {
                        events.push([b, idx, t, c, l]);
                    }
                }
                sites.push(site(b, idx, arr, fan));
            }
        }
        let a = measure_firing_rates(&SpikeProbe { sites }).unwrap();
        let b = rates_from_events(&events, &cfg, frames).unwrap();
        assert_eq!(a, b);
        events.push(events[0]);
        assert!(rates_from_events(&events, &cfg, frames).is_err());
        assert!(rates_from_events(&[[0, 1, 3, 0, 0]], &cfg, frames).is_err());
    }

    #[test]
    fn empty_scenarios_header_only() {
        let t = report_table(&GeneratorConfig::default(), 1000, &[], &EnergyConstants::default()).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.to_csv(), "model,timesteps,rate,energy_pj,ratio_vs_ann\n");
    }

    #[test]
    fn report_total_is_row_sum() {
        let counts = count_ops(&defaults_snn(4), 7).unwrap();
        let e = estimate_energy(&counts, Some(RateSource::Fixed(0.2)), &EnergyConstants::default()).unwrap();
        let sum: f64 = e.rows.iter().map(|r| r.energy_pj).sum();
        assert!(rel(e.total_pj, sum) < 1e-12);
        assert_eq!(e.to_csv().lines().count(), counts.len() + 1);
        assert!(e.to_text().contains("note:"));
    }
}
