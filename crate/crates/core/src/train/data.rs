//! Seeded synthetic clips standing in for a speech corpus.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipKind {
    SineMixture,
    Chirp,
    FilteredNoise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub kind: ClipKind,
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDatasetConfig {
    pub n_clips: usize,
    /// Requested length; rounded down to a multiple of `n_hop`.
    pub seconds: f64,
    pub sample_rate: u32,
    pub n_hop: usize,
    pub seed: u64,
    /// Restrict generation to one clip kind; `None` cycles through all.
    pub kind: Option<ClipKind>,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            n_clips: 4,
            seconds: 1.0,
            sample_rate: 24_000,
            n_hop: 256,
            seed: 0,
            kind: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub sample_rate: u32,
    pub clips: Vec<Clip>,
}

impl ToyDataset {
    pub fn generate(cfg: &ToyDatasetConfig) -> Result<Self> {
        if cfg.n_clips == 0 || cfg.n_hop == 0 || cfg.sample_rate == 0 {
            return invalid("dataset needs n_clips, n_hop and sample_rate > 0");
        }
        let len = ((cfg.seconds * cfg.sample_rate as f64) as usize / cfg.n_hop) * cfg.n_hop;
        if len == 0 {
            return invalid(format!("{} s is shorter than one hop", cfg.seconds));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let kinds = [ClipKind::SineMixture, ClipKind::Chirp, ClipKind::FilteredNoise];
        let clips = (0..cfg.n_clips)
            .map(|i| {
                let kind = cfg.kind.unwrap_or(kinds[i % kinds.len()]);
                let samples = synthesize(kind, len, cfg.sample_rate as f64, &mut rng);
                Clip { kind, samples }
            })
            .collect();
        Ok(Self { sample_rate: cfg.sample_rate, clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

fn synthesize(kind: ClipKind, len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        ClipKind::SineMixture => {
            let n = rng.random_range(1..=3);
            let parts: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| (rng.random_range(100.0..4000.0), rng.random_range(0.1..0.3), rng.random_range(0.0..TAU)))
                .collect();
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    parts.iter().map(|&(f, a, p)| a * (TAU * f * t + p).sin()).sum()
                })
                .collect()
        }
        ClipKind::Chirp => {
            let f0 = rng.random_range(100.0..1000.0);
            let f1 = rng.random_range(1000.0..6000.0);
            let amp = rng.random_range(0.2..0.6);
            let dur = len as f64 / sr;
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    amp * (TAU * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)).sin()
                })
                .collect()
        }
        ClipKind::FilteredNoise => {
            // Two cascaded one-pole low-passes.
            let cutoff = rng.random_range(300.0..3000.0);
            let a = (-TAU * cutoff / sr).exp();
            let (mut y1, mut y2) = (0.0, 0.0);
            let mut out: Vec<f64> = (0..len)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(rng);
                    y1 = a * y1 + (1.0 - a) * x;
                    y2 = a * y2 + (1.0 - a) * y1;
                    y2
                })
                .collect();
            let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            let gain = rng.random_range(0.2..0.6) / peak;
            out.iter_mut().for_each(|v| *v *= gain);
            out
        }
    }
}
