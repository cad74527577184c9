//! STFT / iSTFT and log-mel analysis.
//!
//! Framing follows the usual vocoder convention: a periodic Hann window,
//! reflection padding of `n_fft / 2` on both ends when `center_pad` is set,
//! and overlap-add normalised by the summed squared window.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub n_fft: usize,
    pub n_hop: usize,
    pub sample_rate: u32,
    pub window: Window,
    pub center_pad: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            n_hop: 256,
            sample_rate: 24_000,
            window: Window::Hann,
            center_pad: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return invalid(format!("n_fft must be even and >= 2, got {}", self.n_fft));
        }
        if self.n_hop == 0 || self.n_hop > self.n_fft || self.n_fft % self.n_hop != 0 {
            return invalid(format!(
                "n_hop must divide n_fft and satisfy 0 < n_hop <= n_fft (n_fft={}, n_hop={})",
                self.n_fft, self.n_hop
            ));
        }
        if self.sample_rate == 0 {
            return invalid("sample_rate must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn pad(&self) -> usize {
        if self.center_pad {
            self.n_fft / 2
        } else {
            0
        }
    }

    /// Number of analysis frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if self.center_pad {
            1 + len / self.n_hop
        } else if len < self.n_fft {
            0
        } else {
            1 + (len - self.n_fft) / self.n_hop
        }
    }

    /// Default synthesis length for `frames` frames.
    pub fn synth_len(&self, frames: usize) -> usize {
        if self.center_pad {
            frames * self.n_hop
        } else {
            self.n_fft + self.n_hop * frames.saturating_sub(1)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub f_min: f64,
    /// `None` means Nyquist.
    pub f_max: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            n_mels: 100,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.stft.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        let nyquist = self.stft.sample_rate as f64 / 2.0;
        if self.n_mels == 0 {
            return invalid("n_mels must be >= 1");
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max() && self.f_max() <= nyquist) {
            return invalid(format!(
                "mel band must satisfy 0 <= f_min < f_max <= {nyquist} (got {}..{})",
                self.f_min,
                self.f_max()
            ));
        }
        if !(self.log_floor > 0.0) {
            return invalid("log_floor must be positive");
        }
        Ok(())
    }
}

/// Magnitude/phase pair, both shaped `[bins, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<F> {
    pub magnitude: Array2<F>,
    pub phase: Array2<F>,
}

impl<F: Real> ComplexSpectrum<F> {
    pub fn new(magnitude: Array2<F>, phase: Array2<F>) -> Result<Self> {
        if magnitude.dim() != phase.dim() {
            return invalid(format!(
                "magnitude {:?} and phase {:?} shapes differ",
                magnitude.dim(),
                phase.dim()
            ));
        }
        if magnitude.iter().any(|&m| !(m >= F::zero())) {
            return invalid("magnitude must be nonnegative");
        }
        Ok(Self { magnitude, phase })
    }

    pub fn n_bins(&self) -> usize {
        self.magnitude.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.magnitude.ncols()
    }

    /// Real and imaginary parts.
    pub fn to_rect(&self) -> (Array2<F>, Array2<F>) {
        let re = ndarray::Zip::from(&self.magnitude)
            .and(&self.phase)
            .map_collect(|&a, &p| a * p.cos());
        let im = ndarray::Zip::from(&self.magnitude)
            .and(&self.phase)
            .map_collect(|&a, &p| a * p.sin());
        (re, im)
    }

    pub fn from_rect(re: &Array2<F>, im: &Array2<F>) -> Self {
        let magnitude = ndarray::Zip::from(re).and(im).map_collect(|&r, &i| r.hypot(i));
        let phase = ndarray::Zip::from(re).and(im).map_collect(|&r, &i| principal_angle(i.atan2(r)));
        Self { magnitude, phase }
    }
}

/// Folds atan2's `-π` onto `π` so phases live in `(-π, π]`.
fn principal_angle<F: Real>(p: F) -> F {
    if p <= -F::PI() {
        F::PI()
    } else {
        p
    }
}

/// Periodic Hann window.
pub fn hann_window<F: Real>(n: usize) -> Vec<F> {
    let step = F::TAU() / F::lit(n as f64);
    (0..n)
        .map(|i| F::lit(0.5) - F::lit(0.5) * (step * F::lit(i as f64)).cos())
        .collect()
}

/// Maps an index of the padded signal back into `0..len` by mirroring.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Planned transforms and window for one STFT configuration.
pub(crate) struct SpectralKernel<F: Real> {
    cfg: StftConfig,
    window: Vec<F>,
    r2c: Arc<dyn RealToComplex<F>>,
    c2r: Arc<dyn ComplexToReal<F>>,
}

impl<F: Real> SpectralKernel<F> {
    pub(crate) fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<F>::new();
        Ok(Self {
            cfg: cfg.clone(),
            window: hann_window(cfg.n_fft),
            r2c: planner.plan_fft_forward(cfg.n_fft),
            c2r: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    fn rfft(&self, frame: &mut [F], out: &mut [Complex<F>]) {
        self.r2c
            .process(frame, out)
            .expect("rfft buffers sized by plan");
    }

    /// Unnormalised inverse real FFT; imaginary parts of DC and Nyquist are
    /// ignored.
    fn irfft(&self, spec: &mut [Complex<F>], out: &mut [F]) {
        let last = spec.len() - 1;
        spec[0].im = F::zero();
        spec[last].im = F::zero();
        self.c2r
            .process(spec, out)
            .expect("irfft buffers sized by plan");
    }

    /// Forward transform, returning `(re, im)` each `[bins, frames]`.
    pub(crate) fn forward(&self, signal: &[F]) -> Result<(Array2<F>, Array2<F>)> {
        if signal.is_empty() {
            return invalid("stft of an empty signal");
        }
        if signal.iter().any(|x| !x.is_finite()) {
            return invalid("stft input contains non-finite samples");
        }
        let n_fft = self.cfg.n_fft;
        let frames = self.cfg.n_frames(signal.len());
        if frames == 0 {
            return invalid(format!(
                "signal of {} samples is shorter than n_fft={n_fft}",
                signal.len()
            ));
        }
        let pad = self.cfg.pad() as isize;
        let bins = self.cfg.n_bins();
        let mut re = Array2::zeros((bins, frames));
        let mut im = Array2::zeros((bins, frames));
        let mut buf = vec![F::zero(); n_fft];
        let mut out = vec![Complex::new(F::zero(), F::zero()); bins];
        for l in 0..frames {
            let start = (l * self.cfg.n_hop) as isize - pad;
            for (n, b) in buf.iter_mut().enumerate() {
                let idx = reflect_index(start + n as isize, signal.len());
                *b = signal[idx] * self.window[n];
            }
            self.rfft(&mut buf, &mut out);
            for (k, c) in out.iter().enumerate() {
                re[[k, l]] = c.re;
                im[[k, l]] = c.im;
            }
        }
        Ok((re, im))
    }

    /// Adjoint of [`Self::forward`] with respect to the input signal.
    pub(crate) fn forward_adjoint(
        &self,
        g_re: ArrayView2<F>,
        g_im: ArrayView2<F>,
        signal_len: usize,
    ) -> Vec<F> {
        let n_fft = self.cfg.n_fft;
        let bins = self.cfg.n_bins();
        let frames = g_re.ncols();
        let pad = self.cfg.pad() as isize;
        let mut grad = vec![F::zero(); signal_len];
        let mut spec = vec![Complex::new(F::zero(), F::zero()); bins];
        let mut frame = vec![F::zero(); n_fft];
        let two = F::lit(2.0);
        for l in 0..frames {
            for k in 0..bins {
                let c = if k == 0 || k == bins - 1 { F::one() } else { two };
                spec[k] = Complex::new(g_re[[k, l]] / c, g_im[[k, l]] / c);
            }
            // Σ_k Re(G_k e^{iθ}) over the half spectrum equals an unnormalised
            // irfft of G_k / c_k.
            self.irfft(&mut spec, &mut frame);
            let start = (l * self.cfg.n_hop) as isize - pad;
            for n in 0..n_fft {
                let idx = reflect_index(start + n as isize, signal_len);
                grad[idx] = grad[idx] + frame[n] * self.window[n];
            }
        }
        grad
    }

    fn envelope(&self, frames: usize) -> Vec<F> {
        let n_fft = self.cfg.n_fft;
        let total = n_fft + self.cfg.n_hop * (frames - 1);
        let mut env = vec![F::zero(); total];
        for l in 0..frames {
            let start = l * self.cfg.n_hop;
            for n in 0..n_fft {
                env[start + n] = env[start + n] + self.window[n] * self.window[n];
            }
        }
        env
    }

    /// Output range `[offset, offset + len)` in overlap-add coordinates and
    /// the envelope, checking the envelope is nonzero over the kept range.
    fn synthesis_layout(&self, frames: usize, length: usize) -> Result<(usize, Vec<F>)> {
        let env = self.envelope(frames);
        let offset = self.cfg.pad();
        let tiny = F::lit(1e-11);
        for p in offset..offset + length {
            if env.get(p).map_or(true, |&e| e <= tiny) {
                return Err(Error::Numerical(format!(
                    "overlap-add window energy vanishes at output sample {}",
                    p - offset
                )));
            }
        }
        Ok((offset, env))
    }

    pub(crate) fn inverse(
        &self,
        re: ArrayView2<F>,
        im: ArrayView2<F>,
        length: Option<usize>,
    ) -> Result<Vec<F>> {
        let bins = self.cfg.n_bins();
        if re.dim() != im.dim() || re.nrows() != bins {
            return invalid(format!(
                "spectrum shape {:?}/{:?} inconsistent with {} bins",
                re.dim(),
                im.dim(),
                bins
            ));
        }
        let frames = re.ncols();
        if frames == 0 {
            return invalid("istft of a spectrum with zero frames");
        }
        let n_fft = self.cfg.n_fft;
        let length = length.unwrap_or_else(|| self.cfg.synth_len(frames));
        let (offset, env) = self.synthesis_layout(frames, length)?;
        let mut acc = vec![F::zero(); env.len()];
        let mut spec = vec![Complex::new(F::zero(), F::zero()); bins];
        let mut frame = vec![F::zero(); n_fft];
        let norm = F::one() / F::lit(n_fft as f64);
        for l in 0..frames {
            for k in 0..bins {
                spec[k] = Complex::new(re[[k, l]], im[[k, l]]);
            }
            self.irfft(&mut spec, &mut frame);
            let start = l * self.cfg.n_hop;
            for n in 0..n_fft {
                acc[start + n] = acc[start + n] + frame[n] * norm * self.window[n];
            }
        }
        Ok((offset..offset + length).map(|p| acc[p] / env[p]).collect())
    }

    /// Adjoint of [`Self::inverse`]: maps a waveform gradient to `(g_re, g_im)`.
    pub(crate) fn inverse_adjoint(
        &self,
        g_wave: &[F],
        frames: usize,
    ) -> Result<(Array2<F>, Array2<F>)> {
        let n_fft = self.cfg.n_fft;
        let bins = self.cfg.n_bins();
        let (offset, env) = self.synthesis_layout(frames, g_wave.len())?;
        let mut g_acc = vec![F::zero(); env.len()];
        for (i, &g) in g_wave.iter().enumerate() {
            g_acc[offset + i] = g / env[offset + i];
        }
        let norm = F::one() / F::lit(n_fft as f64);
        let two = F::lit(2.0);
        let mut g_re = Array2::zeros((bins, frames));
        let mut g_im = Array2::zeros((bins, frames));
        let mut frame = vec![F::zero(); n_fft];
        let mut out = vec![Complex::new(F::zero(), F::zero()); bins];
        for l in 0..frames {
            let start = l * self.cfg.n_hop;
            for n in 0..n_fft {
                frame[n] = g_acc[start + n] * self.window[n] * norm;
            }
            self.rfft(&mut frame, &mut out);
            for k in 0..bins {
                if k == 0 || k == bins - 1 {
                    g_re[[k, l]] = out[k].re;
                } else {
                    g_re[[k, l]] = two * out[k].re;
                    g_im[[k, l]] = two * out[k].im;
                }
            }
        }
        Ok((g_re, g_im))
    }
}

pub fn stft<F: Real>(signal: &[F], cfg: &StftConfig) -> Result<ComplexSpectrum<F>> {
    let (re, im) = SpectralKernel::new(cfg)?.forward(signal)?;
    Ok(ComplexSpectrum::from_rect(&re, &im))
}

/// Inverse STFT producing `cfg.synth_len(frames)` samples.
pub fn istft<F: Real>(spec: &ComplexSpectrum<F>, cfg: &StftConfig) -> Result<Vec<F>> {
    istft_with_length(spec, cfg, None)
}

/// Inverse STFT truncated (or checked) to an explicit output length.
pub fn istft_with_length<F: Real>(
    spec: &ComplexSpectrum<F>,
    cfg: &StftConfig,
    length: Option<usize>,
) -> Result<Vec<F>> {
    if spec.magnitude.dim() != spec.phase.dim() {
        return invalid("magnitude/phase shape mismatch");
    }
    let (re, im) = spec.to_rect();
    SpectralKernel::new(cfg)?.inverse(re.view(), im.view(), length)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the triangular filters.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max());
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// HTK-scale triangular filterbank, shape `[n_mels, n_fft/2 + 1]`, unnormalised.
pub fn mel_filterbank<F: Real>(cfg: &MelConfig) -> Result<Array2<F>> {
    cfg.validate()?;
    let bins = cfg.stft.n_bins();
    let nyquist = cfg.stft.sample_rate as f64 / 2.0;
    let edges = mel_edges(cfg);
    let mut fb = Array2::zeros((cfg.n_mels, bins));
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row_sum = 0.0;
        for k in 0..bins {
            let f = nyquist * k as f64 / (bins - 1) as f64;
            let down = (f - lo) / (mid - lo);
            let up = (hi - f) / (hi - mid);
            let w = down.min(up).max(0.0);
            row_sum += w;
            fb[[m, k]] = F::lit(w);
        }
        if row_sum <= 0.0 {
            return invalid(format!(
                "n_mels={} too large for {} frequency bins: filter {m} is empty",
                cfg.n_mels, bins
            ));
        }
    }
    Ok(fb)
}

/// `ln(max(fb · |STFT|, floor))`, shape `[n_mels, frames]`.
pub fn mel_spectrogram<F: Real>(signal: &[F], cfg: &MelConfig) -> Result<Array2<F>> {
    let fb = mel_filterbank::<F>(cfg)?;
    let spec = stft(signal, &cfg.stft)?;
    Ok(log_mel_from_magnitude(&fb, &spec.magnitude, F::lit(cfg.log_floor)))
}

pub(crate) fn log_mel_from_magnitude<F: Real>(fb: &Array2<F>, mag: &Array2<F>, floor: F) -> Array2<F> {
    fb.dot(mag).mapv(|v| v.max(floor).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rms(a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_signal_has_zero_magnitude() {
        let spec = stft(&vec![0.0f64; 1024], &StftConfig::default()).unwrap();
        assert!(spec.magnitude.iter().all(|&m| m == 0.0));
        assert_eq!(spec.n_bins(), 513);
        assert_eq!(spec.n_frames(), 5);
    }

    #[test]
    fn empty_signal_rejected() {
        assert!(matches!(
            stft::<f64>(&[], &StftConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn cosine_peaks_at_its_bin() {
        // Brute-force DFT of one windowed frame as the oracle.
        let cfg = StftConfig::default();
        let n = cfg.n_fft;
        let x: Vec<f64> = (0..4096)
            .map(|i| (std::f64::consts::TAU * 4.0 * i as f64 / n as f64).cos())
            .collect();
        let spec = stft(&x, &cfg).unwrap();
        let w = hann_window::<f64>(n);
        let frame = 6;
        let start = frame * cfg.n_hop - n / 2;
        for k in [0usize, 3, 4, 5, 100] {
            let (mut re, mut im) = (0.0, 0.0);
            for t in 0..n {
                let v = x[start + t] * w[t];
                let ang = -std::f64::consts::TAU * (k * t) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            assert!((spec.magnitude[[k, frame]] - re.hypot(im)).abs() < 1e-8);
        }
        for l in 0..spec.n_frames() {
            let col = spec.magnitude.column(l);
            let peak = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(peak, 4, "frame {l}");
        }
    }

    #[test]
    fn phases_are_principal() {
        let spec = stft(&noise(2048, 3), &StftConfig::default()).unwrap();
        let pi = std::f64::consts::PI;
        assert!(spec.phase.iter().all(|&p| p > -pi && p <= pi));
    }

    #[test]
    fn round_trip_white_noise() {
        let cfg = StftConfig::default();
        let x = noise(2560, 7);
        let spec = stft(&x, &cfg).unwrap();
        let y = istft(&spec, &cfg).unwrap();
        assert_eq!(y.len(), spec.n_frames() * cfg.n_hop);
        assert!(rms(&y[..x.len()], &x) < 1e-6);
    }

    #[test]
    fn round_trip_single_precision() {
        let cfg = StftConfig::default();
        let x: Vec<f32> = noise(2048, 9).into_iter().map(|v| v as f32).collect();
        let y = istft_with_length(&stft(&x, &cfg).unwrap(), &cfg, Some(x.len())).unwrap();
        let err: f64 = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / x.len() as f64;
        assert!(err.sqrt() < 1e-4);
    }

    #[test]
    fn zero_spectrum_synthesises_silence() {
        let cfg = StftConfig::default();
        let spec = ComplexSpectrum::new(Array2::<f64>::zeros((513, 4)), Array2::zeros((513, 4))).unwrap();
        let y = istft(&spec, &cfg).unwrap();
        assert_eq!(y.len(), 1024);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_recovered_at_offset() {
        // Direct overlap-add oracle: the frames of an impulse are a shifted
        // window, so resynthesis must reproduce the impulse itself.
        let cfg = StftConfig::default();
        let mut x = vec![0.0f64; 2048];
        x[777] = 1.0;
        let y = istft_with_length(&stft(&x, &cfg).unwrap(), &cfg, Some(x.len())).unwrap();
        for (i, v) in y.iter().enumerate() {
            let expect = if i == 777 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-9, "sample {i}: {v}");
        }
    }

    #[test]
    fn istft_shape_mismatch() {
        let cfg = StftConfig::default();
        let spec = ComplexSpectrum::new(Array2::<f64>::zeros((100, 4)), Array2::zeros((100, 4))).unwrap();
        assert!(matches!(istft(&spec, &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn istft_without_overlap_hits_zero_window() {
        let cfg = StftConfig { n_fft: 64, n_hop: 64, ..StftConfig::default() };
        let spec = ComplexSpectrum::new(Array2::<f64>::ones((33, 3)), Array2::zeros((33, 3))).unwrap();
        assert!(matches!(istft(&spec, &cfg), Err(Error::Numerical(_))));
    }

    #[test]
    fn parseval_energy() {
        let cfg = StftConfig::default();
        let mut x = noise(8192, 11);
        // Silent edges keep the reflected padding out of the energy balance.
        let edge = cfg.n_fft;
        let n = x.len();
        x[..edge].iter_mut().for_each(|v| *v = 0.0);
        x[n - edge..].iter_mut().for_each(|v| *v = 0.0);
        let spec = stft(&x, &cfg).unwrap();
        let bins = cfg.n_bins();
        let mut spectral = 0.0;
        for l in 0..spec.n_frames() {
            for k in 0..bins {
                let c = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
                spectral += c * spec.magnitude[[k, l]].powi(2);
            }
        }
        spectral /= cfg.n_fft as f64;
        // Windowed energy of the same frames, computed in the time domain.
        let w = hann_window::<f64>(cfg.n_fft);
        let mut windowed = 0.0;
        for l in 0..spec.n_frames() {
            let start = (l * cfg.n_hop) as isize - (cfg.n_fft / 2) as isize;
            for n in 0..cfg.n_fft {
                let v = x[reflect_index(start + n as isize, x.len())] * w[n];
                windowed += v * v;
            }
        }
        assert!((spectral - windowed).abs() / windowed < 0.01);
        // Window gain: Σw² / hop = 1.5 for 75% overlap Hann.
        let gain: f64 = w.iter().map(|v| v * v).sum::<f64>() / cfg.n_hop as f64;
        let signal: f64 = x.iter().map(|v| v * v).sum();
        assert!((windowed / gain - signal).abs() / signal < 0.01);
    }

    #[test]
    fn filterbank_shape_and_rows() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank::<f64>(&cfg).unwrap();
        assert_eq!(fb.dim(), (100, 513));
        assert!(fb.iter().all(|&w| w >= 0.0));
        assert!(fb.rows().into_iter().all(|r| r.sum() > 0.0));
        let centers = mel_center_frequencies(&cfg);
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
        // Interior bins are covered by at least one filter.
        let nyq = 12_000.0;
        for k in 1..512 {
            let f = nyq * k as f64 / 512.0;
            assert!(f > cfg.f_min && f < cfg.f_max());
            assert!(fb.column(k).sum() > 0.0, "bin {k}");
        }
    }

    #[test]
    fn filterbank_too_many_mels() {
        let cfg = MelConfig {
            stft: StftConfig { n_fft: 64, n_hop: 16, ..StftConfig::default() },
            n_mels: 64,
            ..MelConfig::default()
        };
        assert!(matches!(mel_filterbank::<f64>(&cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn mel_of_silence_is_floor() {
        let cfg = MelConfig::default();
        let mel = mel_spectrogram(&vec![0.0f64; 24_000], &cfg).unwrap();
        assert_eq!(mel.dim(), (100, 94));
        let floor = 1e-5f64.ln();
        assert!(mel.iter().all(|&v| v == floor));
    }

    #[test]
    fn mel_is_monotone_in_gain() {
        let cfg = MelConfig::default();
        let x = noise(4096, 5);
        let loud: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
        let a = mel_spectrogram(&x, &cfg).unwrap();
        let b = mel_spectrogram(&loud, &cfg).unwrap();
        let floor = 1e-5f64.ln();
        for (lo, hi) in a.iter().zip(b.iter()) {
            assert!(lo.is_finite() && hi.is_finite());
            if *lo > floor {
                assert!(hi >= lo);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig { n_fft: 1023, ..Default::default() }.validate().is_err());
        assert!(StftConfig { n_hop: 300, ..Default::default() }.validate().is_err());
        assert!(MelConfig { log_floor: 0.0, ..Default::default() }.validate().is_err());
        assert!(MelConfig { f_min: 13_000.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn adjoints_match_inner_products() {
        // <A x, y> == <x, A^T y> for both transforms.
        let cfg = StftConfig { n_fft: 64, n_hop: 16, ..StftConfig::default() };
        let k = SpectralKernel::<f64>::new(&cfg).unwrap();
        let x = noise(160, 1);
        let (re, im) = k.forward(&x).unwrap();
        let gr = Array2::from_shape_vec(re.dim(), noise(re.len(), 2)).unwrap();
        let gi = Array2::from_shape_vec(im.dim(), noise(im.len(), 3)).unwrap();
        let lhs = (&re * &gr).sum() + (&im * &gi).sum();
        let back = k.forward_adjoint(gr.view(), gi.view(), x.len());
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));

        let frames = 6;
        let sr = Array2::from_shape_vec((33, frames), noise(33 * frames, 4)).unwrap();
        let mut si = Array2::from_shape_vec((33, frames), noise(33 * frames, 5)).unwrap();
        // DC / Nyquist imaginary parts are ignored by the inverse.
        for l in 0..frames {
            si[[0, l]] = 0.0;
            si[[32, l]] = 0.0;
        }
        let y = k.inverse(sr.view(), si.view(), None).unwrap();
        let gy = noise(y.len(), 6);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let (ar, ai) = k.inverse_adjoint(&gy, frames).unwrap();
        let rhs = (&ar * &sr).sum() + (&ai * &si).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
