//! Mono PCM16 / float32 WAV files.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

pub const PIPELINE_SAMPLE_RATE: u32 = 24_000;

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::UnsupportedFormat(other.to_string()),
    }
}

/// Samples scaled to [-1, 1] and the file's sample rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let reader = WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!("expected mono audio, found {} channels", spec.channels)));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!("{bits}-bit {fmt:?} samples; expected PCM16 or float32")));
        }
    }
    .map_err(map_hound)?;
    Ok((samples, spec.sample_rate))
}

/// Writes PCM16 without dithering; samples outside [-1, 1] are clipped.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite audio sample".into()));
    }
    let spec = WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut w = WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}

pub fn require_sample_rate(found: u32, expected: u32) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::SampleRateMismatch { expected, found })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn pcm16_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..=1.0)).collect();
        write_wav(&p, &x, 24_000).unwrap();
        let (y, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, 24_000);
        assert_eq!(y.len(), x.len());
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1.0 / 32768.0, "{err}");
    }

    #[test]
    fn float32_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = WavSpec { channels: 1, sample_rate: 24_000, bits_per_sample: 32, sample_format: SampleFormat::Float };
        let mut w = WavWriter::create(&p, spec).unwrap();
        for v in [0.25f32, -0.5, 0.125] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(read_wav(&p).unwrap().0, vec![0.25, -0.5, 0.125]);
    }

    #[test]
    fn stereo_and_pcm24_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec { channels: 2, sample_rate: 24_000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(Error::UnsupportedFormat(_))));

        let p = dir.path().join("d.wav");
        let spec = WavSpec { channels: 1, sample_rate: 24_000, bits_per_sample: 24, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn rate_check() {
        assert!(require_sample_rate(24_000, PIPELINE_SAMPLE_RATE).is_ok());
        assert!(matches!(
            require_sample_rate(44_100, PIPELINE_SAMPLE_RATE),
            Err(Error::SampleRateMismatch { expected: 24_000, found: 44_100 })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_wav("/nonexistent/x.wav"), Err(Error::Io(_))));
    }
}
