use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn format_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

/// Reads a mono 16 kHz RIFF/WAVE file (PCM16 or IEEE float32) into `[-1, 1]`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(format_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(format_err)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(format_err)?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported codec {:?}/{} bits",
                path.display(),
                fmt,
                bits
            )))
        }
    };
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Rate {
            expected: SAMPLE_RATE,
            found: spec.sample_rate,
        });
    }
    if samples.is_empty() {
        return Err(Error::Format(format!("{}: empty payload", path.display())));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes PCM16. Values outside `[-1, 1)` are clipped.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(format_err)?;
    for &s in w.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(format_err)?;
    }
    writer.finalize().map_err(format_err)
}

/// Writes IEEE float32.
pub fn write_wav_f32(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(format_err)?;
    for &s in w.samples() {
        writer.write_sample(s as f32).map_err(format_err)?;
    }
    writer.finalize().map_err(format_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..16_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::from_samples(x.clone()).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), x.len());
        let max_err = x
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 2f64.powi(-15), "{max_err}");
    }

    #[test]
    fn float_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let w = Waveform::from_samples(vec![0.25, -0.5, 0.125]).unwrap();
        write_wav_f32(&path, &w).unwrap();
        assert_eq!(read_wav(&path).unwrap(), w);
    }

    #[test]
    fn empty_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.wav");
        write_wav(&path, &Waveform::from_samples(vec![]).unwrap()).unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_rate_is_rate_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.wav");
        write_wav(&path, &Waveform::new(vec![0.1; 800], 8000).unwrap()).unwrap();
        assert!(matches!(
            read_wav(&path),
            Err(Error::Rate {
                expected: 16000,
                found: 8000
            })
        ));
    }

    #[test]
    fn stereo_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Format(_))));
    }
}
