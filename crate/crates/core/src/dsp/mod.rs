//! Waveforms, STFT analysis/synthesis, phase-sensitive masks and
//! SNR-controlled mixing.

mod mask;
mod mix;
mod stft;
pub mod synth;
mod wav;

pub use mask::{apply_mask, psm, Mask, MAG_FLOOR};
pub use mix::{active_power, mix_at_snr, mix_segment_at_snr, Mixture};
pub use stft::{istft, num_frames, sqrt_hann, stft, FRAME_LEN, HOP, NUM_BINS};
pub use wav::{read_wav, write_wav, write_wav_f32};

use num_complex::Complex64;

use crate::error::{dim_err, Error, Result};

/// Every pipeline entry point runs at this rate; there is no resampling.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono, finite, real-valued signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// A 16 kHz waveform.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub(crate) fn require_pipeline_rate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Rate {
                expected: SAMPLE_RATE,
                found: self.sample_rate,
            });
        }
        Ok(())
    }
}

/// One-sided complex STFT, `frames × bins`, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    values: Vec<Complex64>,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, values: Vec<Complex64>) -> Result<Self> {
        if frames * bins != values.len() {
            return Err(dim_err!(
                "spectrogram {}x{} needs {} values, got {}",
                frames,
                bins,
                frames * bins,
                values.len()
            ));
        }
        Ok(Self {
            frames,
            bins,
            values,
        })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            values: vec![Complex64::new(0.0, 0.0); frames * bins],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn get(&self, frame: usize, bin: usize) -> Complex64 {
        self.values[frame * self.bins + bin]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm()).collect()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            frames: self.frames,
            bins: self.bins,
            values: self.values.iter().map(|c| c * s).collect(),
        }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.frames != other.frames || self.bins != other.bins {
            return Err(dim_err!(
                "spectrogram shapes differ: {}x{} vs {}x{}",
                self.frames,
                self.bins,
                other.frames,
                other.bins
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            frames: self.frames,
            bins: self.bins,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}
