use num_complex::Complex64;

use super::Spectrogram;
use crate::error::{dim_err, Result};

/// Noisy bins with magnitude below this get a zero mask.
pub const MAG_FLOOR: f64 = 1e-8;

/// A real `frames × bins` time-frequency mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    frames: usize,
    bins: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(frames: usize, bins: usize, values: Vec<f64>) -> Result<Self> {
        if frames * bins != values.len() {
            return Err(dim_err!(
                "mask {}x{} needs {} values, got {}",
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

    pub fn filled(frames: usize, bins: usize, value: f64) -> Self {
        Self {
            frames,
            bins,
            values: vec![value; frames * bins],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.bins + bin]
    }
}

/// Phase-sensitive mask `|S|/|X| · cos(∠S − ∠X)`, computed as
/// `Re(S·X̄) / |X|²`.
///
/// With `clamp` the result is truncated to `[0, 1]`, the range a sigmoid
/// output layer can represent.
pub fn psm(clean: &Spectrogram, noisy: &Spectrogram, clamp: bool) -> Result<Mask> {
    if clean.frames() != noisy.frames() || clean.bins() != noisy.bins() {
        return Err(dim_err!(
            "psm shapes differ: clean {}x{} vs noisy {}x{}",
            clean.frames(),
            clean.bins(),
            noisy.frames(),
            noisy.bins()
        ));
    }
    let values = clean
        .values()
        .iter()
        .zip(noisy.values())
        .map(|(s, x)| {
            let mag = x.norm();
            if mag < MAG_FLOOR {
                return 0.0;
            }
            let m = (s * x.conj()).re / (mag * mag);
            if clamp {
                m.clamp(0.0, 1.0)
            } else {
                m
            }
        })
        .collect();
    Mask::new(clean.frames(), clean.bins(), values)
}

/// `Ŝ = M ⊙ X`: scales each bin, keeping the noisy phase.
pub fn apply_mask(noisy: &Spectrogram, mask: &Mask) -> Result<Spectrogram> {
    if noisy.frames() != mask.frames() || noisy.bins() != mask.bins() {
        return Err(dim_err!(
            "mask {}x{} does not match spectrogram {}x{}",
            mask.frames(),
            mask.bins(),
            noisy.frames(),
            noisy.bins()
        ));
    }
    let values: Vec<Complex64> = noisy
        .values()
        .iter()
        .zip(mask.values())
        .map(|(x, &m)| x * m)
        .collect();
    Spectrogram::new(noisy.frames(), noisy.bins(), values)
}
