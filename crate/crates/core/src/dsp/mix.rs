use rand::Rng;

use super::Waveform;
use crate::error::{Error, Result};

/// Mean square over the whole clip (no speech-activity weighting).
pub fn active_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixture: Waveform,
    pub scaled_noise: Waveform,
    /// Start of the noise segment within the noise recording.
    pub noise_offset: usize,
}

/// Cuts a random segment of `noise` as long as `speech` and mixes it at
/// `snr_db`.
pub fn mix_at_snr<R: Rng + ?Sized>(
    speech: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut R,
) -> Result<Mixture> {
    if noise.len() < speech.len() {
        return Err(Error::Length(format!(
            "noise ({} samples) shorter than speech ({} samples)",
            noise.len(),
            speech.len()
        )));
    }
    let offset = rng.random_range(0..=noise.len() - speech.len());
    let segment = &noise.samples()[offset..offset + speech.len()];
    let mut mix = mix_segment_at_snr(speech, segment, snr_db)?;
    mix.noise_offset = offset;
    Ok(mix)
}

/// Mixes an already-cut noise segment of the same length as `speech`.
pub fn mix_segment_at_snr(speech: &Waveform, segment: &[f64], snr_db: f64) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::DegenerateInput(format!("snr_db must be finite, got {snr_db}")));
    }
    if segment.len() != speech.len() {
        return Err(Error::Length(format!(
            "noise segment has {} samples, speech {}",
            segment.len(),
            speech.len()
        )));
    }
    let ps = active_power(speech.samples());
    let pn = active_power(segment);
    if ps <= 0.0 {
        return Err(Error::DegenerateInput("speech has zero power".into()));
    }
    if pn <= 0.0 {
        return Err(Error::DegenerateInput("noise has zero power".into()));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = segment.iter().map(|v| v * gain).collect();
    let mixture: Vec<f64> = speech
        .samples()
        .iter()
        .zip(&scaled)
        .map(|(s, d)| s + d)
        .collect();
    Ok(Mixture {
        mixture: Waveform::new(mixture, speech.sample_rate())?,
        scaled_noise: Waveform::new(scaled, speech.sample_rate())?,
        noise_offset: 0,
    })
}
