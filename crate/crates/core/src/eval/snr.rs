use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Reported when the estimate matches the reference exactly.
pub const SNR_CAP_DB: f64 = 120.0;

/// `10·log10(‖ref‖² / ‖ref − est‖²)`, capped at [`SNR_CAP_DB`].
pub fn snr_db(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Length(format!(
            "snr_db needs equal lengths, got {} and {}",
            reference.len(),
            estimate.len()
        )));
    }
    let signal: f64 = reference.samples().iter().map(|v| v * v).sum();
    let error: f64 = reference
        .samples()
        .iter()
        .zip(estimate.samples())
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    if signal == 0.0 {
        return Err(Error::DegenerateInput("reference has zero power".into()));
    }
    if error == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / error).log10()).min(SNR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mix_at_snr, synth};
    use rand::SeedableRng;

    #[test]
    fn identical_is_capped() {
        let x = synth::tonal_speech(4000, 1);
        assert_eq!(snr_db(&x, &x).unwrap(), SNR_CAP_DB);
    }

    #[test]
    fn zero_estimate_is_zero_db() {
        let x = synth::tonal_speech(4000, 1);
        let z = Waveform::from_samples(vec![0.0; 4000]).unwrap();
        assert!(snr_db(&x, &z).unwrap().abs() < 1e-12);
    }

    #[test]
    fn consistent_with_mixing() {
        let s = synth::tonal_speech(16_000, 2);
        let n = synth::filtered_noise(20_000, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let m = mix_at_snr(&s, &n, 5.0, &mut rng).unwrap();
        assert!((snr_db(&s, &m.mixture).unwrap() - 5.0).abs() < 1e-6);
    }
}
