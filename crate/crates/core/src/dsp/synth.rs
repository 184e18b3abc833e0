//! Synthetic stand-ins for speech and noise corpora.
//!
//! "Speech" is a train of voiced syllables: harmonic complexes with gliding
//! pitch, a spectral tilt and raised-cosine envelopes separated by pauses.
//! "Noise" is white noise through a seeded low-pass/high-pass pair. Both are
//! deterministic in their seed.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Waveform, SAMPLE_RATE};

pub fn tonal_speech(n: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; n];
    let mut pos = (rng.random_range(0.0..0.05) * fs) as usize;
    while pos < n {
        let dur = (rng.random_range(0.12..0.30) * fs) as usize;
        let f_start: f64 = rng.random_range(100.0..250.0);
        let f_end = f_start * rng.random_range(0.8..1.25);
        let tilt: f64 = rng.random_range(0.6..1.4);
        let formant: f64 = rng.random_range(400.0..2500.0);
        let amp = rng.random_range(0.3..1.0);
        let mut phase = 0.0;
        for i in 0..dur.min(n - pos) {
            let frac = i as f64 / dur as f64;
            let f0 = f_start + (f_end - f_start) * frac;
            phase += 2.0 * PI * f0 / fs;
            let env = 0.5 * (1.0 - (2.0 * PI * frac).cos());
            let mut v = 0.0;
            let mut h = 1;
            while (h as f64) * f0 < 4000.0 {
                let fh = h as f64 * f0;
                let boost = 1.0 + 2.0 * (-((fh - formant) / 300.0).powi(2)).exp();
                v += boost * (h as f64).powf(-tilt) * (h as f64 * phase).sin();
                h += 1;
            }
            out[pos + i] += amp * env * v;
        }
        pos += dur + (rng.random_range(0.03..0.10) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if peak > 0.0 {
        for v in &mut out {
            *v *= 0.5 / peak;
        }
    }
    Waveform::from_samples(out).expect("finite synthesis")
}

pub fn filtered_noise(n: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lp: f64 = rng.random_range(0.3..0.9);
    let hp: f64 = rng.random_range(0.0..0.5);
    let mut low = 0.0;
    let mut prev_low = 0.0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = rng.random_range(-1.0..1.0);
        low = lp * low + (1.0 - lp) * w;
        // mild first-order high-pass blend so the spectrum is not purely pink
        let v = low - hp * prev_low;
        prev_low = low;
        out.push(v);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        for v in &mut out {
            *v *= 0.1 / rms;
        }
    }
    Waveform::from_samples(out).expect("finite synthesis")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_nonsilent() {
        assert_eq!(tonal_speech(5000, 3), tonal_speech(5000, 3));
        assert_ne!(tonal_speech(5000, 3), tonal_speech(5000, 4));
        assert!(tonal_speech(5000, 3).samples().iter().any(|&v| v != 0.0));
        assert_eq!(filtered_noise(100, 1), filtered_noise(100, 1));
    }
}
