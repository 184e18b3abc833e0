use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{Spectrogram, Waveform};
use crate::error::{dim_err, Result};

/// 32 ms at 16 kHz.
pub const FRAME_LEN: usize = 512;
/// 16 ms at 16 kHz.
pub const HOP: usize = 256;
pub const NUM_BINS: usize = FRAME_LEN / 2 + 1;

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

fn plans() -> &'static Plans {
    static PLANS: OnceLock<Plans> = OnceLock::new();
    PLANS.get_or_init(|| {
        let mut planner = FftPlanner::new();
        Plans {
            forward: planner.plan_fft_forward(FRAME_LEN),
            inverse: planner.plan_fft_inverse(FRAME_LEN),
            window: sqrt_hann(FRAME_LEN),
        }
    })
}

/// Periodic square-root Hann window; its square overlap-adds to one at 50%
/// overlap.
pub fn sqrt_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            (0.5 * (1.0 - phase.cos())).sqrt()
        })
        .collect()
}

/// Number of analysis frames for `n` samples; the tail is zero-padded up to
/// the frame grid so the last partial frame is analyzed.
pub fn num_frames(n: usize) -> usize {
    if n <= FRAME_LEN {
        1
    } else {
        (n - FRAME_LEN).div_ceil(HOP) + 1
    }
}

pub fn stft(w: &Waveform) -> Result<Spectrogram> {
    if w.is_empty() {
        return Err(dim_err!("stft needs at least one sample"));
    }
    let plans = plans();
    let x = w.samples();
    let frames = num_frames(x.len());
    let mut values = Vec::with_capacity(frames * NUM_BINS);
    let mut buf = vec![Complex64::new(0.0, 0.0); FRAME_LEN];
    for l in 0..frames {
        let start = l * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = x.get(start + i).copied().unwrap_or(0.0);
            *b = Complex64::new(s * plans.window[i], 0.0);
        }
        plans.forward.process(&mut buf);
        values.extend_from_slice(&buf[..NUM_BINS]);
    }
    Spectrogram::new(frames, NUM_BINS, values)
}

/// Weighted overlap-add inverse of [`stft`], cropped (or zero-extended) to
/// `out_len` samples.
///
/// The overlap-added output is divided by the summed squared window wherever
/// that sum is non-zero, which is exactly one away from the signal edges.
pub fn istft(spec: &Spectrogram, out_len: usize) -> Result<Waveform> {
    if spec.bins() != NUM_BINS {
        return Err(dim_err!(
            "istft expects {} bins, got {}",
            NUM_BINS,
            spec.bins()
        ));
    }
    let plans = plans();
    let frames = spec.frames();
    let padded = if frames == 0 { 0 } else { (frames - 1) * HOP + FRAME_LEN };
    let mut out = vec![0.0; padded.max(out_len)];
    let mut wsum = vec![0.0; padded.max(out_len)];
    let mut buf = vec![Complex64::new(0.0, 0.0); FRAME_LEN];
    let scale = 1.0 / FRAME_LEN as f64;
    for l in 0..frames {
        let row = &spec.values()[l * NUM_BINS..(l + 1) * NUM_BINS];
        buf[..NUM_BINS].copy_from_slice(row);
        // Hermitian completion; DC and Nyquist imaginary parts are dropped.
        buf[0].im = 0.0;
        buf[NUM_BINS - 1].im = 0.0;
        for k in 1..NUM_BINS - 1 {
            buf[FRAME_LEN - k] = row[k].conj();
        }
        plans.inverse.process(&mut buf);
        let start = l * HOP;
        for i in 0..FRAME_LEN {
            let w = plans.window[i];
            out[start + i] += buf[i].re * scale * w;
            wsum[start + i] += w * w;
        }
    }
    for (o, &ws) in out.iter_mut().zip(&wsum) {
        *o = if ws > 1e-10 { *o / ws } else { 0.0 };
    }
    out.truncate(out_len);
    Waveform::from_samples(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn frame_grid() {
        assert_eq!(num_frames(1), 1);
        assert_eq!(num_frames(512), 1);
        assert_eq!(num_frames(513), 2);
        assert_eq!(num_frames(768), 2);
        assert_eq!(num_frames(769), 3);
        let w = Waveform::from_samples(vec![0.1; 1000]).unwrap();
        let s = stft(&w).unwrap();
        assert_eq!((s.frames(), s.bins()), (3, 257));
    }

    #[test]
    fn sine_peaks_at_expected_bin_and_matches_direct_dft() {
        let n = 16_000;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let spec = stft(&Waveform::from_samples(x.clone()).unwrap()).unwrap();
        let win = sqrt_hann(FRAME_LEN);
        for l in [0, 10, 30, spec.frames() - 2] {
            let mags: Vec<f64> = (0..NUM_BINS).map(|k| spec.get(l, k).norm()).collect();
            let peak = (0..NUM_BINS)
                .max_by(|&a, &b| mags[a].total_cmp(&mags[b]))
                .unwrap();
            assert_eq!(peak, 32, "frame {l}");
            // direct DFT oracle on the windowed frame
            for k in [0, 31, 32, 33, 100] {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..FRAME_LEN {
                    let s = x.get(l * HOP + i).copied().unwrap_or(0.0) * win[i];
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / FRAME_LEN as f64;
                    acc += Complex64::from_polar(s, ang);
                }
                assert!((acc - spec.get(l, k)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_signal_and_linearity() {
        let z = stft(&Waveform::from_samples(vec![0.0; 3000]).unwrap()).unwrap();
        assert!(z.values().iter().all(|c| c.norm() == 0.0));
        let a = noise(4000, 1);
        let b = noise(4000, 2);
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let sa = stft(&Waveform::from_samples(a).unwrap()).unwrap();
        let sb = stft(&Waveform::from_samples(b).unwrap()).unwrap();
        let sab = stft(&Waveform::from_samples(ab).unwrap()).unwrap();
        let sum = sa.add(&sb).unwrap();
        for (p, q) in sab.values().iter().zip(sum.values()) {
            assert!((p - q).norm() < 1e-6);
        }
    }

    #[test]
    fn round_trip_interior() {
        let x = noise(32_000, 3);
        let w = Waveform::from_samples(x.clone()).unwrap();
        let y = istft(&stft(&w).unwrap(), x.len()).unwrap();
        assert_eq!(y.len(), x.len());
        let lo = FRAME_LEN / 2;
        let hi = x.len() - FRAME_LEN / 2;
        let num: f64 = (lo..hi).map(|i| (x[i] - y.samples()[i]).powi(2)).sum();
        let den: f64 = (lo..hi).map(|i| x[i].powi(2)).sum();
        assert!((num / den).sqrt() < 1e-6);
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence() {
        let y = istft(&Spectrogram::zeros(5, NUM_BINS), 1200).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_count_checked() {
        assert!(istft(&Spectrogram::zeros(2, 100), 10).is_err());
    }
}
