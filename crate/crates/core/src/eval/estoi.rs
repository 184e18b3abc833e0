//! Extended short-time objective intelligibility.
//!
//! Signals are resampled to 10 kHz, frames more than 40 dB below the loudest
//! clean frame are dropped from both signals, and one-third-octave band
//! envelopes are compared over 384 ms segments (30 frames of 12.8 ms hop)
//! after normalizing each band row and then each frame column.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const METRIC_RATE: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const DYN_RANGE_DB: f64 = 40.0;

/// Half-width of the resampling kernel in input samples.
const RESAMPLE_HALF_WIDTH: usize = 64;
/// Passband edge of the 16 kHz to 10 kHz anti-aliasing filter.
const RESAMPLE_CUTOFF_HZ: f64 = 4_750.0;

/// Blackman-windowed sinc resampling from 16 kHz to 10 kHz.
///
/// Output sample `n` sits at input position `1.6·n`; the kernel has cutoff
/// 4.75 kHz and spans ±64 input samples. Unity gain at DC.
pub fn resample_to_metric_rate(x: &[f64]) -> Vec<f64> {
    let (up, down) = (5usize, 8usize);
    let out_len = (x.len() * up).div_ceil(down);
    let fc = RESAMPLE_CUTOFF_HZ / SAMPLE_RATE as f64;
    let hw = RESAMPLE_HALF_WIDTH as f64;
    let kernel = |d: f64| -> f64 {
        if d.abs() >= hw {
            return 0.0;
        }
        let sinc = if d == 0.0 {
            2.0 * fc
        } else {
            (2.0 * PI * fc * d).sin() / (PI * d)
        };
        let w = 0.42 + 0.5 * (PI * d / hw).cos() + 0.08 * (2.0 * PI * d / hw).cos();
        sinc * w
    };
    // position 8n/5 has only five distinct fractional parts, so five tap sets
    let taps: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = (phase * down % up) as f64 / up as f64;
            let raw: Vec<f64> = (-(RESAMPLE_HALF_WIDTH as isize)..=RESAMPLE_HALF_WIDTH as isize)
                .map(|j| kernel(j as f64 - frac))
                .collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    (0..out_len)
        .map(|n| {
            let base = (n * down / up) as isize;
            let t = &taps[n % up];
            let mut acc = 0.0;
            for (j, &w) in t.iter().enumerate() {
                let idx = base + j as isize - RESAMPLE_HALF_WIDTH as isize;
                if idx >= 0 && (idx as usize) < x.len() {
                    acc += w * x[idx as usize];
                }
            }
            acc
        })
        .collect()
}

/// Symmetric Hann window without its zero end points.
fn hann_inner(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(HOP)
}

/// Drops frames of `x` quieter than its loudest frame by more than the
/// dynamic range, dropping the same frames from `y`, and overlap-adds the rest.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hann_inner(FRAME);
    let frame = |s: &[f64], i: usize| -> Vec<f64> { w.iter().zip(&s[i..i + FRAME]).map(|(a, b)| a * b).collect() };
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&i| {
            let e = frame(x, i).iter().map(|v| v * v).sum::<f64>().sqrt();
            20.0 * e.max(f64::MIN_POSITIVE).log10()
        })
        .collect();
    let peak = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| peak - DYN_RANGE_DB - e < 0.0)
        .map(|(&i, _)| i)
        .collect();
    let out_len = if kept.is_empty() {
        0
    } else {
        (kept.len() - 1) * HOP + FRAME
    };
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (k, &i) in kept.iter().enumerate() {
        for (j, (a, b)) in frame(x, i).into_iter().zip(frame(y, i)).enumerate() {
            xs[k * HOP + j] += a;
            ys[k * HOP + j] += b;
        }
    }
    (xs, ys)
}

fn fft() -> &'static Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(NFFT))
}

/// Power spectrogram `[frames][NFFT/2+1]`.
fn power_frames(x: &[f64]) -> Vec<Vec<f64>> {
    let w = hann_inner(FRAME);
    let plan = fft();
    frame_starts(x.len())
        .map(|i| {
            let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
            for j in 0..FRAME {
                buf[j].re = w[j] * x[i + j];
            }
            plan.process(&mut buf);
            buf[..=NFFT / 2].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// Bin ranges `[lo, hi)` of the one-third-octave bands.
fn band_ranges() -> Vec<(usize, usize)> {
    let bin_hz = METRIC_RATE as f64 / NFFT as f64;
    let nearest = |f: f64| -> usize {
        (0..=NFFT / 2)
            .min_by(|&a, &b| {
                let da = (a as f64 * bin_hz - f).powi(2);
                let db = (b as f64 * bin_hz - f).powi(2);
                da.total_cmp(&db)
            })
            .unwrap()
    };
    (0..BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band envelopes `[BANDS][frames]`.
fn band_envelopes(power: &[Vec<f64>], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    bands
        .iter()
        .map(|&(lo, hi)| power.iter().map(|p| p[lo..hi].iter().sum::<f64>().sqrt()).collect())
        .collect()
}

fn normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Row-then-column normalized segment `[BANDS][SEGMENT]` starting at frame `m`.
fn normalized_segment(env: &[Vec<f64>], m: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = env.iter().map(|r| r[m..m + SEGMENT].to_vec()).collect();
    rows.iter_mut().for_each(|r| normalize(r));
    for t in 0..SEGMENT {
        let mut col: Vec<f64> = rows.iter().map(|r| r[t]).collect();
        normalize(&mut col);
        for (r, v) in rows.iter_mut().zip(col) {
            r[t] = v;
        }
    }
    rows
}

/// ESTOI of `processed` against `clean`, both 16 kHz and of equal length.
pub fn estoi(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    clean.require_pipeline_rate()?;
    processed.require_pipeline_rate()?;
    if clean.len() != processed.len() {
        return Err(Error::Length(format!(
            "estoi needs equal lengths, got {} and {}",
            clean.len(),
            processed.len()
        )));
    }
    let x = resample_to_metric_rate(clean.samples());
    let y = resample_to_metric_rate(processed.samples());
    let (x, y) = remove_silent_frames(&x, &y);
    let (px, py) = (power_frames(&x), power_frames(&y));
    if px.len() < SEGMENT {
        return Err(Error::Length(format!(
            "estoi needs at least {SEGMENT} active frames (384 ms), found {}",
            px.len()
        )));
    }
    let bands = band_ranges();
    let (ex, ey) = (band_envelopes(&px, &bands), band_envelopes(&py, &bands));
    let segments = px.len() - SEGMENT + 1;
    let mut total = 0.0;
    for m in 0..segments {
        let (a, b) = (normalized_segment(&ex, m), normalized_segment(&ey, m));
        let dot: f64 = a.iter().zip(&b).flat_map(|(r, s)| r.iter().zip(s)).map(|(u, v)| u * v).sum();
        total += dot / SEGMENT as f64;
    }
    Ok(total / segments as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mix_segment_at_snr, synth};

    #[test]
    fn resampler_passes_tones_and_keeps_length() {
        let n = 16_000;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin()).collect();
        let y = resample_to_metric_rate(&x);
        assert_eq!(y.len(), 10_000);
        for i in (200..9800).step_by(97) {
            let want = (2.0 * PI * 1000.0 * i as f64 / 10_000.0).sin();
            assert!((y[i] - want).abs() < 2e-3, "{i}: {} vs {want}", y[i]);
        }
        // 7 kHz folds to 3 kHz at 10 kHz unless filtered
        let hi: Vec<f64> = (0..n).map(|i| (2.0 * PI * 7000.0 * i as f64 / 16_000.0).sin()).collect();
        let r = resample_to_metric_rate(&hi);
        let rms = (r[200..9800].iter().map(|v| v * v).sum::<f64>() / 9600.0).sqrt();
        assert!(rms < 1e-3, "{rms}");
    }

    #[test]
    fn band_edges_follow_third_octaves() {
        let b = band_ranges();
        assert_eq!(b.len(), 15);
        assert_eq!(b[0], (7, 9));
        assert!(b.windows(2).all(|w| w[0].1 == w[1].0 || w[0].1 + 1 >= w[1].0));
        assert!(b[14].1 <= 257);
    }

    #[test]
    fn identity_and_scale() {
        let x = synth::tonal_speech(24_000, 3);
        assert!((estoi(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let noise = synth::filtered_noise(24_000, 4);
        let y = mix_segment_at_snr(&x, noise.samples(), 0.0).unwrap().mixture;
        let base = estoi(&x, &y).unwrap();
        let scaled = |w: &Waveform, g: f64| Waveform::from_samples(w.samples().iter().map(|v| v * g).collect()).unwrap();
        assert!((estoi(&scaled(&x, 3.7), &y).unwrap() - base).abs() < 1e-9);
        assert!((estoi(&x, &scaled(&y, 0.01)).unwrap() - base).abs() < 1e-9);
        assert!(base < 1.0);
    }

    #[test]
    fn short_or_mismatched_inputs() {
        let x = synth::tonal_speech(4_000, 1);
        assert!(matches!(estoi(&x, &x), Err(Error::Length(_))));
        let y = synth::tonal_speech(24_000, 1);
        assert!(matches!(estoi(&y, &x), Err(Error::Length(_))));
    }
}
