//! Self-check suite: gradient checks, scan equivalence, causality sweeps,
//! STFT round trip, mask identities, stabilizer fuzz and the schedule peak.

use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, Var};
use crate::dsp::{istft, psm, stft, synth, Spectrogram, Waveform, FRAME_LEN};
use crate::error::Result;
use crate::model::{Backbone, EnhancementModel, ModelConfig};
use crate::posenc::PeKind;
use crate::ssm::{selective_scan_par, selective_scan_seq};
use crate::tensor::{Real, Tensor};
use crate::training::lr_at;
use crate::xlstm::{mlstm_cell_step, MlstmState};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

/// Tiny model configuration for a backbone: 6 bins, width 8.
pub fn tiny_config(backbone: Backbone, causal: bool, pe: PeKind) -> ModelConfig {
    ModelConfig {
        causal,
        pe,
        d_model: 8,
        d_ff: 12,
        heads: 2,
        input_bins: 6,
        conv_kernel: 3,
        d_state: 3,
        mlstm_heads: 2,
        qkv_block: 2,
        ..ModelConfig::new(backbone, 1)
    }
}

/// Worst relative error of reverse-mode against central differences over
/// the input and every parameter tensor of a model.
pub fn model_grad_error(cfg: &ModelConfig, seed: u64, frames: usize) -> Result<f64> {
    let model = EnhancementModel::<f64>::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let x = Tensor::from_fn(vec![frames, cfg.input_bins], |_| rng.random_range(0.1..2.0));
    let store = model.params();
    let mut worst = grad_check(|x| model.forward_var(&store.bind(false), x), &x, 1e-5)?.max_rel_err;
    let xc = Var::constant(x);
    for i in 0..store.len() {
        let id = store.find(&store.names()[i]).expect("own name");
        let r = grad_check(
            |w| {
                let mut p = store.bind(false);
                p.replace(id, w.clone());
                model.forward_var(&p, &xc)
            },
            store.get(id),
            1e-5,
        )?;
        worst = worst.max(r.max_rel_err);
    }
    Ok(worst)
}

/// Largest change at frames before `t` when frame `t` of the input is
/// perturbed, over `pairs` random `(t, input)` draws.
pub fn causality_violation<T: Real>(model: &EnhancementModel<T>, frames: usize, pairs: usize, seed: u64) -> Result<f64> {
    let k = model.config().input_bins;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let x = Tensor::from_fn(vec![frames, k], |_| T::from_f64(rng.random_range(0.0..3.0)));
        let t = rng.random_range(0..frames);
        let mut xp = x.clone();
        for v in &mut xp.data_mut()[t * k..(t + 1) * k] {
            *v += T::from_f64(rng.random_range(-1.0..1.0));
        }
        let (a, b) = (model.forward(&x)?, model.forward(&xp)?);
        for (p, q) in a.data()[..t * k].iter().zip(&b.data()[..t * k]) {
            worst = worst.max((Real::to_f64(*p) - Real::to_f64(*q)).abs());
        }
    }
    Ok(worst)
}

/// `max|a − b| / max|b|`.
pub fn max_rel_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let num = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (Real::to_f64(*x) - Real::to_f64(*y)).abs())
        .fold(0.0, f64::max);
    let den = b.data().iter().map(|y| Real::to_f64(*y).abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Random scan inputs of length `len` in the value ranges a trained Mamba
/// block produces.
pub fn random_scan_case<T: Real>(rng: &mut ChaCha8Rng, len: usize, d_inner: usize, d_state: usize) -> [Tensor<T>; 6] {
    let mut r = |shape: Vec<usize>, lo: f64, hi: f64| Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)));
    [
        r(vec![len, d_inner], -2.0, 2.0),
        r(vec![len, d_inner], 1e-3, 0.5),
        r(vec![d_inner, d_state], -4.0, -0.05),
        r(vec![len, d_state], -1.0, 1.0),
        r(vec![len, d_state], -1.0, 1.0),
        r(vec![d_inner], -1.0, 1.0),
    ]
}

/// Worst par-vs-seq relative difference over `cases` random instances.
pub fn scan_equivalence<T: Real>(cases: usize, max_len: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let len = rng.random_range(1..=max_len);
        let d_inner = rng.random_range(1..=6);
        let d_state = rng.random_range(1..=5);
        let [u, dl, a, b, c, d] = random_scan_case::<T>(&mut rng, len, d_inner, d_state);
        let seq = selective_scan_seq(&u, &dl, &a, &b, &c, &d)?;
        let par = selective_scan_par(&u, &dl, &a, &b, &c, &d)?;
        worst = worst.max(max_rel_diff(&par, &seq));
    }
    Ok(worst)
}

/// Plain exponential-gate recurrence without stabilizer, normalizer floor 1.
pub fn mlstm_naive(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], i_pre: &[f64], f_log: &[f64]) -> Vec<Vec<f64>> {
    let dh = q[0].len();
    let mut c = vec![0.0; dh * dh];
    let mut n = vec![0.0; dh];
    let mut out = Vec::with_capacity(q.len());
    for t in 0..q.len() {
        let (f, i) = (f_log[t].exp(), i_pre[t].exp());
        for r in 0..dh {
            for j in 0..dh {
                c[r * dh + j] = f * c[r * dh + j] + i * v[t][r] * k[t][j];
            }
        }
        for j in 0..dh {
            n[j] = f * n[j] + i * k[t][j];
        }
        let den = (0..dh).map(|j| n[j] * q[t][j]).sum::<f64>().abs().max(1.0);
        out.push((0..dh).map(|r| (0..dh).map(|j| c[r * dh + j] * q[t][j]).sum::<f64>() / den).collect());
    }
    out
}

/// Worst relative gap between the stabilized cell and [`mlstm_naive`] with
/// pre-activations in `[-gate, gate]`.
pub fn mlstm_naive_gap(cases: usize, gate: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let len = rng.random_range(1..=12);
        let dh = rng.random_range(1..=4);
        let mut vecs = |n| -> Vec<Vec<f64>> { (0..n).map(|_| (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
        let (q, k, v) = (vecs(len), vecs(len), vecs(len));
        let ig: Vec<f64> = (0..len).map(|_| rng.random_range(-gate..gate)).collect();
        // forget pre-activation through log-sigmoid, as in the block
        let fg: Vec<f64> = (0..len)
            .map(|_| {
                let x: f64 = rng.random_range(-gate..gate);
                -(1.0 + (-x).exp()).ln()
            })
            .collect();
        let want = mlstm_naive(&q, &k, &v, &ig, &fg);
        let mut st = MlstmState::zeros(dh);
        for t in 0..len {
            let (next, h) = mlstm_cell_step(&st, &q[t], &k[t], &v[t], ig[t], fg[t])?;
            st = next;
            let scale = want[t].iter().fold(1e-300f64, |m, x| m.max(x.abs()));
            for (a, b) in h.iter().zip(&want[t]) {
                worst = worst.max((a - b).abs() / scale);
            }
        }
    }
    Ok(worst)
}

/// Number of non-finite outputs of the stabilized cell with gates drawn
/// from `[-gate, gate]`.
pub fn mlstm_fuzz(cases: usize, gate: f64, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let dh = rng.random_range(1..=4);
        let mut st = MlstmState::zeros(dh);
        for _ in 0..rng.random_range(1..=8) {
            let mut vec = || -> Vec<f64> { (0..dh).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let (q, k, v) = (vec(), vec(), vec());
            let i = rng.random_range(-gate..gate);
            let f = -(1.0 + (-rng.random_range(-gate..gate)).exp()).ln();
            let (next, h) = mlstm_cell_step(&st, &q, &k, &v, i, f)?;
            if !next.is_finite() || h.iter().any(|x| !x.is_finite()) {
                bad += 1;
            }
            st = next;
        }
    }
    Ok(bad)
}

/// Relative STFT/ISTFT reconstruction error away from the edges.
pub fn stft_roundtrip_error(w: &Waveform) -> Result<f64> {
    let back = istft(&stft(w)?, w.len())?;
    let range = FRAME_LEN..w.len().saturating_sub(FRAME_LEN);
    let err: f64 = range.clone().map(|i| (back.samples()[i] - w.samples()[i]).powi(2)).sum();
    let pow: f64 = range.map(|i| w.samples()[i].powi(2)).sum();
    Ok((err / pow).sqrt())
}

/// Worst deviation from the two closed-form PSM identities: `M = 1` with no
/// noise and `M = cos(60°) = 0.5` at equal magnitudes.
pub fn psm_identity_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, b) = (4, 9);
    let clean: Vec<Complex64> = (0..f * b)
        .map(|_| Complex64::from_polar(rng.random_range(0.1..2.0), rng.random_range(-3.0..3.0)))
        .collect();
    let s = Spectrogram::new(f, b, clean.clone())?;
    let rotated = Spectrogram::new(f, b, clean.iter().map(|c| c * Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_3)).collect())?;
    let same = psm(&s, &s, false)?;
    let half = psm(&s, &rotated, false)?;
    let e1 = same.values().iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    let e2 = half.values().iter().map(|m| (m - 0.5).abs()).fold(0.0, f64::max);
    Ok(e1.max(e2))
}

fn outcome(name: impl Into<String>, start: Instant, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn measured(name: &str, start: Instant, r: Result<f64>, tol: f64) -> CheckOutcome {
    match r {
        Ok(v) => outcome(name, start, v < tol, format!("{v:.3e} (limit {tol:.0e})")),
        Err(e) => outcome(name, start, false, format!("error: {e}")),
    }
}

/// Runs every check. `quick` shrinks the random sweeps.
pub fn run_suite(quick: bool) -> Vec<CheckOutcome> {
    let reps = if quick { 1 } else { 4 };
    let mut out = Vec::new();
    let grad_cases = [
        (Backbone::Transformer, true, PeKind::Rotary),
        (Backbone::Transformer, false, PeKind::Sinusoidal),
        (Backbone::Conformer, true, PeKind::None),
        (Backbone::Conformer, false, PeKind::Rotary),
        (Backbone::Mamba, true, PeKind::None),
        (Backbone::BiMamba, false, PeKind::None),
        (Backbone::Xlstm, true, PeKind::None),
        (Backbone::CBixlstm, false, PeKind::None),
        (Backbone::PBixlstm, false, PeKind::None),
    ];
    for (backbone, causal, pe) in grad_cases {
        let cfg = tiny_config(backbone, causal, pe);
        let start = Instant::now();
        out.push(measured(&format!("grad-check {}", cfg.label()), start, model_grad_error(&cfg, 3, 5), 1e-3));
    }

    let start = Instant::now();
    out.push(measured("scan par == seq (64-bit)", start, scan_equivalence::<f64>(25 * reps, 257, 11), 1e-10));
    let start = Instant::now();
    out.push(measured("scan par == seq (32-bit)", start, scan_equivalence::<f32>(25 * reps, 257, 12), 1e-5));

    let causal_cases = [
        (Backbone::Transformer, PeKind::None),
        (Backbone::Transformer, PeKind::Sinusoidal),
        (Backbone::Transformer, PeKind::Rotary),
        (Backbone::Conformer, PeKind::None),
        (Backbone::Mamba, PeKind::None),
        (Backbone::Xlstm, PeKind::None),
    ];
    for (backbone, pe) in causal_cases {
        let cfg = tiny_config(backbone, true, pe);
        let start = Instant::now();
        let r = EnhancementModel::<f32>::build(&cfg, 5).and_then(|m| causality_violation(&m, 16, 5 * reps, 7));
        out.push(measured(&format!("causality {}", cfg.label()), start, r, 1e-5));
    }

    let start = Instant::now();
    let w = synth::tonal_speech(8_000, 2);
    out.push(measured("stft round trip", start, stft_roundtrip_error(&w), 1e-6));
    let start = Instant::now();
    out.push(measured("psm identities", start, psm_identity_error(4), 1e-12));

    let start = Instant::now();
    out.push(measured("mlstm stabilized == naive", start, mlstm_naive_gap(100 * reps, 5.0, 5), 1e-10));
    let start = Instant::now();
    let cases = 1000 * reps;
    out.push(match mlstm_fuzz(cases, 100.0, 6) {
        Ok(bad) => outcome(
            "mlstm extreme gates finite",
            start,
            bad == 0,
            format!("{bad} non-finite of {cases} sequences"),
        ),
        Err(e) => outcome("mlstm extreme gates finite", start, false, format!("error: {e}")),
    });

    let start = Instant::now();
    let peak = lr_at(40_000, 40_000, 256);
    let ok = (peak - 3.125e-4).abs() < 1e-15 && lr_at(39_999, 40_000, 256) < peak && lr_at(40_001, 40_000, 256) < peak;
    out.push(outcome("scheduler peak", start, ok, format!("lr(40000) = {peak:.6e}")));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{inject_backward_fault, Activation};

    #[test]
    fn quick_suite_passes() {
        let res = run_suite(true);
        for r in &res {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert!(res.len() > 15);
    }

    #[test]
    fn injected_fault_breaks_gradients() {
        let cfg = tiny_config(Backbone::Mamba, true, PeKind::None);
        inject_backward_fault(Some(Activation::Silu));
        let err = model_grad_error(&cfg, 3, 4);
        inject_backward_fault(None);
        assert!(err.unwrap() > 1e-2);
        assert!(model_grad_error(&cfg, 3, 4).unwrap() < 1e-3);
    }
}
