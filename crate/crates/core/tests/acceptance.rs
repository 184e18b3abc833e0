//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sebench_core::config::RunConfig;
use sebench_core::dsp::{mix_at_snr, mix_segment_at_snr, synth, Waveform};
use sebench_core::eval::{
    estoi, measure_rtf, measure_train_step, oracle_psm, score_items, snr_db, synthetic_eval_set, BenchConfig,
    ItemScore,
};
use sebench_core::model::{count_params, Backbone, EnhancementModel, ModelConfig};
use sebench_core::posenc::PeKind;
use sebench_core::training::{lr_at, smooth, Corpus, TrainConfig, Trainer};
use sebench_core::verify::{
    causality_violation, mlstm_fuzz, mlstm_naive_gap, model_grad_error, psm_identity_error, scan_equivalence,
    stft_roundtrip_error, tiny_config,
};

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn load(name: &str) -> ModelConfig {
    RunConfig::load(configs_dir().join(name)).expect("shipped config parses").model
}

fn param_counts() -> Outcome {
    let table: &[(&str, f64, f64)] = &[
        ("transformer4-causal.cfg", 3.29, 0.005),
        ("transformer4.cfg", 3.29, 0.005),
        ("transformer4-sinpe.cfg", 3.29, 0.005),
        ("transformer4-rope.cfg", 3.29, 0.005),
        ("conformer4-causal.cfg", 6.22, 0.05),
        ("conformer4.cfg", 6.22, 0.05),
        ("conformer4-sinpe.cfg", 6.22, 0.05),
        ("conformer4-rope.cfg", 6.22, 0.05),
        ("mamba5.cfg", 2.32, 0.05),
        ("mamba7.cfg", 3.20, 0.05),
        ("mamba13.cfg", 5.83, 0.05),
        ("xlstm5.cfg", 2.21, 0.05),
        ("xlstm7.cfg", 3.04, 0.05),
        ("xlstm14.cfg", 5.95, 0.05),
        ("bimamba3.cfg", 2.76, 0.05),
        ("bimamba4.cfg", 3.64, 0.05),
        ("bimamba7.cfg", 6.26, 0.05),
        ("c-bixlstm3.cfg", 2.63, 0.05),
        ("c-bixlstm4.cfg", 3.46, 0.05),
        ("c-bixlstm7.cfg", 5.95, 0.05),
        ("p-bixlstm3.cfg", 2.63, 0.05),
        ("p-bixlstm4.cfg", 3.46, 0.05),
        ("p-bixlstm7.cfg", 5.95, 0.05),
    ];
    let mut worst = (0.0f64, "");
    let mut ok = true;
    for &(file, millions, tol) in table {
        let n = count_params(&load(file)).expect("valid config") as f64 / 1e6;
        let rel = (n - millions).abs() / millions;
        ok &= rel <= tol;
        if rel > worst.0 {
            worst = (rel, file);
        }
    }
    (
        ok,
        format!("{} configs, worst relative gap {:.3}% ({})", table.len(), 100.0 * worst.0, worst.1),
    )
}

fn causality() -> Outcome {
    let files = [
        "transformer4-causal.cfg",
        "conformer4-causal.cfg",
        "mamba5.cfg",
        "mamba7.cfg",
        "mamba13.cfg",
        "xlstm5.cfg",
        "xlstm7.cfg",
        "xlstm14.cfg",
    ];
    let mut worst = 0.0f64;
    for (i, f) in files.iter().enumerate() {
        let cfg = load(f);
        assert!(cfg.causal);
        let m = EnhancementModel::<f32>::build(&cfg, 1).unwrap();
        worst = worst.max(causality_violation(&m, 24, 20, 100 + i as u64).unwrap());
    }
    (worst <= 1e-5, format!("{} models x 20 pairs, max change before t {worst:.2e}", files.len()))
}

fn scan_oracle() -> Outcome {
    let e32 = scan_equivalence::<f32>(200, 257, 31).unwrap();
    let e64 = scan_equivalence::<f64>(200, 257, 32).unwrap();
    (
        e32 <= 1e-5 && e64 <= 1e-10,
        format!("200 instances each: 32-bit {e32:.2e}, 64-bit {e64:.2e}"),
    )
}

fn mlstm() -> Outcome {
    let gap = mlstm_naive_gap(500, 5.0, 41).unwrap();
    let bad = mlstm_fuzz(10_000, 100.0, 42).unwrap();
    (
        gap <= 1e-10 && bad == 0,
        format!("naive gap {gap:.2e} at |gate| <= 5; {bad} non-finite in 10000 cases at |gate| <= 100"),
    )
}

fn grad_checks() -> Outcome {
    let cases = [
        (Backbone::Transformer, true, PeKind::None),
        (Backbone::Transformer, false, PeKind::Sinusoidal),
        (Backbone::Transformer, false, PeKind::Rotary),
        (Backbone::Conformer, true, PeKind::None),
        (Backbone::Conformer, false, PeKind::Rotary),
        (Backbone::Mamba, true, PeKind::None),
        (Backbone::BiMamba, false, PeKind::None),
        (Backbone::Xlstm, true, PeKind::None),
        (Backbone::CBixlstm, false, PeKind::None),
        (Backbone::PBixlstm, false, PeKind::None),
    ];
    let mut worst = (0.0f64, String::new());
    for (b, causal, pe) in cases {
        let cfg = tiny_config(b, causal, pe);
        let e = model_grad_error(&cfg, 7, 5).unwrap();
        if e >= worst.0 {
            worst = (e, cfg.label());
        }
    }
    (
        worst.0 < 1e-3,
        format!("{} block setups, worst relative error {:.2e} ({})", cases.len(), worst.0, worst.1),
    )
}

fn dsp() -> Outcome {
    let w = synth::tonal_speech(16_000, 5);
    let rt = stft_roundtrip_error(&w).unwrap();
    let id = psm_identity_error(6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = synth::filtered_noise(40_000, 8);
    let mut snr_gap = 0.0f64;
    for label in -10..=20 {
        let m = mix_at_snr(&w, &noise, label as f64, &mut rng).unwrap();
        snr_gap = snr_gap.max((snr_db(&w, &m.mixture).unwrap() - label as f64).abs());
    }
    (
        rt < 1e-6 && id < 1e-12 && snr_gap < 1e-6,
        format!("round trip {rt:.2e}, mask identities {id:.2e}, mixing SNR gap {snr_gap:.2e} dB"),
    )
}

fn scheduler() -> Outcome {
    let (w, d) = (40_000u64, 256usize);
    let peak = lr_at(w, w, d);
    let want = (w as f64).powf(-0.5) * (d as f64).powf(-0.5);
    let up = (1..w).all(|n| lr_at(n, w, d) < lr_at(n + 1, w, d));
    let down = (w..3 * w).all(|n| lr_at(n + 1, w, d) < lr_at(n, w, d));
    (
        peak == want && (peak - 3.125e-4).abs() < 1e-18 && up && down,
        format!("peak {peak:.6e} at step {w}, rising before: {up}, falling after: {down}"),
    )
}

fn toy_training() -> Outcome {
    let items: Vec<_> = synthetic_eval_set(4, 2.0, 777)
        .unwrap()
        .into_iter()
        .filter(|i| i.snr_db == 0)
        .collect();
    let mean = |v: &[ItemScore]| v.iter().map(|s| s.snr_enhanced - s.snr_noisy).sum::<f64>() / v.len() as f64;
    let oracle = mean(&score_items(&items, oracle_psm, None).unwrap());
    let mut ok = true;
    let mut parts = Vec::new();
    for b in [Backbone::Transformer, Backbone::Conformer, Backbone::Mamba, Backbone::Xlstm] {
        let start = Instant::now();
        let cfg = ModelConfig {
            d_model: 32,
            d_ff: 128,
            heads: 4,
            ..ModelConfig::new(b, 2)
        };
        let mut tc = TrainConfig::new(1);
        tc.batch_size = 4;
        tc.epochs = 1;
        tc.steps_per_epoch = 600;
        tc.warmup = 400;
        tc.clip_secs = 1.0;
        tc.corpus = Corpus::Synthetic {
            speech: 32,
            noise: 8,
            secs: 3.0,
        };
        let model = EnhancementModel::<f32>::build(&cfg, 1).unwrap();
        let mut tr = Trainer::new(model, tc).unwrap();
        let losses: Vec<f64> = (0..600).map(|_| tr.step().unwrap().loss).collect();
        let first = losses[..20].iter().sum::<f64>() / 20.0;
        let last = *smooth(&losses, 0.95).last().unwrap();
        let ratio = last / first;
        let model = &tr.model;
        let snri = mean(&score_items(&items, |it| model.enhance(&it.mixture), None).unwrap());
        let pass = ratio <= 0.5 && snri >= 3.0 && oracle >= snri;
        ok &= pass;
        parts.push(format!(
            "{} loss x{ratio:.2}, SNRi {snri:.2} dB ({:.0}s)",
            b.title(),
            start.elapsed().as_secs_f64()
        ));
    }
    (ok, format!("{}; oracle SNRi {oracle:.2} dB", parts.join("; ")))
}

fn throughput() -> Outcome {
    let bench = BenchConfig {
        lengths: vec![10.0, 40.0],
        batch: 1,
        runs: 2,
        warmup_runs: 1,
        include_stft: false,
    };
    let growth = |file: &str| -> f64 {
        let m = EnhancementModel::<f32>::build(&load(file), 0).unwrap();
        measure_rtf(&m, 40.0, &bench).unwrap().mean() / measure_rtf(&m, 10.0, &bench).unwrap().mean()
    };
    let (ga, gm) = (growth("transformer4.cfg"), growth("bimamba4.cfg"));
    let step = |file: &str| -> f64 {
        let m = EnhancementModel::<f32>::build(&load(file), 0).unwrap();
        let mut tc = TrainConfig::new(1);
        tc.batch_size = 2;
        tc.clip_secs = 2.0;
        tc.corpus = Corpus::Synthetic {
            speech: 4,
            noise: 2,
            secs: 3.0,
        };
        let mut tr = Trainer::new(m, tc).unwrap();
        measure_train_step(&mut tr, 1, 3, true).unwrap().mean()
    };
    let (sx, sm) = (step("c-bixlstm4.cfg"), step("bimamba4.cfg"));
    (
        ga / gm >= 1.5 && sx > sm,
        format!(
            "RTF growth 10s->40s: Transformer-4 {ga:.2}, BiMamba-4 {gm:.2} (ratio {:.2}); sec/step C-BixLSTM-4 {sx:.3} vs BiMamba-4 {sm:.3}",
            ga / gm
        ),
    )
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn estoi_sanity() -> Outcome {
    let x = synth::tonal_speech(48_000, 9);
    let noise = synth::filtered_noise(48_000, 10);
    let self_err = (estoi(&x, &x).unwrap() - 1.0).abs();
    let snrs: Vec<f64> = (-10..=20).map(f64::from).collect();
    let scores: Vec<f64> = snrs
        .iter()
        .map(|&s| estoi(&x, &mix_segment_at_snr(&x, noise.samples(), s).unwrap().mixture).unwrap())
        .collect();
    let rho = pearson(&ranks(&snrs), &ranks(&scores));
    let y = mix_segment_at_snr(&x, noise.samples(), 0.0).unwrap().mixture;
    let base = estoi(&x, &y).unwrap();
    let scale = |w: &Waveform, g: f64| Waveform::from_samples(w.samples().iter().map(|v| v * g).collect()).unwrap();
    let scale_err = (estoi(&scale(&x, 5.0), &y).unwrap() - base)
        .abs()
        .max((estoi(&x, &scale(&y, 0.02)).unwrap() - base).abs());
    (
        self_err <= 1e-9 && rho > 0.95 && scale_err <= 1e-9,
        format!("self {self_err:.1e}, Spearman {rho:.4} over -10..20 dB, scale change {scale_err:.1e}"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("parameter counts", param_counts),
        ("causality", causality),
        ("scan oracle", scan_oracle),
        ("mlstm stabilization", mlstm),
        ("gradient checks", grad_checks),
        ("dsp", dsp),
        ("scheduler", scheduler),
        ("toy training", toy_training),
        ("throughput trends", throughput),
        ("estoi sanity", estoi_sanity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = run();
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {:<20} {}  {detail} [{:.1}s]",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
