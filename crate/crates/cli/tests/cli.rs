use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sebench_core::dsp::{read_wav, synth, write_wav, NUM_BINS};
use sebench_core::eval::BenchLock;
use sebench_core::model::{EnhancementModel, ModelConfig};
use sebench_core::Tensor;

fn sebench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sebench")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cfg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

const TINY_TRAIN: &str = "seed = 3
backbone = transformer
blocks = 1
d_model = 16
d_ff = 32
heads = 2
batch_size = 2
epochs = 2
steps_per_epoch = 3
warmup = 10
clip_secs = 0.5
synth_speech = 3
synth_noise = 2
synth_secs = 1.0
";

#[test]
fn params_prints_reference_format() {
    let o = sebench(&["params", "--config", &cfg("transformer4-causal.cfg")]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "3.29M (3,291,651)");
}

#[test]
fn every_shipped_config_is_near_its_table_count() {
    let table: &[(&str, f64, f64)] = &[
        ("transformer4-causal", 3.29, 0.005),
        ("transformer4", 3.29, 0.005),
        ("transformer4-sinpe", 3.29, 0.005),
        ("transformer4-rope", 3.29, 0.005),
        ("conformer4-causal", 6.22, 0.05),
        ("conformer4", 6.22, 0.05),
        ("conformer4-sinpe", 6.22, 0.05),
        ("conformer4-rope", 6.22, 0.05),
        ("mamba5", 2.32, 0.05),
        ("mamba7", 3.20, 0.05),
        ("mamba13", 5.83, 0.05),
        ("xlstm5", 2.21, 0.05),
        ("xlstm7", 3.04, 0.05),
        ("xlstm14", 5.95, 0.05),
        ("bimamba3", 2.76, 0.05),
        ("bimamba4", 3.64, 0.05),
        ("bimamba7", 6.26, 0.05),
        ("c-bixlstm3", 2.63, 0.05),
        ("c-bixlstm4", 3.46, 0.05),
        ("c-bixlstm7", 5.95, 0.05),
        ("p-bixlstm3", 2.63, 0.05),
        ("p-bixlstm4", 3.46, 0.05),
        ("p-bixlstm7", 5.95, 0.05),
    ];
    for &(name, millions, tol) in table {
        let o = sebench(&["params", "--config", &cfg(&format!("{name}.cfg"))]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let out = stdout(&o);
        let exact: f64 = out
            .split(['(', ')'])
            .nth(1)
            .unwrap()
            .replace(',', "")
            .parse()
            .unwrap();
        let rel = (exact / 1e6 - millions).abs() / millions;
        assert!(rel <= tol, "{name}: {out} vs {millions}M");
    }
}

#[test]
fn malformed_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.cfg");
    fs::write(&p, "backbone = mamba\nblocks = 2\nd_modle = 3\n").unwrap();
    let o = sebench(&["params", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("d_modle"), "{}", stderr(&o));
}

#[test]
fn training_is_reproducible_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("tiny.cfg");
    fs::write(&c, TINY_TRAIN).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = sebench(&["train", "--config", c.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let log = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(log, fs::read_to_string(b.join("loss.csv")).unwrap());
    assert_eq!(log.lines().count(), 7);
    let echoed = fs::read_to_string(a.join("run.cfg")).unwrap();
    assert!(echoed.contains("d_model = 16") && echoed.contains("d_state = 16"));
    assert!(a.join("checkpoint/model.tensors").exists());

    // the resolved config reproduces the run on its own
    let again = dir.path().join("c");
    let o = sebench(&["train", "--config", a.join("run.cfg").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(log, fs::read_to_string(again.join("loss.csv")).unwrap());
}

#[test]
fn missing_corpus_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("m.cfg");
    fs::write(&c, "backbone = mamba\nblocks = 1\ncorpus = nowhere/list.txt\n").unwrap();
    let o = sebench(&["train", "--config", c.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

/// Saves a model whose mask is one everywhere.
fn identity_checkpoint(dir: &Path) {
    let cfg = ModelConfig {
        d_model: 16,
        d_ff: 32,
        heads: 2,
        input_bins: NUM_BINS,
        ..ModelConfig::from_name("Mamba-1").unwrap()
    };
    let mut m = EnhancementModel::<f32>::build(&cfg, 0).unwrap();
    let (w, b) = (m.output_weight(), m.output_bias());
    let shape = m.params().get(w).shape().to_vec();
    *m.params_mut().get_mut(w) = Tensor::zeros(shape);
    *m.params_mut().get_mut(b) = Tensor::full(vec![NUM_BINS], 40.0);
    m.save(dir, 0).unwrap();
}

#[test]
fn enhance_single_and_glob() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    identity_checkpoint(&ck);
    let inputs = dir.path().join("in");
    fs::create_dir_all(&inputs).unwrap();
    for i in 0..3 {
        write_wav(inputs.join(format!("x{i}.wav")), &synth::tonal_speech(8000 + 500 * i, i as u64)).unwrap();
    }

    let single = dir.path().join("one.wav");
    let o = sebench(&[
        "enhance",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--in",
        inputs.join("x0.wav").to_str().unwrap(),
        "--out",
        single.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (x, y) = (read_wav(inputs.join("x0.wav")).unwrap(), read_wav(&single).unwrap());
    assert_eq!((x.len(), x.sample_rate()), (y.len(), y.sample_rate()));
    let interior = 512..x.len() - 512;
    let err: f64 = interior.clone().map(|i| (x.samples()[i] - y.samples()[i]).powi(2)).sum();
    let pow: f64 = interior.map(|i| x.samples()[i].powi(2)).sum();
    // 16-bit output quantization dominates
    assert!(err / pow < 1e-6, "{}", err / pow);

    let out = dir.path().join("many");
    let pattern = format!("{}/*.wav", inputs.display());
    let o = sebench(&["enhance", "--checkpoint", ck.to_str().unwrap(), "--in", &pattern, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..3 {
        let y = read_wav(out.join(format!("x{i}.wav"))).unwrap();
        assert_eq!(y.len(), 8000 + 500 * i);
    }
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = sebench(&[
        "enhance",
        "--checkpoint",
        dir.path().join("none").to_str().unwrap(),
        "--in",
        "x.wav",
        "--out",
        "y.wav",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_rows_and_lock() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    identity_checkpoint(&ck);
    let lock = dir.path().join("bench.lock");
    let csv = dir.path().join("r.csv");
    let args = [
        "bench",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--lengths",
        "0.5,1,2",
        "--runs",
        "2",
        "--warmup",
        "0",
        "--batch",
        "1",
        "--lock",
        lock.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ];
    let o = sebench(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,params,sec_per_step,length_s,rtf,rtf_cv,batch,runs");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(4).unwrap().parse::<f64>().unwrap() > 0.0));

    let held = BenchLock::acquire(&lock).unwrap();
    let o = sebench(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("another benchmark"), "{}", stderr(&o));
    drop(held);
}

#[test]
fn assert_trends_needs_comparable_models() {
    let o = sebench(&[
        "bench",
        "--config",
        &cfg("toy.cfg"),
        "--lengths",
        "0.5,1",
        "--runs",
        "1",
        "--warmup",
        "0",
        "--batch",
        "1",
        "--assert-trends",
        "--lock",
        tempfile::tempdir().unwrap().path().join("l").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_passes_and_negative_control_fails() {
    let o = sebench(&["verify", "--quick"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let o = sebench(&["verify", "--quick", "--inject-fault", "sigmoid"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL grad-check")));
}

#[test]
fn score_identity_matches_noisy_and_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = sebench(&["score", "--identity", "--synthetic", "1", "--secs", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("metric,-5,0,5,10,15,avg\n"));
    let row = |name: &str| -> Vec<f64> {
        text.lines()
            .find(|l| l.starts_with(&format!("{name},")))
            .unwrap()
            .split(',')
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect()
    };
    for (a, b) in row("estoi_noisy").iter().zip(row("estoi_enhanced")) {
        assert!((a - b).abs() < 1e-3);
    }
    assert!(dir.path().join("s.csv.run.cfg").exists());
}

#[test]
fn score_from_written_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let o = sebench(&["synth-corpus", "--out", corpus.to_str().unwrap(), "--speech", "2", "--noise", "1", "--secs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = sebench(&["score", "--oracle", "--manifest", corpus.join("eval.txt").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("5 mixtures"));
}
