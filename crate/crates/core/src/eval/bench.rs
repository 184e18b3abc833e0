//! Throughput harness: training seconds per step and real-time factor.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::KvMap;
use crate::dsp::{synth, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::EnhancementModel;
use crate::par;
use crate::tensor::{Real, Tensor};
use crate::training::{magnitude_tensor, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Test lengths in seconds.
    pub lengths: Vec<f64>,
    pub batch: usize,
    pub runs: usize,
    pub warmup_runs: usize,
    /// Include STFT and inverse STFT in RTF timing.
    pub include_stft: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![10.0, 20.0, 40.0],
            batch: 4,
            runs: 20,
            warmup_runs: 3,
            include_stft: false,
        }
    }
}

pub fn parse_lengths(s: &str) -> Result<Vec<f64>> {
    let out: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad length list `{s}`: {e}")))?;
    if out.is_empty() || out.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Config(format!("lengths must be positive, got `{s}`")));
    }
    Ok(out)
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.runs == 0 {
            return Err(Error::Config("bench_batch and bench_runs must be at least 1".into()));
        }
        if self.lengths.is_empty() || self.lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("bench_lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            lengths: match kv.take_str("bench_lengths") {
                Some(s) => parse_lengths(&s)?,
                None => d.lengths,
            },
            batch: kv.take("bench_batch", d.batch)?,
            runs: kv.take("bench_runs", d.runs)?,
            warmup_runs: kv.take("bench_warmup", d.warmup_runs)?,
            include_stft: kv.take("bench_include_stft", d.include_stft)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let lengths: Vec<String> = self.lengths.iter().map(f64::to_string).collect();
        format!(
            "bench_lengths = {}\nbench_batch = {}\nbench_runs = {}\nbench_warmup = {}\nbench_include_stft = {}\n",
            lengths.join(","),
            self.batch,
            self.runs,
            self.warmup_runs,
            self.include_stft
        )
    }
}

/// Mean and spread of repeated timings.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub samples: Vec<f64>,
}

impl Timing {
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len().max(1) as f64
    }

    /// Coefficient of variation (sample standard deviation over mean).
    pub fn cv(&self) -> f64 {
        let n = self.samples.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        let var = self.samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt() / m
    }
}

/// Deterministic synthetic noisy inputs of `secs` seconds.
pub fn bench_inputs(secs: f64, batch: usize) -> Vec<Waveform> {
    let n = (secs * SAMPLE_RATE as f64).round() as usize;
    (0..batch)
        .map(|i| {
            let s = synth::tonal_speech(n, 1000 + i as u64);
            let d = synth::filtered_noise(n, 2000 + i as u64);
            let mix = s.samples().iter().zip(d.samples()).map(|(a, b)| a + 0.3 * b).collect();
            Waveform::from_samples(mix).expect("finite input")
        })
        .collect()
}

/// Enhances a batch, utterances in parallel. Returns the output count so the
/// work cannot be optimized away.
pub fn enhance_batch<T: Real>(model: &EnhancementModel<T>, inputs: &[Waveform]) -> Result<usize> {
    par::map_slice(inputs, |w| model.enhance(w).map(|o| o.len()))
        .into_iter()
        .sum()
}

fn forward_batch<T: Real>(model: &EnhancementModel<T>, mags: &[Tensor<T>]) -> Result<usize> {
    par::map_slice(mags, |m| model.forward(m).map(|o| o.numel()))
        .into_iter()
        .sum()
}

/// Real-time factor: wall time of one batch over its total audio duration,
/// one sample per run after the warm-up runs.
pub fn measure_rtf<T: Real>(model: &EnhancementModel<T>, secs: f64, cfg: &BenchConfig) -> Result<Timing> {
    cfg.validate()?;
    let inputs = bench_inputs(secs, cfg.batch);
    let audio = secs * cfg.batch as f64;
    let mags: Vec<Tensor<T>> = inputs
        .iter()
        .map(|w| crate::dsp::stft(w).map(|s| magnitude_tensor(&s)))
        .collect::<Result<_>>()?;
    let run = || -> Result<f64> {
        let start = Instant::now();
        if cfg.include_stft {
            enhance_batch(model, &inputs)?;
        } else {
            forward_batch(model, &mags)?;
        }
        Ok(start.elapsed().as_secs_f64() / audio)
    };
    for _ in 0..cfg.warmup_runs {
        run()?;
    }
    let samples = (0..cfg.runs).map(|_| run()).collect::<Result<_>>()?;
    Ok(Timing { samples })
}

/// Seconds per optimizer step. With `exclude_data` each batch is drawn
/// before its timer starts.
pub fn measure_train_step<T: Real>(
    trainer: &mut Trainer<T>,
    warmup: usize,
    steps: usize,
    exclude_data: bool,
) -> Result<Timing> {
    let one = |trainer: &mut Trainer<T>| -> Result<f64> {
        if exclude_data {
            let batch = trainer.next_batch()?;
            let start = Instant::now();
            trainer.step_on(&batch)?;
            Ok(start.elapsed().as_secs_f64())
        } else {
            let start = Instant::now();
            trainer.step()?;
            Ok(start.elapsed().as_secs_f64())
        }
    };
    for _ in 0..warmup {
        one(trainer)?;
    }
    let samples = (0..steps.max(1)).map(|_| one(trainer)).collect::<Result<_>>()?;
    Ok(Timing { samples })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtfRow {
    pub secs: f64,
    pub rtf: f64,
    pub cv: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub model: String,
    pub params: usize,
    pub sec_per_step: Option<f64>,
    pub rtf: Vec<RtfRow>,
    pub batch: usize,
    pub runs: usize,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "model,params,sec_per_step,length_s,rtf,rtf_cv,batch,runs";

    /// One CSV row per test length, without header.
    pub fn csv_rows(&self) -> String {
        let sps = self.sec_per_step.map(|v| format!("{v:.6}")).unwrap_or_default();
        self.rtf
            .iter()
            .map(|r| {
                format!(
                    "{},{},{sps},{},{:.6},{:.4},{},{}\n",
                    self.model, self.params, r.secs, r.rtf, r.cv, self.batch, self.runs
                )
            })
            .collect()
    }

    /// `RTF(long) / RTF(short)`.
    pub fn growth(&self, short: f64, long: f64) -> Option<f64> {
        let at = |s: f64| self.rtf.iter().find(|r| (r.secs - s).abs() < 1e-9).map(|r| r.rtf);
        Some(at(long)? / at(short)?)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{} ({} params)\n", self.model, self.params);
        if let Some(s) = self.sec_per_step {
            out.push_str(&format!("  sec/step {s:.4}\n"));
        }
        for r in &self.rtf {
            out.push_str(&format!("  {:>5}s  RTF {:.4}  cv {:.1}%\n", r.secs, r.rtf, 100.0 * r.cv));
        }
        out
    }
}

/// Exclusive advisory lock held for the duration of a benchmark.
#[derive(Debug)]
pub struct BenchLock {
    _file: File,
    pub path: PathBuf,
}

impl BenchLock {
    pub fn acquire(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path)?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file, path }),
            Err(std::fs::TryLockError::WouldBlock) => Err(Error::Contract(format!(
                "another benchmark holds {}; timing runs must not overlap",
                path.display()
            ))),
            Err(std::fs::TryLockError::Error(e)) => Err(e.into()),
        }
    }
}

/// Default lock location shared by every benchmark process.
pub fn default_lock_path() -> PathBuf {
    std::env::temp_dir().join("sebench.lock")
}
