//! Dynamic-mixing data pipeline, mask objective, warm-up schedule, Adam and
//! the training loop with checkpoints.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::{resolve_path, KvMap};
use crate::dsp::{mix_at_snr, psm, read_wav, stft, synth, Mask, Spectrogram, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::EnhancementModel;
use crate::params::ParamStore;
use crate::tensor::{archive, Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    /// MSE between the predicted mask and the clamped PSM target.
    #[default]
    Mask,
    /// MSE between `M·|X|` and the phase-sensitive target spectrum
    /// `|S|·cos(∠S − ∠X)`.
    Spectrum,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(LossKind::Mask),
            "spectrum" => Ok(LossKind::Spectrum),
            other => Err(Error::Config(format!("unknown loss `{other}` (mask|spectrum)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mask => "mask",
            LossKind::Spectrum => "spectrum",
        })
    }
}

/// Where training audio comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Corpus {
    /// Text file of `<wav path> speech|noise` lines.
    Manifest(PathBuf),
    /// Generated tonal speech and filtered noise.
    Synthetic { speech: usize, noise: usize, secs: f64 },
}

impl Corpus {
    pub fn resolve(&self, base: &Path) -> Corpus {
        match self {
            Corpus::Manifest(p) => Corpus::Manifest(resolve_path(base, p)),
            other => other.clone(),
        }
    }

    /// Reads or generates every recording. `seed` only affects synthesis.
    pub fn load(&self, seed: u64) -> Result<LoadedCorpus> {
        match self {
            Corpus::Manifest(path) => LoadedCorpus::from_manifest(path),
            Corpus::Synthetic { speech, noise, secs } => Ok(LoadedCorpus::synthetic(*speech, *noise, *secs, seed)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub speech: Vec<Waveform>,
    pub noise: Vec<Waveform>,
}

impl LoadedCorpus {
    pub fn synthetic(speech: usize, noise: usize, secs: f64, seed: u64) -> Self {
        let n = (secs * SAMPLE_RATE as f64).round() as usize;
        Self {
            speech: (0..speech).map(|i| synth::tonal_speech(n, seed.wrapping_add(i as u64))).collect(),
            noise: (0..noise)
                .map(|i| synth::filtered_noise(2 * n, seed.wrapping_add(1_000_003 + i as u64)))
                .collect(),
        }
    }

    /// Paths are relative to the manifest's directory; `#` starts a comment.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read corpus manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = Self {
            speech: Vec::new(),
            noise: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (file, role) = line
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| Error::Data(format!("{}:{}: expected `<path> <role>`", path.display(), i + 1)))?;
            let wav = read_wav(resolve_path(base, Path::new(file.trim())))?;
            match role {
                "speech" => out.speech.push(wav),
                "noise" => out.noise.push(wav),
                other => {
                    return Err(Error::Data(format!(
                        "{}:{}: role must be speech or noise, got `{other}`",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub snr_min: i32,
    pub snr_max: i32,
    pub warmup: u64,
    /// Gradients are clamped to `[-clip, clip]`.
    pub clip: f64,
    pub loss: LossKind,
    pub corpus: Corpus,
    pub data_seed: u64,
    /// Training clip length in seconds; 0 keeps whole utterances.
    pub clip_secs: f64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            batch_size: 10,
            epochs: 1,
            steps_per_epoch: 100,
            snr_min: -10,
            snr_max: 20,
            warmup: 400,
            clip: 1.0,
            loss: LossKind::Mask,
            corpus: Corpus::Synthetic {
                speech: 32,
                noise: 8,
                secs: 4.0,
            },
            data_seed: seed,
            clip_secs: 2.0,
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.warmup == 0 {
            return bad("warmup must be at least 1");
        }
        if self.snr_min > self.snr_max {
            return bad("snr_min must not exceed snr_max");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.clip_secs >= 0.0) {
            return bad("clip_secs must be non-negative");
        }
        if let Corpus::Synthetic { speech, noise, secs } = self.corpus {
            if speech == 0 || noise == 0 || !(secs > 0.0) {
                return bad("synthetic corpus needs positive synth_speech, synth_noise and synth_secs");
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvMap, seed: u64) -> Result<Self> {
        let d = Self::new(seed);
        let (ds, dn, dsecs) = match d.corpus {
            Corpus::Synthetic { speech, noise, secs } => (speech, noise, secs),
            Corpus::Manifest(_) => unreachable!(),
        };
        let corpus_key = kv.take_str("corpus").unwrap_or_else(|| "synthetic".into());
        let synth = Corpus::Synthetic {
            speech: kv.take("synth_speech", ds)?,
            noise: kv.take("synth_noise", dn)?,
            secs: kv.take("synth_secs", dsecs)?,
        };
        let cfg = Self {
            batch_size: kv.take("batch_size", d.batch_size)?,
            epochs: kv.take("epochs", d.epochs)?,
            steps_per_epoch: kv.take("steps_per_epoch", d.steps_per_epoch)?,
            snr_min: kv.take("snr_min", d.snr_min)?,
            snr_max: kv.take("snr_max", d.snr_max)?,
            warmup: kv.take("warmup", d.warmup)?,
            clip: kv.take("clip", d.clip)?,
            loss: kv.take("loss", d.loss)?,
            corpus: if corpus_key == "synthetic" {
                synth
            } else {
                Corpus::Manifest(PathBuf::from(corpus_key))
            },
            data_seed: kv.take("data_seed", seed)?,
            clip_secs: kv.take("clip_secs", d.clip_secs)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let corpus = match &self.corpus {
            Corpus::Manifest(p) => format!("corpus = {}\n", p.display()),
            Corpus::Synthetic { speech, noise, secs } => {
                format!("corpus = synthetic\nsynth_speech = {speech}\nsynth_noise = {noise}\nsynth_secs = {secs}\n")
            }
        };
        format!(
            "batch_size = {}\nepochs = {}\nsteps_per_epoch = {}\nsnr_min = {}\nsnr_max = {}\nwarmup = {}\nclip = {}\nloss = {}\n{corpus}data_seed = {}\nclip_secs = {}\n",
            self.batch_size,
            self.epochs,
            self.steps_per_epoch,
            self.snr_min,
            self.snr_max,
            self.warmup,
            self.clip,
            self.loss,
            self.data_seed,
            self.clip_secs
        )
    }
}

/// One generated training pair.
#[derive(Clone, Debug)]
pub struct Example {
    pub noisy: Spectrogram,
    pub clean: Spectrogram,
    /// Clamped PSM of the pair.
    pub target: Mask,
    pub snr_db: i32,
    /// Time-domain mixture, kept for scoring.
    pub mixture: Waveform,
    pub speech: Waveform,
}

/// Mixes one speech clip with a random noise segment at a drawn SNR.
pub fn sample_example<R: Rng + ?Sized>(rng: &mut R, corpus: &LoadedCorpus, cfg: &TrainConfig) -> Result<Example> {
    if corpus.speech.is_empty() || corpus.noise.is_empty() {
        return Err(Error::Data(format!(
            "corpus needs speech and noise, has {} speech and {} noise recordings",
            corpus.speech.len(),
            corpus.noise.len()
        )));
    }
    let speech = &corpus.speech[rng.random_range(0..corpus.speech.len())];
    let noise = &corpus.noise[rng.random_range(0..corpus.noise.len())];
    let snr = rng.random_range(cfg.snr_min..=cfg.snr_max);
    let mut len = speech.len().min(noise.len());
    if cfg.clip_secs > 0.0 {
        len = len.min((cfg.clip_secs * SAMPLE_RATE as f64).round() as usize);
    }
    if len == 0 {
        return Err(Error::Data("empty recording in corpus".into()));
    }
    let start = rng.random_range(0..=speech.len() - len);
    let clip = Waveform::new(speech.samples()[start..start + len].to_vec(), speech.sample_rate())?;
    let mix = mix_at_snr(&clip, noise, snr as f64, rng)?;
    let noisy = stft(&mix.mixture)?;
    let clean = stft(&clip)?;
    let target = psm(&clean, &noisy, true)?;
    Ok(Example {
        noisy,
        clean,
        target,
        snr_db: snr,
        mixture: mix.mixture,
        speech: clip,
    })
}

pub fn sample_batch<R: Rng + ?Sized>(rng: &mut R, corpus: &LoadedCorpus, cfg: &TrainConfig) -> Result<Vec<Example>> {
    (0..cfg.batch_size).map(|_| sample_example(rng, corpus, cfg)).collect()
}

/// Mean of `(pred − target)²` over all bins.
pub fn psm_mse_loss(pred: &Mask, target: &Mask) -> Result<f64> {
    if pred.frames() != target.frames() || pred.bins() != target.bins() {
        return Err(Error::Dimension(format!(
            "loss shapes differ: {}x{} vs {}x{}",
            pred.frames(),
            pred.bins(),
            target.frames(),
            target.bins()
        )));
    }
    let n = pred.values().len().max(1) as f64;
    Ok(pred.values().iter().zip(target.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

fn to_tensor<T: Real>(frames: usize, bins: usize, v: impl Iterator<Item = f64>) -> Tensor<T> {
    Tensor::from_vec(vec![frames, bins], v.map(T::from_f64).collect())
}

/// Model input magnitudes as a tensor.
pub fn magnitude_tensor<T: Real>(spec: &Spectrogram) -> Tensor<T> {
    to_tensor(spec.frames(), spec.bins(), spec.magnitude().into_iter())
}

/// Sum of squared errors of one example divided by `denom`, differentiable in `pred`.
pub fn example_loss<T: Real>(pred: &Var<T>, ex: &Example, kind: LossKind, denom: f64) -> Result<Var<T>> {
    let (f, b) = (ex.noisy.frames(), ex.noisy.bins());
    let diff = match kind {
        LossKind::Mask => pred.sub(&Var::constant(to_tensor(f, b, ex.target.values().iter().copied())))?,
        LossKind::Spectrum => {
            let mag = Var::constant(magnitude_tensor(&ex.noisy));
            let target = ex.clean.values().iter().zip(ex.noisy.values()).map(|(s, x)| {
                let m = x.norm();
                if m > 0.0 {
                    (s * x.conj()).re / m
                } else {
                    0.0
                }
            });
            pred.mul(&mag)?.sub(&Var::constant(to_tensor(f, b, target)))?
        }
    };
    Ok(diff.square().sum().scale(T::from_f64(1.0 / denom)))
}

/// Warm-up schedule position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulerState {
    pub step_n: u64,
    pub step_w: u64,
    pub d_model: usize,
}

impl SchedulerState {
    pub fn lr(&self) -> f64 {
        lr_at(self.step_n, self.step_w, self.d_model)
    }
}

/// `min(n^-0.5, n·w^-1.5)·d^-0.5`; zero at step 0.
pub fn lr_at(step_n: u64, step_w: u64, d_model: usize) -> f64 {
    if step_n == 0 {
        return 0.0;
    }
    let n = step_n as f64;
    let w = step_w.max(1) as f64;
    (n.powf(-0.5)).min(n * w.powf(-1.5)) * (d_model as f64).powf(-0.5)
}

/// Elementwise clamp to `[lo, hi]`; returns the largest magnitude seen before clipping.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], lo: f64, hi: f64) -> f64 {
    let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
    let mut peak = 0.0f64;
    for g in grads {
        for v in g.data_mut() {
            peak = peak.max(v.to_f64().abs());
            *v = if *v < lo {
                lo
            } else if *v > hi {
                hi
            } else {
                *v
            };
        }
    }
    peak
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!("adam: param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gf = gv.to_f64();
            let mf = ADAM_BETA1 * mv.to_f64() + (1.0 - ADAM_BETA1) * gf;
            let vf = ADAM_BETA2 * vv.to_f64() + (1.0 - ADAM_BETA2) * gf * gf;
            *mv = T::from_f64(mf);
            *vv = T::from_f64(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + ADAM_EPS);
            *pv = T::from_f64(pv.to_f64() - update);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Largest gradient magnitude before clipping.
    pub grad_peak: f64,
}

/// Owns a model, its optimizer and the data stream.
pub struct Trainer<T: Real = f32> {
    pub model: EnhancementModel<T>,
    pub cfg: TrainConfig,
    pub adam: AdamState<T>,
    pub step: u64,
    rng: ChaCha8Rng,
    corpus: LoadedCorpus,
}

const CKPT_ADAM: &str = "adam.tensors";
const CKPT_STATE: &str = "state.txt";

impl<T: Real> Trainer<T> {
    pub fn new(model: EnhancementModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = cfg.corpus.load(cfg.data_seed)?;
        Self::with_corpus(model, cfg, corpus)
    }

    pub fn with_corpus(model: EnhancementModel<T>, cfg: TrainConfig, corpus: LoadedCorpus) -> Result<Self> {
        if corpus.speech.is_empty() || corpus.noise.is_empty() {
            return Err(Error::Data("training corpus has no speech or no noise recordings".into()));
        }
        Ok(Self {
            adam: AdamState::new(model.params().values()),
            rng: ChaCha8Rng::seed_from_u64(cfg.data_seed),
            model,
            cfg,
            step: 0,
            corpus,
        })
    }

    pub fn corpus(&self) -> &LoadedCorpus {
        &self.corpus
    }

    pub fn next_batch(&mut self) -> Result<Vec<Example>> {
        sample_batch(&mut self.rng, &self.corpus, &self.cfg)
    }

    /// Loss and clipped gradients of a batch without updating anything.
    pub fn loss_and_grads(&self, batch: &[Example]) -> Result<(f64, Vec<Tensor<T>>)> {
        let bins: usize = batch.iter().map(|e| e.target.values().len()).sum();
        let p = self.model.params().bind(true);
        let mut loss = 0.0;
        for ex in batch {
            let input = Var::constant(magnitude_tensor::<T>(&ex.noisy));
            let pred = self.model.forward_var(&p, &input)?;
            let l = example_loss(&pred, ex, self.cfg.loss, bins as f64)?;
            loss += l.value().item().to_f64();
            l.backward()?;
        }
        Ok((loss, p.grads()))
    }

    /// One optimizer step on a given batch.
    pub fn step_on(&mut self, batch: &[Example]) -> Result<StepStats> {
        let (loss, mut grads) = self.loss_and_grads(batch)?;
        let step = self.step + 1;
        let lr = lr_at(step, self.cfg.warmup, self.model.config().d_model);
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite training state at step {step}: loss {loss}, lr {lr:.6e}, {}",
                grad_summary(&grads)
            )));
        }
        let grad_peak = clip_gradients(&mut grads, -self.cfg.clip, self.cfg.clip);
        adam_step(self.model.params_mut().values_mut(), &grads, &mut self.adam, lr)?;
        self.step = step;
        Ok(StepStats {
            step,
            lr,
            loss,
            grad_peak,
        })
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let batch = self.next_batch()?;
        self.step_on(&batch)
    }

    /// Writes model, optimizer moments and progress into `dir`.
    pub fn save_checkpoint(&self, dir: &Path, seed: u64) -> Result<()> {
        self.model.save(dir, seed)?;
        let names = self.model.params().names();
        let m: Vec<String> = names.iter().map(|n| format!("m.{n}")).collect();
        let v: Vec<String> = names.iter().map(|n| format!("v.{n}")).collect();
        let mut entries: Vec<(&str, &Tensor<T>)> = m.iter().map(String::as_str).zip(&self.adam.m).collect();
        entries.extend(v.iter().map(String::as_str).zip(&self.adam.v));
        archive::save(dir.join(CKPT_ADAM), &entries)?;
        fs::write(
            dir.join(CKPT_STATE),
            format!(
                "step = {}\nadam_t = {}\ndata_seed = {}\nrng_word_pos = {}\n",
                self.step,
                self.adam.t,
                self.cfg.data_seed,
                self.rng.get_word_pos()
            ),
        )?;
        fs::write(dir.join("train.cfg"), self.cfg.to_text())?;
        Ok(())
    }

    /// Restores optimizer moments and progress; the model must already hold
    /// the checkpoint's parameters.
    pub fn restore_state(&mut self, dir: &Path) -> Result<()> {
        let text = fs::read_to_string(dir.join(CKPT_STATE))?;
        let mut kv = KvMap::parse(&text)?;
        let step: u64 = kv.take("step", 0)?;
        let t: u64 = kv.take("adam_t", 0)?;
        let data_seed: u64 = kv.take("data_seed", self.cfg.data_seed)?;
        let word_pos: u128 = kv.take("rng_word_pos", 0)?;
        kv.finish()?;
        if data_seed != self.cfg.data_seed {
            return Err(Error::Config(format!(
                "checkpoint data_seed {data_seed} differs from config {}",
                self.cfg.data_seed
            )));
        }
        let mut store = ParamStore::<T>::default();
        for (name, tensor) in archive::load::<T>(dir.join(CKPT_ADAM))? {
            store.push(name, tensor);
        }
        let names = self.model.params().names();
        let pick = |prefix: &str| -> Result<Vec<Tensor<T>>> {
            names
                .iter()
                .zip(self.model.params().values())
                .map(|(n, p)| {
                    let id = store
                        .find(&format!("{prefix}.{n}"))
                        .ok_or_else(|| Error::Format(format!("optimizer state lacks `{prefix}.{n}`")))?;
                    let t = store.get(id).clone();
                    if t.shape() != p.shape() {
                        return Err(Error::Format(format!("optimizer state `{prefix}.{n}` has wrong shape")));
                    }
                    Ok(t)
                })
                .collect()
        };
        self.adam.m = pick("m")?;
        self.adam.v = pick("v")?;
        self.adam.t = t;
        self.step = step;
        self.rng = ChaCha8Rng::seed_from_u64(data_seed);
        self.rng.set_word_pos(word_pos);
        Ok(())
    }
}

fn grad_summary<T: Real>(grads: &[Tensor<T>]) -> String {
    let mut nonfinite = 0usize;
    let mut peak = 0.0f64;
    let mut sq = 0.0f64;
    for &v in grads.iter().flat_map(|g| g.data()) {
        let f = Real::to_f64(v);
        if f.is_finite() {
            peak = peak.max(f.abs());
            sq += f * f;
        } else {
            nonfinite += 1;
        }
    }
    format!("grad max-abs {peak:.4e}, grad l2 {:.4e}, non-finite grads {nonfinite}", sq.sqrt())
}

pub const LOSS_LOG: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Runs all configured steps, logging to `out/loss.csv` and writing
/// `out/checkpoint` after every epoch. With `resume` training continues from
/// an existing checkpoint and the log is truncated to its step.
pub fn train<T: Real>(trainer: &mut Trainer<T>, seed: u64, out: &Path, resume: bool) -> Result<Vec<StepStats>> {
    fs::create_dir_all(out)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    let log_path = out.join(LOSS_LOG);
    let mut kept = String::from("step,lr,loss\n");
    if resume {
        let (model, _) = EnhancementModel::<T>::load(&ckpt)?;
        if model.config() != trainer.model.config() {
            return Err(Error::Config("checkpoint model differs from the configured model".into()));
        }
        trainer.model = model;
        trainer.restore_state(&ckpt)?;
        if let Ok(text) = fs::read_to_string(&log_path) {
            for line in text.lines().skip(1) {
                let s: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                if s <= trainer.step {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    let mut log = fs::File::create(&log_path)?;
    log.write_all(kept.as_bytes())?;
    let per_epoch = trainer.cfg.steps_per_epoch.max(1) as u64;
    let total = trainer.cfg.total_steps();
    let mut stats = Vec::new();
    while trainer.step < total {
        let s = match trainer.step() {
            Ok(s) => s,
            Err(e @ Error::Numeric(_)) => {
                fs::write(out.join("abort.txt"), format!("{e}\n"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{},{:e},{:e}", s.step, s.lr, s.loss)?;
        stats.push(s);
        if s.step % per_epoch == 0 || s.step == total {
            log.flush()?;
            trainer.save_checkpoint(&ckpt, seed)?;
        }
    }
    log.flush()?;
    Ok(stats)
}

/// Exponential moving average of a loss curve.
pub fn smooth(losses: &[f64], alpha: f64) -> Vec<f64> {
    let mut acc = None;
    losses
        .iter()
        .map(|&l| {
            let v = match acc {
                None => l,
                Some(a) => alpha * a + (1.0 - alpha) * l,
            };
            acc = Some(v);
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::dsp::active_power;
    use crate::model::{Backbone, ModelConfig};

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 2,
            steps_per_epoch: 3,
            warmup: 5,
            clip_secs: 0.25,
            corpus: Corpus::Synthetic {
                speech: 3,
                noise: 2,
                secs: 0.5,
            },
            ..TrainConfig::new(7)
        }
    }

    fn toy_model() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_state: 4,
            ..ModelConfig::new(Backbone::Mamba, 1)
        }
    }

    #[test]
    fn scheduler_values() {
        assert!((lr_at(40_000, 40_000, 256) - 3.125e-4).abs() < 1e-18);
        assert!((lr_at(1, 40_000, 256) - 7.8125e-9).abs() < 1e-20);
        let peak = lr_at(400, 400, 32);
        for n in (1..400).step_by(7) {
            assert!(lr_at(n, 400, 32) < lr_at(n + 1, 400, 32));
            assert!(lr_at(n, 400, 32) < peak);
        }
        for n in (400..5000).step_by(13) {
            assert!(lr_at(n + 1, 400, 32) < lr_at(n, 400, 32));
        }
    }

    #[test]
    fn loss_values() {
        let t = Mask::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(psm_mse_loss(&t, &t).unwrap(), 0.0);
        let p = Mask::new(2, 2, t.values().iter().map(|v| v + 0.5).collect()).unwrap();
        assert!((psm_mse_loss(&p, &t).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus = LoadedCorpus::synthetic(1, 1, 0.1, 3);
        let cfg = TrainConfig {
            clip_secs: 0.0,
            ..toy_cfg()
        };
        let ex = sample_example(&mut rng, &corpus, &cfg).unwrap();
        let n = ex.target.values().len() as f64;
        let pred = Tensor::<f64>::from_fn(vec![ex.noisy.frames(), ex.noisy.bins()], |i| ((i * 7) % 10) as f64 / 10.0);
        for kind in [LossKind::Mask, LossKind::Spectrum] {
            let r = grad_check(|x| example_loss(x, &ex, kind, n), &pred, 1e-2).unwrap();
            assert!(r.max_rel_err < 1e-6, "{kind}: {r:?}");
        }
        let v = Var::leaf(pred.clone());
        example_loss(&v, &ex, LossKind::Mask, n).unwrap().backward().unwrap();
        let g = v.grad().unwrap();
        for (i, (&gv, &t)) in g.data().iter().zip(ex.target.values()).enumerate() {
            assert!((gv - 2.0 * (pred.data()[i] - t) / n).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::<f64>::new(vec![4], vec![2.5, -3.0, 0.5, -1.0]).unwrap()];
        assert_eq!(clip_gradients(&mut g, -1.0, 1.0), 3.0);
        assert_eq!(g[0].data(), &[1.0, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn adam_basics() {
        let mut p = vec![Tensor::<f64>::full(vec![3], 2.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(vec![3])], &mut st, 0.1).unwrap();
        assert_eq!(p[0].data(), &[2.0; 3]);

        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, 0.01).unwrap();
        assert!((p[0].item() + 0.01).abs() < 1e-10);

        // f(x) = (x - 3)^2
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = AdamState::new(&p);
        for _ in 0..500 {
            let g = 2.0 * (p[0].item() - 3.0);
            adam_step(&mut p, &[Tensor::scalar(g)], &mut st, 0.1).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 1e-3, "{}", p[0].item());
    }

    #[test]
    fn batches_are_deterministic_and_labelled() {
        let corpus = LoadedCorpus::synthetic(4, 3, 0.5, 11);
        let cfg = toy_cfg();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            sample_batch(&mut rng, &corpus, &cfg).unwrap()
        };
        let (a, b) = (draw(), draw());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.noisy, y.noisy);
            assert!(x.target.values().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((cfg.snr_min..=cfg.snr_max).contains(&x.snr_db));
            let noise: Vec<f64> = x.mixture.samples().iter().zip(x.speech.samples()).map(|(m, s)| m - s).collect();
            let measured = 10.0 * (active_power(x.speech.samples()) / active_power(&noise)).log10();
            assert!((measured - x.snr_db as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        let corpus = LoadedCorpus {
            speech: vec![],
            noise: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_example(&mut rng, &corpus, &toy_cfg()), Err(Error::Data(_))));
    }

    #[test]
    fn short_noise_truncates_speech() {
        let corpus = LoadedCorpus {
            speech: vec![synth::tonal_speech(4000, 1)],
            noise: vec![synth::filtered_noise(1500, 2)],
        };
        let cfg = TrainConfig {
            clip_secs: 0.0,
            ..toy_cfg()
        };
        let ex = sample_example(&mut ChaCha8Rng::seed_from_u64(0), &corpus, &cfg).unwrap();
        assert_eq!(ex.speech.len(), 1500);
    }

    #[test]
    fn config_round_trip() {
        let mut kv = KvMap::parse("batch_size = 4\nloss = spectrum\ncorpus = data/train.txt\n").unwrap();
        let cfg = TrainConfig::from_kv(&mut kv, 3).unwrap();
        assert_eq!(cfg.loss, LossKind::Spectrum);
        assert_eq!(cfg.data_seed, 3);
        assert_eq!(cfg.corpus.resolve(Path::new("/x")), Corpus::Manifest("/x/data/train.txt".into()));
        let mut kv = KvMap::parse(&cfg.to_text()).unwrap();
        assert_eq!(TrainConfig::from_kv(&mut kv, 99).unwrap(), cfg);
        let mut kv = KvMap::parse("warmup = 0").unwrap();
        assert!(TrainConfig::from_kv(&mut kv, 0).is_err());
    }

    #[test]
    fn clipped_step_and_resume_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = EnhancementModel::<f32>::build(&toy_model(), 1).unwrap();
        let mut full = Trainer::new(model.clone(), toy_cfg()).unwrap();
        let all = train(&mut full, 1, dir.path(), false).unwrap();
        assert_eq!(all.len(), 6);
        let log = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
        assert_eq!(log.lines().count(), 7);

        // stop after the first epoch, then resume
        let dir2 = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(model.clone(), TrainConfig { epochs: 1, ..toy_cfg() }).unwrap();
        train(&mut first, 1, dir2.path(), false).unwrap();
        let mut rest = Trainer::new(model, toy_cfg()).unwrap();
        let tail = train(&mut rest, 1, dir2.path(), true).unwrap();
        let losses: Vec<f64> = tail.iter().map(|s| s.loss).collect();
        let want: Vec<f64> = all[3..].iter().map(|s| s.loss).collect();
        assert_eq!(losses, want);
        assert_eq!(fs::read_to_string(dir2.path().join(LOSS_LOG)).unwrap(), log);
    }

    #[test]
    fn identical_batches_across_backbones() {
        let a = Trainer::new(EnhancementModel::<f32>::build(&toy_model(), 1).unwrap(), toy_cfg());
        let xl = ModelConfig {
            d_model: 8,
            mlstm_heads: 2,
            ..ModelConfig::new(Backbone::Xlstm, 1)
        };
        let b = Trainer::new(EnhancementModel::<f32>::build(&xl, 2).unwrap(), toy_cfg());
        let (mut a, mut b) = (a.unwrap(), b.unwrap());
        for _ in 0..3 {
            let (x, y) = (a.next_batch().unwrap(), b.next_batch().unwrap());
            for (p, q) in x.iter().zip(&y) {
                assert_eq!(p.mixture, q.mixture);
            }
        }
    }
}
