//! `sebench`: train, enhance, count, benchmark, verify and score.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sebench_core::autograd::{inject_backward_fault, Activation};
use sebench_core::config::RunConfig;
use sebench_core::dsp::{read_wav, synth, write_wav};
use sebench_core::eval::{
    default_lock_path, identity, measure_rtf, measure_train_step, oracle_psm, parse_lengths, score_items,
    load_eval_manifest, synthetic_eval_set, BenchConfig, BenchLock, BenchReport, ExternalScorer, RtfRow, ScoreTable,
};
use sebench_core::model::{Backbone, EnhancementModel, ModelConfig, MODEL_CFG};
use sebench_core::training::{train, TrainConfig, Trainer, CHECKPOINT_DIR};
use sebench_core::verify::run_suite;
use sebench_core::Error;

#[derive(Parser)]
#[command(name = "sebench", version, about = "Time-frequency speech enhancement toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint`.
        #[arg(long)]
        resume: bool,
    },
    /// Enhance one WAV file, or every file matched by a glob into a directory.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter counts.
    Params {
        #[arg(long, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
    },
    /// Time inference (RTF per length) and optionally training steps.
    Bench(BenchArgs),
    /// Run the self-check suite.
    Verify {
        /// Corrupt the backward rule of one activation (negative control).
        #[arg(long, value_name = "ACTIVATION")]
        inject_fault: Option<String>,
        /// Smaller random sweeps.
        #[arg(long)]
        quick: bool,
    },
    /// Score an enhancer per input SNR.
    Score {
        #[arg(long, conflicts_with_all = ["oracle", "identity"])]
        checkpoint: Option<PathBuf>,
        /// Use the oracle phase-sensitive mask.
        #[arg(long)]
        oracle: bool,
        /// Use the all-ones mask.
        #[arg(long)]
        identity: bool,
        #[arg(long, conflicts_with = "synthetic")]
        manifest: Option<PathBuf>,
        /// Mixtures per SNR of a generated set.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 4.0)]
        secs: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// External scorer, called as `<scorer> <clean.wav> <processed.wav>`.
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus and evaluation manifest.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        speech: usize,
        #[arg(long, default_value_t = 8)]
        noise: usize,
        #[arg(long, default_value_t = 4.0)]
        secs: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, num_args = 1.., required_unless_present = "checkpoint")]
    config: Vec<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    /// Comma-separated test lengths in seconds.
    #[arg(long)]
    lengths: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Time STFT and ISTFT as well as the network.
    #[arg(long)]
    include_stft: bool,
    /// Also time this many optimizer steps.
    #[arg(long, default_value_t = 0)]
    train_steps: usize,
    /// Draw each training batch before its timer starts.
    #[arg(long)]
    exclude_data: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail unless the attention and recurrent trends hold.
    #[arg(long)]
    assert_trends: bool,
    #[arg(long)]
    lock: Option<PathBuf>,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Data(_) | Error::Format(_) | Error::Rate { .. } | Error::Length(_) => 2,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Train { config, out, resume } => cmd_train(&config, &out, resume),
        Cmd::Enhance { checkpoint, input, out } => cmd_enhance(&checkpoint, &input, &out),
        Cmd::Params { config } => cmd_params(&config),
        Cmd::Bench(args) => cmd_bench(&args),
        Cmd::Verify { inject_fault, quick } => cmd_verify(inject_fault.as_deref(), quick),
        Cmd::Score {
            checkpoint,
            oracle,
            identity,
            manifest,
            synthetic,
            secs,
            seed,
            scorer,
            out,
        } => cmd_score(ScoreArgs {
            checkpoint,
            oracle,
            identity,
            manifest,
            synthetic,
            secs,
            seed,
            scorer,
            out,
        }),
        Cmd::SynthCorpus {
            out,
            speech,
            noise,
            secs,
            seed,
        } => cmd_synth_corpus(&out, speech, noise, secs, seed),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

/// Writes `text` as the resolved config of a run next to its outputs.
fn echo_config(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.cfg");
    out.with_file_name(name)
}

fn cmd_train(config: &Path, out: &Path, resume: bool) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    fs::create_dir_all(out)?;
    echo_config(&out.join("run.cfg"), &cfg.to_text())?;
    let model = EnhancementModel::<f32>::build(&cfg.model, cfg.seed)?;
    println!(
        "training {} ({} params) for {} steps",
        cfg.model.label(),
        model.count_params(),
        cfg.train.total_steps()
    );
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let stats = train(&mut trainer, cfg.seed, out, resume)?;
    if let (Some(first), Some(last)) = (stats.first(), stats.last()) {
        println!("step {}: loss {:.5} -> step {}: loss {:.5}", first.step, first.loss, last.step, last.loss);
    }
    println!("checkpoint: {}", out.join(CHECKPOINT_DIR).display());
    Ok(())
}

/// Accepts either a checkpoint directory or a training output directory.
fn load_checkpoint(path: &Path) -> Result<EnhancementModel<f32>, Failure> {
    let dir = if path.join(MODEL_CFG).exists() {
        path.to_path_buf()
    } else if path.join(CHECKPOINT_DIR).join(MODEL_CFG).exists() {
        path.join(CHECKPOINT_DIR)
    } else {
        return Err(usage(format!("no checkpoint found at {}", path.display())));
    };
    Ok(EnhancementModel::load(dir)?.0)
}

fn cmd_enhance(checkpoint: &Path, input: &str, out: &Path) -> CmdResult {
    let model = load_checkpoint(checkpoint)?;
    let is_pattern = input.contains(['*', '?', '[']);
    if !is_pattern {
        let w = read_wav(input)?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_wav(out, &model.enhance(&w)?)?;
        println!("{}", out.display());
        return Ok(());
    }
    let files: Vec<PathBuf> = glob::glob(input)
        .map_err(|e| usage(format!("bad pattern `{input}`: {e}")))?
        .collect::<Result<_, _>>()
        .map_err(|e| usage(e.to_string()))?;
    if files.is_empty() {
        return Err(usage(format!("no files match `{input}`")));
    }
    fs::create_dir_all(out)?;
    let waves = files.iter().map(read_wav).collect::<Result<Vec<_>, _>>()?;
    let enhanced = sebench_core::par::map_slice(&waves, |w| model.enhance(w));
    for (path, e) in files.iter().zip(enhanced) {
        let dest = out.join(path.file_name().unwrap_or_default());
        write_wav(&dest, &e?)?;
        println!("{}", dest.display());
    }
    Ok(())
}

/// `3.29M (3,291,651)`.
fn format_count(n: usize) -> String {
    let digits = n.to_string();
    let mut grouped = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            grouped.push(',');
        }
        grouped.push(c);
    }
    format!("{:.2}M ({grouped})", n as f64 / 1e6)
}

fn cmd_params(configs: &[PathBuf]) -> CmdResult {
    for path in configs {
        let cfg = RunConfig::load(path)?;
        let n = sebench_core::model::count_params(&cfg.model)?;
        if configs.len() == 1 {
            println!("{}", format_count(n));
        } else {
            println!("{:<32} {}", cfg.model.label(), format_count(n));
        }
    }
    Ok(())
}

fn bench_config(base: BenchConfig, a: &BenchArgs) -> Result<BenchConfig, Failure> {
    let mut c = base;
    if let Some(l) = &a.lengths {
        c.lengths = parse_lengths(l)?;
    }
    if let Some(b) = a.batch {
        c.batch = b;
    }
    if let Some(r) = a.runs {
        c.runs = r;
    }
    if let Some(w) = a.warmup {
        c.warmup_runs = w;
    }
    c.include_stft |= a.include_stft;
    c.validate()?;
    Ok(c)
}

fn bench_one(model: EnhancementModel<f32>, train_cfg: &TrainConfig, bench: &BenchConfig, a: &BenchArgs) -> Result<BenchReport, Failure> {
    let mut rtf = Vec::new();
    for &secs in &bench.lengths {
        let t = measure_rtf(&model, secs, bench)?;
        if t.cv() > 0.2 {
            eprintln!(
                "warning: {} at {secs}s has a coefficient of variation of {:.0}%",
                model.config().label(),
                100.0 * t.cv()
            );
        }
        rtf.push(RtfRow {
            secs,
            rtf: t.mean(),
            cv: t.cv(),
        });
    }
    let name = model.config().label();
    let params = model.count_params();
    let sec_per_step = if a.train_steps > 0 {
        let mut trainer = Trainer::new(model, train_cfg.clone())?;
        Some(measure_train_step(&mut trainer, 3, a.train_steps, a.exclude_data)?.mean())
    } else {
        None
    };
    Ok(BenchReport {
        model: name,
        params,
        sec_per_step,
        rtf,
        batch: bench.batch,
        runs: bench.runs,
    })
}

/// Checks the trends between every non-causal attention model and every
/// BiMamba model, and between BixLSTM and BiMamba training speed.
fn check_trends(reports: &[(ModelConfig, BenchReport)], lengths: &[f64]) -> Result<Vec<String>, Failure> {
    let (short, long) = match (lengths.first(), lengths.last()) {
        (Some(&s), Some(&l)) if l > s => (s, l),
        _ => return Err(usage("--assert-trends needs at least two test lengths")),
    };
    let of = |pred: fn(&ModelConfig) -> bool| reports.iter().filter(move |(c, _)| pred(c)).map(|(_, r)| r);
    let attn = |c: &ModelConfig| c.backbone.is_attention() && !c.causal;
    let bimamba = |c: &ModelConfig| c.backbone == Backbone::BiMamba;
    let bix = |c: &ModelConfig| matches!(c.backbone, Backbone::CBixlstm | Backbone::PBixlstm);
    let mut failures = Vec::new();
    let mut compared = 0;
    for a in of(attn) {
        for m in of(bimamba) {
            compared += 1;
            let (ga, gm) = (a.growth(short, long).unwrap_or(f64::NAN), m.growth(short, long).unwrap_or(f64::NAN));
            let ratio = ga / gm;
            println!("trend: {} RTF growth {ga:.3} vs {} {gm:.3}: ratio {ratio:.3}", a.model, m.model);
            if !(ratio >= 1.5) {
                failures.push(format!("{} RTF growth is not 1.5x that of {}", a.model, m.model));
            }
        }
    }
    for x in of(bix) {
        for m in of(bimamba) {
            if let (Some(sx), Some(sm)) = (x.sec_per_step, m.sec_per_step) {
                compared += 1;
                println!("trend: {} sec/step {sx:.4} vs {} {sm:.4}", x.model, m.model);
                if !(sx > sm) {
                    failures.push(format!("{} does not train slower than {}", x.model, m.model));
                }
            }
        }
    }
    if compared == 0 {
        return Err(usage(
            "--assert-trends needs a BiMamba model plus a non-causal attention model or a BixLSTM model with --train-steps",
        ));
    }
    Ok(failures)
}

fn cmd_bench(a: &BenchArgs) -> CmdResult {
    let mut jobs: Vec<(EnhancementModel<f32>, TrainConfig, BenchConfig, String)> = Vec::new();
    if let Some(ck) = &a.checkpoint {
        let model = load_checkpoint(ck)?;
        let text = format!("seed = 0\n{}", model.config().to_text());
        let run = RunConfig::from_text(&text)?;
        jobs.push((model, run.train, run.bench, text));
    }
    for path in &a.config {
        let run = RunConfig::load(path)?;
        let model = EnhancementModel::<f32>::build(&run.model, run.seed)?;
        let text = run.to_text();
        jobs.push((model, run.train, run.bench, text));
    }
    let lock_path = a.lock.clone().unwrap_or_else(default_lock_path);
    let _lock = BenchLock::acquire(&lock_path)?;
    let mut reports = Vec::new();
    let mut resolved = String::new();
    let mut lengths = Vec::new();
    for (model, train_cfg, base, text) in jobs {
        let bench = bench_config(base, a)?;
        resolved.push_str(&text);
        resolved.push_str(&format!(
            "# effective bench_lengths = {:?}, bench_batch = {}, bench_runs = {}, bench_warmup = {}, bench_include_stft = {}\n\n",
            bench.lengths, bench.batch, bench.runs, bench.warmup_runs, bench.include_stft
        ));
        let cfg = model.config().clone();
        let report = bench_one(model, &train_cfg, &bench, a)?;
        print!("{}", report.table());
        lengths = bench.lengths.clone();
        reports.push((cfg, report));
    }
    if let Some(out) = &a.out {
        let mut csv = format!("{}\n", BenchReport::CSV_HEADER);
        for (_, r) in &reports {
            csv.push_str(&r.csv_rows());
        }
        echo_config(out, &csv)?;
        echo_config(&sidecar(out), &resolved)?;
    }
    if a.assert_trends {
        let failures = check_trends(&reports, &lengths)?;
        if !failures.is_empty() {
            return Err(Failure {
                code: 1,
                msg: failures.join("; "),
            });
        }
    }
    Ok(())
}

fn cmd_verify(fault: Option<&str>, quick: bool) -> CmdResult {
    if let Some(name) = fault {
        let act = Activation::ALL.into_iter().find(|a| a.name() == name).ok_or_else(|| {
            let names: Vec<&str> = Activation::ALL.iter().map(|a| a.name()).collect();
            usage(format!("unknown activation `{name}`; expected one of {}", names.join(", ")))
        })?;
        inject_backward_fault(Some(act));
        println!("injected backward fault into {name}");
    }
    let results = run_suite(quick);
    inject_backward_fault(None);
    let mut failed = 0;
    for r in &results {
        println!("{} {:<40} {} [{:.2}s]", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail, r.secs);
        failed += usize::from(!r.passed);
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(Failure {
            code: 1,
            msg: format!("{failed} checks failed"),
        });
    }
    Ok(())
}

struct ScoreArgs {
    checkpoint: Option<PathBuf>,
    oracle: bool,
    identity: bool,
    manifest: Option<PathBuf>,
    synthetic: Option<usize>,
    secs: f64,
    seed: u64,
    scorer: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn cmd_score(a: ScoreArgs) -> CmdResult {
    let items = match (&a.manifest, a.synthetic) {
        (Some(m), None) => load_eval_manifest(m, a.seed)?,
        (None, Some(n)) if n > 0 => synthetic_eval_set(n, a.secs, a.seed)?,
        _ => return Err(usage("give --manifest or --synthetic N (N > 0)")),
    };
    let external = a.scorer.as_ref().map(|p| ExternalScorer {
        program: p.clone(),
        args: Vec::new(),
    });
    let (label, scores) = match (&a.checkpoint, a.oracle, a.identity) {
        (Some(ck), false, false) => {
            let model = load_checkpoint(ck)?;
            let label = model.config().label();
            (label, score_items(&items, |it| model.enhance(&it.mixture), external.as_ref())?)
        }
        (None, true, false) => ("oracle-psm".into(), score_items(&items, oracle_psm, external.as_ref())?),
        (None, false, true) => ("identity".into(), score_items(&items, identity, external.as_ref())?),
        _ => return Err(usage("give exactly one of --checkpoint, --oracle, --identity")),
    };
    let table = ScoreTable::from_scores(&scores);
    println!("{label}: {} mixtures", items.len());
    print!("{}", table.to_pretty());
    if let Some(out) = &a.out {
        echo_config(out, &table.to_csv())?;
        let source = match &a.manifest {
            Some(m) => format!("manifest = {}\n", m.display()),
            None => format!("synthetic = {}\nsecs = {}\n", a.synthetic.unwrap_or(0), a.secs),
        };
        echo_config(&sidecar(out), &format!("enhancer = {label}\n{source}seed = {}\n", a.seed))?;
    }
    Ok(())
}

fn cmd_synth_corpus(out: &Path, speech: usize, noise: usize, secs: f64, seed: u64) -> CmdResult {
    if speech == 0 || noise == 0 || !(secs > 0.0) {
        return Err(usage("--speech, --noise and --secs must be positive"));
    }
    let n = (secs * 16_000.0).round() as usize;
    fs::create_dir_all(out)?;
    let mut manifest = String::new();
    for i in 0..speech {
        let name = format!("speech_{i:03}.wav");
        write_wav(out.join(&name), &synth::tonal_speech(n, seed.wrapping_add(i as u64)))?;
        manifest.push_str(&format!("{name} speech\n"));
    }
    for i in 0..noise {
        let name = format!("noise_{i:03}.wav");
        write_wav(out.join(&name), &synth::filtered_noise(2 * n, seed.wrapping_add(1_000_003 + i as u64)))?;
        manifest.push_str(&format!("{name} noise\n"));
    }
    fs::write(out.join("corpus.txt"), manifest)?;
    // held-out pairs for scoring, one per table SNR
    let mut eval = String::new();
    for (k, snr) in [-5, 0, 5, 10, 15].into_iter().enumerate() {
        let (c, z) = (format!("eval_clean_{k}.wav"), format!("eval_noise_{k}.wav"));
        write_wav(out.join(&c), &synth::tonal_speech(n, seed.wrapping_add(2_000_003 + k as u64)))?;
        write_wav(out.join(&z), &synth::filtered_noise(2 * n, seed.wrapping_add(3_000_003 + k as u64)))?;
        eval.push_str(&format!("{c} {z} {snr}\n"));
    }
    fs::write(out.join("eval.txt"), eval)?;
    println!("wrote {speech} speech and {noise} noise files to {}", out.display());
    Ok(())
}
