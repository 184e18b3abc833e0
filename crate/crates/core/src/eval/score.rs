//! Per-SNR scoring of an enhancer over an evaluation set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{estoi, snr_db};
use crate::config::resolve_path;
use crate::dsp::{apply_mask, istft, mix_at_snr, psm, read_wav, stft, synth, write_wav, Mask, Waveform};
use crate::error::{Error, Result};
use crate::par;

/// The input SNR columns of the result tables.
pub const TABLE_SNRS: [i32; 5] = [-5, 0, 5, 10, 15];

/// One test mixture with its clean reference.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub clean: Waveform,
    pub mixture: Waveform,
    pub snr_db: i32,
}

/// Reads `clean.wav noise.wav snr_db` lines. Noise offsets are drawn from a
/// generator seeded with `seed`, so the set is reproducible.
pub fn load_eval_manifest(path: &Path, seed: u64) -> Result<Vec<EvalItem>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read eval manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [clean, noise, snr] = fields[..] else {
            return Err(Error::Data(format!(
                "{}:{}: expected `<clean.wav> <noise.wav> <snr_db>`",
                path.display(),
                i + 1
            )));
        };
        let snr: i32 = snr
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad SNR `{snr}`", path.display(), i + 1)))?;
        let clean = read_wav(resolve_path(base, Path::new(clean)))?;
        let noise = read_wav(resolve_path(base, Path::new(noise)))?;
        let mix = mix_at_snr(&clean, &noise, snr as f64, &mut rng)?;
        items.push(EvalItem {
            clean,
            mixture: mix.mixture,
            snr_db: snr,
        });
    }
    if items.is_empty() {
        return Err(Error::Data(format!("eval manifest {} lists no mixtures", path.display())));
    }
    Ok(items)
}

/// `per_snr` synthetic mixtures at each table SNR.
pub fn synthetic_eval_set(per_snr: usize, secs: f64, seed: u64) -> Result<Vec<EvalItem>> {
    let n = (secs * crate::dsp::SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for &snr in &TABLE_SNRS {
        for _ in 0..per_snr {
            let clean = synth::tonal_speech(n, rng.random());
            let noise = synth::filtered_noise(2 * n, rng.random());
            let mix = mix_at_snr(&clean, &noise, snr as f64, &mut rng)?;
            items.push(EvalItem {
                clean,
                mixture: mix.mixture,
                snr_db: snr,
            });
        }
    }
    Ok(items)
}

/// Scores of one enhanced utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemScore {
    pub snr_db: i32,
    pub estoi_noisy: f64,
    pub estoi_enhanced: f64,
    pub snr_noisy: f64,
    pub snr_enhanced: f64,
    pub external: Option<f64>,
}

/// Shell-out scorer: `program [args..] <clean.wav> <processed.wav>` prints a number.
#[derive(Clone, Debug)]
pub struct ExternalScorer {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ExternalScorer {
    pub fn score(&self, clean: &Waveform, processed: &Waveform) -> Result<f64> {
        let dir = std::env::temp_dir().join(format!(
            "sebench-score-{}-{:x}",
            std::process::id(),
            rand::random::<u64>()
        ));
        fs::create_dir_all(&dir)?;
        let (c, p) = (dir.join("clean.wav"), dir.join("processed.wav"));
        let result = (|| {
            write_wav(&c, clean)?;
            write_wav(&p, processed)?;
            let out = Command::new(&self.program).args(&self.args).arg(&c).arg(&p).output()?;
            if !out.status.success() {
                return Err(Error::Data(format!(
                    "scorer {} failed: {}",
                    self.program.display(),
                    String::from_utf8_lossy(&out.stderr).trim()
                )));
            }
            let text = String::from_utf8_lossy(&out.stdout);
            text.split_whitespace()
                .next()
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| Error::Data(format!("scorer printed no number: `{}`", text.trim())))
        })();
        let _ = fs::remove_dir_all(&dir);
        result
    }
}

/// Enhances and scores every item; utterances run in parallel and results
/// keep item order.
pub fn score_items<F>(items: &[EvalItem], enhance: F, external: Option<&ExternalScorer>) -> Result<Vec<ItemScore>>
where
    F: Fn(&EvalItem) -> Result<Waveform> + Sync + Send,
{
    par::map_slice(items, |it| -> Result<ItemScore> {
        let out = enhance(it)?;
        if out.len() != it.clean.len() {
            return Err(Error::Length(format!(
                "enhancer returned {} samples for a {}-sample input",
                out.len(),
                it.clean.len()
            )));
        }
        Ok(ItemScore {
            snr_db: it.snr_db,
            estoi_noisy: estoi(&it.clean, &it.mixture)?,
            estoi_enhanced: estoi(&it.clean, &out)?,
            snr_noisy: snr_db(&it.clean, &it.mixture)?,
            snr_enhanced: snr_db(&it.clean, &out)?,
            external: external.map(|s| s.score(&it.clean, &out)).transpose()?,
        })
    })
    .into_iter()
    .collect()
}

/// Oracle enhancement with the clamped phase-sensitive mask.
pub fn oracle_psm(item: &EvalItem) -> Result<Waveform> {
    let noisy = stft(&item.mixture)?;
    let mask = psm(&stft(&item.clean)?, &noisy, true)?;
    istft(&apply_mask(&noisy, &mask)?, item.mixture.len())
}

/// All-ones mask: STFT round trip of the mixture.
pub fn identity(item: &EvalItem) -> Result<Waveform> {
    let noisy = stft(&item.mixture)?;
    istft(
        &apply_mask(&noisy, &Mask::filled(noisy.frames(), noisy.bins(), 1.0))?,
        item.mixture.len(),
    )
}

/// Metric rows by SNR column.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub snrs: Vec<i32>,
    /// `(metric name, value per SNR column, average)`.
    pub rows: Vec<(String, Vec<Option<f64>>, f64)>,
}

impl ScoreTable {
    /// The table SNR columns always appear; any other SNRs follow in order.
    pub fn from_scores(scores: &[ItemScore]) -> Self {
        let mut snrs: Vec<i32> = TABLE_SNRS.to_vec();
        let mut extra: Vec<i32> = scores.iter().map(|s| s.snr_db).filter(|s| !TABLE_SNRS.contains(s)).collect();
        extra.sort_unstable();
        extra.dedup();
        snrs.extend(extra);
        type Metric = (&'static str, fn(&ItemScore) -> Option<f64>);
        let mut metrics: Vec<Metric> = vec![
            ("estoi_noisy", |s| Some(s.estoi_noisy)),
            ("estoi_enhanced", |s| Some(s.estoi_enhanced)),
            ("snr_noisy", |s| Some(s.snr_noisy)),
            ("snr_enhanced", |s| Some(s.snr_enhanced)),
            ("snr_improvement", |s| Some(s.snr_enhanced - s.snr_noisy)),
        ];
        if scores.iter().any(|s| s.external.is_some()) {
            metrics.push(("external", |s| s.external));
        }
        let rows = metrics
            .into_iter()
            .map(|(name, f)| {
                let mut by: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
                let mut all = Vec::new();
                for s in scores {
                    if let Some(v) = f(s) {
                        by.entry(s.snr_db).or_default().push(v);
                        all.push(v);
                    }
                }
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                let cols = snrs.iter().map(|k| by.get(k).map(|v| mean(v))).collect();
                (name.to_string(), cols, if all.is_empty() { f64::NAN } else { mean(&all) })
            })
            .collect();
        Self { snrs, rows }
    }

    pub fn value(&self, metric: &str, snr: i32) -> Option<f64> {
        let col = self.snrs.iter().position(|&s| s == snr)?;
        self.rows.iter().find(|r| r.0 == metric)?.1[col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for s in &self.snrs {
            out.push_str(&format!(",{s}"));
        }
        out.push_str(",avg\n");
        for (name, cols, avg) in &self.rows {
            out.push_str(name);
            for c in cols {
                match c {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push(','),
                }
            }
            out.push_str(&format!(",{avg:.6}\n"));
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let mut out = format!("{:<16}", "input SNR (dB)");
        for s in &self.snrs {
            out.push_str(&format!("{s:>9}"));
        }
        out.push_str(&format!("{:>9}\n", "avg"));
        for (name, cols, avg) in &self.rows {
            out.push_str(&format!("{name:<16}"));
            for c in cols {
                match c {
                    Some(v) => out.push_str(&format!("{v:>9.3}")),
                    None => out.push_str(&format!("{:>9}", "-")),
                }
            }
            out.push_str(&format!("{avg:>9.3}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_table_columns() {
        let items = synthetic_eval_set(1, 1.0, 3).unwrap();
        let scores = score_items(&items, identity, None).unwrap();
        let table = ScoreTable::from_scores(&scores);
        let csv = table.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "metric,-5,0,5,10,15,avg");
        assert_eq!(csv.lines().count(), 6);
        for s in TABLE_SNRS {
            let noisy = table.value("estoi_noisy", s).unwrap();
            let enhanced = table.value("estoi_enhanced", s).unwrap();
            assert!((noisy - enhanced).abs() < 1e-6, "{s}: {noisy} vs {enhanced}");
            assert!((table.value("snr_noisy", s).unwrap() - s as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_beats_noisy_everywhere() {
        let items = synthetic_eval_set(1, 1.0, 5).unwrap();
        let table = ScoreTable::from_scores(&score_items(&items, oracle_psm, None).unwrap());
        for s in TABLE_SNRS {
            assert!(table.value("estoi_enhanced", s).unwrap() > table.value("estoi_noisy", s).unwrap());
            assert!(table.value("snr_improvement", s).unwrap() > 0.0);
        }
    }

    #[test]
    fn reproducible() {
        let a = synthetic_eval_set(1, 0.8, 9).unwrap();
        let b = synthetic_eval_set(1, 0.8, 9).unwrap();
        let sa = score_items(&a, oracle_psm, None).unwrap();
        let sb = score_items(&b, oracle_psm, None).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(dir.path().join("c.wav"), &synth::tonal_speech(12_000, 1)).unwrap();
        write_wav(dir.path().join("n.wav"), &synth::filtered_noise(20_000, 2)).unwrap();
        let m = dir.path().join("eval.txt");
        fs::write(&m, "c.wav n.wav 5\nc.wav n.wav -5 # low\n").unwrap();
        let items = load_eval_manifest(&m, 1).unwrap();
        assert_eq!(items.len(), 2);
        assert!((snr_db(&items[0].clean, &items[0].mixture).unwrap() - 5.0).abs() < 1e-3);
        fs::write(&m, "c.wav n.wav\n").unwrap();
        assert!(matches!(load_eval_manifest(&m, 1), Err(Error::Data(_))));
    }

    #[cfg(unix)]
    #[test]
    fn external_scorer_protocol() {
        let s = ExternalScorer {
            program: "sh".into(),
            args: vec!["-c".into(), "test -s \"$0\" && test -s \"$1\" && echo 4.25".into()],
        };
        let x = synth::tonal_speech(4000, 1);
        assert_eq!(s.score(&x, &x).unwrap(), 4.25);
        let bad = ExternalScorer {
            program: "sh".into(),
            args: vec!["-c".into(), "echo nothing".into()],
        };
        assert!(bad.score(&x, &x).is_err());
    }
}
