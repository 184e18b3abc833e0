//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be consumed by
//! one of the typed sections, otherwise loading fails and names the key.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::BenchConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, Entry>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", idx + 1)));
            };
            let key = k.trim().to_string();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: malformed key `{}`", idx + 1, k.trim())));
            }
            let entry = Entry {
                value: v.trim().to_string(),
                line: idx + 1,
            };
            if let Some(prev) = entries.insert(key.clone(), entry) {
                return Err(Error::Config(format!(
                    "key `{key}` given twice (lines {} and {})",
                    prev.line,
                    idx + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|e| e.value)
    }

    pub fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|err| {
                Error::Config(format!("line {}: key `{key}`: cannot parse `{}`: {err}", e.line, e.value))
            }),
        }
    }

    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take_opt(key)?.unwrap_or(default))
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, e)) => Err(Error::Config(format!("line {}: unknown key `{k}`", e.line))),
        }
    }
}

/// Everything one command needs: model, training and benchmark sections.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Model initialization seed.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let seed = kv.take("seed", 0u64)?;
        let model = ModelConfig::from_kv(&mut kv)?;
        let train = TrainConfig::from_kv(&mut kv, seed)?;
        let bench = BenchConfig::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(Self {
            seed,
            model,
            train,
            bench,
        })
    }

    /// Loads a file; relative corpus paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_text(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.train.corpus = cfg.train.corpus.resolve(&base);
        Ok(cfg)
    }

    /// Fully resolved configuration in the same text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("seed = {}\n", self.seed);
        out.push_str(&self.model.to_text());
        out.push_str(&self.train.to_text());
        out.push_str(&self.bench.to_text());
        out
    }
}

/// Resolves `p` against `base` unless it is absolute.
pub(crate) fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
