//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use objaoa::training::Stages;
use objaoa::{Error, ModelConfig, Result, TrainConfig};

/// Everything a training run needs, resolvable from one file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Words seen fewer times than this map to `<unk>`.
    pub min_count: u64,
    /// Images held out for model selection.
    pub dev_count: usize,
    pub split_seed: u64,
    pub stage: Stages,
    pub features: Option<PathBuf>,
    pub captions: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            min_count: 1,
            dev_count: 32,
            split_seed: 7,
            stage: Stages::Both,
            features: None,
            captions: None,
        }
    }
}

const RUN_KEYS: [&str; 6] = ["min_count", "dev_count", "split_seed", "stage", "features", "captions"];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if self.model.set(key, value)? || self.train.set(key, value)? {
            return Ok(());
        }
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key {
            "min_count" => self.min_count = parse(key, value)?,
            "dev_count" => self.dev_count = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "stage" => {
                self.stage = Stages::parse(value)
                    .ok_or_else(|| Error::Config(format!("stage: expected xe, scst or both, got {value:?}")))?
            }
            "features" => self.features = path(),
            "captions" => self.captions = path(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` text: one entry per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// `key=value` overrides, as given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its resolved value; [`RunConfig::apply_text`] reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.model.entries() {
            writeln!(s, "{k}={v}").expect("String write");
        }
        for (k, v) in self.train.entries() {
            writeln!(s, "{k}={v}").expect("String write");
        }
        let run = [
            self.min_count.to_string(),
            self.dev_count.to_string(),
            self.split_seed.to_string(),
            self.stage.name().to_string(),
            path_text(&self.features),
            path_text(&self.captions),
        ];
        for (k, v) in RUN_KEYS.iter().zip(run) {
            writeln!(s, "{k}={v}").expect("String write");
        }
        s
    }
}
