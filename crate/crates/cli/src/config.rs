//! Run configuration shared by every subcommand.
//!
//! A [`RunConfig`] starts from built-in defaults, optionally absorbs a
//! `key = value` file passed with `--config`, and finally applies command
//! line overrides. Later sources win. Unknown keys and duplicate keys are
//! rejected so a typo in a config file fails loudly instead of silently
//! running with defaults.

use std::fmt;
use std::path::Path;

use did_core::didmodel::{DidArchConfig, TrainOptions};
use did_core::fusion::{FusionTrainOptions, FusionVariant, DEFAULT_ATTENTION_DIM};
use did_core::nnet::LrSchedule;
use did_core::{DidError, Result};

/// Network size preset selected with `--profile` or the `profile` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchProfile {
    /// Full-size architecture from the published recipe.
    Paper,
    /// Small architecture for fast experiments and tests.
    Toy,
}

impl ArchProfile {
    pub fn parse(value: &str) -> Result<Self> {
        match value {
            "paper" => Ok(ArchProfile::Paper),
            "toy" => Ok(ArchProfile::Toy),
            other => Err(DidError::Config(format!(
                "unknown profile '{other}', expected 'paper' or 'toy'"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArchProfile::Paper => "paper",
            ArchProfile::Toy => "toy",
        }
    }

    /// Base architecture for this profile with the given label count.
    pub fn arch(self, n_classes: usize) -> DidArchConfig {
        let base = match self {
            ArchProfile::Paper => DidArchConfig::paper(),
            ArchProfile::Toy => DidArchConfig::toy(),
        };
        base.with_classes(n_classes)
    }
}

impl fmt::Display for ArchProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// All tunable settings, resolved from defaults, config file and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: ArchProfile,
    /// Base learning rate for classifier training.
    pub lr: f64,
    /// Multiplicative learning rate decay factor.
    pub decay: f64,
    /// Number of parameter updates between decay applications.
    pub decay_interval: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of training utterances held out for monitoring.
    pub holdout: f64,
    /// Attention bottleneck width for the attentive fusion heads.
    pub m: usize,
    pub fusion_variant: FusionVariant,
    /// Base learning rate for fusion model training.
    pub fusion_lr: f64,
    pub fusion_epochs: usize,
    pub fusion_batch: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: ArchProfile::Toy,
            lr: 0.001,
            decay: 0.98,
            decay_interval: 50_000,
            epochs: 8,
            batch_size: 1,
            holdout: 0.05,
            m: DEFAULT_ATTENTION_DIM,
            fusion_variant: FusionVariant::Output,
            fusion_lr: 0.05,
            fusion_epochs: 40,
            fusion_batch: 1,
            seed: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        DidError::Config(format!("invalid value '{value}' for configuration key '{key}'"))
    })
}

impl RunConfig {
    /// Applies a single `key = value` pair. Unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "profile" => self.profile = ArchProfile::parse(value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "decay" => self.decay = parse_value(key, value)?,
            "decay_interval" => self.decay_interval = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "holdout" => self.holdout = parse_value(key, value)?,
            "m" => self.m = parse_value(key, value)?,
            "fusion_variant" => {
                self.fusion_variant = FusionVariant::parse(value).ok_or_else(|| {
                    DidError::Config(format!(
                        "invalid value '{value}' for configuration key '{key}', expected 'output' or 'hidden'"
                    ))
                })?
            }
            "fusion_lr" => self.fusion_lr = parse_value(key, value)?,
            "fusion_epochs" => self.fusion_epochs = parse_value(key, value)?,
            "fusion_batch" => self.fusion_batch = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            other => {
                return Err(DidError::Config(format!(
                    "unknown configuration key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Parses a config file of `key = value` lines.
    ///
    /// Blank lines and lines starting with `#` are skipped. Each key may
    /// appear at most once so conflicting settings cannot hide in a long
    /// file.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(DidError::Config(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| DidError::io(path, e))?;
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DidError::Config(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    idx + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(DidError::Config(format!(
                    "{}:{}: empty key or value",
                    path.display(),
                    idx + 1
                )));
            }
            if seen.iter().any(|k| k == key) {
                return Err(DidError::Config(format!(
                    "{}:{}: duplicate configuration key '{key}'",
                    path.display(),
                    idx + 1
                )));
            }
            self.apply(key, value).map_err(|e| {
                // Unwrap the inner message so the file location is not
                // followed by a second "invalid configuration" prefix.
                let msg = match e {
                    DidError::Config(m) => m,
                    other => other.to_string(),
                };
                DidError::Config(format!("{}:{}: {msg}", path.display(), idx + 1))
            })?;
            seen.push(key.to_string());
        }
        Ok(())
    }

    /// Builds the effective config: defaults, then the optional file, then
    /// the dedicated command line flags.
    pub fn resolve(
        config_path: Option<&Path>,
        seed_flag: Option<u64>,
        profile_flag: Option<&str>,
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = config_path {
            cfg.load_file(path)?;
        }
        if let Some(seed) = seed_flag {
            cfg.seed = seed;
        }
        if let Some(profile) = profile_flag {
            cfg.profile = ArchProfile::parse(profile)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(DidError::Config("lr must be finite and >= 0".into()));
        }
        if !self.decay.is_finite() || self.decay <= 0.0 || self.decay > 1.0 {
            return Err(DidError::Config("decay must lie in (0, 1]".into()));
        }
        if self.decay_interval == 0 {
            return Err(DidError::Config("decay_interval must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(DidError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DidError::Config("batch_size must be >= 1".into()));
        }
        if !self.holdout.is_finite() || !(0.0..1.0).contains(&self.holdout) {
            return Err(DidError::Config("holdout must lie in [0, 1)".into()));
        }
        if self.m == 0 {
            return Err(DidError::Config("m must be >= 1".into()));
        }
        if !self.fusion_lr.is_finite() || self.fusion_lr < 0.0 {
            return Err(DidError::Config("fusion_lr must be finite and >= 0".into()));
        }
        if self.fusion_epochs == 0 {
            return Err(DidError::Config("fusion_epochs must be >= 1".into()));
        }
        if self.fusion_batch == 0 {
            return Err(DidError::Config("fusion_batch must be >= 1".into()));
        }
        Ok(())
    }

    /// Training options for the dialect classifiers.
    pub fn train_options(&self, seed: u64) -> Result<TrainOptions> {
        Ok(TrainOptions {
            schedule: LrSchedule::new(self.lr, self.decay, self.decay_interval)?,
            epochs: self.epochs,
            batch_size: self.batch_size,
            holdout_frac: self.holdout,
            seed,
        })
    }

    /// Training options for the trainable fusion models.
    pub fn fusion_options(&self, seed: u64) -> Result<FusionTrainOptions> {
        Ok(FusionTrainOptions {
            schedule: LrSchedule::new(self.fusion_lr, self.decay, self.decay_interval)?,
            epochs: self.fusion_epochs,
            batch_size: self.fusion_batch,
            seed,
        })
    }
}
