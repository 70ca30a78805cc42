//! Run configuration as flat `key = value` text.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use memedit_core::baselines::{LU_DELTA_FC, LU_DELTA_QA};
use memedit_core::datagen::Task;
use memedit_core::optim::TrainConfig;
use memedit_core::text::{DEFAULT_DIM, DEFAULT_MAX_LEN};
use memedit_core::ScopeVariant;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub dim: usize,
    /// Output slots of the base and counterfactual predictors.
    pub slots: usize,
    pub max_len: usize,
    pub variant: ScopeVariant,
    /// LU distance threshold.
    pub delta: f64,
    /// Edits per batch.
    pub k: usize,
    pub batch_size: usize,
    pub base_epochs: usize,
    pub base_lr: f64,
    /// Encoder width of the scope classifier.
    pub cls_dim: usize,
    pub cls_epochs: usize,
    pub cls_lr: f64,
    pub cls_negatives: usize,
    pub swap_copies: usize,
    pub swap_mismatches: usize,
    pub cf_epochs: usize,
    pub cf_lr: f64,
    pub unlikelihood_weight: f64,
    pub ft_lr: f64,
    pub ft_steps: usize,
    /// Directory holding every artifact of the run.
    pub workdir: PathBuf,
}

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        let (slots, delta) = match task {
            Task::Qa | Task::QaHard => (1, LU_DELTA_QA),
            Task::Fc => (1, LU_DELTA_FC),
            Task::ConvSent => (4, LU_DELTA_QA),
        };
        // Held-out topics never occur in a labelled pair, so the classifier
        // learns to match unseen tokens from swapped pairs.
        let (cls_dim, swap_copies, swap_mismatches) = match task {
            Task::ConvSent => (64, 3, 12),
            _ => (DEFAULT_DIM, 0, 0),
        };
        // Responses are noise around a sentiment; longer fits only memorize it.
        let (base_epochs, cf_epochs) = match task {
            Task::ConvSent => (50, 30),
            _ => (150, 50),
        };
        RunConfig {
            seed: 0,
            task,
            dim: DEFAULT_DIM,
            slots,
            max_len: DEFAULT_MAX_LEN,
            variant: ScopeVariant::Cross,
            delta,
            k: 10,
            batch_size: 32,
            base_epochs,
            base_lr: 0.01,
            cls_dim,
            cls_epochs: 30,
            cls_lr: 0.003,
            cls_negatives: 10,
            swap_copies,
            swap_mismatches,
            cf_epochs,
            cf_lr: 0.01,
            unlikelihood_weight: 1.0,
            ft_lr: 0.01,
            ft_steps: 100,
            workdir: PathBuf::from("run"),
        }
    }

    pub fn base_training(&self) -> TrainConfig {
        TrainConfig::adam(self.base_epochs, self.base_lr, self.batch_size)
    }

    pub fn classifier_training(&self) -> TrainConfig {
        TrainConfig {
            negatives_per_record: self.cls_negatives,
            swap_copies: self.swap_copies,
            swap_mismatches: self.swap_mismatches,
            ..TrainConfig::adam(self.cls_epochs, self.cls_lr, self.batch_size)
        }
    }

    pub fn cf_training(&self) -> TrainConfig {
        TrainConfig::adam(self.cf_epochs, self.cf_lr, self.batch_size)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "task" => {
                self.task =
                    Task::parse(value).ok_or_else(|| ConfigError::BadValue { key: key.into(), value: value.into() })?
            }
            "dim" => self.dim = num(key, value)?,
            "slots" => self.slots = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "variant" => {
                self.variant = ScopeVariant::parse(value)
                    .ok_or_else(|| ConfigError::BadValue { key: key.into(), value: value.into() })?
            }
            "delta" => self.delta = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "base_epochs" => self.base_epochs = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "cls_dim" => self.cls_dim = num(key, value)?,
            "cls_epochs" => self.cls_epochs = num(key, value)?,
            "cls_lr" => self.cls_lr = num(key, value)?,
            "cls_negatives" => self.cls_negatives = num(key, value)?,
            "swap_copies" => self.swap_copies = num(key, value)?,
            "swap_mismatches" => self.swap_mismatches = num(key, value)?,
            "cf_epochs" => self.cf_epochs = num(key, value)?,
            "cf_lr" => self.cf_lr = num(key, value)?,
            "unlikelihood_weight" => self.unlikelihood_weight = num(key, value)?,
            "ft_lr" => self.ft_lr = num(key, value)?,
            "ft_steps" => self.ft_steps = num(key, value)?,
            "workdir" => self.workdir = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Parses config text on top of `self`. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(n + 1))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("dim", self.dim),
            ("slots", self.slots),
            ("max_len", self.max_len),
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("base_epochs", self.base_epochs),
            ("cls_dim", self.cls_dim),
            ("cls_epochs", self.cls_epochs),
            ("cf_epochs", self.cf_epochs),
            ("ft_steps", self.ft_steps),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ConfigError::NotPositive(k.into()));
            }
        }
        let rates = [
            ("delta", self.delta),
            ("base_lr", self.base_lr),
            ("cls_lr", self.cls_lr),
            ("cf_lr", self.cf_lr),
            ("ft_lr", self.ft_lr),
        ];
        for (k, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::NotPositive(k.into()));
            }
        }
        if !(self.unlikelihood_weight >= 0.0) {
            return Err(ConfigError::NotPositive("unlikelihood_weight".into()));
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "task = {}", self.task.as_str())?;
        writeln!(f, "dim = {}", self.dim)?;
        writeln!(f, "slots = {}", self.slots)?;
        writeln!(f, "max_len = {}", self.max_len)?;
        writeln!(f, "variant = {}", self.variant.as_str())?;
        writeln!(f, "delta = {:?}", self.delta)?;
        writeln!(f, "k = {}", self.k)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "base_epochs = {}", self.base_epochs)?;
        writeln!(f, "base_lr = {:?}", self.base_lr)?;
        writeln!(f, "cls_dim = {}", self.cls_dim)?;
        writeln!(f, "cls_epochs = {}", self.cls_epochs)?;
        writeln!(f, "cls_lr = {:?}", self.cls_lr)?;
        writeln!(f, "cls_negatives = {}", self.cls_negatives)?;
        writeln!(f, "swap_copies = {}", self.swap_copies)?;
        writeln!(f, "swap_mismatches = {}", self.swap_mismatches)?;
        writeln!(f, "cf_epochs = {}", self.cf_epochs)?;
        writeln!(f, "cf_lr = {:?}", self.cf_lr)?;
        writeln!(f, "unlikelihood_weight = {:?}", self.unlikelihood_weight)?;
        writeln!(f, "ft_lr = {:?}", self.ft_lr)?;
        writeln!(f, "ft_steps = {}", self.ft_steps)?;
        writeln!(f, "workdir = {}", self.workdir.display())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("line {0}: expected `key = value`")]
    Syntax(usize),
    #[error("`{0}` must be positive")]
    NotPositive(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_parses_back() {
        let mut c = RunConfig::for_task(Task::Fc);
        c.delta = 0.1 + 0.2;
        c.variant = ScopeVariant::Embed;
        let mut back = RunConfig::for_task(Task::Qa);
        back.apply_text(&c.to_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let mut c = RunConfig::for_task(Task::Qa);
        c.apply_text("# run\nk = 75 # batch\n\n").unwrap();
        assert_eq!(c.k, 75);
        assert_eq!(c.apply_text("lr = 1"), Err(ConfigError::UnknownKey("lr".into())));
        assert_eq!(c.apply_text("k 3"), Err(ConfigError::Syntax(1)));
    }

    #[test]
    fn zero_dim_is_rejected() {
        let mut c = RunConfig::for_task(Task::Qa);
        c.dim = 0;
        assert_eq!(c.validate(), Err(ConfigError::NotPositive("dim".into())));
    }
}
