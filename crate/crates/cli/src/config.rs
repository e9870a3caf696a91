//! Flat `key = value` run configuration with `#` comments.

use std::path::{Path, PathBuf};

use flowcon::flow::{default_hidden, DEFAULT_BLOCKS};
use flowcon::train::TrainConfig;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub train: PathBuf,
    pub out_dir: PathBuf,
    /// Expected feature dimension; checked against the training file when set.
    pub d: Option<usize>,
    pub blocks: usize,
    /// Coupling-net width; `None` picks the default for the data dimension.
    pub hidden: Option<usize>,
    pub resume: Option<PathBuf>,
    pub train_config: TrainConfig,
}

const KEYS: &[&str] = &[
    "train",
    "out_dir",
    "d",
    "blocks",
    "hidden",
    "resume",
    "epochs",
    "batch_size",
    "seed",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "lambda",
    "tau1",
    "tau2",
    "exponent_clamp",
    "contrastive",
    "checkpoint_every",
    "log_every",
];

impl RunConfig {
    pub fn hidden_for(&self, d: usize) -> usize {
        self.hidden.unwrap_or_else(|| default_hidden(d))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, overrides, base)
    }

    /// Parses `text`, then applies `overrides` (each `key=value`). Relative
    /// paths are resolved against `base`.
    pub fn parse(text: &str, overrides: &[String], base: &Path) -> Result<Self, CliError> {
        let mut pairs: Vec<(String, String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string(), format!("line {}", n + 1)));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {o:?} is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string(), format!("override {o:?}")));
        }

        let mut cfg = RunConfig {
            train: PathBuf::new(),
            out_dir: PathBuf::new(),
            d: None,
            blocks: DEFAULT_BLOCKS,
            hidden: None,
            resume: None,
            train_config: TrainConfig::default(),
        };
        let (mut have_train, mut have_out) = (false, false);
        for (key, value, at) in &pairs {
            if !KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!("{at}: unknown key {key:?}")));
            }
            let bad = |what: &str| CliError::Config(format!("{at}: {key} = {value:?} is not {what}"));
            let int = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
            let real = || value.parse::<f64>().map_err(|_| bad("a number"));
            let path = || base.join(value);
            let tc = &mut cfg.train_config;
            match key.as_str() {
                "train" => {
                    cfg.train = path();
                    have_train = true;
                }
                "out_dir" => {
                    cfg.out_dir = path();
                    have_out = true;
                }
                "resume" => cfg.resume = Some(path()),
                "d" => cfg.d = Some(int()?),
                "blocks" => cfg.blocks = int()?,
                "hidden" => cfg.hidden = Some(int()?),
                "epochs" => tc.epochs = int()?,
                "batch_size" => tc.batch_size = int()?,
                "seed" => tc.seed = value.parse().map_err(|_| bad("a non-negative integer"))?,
                "lr" => tc.optimizer.lr = real()?,
                "beta1" => tc.optimizer.beta1 = real()?,
                "beta2" => tc.optimizer.beta2 = real()?,
                "eps" => tc.optimizer.eps = real()?,
                "weight_decay" => tc.optimizer.weight_decay = real()?,
                "lambda" => tc.loss.lambda = real()?,
                "tau1" => tc.loss.tau1 = real()?,
                "tau2" => tc.loss.tau2 = real()?,
                "exponent_clamp" => tc.loss.exponent_clamp = real()?,
                "contrastive" => tc.loss.contrastive = value.parse().map_err(|_| bad("true or false"))?,
                "checkpoint_every" => tc.checkpoint_every = int()?,
                "log_every" => tc.log_every = int()?,
                _ => unreachable!("key list checked above"),
            }
        }
        if !have_train || !have_out {
            return Err(CliError::Config("config must set both `train` and `out_dir`".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.blocks < 1 {
            return Err(CliError::Config("blocks must be at least 1".into()));
        }
        if self.hidden == Some(0) {
            return Err(CliError::Config("hidden must be at least 1".into()));
        }
        if matches!(self.d, Some(d) if d < 2) {
            return Err(CliError::Config("d must be at least 2".into()));
        }
        self.train_config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        RunConfig::parse(text, &[], Path::new("/base"))
    }

    #[test]
    fn defaults_and_paths() {
        let cfg = parse("train = data/train.fcft  # features\nout_dir = run\n").unwrap();
        assert_eq!(cfg.train, Path::new("/base/data/train.fcft"));
        assert_eq!(cfg.train_config, TrainConfig::default());
        assert_eq!(cfg.train_config.loss.tau1, 1.5);
        assert_eq!(cfg.train_config.loss.tau2, 0.1);
        assert_eq!(cfg.train_config.loss.lambda, 0.07);
        assert_eq!(cfg.train_config.epochs, 700);
        assert_eq!(cfg.train_config.batch_size, 64);
        assert_eq!(cfg.blocks, 8);
        assert_eq!(cfg.hidden_for(512), 1024);
    }

    #[test]
    fn overrides_win() {
        let cfg = RunConfig::parse(
            "train=a\nout_dir=b\nlambda=0.5\n",
            &["lambda=0.3".into(), "contrastive=false".into()],
            Path::new(""),
        )
        .unwrap();
        assert_eq!(cfg.train_config.loss.lambda, 0.3);
        assert!(!cfg.train_config.loss.contrastive);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse("train=a\nout_dir=b\nlearning_rate=1"), Err(CliError::Config(_))));
        assert!(matches!(parse("train=a\n"), Err(CliError::Config(_))));
        assert!(matches!(parse("train=a\nout_dir=b\nepochs=0"), Err(CliError::Config(_))));
        assert!(matches!(parse("train=a\nout_dir=b\nbatch_size=1"), Err(CliError::Config(_))));
        assert!(matches!(parse("train=a\nout_dir=b\ntau2=-1"), Err(CliError::Config(_))));
        assert!(matches!(parse("train=a\nout_dir=b\nlr=fast"), Err(CliError::Config(_))));
        assert!(matches!(parse("train=a\nout_dir=b\njunk"), Err(CliError::Config(_))));
    }
}
