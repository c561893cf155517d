//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LeoError, Result};
use crate::objective::{ContrastiveConfig, ContrastiveVariant};
use crate::scorer::ScoringMode;
use crate::selector::GateMode;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Statements per function (`L`).
    pub seq_len: usize,
    /// Statement vector width (`d`).
    pub dim: usize,
    pub vocab_max: usize,
    pub selector_hidden: usize,
    pub classifier_hidden: usize,
    /// Keep probability of hidden-layer dropout.
    pub retain: f64,
    /// Keep probability of embedding dropout.
    pub embed_retain: f64,
    pub kernel_size: usize,
    pub nu: f64,
    pub tau: f64,
    pub lambda: f64,
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    /// Fraction of the ID data held out for threshold calibration.
    pub val_fraction: f64,
    pub seed: u64,
    pub scoring_mode: ScoringMode,
    pub variant: ContrastiveVariant,
    pub gate_mode: GateMode,
    /// Disables the random-mask step and the contrastive term.
    pub ablate_cd: bool,
    pub kmeans_iters: usize,
    pub quantile: f64,
    /// Fixed covariance shrinkage; `None` uses the trace-relative default.
    pub shrinkage: Option<f64>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            seq_len: 100,
            dim: 150,
            vocab_max: 10_000,
            selector_hidden: 100,
            classifier_hidden: 100,
            retain: 0.8,
            embed_retain: 0.8,
            kernel_size: 3,
            nu: 0.5,
            tau: 0.5,
            lambda: 0.1,
            k: 3,
            lr: 1e-3,
            batch_size: 128,
            epochs: 10,
            clip_norm: 5.0,
            val_fraction: 0.2,
            seed,
            scoring_mode: ScoringMode::Pooled,
            variant: ContrastiveVariant::Cluster,
            gate_mode: GateMode::Expected,
            ablate_cd: false,
            kmeans_iters: 10,
            quantile: 0.95,
            shrinkage: None,
        }
    }

    /// The desk-scale preset used by the synthetic end-to-end run.
    pub fn synthetic_preset(seed: u64) -> Self {
        TrainConfig {
            seq_len: 40,
            dim: 32,
            batch_size: 64,
            ..TrainConfig::new(seed)
        }
    }

    /// λ actually applied (zero under the ablation).
    pub fn effective_lambda(&self) -> f64 {
        if self.ablate_cd {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            lambda: self.effective_lambda(),
            k: self.k,
            variant: self.variant,
            kmeans_iters: self.kmeans_iters,
        }
    }

    /// Hard errors for unusable values; warnings for values outside the
    /// usual search grid.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("dim", self.dim),
            ("selector_hidden", self.selector_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("kernel_size", self.kernel_size),
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("kmeans_iters", self.kmeans_iters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LeoError::config(format!("{name} must be positive")));
            }
        }
        if self.vocab_max < 3 {
            return Err(LeoError::config("vocab_max must be at least 3"));
        }
        for (name, v) in [("retain", self.retain), ("embed_retain", self.embed_retain)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(LeoError::config(format!("{name} must be in (0, 1]")));
            }
        }
        for (name, v) in [("nu", self.nu), ("tau", self.tau), ("lr", self.lr), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LeoError::config(format!("{name} must be positive")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LeoError::config("lambda must be non-negative"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(LeoError::config("val_fraction must be in (0, 1)"));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(LeoError::config("quantile must be in (0, 1)"));
        }
        if let Some(s) = self.shrinkage {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(LeoError::config("shrinkage must be non-negative"));
            }
        }
        let grid: [(&str, bool); 5] = [
            ("selector_hidden", [100, 300].contains(&self.selector_hidden)),
            ("classifier_hidden", [100, 300].contains(&self.classifier_hidden)),
            ("nu", [0.5, 1.0].contains(&self.nu)),
            ("tau", [0.5, 1.0].contains(&self.tau)),
            ("k", [1, 3, 5, 7, 9].contains(&self.k)),
        ];
        for (name, ok) in grid {
            if !ok {
                log::warn!("{name} is outside the usual search grid");
            }
        }
        if ![0.01, 0.1, 1.0].contains(&self.lambda) {
            log::warn!("lambda is outside the usual search grid");
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| LeoError::config(format!("invalid value `{v}` for {key}")))
        }
        match key {
            "seq_len" => self.seq_len = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "vocab_max" => self.vocab_max = num(key, value)?,
            "selector_hidden" => self.selector_hidden = num(key, value)?,
            "classifier_hidden" => self.classifier_hidden = num(key, value)?,
            "retain" => self.retain = num(key, value)?,
            "embed_retain" => self.embed_retain = num(key, value)?,
            "kernel_size" => self.kernel_size = num(key, value)?,
            "nu" => self.nu = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "kmeans_iters" => self.kmeans_iters = num(key, value)?,
            "quantile" => self.quantile = num(key, value)?,
            "ablate_cd" => self.ablate_cd = num(key, value)?,
            "shrinkage" => {
                self.shrinkage = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "scoring_mode" => {
                self.scoring_mode =
                    ScoringMode::parse(value).ok_or_else(|| LeoError::config(format!("unknown scoring mode `{value}`")))?
            }
            "variant" => {
                self.variant = ContrastiveVariant::parse(value)
                    .ok_or_else(|| LeoError::config(format!("unknown contrastive variant `{value}`")))?
            }
            "gate_mode" => {
                self.gate_mode =
                    GateMode::parse(value).ok_or_else(|| LeoError::config(format!("unknown gate mode `{value}`")))?
            }
            _ => return Err(LeoError::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over `self`. Blank lines and lines starting
    /// with `#` are ignored. Returns whether a seed was given.
    pub fn apply_text(&mut self, text: &str) -> Result<bool> {
        let mut seed_seen = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LeoError::config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            self.set(k, v.trim())
                .map_err(|e| LeoError::config(format!("line {}: {e}", n + 1)))?;
            seed_seen |= k == "seed";
        }
        Ok(seed_seen)
    }

    /// Parses a full configuration; `seed` must be present.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::new(0);
        if !cfg.apply_text(text)? {
            return Err(LeoError::config("configuration must set `seed`"));
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Canonical `key = value` rendering; [`TrainConfig::from_text`] inverts it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seq_len", self.seq_len.to_string());
        kv("dim", self.dim.to_string());
        kv("vocab_max", self.vocab_max.to_string());
        kv("selector_hidden", self.selector_hidden.to_string());
        kv("classifier_hidden", self.classifier_hidden.to_string());
        kv("retain", self.retain.to_string());
        kv("embed_retain", self.embed_retain.to_string());
        kv("kernel_size", self.kernel_size.to_string());
        kv("nu", self.nu.to_string());
        kv("tau", self.tau.to_string());
        kv("lambda", self.effective_lambda().to_string());
        kv("k", self.k.to_string());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("seed", self.seed.to_string());
        kv("scoring_mode", self.scoring_mode.as_str().to_string());
        kv("variant", self.variant.as_str().to_string());
        kv("gate_mode", self.gate_mode.as_str().to_string());
        kv("ablate_cd", self.ablate_cd.to_string());
        kv("kmeans_iters", self.kmeans_iters.to_string());
        kv("quantile", self.quantile.to_string());
        kv("shrinkage", self.shrinkage.map_or("auto".to_string(), |v| v.to_string()));
        s
    }

    /// One-line summary for reports.
    pub fn fingerprint(&self) -> String {
        format!(
            "seed={} L={} d={} K={} lambda={} tau={} nu={} epochs={} batch={} variant={} ablate_cd={}",
            self.seed,
            self.seq_len,
            self.dim,
            self.k,
            self.effective_lambda(),
            self.tau,
            self.nu,
            self.epochs,
            self.batch_size,
            self.variant.as_str(),
            self.ablate_cd
        )
    }
}
