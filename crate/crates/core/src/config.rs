//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Later files and `--set`
//! overrides win. Keys under `manifest.` are written by training runs and
//! ignored on input, so a run manifest is itself a valid config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{parse_value, ModelConfig, OpponentConfig};
use crate::train::TrainConfig;

/// Message for the rejected negated-softmax objective.
pub const NEGATED_SOFTMAX_PITFALL: &str = "objective `negated_softmax` (log P_c - λ log P_softmax) is not supported: \
minimizing a softmax probability drives log P_o toward -infinity and training fails to converge (documented pitfall); \
use `joint`, which maximizes log P_c + λ log P_o with a softmin opponent";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub contrastive: bool,
    pub opponent: OpponentConfig,
    /// Explicit branch width; defaults to 4 × d_head.
    pub d_branch_ffn: Option<usize>,
    pub train: TrainConfig,
    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Continue from this checkpoint's Transformer parameters.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk(64);
        let opponent = OpponentConfig::new(&model, model.n_layers - 1, 0);
        Self {
            model,
            contrastive: false,
            opponent,
            d_branch_ffn: None,
            train: TrainConfig::default(),
            train_source: None,
            train_target: None,
            vocab: None,
            out_dir: PathBuf::from("run"),
            init_checkpoint: None,
        }
    }
}

/// Splits config text into `(key, value, line number)` records.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("{origin}:{}", no + 1), format!("expected `key = value`, found `{line}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string(), no + 1));
    }
    Ok(out)
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (value != "none" && !value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key.starts_with("manifest.") || self.model.set_key(key, value)? {
            return Ok(());
        }
        if key == "d_branch_ffn" {
            self.d_branch_ffn = optional(key, value)?;
            return Ok(());
        }
        if self.opponent.set_key(key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "contrastive" => self.contrastive = parse_value(key, value)?,
            "objective" => match value {
                "joint" => {}
                "negated_softmax" => return Err(Error::config(key, NEGATED_SOFTMAX_PITFALL)),
                other => return Err(Error::config(key, format!("unknown objective `{other}` (expected `joint`)"))),
            },
            "lambda" => t.lambda = parse_value(key, value)?,
            "base_lr" => t.base_lr = parse_value(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse_value(key, value)?,
            "adam_epsilon" => t.adam_epsilon = parse_value(key, value)?,
            "warmup_steps" => t.warmup_steps = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "max_epochs" => t.max_epochs = parse_value(key, value)?,
            "max_steps" => t.max_steps = optional(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_value(key, value)?,
            "grad_clip" => t.grad_clip = optional(key, value)?,
            "train_source" => self.train_source = path(value),
            "train_target" => self.train_target = path(value),
            "vocab" => self.vocab = path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "init_checkpoint" => self.init_checkpoint = path(value),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (k, v, _) in parse_pairs(text, origin)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, file: &Path) -> Result<()> {
        let text = std::fs::read_to_string(file)
            .map_err(|_| Error::Usage(format!("cannot read config file {}", file.display())))?;
        self.apply_text(&text, &file.display().to_string())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// The opponent configuration to build, if contrastive.
    pub fn opponent_config(&self) -> Option<OpponentConfig> {
        self.contrastive.then(|| {
            let mut o = self.opponent.clone();
            o.d_branch_ffn = self.d_branch_ffn.unwrap_or(4 * self.model.d_head());
            o
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(o) = self.opponent_config() {
            o.validate(&self.model)?;
        }
        self.train.validate()
    }

    /// Every setting, in a form `apply_text` reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        for (k, v) in self.model.to_pairs() {
            kv(k, v);
        }
        kv("contrastive", self.contrastive.to_string());
        for (k, v) in self.opponent.to_pairs() {
            if k != "d_branch_ffn" {
                kv(k, v);
            }
        }
        kv("d_branch_ffn", self.d_branch_ffn.map_or("none".into(), |d| d.to_string()));
        let t = &self.train;
        kv("objective", "joint".into());
        kv("lambda", t.lambda.to_string());
        kv("base_lr", t.base_lr.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_epsilon", t.adam_epsilon.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("max_steps", t.max_steps.map_or("none".into(), |s| s.to_string()));
        kv("seed", t.seed.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string()));
        let p = |x: &Option<PathBuf>| x.as_ref().map_or("none".into(), |p| p.display().to_string());
        kv("train_source", p(&self.train_source));
        kv("train_target", p(&self.train_target));
        kv("vocab", p(&self.vocab));
        kv("out_dir", self.out_dir.display().to_string());
        kv("init_checkpoint", p(&self.init_checkpoint));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MaskStrategy;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# desk run\nlambda = 0.3\ncontrastive = true\nmask_strategy = top_k:2 # ablation\nmax_steps = 50\nvocab = data/vocab.txt\n",
            "t",
        )
        .unwrap();
        assert_eq!(c.train.lambda, 0.3);
        assert_eq!(c.opponent.mask_strategy, MaskStrategy::TopK(2));
        assert_eq!(c.train.max_steps, Some(50));
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "round").unwrap();
        assert_eq!(back, c);
        assert_eq!(c.opponent_config().unwrap().d_branch_ffn, 64);
    }

    #[test]
    fn negated_softmax_objective_is_rejected() {
        let mut c = RunConfig::default();
        let err = c.set("objective", "negated_softmax").unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("pitfall"));
        assert!(c.set("objective", "joint").is_ok());
    }

    #[test]
    fn unknown_and_malformed_keys_name_the_key() {
        let mut c = RunConfig::default();
        assert!(c.set("lamda", "1").unwrap_err().to_string().contains("lamda"));
        assert!(c.set("batch_size", "many").unwrap_err().to_string().contains("batch_size"));
        assert!(c.apply_text("no equals sign", "f").is_err());
        assert!(c.set("manifest.hash", "abc").is_ok());
    }
}
