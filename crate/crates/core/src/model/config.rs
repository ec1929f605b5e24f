use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Reserved token ids.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const N_RESERVED: usize = 4;

/// Transformer hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    /// Dropout rate in `[0, 1)`, applied only while training.
    pub dropout: f64,
    pub max_seq_len: usize,
    pub share_embeddings: bool,
}

impl ModelConfig {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size,
            dropout: 0.1,
            max_seq_len: 64,
            share_embeddings: true,
        }
    }

    /// Full-size base configuration.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            n_layers: 6,
            d_model: 512,
            n_heads: 8,
            d_ffn: 2048,
            vocab_size,
            dropout: 0.3,
            max_seq_len: 256,
            share_embeddings: true,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            ));
        }
        if self.vocab_size <= N_RESERVED {
            return Err(Error::config(
                "vocab_size",
                format!("must exceed the {N_RESERVED} reserved ids"),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// How the opponent masks the conventional attention row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskStrategy {
    /// Mask the single largest weight.
    Max,
    /// Mask the `k` largest weights.
    TopK(usize),
    /// Mask the largest weight, then keep masking down the sorted weights
    /// while consecutive ratios stay below the threshold.
    Dynamic(f64),
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskStrategy::Max => write!(f, "max"),
            MaskStrategy::TopK(k) => write!(f, "top_k:{k}"),
            MaskStrategy::Dynamic(t) => write!(f, "dynamic:{t}"),
        }
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    /// Accepts `max`, `top_k:K` (or `topK`), and `dynamic:T` (or `dynamic`,
    /// meaning threshold 1.02).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("mask_strategy", format!("unrecognized value `{s}`"));
        let s = s.trim();
        let strategy = if s == "max" {
            MaskStrategy::Max
        } else if s == "dynamic" {
            MaskStrategy::Dynamic(1.02)
        } else if let Some(t) = s.strip_prefix("dynamic:") {
            MaskStrategy::Dynamic(t.parse().map_err(|_| bad())?)
        } else if let Some(k) = s.strip_prefix("top_k:").or_else(|| s.strip_prefix("top")) {
            MaskStrategy::TopK(k.parse().map_err(|_| bad())?)
        } else {
            return Err(bad());
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl MaskStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskStrategy::TopK(0) => Err(Error::config("mask_strategy", "top_k needs k >= 1")),
            MaskStrategy::Dynamic(t) if !(t > 1.0) => {
                Err(Error::config("mask_strategy", "dynamic threshold must exceed 1"))
            }
            _ => Ok(()),
        }
    }
}

/// Transformation turning conventional weights into opponent weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpponentFunction {
    /// Mask the most attended position(s), then softmax.
    Mask,
    /// `softmax(1 - alpha)`
    OneMinus,
    /// `softmax(1 / alpha)`
    Reciprocal,
}

impl fmt::Display for OpponentFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpponentFunction::Mask => "mask",
            OpponentFunction::OneMinus => "one_minus",
            OpponentFunction::Reciprocal => "reciprocal",
        })
    }
}

impl FromStr for OpponentFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mask" => Ok(OpponentFunction::Mask),
            "one_minus" => Ok(OpponentFunction::OneMinus),
            "reciprocal" => Ok(OpponentFunction::Reciprocal),
            other => Err(Error::config(
                "opponent_function",
                format!("unrecognized value `{other}`"),
            )),
        }
    }
}

/// Contrastive branch configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct OpponentConfig {
    pub selected_layer: usize,
    pub selected_head: usize,
    /// Derive the opponent from the mean of all heads in `selected_layer`.
    pub average_heads: bool,
    pub mask_strategy: MaskStrategy,
    pub opponent_function: OpponentFunction,
    /// Inner feed-forward width of the branch; the branch width itself is the
    /// head dimension.
    pub d_branch_ffn: usize,
    /// Stop opponent-loss gradients from reaching the conventional weights.
    pub detach_opponent_input: bool,
}

impl OpponentConfig {
    pub fn new(model: &ModelConfig, selected_layer: usize, selected_head: usize) -> Self {
        Self {
            selected_layer,
            selected_head,
            average_heads: false,
            mask_strategy: MaskStrategy::Max,
            opponent_function: OpponentFunction::Mask,
            d_branch_ffn: 4 * model.d_head(),
            detach_opponent_input: false,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.selected_layer >= model.n_layers {
            return Err(Error::config(
                "selected_layer",
                format!("{} >= n_layers {}", self.selected_layer, model.n_layers),
            ));
        }
        if self.selected_head >= model.n_heads {
            return Err(Error::config(
                "selected_head",
                format!("{} >= n_heads {}", self.selected_head, model.n_heads),
            ));
        }
        if self.d_branch_ffn == 0 {
            return Err(Error::config("d_branch_ffn", "must be positive"));
        }
        self.mask_strategy.validate()
    }
}

/// Parses one `key = value` setting.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{}`", value.trim())))
}

impl ModelConfig {
    /// Settings in the order they are written to config and checkpoint files.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_layers", self.n_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ffn", self.d_ffn.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("dropout", self.dropout.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("share_embeddings", self.share_embeddings.to_string()),
        ]
    }

    /// Applies one setting; `Ok(false)` if the key is not a model key.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_layers" => self.n_layers = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "n_heads" => self.n_heads = parse_value(key, value)?,
            "d_ffn" => self.d_ffn = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "max_seq_len" => self.max_seq_len = parse_value(key, value)?,
            "share_embeddings" => self.share_embeddings = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl OpponentConfig {
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("selected_layer", self.selected_layer.to_string()),
            ("selected_head", self.selected_head.to_string()),
            ("average_heads", self.average_heads.to_string()),
            ("mask_strategy", self.mask_strategy.to_string()),
            ("opponent_function", self.opponent_function.to_string()),
            ("d_branch_ffn", self.d_branch_ffn.to_string()),
            ("detach_opponent_input", self.detach_opponent_input.to_string()),
        ]
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "selected_layer" => self.selected_layer = parse_value(key, value)?,
            "selected_head" => self.selected_head = parse_value(key, value)?,
            "average_heads" => self.average_heads = parse_value(key, value)?,
            "mask_strategy" => self.mask_strategy = value.parse()?,
            "opponent_function" => self.opponent_function = value.parse()?,
            "d_branch_ffn" => self.d_branch_ffn = parse_value(key, value)?,
            "detach_opponent_input" => self.detach_opponent_input = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_strategy_parsing() {
        assert_eq!("max".parse::<MaskStrategy>().unwrap(), MaskStrategy::Max);
        assert_eq!("top2".parse::<MaskStrategy>().unwrap(), MaskStrategy::TopK(2));
        assert_eq!("top_k:3".parse::<MaskStrategy>().unwrap(), MaskStrategy::TopK(3));
        assert_eq!(
            "dynamic".parse::<MaskStrategy>().unwrap(),
            MaskStrategy::Dynamic(1.02)
        );
        assert!("dynamic:0.9".parse::<MaskStrategy>().is_err());
        assert!("top_k:0".parse::<MaskStrategy>().is_err());
        for s in [MaskStrategy::Max, MaskStrategy::TopK(2), MaskStrategy::Dynamic(1.05)] {
            assert_eq!(s.to_string().parse::<MaskStrategy>().unwrap(), s);
        }
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut c = ModelConfig::desk(64);
        c.n_heads = 5;
        assert!(c.validate().is_err());
        assert!(ModelConfig::desk(64).validate().is_ok());
        assert!(ModelConfig::full(32000).validate().is_ok());
    }

    #[test]
    fn opponent_head_must_exist() {
        let m = ModelConfig::desk(64);
        assert!(OpponentConfig::new(&m, 1, 3).validate(&m).is_ok());
        assert!(OpponentConfig::new(&m, 2, 0).validate(&m).is_err());
        assert!(OpponentConfig::new(&m, 0, 4).validate(&m).is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let m = ModelConfig::full(100);
        let mut back = ModelConfig::desk(7);
        for (k, v) in m.to_pairs() {
            assert!(back.set_key(k, &v).unwrap());
        }
        assert_eq!(back, m);
        let mut o = OpponentConfig::new(&m, 2, 4);
        o.mask_strategy = MaskStrategy::Dynamic(1.02);
        o.average_heads = true;
        let mut ob = OpponentConfig::new(&m, 0, 0);
        for (k, v) in o.to_pairs() {
            assert!(ob.set_key(k, &v).unwrap());
        }
        assert_eq!(ob, o);
        assert!(!ob.set_key("lambda", "1").unwrap());
        assert!(back.set_key("d_model", "wide").is_err());
    }
}
