//! Text checkpoints.
//!
//! ```text
//! format = contrastive-checkpoint-1
//! n_layers = 2
//! ...                        model keys, then `contrastive` and opponent keys
//! meta.lambda = 1
//! tensor embed 64 64
//! 0.0123 -0.2 ...            one line of values per tensor
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so
//! save/load is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, OpponentConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FORMAT: &str = "contrastive-checkpoint-1";

#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    /// Free-form `meta.*` records (step, lambda, seed...).
    pub meta: BTreeMap<String, String>,
}

pub fn to_text<S: Scalar>(model: &Model<S>, meta: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    writeln!(out, "format = {FORMAT}").unwrap();
    for (k, v) in model.config.to_pairs() {
        writeln!(out, "{k} = {v}").unwrap();
    }
    writeln!(out, "contrastive = {}", model.opponent.is_some()).unwrap();
    if let Some(o) = &model.opponent {
        for (k, v) in o.to_pairs() {
            writeln!(out, "{k} = {v}").unwrap();
        }
    }
    for (k, v) in meta {
        writeln!(out, "meta.{k} = {v}").unwrap();
    }
    for (name, t) in model.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(out, "tensor {name} {}", dims.join(" ")).unwrap();
        let vals: Vec<String> = t.data().iter().map(|v| v.as_f64().to_string()).collect();
        writeln!(out, "{}", vals.join(" ")).unwrap();
    }
    out
}

pub fn from_text<S: Scalar>(text: &str) -> Result<Checkpoint<S>> {
    let bad = |line: usize, msg: String| Error::Checkpoint(format!("line {}: {msg}", line + 1));
    let mut lines = text.lines().enumerate();
    let mut config = ModelConfig::desk(0);
    let mut opponent: Option<OpponentConfig> = None;
    let mut pending_opp: Vec<(String, String)> = Vec::new();
    let mut meta = BTreeMap::new();
    let mut params = ParamStore::new();
    let mut format_seen = false;
    while let Some((no, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().ok_or_else(|| bad(no, "tensor without name".into()))?;
            let shape = parts
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(no, format!("bad dimension: {e}")))?;
            let (vno, vline) = lines
                .next()
                .ok_or_else(|| bad(no, format!("tensor `{name}` has no values")))?;
            let data = vline
                .split_whitespace()
                .map(|v| v.parse::<f64>().map(S::lit))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(vno, format!("bad value: {e}")))?;
            let t = Tensor::new(shape, data).map_err(|e| bad(vno, e.to_string()))?;
            params.insert(name, t)?;
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(no, format!("expected `key = value`, found `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "format" {
            if v != FORMAT {
                return Err(bad(no, format!("unknown format `{v}`")));
            }
            format_seen = true;
        } else if let Some(mk) = k.strip_prefix("meta.") {
            meta.insert(mk.to_string(), v.to_string());
        } else if k == "contrastive" {
            if super::parse_value::<bool>(k, v)? {
                opponent = Some(OpponentConfig::new(&config, 0, 0));
            }
        } else if !config.set_key(k, v)? {
            pending_opp.push((k.to_string(), v.to_string()));
        }
    }
    if !format_seen {
        return Err(Error::Checkpoint("missing `format` record".into()));
    }
    if let Some(o) = opponent.as_mut() {
        let default_ffn = 4 * config.d_head();
        o.d_branch_ffn = default_ffn;
        for (k, v) in &pending_opp {
            if !o.set_key(k, v)? {
                return Err(Error::Checkpoint(format!("unknown key `{k}`")));
            }
        }
    } else if let Some((k, _)) = pending_opp.first() {
        return Err(Error::Checkpoint(format!("unknown key `{k}`")));
    }
    let model = Model::from_params(config, opponent, params)?;
    Ok(Checkpoint { model, meta })
}

/// Writes through a temporary file and a rename.
pub fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

/// Saves a checkpoint and returns the sha256 of its bytes.
pub fn save<S: Scalar>(model: &Model<S>, meta: &BTreeMap<String, String>, path: &Path) -> Result<String> {
    let text = to_text(model, meta);
    atomic_write(path, &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn load<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_text(&text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the model configuration and every Transformer parameter, leaving
/// out the contrastive branch and its settings.
pub fn core_hash<S: Scalar>(model: &Model<S>) -> String {
    let mut h = Sha256::new();
    for (k, v) in model.config.to_pairs() {
        h.update(format!("{k}={v}\n"));
    }
    for i in 0..model.layout().n_core {
        let t = model.params.get(i);
        h.update(model.params.name(i));
        h.update(format!("{:?}", t.shape()));
        for v in t.data() {
            h.update(v.as_f64().to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
