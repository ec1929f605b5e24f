//! Transformer encoder-decoder with an optional contrastive (opponent) branch.
//!
//! # Parameter manifest
//!
//! Parameters are stored in this order (`L` = layer index, shared embeddings):
//!
//! | path                                   | shape            |
//! |----------------------------------------|------------------|
//! | `embed`                                | vocab × d_model  |
//! | `encoder.layerL.self_attn.{wq,wk,wv,wo}` | d_model × d_model |
//! | `encoder.layerL.ln1.{gain,bias}`       | d_model          |
//! | `encoder.layerL.ffn.{w1,b1,w2,b2}`     | d×f, f, f×d, d   |
//! | `encoder.layerL.ln2.{gain,bias}`       | d_model          |
//! | `decoder.layerL.self_attn.*`, `ln1`, `cross_attn.*`, `ln2`, `ffn.*`, `ln3` | as above |
//! | `branch.ln1.{gain,bias}`               | d_head           |
//! | `branch.ffn.{w1,b1,w2,b2}`             | d_head × d_branch_ffn, ... |
//! | `branch.ln2.{gain,bias}`               | d_head           |
//! | `branch.out`                           | d_head × vocab   |
//!
//! With `share_embeddings = false`, `embed` is replaced by `encoder.embed`,
//! `decoder.embed` and `output.weight` (all vocab × d_model).
//! Attention projections carry no bias. The `branch.*` block exists only for
//! contrastive models.

mod config;
pub mod checkpoint;
pub mod transformer;

pub use config::{
    parse_value, MaskStrategy, ModelConfig, OpponentConfig, OpponentFunction, BOS, EOS, N_RESERVED, PAD,
    UNK,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayerIdx {
    pub self_attn: AttnIdx,
    pub ln1: NormIdx,
    pub ffn: FfnIdx,
    pub ln2: NormIdx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayerIdx {
    pub self_attn: AttnIdx,
    pub ln1: NormIdx,
    pub cross_attn: AttnIdx,
    pub ln2: NormIdx,
    pub ffn: FfnIdx,
    pub ln3: NormIdx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchIdx {
    pub ln1: NormIdx,
    pub ffn: FfnIdx,
    pub ln2: NormIdx,
    pub out: usize,
}

/// Positions of every parameter in the store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    /// Output projection, vocab × d_model (transposed on use).
    pub out_proj: usize,
    pub encoder: Vec<EncoderLayerIdx>,
    pub decoder: Vec<DecoderLayerIdx>,
    pub branch: Option<BranchIdx>,
    /// Number of leading store entries that belong to the Transformer proper.
    pub n_core: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Xavier,
    Zeros,
    Ones,
}

struct Builder {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.entries.push((name, shape, init));
        self.entries.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let mut w = |n: &str| self.add(format!("{prefix}.{n}"), vec![d, d], Init::Xavier);
        AttnIdx {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{prefix}.w1"), vec![d, f], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), vec![f], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), vec![f, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }
}

fn build_layout(config: &ModelConfig, opponent: Option<&OpponentConfig>) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = config.d_model;
    let v = config.vocab_size;
    let emb_init = Init::Normal((d as f64).powf(-0.5));
    let mut b = Builder { entries: Vec::new() };
    let (src_embed, tgt_embed, out_proj_shared) = if config.share_embeddings {
        let e = b.add("embed".into(), vec![v, d], emb_init);
        (e, e, Some(e))
    } else {
        let s = b.add("encoder.embed".into(), vec![v, d], emb_init);
        let t = b.add("decoder.embed".into(), vec![v, d], emb_init);
        (s, t, None)
    };
    let encoder = (0..config.n_layers)
        .map(|l| {
            let p = format!("encoder.layer{l}");
            EncoderLayerIdx {
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln1: b.norm(&format!("{p}.ln1"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ffn),
                ln2: b.norm(&format!("{p}.ln2"), d),
            }
        })
        .collect();
    let decoder = (0..config.n_layers)
        .map(|l| {
            let p = format!("decoder.layer{l}");
            DecoderLayerIdx {
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln1: b.norm(&format!("{p}.ln1"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ffn),
                ln3: b.norm(&format!("{p}.ln3"), d),
            }
        })
        .collect();
    let out_proj = match out_proj_shared {
        Some(e) => e,
        None => b.add("output.weight".into(), vec![v, d], Init::Xavier),
    };
    let n_core = b.entries.len();
    let branch = opponent.map(|o| {
        let dk = config.d_head();
        BranchIdx {
            ln1: b.norm("branch.ln1", dk),
            ffn: b.ffn("branch.ffn", dk, o.d_branch_ffn),
            ln2: b.norm("branch.ln2", dk),
            out: b.add("branch.out".into(), vec![dk, v], Init::Xavier),
        }
    });
    let layout = Layout {
        src_embed,
        tgt_embed,
        out_proj,
        encoder,
        decoder,
        branch,
        n_core,
    };
    (layout, b.entries)
}

/// The documented parameter manifest: (path, shape) in store order.
pub fn manifest(config: &ModelConfig, opponent: Option<&OpponentConfig>) -> Vec<(String, Vec<usize>)> {
    build_layout(config, opponent)
        .1
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect()
}

/// Sinusoidal position encodings, `max_len × d` row-major.
pub fn positional_encoding<S: Scalar>(max_len: usize, d: usize) -> Vec<S> {
    let mut pe = vec![S::zero(); max_len * d];
    for pos in 0..max_len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = S::lit(angle.sin());
            if i + 1 < d {
                pe[pos * d + i + 1] = S::lit(angle.cos());
            }
        }
    }
    pe
}

/// Seed offset for the branch initializer, so the Transformer parameters are
/// identical with and without a branch.
const BRANCH_STREAM: u64 = 0x5eed_b4a1_c0de_0001;

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub opponent: Option<OpponentConfig>,
    pub params: ParamStore<S>,
    layout: Layout,
    pos_enc: Vec<S>,
}

impl<S: Scalar> Model<S> {
    /// Fresh model with seeded initialization. The Transformer part depends
    /// only on `config` and `seed`.
    pub fn new(config: ModelConfig, opponent: Option<OpponentConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(o) = &opponent {
            o.validate(&config)?;
        }
        let (layout, entries) = build_layout(&config, opponent.as_ref());
        let mut core_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut branch_rng = ChaCha8Rng::seed_from_u64(seed ^ BRANCH_STREAM);
        let mut params = ParamStore::new();
        for (i, (name, shape, init)) in entries.into_iter().enumerate() {
            let rng = if i < layout.n_core { &mut core_rng } else { &mut branch_rng };
            let n: usize = shape.iter().product();
            let data: Vec<S> = match init {
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| S::lit(dist.sample(rng))).collect()
                }
                Init::Xavier => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-a, a);
                    (0..n).map(|_| S::lit(dist.sample(rng))).collect()
                }
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        let pos_enc = positional_encoding(config.max_seq_len, config.d_model);
        Ok(Self {
            config,
            opponent,
            params,
            layout,
            pos_enc,
        })
    }

    /// Wraps an existing store after checking it against the manifest.
    pub fn from_params(config: ModelConfig, opponent: Option<OpponentConfig>, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        if let Some(o) = &opponent {
            o.validate(&config)?;
        }
        let (layout, entries) = build_layout(&config, opponent.as_ref());
        if entries.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} parameters, store has {}",
                entries.len(),
                params.len()
            )));
        }
        for (i, (name, shape, _)) in entries.iter().enumerate() {
            if params.name(i) != name || params.get(i).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected `{name}` {shape:?}, found `{}` {:?}",
                    params.name(i),
                    params.get(i).shape()
                )));
            }
        }
        let pos_enc = positional_encoding(config.max_seq_len, config.d_model);
        Ok(Self {
            config,
            opponent,
            params,
            layout,
            pos_enc,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn pos_enc(&self) -> &[S] {
        &self.pos_enc
    }

    pub fn is_contrastive(&self) -> bool {
        self.opponent.is_some()
    }

    /// Same Transformer parameters with a freshly initialized branch (or
    /// none). Used to continue a baseline checkpoint contrastively.
    pub fn with_opponent(&self, opponent: Option<OpponentConfig>, seed: u64) -> Result<Self> {
        let mut fresh = Model::new(self.config.clone(), opponent, seed)?;
        for i in 0..self.layout.n_core {
            *fresh.params.get_mut(i) = self.params.get(i).clone();
        }
        Ok(fresh)
    }

    /// Replaces the opponent configuration without touching parameters; only
    /// settings that do not change the branch shape may differ.
    pub fn set_opponent_config(&mut self, opponent: OpponentConfig) -> Result<()> {
        let current = self
            .opponent
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no contrastive branch".into()))?;
        if current.d_branch_ffn != opponent.d_branch_ffn {
            return Err(Error::config("d_branch_ffn", "cannot change on a trained branch"));
        }
        opponent.validate(&self.config)?;
        self.opponent = Some(opponent);
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            params.insert(name, t.cast::<T>()).expect("unique names");
        }
        Model::from_params(self.config.clone(), self.opponent.clone(), params).expect("same manifest")
    }
}
