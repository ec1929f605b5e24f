//! Transformer summarizer with contrastive attention.
//!
//! The model pairs the usual encoder-decoder attention with an *opponent*
//! attention derived from one synchronous head: its most attended source
//! positions are masked, the rest renormalized, and a small branch ending
//! in softmin turns the result into an opponent word distribution `P_o`.
//! Training and beam search maximize `log P_c + λ log P_o`.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! scalar to `f64`, which is what training and the command line use.

pub mod ablation;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod heatmap;
pub mod kernels;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type Model = model::Model<f64>;
pub type Tape<'p> = autodiff::Tape<'p, f64>;
pub type AttentionRecord = model::transformer::AttentionRecord<f64>;
