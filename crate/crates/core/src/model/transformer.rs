//! Forward passes of the baseline Transformer: attention, encoder stack,
//! teacher-forced decoder stack, and capture of encoder-decoder attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttnIdx, FfnIdx, Model, NormIdx, PAD};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dropout source for one forward pass. `Dropout::off()` makes the pass
/// deterministic.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        if rate <= 0.0 {
            return Self::off();
        }
        Self {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn apply<S: Scalar>(&mut self, tape: &mut Tape<'_, S>, x: NodeId) -> Result<NodeId> {
        match self.rng.as_mut() {
            Some(rng) => tape.dropout(x, self.rate, rng),
            None => Ok(x),
        }
    }
}

/// One head's captured encoder-decoder attention on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadCapture {
    /// `tgt_len × src_len` attention weights.
    pub weights: NodeId,
    /// `src_len × d_head` value vectors of this head.
    pub values: NodeId,
}

/// Encoder output on a tape together with the source padding mask.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub out: NodeId,
    pub pad: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `tgt_len × vocab` pre-softmax scores.
    pub logits: NodeId,
    /// Encoder-decoder attention, indexed `[layer][head]`.
    pub cross: Vec<Vec<HeadCapture>>,
}

/// Encoder-decoder attention weights of every head for one sentence pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<S> {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Layer-major: index `layer * n_heads + head`, each `tgt_len × src_len`.
    pub weights: Vec<Tensor<S>>,
    /// Source padding mask (true = padding column).
    pub src_pad: Vec<bool>,
    /// Value vectors (`src_len × d_head`) of the opponent's head, when the
    /// model has a contrastive branch.
    pub selected_values: Option<Tensor<S>>,
}

impl<S: Scalar> AttentionRecord<S> {
    pub fn capture(tape: &Tape<'_, S>, model: &Model<S>, dec: &DecoderOutput, src_pad: &[bool]) -> Self {
        let weights = dec
            .cross
            .iter()
            .flat_map(|layer| layer.iter().map(|h| tape.tensor(h.weights)))
            .collect();
        let selected_values = model
            .opponent
            .as_ref()
            .map(|o| tape.tensor(dec.cross[o.selected_layer][o.selected_head].values));
        Self {
            n_layers: dec.cross.len(),
            n_heads: dec.cross.first().map_or(0, Vec::len),
            weights,
            src_pad: src_pad.to_vec(),
            selected_values,
        }
    }

    pub fn head(&self, layer: usize, head: usize) -> &Tensor<S> {
        &self.weights[layer * self.n_heads + head]
    }

    /// Mean over the heads of one layer.
    pub fn layer_mean(&self, layer: usize) -> Tensor<S> {
        let first = self.head(layer, 0);
        let mut data = vec![S::zero(); first.numel()];
        for h in 0..self.n_heads {
            for (d, &v) in data.iter_mut().zip(self.head(layer, h).data()) {
                *d += v;
            }
        }
        let n = S::from_usize(self.n_heads).unwrap();
        Tensor::new(first.shape().to_vec(), data.into_iter().map(|v| v / n).collect()).unwrap()
    }
}

/// `softmax(q kᵀ / sqrt(d_k) + mask) v`. `mask[i]` true removes the weight at
/// flat position `i` of the `q_len × k_len` score matrix.
pub fn scaled_dot_attention<S: Scalar>(
    tape: &mut Tape<'_, S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&[bool]>,
) -> Result<(NodeId, NodeId)> {
    let d_k = *tape.shape(q).last().unwrap();
    if *tape.shape(k).last().unwrap() != d_k {
        return Err(Error::shape(format!(
            "query {:?} and keys {:?} differ in width",
            tape.shape(q),
            tape.shape(k)
        )));
    }
    let scores = tape.matmul_bt(q, k)?;
    let scores = tape.scale(scores, S::lit(1.0 / (d_k as f64).sqrt()));
    let scores = match mask {
        Some(m) if m.iter().any(|&b| b) => tape.mask_fill(scores, m.to_vec(), S::neg_infinity())?,
        _ => scores,
    };
    let weights = tape.softmax(scores)?;
    let context = tape.matmul(weights, v)?;
    Ok((context, weights))
}

/// Multi-head attention: per-head projections of width `d_model / n_heads`,
/// concatenated in head order and projected by `wo`.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<'_, S>,
    idx: &AttnIdx,
    n_heads: usize,
    query_seq: NodeId,
    kv_seq: NodeId,
    mask: Option<&[bool]>,
) -> Result<(NodeId, Vec<HeadCapture>)> {
    let wq = tape.param(idx.wq);
    let wk = tape.param(idx.wk);
    let wv = tape.param(idx.wv);
    let wo = tape.param(idx.wo);
    let q = tape.matmul(query_seq, wq)?;
    let k = tape.matmul(kv_seq, wk)?;
    let v = tape.matmul(kv_seq, wv)?;
    let d_model = *tape.shape(q).last().unwrap();
    let dk = d_model / n_heads;
    let mut contexts = Vec::with_capacity(n_heads);
    let mut captures = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let (ctx, weights) = scaled_dot_attention(tape, qh, kh, vh, mask)?;
        contexts.push(ctx);
        captures.push(HeadCapture { weights, values: vh });
    }
    let cat = if n_heads == 1 { contexts[0] } else { tape.concat_cols(&contexts)? };
    Ok((tape.matmul(cat, wo)?, captures))
}

fn layer_norm<S: Scalar>(tape: &mut Tape<'_, S>, x: NodeId, idx: &NormIdx) -> Result<NodeId> {
    let g = tape.param(idx.gain);
    let b = tape.param(idx.bias);
    tape.layer_norm(x, g, b)
}

pub(crate) fn feed_forward<S: Scalar>(tape: &mut Tape<'_, S>, x: NodeId, idx: &FfnIdx) -> Result<NodeId> {
    let w1 = tape.param(idx.w1);
    let b1 = tape.param(idx.b1);
    let w2 = tape.param(idx.w2);
    let b2 = tape.param(idx.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w2)?;
    tape.add_bias(o, b2)
}

/// `LayerNorm(x + dropout(sublayer))`
fn residual_norm<S: Scalar>(
    tape: &mut Tape<'_, S>,
    x: NodeId,
    sub: NodeId,
    norm: &NormIdx,
    dropout: &mut Dropout,
) -> Result<NodeId> {
    let sub = dropout.apply(tape, sub)?;
    let sum = tape.add(x, sub)?;
    layer_norm(tape, sum, norm)
}

fn check_ids<S: Scalar>(model: &Model<S>, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Usage("empty token sequence".into()));
    }
    if ids.len() > model.config.max_seq_len {
        return Err(Error::Length {
            len: ids.len(),
            max: model.config.max_seq_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= model.config.vocab_size) {
        return Err(Error::Vocabulary {
            id: bad,
            vocab_size: model.config.vocab_size,
        });
    }
    Ok(())
}

fn embed<S: Scalar>(
    tape: &mut Tape<'_, S>,
    model: &Model<S>,
    table: usize,
    ids: &[usize],
    dropout: &mut Dropout,
) -> Result<NodeId> {
    let d = model.config.d_model;
    let table = tape.param(table);
    let e = tape.gather_rows(table, ids)?;
    let e = tape.scale(e, S::lit((d as f64).sqrt()));
    let e = tape.add_const(e, &model.pos_enc()[..ids.len() * d])?;
    dropout.apply(tape, e)
}

/// Runs the encoder stack over `source_ids` (id 0 marks padding).
pub fn encode<S: Scalar>(
    tape: &mut Tape<'_, S>,
    model: &Model<S>,
    source_ids: &[usize],
    dropout: &mut Dropout,
) -> Result<Encoded> {
    check_ids(model, source_ids)?;
    let pad: Vec<bool> = source_ids.iter().map(|&t| t == PAD).collect();
    if pad.iter().all(|&p| p) {
        return Err(Error::Usage("source contains only padding".into()));
    }
    let n = source_ids.len();
    let mask: Vec<bool> = (0..n * n).map(|i| pad[i % n]).collect();
    let layout = model.layout();
    let mut x = embed(tape, model, layout.src_embed, source_ids, dropout)?;
    for layer in &layout.encoder {
        let (a, _) = multi_head_attention(tape, &layer.self_attn, model.config.n_heads, x, x, Some(&mask))?;
        x = residual_norm(tape, x, a, &layer.ln1, dropout)?;
        let f = feed_forward(tape, x, &layer.ffn)?;
        x = residual_norm(tape, x, f, &layer.ln2, dropout)?;
    }
    Ok(Encoded { out: x, pad })
}

/// Teacher-forced decoder pass. `target_in` starts with BOS (the gold
/// target shifted right); row `t` of the logits predicts target token `t`.
pub fn decode_forward<S: Scalar>(
    tape: &mut Tape<'_, S>,
    model: &Model<S>,
    encoded: &Encoded,
    target_in: &[usize],
    dropout: &mut Dropout,
) -> Result<DecoderOutput> {
    check_ids(model, target_in)?;
    let t = target_in.len();
    let s = encoded.pad.len();
    let self_mask: Vec<bool> = (0..t * t)
        .map(|i| {
            let (row, col) = (i / t, i % t);
            col > row || target_in[col] == PAD
        })
        .collect();
    let cross_mask: Vec<bool> = (0..t * s).map(|i| encoded.pad[i % s]).collect();
    let layout = model.layout();
    let h = model.config.n_heads;
    let mut x = embed(tape, model, layout.tgt_embed, target_in, dropout)?;
    let mut cross = Vec::with_capacity(layout.decoder.len());
    for layer in &layout.decoder {
        let (a, _) = multi_head_attention(tape, &layer.self_attn, h, x, x, Some(&self_mask))?;
        x = residual_norm(tape, x, a, &layer.ln1, dropout)?;
        let (c, caps) = multi_head_attention(tape, &layer.cross_attn, h, x, encoded.out, Some(&cross_mask))?;
        cross.push(caps);
        x = residual_norm(tape, x, c, &layer.ln2, dropout)?;
        let f = feed_forward(tape, x, &layer.ffn)?;
        x = residual_norm(tape, x, f, &layer.ln3, dropout)?;
    }
    let out = tape.param(layout.out_proj);
    let logits = tape.matmul_bt(x, out)?;
    Ok(DecoderOutput { logits, cross })
}

/// Row-wise log-softmax of the logits: log P_c.
pub fn conventional_log_probs<S: Scalar>(tape: &mut Tape<'_, S>, logits: NodeId) -> Result<NodeId> {
    tape.log_softmax(logits)
}

/// Decoder input for a gold target: BOS followed by all but the last token
/// of `target ++ [EOS]`.
pub fn shift_right(target: &[usize]) -> Vec<usize> {
    std::iter::once(super::BOS).chain(target.iter().copied()).collect()
}

/// Gold output sequence for a target: the tokens followed by EOS.
pub fn with_eos(target: &[usize]) -> Vec<usize> {
    target.iter().copied().chain(std::iter::once(super::EOS)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, BOS};

    fn tiny(seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: 12,
            dropout: 0.0,
            max_seq_len: 16,
            share_embeddings: true,
        };
        Model::new(cfg, None, seed).unwrap()
    }

    #[test]
    fn attention_worked_example() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
        let k = tape.constant(Tensor::identity(2));
        let v = tape.constant(Tensor::identity(2));
        let (ctx, w) = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        for vals in [tape.value(w), tape.value(ctx)] {
            assert!((vals[0] - 0.66976).abs() < 1e-5 && (vals[1] - 0.33024).abs() < 1e-5);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_rows(&[&[3.0, -1.0], &[0.2, 5.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]).unwrap());
        let v = tape.constant(Tensor::identity(3));
        let (_, w) = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        assert!(tape.value(w).iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn causal_first_row_attends_only_to_itself() {
        let m = tiny(1);
        let mut tape = Tape::with_params(&m.params);
        let enc = encode(&mut tape, &m, &[5, 6, 7], &mut Dropout::off()).unwrap();
        let dec = decode_forward(&mut tape, &m, &enc, &[BOS, 5, 6], &mut Dropout::off()).unwrap();
        assert_eq!(dec.cross.len(), 2);
        assert!(dec.cross.iter().all(|l| l.len() == 2));
        for layer in &dec.cross {
            for h in layer {
                assert_eq!(tape.shape(h.weights), &[3, 3]);
                for row in tape.value(h.weights).chunks(3) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoder_is_deterministic_without_dropout() {
        let m = tiny(2);
        let run = || {
            let mut tape = Tape::with_params(&m.params);
            let e = encode(&mut tape, &m, &[4, 9, 11, 5], &mut Dropout::off()).unwrap();
            tape.value(e.out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn padding_positions_do_not_leak() {
        let m = tiny(3);
        let run = |m: &Model<f64>, ids: &[usize]| {
            let mut tape = Tape::with_params(&m.params);
            let e = encode(&mut tape, m, ids, &mut Dropout::off()).unwrap();
            let dec = decode_forward(&mut tape, m, &e, &[BOS, 4], &mut Dropout::off()).unwrap();
            (tape.tensor(e.out), tape.tensor(dec.cross[0][1].weights))
        };
        let (plain, _) = run(&m, &[5, 6]);
        let (padded, w) = run(&m, &[5, 6, 0, 0]);
        for r in 0..2 {
            for (a, b) in plain.row(r).iter().zip(padded.row(r)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        for row in w.data().chunks(4) {
            assert_eq!(row[2], 0.0);
            assert_eq!(row[3], 0.0);
        }

        // whatever the padding slots hold, non-padding rows are unaffected
        let mut scrambled = m.clone();
        let embed = scrambled.layout().src_embed;
        for v in &mut scrambled.params.get_mut(embed).data_mut()[..8] {
            *v += 3.7;
        }
        let (other, _) = run(&scrambled, &[5, 0, 6, 0]);
        let (base, _) = run(&m, &[5, 0, 6, 0]);
        for r in [0, 2] {
            for (a, b) in base.row(r).iter().zip(other.row(r)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_ids() {
        let m = tiny(4);
        let mut tape = Tape::with_params(&m.params);
        assert!(matches!(
            encode(&mut tape, &m, &[4, 99], &mut Dropout::off()),
            Err(Error::Vocabulary { id: 99, .. })
        ));
        let long = vec![4; 17];
        assert!(matches!(
            encode(&mut tape, &m, &long, &mut Dropout::off()),
            Err(Error::Length { len: 17, max: 16 })
        ));
    }
}
