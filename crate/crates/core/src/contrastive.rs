//! Opponent attention and the opponent probability branch.
//!
//! The conventional encoder-decoder weights `alpha_c` of one selected head
//! are turned into opponent weights `alpha_o` (mask the most attended
//! source positions, renormalize with softmax), which weight the same head's
//! value vectors. A small LayerNorm / feed-forward stack over that context
//! ends in a projection to the vocabulary and a softmin, giving `P_o`.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::transformer::{
    conventional_log_probs, decode_forward, encode, feed_forward, DecoderOutput, Dropout, Encoded,
};
use crate::model::{MaskStrategy, Model, OpponentConfig, OpponentFunction};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Floor applied before taking reciprocals of attention weights.
pub const RECIPROCAL_FLOOR: f64 = 1e-9;

/// Positions of one conventional attention row that the opponent masks.
/// `pad[i] == true` marks a padding column, which is never a candidate and
/// is not counted as remaining.
pub fn opponent_mask_positions<S: Scalar>(
    alpha_c: &[S],
    pad: Option<&[bool]>,
    strategy: MaskStrategy,
) -> Result<Vec<bool>> {
    let is_pad = |i: usize| pad.is_some_and(|p| p[i]);
    // stable sort keeps the lowest index first among equal weights
    let mut order: Vec<usize> = (0..alpha_c.len()).filter(|&i| !is_pad(i)).collect();
    order.sort_by(|&a, &b| alpha_c[b].partial_cmp(&alpha_c[a]).unwrap_or(std::cmp::Ordering::Equal));
    let available = order.len();
    let n_masked = match strategy {
        MaskStrategy::Max => 1,
        MaskStrategy::TopK(k) => k,
        MaskStrategy::Dynamic(threshold) => {
            let t = S::lit(threshold);
            let mut n = 1;
            while n < available && alpha_c[order[n - 1]] < t * alpha_c[order[n]] {
                n += 1;
            }
            n
        }
    };
    if n_masked >= available {
        return Err(Error::DegenerateOpponent(format!(
            "{strategy} would mask {n_masked} of {available} source positions"
        )));
    }
    let mut mask = vec![false; alpha_c.len()];
    for &i in &order[..n_masked] {
        mask[i] = true;
    }
    Ok(mask)
}

/// `alpha_c` with the masked entries replaced by negative infinity.
pub fn opponent_mask<S: Scalar>(alpha_c: &Tensor<S>, strategy: MaskStrategy) -> Result<Tensor<S>> {
    let mask = opponent_mask_positions(alpha_c.data(), None, strategy)?;
    let data = alpha_c
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { S::neg_infinity() } else { v })
        .collect();
    Tensor::new(alpha_c.shape().to_vec(), data)
}

/// Softmax of a masked weight row; masked and padding entries become exactly 0.
pub fn opponent_weights<S: Scalar>(masked_alpha: &Tensor<S>, padding_mask: Option<&[bool]>) -> Result<Tensor<S>> {
    tensor::softmax(masked_alpha, padding_mask)
}

/// `alpha_o · v`
pub fn opponent_attention<S: Scalar>(alpha_o: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
    tensor::matmul(alpha_o, v)
}

/// The non-masking opponent functions: `softmax(1 - alpha)` or
/// `softmax(1 / max(alpha, 1e-9))`, padding excluded.
pub fn alternative_opponent<S: Scalar>(
    alpha_c: &Tensor<S>,
    which: OpponentFunction,
    padding_mask: Option<&[bool]>,
) -> Result<Tensor<S>> {
    let transformed = match which {
        OpponentFunction::OneMinus => alpha_c.map(|a| S::one() - a),
        OpponentFunction::Reciprocal => alpha_c.map(|a| S::one() / a.max(S::lit(RECIPROCAL_FLOOR))),
        OpponentFunction::Mask => {
            return Err(Error::Usage(
                "the masking opponent is computed by opponent_mask".into(),
            ))
        }
    };
    tensor::softmax(&transformed, padding_mask)
}

/// Opponent branch output on a tape.
#[derive(Clone, Debug)]
pub struct OpponentOutput {
    /// `tgt_len × src_len` opponent weights.
    pub alpha_o: NodeId,
    /// `tgt_len × d_head` opponent context.
    pub attention_o: NodeId,
    /// `tgt_len × vocab` pre-softmin scores `W z3`.
    pub scores: NodeId,
    /// `tgt_len × vocab` log P_o.
    pub log_po: NodeId,
    /// Rows where the opponent is well defined. Invalid rows (every
    /// candidate would be masked) carry no opponent signal.
    pub valid_rows: Vec<bool>,
}

/// The selected head's weights and values, or the per-layer mean of both in
/// averaged-head mode.
fn selected_head<S: Scalar>(
    tape: &mut Tape<'_, S>,
    opp: &OpponentConfig,
    dec: &DecoderOutput,
) -> Result<(NodeId, NodeId)> {
    let layer = &dec.cross[opp.selected_layer];
    if opp.average_heads {
        let w: Vec<NodeId> = layer.iter().map(|h| h.weights).collect();
        let v: Vec<NodeId> = layer.iter().map(|h| h.values).collect();
        Ok((tape.mean_of(&w)?, tape.mean_of(&v)?))
    } else {
        let h = layer[opp.selected_head];
        Ok((h.weights, h.values))
    }
}

/// Builds alpha_o from the conventional weights of the configured head and
/// runs the opponent probability stack on top.
pub fn opponent_branch<S: Scalar>(
    tape: &mut Tape<'_, S>,
    model: &Model<S>,
    dec: &DecoderOutput,
    src_pad: &[bool],
    dropout: &mut Dropout,
) -> Result<OpponentOutput> {
    let opp = model
        .opponent
        .as_ref()
        .ok_or_else(|| Error::Usage("model has no contrastive branch".into()))?;
    let (alpha_c, values) = selected_head(tape, opp, dec)?;
    let alpha_c = if opp.detach_opponent_input {
        tape.detach(alpha_c)
    } else {
        alpha_c
    };
    let (rows, s) = (tape.shape(alpha_c)[0], tape.shape(alpha_c)[1]);
    let mut valid_rows = vec![true; rows];

    let pre = match opp.opponent_function {
        OpponentFunction::Mask => {
            let vals = tape.value(alpha_c).to_vec();
            let mut mask = Vec::with_capacity(rows * s);
            for (r, row) in vals.chunks(s).enumerate() {
                match opponent_mask_positions(row, Some(src_pad), opp.mask_strategy) {
                    Ok(m) => mask.extend(m.iter().zip(src_pad).map(|(&a, &p)| a || p)),
                    Err(Error::DegenerateOpponent(_)) => {
                        valid_rows[r] = false;
                        mask.extend_from_slice(src_pad);
                    }
                    Err(e) => return Err(e),
                }
            }
            return finish(tape, model, alpha_c, mask, values, valid_rows, dropout);
        }
        OpponentFunction::OneMinus => tape.affine(alpha_c, -S::one(), S::one()),
        OpponentFunction::Reciprocal => tape.reciprocal(alpha_c, S::lit(RECIPROCAL_FLOOR)),
    };
    let mask: Vec<bool> = (0..rows * s).map(|i| src_pad[i % s]).collect();
    finish(tape, model, pre, mask, values, valid_rows, dropout)
}

fn finish<S: Scalar>(
    tape: &mut Tape<'_, S>,
    model: &Model<S>,
    pre: NodeId,
    mask: Vec<bool>,
    values: NodeId,
    valid_rows: Vec<bool>,
    dropout: &mut Dropout,
) -> Result<OpponentOutput> {
    let masked = if mask.iter().any(|&m| m) {
        tape.mask_fill(pre, mask, S::neg_infinity())?
    } else {
        pre
    };
    let alpha_o = tape.softmax(masked)?;
    let attention_o = tape.matmul(alpha_o, values)?;
    let (scores, log_po) = opponent_log_probs(tape, model, attention_o, dropout)?;
    Ok(OpponentOutput {
        alpha_o,
        attention_o,
        scores,
        log_po,
        valid_rows,
    })
}

/// `z1 = LN(att_o)`, `z2 = FFN(z1)`, `z3 = LN(z1 + z2)`, `log softmin(z3 W)`.
/// Returns the scores `z3 W` and the log-probabilities.
pub fn opponent_log_probs<S: Scalar>(
    tape: &mut Tape<'_, S>,
    model: &Model<S>,
    attention_o: NodeId,
    dropout: &mut Dropout,
) -> Result<(NodeId, NodeId)> {
    let b = model
        .layout()
        .branch
        .ok_or_else(|| Error::Usage("model has no contrastive branch".into()))?;
    let (g1, b1) = (tape.param(b.ln1.gain), tape.param(b.ln1.bias));
    let z1 = tape.layer_norm(attention_o, g1, b1)?;
    let z2 = feed_forward(tape, z1, &b.ffn)?;
    let z2 = dropout.apply(tape, z2)?;
    let sum = tape.add(z1, z2)?;
    let (g2, b2) = (tape.param(b.ln2.gain), tape.param(b.ln2.bias));
    let z3 = tape.layer_norm(sum, g2, b2)?;
    let w = tape.param(b.out);
    let scores = tape.matmul(z3, w)?;
    let log_po = tape.log_softmin(scores)?;
    Ok((scores, log_po))
}

/// Everything one teacher-forced pass produces for a sentence pair.
#[derive(Clone, Debug)]
pub struct JointForward {
    pub encoded: Encoded,
    pub decoder: DecoderOutput,
    /// `tgt_len × vocab` log P_c.
    pub log_pc: NodeId,
    /// Present when the branch was run.
    pub opponent: Option<OpponentOutput>,
}

/// Encoder, decoder and (when `with_branch` and the model has one) the
/// opponent branch. `target_in` starts with BOS.
pub fn joint_forward<S: Scalar>(
    tape: &mut Tape<'_, S>,
    model: &Model<S>,
    source: &[usize],
    target_in: &[usize],
    main_dropout: &mut Dropout,
    branch_dropout: &mut Dropout,
    with_branch: bool,
) -> Result<JointForward> {
    let encoded = encode(tape, model, source, main_dropout)?;
    let decoder = decode_forward(tape, model, &encoded, target_in, main_dropout)?;
    let log_pc = conventional_log_probs(tape, decoder.logits)?;
    let opponent = if with_branch && model.is_contrastive() {
        Some(opponent_branch(tape, model, &decoder, &encoded.pad, branch_dropout)?)
    } else {
        None
    };
    Ok(JointForward {
        encoded,
        decoder,
        log_pc,
        opponent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec()).unwrap()
    }

    const NEG: f64 = f64::NEG_INFINITY;

    #[test]
    fn max_masks_the_single_largest() {
        let m = opponent_mask(&row(&[0.5, 0.3, 0.2]), MaskStrategy::Max).unwrap();
        assert_eq!(m.data(), &[NEG, 0.3, 0.2]);
    }

    #[test]
    fn max_tie_goes_to_first_index() {
        let m = opponent_mask(&row(&[0.4, 0.4, 0.2]), MaskStrategy::Max).unwrap();
        assert_eq!(m.data(), &[NEG, 0.4, 0.2]);
    }

    #[test]
    fn top_k_masks_k_largest() {
        let m = opponent_mask(&row(&[0.5, 0.3, 0.2]), MaskStrategy::TopK(2)).unwrap();
        assert_eq!(m.data(), &[NEG, NEG, 0.2]);
    }

    #[test]
    fn dynamic_stops_at_first_large_ratio() {
        // 0.40 is always masked; 0.40 / 0.39 = 1.0256 >= 1.02 stops the walk
        let m = opponent_mask(&row(&[0.40, 0.39, 0.20, 0.01]), MaskStrategy::Dynamic(1.02)).unwrap();
        assert_eq!(m.data(), &[NEG, 0.39, 0.20, 0.01]);
        // near-equal neighbours keep getting masked
        let m = opponent_mask(&row(&[0.30, 0.299, 0.298, 0.103]), MaskStrategy::Dynamic(1.02)).unwrap();
        assert_eq!(m.data(), &[NEG, NEG, NEG, 0.103]);
    }

    #[test]
    fn degenerate_opponents_are_errors() {
        for (v, s) in [
            (vec![1.0], MaskStrategy::Max),
            (vec![0.5, 0.3, 0.2], MaskStrategy::TopK(3)),
            (vec![0.25; 4], MaskStrategy::Dynamic(1.02)),
        ] {
            assert!(matches!(
                opponent_mask(&row(&v), s),
                Err(Error::DegenerateOpponent(_))
            ));
        }
    }

    #[test]
    fn padding_is_never_a_candidate() {
        let m = opponent_mask_positions(&[0.0, 0.6, 0.4], Some(&[true, false, false]), MaskStrategy::Max).unwrap();
        assert_eq!(m, vec![false, true, false]);
        assert!(opponent_mask_positions(&[0.0, 1.0], Some(&[true, false]), MaskStrategy::Max).is_err());
    }

    #[test]
    fn opponent_weights_examples() {
        let w = opponent_weights(&row(&[NEG, 0.3, 0.2]), None).unwrap();
        assert_eq!(w.data()[0], 0.0);
        assert!((w.data()[1] - 0.5250).abs() < 1e-4);
        assert!((w.data()[2] - 0.4750).abs() < 1e-4);
        let w = opponent_weights(&row(&[NEG, 0.7, 0.7]), None).unwrap();
        assert_eq!(w.data(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn opponent_attention_selects_and_averages() {
        let v = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let one_hot = Tensor::from_rows(&[&[0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(opponent_attention(&one_hot, &v).unwrap().data(), &[3.0, 4.0]);
        let half = Tensor::from_rows(&[&[0.0, 0.5, 0.5]]).unwrap();
        assert_eq!(opponent_attention(&half, &v).unwrap().data(), &[4.0, 5.0]);
        // the masked row of v is irrelevant
        let mut v2 = v.clone();
        v2.data_mut()[0] = 1e6;
        assert_eq!(
            opponent_attention(&half, &v).unwrap(),
            opponent_attention(&half, &v2).unwrap()
        );
    }

    #[test]
    fn alternative_opponents() {
        let u = row(&[0.25; 4]);
        for f in [OpponentFunction::OneMinus, OpponentFunction::Reciprocal] {
            let o = alternative_opponent(&u, f, None).unwrap();
            assert!(o.data().iter().all(|x| (x - 0.25).abs() < 1e-15));
        }
        let o = alternative_opponent(&row(&[0.7, 0.2, 0.1]), OpponentFunction::OneMinus, None).unwrap();
        // softmax([0.3, 0.8, 0.9]) evaluated independently
        for (a, b) in o.data().iter().zip([0.223_671_610_7, 0.368_772_142_3, 0.407_556_247_0]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let o = alternative_opponent(&row(&[0.5, 0.3, 0.2]), OpponentFunction::Reciprocal, None).unwrap();
        assert!(o.data()[0] < o.data()[1] && o.data()[1] < o.data()[2]);
        let o = alternative_opponent(&row(&[0.0, 0.6, 0.4]), OpponentFunction::OneMinus, Some(&[true, false, false])).unwrap();
        assert_eq!(o.data()[0], 0.0);
    }
}
