//! Beam search over the joint score `log P_c + λ log P_o`.

use std::cmp::Ordering;

use crate::autodiff::Tape;
use crate::contrastive::opponent_branch;
use crate::error::{Error, Result};
use crate::model::transformer::{
    conventional_log_probs, decode_forward, encode, shift_right, with_eos, Dropout,
};
use crate::model::{Model, BOS, EOS, PAD};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub lambda: f64,
    /// Drop P_o from the step score (P_c only).
    pub use_po: bool,
    /// Rank finished hypotheses by score per token instead of total score.
    pub length_normalize: bool,
}

impl BeamConfig {
    pub fn new(beam_size: usize, max_len: usize, lambda: f64) -> Self {
        Self {
            beam_size,
            max_len,
            lambda,
            use_po: true,
            length_normalize: true,
        }
    }

    /// Default output budget for a source: its length plus 10.
    pub fn default_max_len(source_len: usize) -> usize {
        source_len + 10
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; finished hypotheses end with EOS.
    pub tokens: Vec<usize>,
    /// Sum of step scores.
    pub score: f64,
    pub pc_score: f64,
    pub po_score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, without BOS and EOS.
    pub fn output(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }

    /// Generated length including EOS.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ranking_score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.score / self.len().max(1) as f64
        } else {
            self.score
        }
    }
}

/// Per-step log-probabilities for a decoder prefix: `(log P_c, log P_o)`
/// rows for the next token. `log P_o` is `None` when the branch is not
/// consulted, and uniform where the opponent is undefined.
pub struct StepScorer<'m, S: Scalar> {
    model: &'m Model<S>,
    tape: Tape<'m, S>,
    encoded: crate::model::transformer::Encoded,
    base_len: usize,
    with_po: bool,
}

impl<'m, S: Scalar> StepScorer<'m, S> {
    pub fn new(model: &'m Model<S>, source: &[usize], with_po: bool) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Usage("empty source sentence".into()));
        }
        let mut tape = Tape::with_params(&model.params);
        let encoded = encode(&mut tape, model, source, &mut Dropout::off())?;
        let base_len = tape.len();
        Ok(Self {
            model,
            tape,
            encoded,
            base_len,
            with_po: with_po && model.is_contrastive(),
        })
    }

    /// Log-probabilities for every row of a teacher-forced prefix.
    pub fn rows(&mut self, prefix: &[usize]) -> Result<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
        self.tape.truncate(self.base_len);
        let mut off = Dropout::off();
        let dec = decode_forward(&mut self.tape, self.model, &self.encoded, prefix, &mut off)?;
        let log_pc = conventional_log_probs(&mut self.tape, dec.logits)?;
        let v = self.model.config.vocab_size;
        let to_rows = |vals: &[S]| -> Vec<Vec<f64>> {
            vals.chunks(v).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect()
        };
        let pc = to_rows(self.tape.value(log_pc));
        let po = if self.with_po {
            let opp = opponent_branch(&mut self.tape, self.model, &dec, &self.encoded.pad, &mut off)?;
            let mut rows = to_rows(self.tape.value(opp.log_po));
            let uniform = -(v as f64).ln();
            for (row, ok) in rows.iter_mut().zip(&opp.valid_rows) {
                if !ok {
                    row.iter_mut().for_each(|x| *x = uniform);
                }
            }
            Some(rows)
        } else {
            None
        };
        Ok((pc, po))
    }
}

/// Tokens a hypothesis may be extended with: everything but PAD and BOS.
fn generable(vocab: usize) -> impl Iterator<Item = usize> {
    (0..vocab).filter(|&t| t != PAD && t != BOS)
}

/// Beam search; returns every retained hypothesis, best first.
pub fn beam_search<S: Scalar>(model: &Model<S>, source: &[usize], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(Error::Usage("beam_size and max_len must be at least 1".into()));
    }
    let with_po = cfg.use_po && cfg.lambda != 0.0;
    let mut scorer = StepScorer::new(model, source, with_po)?;
    let lambda = if with_po { cfg.lambda } else { 0.0 };
    let vocab = model.config.vocab_size;
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        score: 0.0,
        pc_score: 0.0,
        po_score: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut cands: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let (pc, po) = scorer.rows(&hyp.tokens)?;
            let pc = pc.last().expect("non-empty prefix");
            let po = po.as_ref().map(|p| p.last().expect("non-empty prefix"));
            for y in generable(vocab) {
                let (c, o) = (pc[y], po.map_or(0.0, |p| p[y]));
                let mut tokens = hyp.tokens.clone();
                tokens.push(y);
                cands.push(Hypothesis {
                    tokens,
                    score: hyp.score + c + lambda * o,
                    pc_score: hyp.pc_score + c,
                    po_score: hyp.po_score + o,
                    finished: y == EOS,
                });
            }
        }
        // stable: equal scores keep parent order, then token order
        cands.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        cands.truncate(cfg.beam_size);
        live.clear();
        for c in cands {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.sort_by(|a, b| {
        b.ranking_score(cfg.length_normalize)
            .partial_cmp(&a.ranking_score(cfg.length_normalize))
            .unwrap_or(Ordering::Equal)
    });
    Ok(done)
}

/// Teacher-forced `(joint, Σ log P_c, Σ log P_o)` of `target`. With
/// `finished`, EOS is appended and scored. Undefined opponent rows score
/// the uniform distribution, as in beam search.
pub fn score_sequence<S: Scalar>(
    model: &Model<S>,
    source: &[usize],
    target: &[usize],
    lambda: f64,
    finished: bool,
) -> Result<(f64, f64, f64)> {
    let gold = if finished { with_eos(target) } else { target.to_vec() };
    if gold.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let prefix = shift_right(&gold[..gold.len() - 1]);
    let mut scorer = StepScorer::new(model, source, lambda != 0.0)?;
    let (pc, po) = scorer.rows(&prefix)?;
    let pc_part: f64 = gold.iter().enumerate().map(|(t, &y)| pc[t][y]).sum();
    let po_part: f64 = po.map_or(0.0, |p| gold.iter().enumerate().map(|(t, &y)| p[t][y]).sum());
    Ok((pc_part + lambda * po_part, pc_part, po_part))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, OpponentConfig};

    fn tiny(seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: 6,
            dropout: 0.0,
            max_seq_len: 16,
            share_embeddings: true,
        };
        let opp = OpponentConfig::new(&cfg, 0, 1);
        Model::new(cfg, Some(opp), seed).unwrap()
    }

    #[test]
    fn greedy_equals_beam_one() {
        let m = tiny(4);
        let src = [4, 5, 3, 4];
        let cfg = BeamConfig::new(1, 5, 0.7);
        let best = &beam_search(&m, &src, &cfg).unwrap()[0];
        let mut scorer = StepScorer::new(&m, &src, true).unwrap();
        let mut prefix = vec![BOS];
        for _ in 0..5 {
            let (pc, po) = scorer.rows(&prefix).unwrap();
            let (pc, po) = (pc.last().unwrap(), &po.unwrap()[prefix.len() - 1]);
            let y = generable(6)
                .max_by(|&a, &b| {
                    (pc[a] + 0.7 * po[a])
                        .partial_cmp(&(pc[b] + 0.7 * po[b]))
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .unwrap();
            prefix.push(y);
            if y == EOS {
                break;
            }
        }
        assert_eq!(best.tokens, prefix);
    }

    #[test]
    fn top_score_matches_teacher_forcing() {
        let m = tiny(8);
        let src = [5, 4, 4];
        let hyps = beam_search(&m, &src, &BeamConfig::new(3, 4, 1.0)).unwrap();
        let h = &hyps[0];
        let (joint, pc, po) = score_sequence(&m, &src, h.output(), 1.0, h.finished).unwrap();
        assert!((joint - h.score).abs() < 1e-6);
        assert!((pc - h.pc_score).abs() < 1e-6);
        assert!((po - h.po_score).abs() < 1e-6);
        assert!((joint - (pc + po)).abs() < 1e-9);
    }

    #[test]
    fn lambda_zero_and_no_po_agree() {
        let m = tiny(2);
        let src = [4, 5, 5, 3];
        let mut a = BeamConfig::new(3, 5, 0.0);
        let with = beam_search(&m, &src, &a).unwrap();
        a.use_po = false;
        a.lambda = 2.0;
        let without = beam_search(&m, &src, &a).unwrap();
        assert_eq!(with, without);
        let (j, pc, _) = score_sequence(&m, &src, with[0].output(), 0.0, with[0].finished).unwrap();
        assert_eq!(j, pc);
    }

    #[test]
    fn empty_source_is_a_usage_error() {
        let m = tiny(1);
        assert!(beam_search(&m, &[], &BeamConfig::new(2, 3, 1.0))
            .unwrap_err()
            .is_usage());
    }
}
