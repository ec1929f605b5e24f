//! Alignment error rate of attention heads and synchronous-head ranking.

use std::collections::BTreeSet;
use std::fmt;

use crate::autodiff::Tape;
use crate::corpus::Pair;
use crate::error::{Error, Result};
use crate::kernels::argmax;
use crate::model::transformer::{decode_forward, encode, shift_right, AttentionRecord, Dropout};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Links `(source index, target index)` for one sentence pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignmentSet {
    pub src_len: usize,
    pub tgt_len: usize,
    links: BTreeSet<(usize, usize)>,
}

impl AlignmentSet {
    pub fn new(src_len: usize, tgt_len: usize, links: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let links: BTreeSet<_> = links.into_iter().collect();
        if let Some(&(s, t)) = links.iter().find(|&&(s, t)| s >= src_len || t >= tgt_len) {
            return Err(Error::Data(format!(
                "alignment link {s}-{t} outside a {src_len}x{tgt_len} pair"
            )));
        }
        Ok(Self { src_len, tgt_len, links })
    }

    pub fn diagonal(n: usize) -> Self {
        Self::new(n, n, (0..n).map(|i| (i, i))).expect("in range")
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn contains(&self, src: usize, tgt: usize) -> bool {
        self.links.contains(&(src, tgt))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().copied()
    }

    pub fn intersection_len(&self, other: &AlignmentSet) -> usize {
        self.links.intersection(&other.links).count()
    }

    /// Parses `s-t s-t ...`.
    pub fn parse(line: &str, src_len: usize, tgt_len: usize) -> Result<Self> {
        let links = line
            .split_whitespace()
            .map(|tok| {
                let (s, t) = tok
                    .split_once('-')
                    .ok_or_else(|| Error::Data(format!("bad alignment token `{tok}`")))?;
                let p = |x: &str| {
                    x.parse::<usize>()
                        .map_err(|_| Error::Data(format!("bad alignment token `{tok}`")))
                };
                Ok((p(s)?, p(t)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(src_len, tgt_len, links)
    }
}

impl fmt::Display for AlignmentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.links.iter().map(|(s, t)| format!("{s}-{t}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Hard alignment from a `tgt_len × src_len` weight matrix: each target
/// position links to its most attended source position (first on ties).
/// Padding columns are never chosen.
pub fn attention_to_alignment<S: Scalar>(weights: &Tensor<S>, src_pad: Option<&[bool]>) -> AlignmentSet {
    let (rows, cols) = (weights.rows(), weights.cols());
    let links = (0..rows).map(|t| {
        let row: Vec<S> = weights
            .row(t)
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if src_pad.is_some_and(|p| p[i]) {
                    S::neg_infinity()
                } else {
                    w
                }
            })
            .collect();
        (argmax(&row), t)
    });
    AlignmentSet::new(cols, rows, links).expect("argmax in range")
}

/// `1 - 2|A ∩ S| / (|A| + |S|)` with sure-only gold links; 0 when both are
/// empty.
pub fn aer(predicted: &AlignmentSet, gold: &AlignmentSet) -> f64 {
    let total = predicted.len() + gold.len();
    if total == 0 {
        return 0.0;
    }
    1.0 - 2.0 * predicted.intersection_len(gold) as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub mean_aer: f64,
}

/// Teacher-forced attention record of every head for one pair, rows
/// restricted to the target tokens (the EOS row is dropped).
pub fn record_pair<S: Scalar>(model: &Model<S>, pair: &Pair) -> Result<AttentionRecord<S>> {
    let mut tape = Tape::with_params(&model.params);
    let mut off = Dropout::off();
    let enc = encode(&mut tape, model, &pair.source, &mut off)?;
    let dec = decode_forward(&mut tape, model, &enc, &shift_right(&pair.target), &mut off)?;
    let mut rec = AttentionRecord::capture(&tape, model, &dec, &enc.pad);
    let (t, s) = (pair.target.len(), pair.source.len());
    for w in &mut rec.weights {
        *w = Tensor::new(vec![t, s], w.data()[..t * s].to_vec())?;
    }
    Ok(rec)
}

/// Mean AER of every encoder-decoder head over `sample`, best first. Ties
/// keep (layer, head) order.
pub fn rank_heads<S: Scalar>(model: &Model<S>, sample: &[Pair]) -> Result<Vec<HeadScore>> {
    if sample.is_empty() {
        return Err(Error::Usage("head ranking needs at least one sentence pair".into()));
    }
    let (nl, nh) = (model.config.n_layers, model.config.n_heads);
    let mut totals = vec![0.0; nl * nh];
    for pair in sample {
        let gold = pair
            .alignment
            .as_ref()
            .ok_or_else(|| Error::Usage("head ranking needs gold alignments".into()))?;
        if gold.src_len != pair.source.len() || gold.tgt_len != pair.target.len() {
            return Err(Error::Usage(format!(
                "alignment covers {}x{} but the pair is {}x{}",
                gold.src_len,
                gold.tgt_len,
                pair.source.len(),
                pair.target.len()
            )));
        }
        let rec = record_pair(model, pair)?;
        for (i, w) in rec.weights.iter().enumerate() {
            totals[i] += aer(&attention_to_alignment(w, Some(&rec.src_pad)), gold);
        }
    }
    let n = sample.len() as f64;
    let mut scores: Vec<HeadScore> = (0..nl * nh)
        .map(|i| HeadScore {
            layer: i / nh,
            head: i % nh,
            mean_aer: totals[i] / n,
        })
        .collect();
    scores.sort_by(|a, b| a.mean_aer.total_cmp(&b.mean_aer));
    Ok(scores)
}

/// Tab-separated ranking table with a header line.
pub fn ranking_table(scores: &[HeadScore]) -> String {
    let mut out = String::from("rank\tlayer\thead\tmean_aer\n");
    for (i, s) in scores.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t{}\t{:.6}\n", i + 1, s.layer, s.head, s.mean_aer));
    }
    out
}
