//! ROUGE-1/2/L and attention entropy.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(overlap: usize, cand: usize, refs: usize) -> Self {
        let precision = if cand == 0 { 0.0 } else { overlap as f64 / cand as f64 };
        let recall = if refs == 0 { 0.0 } else { overlap as f64 / refs as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

/// Which score picks the best of several references.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    F1,
    Recall,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(Mode::F1),
            "recall" => Ok(Mode::Recall),
            _ => Err(Error::Usage(format!("unknown mode `{s}` (f1 or recall)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::F1 => "f1",
            Mode::Recall => "recall",
        })
    }
}

fn key(p: &Prf, mode: Mode) -> f64 {
    match mode {
        Mode::F1 => p.f1,
        Mode::Recall => p.recall,
    }
}

fn best<T>(refs: &[Vec<T>], mode: Mode, score: impl Fn(&[T]) -> Prf) -> Prf {
    refs.iter()
        .map(|r| score(r))
        .fold(None, |acc: Option<Prf>, p| match acc {
            Some(a) if key(&a, mode) >= key(&p, mode) => Some(a),
            _ => Some(p),
        })
        .unwrap_or_default()
}

fn ngrams<T: Hash + Eq + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn rouge_n_single<T: Hash + Eq + Clone>(cand: &[T], reference: &[T], n: usize) -> Prf {
    let c = ngrams(cand, n);
    let r = ngrams(reference, n);
    let overlap = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    Prf::new(overlap, c.values().sum(), r.values().sum())
}

/// Clipped n-gram overlap; with several references the one scoring best
/// under `mode` is used.
pub fn rouge_n<T: Hash + Eq + Clone>(candidate: &[T], references: &[Vec<T>], n: usize, mode: Mode) -> Result<Prf> {
    if n == 0 {
        return Err(Error::Usage("ROUGE-N needs n >= 1".into()));
    }
    Ok(best(references, mode, |r| rouge_n_single(candidate, r, n)))
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], references: &[Vec<T>], mode: Mode) -> Prf {
    best(references, mode, |r| Prf::new(lcs_len(candidate, r), candidate.len(), r.len()))
}

/// Keeps the longest token prefix whose space-joined form fits in `cap`
/// bytes.
pub fn byte_cap(tokens: &[String], cap: usize) -> Vec<String> {
    let mut used = 0;
    let mut out = Vec::new();
    for t in tokens {
        let need = if out.is_empty() { t.len() } else { t.len() + 1 };
        if used + need > cap {
            break;
        }
        used += need;
        out.push(t.clone());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RougeReport {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
    pub mode: Mode,
    pub byte_cap: Option<usize>,
    pub n: usize,
}

impl RougeReport {
    /// `metric precision recall f1` rows, tab separated, with a header.
    pub fn table(&self) -> String {
        let mut out = format!(
            "# mode={} byte_cap={} sentences={}\nmetric\tprecision\trecall\tf1\n",
            self.mode,
            self.byte_cap.map_or("none".to_string(), |c| c.to_string()),
            self.n
        );
        for (name, p) in [("ROUGE-1", self.r1), ("ROUGE-2", self.r2), ("ROUGE-L", self.rl)] {
            out.push_str(&format!("{name}\t{:.4}\t{:.4}\t{:.4}\n", p.precision, p.recall, p.f1));
        }
        out
    }
}

/// Corpus ROUGE: mean of per-sentence scores.
pub fn corpus_rouge(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    mode: Mode,
    cap: Option<usize>,
) -> Result<RougeReport> {
    if candidates.len() != references.len() {
        return Err(Error::Usage(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Usage("nothing to score".into()));
    }
    let mut sums = [Prf::default(); 3];
    for (c, refs) in candidates.iter().zip(references) {
        let c = match cap {
            Some(cap) => byte_cap(c, cap),
            None => c.clone(),
        };
        let scores = [rouge_n(&c, refs, 1, mode)?, rouge_n(&c, refs, 2, mode)?, rouge_l(&c, refs, mode)];
        for (s, p) in sums.iter_mut().zip(scores) {
            s.precision += p.precision;
            s.recall += p.recall;
            s.f1 += p.f1;
        }
    }
    let n = candidates.len() as f64;
    let mean = |p: Prf| Prf {
        precision: p.precision / n,
        recall: p.recall / n,
        f1: p.f1 / n,
    };
    Ok(RougeReport {
        r1: mean(sums[0]),
        r2: mean(sums[1]),
        rl: mean(sums[2]),
        mode,
        byte_cap: cap,
        n: candidates.len(),
    })
}

/// Mean Shannon entropy (nats) of the rows of a `tgt × src` weight matrix,
/// padding columns excluded.
pub fn attention_entropy<S: Scalar>(weights: &Tensor<S>, src_pad: Option<&[bool]>) -> f64 {
    let rows = weights.rows();
    let total: f64 = (0..rows)
        .map(|t| {
            weights
                .row(t)
                .iter()
                .enumerate()
                .filter(|(i, _)| !src_pad.is_some_and(|p| p[*i]))
                .map(|(_, &w)| {
                    let w = w.as_f64();
                    if w > 0.0 {
                        -w * w.ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .sum();
    total / rows as f64
}
