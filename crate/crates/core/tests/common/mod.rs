#![allow(dead_code)]

use contrastive::autodiff::Tape;
use contrastive::decode::score_sequence;
use contrastive::model::transformer::Dropout;
use contrastive::model::{Model, ModelConfig, OpponentConfig, BOS, EOS, PAD};

pub fn tiny_config(vocab_size: usize, n_layers: usize, d_model: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads,
        d_ffn: 2 * d_model,
        vocab_size,
        dropout: 0.0,
        max_seq_len: 16,
        share_embeddings: true,
    }
}

pub fn tiny_contrastive(vocab_size: usize, seed: u64) -> Model<f64> {
    let cfg = tiny_config(vocab_size, 1, 8, 2);
    let opp = OpponentConfig::new(&cfg, 0, (seed % 2) as usize);
    Model::new(cfg, Some(opp), seed).unwrap()
}

/// Every output the beam search can produce within `max_len` steps: runs
/// that stop at EOS and runs of exactly `max_len` tokens without it.
pub fn all_outputs(vocab_size: usize, max_len: usize) -> Vec<(Vec<usize>, bool)> {
    let toks: Vec<usize> = (0..vocab_size).filter(|&t| t != PAD && t != BOS && t != EOS).collect();
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for len in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            out.push((p.clone(), true));
            for &t in &toks {
                let mut q = p.clone();
                q.push(t);
                if len + 1 == max_len {
                    out.push((q, false));
                } else {
                    next.push(q);
                }
            }
        }
        frontier = next;
    }
    out
}

/// Best `(output, finished, ranking score)` by brute force over
/// [`all_outputs`], under the same per-token ranking as the beam.
pub fn exhaustive_best(model: &Model<f64>, source: &[usize], lambda: f64, max_len: usize) -> (Vec<usize>, bool, f64) {
    let mut best: Option<(Vec<usize>, bool, f64)> = None;
    for (out, finished) in all_outputs(model.config.vocab_size, max_len) {
        let (joint, _, _) = score_sequence(model, source, &out, lambda, finished).unwrap();
        let len = out.len() + usize::from(finished);
        let rank = joint / len as f64;
        if best.as_ref().map_or(true, |b| rank > b.2) {
            best = Some((out, finished, rank));
        }
    }
    best.unwrap()
}

/// Two-layer, two-head model whose cross-attention head `(1, 1)` attends
/// from each decoder row to the source position holding the same token as
/// the row's input (BOS matches token 4). Embeddings are scaled one-hot
/// vectors and every sublayer output is zeroed, so each residual stream is
/// the normalized embedding plus a small position term.
pub fn planted_diagonal(seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: 11,
        dropout: 0.0,
        max_seq_len: 32,
        share_embeddings: true,
    };
    let mut m = Model::<f64>::new(cfg, None, seed).unwrap();
    let (d, dk) = (16, 8);
    let names: Vec<String> = m.params.names().to_vec();
    for name in &names {
        let zero = name == "embed"
            || name.ends_with("attn.wo")
            || name.ends_with("ffn.w2")
            || name.ends_with("ffn.b2");
        if zero {
            m.params.by_name_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let embed = m.params.by_name_mut("embed").unwrap().data_mut();
    for tok in 0..11 {
        embed[tok * d + tok] = 3.0;
    }
    for which in ["wq", "wk"] {
        let w = m.params.by_name_mut(&format!("decoder.layer1.cross_attn.{which}")).unwrap().data_mut();
        for r in 0..d {
            for c in 0..dk {
                w[r * d + dk + c] = 0.0;
            }
        }
        for j in 0..7 {
            w[(4 + j) * d + dk + j] = 2.0;
        }
        if which == "wq" {
            w[BOS * d + dk] = 2.0;
        }
    }
    m
}

/// Pairs of lengths 2..=n (n <= 7) on which the planted head is exactly
/// diagonal: source `4, 5, ..`, and a target whose decoder inputs repeat
/// the source from position 1 on.
pub fn planted_pairs(n: usize) -> Vec<contrastive::corpus::Pair> {
    (2..=n)
        .map(|len| contrastive::corpus::Pair {
            source: (0..len).map(|i| 4 + i).collect(),
            target: (0..len).map(|i| if i + 1 < len { 5 + i } else { 4 }).collect(),
            alignment: Some(contrastive::heads::AlignmentSet::diagonal(len)),
        })
        .collect()
}

/// Joint-loss gradient check on the small contrastive instance: one layer,
/// width 8, two heads, vocabulary 11, three source and two target tokens.
pub fn joint_gradient_report(lambda: f64, seed: u64) -> contrastive::gradcheck::GradCheckReport {
    use contrastive::contrastive::joint_forward;
    use contrastive::model::transformer::{shift_right, with_eos};
    use contrastive::train::joint_loss;
    let cfg = tiny_config(11, 1, 8, 2);
    let opp = OpponentConfig::new(&cfg, 0, 1);
    let model = Model::<f64>::new(cfg, Some(opp), seed).unwrap();
    let (source, target) = ([5usize, 9, 7], [8usize, 6]);
    let gold = with_eos(&target);
    let loss = |tape: &mut Tape<'_, f64>| {
        let (mut a, mut b) = (Dropout::off(), Dropout::off());
        let fwd = joint_forward(tape, &model, &source, &shift_right(&target), &mut a, &mut b, lambda != 0.0)?;
        let po = fwd.opponent.as_ref().map(|o| (o.log_po, o.valid_rows.as_slice()));
        joint_loss(tape, fwd.log_pc, po, &gold, lambda)
    };
    contrastive::gradcheck::param_gradient_check(&model.params, loss, 1e-5).unwrap()
}

/// Checks `rouge_l` against a subsequence-enumeration oracle on every pair
/// of sequences of length at most 8 over a three-symbol alphabet. The first
/// sequence is taken in first-occurrence order, which covers all pairs up
/// to relabelling (LCS is invariant under it). Returns the number of pairs
/// compared, or the first disagreement.
pub fn rouge_l_matches_brute_force_lcs() -> Result<usize, String> {
    use contrastive::eval::{lcs_len, rouge_l, Mode};
    const MAX: usize = 8;
    // index order: longest sequences first, so the lowest common index has
    // the greatest length
    let mut seqs: Vec<Vec<u8>> = Vec::new();
    let mut offset = [0usize; MAX + 1];
    for len in (0..=MAX).rev() {
        offset[len] = seqs.len();
        for code in 0..3usize.pow(len as u32) {
            let mut s = vec![0u8; len];
            let mut c = code;
            for i in (0..len).rev() {
                s[i] = (c % 3) as u8;
                c /= 3;
            }
            seqs.push(s);
        }
    }
    let index = |s: &[u8]| offset[s.len()] + s.iter().fold(0usize, |acc, &x| acc * 3 + x as usize);
    let words = seqs.len().div_ceil(64);
    let subseqs: Vec<Vec<u64>> = seqs
        .iter()
        .map(|s| {
            let mut bits = vec![0u64; words];
            let mut sub = Vec::with_capacity(s.len());
            for mask in 0..(1usize << s.len()) {
                sub.clear();
                sub.extend((0..s.len()).filter(|i| mask >> i & 1 == 1).map(|i| s[i]));
                let k = index(&sub);
                bits[k / 64] |= 1 << (k % 64);
            }
            bits
        })
        .collect();
    let canonical = |s: &[u8]| {
        let mut next = 0u8;
        s.iter().all(|&x| {
            if x == next {
                next += 1;
            }
            x < next
        })
    };
    let mut compared = 0;
    for (i, a) in seqs.iter().enumerate().filter(|(_, a)| canonical(a)) {
        for (j, b) in seqs.iter().enumerate() {
            let k = subseqs[i]
                .iter()
                .zip(&subseqs[j])
                .position(|(x, y)| x & y != 0)
                .map(|w| w * 64 + (subseqs[i][w] & subseqs[j][w]).trailing_zeros() as usize)
                .expect("the empty sequence is always common");
            let oracle = seqs[k].len();
            let p = rouge_l(a, std::slice::from_ref(b), Mode::F1);
            let recall = if b.is_empty() { 0.0 } else { oracle as f64 / b.len() as f64 };
            let precision = if a.is_empty() { 0.0 } else { oracle as f64 / a.len() as f64 };
            if lcs_len(a, b) != oracle || p.recall != recall || p.precision != precision {
                return Err(format!("{a:?} vs {b:?}: oracle {oracle}, lcs_len {}", lcs_len(a, b)));
            }
            compared += 1;
        }
    }
    Ok(compared)
}
