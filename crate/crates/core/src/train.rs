//! Joint objective `log P_c + λ log P_o`, Adam with warmup and
//! inverse-square-root decay, and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::contrastive::joint_forward;
use crate::corpus::Pair;
use crate::error::{Error, Result};
use crate::model::transformer::{shift_right, with_eos, Dropout};
use crate::model::{Model, PAD};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub base_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip, if set.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            base_lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_epsilon: 1e-9,
            warmup_steps: 400,
            batch_size: 32,
            max_epochs: 10,
            max_steps: None,
            seed: 1,
            checkpoint_every: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be a finite value >= 0"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        for (key, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(key, "must lie in (0, 1)"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config("adam_epsilon", "must be positive"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        Ok(())
    }
}

/// `base_lr · min(step / warmup, sqrt(warmup / step))`
pub fn lr_schedule(step: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup_steps as f64);
    base_lr * (s / w).min((w / s).sqrt())
}

/// Adam moments for every parameter.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<S>> = params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

impl<S: Scalar> AdamState<S> {
    /// State for `model` that carries over the moments of the first
    /// `n_core` parameters from `base`; the rest start at zero.
    pub fn fork(base: &AdamState<S>, model: &Model<S>) -> Self {
        let mut st = Self::new(&model.params);
        let n = model.layout().n_core.min(base.m.len());
        st.m[..n].clone_from_slice(&base.m[..n]);
        st.v[..n].clone_from_slice(&base.v[..n]);
        st.step = base.step;
        st
    }

    /// `adam_step = N`, then `m i` / `v i` headers each followed by a line
    /// of values.
    pub fn to_text(&self) -> String {
        let mut out = format!("adam_step = {}\n", self.step);
        for (tag, bufs) in [("m", &self.m), ("v", &self.v)] {
            for (i, b) in bufs.iter().enumerate() {
                let vals: Vec<String> = b.iter().map(|x| x.as_f64().to_string()).collect();
                writeln!(out, "{tag} {i}\n{}", vals.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str, params: &ParamStore<S>) -> Result<Self> {
        let mut st = Self::new(params);
        let mut lines = text.lines();
        let bad = |m: &str| Error::Checkpoint(format!("optimizer state: {m}"));
        let first = lines.next().ok_or_else(|| bad("empty file"))?;
        st.step = first
            .strip_prefix("adam_step = ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad("missing adam_step"))?;
        let mut seen = 0;
        while let Some(head) = lines.next() {
            let (tag, idx) = head.split_once(' ').ok_or_else(|| bad("bad header"))?;
            let idx: usize = idx.parse().map_err(|_| bad("bad index"))?;
            let vals = lines
                .next()
                .ok_or_else(|| bad("missing values"))?
                .split_whitespace()
                .map(|v| v.parse::<f64>().map(S::lit))
                .collect::<std::result::Result<Vec<S>, _>>()
                .map_err(|_| bad("bad value"))?;
            let slot = match tag {
                "m" => st.m.get_mut(idx),
                "v" => st.v.get_mut(idx),
                _ => None,
            }
            .ok_or_else(|| bad("unknown buffer"))?;
            if slot.len() != vals.len() {
                return Err(bad("buffer length does not match the parameter"));
            }
            *slot = vals;
            seen += 1;
        }
        if seen != 2 * params.len() {
            return Err(bad("wrong number of buffers"));
        }
        Ok(st)
    }
}

/// One bias-corrected Adam update. Gradients are checked first; a NaN or
/// infinity leaves the parameters untouched and names the offending path.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &[Vec<S>],
    state: &mut AdamState<S>,
    lr: f64,
    betas: (f64, f64),
    epsilon: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(params.name(i).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(betas.0), S::lit(betas.1));
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let (lr, eps) = (S::lit(lr), S::lit(epsilon));
    for (i, g) in grads.iter().enumerate() {
        let p = params.get_mut(i).data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (S::one() - b1) * g[j];
            v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Summed loss terms of one sequence on a tape.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// `-Σ [log P_c(gold) + λ log P_o(gold)]` over counted positions.
    pub sum: NodeId,
    pub pc_nll: f64,
    pub po_nll: f64,
    /// Non-padding gold positions.
    pub tokens: usize,
    /// Positions whose opponent term was counted.
    pub po_tokens: usize,
}

/// Sums the joint objective over non-padding gold positions. Positions
/// with `valid_po[t] == false` contribute only their P_c term; `log_po`
/// is ignored when `lambda == 0`.
pub fn joint_loss_terms<S: Scalar>(
    tape: &mut Tape<'_, S>,
    log_pc: NodeId,
    log_po: Option<(NodeId, &[bool])>,
    gold: &[usize],
    lambda: f64,
) -> Result<LossTerms> {
    let (rows, vocab) = (tape.shape(log_pc)[0], tape.shape(log_pc)[1]);
    if rows != gold.len() {
        return Err(Error::shape(format!("{rows} prediction rows for {} gold tokens", gold.len())));
    }
    let counted: Vec<usize> = (0..rows).filter(|&t| gold[t] != PAD).collect();
    if counted.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let flat = |ts: &[usize]| ts.iter().map(|&t| t * vocab + gold[t]).collect::<Vec<_>>();
    let pc = tape.pick(log_pc, &flat(&counted))?;
    let pc_nll = -tape.value(pc).iter().map(|v| v.as_f64()).sum::<f64>();
    let pc = tape.sum(pc);
    let mut sum = tape.neg(pc);
    let mut po_nll = 0.0;
    let mut po_tokens = 0;
    if let Some((log_po, valid)) = log_po.filter(|_| lambda != 0.0) {
        let ts: Vec<usize> = counted.iter().copied().filter(|&t| valid[t]).collect();
        if !ts.is_empty() {
            let po = tape.pick(log_po, &flat(&ts))?;
            po_nll = -tape.value(po).iter().map(|v| v.as_f64()).sum::<f64>();
            po_tokens = ts.len();
            let po = tape.sum(po);
            let po = tape.scale(po, S::lit(-lambda));
            sum = tape.add(sum, po)?;
        }
    }
    Ok(LossTerms {
        sum,
        pc_nll,
        po_nll,
        tokens: counted.len(),
        po_tokens,
    })
}

/// `-mean over non-padding positions of [log P_c(gold) + λ log P_o(gold)]`.
pub fn joint_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    log_pc: NodeId,
    log_po: Option<(NodeId, &[bool])>,
    gold: &[usize],
    lambda: f64,
) -> Result<NodeId> {
    let terms = joint_loss_terms(tape, log_pc, log_po, gold, lambda)?;
    Ok(tape.scale(terms.sum, S::one() / S::from_usize(terms.tokens).unwrap()))
}

/// Loss of one pair, `sum / normalizer`, with its parameter gradients.
pub struct PairGradient<S> {
    pub loss: f64,
    pub pc_nll: f64,
    pub po_nll: f64,
    pub tokens: usize,
    pub po_tokens: usize,
    pub grads: Vec<Option<Vec<S>>>,
}

/// Forward and backward for one pair. `normalizer` divides the summed loss
/// (the token count of the batch in training).
pub fn pair_gradient<S: Scalar>(
    model: &Model<S>,
    pair: &Pair,
    lambda: f64,
    normalizer: f64,
    main_dropout: &mut Dropout,
    branch_dropout: &mut Dropout,
) -> Result<PairGradient<S>> {
    let mut tape = Tape::with_params(&model.params);
    let with_branch = lambda != 0.0;
    let fwd = joint_forward(
        &mut tape,
        model,
        &pair.source,
        &shift_right(&pair.target),
        main_dropout,
        branch_dropout,
        with_branch,
    )?;
    let gold = with_eos(&pair.target);
    let po = fwd.opponent.as_ref().map(|o| (o.log_po, o.valid_rows.as_slice()));
    if let Some(o) = &fwd.opponent {
        let skipped = o.valid_rows.iter().filter(|v| !**v).count();
        if skipped > 0 {
            log::debug!("opponent undefined on {skipped} rows; P_o term skipped there");
        }
    }
    let terms = joint_loss_terms(&mut tape, fwd.log_pc, po, &gold, lambda)?;
    let loss = tape.scale(terms.sum, S::lit(1.0 / normalizer));
    let value = tape.value(loss)[0].as_f64();
    let grads = tape.backward(loss)?.into_param_grads();
    Ok(PairGradient {
        loss: value,
        pc_nll: terms.pc_nll,
        po_nll: terms.po_nll,
        tokens: terms.tokens,
        po_tokens: terms.po_tokens,
        grads,
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Batch loss (joint objective per target token).
    pub loss: f64,
    /// Mean -log P_c(gold) per token.
    pub pc_nll: f64,
    /// Mean -log P_o(gold) per counted token; 0 when the branch is off.
    pub po_nll: f64,
}

impl StepRecord {
    /// `step lr loss pc_nll po_nll`, tab separated.
    pub fn tsv(&self) -> String {
        format!("{}\t{:e}\t{}\t{}\t{}", self.step, self.lr, self.loss, self.pc_nll, self.po_nll)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// Mean step loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn metrics_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}", r.tsv()).unwrap();
        }
        out
    }
}

/// Mixes run seed, step, pair position and stream into one dropout seed.
pub fn stream_seed(seed: u64, step: usize, pair: usize, stream: u64) -> u64 {
    let mut x = seed;
    for v in [step as u64, pair as u64, stream] {
        x = splitmix(x ^ splitmix(v));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const MAIN_STREAM: u64 = 1;
const BRANCH_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

/// Trains `model` in place. `observer` sees every step after the update
/// (the CLI writes metrics and checkpoints from it). Each pair gets its own
/// graph; gradients are summed in batch order and the loss is normalized by
/// the batch's target-token count.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    pairs: &[Pair],
    cfg: &TrainConfig,
    state: &mut AdamState<S>,
    mut observer: impl FnMut(&StepRecord, &Model<S>, &AdamState<S>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Usage("training corpus is empty".into()));
    }
    let rate = model.config.dropout;
    let mut report = TrainReport::default();
    let mut step = state.step as usize;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    'epochs: for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, 0, SHUFFLE_STREAM)));
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            step += 1;
            let tokens: usize = batch.iter().map(|&i| pairs[i].target.len() + 1).sum();
            let mut grads: Vec<Vec<S>> = model.params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
            let (mut loss, mut pc, mut po, mut po_tokens) = (0.0, 0.0, 0.0, 0);
            for (k, &i) in batch.iter().enumerate() {
                let mut main = Dropout::new(rate, stream_seed(cfg.seed, step, k, MAIN_STREAM));
                let mut branch = Dropout::new(rate, stream_seed(cfg.seed, step, k, BRANCH_STREAM));
                let g = pair_gradient(model, &pairs[i], cfg.lambda, tokens as f64, &mut main, &mut branch)?;
                loss += g.loss;
                pc += g.pc_nll;
                po += g.po_nll;
                po_tokens += g.po_tokens;
                for (acc, gi) in grads.iter_mut().zip(g.grads) {
                    if let Some(gi) = gi {
                        for (a, b) in acc.iter_mut().zip(gi) {
                            *a += b;
                        }
                    }
                }
            }
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            let lr = lr_schedule(step, cfg.base_lr, cfg.warmup_steps);
            adam_step(
                &mut model.params,
                &grads,
                state,
                lr,
                (cfg.adam_beta1, cfg.adam_beta2),
                cfg.adam_epsilon,
            )?;
            let record = StepRecord {
                step,
                epoch,
                lr,
                loss,
                pc_nll: pc / tokens as f64,
                po_nll: if po_tokens > 0 { po / po_tokens as f64 } else { 0.0 },
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteGradient(format!("loss at step {step}")));
            }
            observer(&record, model, state)?;
            epoch_loss += loss;
            epoch_steps += 1;
            report.records.push(record);
        }
        report.epoch_losses.push(epoch_loss / epoch_steps as f64);
        log::info!("epoch {epoch}: mean loss {:.4}", epoch_loss / epoch_steps as f64);
    }
    Ok(report)
}

fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = S::lit(max_norm / norm);
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v *= s;
        }
    }
}
