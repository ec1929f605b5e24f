//! Central finite-difference oracle for tape gradients.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of
    /// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Coordinate with the largest error, as (parameter index, offset).
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a perturbation changed a masking decision.
    pub excluded: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            excluded: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: (usize, usize)) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some(at);
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `x` against central differences
/// with step `h`. Coordinates whose perturbation flips a recorded masking
/// decision sit on a non-differentiable point and are excluded.
pub fn finite_diff_check<S, F>(f: F, x: &Tensor<S>, h: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<'_, S>, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, xid)?;
    let grads = tape.backward(out)?;
    let zeros = vec![S::zero(); x.numel()];
    let analytic = grads.of(xid).unwrap_or(&zeros).to_vec();
    let base_decisions = tape.decisions().to_vec();

    let eval = |xp: Tensor<S>| -> Result<(f64, Vec<u64>)> {
        let mut tape = Tape::new();
        let id = tape.leaf(xp);
        let out = f(&mut tape, id)?;
        Ok((tape.value(out)[0].as_f64(), tape.decisions().to_vec()))
    };

    let mut report = GradCheckReport::new();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += S::lit(h);
        let mut minus = x.clone();
        minus.data_mut()[i] -= S::lit(h);
        let (fp, dp) = eval(plus)?;
        let (fm, dm) = eval(minus)?;
        if dp != base_decisions || dm != base_decisions {
            report.excluded += 1;
            continue;
        }
        report.record(analytic[i].as_f64(), (fp - fm) / (2.0 * h), (0, i));
    }
    Ok(report)
}

/// Same oracle over every coordinate of every parameter in `params`.
/// `f` builds the scalar loss on a tape bound to the (possibly perturbed) store.
pub fn param_gradient_check<S, F>(params: &ParamStore<S>, f: F, h: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<'_, S>) -> Result<NodeId>,
{
    let (analytic, base_decisions) = {
        let mut tape = Tape::with_params(params);
        let out = f(&mut tape)?;
        let decisions = tape.decisions().to_vec();
        (tape.backward(out)?.into_param_grads(), decisions)
    };

    let eval = |store: &ParamStore<S>| -> Result<(f64, Vec<u64>)> {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        Ok((tape.value(out)[0].as_f64(), tape.decisions().to_vec()))
    };

    let mut report = GradCheckReport::new();
    let mut work = params.clone();
    for p in 0..params.len() {
        for i in 0..params.get(p).numel() {
            let orig = params.get(p).data()[i];
            work.get_mut(p).data_mut()[i] = orig + S::lit(h);
            let (fp, dp) = eval(&work)?;
            work.get_mut(p).data_mut()[i] = orig - S::lit(h);
            let (fm, dm) = eval(&work)?;
            work.get_mut(p).data_mut()[i] = orig;
            if dp != base_decisions || dm != base_decisions {
                report.excluded += 1;
                continue;
            }
            let a = analytic[p].as_ref().map_or(0.0, |g| g[i].as_f64());
            report.record(a, (fp - fm) / (2.0 * h), (p, i));
        }
    }
    Ok(report)
}
