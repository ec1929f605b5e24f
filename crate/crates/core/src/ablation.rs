//! Fine-tuning forks of a baseline and the comparison tables built from
//! them: mask strategies and head choices, and the λ sweep.

use std::fmt::Write as _;

use crate::corpus::Pair;
use crate::decode::{beam_search, BeamConfig};
use crate::error::Result;
use crate::eval::{corpus_rouge, Mode, RougeReport};
use crate::heads::HeadScore;
use crate::model::{MaskStrategy, Model, ModelConfig, OpponentConfig};
use crate::scalar::Scalar;
use crate::train::{train, AdamState, TrainConfig};

/// Continues `base` for `steps` more optimizer steps, with the given branch
/// (or none) attached. Transformer moments carry over; the branch starts
/// fresh.
pub fn fine_tune<S: Scalar>(
    base: &Model<S>,
    base_state: &AdamState<S>,
    opponent: Option<OpponentConfig>,
    pairs: &[Pair],
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Model<S>> {
    let mut model = base.with_opponent(opponent, cfg.seed)?;
    let mut state = AdamState::fork(base_state, &model);
    let cfg = TrainConfig {
        max_steps: Some(state.step as usize + steps),
        max_epochs: usize::MAX,
        ..cfg.clone()
    };
    train(&mut model, pairs, &cfg, &mut state, |_, _, _| Ok(()))?;
    Ok(model)
}

/// Beam-decodes every source and scores against the single reference.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    test: &[Pair],
    beam: usize,
    lambda: f64,
    use_po: bool,
) -> Result<RougeReport> {
    let mut cands = Vec::with_capacity(test.len());
    let mut refs = Vec::with_capacity(test.len());
    for p in test {
        let mut cfg = BeamConfig::new(beam, BeamConfig::default_max_len(p.source.len()), lambda);
        cfg.use_po = use_po;
        let best = beam_search(model, &p.source, &cfg)?;
        cands.push(best[0].output().iter().map(usize::to_string).collect());
        refs.push(vec![p.target.iter().map(usize::to_string).collect()]);
    }
    corpus_rouge(&cands, &refs, Mode::F1, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub opponent: OpponentConfig,
}

/// Mask strategies on the synchronous head, then the head choices with
/// the max strategy. `ranking` is the AER ranking, best first.
pub fn standard_variants(config: &ModelConfig, ranking: &[HeadScore]) -> Vec<Variant> {
    let sync = &ranking[0];
    let worst = &ranking[ranking.len() - 1];
    let on = |l: usize, h: usize, m: MaskStrategy| {
        let mut o = OpponentConfig::new(config, l, h);
        o.mask_strategy = m;
        o
    };
    let mut out: Vec<Variant> = [
        ("mask max", MaskStrategy::Max),
        ("mask top-2", MaskStrategy::TopK(2)),
        ("mask top-3", MaskStrategy::TopK(3)),
        ("mask dynamic 1.02", MaskStrategy::Dynamic(1.02)),
    ]
    .into_iter()
    .map(|(name, m)| Variant {
        name: name.to_string(),
        opponent: on(sync.layer, sync.head, m),
    })
    .collect();
    out.push(Variant {
        name: format!("synchronous head ({},{})", sync.layer, sync.head),
        opponent: on(sync.layer, sync.head, MaskStrategy::Max),
    });
    out.push(Variant {
        name: format!("non-synchronous head ({},{})", worst.layer, worst.head),
        opponent: on(worst.layer, worst.head, MaskStrategy::Max),
    });
    let mut avg = on(sync.layer, 0, MaskStrategy::Max);
    avg.average_heads = true;
    out.push(Variant {
        name: format!("averaged heads (layer {})", sync.layer),
        opponent: avg,
    });
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub report: RougeReport,
}

/// Fine-tunes one fork per variant and scores it.
#[allow(clippy::too_many_arguments)]
pub fn run_variants<S: Scalar>(
    base: &Model<S>,
    base_state: &AdamState<S>,
    train_pairs: &[Pair],
    test: &[Pair],
    cfg: &TrainConfig,
    steps: usize,
    beam: usize,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let baseline = fine_tune(base, base_state, None, train_pairs, cfg, steps)?;
    rows.push(AblationRow {
        name: "baseline".into(),
        report: evaluate(&baseline, test, beam, 0.0, false)?,
    });
    for v in variants {
        log::info!("ablation variant: {}", v.name);
        let m = fine_tune(base, base_state, Some(v.opponent.clone()), train_pairs, cfg, steps)?;
        rows.push(AblationRow {
            name: v.name.clone(),
            report: evaluate(&m, test, beam, cfg.lambda, true)?,
        });
    }
    Ok(rows)
}

/// `variant R-1 R-2 R-L` (F1), tab separated, with a header.
pub fn table(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant\tR-1\tR-2\tR-L\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t{:.4}",
            r.name, r.report.r1.f1, r.report.r2.f1, r.report.rl.f1
        )
        .unwrap();
    }
    out
}

/// Scores one fork per λ on a development set; returns rows in grid order.
#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep<S: Scalar>(
    base: &Model<S>,
    base_state: &AdamState<S>,
    opponent: &OpponentConfig,
    train_pairs: &[Pair],
    dev: &[Pair],
    cfg: &TrainConfig,
    steps: usize,
    beam: usize,
    grid: &[f64],
) -> Result<Vec<AblationRow>> {
    grid.iter()
        .map(|&lambda| {
            let c = TrainConfig { lambda, ..cfg.clone() };
            let m = fine_tune(base, base_state, Some(opponent.clone()), train_pairs, &c, steps)?;
            Ok(AblationRow {
                name: format!("lambda={lambda}"),
                report: evaluate(&m, dev, beam, lambda, true)?,
            })
        })
        .collect()
}

/// The λ values swept by default.
pub const LAMBDA_GRID: [f64; 4] = [0.1, 0.3, 1.0, 3.0];
