mod common;

use contrastive::decode::{beam_search, score_sequence, BeamConfig};
use contrastive::model::EOS;

#[test]
fn full_width_beam_finds_the_exhaustive_optimum() {
    // vocabulary 6 leaves four generable tokens: EOS and ids 3..5
    for seed in 0..20u64 {
        let m = common::tiny_contrastive(6, seed);
        let src = [4 + seed as usize % 2, 5, 3];
        let lambda = [0.5, 1.0, 2.0][seed as usize % 3];
        let best = &beam_search(&m, &src, &BeamConfig::new(64, 3, lambda)).unwrap()[0];
        let (out, finished, rank) = common::exhaustive_best(&m, &src, lambda, 3);
        assert!((best.ranking_score(true) - rank).abs() < 1e-9, "seed {seed}");
        assert_eq!((best.output(), best.finished), (out.as_slice(), finished), "seed {seed}");
    }
}

#[test]
fn oracle_enumerates_every_reachable_output() {
    let outs = common::all_outputs(6, 3);
    // finished: 1 + 3 + 9, unfinished: 27
    assert_eq!(outs.len(), 40);
    assert!(outs.iter().all(|(o, _)| !o.contains(&EOS)));
}

#[test]
fn wider_beams_match_the_oracle_on_total_score_too() {
    for seed in 0..10u64 {
        let m = common::tiny_contrastive(6, 100 + seed);
        let src = [5, 4, 4, 3];
        let mut cfg = BeamConfig::new(64, 3, 1.0);
        cfg.length_normalize = false;
        let best = &beam_search(&m, &src, &cfg).unwrap()[0];
        let brute = common::all_outputs(6, 3)
            .into_iter()
            .map(|(o, f)| score_sequence(&m, &src, &o, 1.0, f).unwrap().0)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((best.score - brute).abs() < 1e-9, "seed {seed}");
    }
}

#[test]
fn reported_scores_agree_with_teacher_forcing() {
    let m = common::tiny_contrastive(11, 4);
    let src = [5, 9, 7, 6];
    for h in beam_search(&m, &src, &BeamConfig::new(4, 6, 0.8)).unwrap() {
        let (joint, pc, po) = score_sequence(&m, &src, h.output(), 0.8, h.finished).unwrap();
        assert!((joint - h.score).abs() < 1e-6);
        assert!((pc - h.pc_score).abs() < 1e-6);
        assert!((po - h.po_score).abs() < 1e-6);
        assert!((joint - (pc + 0.8 * po)).abs() < 1e-9);
    }
}

#[test]
fn dropping_po_is_the_conventional_decoder() {
    let m = common::tiny_contrastive(11, 6);
    let base = m.with_opponent(None, 0).unwrap();
    for src in [[5, 9, 7].as_slice(), &[4, 4, 10, 6, 8]] {
        let mut cfg = BeamConfig::new(3, 6, 1.5);
        cfg.use_po = false;
        let a = beam_search(&m, src, &cfg).unwrap();
        let b = beam_search(&base, src, &BeamConfig::new(3, 6, 0.0)).unwrap();
        assert_eq!(a, b);
    }
}
