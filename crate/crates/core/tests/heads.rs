mod common;

use contrastive::heads::{aer, rank_heads, record_pair, AlignmentSet};

#[test]
fn planted_diagonal_head_ranks_first_with_zero_aer() {
    let m = common::planted_diagonal(2);
    let ranking = rank_heads(&m, &common::planted_pairs(7)).unwrap();
    assert_eq!((ranking[0].layer, ranking[0].head), (1, 1));
    assert_eq!(ranking[0].mean_aer, 0.0);
    assert!(ranking[1].mean_aer > 0.0);
    assert_eq!(ranking.len(), 4);
}

#[test]
fn planted_head_attention_is_sharp() {
    let m = common::planted_diagonal(2);
    let rec = record_pair(&m, &common::planted_pairs(7)[4]).unwrap();
    let w = rec.head(1, 1);
    for t in 0..w.rows() {
        assert!(w.at(t, t) > 0.9, "row {t}: {:?}", w.row(t));
    }
}

#[test]
fn aer_hand_examples() {
    let s = AlignmentSet::new(4, 3, [(0, 0), (1, 1), (2, 2)]).unwrap();
    let a = AlignmentSet::new(4, 3, [(0, 0), (1, 1), (3, 2)]).unwrap();
    assert_eq!(aer(&a, &s), 1.0 - 4.0 / 6.0);
    assert_eq!(format!("{:.4}", aer(&a, &s)), "0.3333");
    assert_eq!(aer(&s, &s), 0.0);
}
