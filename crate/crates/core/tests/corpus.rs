use std::fs;

use contrastive::corpus::{generate, load_alignments, load_parallel, write_pairs, SyntheticTaskSpec, Vocab};
use contrastive::heads::AlignmentSet;
use contrastive::model::UNK;

fn vocab() -> Vocab {
    let mut v = Vocab::new();
    for t in ["police", "arrest", "suspect", "in", "city", "the"] {
        v.add(t);
    }
    v
}

#[test]
fn crlf_files_load_like_lf_files() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
    fs::write(&s, "the police arrest the suspect\r\nsuspect in city\r\n").unwrap();
    fs::write(&t, "police arrest suspect\r\ncity suspect\r\n").unwrap();
    let pairs = load_parallel(&s, &t, &vocab()).unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!(pairs[0].source, vec![9, 4, 5, 9, 6]);
    assert_eq!(pairs[1].target, vec![8, 6]);
    let a = dir.path().join("a.align");
    fs::write(&a, "1-0 2-1 4-2\r\n2-0 0-1\r\n").unwrap();
    let mut pairs = pairs;
    load_alignments(&a, &mut pairs).unwrap();
    assert_eq!(pairs[1].alignment, Some(AlignmentSet::new(3, 2, [(2, 0), (0, 1)]).unwrap()));
}

#[test]
fn unknown_words_become_unk() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
    fs::write(&s, "the mayor in city\n").unwrap();
    fs::write(&t, "mayor city\n").unwrap();
    let pairs = load_parallel(&s, &t, &vocab()).unwrap();
    assert_eq!(pairs[0].source, vec![9, UNK, 7, 8]);
    assert_eq!(pairs[0].target[0], UNK);
}

#[test]
fn malformed_corpora_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
    fs::write(&s, "the city\nin city\n").unwrap();
    fs::write(&t, "city\n").unwrap();
    assert!(load_parallel(&s, &t, &vocab()).is_err());
    fs::write(&t, "city\n\n").unwrap();
    let e = load_parallel(&s, &t, &vocab()).unwrap_err().to_string();
    assert!(e.contains(":2:"), "{e}");
    fs::write(&t, "city\ncity\n").unwrap();
    let mut pairs = load_parallel(&s, &t, &vocab()).unwrap();
    let a = dir.path().join("a.align");
    fs::write(&a, "0-0\n").unwrap();
    assert!(load_alignments(&a, &mut pairs).unwrap_err().is_usage());
    fs::write(&a, "0-0\n5-0\n").unwrap();
    assert!(load_alignments(&a, &mut pairs).is_err());
}

#[test]
fn written_corpora_read_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticTaskSpec::salient(30, 6);
    let pairs = generate(&spec, 25).unwrap();
    let v = Vocab::synthetic(30);
    let prefix = dir.path().join("set");
    write_pairs(&prefix, &pairs, &v).unwrap();
    v.save(&dir.path().join("vocab.txt")).unwrap();
    let v2 = Vocab::load(&dir.path().join("vocab.txt")).unwrap();
    assert_eq!(v2.len(), 30);
    let mut back = load_parallel(&prefix.with_extension("src"), &prefix.with_extension("tgt"), &v2).unwrap();
    load_alignments(&prefix.with_extension("align"), &mut back).unwrap();
    assert_eq!(back, pairs);
}
