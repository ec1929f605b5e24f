use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contrastive"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates a tiny corpus and trains a small contrastive model on it.
fn trained_run(dir: &Path) {
    let data = dir.join("data");
    let o = bin(&[
        "gen-corpus", "--task", "salient_extract", "--vocab-size", "16", "--n-pairs", "60", "--seed", "3",
        "--out-dir", p(&data),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# tiny model\nn_layers = 1\nd_model = 16\nn_heads = 2\nd_ffn = 32\ncontrastive = true\n\
             selected_layer = 0\nselected_head = 1\nlambda = 0.5\nbatch_size = 8\nmax_steps = 6\n\
             checkpoint_every = 3\ntrain_source = {}\ntrain_target = {}\nvocab = {}\nout_dir = {}\n",
            data.join("train.src").display(),
            data.join("train.tgt").display(),
            data.join("vocab.txt").display(),
            dir.join("run").display()
        ),
    )
    .unwrap();
    let o = bin(&["train", "--config", p(&cfg), "--set", "seed=4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn negated_softmax_objective_is_rejected_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "objective = negated_softmax\n").unwrap();
    let o = bin(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("documented pitfall"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("x.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = bin(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no_such_key"));

    let o = bin(&["train", "--config", p(&dir.path().join("missing.cfg"))]);
    assert_eq!(code(&o), 2);

    let o = bin(&["eval", "--candidates", "/nonexistent/c.txt", "--references", "/nonexistent/r.txt"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/c.txt"));

    assert_eq!(code(&bin(&["frobnicate"])), 2);
    assert_eq!(code(&bin(&["decode"])), 2);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("broken.ckpt");
    fs::write(&ck, "format = contrastive-checkpoint-1\nn_layers = 1\ntensor embed 2 2\n1 2\n").unwrap();
    let input = dir.path().join("in.txt");
    fs::write(&input, "w4 w5\n").unwrap();
    let o = bin(&["decode", "--checkpoint", p(&ck), "--vocab", p(&input), "--input", p(&input)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn eval_of_identical_files_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("a.txt");
    fs::write(&f, "the cat sat\non the mat\n").unwrap();
    let o = bin(&["eval", "--candidates", p(&f), "--references", p(&f)]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    for metric in ["ROUGE-1", "ROUGE-2", "ROUGE-L"] {
        let line = out.lines().find(|l| l.starts_with(metric)).unwrap();
        assert_eq!(line, format!("{metric}\t1.0000\t1.0000\t1.0000"));
    }
}

#[test]
fn eval_takes_the_best_of_tab_separated_references() {
    let dir = tempfile::tempdir().unwrap();
    let (c, r) = (dir.path().join("c.txt"), dir.path().join("r.txt"));
    fs::write(&c, "the cat sat\n").unwrap();
    fs::write(&r, "a dog ran\tthe cat sat on the mat\n").unwrap();
    let o = bin(&["eval", "--candidates", p(&c), "--references", p(&r), "--mode", "recall", "--byte-cap", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("# mode=recall byte_cap=7 sentences=1\n"));
    // "the cat" survives the cap: 2 of 6 reference unigrams
    assert!(out.contains("ROUGE-1\t1.0000\t0.3333\t"), "{out}");
}

#[test]
fn train_decode_inspect_and_heatmaps_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained_run(d);
    let run = d.join("run");
    let metrics = fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    for f in ["step-3.ckpt", "step-6.ckpt", "final.ckpt", "final.adam", "manifest.cfg"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let manifest = fs::read_to_string(run.join("manifest.cfg")).unwrap();
    assert!(manifest.contains("manifest.checkpoint_sha256 = "));
    assert!(manifest.contains("seed = 4\n"));

    let data = d.join("data");
    let ck = run.join("final.ckpt");
    let vocab = data.join("vocab.txt");
    let src = data.join("train.src");
    let decode = |extra: &[&str], out: &Path| {
        let mut args = vec!["decode", "--checkpoint", p(&ck), "--vocab", p(&vocab), "--input", p(&src), "--output", p(out)];
        args.extend_from_slice(extra);
        let o = bin(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read_to_string(out).unwrap()
    };
    let no_po = decode(&["--no-po"], &d.join("a.txt"));
    let zero = decode(&["--lambda", "0"], &d.join("b.txt"));
    assert_eq!(no_po, zero);
    assert_eq!(no_po.lines().count(), 60);
    let again = decode(&["--no-po"], &d.join("c.txt"));
    assert_eq!(no_po, again);

    let dump = d.join("attn");
    decode(&["--beam", "2", "--dump-attention", p(&dump)], &d.join("e.txt"));
    let first = fs::read_to_string(dump.join("sentence-0001.csv")).unwrap();
    assert!(first.starts_with("layer,head,target,source,weight\n"));

    let frag = d.join("heads.cfg");
    let o = bin(&[
        "inspect-heads", "--checkpoint", p(&ck), "--vocab", p(&vocab), "--source", p(&src),
        "--target", p(&data.join("train.tgt")), "--alignments", p(&data.join("train.align")),
        "--sample", "10", "--out", p(&frag),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 3);
    let frag = fs::read_to_string(&frag).unwrap();
    assert!(frag.contains("contrastive = true") && frag.contains("selected_layer = 0"));

    let heat = d.join("heat");
    let two = d.join("two.src");
    fs::write(&two, "w4 w9 w12\nw5 w6\n").unwrap();
    let targets = d.join("two.tgt");
    fs::write(&targets, "w4 w9\nw6\n").unwrap();
    let o = bin(&[
        "export-heatmaps", "--checkpoint", p(&ck), "--vocab", p(&vocab), "--input", p(&two),
        "--targets", p(&targets), "--out-dir", p(&heat), "--layer", "0", "--head", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(heat.join("sentence-0001-L0-H1.svg")).unwrap();
    // 3 target rows (two tokens and EOS) by 3 source columns
    assert_eq!(svg.matches("class=\"cell\"").count(), 9);
    let csv = fs::read_to_string(heat.join("sentence-0002-L0-H1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(heat.join("sentence-0002-opponent.csv").is_file());

    let o = bin(&[
        "export-heatmaps", "--checkpoint", p(&ck), "--vocab", p(&vocab), "--input", p(&two),
        "--out-dir", p(&heat), "--layer", "3",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn continuing_from_a_checkpoint_keeps_the_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained_run(d);
    let cfg = d.join("run.cfg");
    let o = bin(&[
        "train", "--config", p(&cfg), "--set", &format!("init_checkpoint={}", d.join("run/final.ckpt").display()),
        "--set", &format!("out_dir={}", d.join("more").display()), "--set", "max_steps=8",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(d.join("more/metrics.tsv")).unwrap();
    let steps: Vec<&str> = metrics.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(steps, vec!["7", "8"]);
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = bin(&["gen-corpus", "--task", "copy", "--vocab-size", "20", "--n-pairs", "15", "--seed", "8", "--out-dir", p(&out)]);
        assert_eq!(code(&o), 0);
        ["train.src", "train.tgt", "train.align", "vocab.txt"].map(|f| fs::read_to_string(out.join(f)).unwrap())
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert_eq!(a[0], a[1]);
    assert_eq!(a[0].lines().count(), 15);
}
