//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{self, LAMBDA_GRID};
use crate::config::RunConfig;
use crate::corpus::{self, generate, load_alignments, load_parallel, SyntheticTaskSpec, Task, Vocab};
use crate::decode::{beam_search, BeamConfig};
use crate::error::{Error, Result};
use crate::eval::{corpus_rouge, Mode};
use crate::heads::{rank_heads, ranking_table};
use crate::heatmap;
use crate::model::checkpoint::{self, atomic_write, core_hash, Checkpoint};
use crate::model::{MaskStrategy, Model, OpponentFunction};
use crate::train::{train, AdamState, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "contrastive", version, about = "Transformer summarizer with contrastive attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (.src/.tgt/.align) and its vocabulary.
    GenCorpus(GenCorpusArgs),
    /// Train a model from a key=value config.
    Train(TrainArgs),
    /// Beam-decode source sentences.
    Decode(DecodeArgs),
    /// Score candidates against references with ROUGE-1/2/L.
    Eval(EvalArgs),
    /// Rank encoder-decoder heads by alignment error rate.
    InspectHeads(InspectArgs),
    /// Write attention heatmaps (CSV and SVG) for decoded sentences.
    ExportHeatmaps(HeatmapArgs),
    /// Fine-tune forks of a baseline under each ablation and tabulate ROUGE.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, default_value = "salient_extract")]
    pub task: String,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_pairs: usize,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub salience: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// File stem for the pair files.
    #[arg(long, default_value = "train")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config files, applied in order.
    #[arg(long = "config", required = true)]
    pub configs: Vec<PathBuf>,
    /// `key=value` overrides applied after the files.
    #[arg(long = "set")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// One source sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Weight of log P_o; defaults to the value the checkpoint was trained with.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Score with P_c only.
    #[arg(long)]
    pub no_po: bool,
    /// Output budget; defaults to source length + 10.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub mask_strategy: Option<String>,
    #[arg(long)]
    pub opponent_fn: Option<String>,
    /// Rank by total score instead of score per token.
    #[arg(long)]
    pub no_length_norm: bool,
    /// Directory for per-sentence attention CSVs.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    /// One line per candidate; several references separated by tabs.
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long, default_value = "f1")]
    pub mode: String,
    #[arg(long)]
    pub byte_cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub alignments: PathBuf,
    /// Number of leading pairs used.
    #[arg(long, default_value_t = 50)]
    pub sample: usize,
    /// Where to write the head-selection config fragment.
    #[arg(long, default_value = "head_selection.cfg")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// One source sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Gold targets to teacher-force instead of decoding.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    /// Average the heads of `--layer`.
    #[arg(long)]
    pub average: bool,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Baseline checkpoint to fork from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub train_source: PathBuf,
    #[arg(long)]
    pub train_target: PathBuf,
    #[arg(long)]
    pub test_source: PathBuf,
    #[arg(long)]
    pub test_target: PathBuf,
    /// Alignment sample for head ranking.
    #[arg(long)]
    pub dev_source: PathBuf,
    #[arg(long)]
    pub dev_target: PathBuf,
    #[arg(long)]
    pub dev_alignments: PathBuf,
    /// Training settings for the forks.
    #[arg(long = "config")]
    pub configs: Vec<PathBuf>,
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    /// Fine-tuning steps per fork.
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Also sweep λ over this comma-separated grid (on the dev pairs).
    #[arg(long, num_args = 0..=1, default_missing_value = "default")]
    pub lambda_grid: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectHeads(a) => cmd_inspect_heads(a),
        Command::ExportHeatmaps(a) => cmd_export_heatmaps(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("no such file: {}", path.display())))
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f64>> {
    require_file(path)?;
    checkpoint::load(path)
}

fn load_vocab(path: &Path, model: &Model<f64>) -> Result<Vocab> {
    require_file(path)?;
    let v = Vocab::load(path)?;
    if v.len() != model.config.vocab_size {
        return Err(Error::Usage(format!(
            "vocabulary {} has {} entries but the model expects {}",
            path.display(),
            v.len(),
            model.config.vocab_size
        )));
    }
    Ok(v)
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn cmd_gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let task: Task = a.task.parse()?;
    let mut spec = match task {
        Task::Copy => SyntheticTaskSpec::copy(a.vocab_size, a.seed),
        Task::SalientExtract => SyntheticTaskSpec::salient(a.vocab_size, a.seed),
    };
    spec.min_len = a.min_len.unwrap_or(spec.min_len);
    spec.max_len = a.max_len.unwrap_or(spec.max_len);
    spec.salience = a.salience.unwrap_or(spec.salience);
    let pairs = generate(&spec, a.n_pairs)?;
    mkdir(&a.out_dir)?;
    let vocab = Vocab::synthetic(a.vocab_size);
    corpus::write_pairs(&a.out_dir.join(&a.name), &pairs, &vocab)?;
    vocab.save(&a.out_dir.join("vocab.txt"))?;
    println!("wrote {} pairs to {}", pairs.len(), a.out_dir.join(&a.name).display());
    Ok(())
}

/// Resolves config files and overrides.
pub fn resolve_config(files: &[PathBuf], overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for f in files {
        cfg.apply_file(f)?;
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_manifest(cfg: &RunConfig, ckpt: &Path, sha: &str, model: &Model<f64>, step: usize, started: u64) -> Result<()> {
    let mut text = String::from("# run manifest: resolved config of the run that wrote the checkpoint\n");
    text.push_str(&cfg.to_text());
    writeln!(text, "manifest.seed = {}", cfg.train.seed).unwrap();
    writeln!(text, "manifest.step = {step}").unwrap();
    writeln!(text, "manifest.checkpoint = {}", ckpt.display()).unwrap();
    writeln!(text, "manifest.checkpoint_sha256 = {sha}").unwrap();
    writeln!(text, "manifest.core_sha256 = {}", core_hash(model)).unwrap();
    writeln!(text, "manifest.started_unix = {started}").unwrap();
    writeln!(text, "manifest.written_unix = {}", now()).unwrap();
    atomic_write(&cfg.out_dir.join("manifest.cfg"), &text)
}

fn save_run_checkpoint(cfg: &RunConfig, model: &Model<f64>, state: &AdamState<f64>, name: &str, started: u64) -> Result<()> {
    let path = cfg.out_dir.join(format!("{name}.ckpt"));
    let mut meta = BTreeMap::new();
    meta.insert("lambda".to_string(), cfg.train.lambda.to_string());
    meta.insert("seed".to_string(), cfg.train.seed.to_string());
    meta.insert("step".to_string(), state.step.to_string());
    let sha = checkpoint::save(model, &meta, &path)?;
    atomic_write(&path.with_extension("adam"), &state.to_text())?;
    write_manifest(cfg, &path, &sha, model, state.step as usize, started)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = now();
    let mut cfg = resolve_config(&a.configs, &a.overrides)?;
    let vocab_path = cfg.vocab.clone().ok_or_else(|| Error::config("vocab", "required for training"))?;
    let src = cfg.train_source.clone().ok_or_else(|| Error::config("train_source", "required for training"))?;
    let tgt = cfg.train_target.clone().ok_or_else(|| Error::config("train_target", "required for training"))?;
    for p in [&vocab_path, &src, &tgt] {
        require_file(p)?;
    }
    let vocab = Vocab::load(&vocab_path)?;
    if vocab.len() != cfg.model.vocab_size {
        log::info!("vocab_size set to {} from {}", vocab.len(), vocab_path.display());
        cfg.model.vocab_size = vocab.len();
    }
    let pairs = load_parallel(&src, &tgt, &vocab)?;
    let opponent = cfg.opponent_config();
    let (mut model, mut state) = match &cfg.init_checkpoint {
        Some(init) => {
            let ck = load_checkpoint(init)?;
            if ck.model.config != cfg.model {
                return Err(Error::config(
                    "init_checkpoint",
                    format!("{} was trained with a different model configuration", init.display()),
                ));
            }
            let model = ck.model.with_opponent(opponent, cfg.train.seed)?;
            let adam = init.with_extension("adam");
            let state = if adam.is_file() {
                let text = fs::read_to_string(&adam).map_err(|e| Error::io(format!("reading {}", adam.display()), e))?;
                AdamState::fork(&AdamState::from_text(&text, &ck.model.params)?, &model)
            } else {
                AdamState::new(&model.params)
            };
            (model, state)
        }
        None => {
            let model = Model::new(cfg.model.clone(), opponent, cfg.train.seed)?;
            let state = AdamState::new(&model.params);
            (model, state)
        }
    };
    mkdir(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.tsv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(format!("creating {}", metrics_path.display()), e))?;
    let tc: TrainConfig = cfg.train.clone();
    let report = train(&mut model, &pairs, &tc, &mut state, |rec, m, st| {
        writeln!(metrics, "{}", rec.tsv()).map_err(|e| Error::io("writing metrics", e))?;
        if tc.checkpoint_every > 0 && rec.step % tc.checkpoint_every == 0 {
            save_run_checkpoint(&cfg, m, st, &format!("step-{}", rec.step), started)?;
        }
        Ok(())
    })?;
    save_run_checkpoint(&cfg, &model, &state, "final", started)?;
    println!(
        "trained {} steps; final loss {:.4}; checkpoint {}",
        report.records.len(),
        report.records.last().map_or(f64::NAN, |r| r.loss),
        cfg.out_dir.join("final.ckpt").display()
    );
    Ok(())
}

fn apply_opponent_flags(model: &mut Model<f64>, mask: &Option<String>, func: &Option<String>) -> Result<()> {
    if mask.is_none() && func.is_none() {
        return Ok(());
    }
    let mut opp = model
        .opponent
        .clone()
        .ok_or_else(|| Error::Usage("--mask-strategy/--opponent-fn need a contrastive checkpoint".into()))?;
    if let Some(m) = mask {
        opp.mask_strategy = m.parse::<MaskStrategy>()?;
    }
    if let Some(f) = func {
        opp.opponent_function = f.parse::<OpponentFunction>()?;
    }
    model.set_opponent_config(opp)
}

fn checkpoint_lambda(ck: &Checkpoint<f64>) -> f64 {
    ck.meta.get("lambda").and_then(|v| v.parse().ok()).unwrap_or(1.0)
}

fn encode_lines(lines: &[String], vocab: &Vocab, path: &Path) -> Result<Vec<Vec<usize>>> {
    let mut unknown = Default::default();
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let ids = vocab.encode(l, &mut unknown);
            if ids.is_empty() {
                Err(Error::Usage(format!("{}:{}: empty source sentence", path.display(), i + 1)))
            } else {
                Ok(ids)
            }
        })
        .collect()
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let lambda = a.lambda.unwrap_or_else(|| checkpoint_lambda(&ck));
    let mut model = ck.model;
    apply_opponent_flags(&mut model, &a.mask_strategy, &a.opponent_fn)?;
    let vocab = load_vocab(&a.vocab, &model)?;
    let sources = encode_lines(&read_lines(&a.input)?, &vocab, &a.input)?;
    if let Some(dir) = &a.dump_attention {
        mkdir(dir)?;
    }
    let mut out = String::new();
    for (i, src) in sources.iter().enumerate() {
        let mut cfg = BeamConfig::new(a.beam, a.max_len.unwrap_or(BeamConfig::default_max_len(src.len())), lambda);
        cfg.use_po = !a.no_po;
        cfg.length_normalize = !a.no_length_norm;
        let hyps = beam_search(&model, src, &cfg)?;
        let best = &hyps[0];
        out.push_str(&vocab.decode(best.output()));
        out.push('\n');
        if let Some(dir) = &a.dump_attention {
            let (rec, _) = heatmap::capture(&model, src, best.output())?;
            let mut csv = String::from("layer,head,target,source,weight\n");
            for l in 0..rec.n_layers {
                for h in 0..rec.n_heads {
                    let w = rec.head(l, h);
                    for t in 0..w.rows() {
                        for s in 0..w.cols() {
                            writeln!(csv, "{l},{h},{t},{s},{}", w.at(t, s)).unwrap();
                        }
                    }
                }
            }
            write_file(&dir.join(format!("sentence-{:04}.csv", i + 1)), &csv)?;
        }
    }
    match &a.output {
        Some(p) => write_file(p, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mode: Mode = a.mode.parse()?;
    let cands: Vec<Vec<String>> = read_lines(&a.candidates)?.iter().map(|l| tokens(l)).collect();
    let refs: Vec<Vec<Vec<String>>> = read_lines(&a.references)?
        .iter()
        .map(|l| l.split('\t').map(tokens).collect())
        .collect();
    let report = corpus_rouge(&cands, &refs, mode, a.byte_cap)?;
    print!("{}", report.table());
    Ok(())
}

fn load_pairs(vocab: &Vocab, src: &Path, tgt: &Path) -> Result<Vec<corpus::Pair>> {
    require_file(src)?;
    require_file(tgt)?;
    load_parallel(src, tgt, vocab)
}

fn cmd_inspect_heads(a: InspectArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let vocab = load_vocab(&a.vocab, &ck.model)?;
    let mut pairs = load_pairs(&vocab, &a.source, &a.target)?;
    require_file(&a.alignments)?;
    load_alignments(&a.alignments, &mut pairs)?;
    pairs.truncate(a.sample.max(1));
    let ranking = rank_heads(&ck.model, &pairs)?;
    print!("{}", ranking_table(&ranking));
    let best = &ranking[0];
    let fragment = format!(
        "# synchronous head: lowest mean AER ({:.6}) over {} pairs\ncontrastive = true\nselected_layer = {}\nselected_head = {}\n",
        best.mean_aer,
        pairs.len(),
        best.layer,
        best.head
    );
    write_file(&a.out, &fragment)
}

fn cmd_export_heatmaps(a: HeatmapArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let lambda = a.lambda.unwrap_or_else(|| checkpoint_lambda(&ck));
    let model = ck.model;
    let c = &model.config;
    if a.layer >= c.n_layers || (!a.average && a.head >= c.n_heads) {
        return Err(Error::Usage(format!(
            "layer {} head {} outside a {}-layer, {}-head model",
            a.layer, a.head, c.n_layers, c.n_heads
        )));
    }
    let vocab = load_vocab(&a.vocab, &model)?;
    let sources = encode_lines(&read_lines(&a.input)?, &vocab, &a.input)?;
    let targets = match &a.targets {
        Some(p) => {
            let t = encode_lines(&read_lines(p)?, &vocab, p)?;
            if t.len() != sources.len() {
                return Err(Error::Usage(format!("{} and {} differ in line count", a.input.display(), p.display())));
            }
            Some(t)
        }
        None => None,
    };
    mkdir(&a.out_dir)?;
    let which = if a.average {
        format!("L{}-avg", a.layer)
    } else {
        format!("L{}-H{}", a.layer, a.head)
    };
    for (i, src) in sources.iter().enumerate() {
        let tgt = match &targets {
            Some(t) => t[i].clone(),
            None => {
                let cfg = BeamConfig::new(a.beam, BeamConfig::default_max_len(src.len()), lambda);
                beam_search(&model, src, &cfg)?[0].output().to_vec()
            }
        };
        let (rec, alpha_o) = heatmap::capture(&model, src, &tgt)?;
        let w = if a.average { rec.layer_mean(a.layer) } else { rec.head(a.layer, a.head).clone() };
        let src_labels: Vec<String> = src.iter().map(|&t| vocab.token(t).to_string()).collect();
        let mut tgt_labels: Vec<String> = tgt.iter().map(|&t| vocab.token(t).to_string()).collect();
        tgt_labels.push(vocab.token(crate::model::EOS).to_string());
        let stem = a.out_dir.join(format!("sentence-{:04}-{which}", i + 1));
        write_file(&stem.with_extension("csv"), &heatmap::attention_csv(&w, &src_labels, &tgt_labels))?;
        write_file(
            &stem.with_extension("svg"),
            &heatmap::attention_svg(&w, &src_labels, &tgt_labels, &format!("sentence {} {which}", i + 1)),
        )?;
        if let Some(ao) = alpha_o {
            let stem = a.out_dir.join(format!("sentence-{:04}-opponent", i + 1));
            write_file(&stem.with_extension("csv"), &heatmap::attention_csv(&ao, &src_labels, &tgt_labels))?;
            write_file(
                &stem.with_extension("svg"),
                &heatmap::attention_svg(&ao, &src_labels, &tgt_labels, &format!("sentence {} opponent", i + 1)),
            )?;
        }
    }
    println!("wrote heatmaps for {} sentences to {}", sources.len(), a.out_dir.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = resolve_config(&a.configs, &a.overrides)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let vocab = load_vocab(&a.vocab, &ck.model)?;
    let train_pairs = load_pairs(&vocab, &a.train_source, &a.train_target)?;
    let test = load_pairs(&vocab, &a.test_source, &a.test_target)?;
    let mut dev = load_pairs(&vocab, &a.dev_source, &a.dev_target)?;
    require_file(&a.dev_alignments)?;
    load_alignments(&a.dev_alignments, &mut dev)?;
    let adam = a.checkpoint.with_extension("adam");
    let state = if adam.is_file() {
        let text = fs::read_to_string(&adam).map_err(|e| Error::io(format!("reading {}", adam.display()), e))?;
        AdamState::from_text(&text, &ck.model.params)?
    } else {
        AdamState::new(&ck.model.params)
    };
    let base = ck.model.with_opponent(None, cfg.train.seed)?;
    let ranking = rank_heads(&base, &dev)?;
    let variants = ablation::standard_variants(&base.config, &ranking);
    let rows = ablation::run_variants(&base, &state, &train_pairs, &test, &cfg.train, a.steps, a.beam, &variants)?;
    let mut out = ablation::table(&rows);
    if let Some(grid) = &a.lambda_grid {
        let grid: Vec<f64> = if grid == "default" {
            LAMBDA_GRID.to_vec()
        } else {
            grid.split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Usage(format!("bad lambda `{v}`"))))
                .collect::<Result<_>>()?
        };
        let sync = &variants[0].opponent;
        let sweep = ablation::lambda_sweep(&base, &state, sync, &train_pairs, &dev, &cfg.train, a.steps, a.beam, &grid)?;
        out.push('\n');
        out.push_str(&ablation::table(&sweep));
    }
    match &a.out {
        Some(p) => write_file(p, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}
