//! Vocabulary, synthetic source/summary corpora with gold alignments, and
//! line-aligned corpus files.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::AlignmentSet;
use crate::model::{BOS, EOS, N_RESERVED, PAD, UNK};

const RESERVED: [&str; N_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id map. Ids below 4 are reserved; the file form lists the
/// remaining tokens one per line, line `i` holding id `i + 4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.add(t);
        }
        v
    }

    /// `w4 .. w{size-1}`: token names for synthetic ids.
    pub fn synthetic(size: usize) -> Self {
        let mut v = Self::new();
        for id in N_RESERVED..size {
            v.add(&format!("w{id}"));
        }
        v
    }

    /// Id of `token`, adding it if new.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Whitespace tokenization; unknown tokens become UNK and are reported
    /// through `unknown`.
    pub fn encode(&self, text: &str, unknown: &mut HashSet<String>) -> Vec<usize> {
        text.split_whitespace()
            .map(|tok| {
                self.id(tok).unwrap_or_else(|| {
                    if unknown.insert(tok.to_string()) {
                        log::warn!("unknown token `{tok}` mapped to {}", RESERVED[UNK]);
                    }
                    UNK
                })
            })
            .collect()
    }

    /// Space-joined tokens, without PAD, BOS and EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_file_string(&self) -> String {
        self.tokens[N_RESERVED..].iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read(path)?;
        let mut v = Self::new();
        for (no, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Data(format!("{}:{}: bad vocabulary entry", path.display(), no + 1)));
            }
            if v.id(tok).is_some() {
                return Err(Error::Data(format!("{}:{}: duplicate token `{tok}`", path.display(), no + 1)));
            }
            v.add(tok);
        }
        Ok(v)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    SalientExtract,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::SalientExtract => "salient_extract",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "salient_extract" | "salient" => Ok(Task::SalientExtract),
            _ => Err(Error::Usage(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub task: Task,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of source tokens that belong to the summary.
    pub salience: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn salient(vocab_size: usize, seed: u64) -> Self {
        Self {
            task: Task::SalientExtract,
            vocab_size,
            min_len: 6,
            max_len: 12,
            salience: 0.5,
            seed,
        }
    }

    pub fn copy(vocab_size: usize, seed: u64) -> Self {
        Self {
            task: Task::Copy,
            vocab_size,
            min_len: 3,
            max_len: 8,
            salience: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Usage(format!(
                "source lengths {}..={} must start at 2 or more",
                self.min_len, self.max_len
            )));
        }
        if !(self.salience > 0.0 && self.salience <= 1.0) {
            return Err(Error::Usage("salience must lie in (0, 1]".into()));
        }
        if self.vocab_size < N_RESERVED + 2 {
            return Err(Error::Usage(format!(
                "vocab_size {} leaves fewer than two content tokens to split",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Salient ids are the lower half of the content ids, distractors the
    /// upper half.
    pub fn salient_ids(&self) -> std::ops::Range<usize> {
        N_RESERVED..N_RESERVED + (self.vocab_size - N_RESERVED) / 2
    }

    pub fn distractor_ids(&self) -> std::ops::Range<usize> {
        self.salient_ids().end..self.vocab_size
    }
}

/// One source/summary pair with optional gold alignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub alignment: Option<AlignmentSet>,
}

pub fn generate(spec: &SyntheticTaskSpec, n_pairs: usize) -> Result<Vec<Pair>> {
    spec.validate()?;
    if n_pairs == 0 {
        return Err(Error::Usage("n_pairs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let salient = spec.salient_ids();
    let distract = spec.distractor_ids();
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let (source, keep) = match spec.task {
            Task::Copy => {
                let src: Vec<usize> = (0..len).map(|_| rng.gen_range(N_RESERVED..spec.vocab_size)).collect();
                (src, vec![true; len])
            }
            Task::SalientExtract => {
                let n_sal = ((spec.salience * len as f64).round() as usize).clamp(1, len);
                let mut keep = vec![false; len];
                for i in rand::seq::index::sample(&mut rng, len, n_sal).iter() {
                    keep[i] = true;
                }
                let src = keep
                    .iter()
                    .map(|&k| {
                        if k {
                            rng.gen_range(salient.clone())
                        } else {
                            rng.gen_range(distract.clone())
                        }
                    })
                    .collect();
                (src, keep)
            }
        };
        let positions: Vec<usize> = (0..len).filter(|&i| keep[i]).collect();
        let target: Vec<usize> = positions.iter().map(|&i| source[i]).collect();
        let alignment = AlignmentSet::new(len, target.len(), positions.iter().enumerate().map(|(t, &s)| (s, t)))?;
        pairs.push(Pair {
            source,
            target,
            alignment: Some(alignment),
        });
    }
    Ok(pairs)
}

/// Splits off the last `n` pairs after a seeded shuffle.
pub fn split(mut pairs: Vec<Pair>, n: usize, seed: u64) -> (Vec<Pair>, Vec<Pair>) {
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rest = pairs.split_off(pairs.len().saturating_sub(n));
    (pairs, rest)
}

/// Reads line-aligned source and target files.
pub fn load_parallel(source_path: &Path, target_path: &Path, vocab: &Vocab) -> Result<Vec<Pair>> {
    let src = read(source_path)?;
    let tgt = read(target_path)?;
    let (sl, tl): (Vec<&str>, Vec<&str>) = (src.lines().collect(), tgt.lines().collect());
    if sl.len() != tl.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            source_path.display(),
            sl.len(),
            target_path.display(),
            tl.len()
        )));
    }
    let mut unknown = HashSet::new();
    sl.iter()
        .zip(&tl)
        .enumerate()
        .map(|(no, (s, t))| {
            let source = vocab.encode(s, &mut unknown);
            let target = vocab.encode(t, &mut unknown);
            if source.is_empty() || target.is_empty() {
                let side = if source.is_empty() { source_path } else { target_path };
                return Err(Error::Data(format!("{}:{}: empty sequence", side.display(), no + 1)));
            }
            Ok(Pair {
                source,
                target,
                alignment: None,
            })
        })
        .collect()
}

/// Attaches alignments read from a file with one line per pair.
pub fn load_alignments(path: &Path, pairs: &mut [Pair]) -> Result<()> {
    let text = read(path)?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != pairs.len() {
        return Err(Error::Usage(format!(
            "{} has {} lines for {} sentence pairs",
            path.display(),
            lines.len(),
            pairs.len()
        )));
    }
    for (no, (line, pair)) in lines.iter().zip(pairs.iter_mut()).enumerate() {
        let a = AlignmentSet::parse(line, pair.source.len(), pair.target.len())
            .map_err(|e| Error::Usage(format!("{}:{}: {e}", path.display(), no + 1)))?;
        pair.alignment = Some(a);
    }
    Ok(())
}

/// Writes `<prefix>.src`, `<prefix>.tgt` and `<prefix>.align`.
pub fn write_pairs(prefix: &Path, pairs: &[Pair], vocab: &Vocab) -> Result<()> {
    let mut src = String::new();
    let mut tgt = String::new();
    let mut align = String::new();
    for p in pairs {
        src.push_str(&vocab.decode(&p.source));
        src.push('\n');
        tgt.push_str(&vocab.decode(&p.target));
        tgt.push('\n');
        if let Some(a) = &p.alignment {
            align.push_str(&a.to_string());
        }
        align.push('\n');
    }
    for (ext, body) in [("src", src), ("tgt", tgt), ("align", align)] {
        let path = prefix.with_extension(ext);
        std::fs::write(&path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_task_targets_equal_sources() {
        let pairs = generate(&SyntheticTaskSpec::copy(20, 4), 30).unwrap();
        for p in &pairs {
            assert_eq!(p.source, p.target);
            assert_eq!(p.alignment.as_ref().unwrap(), &AlignmentSet::diagonal(p.source.len()));
        }
    }

    #[test]
    fn salient_targets_are_the_salient_subsequence() {
        let spec = SyntheticTaskSpec::salient(64, 9);
        for p in generate(&spec, 50).unwrap() {
            let want: Vec<usize> = p.source.iter().copied().filter(|t| spec.salient_ids().contains(t)).collect();
            assert_eq!(p.target, want);
            let a = p.alignment.unwrap();
            for (s, t) in a.iter() {
                assert_eq!(p.source[s], p.target[t]);
            }
            assert!(p.source.len() >= 2);
        }
    }

    #[test]
    fn full_salience_is_a_copy_task() {
        let mut spec = SyntheticTaskSpec::salient(64, 2);
        spec.salience = 1.0;
        for p in generate(&spec, 20).unwrap() {
            assert_eq!(p.source, p.target);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticTaskSpec::salient(64, 5);
        assert_eq!(generate(&spec, 10).unwrap(), generate(&spec, 10).unwrap());
        let other = SyntheticTaskSpec { seed: 6, ..spec.clone() };
        assert_ne!(generate(&spec, 10).unwrap(), generate(&other, 10).unwrap());
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(generate(&SyntheticTaskSpec::salient(5, 1), 3).is_err());
        let mut s = SyntheticTaskSpec::copy(20, 1);
        s.min_len = 1;
        assert!(generate(&s, 3).is_err());
    }

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::synthetic(10);
        let mut unk = HashSet::new();
        let ids = v.encode("w4 w9 w5", &mut unk);
        assert_eq!(ids, vec![4, 9, 5]);
        assert_eq!(v.decode(&ids), "w4 w9 w5");
        assert_eq!(v.encode("w4 zzz zzz", &mut unk), vec![4, UNK, UNK]);
        assert_eq!(unk.len(), 1);
        let text = v.to_file_string();
        assert_eq!(text.lines().next(), Some("w4"));
    }
}
