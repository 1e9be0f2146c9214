//! Vocabularies, parallel corpora and synthetic translation tasks.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::substream;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TextError + '_ {
    move |source| TextError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Bijective token/id map. Ids `0..4` are the reserved control tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary over `tokens` in the given order, after the reserved ids.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(TextError::Config(format!("invalid token {tok:?}")));
            }
            if token_to_id.contains_key(&tok) {
                return Err(TextError::Config(format!("duplicate token {tok:?}")));
            }
            token_to_id.insert(tok.clone(), id_to_token.len());
            id_to_token.push(tok);
        }
        Ok(Self {
            id_to_token,
            token_to_id,
        })
    }

    /// Counts whitespace tokens and keeps those seen at least `min_count` times,
    /// ordered by descending frequency with lexicographic tie-breaking.
    pub fn build<I, S>(lines: I, min_count: usize) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(TextError::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut n_lines = 0usize;
        for line in lines {
            n_lines += 1;
            for tok in line.as_ref().split_whitespace() {
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        if n_lines == 0 || counts.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() == NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Ids for the content tokens, i.e. everything after the reserved range.
    pub fn content_ids(&self) -> std::ops::Range<usize> {
        NUM_RESERVED..self.len()
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens up to the first EOS; PAD and BOS are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// File image: one content token per line.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for tok in &self.id_to_token[NUM_RESERVED..] {
            s.push_str(tok);
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the file image, recorded in checkpoint headers.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        fs::write(path, self.to_file_string()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_tokens(text.lines().map(str::to_string)).map_err(|e| TextError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Vec<usize>,
    /// Target ids, always ending with EOS.
    pub tgt: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub name: String,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    /// Validates non-empty sequences and appends EOS to each target.
    pub fn from_sequences(
        name: impl Into<String>,
        seqs: impl IntoIterator<Item = (Vec<usize>, Vec<usize>)>,
    ) -> Result<Self, TextError> {
        let mut pairs = Vec::new();
        for (i, (src, mut tgt)) in seqs.into_iter().enumerate() {
            if src.is_empty() || tgt.is_empty() {
                return Err(TextError::Config(format!("pair {i} has an empty side")));
            }
            if tgt.last() != Some(&EOS) {
                tgt.push(EOS);
            }
            pairs.push(SentencePair { src, tgt });
        }
        Ok(Self {
            name: name.into(),
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// First `n` pairs and the rest, as two named corpora.
    pub fn split_at(&self, n: usize) -> (ParallelCorpus, ParallelCorpus) {
        let n = n.min(self.pairs.len());
        (
            ParallelCorpus {
                name: format!("{}.head", self.name),
                pairs: self.pairs[..n].to_vec(),
            },
            ParallelCorpus {
                name: format!("{}.tail", self.name),
                pairs: self.pairs[n..].to_vec(),
            },
        )
    }

    /// Writes the corpus as two token-per-word text files (EOS stripped).
    pub fn write_text(
        &self,
        src_path: &Path,
        tgt_path: &Path,
        vocab_src: &Vocabulary,
        vocab_tgt: &Vocabulary,
    ) -> Result<(), TextError> {
        let mut src = String::new();
        let mut tgt = String::new();
        for p in &self.pairs {
            src.push_str(&vocab_src.decode(&p.src));
            src.push('\n');
            tgt.push_str(&vocab_tgt.decode(&p.tgt));
            tgt.push('\n');
        }
        fs::write(src_path, src).map_err(io_err(src_path))?;
        fs::write(tgt_path, tgt).map_err(io_err(tgt_path))
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, TextError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))
}

/// Reads a sentence-aligned pair of files.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
) -> Result<ParallelCorpus, TextError> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(TextError::Format {
            path: src_path.display().to_string(),
            message: format!(
                "line count mismatch: {} source lines vs {} target lines",
                src.len(),
                tgt.len()
            ),
        });
    }
    if src.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut seqs = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        for (line, path) in [(s, src_path), (t, tgt_path)] {
            if line.trim().is_empty() {
                return Err(TextError::Format {
                    path: path.display().to_string(),
                    message: format!("empty line {}", i + 1),
                });
            }
        }
        seqs.push((vocab_src.encode(s), vocab_tgt.encode(t)));
    }
    let name = src_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ParallelCorpus::from_sequences(name, seqs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    Copy,
    Reverse,
    DictSub,
}

impl std::str::FromStr for SyntheticTask {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "dict_sub" | "dict-sub" => Ok(Self::DictSub),
            other => Err(TextError::Config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub task: SyntheticTask,
    pub n_pairs: usize,
    /// Number of content tokens on each side.
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub noise_prob: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), TextError> {
        if self.vocab_size < 5 {
            return Err(TextError::Config(format!(
                "vocab_size must be at least 5, got {}",
                self.vocab_size
            )));
        }
        if self.len_min < 1 || self.len_min > self.len_max || self.len_max > 40 {
            return Err(TextError::Config(format!(
                "need 1 <= len_min <= len_max <= 40, got {}..={}",
                self.len_min, self.len_max
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(TextError::Config(format!(
                "noise_prob must lie in [0, 1], got {}",
                self.noise_prob
            )));
        }
        if self.n_pairs == 0 {
            return Err(TextError::Config("n_pairs must be positive".into()));
        }
        Ok(())
    }
}

/// Generates a synthetic translation corpus with its source and target vocabularies.
///
/// `dict_sub` maps every source token through a fixed random bijection and
/// reverses the order. For every task, each source token is independently
/// replaced by a uniformly drawn distractor with probability `noise_prob`;
/// the target is always built from the clean source.
pub fn gen_synthetic(
    cfg: &SyntheticConfig,
) -> Result<(ParallelCorpus, Vocabulary, Vocabulary), TextError> {
    cfg.validate()?;
    let v = cfg.vocab_size;
    let vocab_src = Vocabulary::from_tokens((0..v).map(|i| format!("x{i}")))?;
    let vocab_tgt = match cfg.task {
        SyntheticTask::DictSub => Vocabulary::from_tokens((0..v).map(|i| format!("y{i}")))?,
        _ => vocab_src.clone(),
    };
    let mut mapping: Vec<usize> = (0..v).collect();
    mapping.shuffle(&mut substream(cfg.seed, "dict"));

    let mut rng = substream(cfg.seed, "pairs");
    let mut seqs = Vec::with_capacity(cfg.n_pairs);
    for _ in 0..cfg.n_pairs {
        let len = rng.random_range(cfg.len_min..=cfg.len_max);
        let clean: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
        let target: Vec<usize> = match cfg.task {
            SyntheticTask::Copy => clean.clone(),
            SyntheticTask::Reverse => clean.iter().rev().copied().collect(),
            SyntheticTask::DictSub => clean.iter().rev().map(|&c| mapping[c]).collect(),
        };
        let source: Vec<usize> = clean
            .iter()
            .map(|&c| {
                if cfg.noise_prob > 0.0 && rng.random_bool(cfg.noise_prob) {
                    rng.random_range(0..v)
                } else {
                    c
                }
            })
            .collect();
        seqs.push((
            source.into_iter().map(|c| c + NUM_RESERVED).collect(),
            target.into_iter().map(|c| c + NUM_RESERVED).collect(),
        ));
    }
    let name = format!("{:?}-{}", cfg.task, cfg.seed).to_lowercase();
    let corpus = ParallelCorpus::from_sequences(name, seqs)?;
    Ok((corpus, vocab_src, vocab_tgt))
}

/// Standard file names used for a corpus split inside a data directory.
pub fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{split}.src")), dir.join(format!("{split}.tgt")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_vocab_min_count() {
        let v = Vocabulary::build(["a b", "a"], 1).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 2);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);

        let v = Vocabulary::build(["a b", "a"], 2).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 1);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn build_vocab_deterministic_order() {
        let lines = ["c b a", "b a", "a d"];
        let v1 = Vocabulary::build(lines, 1).unwrap();
        let v2 = Vocabulary::build(lines, 1).unwrap();
        assert_eq!(v1, v2);
        let order: Vec<&str> = v1.content_ids().map(|i| v1.token(i).unwrap()).collect();
        assert_eq!(order, ["a", "b", "c", "d"]);
    }

    #[test]
    fn build_vocab_errors() {
        assert!(matches!(
            Vocabulary::build(Vec::<String>::new(), 1),
            Err(TextError::EmptyCorpus)
        ));
        assert!(matches!(Vocabulary::build(["a"], 0), Err(TextError::Config(_))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(["z y x", "y"], 1).unwrap();
        let path = dir.path().join("vocab");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.token(EOS), Some("</s>"));
        assert_eq!(back.id("y"), 4);
    }

    #[test]
    fn load_parallel_pairs_and_unk() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = split_paths(dir.path(), "train");
        fs::write(&s, "a b\nb q\n").unwrap();
        fs::write(&t, "c\nc c\n").unwrap();
        let vs = Vocabulary::build(["a b"], 1).unwrap();
        let vt = Vocabulary::build(["c"], 1).unwrap();
        let corpus = load_parallel(&s, &t, &vs, &vt).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.pairs[1].src, vec![vs.id("b"), UNK]);
        assert_eq!(corpus.pairs[0].tgt, vec![vt.id("c"), EOS]);
        assert!(!corpus.pairs.iter().any(|p| p.tgt.contains(&BOS)));
        assert_eq!(vs.decode(&vs.encode("a b")), "a b");
    }

    #[test]
    fn load_parallel_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = split_paths(dir.path(), "x");
        let v = Vocabulary::build(["a"], 1).unwrap();
        fs::write(&s, "a\na\n").unwrap();
        fs::write(&t, "a\n").unwrap();
        let msg = load_parallel(&s, &t, &v, &v).unwrap_err().to_string();
        assert!(msg.contains("2 source") && msg.contains("1 target"), "{msg}");

        fs::write(&t, "a\n\n").unwrap();
        let msg = load_parallel(&s, &t, &v, &v).unwrap_err().to_string();
        assert!(msg.contains("empty line 2"), "{msg}");

        let missing = dir.path().join("nope");
        assert!(matches!(
            load_parallel(&missing, &t, &v, &v),
            Err(TextError::Io { .. })
        ));
    }

    fn cfg(task: SyntheticTask, noise: f64) -> SyntheticConfig {
        SyntheticConfig {
            task,
            n_pairs: 50,
            vocab_size: 12,
            len_min: 2,
            len_max: 9,
            noise_prob: noise,
            seed: 5,
        }
    }

    #[test]
    fn synthetic_copy_and_reverse() {
        let (c, vs, vt) = gen_synthetic(&cfg(SyntheticTask::Copy, 0.0)).unwrap();
        assert_eq!(vs, vt);
        for p in &c.pairs {
            assert_eq!(&p.tgt[..p.tgt.len() - 1], &p.src[..]);
        }
        let (c, _, _) = gen_synthetic(&cfg(SyntheticTask::Reverse, 0.0)).unwrap();
        for p in &c.pairs {
            let rev: Vec<usize> = p.src.iter().rev().copied().collect();
            assert_eq!(&p.tgt[..p.tgt.len() - 1], &rev[..]);
        }
    }

    #[test]
    fn synthetic_dict_sub_is_a_reversed_bijection() {
        let (c, vs, vt) = gen_synthetic(&cfg(SyntheticTask::DictSub, 0.0)).unwrap();
        assert_ne!(vs, vt);
        let mut map = HashMap::new();
        for p in &c.pairs {
            let body = &p.tgt[..p.tgt.len() - 1];
            for (s, t) in p.src.iter().zip(body.iter().rev()) {
                assert_eq!(*map.entry(*s).or_insert(*t), *t);
            }
        }
    }

    #[test]
    fn synthetic_noise_touches_only_sources() {
        let noisy = gen_synthetic(&cfg(SyntheticTask::Copy, 0.5)).unwrap().0;
        let mut mismatched = 0;
        for p in &noisy.pairs {
            assert_eq!(p.src.len() + 1, p.tgt.len());
            mismatched += p.src.iter().zip(&p.tgt).filter(|(a, b)| a != b).count();
        }
        assert!(mismatched > 0);
    }

    #[test]
    fn synthetic_is_deterministic_and_validated() {
        let a = gen_synthetic(&cfg(SyntheticTask::DictSub, 0.15)).unwrap();
        let b = gen_synthetic(&cfg(SyntheticTask::DictSub, 0.15)).unwrap();
        assert_eq!(a, b);
        let mut bad = cfg(SyntheticTask::Copy, 0.0);
        bad.vocab_size = 4;
        assert!(gen_synthetic(&bad).is_err());
        bad = cfg(SyntheticTask::Copy, 0.0);
        bad.len_max = 41;
        assert!(gen_synthetic(&bad).is_err());
        bad = cfg(SyntheticTask::Copy, 0.0);
        bad.len_min = 5;
        bad.len_max = 4;
        assert!(gen_synthetic(&bad).is_err());
    }

    proptest! {
        #[test]
        fn vocab_ids_round_trip(words in proptest::collection::vec("[a-z]{1,6}", 1..40)) {
            let line = words.join(" ");
            let v = Vocabulary::build([line.as_str()], 1).unwrap();
            for i in v.content_ids() {
                prop_assert_eq!(v.id(v.token(i).unwrap()), i);
            }
            prop_assert_eq!(v.decode(&v.encode(&line)), line);
        }

        #[test]
        fn corpus_text_round_trip(seed in 0u64..1000, noise in 0.0f64..0.5) {
            let c = SyntheticConfig { task: SyntheticTask::DictSub, n_pairs: 8, vocab_size: 9,
                len_min: 1, len_max: 6, noise_prob: noise, seed };
            let (corpus, vs, vt) = gen_synthetic(&c).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let (s, t) = split_paths(dir.path(), "rt");
            corpus.write_text(&s, &t, &vs, &vt).unwrap();
            let back = load_parallel(&s, &t, &vs, &vt).unwrap();
            prop_assert_eq!(back.pairs, corpus.pairs);
        }
    }
}
