use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actors::ActorKind;
use crate::decoding::{DecodeConfig, LengthLimit, Method, NpadConfig};
use crate::distill::{actor_train_config, DistillConfig};
use crate::error::{Error, Result};
use crate::seq2seq::{ModelDims, TrainConfig};
use crate::textio::{SyntheticConfig, SyntheticTask};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

/// Decoding method names as used on the command line and in reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Greedy,
    Beam,
    Npad,
    /// Greedy with the trained actor.
    Tg,
    /// Beam search with the trained actor.
    TgBeam,
}

impl MethodName {
    pub fn uses_actor(self) -> bool {
        matches!(self, MethodName::Tg | MethodName::TgBeam)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub task: SyntheticTask,
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub noise_prob: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTask::DictSub,
            vocab_size: 50,
            len_min: 4,
            len_max: 12,
            noise_prob: 0.15,
            n_train: 2000,
            n_test: 200,
        }
    }
}

impl DataConfig {
    pub fn synthetic(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            task: self.task,
            n_pairs: self.n_train + self.n_test,
            vocab_size: self.vocab_size,
            len_min: self.len_min,
            len_max: self.len_max,
            noise_prob: self.noise_prob,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_h: usize,
    pub n_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_emb: 64,
            d_h: 64,
            n_layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActorConfig {
    pub kind: ActorKind,
    /// Hidden width for ff/ff2/rnn; defaults to `d_h`.
    pub hidden_dim: Option<usize>,
    pub train: TrainConfig,
    /// Test sentences greedy-decoded after each epoch for the norm probe.
    pub probe_sentences: usize,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            kind: ActorKind::Gate,
            hidden_dim: None,
            train: actor_train_config(10, 0),
            probe_sentences: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    pub method: MethodName,
    pub beam_k: usize,
    pub len_norm: bool,
    pub max_len: LengthLimit,
    pub npad: NpadConfig,
    pub trace: bool,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            method: MethodName::Greedy,
            beam_k: 4,
            len_norm: false,
            max_len: LengthLimit::default(),
            npad: NpadConfig::default(),
            trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub methods: Vec<MethodName>,
    /// Sentences decoded untimed before each method's timed pass.
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![MethodName::Greedy, MethodName::Beam, MethodName::Tg, MethodName::TgBeam],
            warmup: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub axis: Option<String>,
    pub values: Vec<String>,
}

/// Input and artifact locations; unset entries resolve under `out_dir`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub vocab_src: Option<PathBuf>,
    pub vocab_tgt: Option<PathBuf>,
    pub base_ckpt: Option<PathBuf>,
    pub actor_ckpt: Option<PathBuf>,
    pub pseudo_corpus: Option<PathBuf>,
    /// Source file for `decode`; defaults to the test source side.
    pub input: Option<PathBuf>,
    /// Hypothesis file for `eval`; defaults to the configured method's output.
    pub hyp: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: ReportFormat,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub base: TrainConfig,
    pub distill: DistillConfig,
    pub actor: ActorConfig,
    pub decode: DecodeSettings,
    pub bench: BenchConfig,
    pub sweep: SweepConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: VERSION.to_string(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            format: ReportFormat::Json,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            base: TrainConfig {
                epochs: 12,
                ..TrainConfig::default()
            },
            distill: DistillConfig::default(),
            actor: ActorConfig::default(),
            decode: DecodeSettings::default(),
            bench: BenchConfig::default(),
            sweep: SweepConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale settings used by the reproduction: longer sentences, a
    /// single-layer model trained for 16 epochs, beam 8 for distillation.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.data.len_min = 10;
        cfg.data.len_max = 25;
        cfg.model.n_layers = 1;
        cfg.base.epochs = 16;
        cfg.distill.beam_k = 8;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks dimensions and ranges before any work starts.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        ModelDims {
            src_vocab: 1,
            tgt_vocab: 1,
            d_emb: m.d_emb,
            d_h: m.d_h,
            n_layers: m.n_layers,
        }
        .validate()?;
        self.data.synthetic(self.seed).validate()?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        self.distill.validate()?;
        if self.decode.beam_k == 0 {
            return Err(Error::Config("beam_k must be at least 1".into()));
        }
        if self.actor.hidden_dim == Some(0) {
            return Err(Error::Config("actor hidden_dim must be positive".into()));
        }
        for (name, o) in [("base", &self.base.optim), ("actor", &self.actor.train.optim)] {
            if !o.lr.is_finite() || o.lr <= 0.0 || o.batch_size == 0 {
                return Err(Error::Config(format!("{name} optimizer needs lr > 0 and batch_size >= 1")));
            }
        }
        Ok(())
    }

    pub fn actor_hidden(&self) -> usize {
        self.actor.hidden_dim.unwrap_or(self.model.d_h)
    }

    /// Base training settings with the run seed applied.
    pub fn base_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.base.clone()
        }
    }

    pub fn actor_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.actor.train.clone()
        }
    }

    pub fn path(&self, set: &Option<PathBuf>, default: &str) -> PathBuf {
        set.clone().unwrap_or_else(|| self.out_dir.join(default))
    }

    pub fn train_paths(&self) -> (PathBuf, PathBuf) {
        (
            self.path(&self.paths.train_src, "data/train.src"),
            self.path(&self.paths.train_tgt, "data/train.tgt"),
        )
    }

    pub fn test_paths(&self) -> (PathBuf, PathBuf) {
        (
            self.path(&self.paths.test_src, "data/test.src"),
            self.path(&self.paths.test_tgt, "data/test.tgt"),
        )
    }

    pub fn vocab_paths(&self) -> (PathBuf, PathBuf) {
        (
            self.path(&self.paths.vocab_src, "data/vocab.src"),
            self.path(&self.paths.vocab_tgt, "data/vocab.tgt"),
        )
    }

    pub fn base_ckpt(&self) -> PathBuf {
        self.path(&self.paths.base_ckpt, "base.ckpt")
    }

    pub fn actor_ckpt(&self) -> PathBuf {
        self.path(&self.paths.actor_ckpt, "actor.ckpt")
    }

    pub fn pseudo_corpus(&self) -> PathBuf {
        self.path(&self.paths.pseudo_corpus, "pseudo.jsonl")
    }

    /// Decode settings for a named method under this config.
    pub fn decode_config(&self, method: MethodName) -> DecodeConfig {
        let m = match method {
            MethodName::Greedy | MethodName::Tg => Method::Greedy,
            MethodName::Beam | MethodName::TgBeam => Method::Beam {
                k: self.decode.beam_k,
                len_norm: self.decode.len_norm,
            },
            MethodName::Npad => Method::Npad(NpadConfig {
                seed: self.seed,
                ..self.decode.npad.clone()
            }),
        };
        DecodeConfig {
            method: m,
            max_len: self.decode.max_len,
            trace: self.decode.trace,
        }
    }

    pub fn method_label(&self, method: MethodName) -> String {
        match method {
            MethodName::Greedy => "greedy".into(),
            MethodName::Beam => format!("beam{}", self.decode.beam_k),
            MethodName::Npad => "npad".into(),
            MethodName::Tg => "tg".into(),
            MethodName::TgBeam => format!("tg+beam{}", self.decode.beam_k),
        }
    }
}
