//! Python bindings for the tgdecode toolkit.
//!
//! Token sequences cross the boundary as lists of integer ids using the
//! reserved layout of the core crate (PAD, BOS, EOS, UNK first).
//!
//!     import tgdecode_py as tg
//!     pairs = tg.gen_synthetic(n_pairs=200, seed=0)
//!     model = tg.Model(54, 54, d_emb=16, d_h=16)
//!     model.train(pairs, epochs=2)
//!     tokens, logprob = model.greedy(pairs[0][0])

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tgdecode::actors::{Actor, ActorKind};
use tgdecode::cli::{run_pipeline, RunConfig};
use tgdecode::decoding::{self, LengthLimit, NpadConfig};
use tgdecode::distill::{self, actor_train_config, DistillConfig, PseudoPair, Strategy};
use tgdecode::metrics::{self, ObjectiveFn, Smoothing};
use tgdecode::optim::OptimConfig;
use tgdecode::rng::substream;
use tgdecode::seq2seq::{train_base, ModelDims, Seq2SeqModel, TrainConfig};
use tgdecode::textio::{gen_synthetic as core_gen_synthetic, SentencePair, SyntheticConfig, SyntheticTask};
use tgdecode::Error;

type Pair = (Vec<usize>, Vec<usize>);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Vocab { .. } | Error::Text(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn sentence_pairs(pairs: &[Pair]) -> Vec<SentencePair> {
    pairs
        .iter()
        .map(|(src, tgt)| {
            let mut tgt = tgt.clone();
            if tgt.last() != Some(&tgdecode::textio::EOS) {
                tgt.push(tgdecode::textio::EOS);
            }
            SentencePair { src: src.clone(), tgt }
        })
        .collect()
}

fn limit(src: &[usize], max_len: Option<usize>) -> usize {
    max_len.unwrap_or_else(|| LengthLimit::default().for_source(src.len()))
}

/// Attentional GRU encoder-decoder.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Seq2SeqModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (src_vocab, tgt_vocab, d_emb=64, d_h=64, n_layers=2, seed=0))]
    fn new(src_vocab: usize, tgt_vocab: usize, d_emb: usize, d_h: usize, n_layers: usize, seed: u64) -> PyResult<Self> {
        let dims = ModelDims {
            src_vocab,
            tgt_vocab,
            d_emb,
            d_h,
            n_layers,
        };
        Ok(Self {
            inner: Seq2SeqModel::new(dims, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Seq2SeqModel::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// SHA-256 of the serialized parameters.
    fn param_hash(&self) -> String {
        self.inner.param_hash()
    }

    /// Teacher-forced training; returns the mean loss of each epoch.
    #[pyo3(signature = (pairs, epochs=10, lr=1e-3, batch_size=32, seed=0))]
    fn train(&mut self, pairs: Vec<Pair>, epochs: usize, lr: f64, batch_size: usize, seed: u64) -> PyResult<Vec<f64>> {
        let cfg = TrainConfig {
            optim: OptimConfig {
                lr,
                batch_size,
                ..OptimConfig::default()
            },
            epochs,
            seed,
        };
        let report = train_base(&mut self.inner, &sentence_pairs(&pairs), &cfg).map_err(py_err)?;
        Ok(report.epoch_losses)
    }

    #[pyo3(signature = (src, actor=None, max_len=None))]
    fn greedy(&self, src: Vec<usize>, actor: Option<PyRef<'_, PyActor>>, max_len: Option<usize>) -> PyResult<(Vec<usize>, f64)> {
        let a = actor.as_ref().map(|a| &a.inner);
        let r = decoding::greedy(&self.inner, &src, a, limit(&src, max_len)).map_err(py_err)?;
        Ok((r.tokens, r.logprob))
    }

    /// Completed hypotheses, best first.
    #[pyo3(signature = (src, k=4, actor=None, max_len=None, len_norm=false))]
    fn beam(
        &self,
        src: Vec<usize>,
        k: usize,
        actor: Option<PyRef<'_, PyActor>>,
        max_len: Option<usize>,
        len_norm: bool,
    ) -> PyResult<Vec<(Vec<usize>, f64)>> {
        let a = actor.as_ref().map(|a| &a.inner);
        let out = decoding::beam(&self.inner, &src, k, a, limit(&src, max_len), len_norm).map_err(py_err)?;
        Ok(out.kbest.into_iter().map(|r| (r.tokens, r.logprob)).collect())
    }

    #[pyo3(signature = (src, n_samples=4, sigma0=0.5, include_greedy=false, seed=0, max_len=None))]
    fn npad(
        &self,
        src: Vec<usize>,
        n_samples: usize,
        sigma0: f64,
        include_greedy: bool,
        seed: u64,
        max_len: Option<usize>,
    ) -> PyResult<(Vec<usize>, f64)> {
        let cfg = NpadConfig {
            n_samples,
            sigma0,
            include_greedy,
            seed,
        };
        let mut rng = substream(seed, "npad");
        let r = decoding::npad(&self.inner, &src, &cfg, limit(&src, max_len), &mut rng).map_err(py_err)?;
        Ok((r.tokens, r.logprob))
    }

    #[pyo3(signature = (src, tgt, actor=None))]
    fn sequence_logprob(&self, src: Vec<usize>, tgt: Vec<usize>, actor: Option<PyRef<'_, PyActor>>) -> PyResult<f64> {
        let a = actor.as_ref().map(|a| &a.inner);
        self.inner.sequence_logprob(&src, &tgt, a).map_err(py_err)
    }

    /// Mean per-token probability of `tgt`.
    #[pyo3(signature = (src, tgt, actor=None))]
    fn word_likelihood(&self, src: Vec<usize>, tgt: Vec<usize>, actor: Option<PyRef<'_, PyActor>>) -> PyResult<f64> {
        let a = actor.as_ref().map(|a| &a.inner);
        metrics::word_likelihood(&self.inner, a, &src, &tgt).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let d = &self.inner.dims;
        format!(
            "Model(src_vocab={}, tgt_vocab={}, d_emb={}, d_h={}, n_layers={})",
            d.src_vocab, d.tgt_vocab, d.d_emb, d.d_h, d.n_layers
        )
    }
}

/// Network adding an action to the attentional hidden state.
#[pyclass(name = "Actor")]
struct PyActor {
    inner: Actor,
}

#[pymethods]
impl PyActor {
    #[new]
    #[pyo3(signature = (kind="gate", d_h=64, hidden_dim=None, seed=0))]
    fn new(kind: &str, d_h: usize, hidden_dim: Option<usize>, seed: u64) -> PyResult<Self> {
        let kind: ActorKind = parse(kind)?;
        Ok(Self {
            inner: Actor::new(kind, d_h, hidden_dim.unwrap_or(d_h), seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Actor::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Trains on `(src, tgt)` pairs with `model` frozen; returns epoch losses.
    #[pyo3(signature = (model, pairs, epochs=10, seed=0))]
    fn train(&mut self, model: PyRef<'_, PyModel>, pairs: Vec<Pair>, epochs: usize, seed: u64) -> PyResult<Vec<f64>> {
        let corpus: Vec<PseudoPair> = sentence_pairs(&pairs)
            .into_iter()
            .map(|p| PseudoPair {
                gold: p.tgt.clone(),
                src: p.src,
                tgt: p.tgt,
                objective: 0.0,
                beam_rank: 0,
                strategy: Strategy::Para,
            })
            .collect();
        let cfg = actor_train_config(epochs, seed);
        let report = distill::train_actor(&model.inner, &mut self.inner, &corpus, &cfg, None).map_err(py_err)?;
        Ok(report.epoch_losses)
    }

    fn __repr__(&self) -> String {
        format!("Actor(kind={:?}, params={})", self.inner.kind().name(), self.inner.num_params())
    }
}

/// Synthetic `(src, tgt)` id pairs; targets end with EOS.
#[pyfunction]
#[pyo3(signature = (task="dict_sub", n_pairs=2200, vocab_size=50, len_min=4, len_max=12, noise_prob=0.15, seed=0))]
fn gen_synthetic(
    task: &str,
    n_pairs: usize,
    vocab_size: usize,
    len_min: usize,
    len_max: usize,
    noise_prob: f64,
    seed: u64,
) -> PyResult<Vec<Pair>> {
    let task: SyntheticTask = task.parse().map_err(|e: tgdecode::textio::TextError| PyValueError::new_err(e.to_string()))?;
    let cfg = SyntheticConfig {
        task,
        n_pairs,
        vocab_size,
        len_min,
        len_max,
        noise_prob,
        seed,
    };
    let (corpus, _, _) = core_gen_synthetic(&cfg).map_err(|e| py_err(e.into()))?;
    Ok(corpus.pairs.into_iter().map(|p| (p.src, p.tgt)).collect())
}

/// Beam-decodes each source and keeps the candidates chosen by `strategy`.
#[pyfunction]
#[pyo3(signature = (model, pairs, beam_k=8, strategy="top1", objective="sbleu"))]
fn distill_corpus(model: PyRef<'_, PyModel>, pairs: Vec<Pair>, beam_k: usize, strategy: &str, objective: &str) -> PyResult<Vec<Pair>> {
    let cfg = DistillConfig {
        beam_k,
        strategy: parse(strategy)?,
        objective: parse(objective)?,
        ..DistillConfig::default()
    };
    let records = distill::build_pseudo_corpus(&model.inner, &sentence_pairs(&pairs), &cfg).map_err(py_err)?;
    Ok(records.into_iter().map(|r| (r.src, r.tgt)).collect())
}

/// Corpus BLEU in [0, 1].
#[pyfunction]
fn corpus_bleu(hyps: Vec<Vec<usize>>, refs: Vec<Vec<usize>>) -> PyResult<f64> {
    metrics::corpus_bleu(&hyps, &refs).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (hyp, reference, smoothed=true))]
fn sentence_bleu(hyp: Vec<usize>, reference: Vec<usize>, smoothed: bool) -> f64 {
    let smoothing = if smoothed { Smoothing::AddOne } else { Smoothing::None };
    metrics::sentence_bleu(&hyp, &reference, smoothing)
}

#[pyfunction]
fn ter(hyp: Vec<usize>, reference: Vec<usize>) -> f64 {
    metrics::ter(&hyp, &reference)
}

/// Scores `hyp` with a named objective (`sbleu`, `sbleu-raw`, `neg-ter`).
#[pyfunction]
fn objective(name: &str, hyp: Vec<usize>, reference: Vec<usize>) -> PyResult<f64> {
    let f: ObjectiveFn = parse(name)?;
    Ok(f.score(&hyp, &reference))
}

/// Runs every stage for a JSON run configuration and returns the report as JSON.
#[pyfunction]
fn pipeline(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg: RunConfig = serde_json_from(config_json)?;
    let report = py.detach(|| run_pipeline(&cfg)).map_err(py_err)?;
    serde_json_to(&report)
}

fn serde_json_from<T: serde::de::DeserializeOwned>(s: &str) -> PyResult<T> {
    serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn serde_json_to<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn tgdecode_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyActor>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(distill_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(ter, m)?)?;
    m.add_function(wrap_pyfunction!(objective, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    m.add("__version__", tgdecode::cli::VERSION)?;
    Ok(())
}
