//! Greedy, beam and noisy-parallel decoding, with or without an actor.
//!
//! Search is written against [`StepScorer`] so the same code drives the
//! real model and small hand-built models used as test oracles.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actors::{Actor, ActorState};
use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::rng::substream;
use crate::seq2seq::{DecoderState, Encoded, Seq2SeqModel};
use crate::textio::{BOS, EOS, PAD};

/// Per-step diagnostics of a decode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub token: usize,
    pub prob: f64,
    pub action_norm: f64,
    pub hidden_norm: f64,
    pub attn_hidden_norm: f64,
    pub context_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Emitted ids, ending with EOS unless cut at the length limit.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// Whether an actor perturbed the decoder during this decode.
    pub actor_applied: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<StepTrace>>,
}

impl DecodeResult {
    /// Emitted tokens without the final EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

pub struct Scored<S> {
    pub log_probs: Vec<f64>,
    pub state: S,
    pub trace: Option<StepTrace>,
}

/// One left-to-right scoring step of an autoregressive model.
pub trait StepScorer {
    type State: Clone;

    fn initial(&self) -> Self::State;

    /// Log-probabilities of the next token after `prev`; `t` counts steps from 1.
    fn step(&self, state: &Self::State, prev: usize, t: usize) -> Result<Scored<Self::State>>;

    fn start_token(&self) -> usize {
        BOS
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn allowed(&self, id: usize) -> bool {
        id != PAD && id != BOS
    }

    fn actor_applied(&self) -> bool {
        false
    }
}

/// Scores with a base model and optional actor over one encoded source.
pub struct ModelScorer<'a> {
    model: &'a Seq2SeqModel,
    enc: Encoded,
    actor: Option<&'a Actor>,
    trace: bool,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Seq2SeqModel, src: &[usize], actor: Option<&'a Actor>, trace: bool) -> Result<Self> {
        Ok(Self {
            model,
            enc: model.encode(src)?,
            actor,
            trace,
        })
    }
}

fn norm(t: &Tensor) -> f64 {
    t.l2_norm()
}

impl StepScorer for ModelScorer<'_> {
    type State = (DecoderState, Option<ActorState>);

    fn initial(&self) -> Self::State {
        (
            self.enc.init_state.clone(),
            self.actor.and_then(Actor::initial_state),
        )
    }

    fn step(&self, state: &Self::State, prev: usize, _t: usize) -> Result<Scored<Self::State>> {
        let out = self
            .model
            .decode_step(&state.0, prev, &self.enc, self.actor, state.1.as_ref())?;
        let trace = self.trace.then(|| StepTrace {
            token: 0,
            prob: 0.0,
            action_norm: out.action.as_ref().map_or(0.0, norm),
            hidden_norm: norm(&out.hidden),
            attn_hidden_norm: norm(&out.attn_pre),
            context_norm: norm(&out.context),
        });
        Ok(Scored {
            log_probs: out.log_probs.into_data(),
            state: (out.new_state, out.actor_state),
            trace,
        })
    }

    fn actor_applied(&self) -> bool {
        self.actor.is_some()
    }
}

/// Adds `N(0, (σ0/t)²)` noise to the attentional hidden state at step `t`.
struct NoisyScorer<'a> {
    model: &'a Seq2SeqModel,
    enc: &'a Encoded,
    sigma0: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl StepScorer for NoisyScorer<'_> {
    type State = DecoderState;

    fn initial(&self) -> Self::State {
        self.enc.init_state.clone()
    }

    fn step(&self, state: &Self::State, prev: usize, t: usize) -> Result<Scored<Self::State>> {
        let sigma = self.sigma0 / t as f64;
        let d = self.model.dims.d_h;
        let mut rng = self.rng.borrow_mut();
        let noise: Vec<f64> = (0..d)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let out = self
            .model
            .decode_step_perturbed(state, prev, self.enc, &Tensor::row(noise))?;
        Ok(Scored {
            log_probs: out.log_probs.into_data(),
            state: out.new_state,
            trace: None,
        })
    }
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    Ok(())
}

/// Argmax over allowed ids; the lowest id wins ties.
fn argmax<S: StepScorer + ?Sized>(scorer: &S, lp: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (id, &v) in lp.iter().enumerate() {
        if !scorer.allowed(id) {
            continue;
        }
        if best.is_none_or(|b| v > lp[b]) {
            best = Some(id);
        }
    }
    best
}

pub fn greedy_search<S: StepScorer>(scorer: &S, max_len: usize) -> Result<DecodeResult> {
    check_max_len(max_len)?;
    let mut state = scorer.initial();
    let mut prev = scorer.start_token();
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut trace = Vec::new();
    let mut tracing = false;
    for t in 1..=max_len {
        let out = scorer.step(&state, prev, t)?;
        let tok = argmax(scorer, &out.log_probs)
            .ok_or_else(|| Error::Contract("no token may be emitted".into()))?;
        logprob += out.log_probs[tok];
        if let Some(mut tr) = out.trace {
            tr.token = tok;
            tr.prob = out.log_probs[tok].exp();
            trace.push(tr);
            tracing = true;
        }
        tokens.push(tok);
        state = out.state;
        prev = tok;
        if tok == scorer.eos() {
            break;
        }
    }
    Ok(DecodeResult {
        tokens,
        logprob,
        actor_applied: scorer.actor_applied(),
        trace: tracing.then_some(trace),
    })
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<usize>,
    logprob: f64,
    state: S,
}

struct Cand {
    total: f64,
    parent: usize,
    local: f64,
    token: usize,
}

/// Candidate order: total score desc, then parent rank, local score desc,
/// token id. With `k = 1` this reproduces the greedy choice exactly.
fn cand_order(a: &Cand, b: &Cand) -> Ordering {
    b.total
        .total_cmp(&a.total)
        .then(a.parent.cmp(&b.parent))
        .then(b.local.total_cmp(&a.local))
        .then(a.token.cmp(&b.token))
}

fn final_score(r: &DecodeResult, len_norm: bool) -> f64 {
    if len_norm {
        r.logprob / r.tokens.len() as f64
    } else {
        r.logprob
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    /// Completed hypotheses, best first.
    pub kbest: Vec<DecodeResult>,
}

impl BeamOutput {
    pub fn best(&self) -> &DecodeResult {
        &self.kbest[0]
    }

    pub fn into_best(mut self) -> DecodeResult {
        self.kbest.swap_remove(0)
    }
}

/// Beam search keeping `k` live hypotheses. Finished hypotheses move to a
/// completed pool and free their slot; search stops once `k` hypotheses
/// have completed or every live one hits `max_len`.
pub fn beam_search<S: StepScorer>(scorer: &S, k: usize, max_len: usize, len_norm: bool) -> Result<BeamOutput> {
    if k == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    check_max_len(max_len)?;
    let eos = scorer.eos();
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logprob: 0.0,
        state: scorer.initial(),
    }];
    let mut completed: Vec<DecodeResult> = Vec::new();
    for t in 1..=max_len {
        let mut scored = Vec::with_capacity(live.len());
        let mut cands = Vec::new();
        for (rank, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(scorer.start_token());
            let out = scorer.step(&h.state, prev, t)?;
            for (token, &lp) in out.log_probs.iter().enumerate() {
                if scorer.allowed(token) {
                    cands.push(Cand {
                        total: h.logprob + lp,
                        parent: rank,
                        local: lp,
                        token,
                    });
                }
            }
            scored.push(out.state);
        }
        cands.sort_by(cand_order);
        let mut next = Vec::with_capacity(k);
        for c in cands {
            if next.len() == k || completed.len() == k {
                break;
            }
            let mut tokens = live[c.parent].tokens.clone();
            tokens.push(c.token);
            if c.token == eos || t == max_len {
                completed.push(DecodeResult {
                    tokens,
                    logprob: c.total,
                    actor_applied: scorer.actor_applied(),
                    trace: None,
                });
            } else {
                next.push(Hyp {
                    tokens,
                    logprob: c.total,
                    state: scored[c.parent].clone(),
                });
            }
        }
        if completed.len() >= k || next.is_empty() {
            break;
        }
        live = next;
    }
    if completed.is_empty() {
        return Err(Error::Contract("beam search produced no hypothesis".into()));
    }
    completed.sort_by(|a, b| final_score(b, len_norm).total_cmp(&final_score(a, len_norm)));
    Ok(BeamOutput { kbest: completed })
}

/// Length limit `factor·T_s + extra`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LengthLimit {
    pub factor: usize,
    pub extra: usize,
}

impl Default for LengthLimit {
    fn default() -> Self {
        Self { factor: 2, extra: 10 }
    }
}

impl LengthLimit {
    pub fn for_source(&self, src_len: usize) -> usize {
        self.factor * src_len + self.extra
    }
}

pub fn greedy(model: &Seq2SeqModel, src: &[usize], actor: Option<&Actor>, max_len: usize) -> Result<DecodeResult> {
    greedy_search(&ModelScorer::new(model, src, actor, false)?, max_len)
}

/// Greedy decode that also records per-step norms and probabilities.
pub fn greedy_traced(
    model: &Seq2SeqModel,
    src: &[usize],
    actor: Option<&Actor>,
    max_len: usize,
) -> Result<DecodeResult> {
    greedy_search(&ModelScorer::new(model, src, actor, true)?, max_len)
}

pub fn beam(
    model: &Seq2SeqModel,
    src: &[usize],
    k: usize,
    actor: Option<&Actor>,
    max_len: usize,
    len_norm: bool,
) -> Result<BeamOutput> {
    if k == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    beam_search(&ModelScorer::new(model, src, actor, false)?, k, max_len, len_norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NpadConfig {
    pub n_samples: usize,
    pub sigma0: f64,
    /// Adds the noise-free greedy decode to the candidate set.
    pub include_greedy: bool,
    pub seed: u64,
}

impl Default for NpadConfig {
    fn default() -> Self {
        Self {
            n_samples: 4,
            sigma0: 0.5,
            include_greedy: false,
            seed: 0,
        }
    }
}

impl NpadConfig {
    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("npad needs at least one sample".into()));
        }
        if !self.sigma0.is_finite() || self.sigma0 < 0.0 {
            return Err(Error::Config(format!("npad sigma0 must be finite and >= 0, got {}", self.sigma0)));
        }
        Ok(())
    }
}

/// Noisy parallel decoding: independent noisy greedy runs, each rescored
/// without noise; the highest-scoring candidate wins (earliest on ties).
pub fn npad(
    model: &Seq2SeqModel,
    src: &[usize],
    cfg: &NpadConfig,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let clean = ModelScorer::new(model, src, None, false)?;
    let mut cands = Vec::with_capacity(cfg.n_samples + 1);
    if cfg.include_greedy {
        cands.push(greedy_search(&clean, max_len)?);
    }
    for _ in 0..cfg.n_samples {
        let noisy = NoisyScorer {
            model,
            enc: &clean.enc,
            sigma0: cfg.sigma0,
            rng: RefCell::new(ChaCha8Rng::from_rng(&mut *rng)),
        };
        let tokens = greedy_search(&noisy, max_len)?.tokens;
        let logprob = rescore(&clean, &tokens)?;
        cands.push(DecodeResult {
            tokens,
            logprob,
            actor_applied: false,
            trace: None,
        });
    }
    let mut best = 0;
    for (i, c) in cands.iter().enumerate() {
        if c.logprob > cands[best].logprob {
            best = i;
        }
    }
    Ok(cands.swap_remove(best))
}

/// Step-by-step score of a fixed token sequence, accumulated exactly as
/// during search.
pub fn rescore<S: StepScorer>(scorer: &S, tokens: &[usize]) -> Result<f64> {
    let mut state = scorer.initial();
    let mut prev = scorer.start_token();
    let mut total = 0.0;
    for (i, &tok) in tokens.iter().enumerate() {
        let out = scorer.step(&state, prev, i + 1)?;
        total += out.log_probs[tok];
        state = out.state;
        prev = tok;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Method {
    Greedy,
    Beam { k: usize, len_norm: bool },
    Npad(NpadConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub method: Method,
    #[serde(default)]
    pub max_len: LengthLimit,
    #[serde(default)]
    pub trace: bool,
}

impl DecodeConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            max_len: LengthLimit::default(),
            trace: false,
        }
    }

    fn validate(&self, actor: Option<&Actor>) -> Result<()> {
        match &self.method {
            Method::Npad(n) => {
                if actor.is_some() {
                    return Err(Error::Config("npad does not take an actor".into()));
                }
                n.validate()
            }
            Method::Beam { k: 0, .. } => Err(Error::Config("beam size must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// Decodes one sentence; `index` keys the per-sentence noise stream.
pub fn decode_one(
    model: &Seq2SeqModel,
    src: &[usize],
    cfg: &DecodeConfig,
    actor: Option<&Actor>,
    index: usize,
) -> Result<DecodeResult> {
    let max_len = cfg.max_len.for_source(src.len());
    match &cfg.method {
        Method::Greedy => greedy_search(&ModelScorer::new(model, src, actor, cfg.trace)?, max_len),
        Method::Beam { k, len_norm } => Ok(beam(model, src, *k, actor, max_len, *len_norm)?.into_best()),
        Method::Npad(n) => {
            let mut rng = substream(n.seed, &format!("npad/{index}"));
            npad(model, src, n, max_len, &mut rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusDecode {
    pub results: Vec<DecodeResult>,
    pub wall_secs: f64,
    /// Emitted target tokens, EOS excluded.
    pub tokens: usize,
    pub tokens_per_sec: f64,
}

/// Sentence-by-sentence decode on the calling thread, timed end to end.
pub fn decode_corpus(
    model: &Seq2SeqModel,
    srcs: &[Vec<usize>],
    cfg: &DecodeConfig,
    actor: Option<&Actor>,
) -> Result<CorpusDecode> {
    if srcs.is_empty() {
        return Err(Error::Contract("empty corpus".into()));
    }
    cfg.validate(actor)?;
    let start = Instant::now();
    let results = srcs
        .iter()
        .enumerate()
        .map(|(i, s)| decode_one(model, s, cfg, actor, i))
        .collect::<Result<Vec<_>>>()?;
    let wall_secs = start.elapsed().as_secs_f64();
    let tokens = results.iter().map(|r| r.content().len()).sum();
    Ok(CorpusDecode {
        results,
        wall_secs,
        tokens,
        tokens_per_sec: tokens as f64 / wall_secs.max(f64::MIN_POSITIVE),
    })
}

/// Untimed decode of every sentence across worker threads, order preserved.
pub fn decode_parallel(
    model: &Seq2SeqModel,
    srcs: &[Vec<usize>],
    cfg: &DecodeConfig,
    actor: Option<&Actor>,
) -> Result<Vec<DecodeResult>> {
    cfg.validate(actor)?;
    srcs.par_iter()
        .enumerate()
        .map(|(i, s)| decode_one(model, s, cfg, actor, i))
        .collect()
}
