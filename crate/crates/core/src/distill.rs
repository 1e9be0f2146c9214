//! Pseudo-parallel corpus construction from k-best lists and actor training
//! on it with the base model frozen.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actors::{actor_norm_probe, Actor, ActorKind, NormReport};
use crate::decoding::{self, DecodeConfig, DecodeResult, LengthLimit, Method};
use crate::error::{Error, Result};
use crate::metrics::{self, ObjectiveFn};
use crate::numkit::Tape;
use crate::optim::{Adam, OptimConfig};
use crate::seq2seq::{batch_forward, train_base, BatchPlan, Seq2SeqModel, TrainConfig, TrainReport};
use crate::textio::{SentencePair, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Best k-best entry under the objective.
    Top1,
    /// Every k-best entry.
    Full,
    /// Entries scoring strictly above the greedy output.
    Thd,
    /// `top1` plus the gold pairs.
    Comb,
    /// Gold pairs only.
    Para,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Top1,
        Strategy::Full,
        Strategy::Thd,
        Strategy::Comb,
        Strategy::Para,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Top1 => "top1",
            Strategy::Full => "full",
            Strategy::Thd => "thd",
            Strategy::Comb => "comb",
            Strategy::Para => "para",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub beam_k: usize,
    pub objective: ObjectiveFn,
    pub strategy: Strategy,
    pub len_norm: bool,
    pub max_len: LengthLimit,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beam_k: 35,
            objective: ObjectiveFn::default(),
            strategy: Strategy::Top1,
            len_norm: false,
            max_len: LengthLimit::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_k == 0 {
            return Err(Error::Config("beam_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// One record of the distilled corpus. `beam_rank` is 1-based; gold
/// records carry rank 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub objective: f64,
    pub beam_rank: usize,
    pub strategy: Strategy,
    pub gold: Vec<usize>,
}

impl PseudoPair {
    pub fn to_pair(&self) -> SentencePair {
        SentencePair {
            src: self.src.clone(),
            tgt: self.tgt.clone(),
        }
    }
}

pub(crate) fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.split_last() {
        Some((&EOS, rest)) => rest,
        _ => tokens,
    }
}

/// Index of the best-scoring entry; ties go to the earlier (higher-ranked) one.
pub fn select_top1(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Selection for one sentence, given its k-best list and greedy output.
pub fn select(
    pair: &SentencePair,
    kbest: &[DecodeResult],
    greedy: &DecodeResult,
    cfg: &DistillConfig,
) -> Vec<PseudoPair> {
    let gold = strip_eos(&pair.tgt);
    let scores: Vec<f64> = kbest
        .iter()
        .map(|z| cfg.objective.score(z.content(), gold))
        .collect();
    let record = |i: usize| PseudoPair {
        src: pair.src.clone(),
        tgt: kbest[i].tokens.clone(),
        objective: scores[i],
        beam_rank: i + 1,
        strategy: cfg.strategy,
        gold: pair.tgt.clone(),
    };
    let gold_record = || PseudoPair {
        src: pair.src.clone(),
        tgt: pair.tgt.clone(),
        objective: cfg.objective.score(gold, gold),
        beam_rank: 0,
        strategy: cfg.strategy,
        gold: pair.tgt.clone(),
    };
    match cfg.strategy {
        Strategy::Top1 => select_top1(&scores).map(record).into_iter().collect(),
        Strategy::Full => (0..kbest.len()).map(record).collect(),
        Strategy::Thd => {
            let base = cfg.objective.score(greedy.content(), gold);
            (0..kbest.len()).filter(|&i| scores[i] > base).map(record).collect()
        }
        Strategy::Comb => select_top1(&scores)
            .map(record)
            .into_iter()
            .chain(std::iter::once(gold_record()))
            .collect(),
        Strategy::Para => vec![gold_record()],
    }
}

/// Beam-decodes every source (in parallel, order kept) and applies the
/// configured selection strategy.
pub fn build_pseudo_corpus(
    model: &Seq2SeqModel,
    pairs: &[SentencePair],
    cfg: &DistillConfig,
) -> Result<Vec<PseudoPair>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Contract("empty corpus".into()));
    }
    let per_sentence = pairs
        .par_iter()
        .map(|p| -> Result<Vec<PseudoPair>> {
            if cfg.strategy == Strategy::Para {
                return Ok(select(p, &[], &DecodeResult::empty(), cfg));
            }
            let max_len = cfg.max_len.for_source(p.src.len());
            let kbest = decoding::beam(model, &p.src, cfg.beam_k, None, max_len, cfg.len_norm)?.kbest;
            let greedy = if cfg.strategy == Strategy::Thd {
                decoding::greedy(model, &p.src, None, max_len)?
            } else {
                DecodeResult::empty()
            };
            Ok(select(p, &kbest, &greedy, cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    let dropped = per_sentence.iter().filter(|v| v.is_empty()).count();
    if dropped > 0 {
        info!("distill: {dropped} sentences contributed no pseudo pair");
    }
    Ok(per_sentence.into_iter().flatten().collect())
}

impl DecodeResult {
    fn empty() -> Self {
        DecodeResult {
            tokens: Vec::new(),
            logprob: 0.0,
            actor_applied: false,
            trace: None,
        }
    }
}

pub fn write_jsonl(path: &Path, records: &[PseudoPair]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(&out).map_err(Error::io(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PseudoPair>> {
    let f = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(Error::io(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorTrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Norms at initialization followed by one entry per epoch, when probed.
    pub norms: Vec<NormReport>,
}

/// Greedy-decodes `srcs` with the actor and averages the step norms.
pub fn probe_norms(model: &Seq2SeqModel, actor: &Actor, srcs: &[Vec<usize>], max_len: LengthLimit) -> Result<NormReport> {
    let traces = srcs
        .par_iter()
        .map(|s| {
            decoding::greedy_traced(model, s, Some(actor), max_len.for_source(s.len()))
                .map(|r| r.trace.unwrap_or_default())
        })
        .collect::<Result<Vec<_>>>()?;
    actor_norm_probe(traces.iter().map(Vec::as_slice))
}

/// Mean NLL of a batch with the actor attached and its gradients with
/// respect to the actor parameters only, in `values_mut` order.
pub fn actor_grads(
    model: &Seq2SeqModel,
    actor: &Actor,
    srcs: &[&[usize]],
    tgts: &[&[usize]],
) -> Result<(f64, Vec<crate::numkit::Tensor>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let ap = actor.bind(&mut tape);
    let fwd = batch_forward(&mut tape, &p, srcs, tgts, model.dims.d_h, Some((&ap, actor)))?;
    let loss = tape.scale(fwd.total, -1.0 / fwd.n_tokens as f64);
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let out = ap
        .named()
        .into_iter()
        .map(|(_, v)| grads.take(*v).expect("actor parameters are tracked"))
        .collect();
    Ok((value, out))
}

/// Maximum-likelihood training of the actor alone on `corpus`. The base
/// model is only read; its parameter hash is verified afterwards.
pub fn train_actor(
    model: &Seq2SeqModel,
    actor: &mut Actor,
    corpus: &[PseudoPair],
    cfg: &TrainConfig,
    probe: Option<(&[Vec<usize>], LengthLimit)>,
) -> Result<ActorTrainReport> {
    if corpus.is_empty() {
        return Err(Error::Contract("empty pseudo corpus".into()));
    }
    if actor.d_h != model.dims.d_h {
        return Err(Error::Contract(format!(
            "actor d_h {} does not match model d_h {}",
            actor.d_h, model.dims.d_h
        )));
    }
    for r in corpus {
        model.check_src(&r.src)?;
        model.check_tgt(&r.tgt)?;
    }
    let before = model.param_hash();
    let sizes: Vec<usize> = actor.params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(cfg.optim.clone(), sizes);
    let mut plan = BatchPlan::new(corpus.len(), cfg.optim.batch_size, cfg.seed);
    let mut report = ActorTrainReport::default();
    if let Some((srcs, limit)) = probe {
        report.norms.push(probe_norms(model, actor, srcs, limit)?);
    }
    for epoch in 0..cfg.epochs {
        let mut weighted = 0.0;
        let mut tokens = 0usize;
        for idx in plan.epoch() {
            let (srcs, tgts): (Vec<&[usize]>, Vec<&[usize]>) = idx
                .iter()
                .map(|&i| (corpus[i].src.as_slice(), corpus[i].tgt.as_slice()))
                .unzip();
            let (loss, grads) = actor_grads(model, actor, &srcs, &tgts)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Training {
                    step: report.steps,
                    message: format!("non-finite actor loss {loss}"),
                });
            }
            adam.step(&mut actor.params.values_mut(), &grads);
            report.steps += 1;
            let n: usize = tgts.iter().map(|t| t.len()).sum();
            weighted += loss * n as f64;
            tokens += n;
        }
        let mean = weighted / tokens as f64;
        info!("train-actor epoch {} loss {:.4}", epoch + 1, mean);
        report.epoch_losses.push(mean);
        if let Some((srcs, limit)) = probe {
            report.norms.push(probe_norms(model, actor, srcs, limit)?);
        }
    }
    let after = model.param_hash();
    if before != after {
        return Err(Error::FrozenViolation { before, after });
    }
    Ok(report)
}

/// Fine-tunes a copy of the whole base model on the pseudo corpus.
pub fn train_cont_baseline(
    model: &Seq2SeqModel,
    corpus: &[PseudoPair],
    cfg: &TrainConfig,
) -> Result<(Seq2SeqModel, TrainReport)> {
    let pairs: Vec<SentencePair> = corpus.iter().map(PseudoPair::to_pair).collect();
    let mut clone = model.clone();
    let report = train_base(&mut clone, &pairs, cfg)?;
    Ok((clone, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BeamK,
    Strategy,
    ActorKind,
    HiddenDim,
    Objective,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::BeamK => "beam_k",
            SweepAxis::Strategy => "strategy",
            SweepAxis::ActorKind => "actor_kind",
            SweepAxis::HiddenDim => "hidden_dim",
            SweepAxis::Objective => "objective",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::BeamK,
            SweepAxis::Strategy,
            SweepAxis::ActorKind,
            SweepAxis::HiddenDim,
            SweepAxis::Objective,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }
}

/// Settings shared by every sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepBase {
    pub distill: DistillConfig,
    pub actor_kind: ActorKind,
    pub hidden_dim: usize,
    pub train: TrainConfig,
    pub actor_seed: u64,
    pub eval_beam_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub greedy_bleu: f64,
    pub tg_bleu: f64,
    pub beam4_bleu: f64,
    pub ter: f64,
}

pub const SWEEP_HEADER: &str = "axis,value,greedy_bleu,tg_bleu,beam4_bleu,ter";

/// Removes repeated values, keeping first occurrences, with a warning.
pub fn dedup_values(values: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for v in values {
        if seen.insert(v.clone()) {
            out.push(v.clone());
        } else {
            warn!("sweep: duplicate value {v:?} ignored");
        }
    }
    out
}

fn bleu_of(results: &[DecodeResult], refs: &[&[usize]]) -> Result<f64> {
    let hyps: Vec<&[usize]> = results.iter().map(DecodeResult::content).collect();
    metrics::corpus_bleu(&hyps, refs)
}

/// Trains a fresh actor per value and scores greedy, actor-greedy (tg) and
/// beam decoding on `valid`. BLEU and TER are fractions in `[0, 1]`.
pub fn sweep(
    model: &Seq2SeqModel,
    train: &[SentencePair],
    valid: &[SentencePair],
    axis: SweepAxis,
    values: &[String],
    base: &SweepBase,
) -> Result<Vec<SweepRow>> {
    if valid.is_empty() {
        return Err(Error::Contract("empty validation set".into()));
    }
    let values = dedup_values(values);
    let srcs: Vec<Vec<usize>> = valid.iter().map(|p| p.src.clone()).collect();
    let refs: Vec<&[usize]> = valid.iter().map(|p| strip_eos(&p.tgt)).collect();
    let greedy_cfg = DecodeConfig {
        max_len: base.distill.max_len,
        ..DecodeConfig::new(Method::Greedy)
    };
    let beam_cfg = DecodeConfig {
        method: Method::Beam {
            k: base.eval_beam_k,
            len_norm: base.distill.len_norm,
        },
        ..greedy_cfg.clone()
    };
    let greedy_out = decoding::decode_parallel(model, &srcs, &greedy_cfg, None)?;
    let greedy_bleu = bleu_of(&greedy_out, &refs)?;
    let beam_bleu = bleu_of(&decoding::decode_parallel(model, &srcs, &beam_cfg, None)?, &refs)?;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut distill = base.distill.clone();
        let mut kind = base.actor_kind;
        let mut hidden = base.hidden_dim;
        match axis {
            SweepAxis::BeamK => {
                distill.beam_k = value
                    .parse()
                    .map_err(|_| Error::Config(format!("beam_k value {value:?} is not an integer")))?
            }
            SweepAxis::Strategy => distill.strategy = value.parse()?,
            SweepAxis::ActorKind => kind = value.parse()?,
            SweepAxis::HiddenDim => {
                hidden = value
                    .parse()
                    .map_err(|_| Error::Config(format!("hidden_dim value {value:?} is not an integer")))?
            }
            SweepAxis::Objective => distill.objective = value.parse()?,
        }
        let corpus = build_pseudo_corpus(model, train, &distill)?;
        let mut actor = Actor::new(kind, model.dims.d_h, hidden, base.actor_seed)?;
        if !corpus.is_empty() {
            train_actor(model, &mut actor, &corpus, &base.train, None)?;
        }
        let tg = decoding::decode_parallel(model, &srcs, &greedy_cfg, Some(&actor))?;
        let hyps: Vec<&[usize]> = tg.iter().map(DecodeResult::content).collect();
        let row = SweepRow {
            axis: axis.name().to_string(),
            value: value.clone(),
            greedy_bleu,
            tg_bleu: metrics::corpus_bleu(&hyps, &refs)?,
            beam4_bleu: beam_bleu,
            ter: metrics::corpus_ter(&hyps, &refs)?,
        };
        info!("sweep {}={} tg_bleu {:.4}", row.axis, row.value, row.tg_bleu);
        rows.push(row);
    }
    Ok(rows)
}

/// Renders rows as CSV with BLEU and TER scaled to percentages.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            r.axis,
            r.value,
            100.0 * r.greedy_bleu,
            100.0 * r.tg_bleu,
            100.0 * r.beam4_bleu,
            100.0 * r.ter
        );
    }
    out
}

/// Actor-training settings: base defaults with the actor learning rate.
pub fn actor_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        optim: OptimConfig::actor_default(),
        epochs,
        seed,
    }
}
