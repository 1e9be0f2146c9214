use log::info;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actors::Actor;
use crate::error::{Error, Result};
use crate::numkit::{Tape, Tensor};
use crate::optim::{Adam, OptimConfig};
use crate::rng::substream;
use crate::textio::SentencePair;

use super::{batch_forward, Seq2SeqModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Token-weighted mean NLL per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Per-epoch shuffled minibatches of indices into a corpus.
pub struct BatchPlan {
    order: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchPlan {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            batch_size: batch_size.max(1),
            rng: substream(seed, "shuffle"),
        }
    }

    /// Reshuffles and returns the batches of the next epoch.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

pub(crate) fn split_batch<'a>(pairs: &'a [SentencePair], idx: &[usize]) -> (Vec<&'a [usize]>, Vec<&'a [usize]>) {
    idx.iter()
        .map(|&i| (pairs[i].src.as_slice(), pairs[i].tgt.as_slice()))
        .unzip()
}

fn check_pairs(model: &Seq2SeqModel, pairs: &[SentencePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Contract("empty training corpus".into()));
    }
    for p in pairs {
        model.check_src(&p.src)?;
        model.check_tgt(&p.tgt)?;
    }
    Ok(())
}

/// Mean per-token negative log-likelihood of `pairs`, teacher-forced, with
/// an optional actor attached.
pub fn nll_loss(model: &Seq2SeqModel, pairs: &[SentencePair], actor: Option<&Actor>) -> Result<f64> {
    check_pairs(model, pairs)?;
    let mut total = 0.0;
    let mut tokens = 0;
    for chunk in pairs.chunks(64) {
        let mut tape = Tape::inference();
        let p = model.params.bind(&mut tape, false);
        let ap = actor.map(|a| a.bind(&mut tape));
        let (srcs, tgts): (Vec<_>, Vec<_>) = chunk.iter().map(|p| (p.src.as_slice(), p.tgt.as_slice())).unzip();
        let binding = ap.as_ref().zip(actor);
        let fwd = batch_forward(&mut tape, &p, &srcs, &tgts, model.dims.d_h, binding)?;
        total -= tape.value(fwd.total).item();
        tokens += fwd.n_tokens;
    }
    Ok(total / tokens as f64)
}

/// One gradient computation on a batch: returns (mean NLL, gradients in
/// `values_mut` order).
pub fn model_grads(model: &Seq2SeqModel, srcs: &[&[usize]], tgts: &[&[usize]]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let fwd = batch_forward(&mut tape, &p, srcs, tgts, model.dims.d_h, None)?;
    let loss = tape.scale(fwd.total, -1.0 / fwd.n_tokens as f64);
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let vars: Vec<_> = p.named().into_iter().map(|(_, v)| *v).collect();
    let out = vars
        .into_iter()
        .map(|v| grads.take(v).expect("every parameter is tracked"))
        .collect();
    Ok((value, out))
}

/// Maximum-likelihood training of every model parameter with Adam.
pub fn train_base(model: &mut Seq2SeqModel, pairs: &[SentencePair], cfg: &TrainConfig) -> Result<TrainReport> {
    check_pairs(model, pairs)?;
    let sizes: Vec<usize> = model.params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(cfg.optim.clone(), sizes);
    let mut plan = BatchPlan::new(pairs.len(), cfg.optim.batch_size, cfg.seed);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut weighted = 0.0;
        let mut tokens = 0usize;
        for idx in plan.epoch() {
            let (srcs, tgts) = split_batch(pairs, &idx);
            let (loss, grads) = model_grads(model, &srcs, &tgts)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Training {
                    step: report.steps,
                    message: format!("non-finite loss {loss}"),
                });
            }
            adam.step(&mut model.params.values_mut(), &grads);
            report.steps += 1;
            let n: usize = tgts.iter().map(|t| t.len()).sum();
            weighted += loss * n as f64;
            tokens += n;
        }
        let mean = weighted / tokens as f64;
        info!("train-base epoch {} loss {:.4}", epoch + 1, mean);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
