//! Tape-level forward passes shared by training, scoring and decoding.

use crate::actors::{act_on_tape, Actor, ActorParams};
use crate::error::Result;
use crate::numkit::{Tape, Tensor, Var};
use crate::textio::{BOS, PAD};

use super::{GruParams, ModelParams};

/// Additive attention bias for padded source positions.
const MASKED: f64 = -1e30;

pub(crate) struct EncodedVars {
    /// `[B × T_s × d_h]` annotations.
    pub keys: Var,
    /// `[B × T_s]` bias, present only when some row is padded.
    pub mask: Option<Var>,
    /// Initial hidden of each decoder layer, `[B × d_h]`.
    pub init: Vec<Var>,
}

pub(crate) struct ActorBinding<'a> {
    pub params: &'a ActorParams<Var>,
    pub state: Option<Var>,
}

pub(crate) struct StepVars {
    pub log_probs: Var,
    pub layers: Vec<Var>,
    pub hidden: Var,
    pub context: Var,
    pub attn_weights: Var,
    pub attn_pre: Var,
    pub attn_hidden: Var,
    pub action: Option<Var>,
    pub actor_state: Option<Var>,
}

fn gru_cell(tape: &mut Tape<'_>, p: &GruParams<Var>, x: Var, h: Var, d: usize) -> Result<Var> {
    let xw = tape.matmul(x, p.w_x)?;
    let xw = tape.add_row(xw, p.b)?;
    gru_recur(tape, p, xw, h, d)
}

/// GRU update given the input projection `x·W_x + b` already computed.
fn gru_recur(tape: &mut Tape<'_>, p: &GruParams<Var>, xw: Var, h: Var, d: usize) -> Result<Var> {
    let hu = tape.matmul(h, p.u_zr)?;
    let xzr = tape.slice_cols(xw, 0, 2 * d)?;
    let zr = tape.add(xzr, hu)?;
    let zr = tape.sigmoid(zr);
    let z = tape.slice_cols(zr, 0, d)?;
    let r = tape.slice_cols(zr, d, d)?;
    let rh = tape.mul(r, h)?;
    let ch = tape.matmul(rh, p.u_h)?;
    let cx = tape.slice_cols(xw, 2 * d, d)?;
    let cand = tape.add(cx, ch)?;
    let cand = tape.tanh(cand);
    // h' = (1 - z)∘h̃ + z∘h = h̃ + z∘(h - h̃)
    let diff = tape.sub(h, cand)?;
    let gated = tape.mul(z, diff)?;
    Ok(tape.add(cand, gated)?)
}

/// Input projections for all steps at once; row block `t` belongs to step `t`.
fn project_steps(tape: &mut Tape<'_>, p: &GruParams<Var>, x: Var, t_max: usize, b: usize) -> Result<Vec<Var>> {
    let xw = tape.matmul(x, p.w_x)?;
    let xw = tape.add_row(xw, p.b)?;
    (0..t_max).map(|t| Ok(tape.slice_rows(xw, t * b, b)?)).collect()
}

/// Keeps `prev` in rows whose sequence has ended: `m∘new + (1 − m)∘prev`.
fn masked_update(tape: &mut Tape<'_>, new: Var, prev: Var, keep: &(Var, Var)) -> Result<Var> {
    let a = tape.mul(new, keep.0)?;
    let b = tape.mul(prev, keep.1)?;
    Ok(tape.add(a, b)?)
}

/// Runs the bidirectional encoder over right-padded sources.
pub(crate) fn encode_vars(
    tape: &mut Tape<'_>,
    p: &ModelParams<Var>,
    srcs: &[&[usize]],
    d: usize,
) -> Result<EncodedVars> {
    let b = srcs.len();
    let t_max = srcs.iter().map(|s| s.len()).max().unwrap_or(0);
    let zero = tape.constant(Tensor::zeros(&[b, d]));
    let masks: Vec<Option<(Var, Var)>> = (0..t_max)
        .map(|t| {
            if srcs.iter().all(|s| t < s.len()) {
                return None;
            }
            let live: Vec<f64> = srcs
                .iter()
                .flat_map(|s| std::iter::repeat_n(if t < s.len() { 1.0 } else { 0.0 }, d))
                .collect();
            let dead = live.iter().map(|m| 1.0 - m).collect();
            Some((
                tape.constant(Tensor::from_parts(vec![b, d], live)),
                tape.constant(Tensor::from_parts(vec![b, d], dead)),
            ))
        })
        .collect();
    // step-major rows: block t holds position t of every sentence
    let ids: Vec<usize> = (0..t_max)
        .flat_map(|t| srcs.iter().map(move |s| s.get(t).copied().unwrap_or(PAD)))
        .collect();
    let mut inputs = tape.gather_rows(p.embed_src, &ids)?;
    let mut finals = Vec::with_capacity(p.enc.len());
    for [fw, bw] in &p.enc {
        let xw = project_steps(tape, fw, inputs, t_max, b)?;
        let mut fwd = Vec::with_capacity(t_max);
        let mut h = zero;
        for t in 0..t_max {
            let hn = gru_recur(tape, fw, xw[t], h, d)?;
            h = match &masks[t] {
                Some(m) => masked_update(tape, hn, h, m)?,
                None => hn,
            };
            fwd.push(h);
        }
        let last_fwd = h;
        let xw = project_steps(tape, bw, inputs, t_max, b)?;
        let mut bwd = vec![zero; t_max];
        let mut h = zero;
        for t in (0..t_max).rev() {
            let hn = gru_recur(tape, bw, xw[t], h, d)?;
            h = match &masks[t] {
                Some(m) => masked_update(tape, hn, h, m)?,
                None => hn,
            };
            bwd[t] = h;
        }
        finals.push((last_fwd, h));
        let f = tape.concat_rows(&fwd)?;
        let bk = tape.concat_rows(&bwd)?;
        inputs = tape.concat_cols(&[f, bk])?;
    }
    let proj = tape.matmul(inputs, p.enc_proj)?;
    let annotations = (0..t_max)
        .map(|t| tape.slice_rows(proj, t * b, b))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let keys = tape.stack_steps(&annotations)?;
    let mask = if srcs.iter().any(|s| s.len() < t_max) {
        let bias = srcs
            .iter()
            .flat_map(|s| (0..t_max).map(move |t| if t < s.len() { 0.0 } else { MASKED }))
            .collect();
        Some(tape.constant(Tensor::from_parts(vec![b, t_max], bias)))
    } else {
        None
    };
    let mut init = Vec::with_capacity(p.bridge.len());
    for (&(f, bk), (w, bias)) in finals.iter().zip(&p.bridge) {
        let cat = tape.concat_cols(&[f, bk])?;
        let lin = tape.matmul(cat, *w)?;
        let lin = tape.add_row(lin, *bias)?;
        init.push(tape.tanh(lin));
    }
    Ok(EncodedVars { keys, mask, init })
}

/// One decoder step for a batch of previous tokens.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_vars(
    tape: &mut Tape<'_>,
    p: &ModelParams<Var>,
    layers: &[Var],
    input_feed: Var,
    prev: &[usize],
    enc: &EncodedVars,
    actor: Option<ActorBinding<'_>>,
    noise: Option<Var>,
) -> Result<StepVars> {
    let d = tape.value(input_feed).cols();
    let emb = tape.gather_rows(p.embed_tgt, prev)?;
    let mut x = tape.concat_cols(&[emb, input_feed])?;
    let mut new_layers = Vec::with_capacity(layers.len());
    for (cell, &h) in p.dec.iter().zip(layers) {
        x = gru_cell(tape, cell, x, h, d)?;
        new_layers.push(x);
    }
    let hidden = x;
    let q = tape.matmul(hidden, p.attn_general)?;
    let mut scores = tape.attn_scores(enc.keys, q)?;
    if let Some(m) = enc.mask {
        scores = tape.add(scores, m)?;
    }
    let attn_weights = tape.softmax(scores)?;
    let context = tape.attn_context(attn_weights, enc.keys)?;
    let cat = tape.concat_cols(&[hidden, context])?;
    let pre = tape.matmul(cat, p.attn_out)?;
    let attn_pre = tape.tanh(pre);
    let (mut attn_hidden, action, actor_state) = match actor {
        Some(a) => {
            let (act, s) = act_on_tape(tape, a.params, hidden, context, a.state)?;
            (tape.add(attn_pre, act)?, Some(act), s)
        }
        None => (attn_pre, None, None),
    };
    if let Some(n) = noise {
        attn_hidden = tape.add(attn_hidden, n)?;
    }
    let logits = tape.matmul(attn_hidden, p.output_proj)?;
    let logits = tape.add_row(logits, p.out_bias)?;
    let log_probs = tape.log_softmax(logits)?;
    Ok(StepVars {
        log_probs,
        layers: new_layers,
        hidden,
        context,
        attn_weights,
        attn_pre,
        attn_hidden,
        action,
        actor_state,
    })
}

pub(crate) struct BatchForward {
    /// Summed target log-probability over real (non-padded) tokens.
    pub total: Var,
    /// Per-step `[B × 1]` log-probabilities of the gold token, zero where padded.
    pub per_step: Vec<Var>,
    pub n_tokens: usize,
}

/// Teacher-forced forward pass over a batch of pairs.
pub(crate) fn batch_forward(
    tape: &mut Tape<'_>,
    p: &ModelParams<Var>,
    srcs: &[&[usize]],
    tgts: &[&[usize]],
    d: usize,
    actor: Option<(&ActorParams<Var>, &Actor)>,
) -> Result<BatchForward> {
    let b = srcs.len();
    let enc = encode_vars(tape, p, srcs, d)?;
    let mut layers = enc.init.clone();
    let mut feed = tape.constant(Tensor::zeros(&[b, d]));
    let mut actor_state = actor
        .and_then(|(_, a)| a.initial_state_batch(b))
        .map(|s| tape.constant(s));
    let t_max = tgts.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut per_step = Vec::with_capacity(t_max);
    let mut total: Option<Var> = None;
    let mut prev: Vec<usize> = vec![BOS; b];
    for t in 0..t_max {
        let binding = actor.map(|(params, _)| ActorBinding {
            params,
            state: actor_state,
        });
        let out = step_vars(tape, p, &layers, feed, &prev, &enc, binding, None)?;
        let gold: Vec<usize> = tgts.iter().map(|y| y.get(t).copied().unwrap_or(PAD)).collect();
        let mut picked = tape.pick(out.log_probs, &gold)?;
        if tgts.iter().any(|y| t >= y.len()) {
            let m = tgts.iter().map(|y| if t < y.len() { 1.0 } else { 0.0 }).collect();
            let m = tape.constant(Tensor::from_parts(vec![b, 1], m));
            picked = tape.mul(picked, m)?;
        }
        let s = tape.sum(picked);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        per_step.push(picked);
        layers = out.layers;
        feed = out.attn_hidden;
        actor_state = out.actor_state;
        prev = gold;
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    Ok(BatchForward {
        total,
        per_step,
        n_tokens: tgts.iter().map(|y| y.len()).sum(),
    })
}
