//! Actor networks that read the top decoder state `h_t` and the attention
//! context `e_t` and emit an additive action on the attentional hidden state.
//!
//! All four kinds take the row vector `x = [h_t, e_t]` (width `2·d_h`) and
//! multiply weights on the right:
//!
//! * `ff`:   `a = tanh(σ(x·W_i + b_i)·W_o + b_o)`
//! * `ff2`:  `a = tanh(σ(σ(x·W_i + b_i)·W_z + b_z)·W_o + b_o)`
//! * `rnn`:  a bias-free GRU over `x` with state `s`, then `a = s_t·U`
//! * `gate`: `a = σ(x·U_z) ∘ tanh(x·U)`
//!
//! Fresh actors have a zero output mapping, so they emit exactly `0`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::decoding::StepTrace;
use crate::error::{Error, Result};
use crate::numkit::{Tape, Tensor, Var};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActorKind {
    Ff,
    Ff2,
    Rnn,
    Gate,
}

impl ActorKind {
    pub const ALL: [ActorKind; 4] = [ActorKind::Ff, ActorKind::Ff2, ActorKind::Rnn, ActorKind::Gate];

    pub fn name(self) -> &'static str {
        match self {
            ActorKind::Ff => "ff",
            ActorKind::Ff2 => "ff2",
            ActorKind::Rnn => "rnn",
            ActorKind::Gate => "gate",
        }
    }
}

impl std::fmt::Display for ActorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ActorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ActorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown actor kind {s:?}")))
    }
}

/// Actor weights, generic over storage so the same layout serves for
/// tensors and for their tape handles.
#[derive(Clone, Debug, PartialEq)]
pub enum ActorParams<P> {
    Ff { w_i: P, b_i: P, w_o: P, b_o: P },
    Ff2 { w_i: P, b_i: P, w_z: P, b_z: P, w_o: P, b_o: P },
    Rnn { u_z: P, w_z: P, u_r: P, w_r: P, u_h: P, w_h: P, u: P },
    Gate { u_z: P, u: P },
}

impl<P> ActorParams<P> {
    pub fn kind(&self) -> ActorKind {
        match self {
            ActorParams::Ff { .. } => ActorKind::Ff,
            ActorParams::Ff2 { .. } => ActorKind::Ff2,
            ActorParams::Rnn { .. } => ActorKind::Rnn,
            ActorParams::Gate { .. } => ActorKind::Gate,
        }
    }

    /// Parameters in canonical order with their names.
    pub fn named(&self) -> Vec<(&'static str, &P)> {
        match self {
            ActorParams::Ff { w_i, b_i, w_o, b_o } => {
                vec![("W_i", w_i), ("b_i", b_i), ("W_o", w_o), ("b_o", b_o)]
            }
            ActorParams::Ff2 { w_i, b_i, w_z, b_z, w_o, b_o } => vec![
                ("W_i", w_i),
                ("b_i", b_i),
                ("W_z", w_z),
                ("b_z", b_z),
                ("W_o", w_o),
                ("b_o", b_o),
            ],
            ActorParams::Rnn { u_z, w_z, u_r, w_r, u_h, w_h, u } => vec![
                ("U_z", u_z),
                ("W_z", w_z),
                ("U_r", u_r),
                ("W_r", w_r),
                ("U_h", u_h),
                ("W_h", w_h),
                ("U", u),
            ],
            ActorParams::Gate { u_z, u } => vec![("U_z", u_z), ("U", u)],
        }
    }

    pub fn values_mut(&mut self) -> Vec<&mut P> {
        match self {
            ActorParams::Ff { w_i, b_i, w_o, b_o } => vec![w_i, b_i, w_o, b_o],
            ActorParams::Ff2 { w_i, b_i, w_z, b_z, w_o, b_o } => vec![w_i, b_i, w_z, b_z, w_o, b_o],
            ActorParams::Rnn { u_z, w_z, u_r, w_r, u_h, w_h, u } => vec![u_z, w_z, u_r, w_r, u_h, w_h, u],
            ActorParams::Gate { u_z, u } => vec![u_z, u],
        }
    }

    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> ActorParams<Q> {
        match self {
            ActorParams::Ff { w_i, b_i, w_o, b_o } => ActorParams::Ff {
                w_i: f(w_i),
                b_i: f(b_i),
                w_o: f(w_o),
                b_o: f(b_o),
            },
            ActorParams::Ff2 { w_i, b_i, w_z, b_z, w_o, b_o } => ActorParams::Ff2 {
                w_i: f(w_i),
                b_i: f(b_i),
                w_z: f(w_z),
                b_z: f(b_z),
                w_o: f(w_o),
                b_o: f(b_o),
            },
            ActorParams::Rnn { u_z, w_z, u_r, w_r, u_h, w_h, u } => ActorParams::Rnn {
                u_z: f(u_z),
                w_z: f(w_z),
                u_r: f(u_r),
                w_r: f(w_r),
                u_h: f(u_h),
                w_h: f(w_h),
                u: f(u),
            },
            ActorParams::Gate { u_z, u } => ActorParams::Gate { u_z: f(u_z), u: f(u) },
        }
    }
}

/// Recurrent state `s_t` of the `rnn` actor, a `[1 × hidden_dim]` row.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorState {
    pub s: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorMeta {
    pub kind: ActorKind,
    pub d_h: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    pub d_h: usize,
    /// Hidden width of ff/ff2/rnn; ignored by `gate`.
    pub hidden_dim: usize,
    pub params: ActorParams<Tensor>,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

impl Actor {
    /// Input-side weights uniform in ±0.1; the output mapping starts at zero.
    pub fn new(kind: ActorKind, d_h: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        if d_h == 0 {
            return Err(Error::Config("actor d_h must be positive".into()));
        }
        if hidden_dim == 0 && kind != ActorKind::Gate {
            return Err(Error::Config(format!("{kind} actor needs hidden_dim >= 1")));
        }
        let mut rng = substream(seed, "actor-init");
        let rng = &mut rng;
        let (x, h) = (2 * d_h, hidden_dim);
        let params = match kind {
            ActorKind::Ff => ActorParams::Ff {
                w_i: uniform(rng, &[x, h], 0.1),
                b_i: uniform(rng, &[1, h], 0.1),
                w_o: Tensor::zeros(&[h, d_h]),
                b_o: Tensor::zeros(&[1, d_h]),
            },
            ActorKind::Ff2 => ActorParams::Ff2 {
                w_i: uniform(rng, &[x, h], 0.1),
                b_i: uniform(rng, &[1, h], 0.1),
                w_z: uniform(rng, &[h, h], 0.1),
                b_z: uniform(rng, &[1, h], 0.1),
                w_o: Tensor::zeros(&[h, d_h]),
                b_o: Tensor::zeros(&[1, d_h]),
            },
            ActorKind::Rnn => ActorParams::Rnn {
                u_z: uniform(rng, &[x, h], 0.1),
                w_z: uniform(rng, &[h, h], 0.1),
                u_r: uniform(rng, &[x, h], 0.1),
                w_r: uniform(rng, &[h, h], 0.1),
                u_h: uniform(rng, &[x, h], 0.1),
                w_h: uniform(rng, &[h, h], 0.1),
                u: Tensor::zeros(&[h, d_h]),
            },
            ActorKind::Gate => ActorParams::Gate {
                u_z: uniform(rng, &[x, d_h], 0.1),
                u: Tensor::zeros(&[x, d_h]),
            },
        };
        Ok(Self {
            d_h,
            hidden_dim,
            params,
        })
    }

    pub fn kind(&self) -> ActorKind {
        self.params.kind()
    }

    pub fn is_recurrent(&self) -> bool {
        self.kind() == ActorKind::Rnn
    }

    /// Zero state for the `rnn` kind, `None` otherwise.
    pub fn initial_state(&self) -> Option<ActorState> {
        self.is_recurrent().then(|| ActorState {
            s: Tensor::zeros(&[1, self.hidden_dim]),
        })
    }

    pub(crate) fn initial_state_batch(&self, rows: usize) -> Option<Tensor> {
        self.is_recurrent().then(|| Tensor::zeros(&[rows, self.hidden_dim]))
    }

    pub fn meta(&self) -> ActorMeta {
        ActorMeta {
            kind: self.kind(),
            d_h: self.d_h,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub(crate) fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> ActorParams<Var> {
        self.params.map(&mut |t| tape.param(t))
    }

    /// Computes the action for one `(h, e)` pair of `[1 × d_h]` rows.
    pub fn act(
        &self,
        h: &Tensor,
        e: &Tensor,
        state: Option<&ActorState>,
    ) -> Result<(Tensor, Option<ActorState>)> {
        let mut tape = Tape::inference();
        let p = self.bind(&mut tape);
        let hv = tape.constant_ref(h);
        let ev = tape.constant_ref(e);
        let sv = state.map(|s| tape.constant_ref(&s.s));
        let (a, s) = act_on_tape(&mut tape, &p, hv, ev, sv)?;
        let new_state = s.map(|s| ActorState {
            s: tape.value(s).clone(),
        });
        Ok((tape.value(a).clone(), new_state))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named: Vec<(String, &Tensor)> = self
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        checkpoint::encode("actor", serde_json::to_value(self.meta())?, &named)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = checkpoint::read(path, "actor")?;
        let meta: ActorMeta = serde_json::from_value(header.meta)?;
        let mut actor = Actor::new(meta.kind, meta.d_h, meta.hidden_dim, 0)?;
        let expected: Vec<(&str, Vec<usize>)> = actor
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                message: format!("expected {} tensors, found {}", expected.len(), tensors.len()),
            });
        }
        for ((slot, (name, shape)), (got_name, t)) in actor
            .params
            .values_mut()
            .into_iter()
            .zip(expected)
            .zip(tensors)
        {
            if name != got_name || shape != t.shape() {
                return Err(Error::Checkpoint {
                    path: path.display().to_string(),
                    message: format!("parameter {got_name} {:?} does not match {name} {shape:?}", t.shape()),
                });
            }
            *slot = t;
        }
        Ok(actor)
    }
}

/// Tape-level actor forward over `[B × d_h]` rows. `state` must be present
/// exactly for the `rnn` kind.
pub(crate) fn act_on_tape(
    tape: &mut Tape<'_>,
    p: &ActorParams<Var>,
    h: Var,
    e: Var,
    state: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    match (p, state) {
        (ActorParams::Rnn { .. }, None) => {
            return Err(Error::Contract("rnn actor requires a recurrent state".into()))
        }
        (ActorParams::Rnn { .. }, Some(_)) | (_, None) => {}
        (_, Some(_)) => {
            return Err(Error::Contract(format!(
                "{} actor is stateless but a state was supplied",
                p.kind()
            )))
        }
    }
    let x = tape.concat_cols(&[h, e])?;
    match p {
        ActorParams::Ff { w_i, b_i, w_o, b_o } => {
            let z = affine(tape, x, *w_i, *b_i)?;
            let z = tape.sigmoid(z);
            let o = affine(tape, z, *w_o, *b_o)?;
            Ok((tape.tanh(o), None))
        }
        ActorParams::Ff2 { w_i, b_i, w_z, b_z, w_o, b_o } => {
            let z1 = affine(tape, x, *w_i, *b_i)?;
            let z1 = tape.sigmoid(z1);
            let z2 = affine(tape, z1, *w_z, *b_z)?;
            let z2 = tape.sigmoid(z2);
            let o = affine(tape, z2, *w_o, *b_o)?;
            Ok((tape.tanh(o), None))
        }
        ActorParams::Rnn { u_z, w_z, u_r, w_r, u_h, w_h, u } => {
            let s = state.expect("checked above");
            let z = two_term(tape, x, *u_z, s, *w_z)?;
            let z = tape.sigmoid(z);
            let r = two_term(tape, x, *u_r, s, *w_r)?;
            let r = tape.sigmoid(r);
            let sr = tape.mul(s, r)?;
            let cand = two_term(tape, x, *u_h, sr, *w_h)?;
            let cand = tape.tanh(cand);
            let keep = tape.one_minus(z);
            let fresh = tape.mul(keep, cand)?;
            let carried = tape.mul(z, s)?;
            let s_new = tape.add(fresh, carried)?;
            let a = tape.matmul(s_new, *u)?;
            Ok((a, Some(s_new)))
        }
        ActorParams::Gate { u_z, u } => {
            let z = tape.matmul(x, *u_z)?;
            let z = tape.sigmoid(z);
            let c = tape.matmul(x, *u)?;
            let c = tape.tanh(c);
            Ok((tape.mul(z, c)?, None))
        }
    }
}

fn affine(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

fn two_term(tape: &mut Tape<'_>, x: Var, u: Var, s: Var, w: Var) -> Result<Var> {
    let a = tape.matmul(x, u)?;
    let b = tape.matmul(s, w)?;
    Ok(tape.add(a, b)?)
}

/// Mean L2 norms of the action, decoder state, attentional state and context
/// over a set of decode traces, averaged per sentence first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub action: f64,
    /// Top-layer decoder hidden state `h_t`.
    pub hidden: f64,
    /// Attentional state `tanh([h_t; e_t]·W)` before the action is added.
    pub attn_hidden: f64,
    pub context: f64,
}

pub fn actor_norm_probe<'a, I>(traces: I) -> Result<NormReport>
where
    I: IntoIterator<Item = &'a [StepTrace]>,
{
    let mut total = NormReport::default();
    let mut n = 0usize;
    for trace in traces {
        if trace.is_empty() {
            continue;
        }
        let len = trace.len() as f64;
        total.action += trace.iter().map(|s| s.action_norm).sum::<f64>() / len;
        total.hidden += trace.iter().map(|s| s.hidden_norm).sum::<f64>() / len;
        total.attn_hidden += trace.iter().map(|s| s.attn_hidden_norm).sum::<f64>() / len;
        total.context += trace.iter().map(|s| s.context_norm).sum::<f64>() / len;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("norm probe needs a non-empty trace".into()));
    }
    let n = n as f64;
    Ok(NormReport {
        action: total.action / n,
        hidden: total.hidden / n,
        attn_hidden: total.attn_hidden / n,
        context: total.context / n,
    })
}
