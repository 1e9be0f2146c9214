//! Attentional encoder-decoder: a bidirectional GRU encoder, an
//! input-feeding GRU decoder and bilinear ("general") global attention.

mod network;
mod train;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actors::{Actor, ActorState};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numkit::{Tape, Tensor, Var};
use crate::rng::substream;
use crate::textio::Vocabulary;

pub(crate) use network::{batch_forward, encode_vars, step_vars, ActorBinding, EncodedVars};
pub use train::{model_grads, nll_loss, train_base, BatchPlan, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_emb: usize,
    pub d_h: usize,
    pub n_layers: usize,
}

impl ModelDims {
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            d_emb: 64,
            d_h: 64,
            n_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("d_emb", self.d_emb),
            ("d_h", self.d_h),
            ("n_layers", self.n_layers),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// One GRU cell with fused gate weights: `w_x` is `[in × 3h]` in
/// `(z, r, h̃)` column order, `u_zr` is `[h × 2h]`, `u_h` is `[h × h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<P> {
    pub w_x: P,
    pub u_zr: P,
    pub u_h: P,
    pub b: P,
}

impl<P> GruParams<P> {
    fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> GruParams<Q> {
        GruParams {
            w_x: f(&self.w_x),
            u_zr: f(&self.u_zr),
            u_h: f(&self.u_h),
            b: f(&self.b),
        }
    }

    fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{prefix}.w_x"), &self.w_x));
        out.push((format!("{prefix}.u_zr"), &self.u_zr));
        out.push((format!("{prefix}.u_h"), &self.u_h));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.extend([&mut self.w_x, &mut self.u_zr, &mut self.u_h, &mut self.b]);
    }
}

/// Full parameter set. `enc[l]` holds the forward and backward cells of
/// encoder layer `l`; `bridge[l]` maps final encoder states to the initial
/// state of decoder layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub embed_src: P,
    pub embed_tgt: P,
    pub enc: Vec<[GruParams<P>; 2]>,
    pub enc_proj: P,
    pub bridge: Vec<(P, P)>,
    pub dec: Vec<GruParams<P>>,
    pub attn_general: P,
    pub attn_out: P,
    pub output_proj: P,
    pub out_bias: P,
}

impl<P> ModelParams<P> {
    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&'a P) -> Q) -> ModelParams<Q> {
        ModelParams {
            embed_src: f(&self.embed_src),
            embed_tgt: f(&self.embed_tgt),
            enc: self
                .enc
                .iter()
                .map(|[fw, bw]| [fw.map(f), bw.map(f)])
                .collect(),
            enc_proj: f(&self.enc_proj),
            bridge: self.bridge.iter().map(|(w, b)| (f(w), f(b))).collect(),
            dec: self.dec.iter().map(|g| g.map(f)).collect(),
            attn_general: f(&self.attn_general),
            attn_out: f(&self.attn_out),
            output_proj: f(&self.output_proj),
            out_bias: f(&self.out_bias),
        }
    }

    /// Parameters with stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("embed_src".to_string(), &self.embed_src),
            ("embed_tgt".to_string(), &self.embed_tgt),
        ];
        for (l, [fw, bw]) in self.enc.iter().enumerate() {
            fw.push_named(&format!("enc.{l}.fwd"), &mut out);
            bw.push_named(&format!("enc.{l}.bwd"), &mut out);
        }
        out.push(("enc_proj".into(), &self.enc_proj));
        for (l, (w, b)) in self.bridge.iter().enumerate() {
            out.push((format!("bridge.{l}.w"), w));
            out.push((format!("bridge.{l}.b"), b));
        }
        for (l, g) in self.dec.iter().enumerate() {
            g.push_named(&format!("dec.{l}"), &mut out);
        }
        out.push(("attn_general".into(), &self.attn_general));
        out.push(("attn_out".into(), &self.attn_out));
        out.push(("output_proj".into(), &self.output_proj));
        out.push(("out_bias".into(), &self.out_bias));
        out
    }

    /// Mutable access in the same order as [`ModelParams::named`].
    pub fn values_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.embed_src, &mut self.embed_tgt];
        for [fw, bw] in self.enc.iter_mut() {
            fw.push_mut(&mut out);
            bw.push_mut(&mut out);
        }
        out.push(&mut self.enc_proj);
        for (w, b) in self.bridge.iter_mut() {
            out.push(w);
            out.push(b);
        }
        for g in self.dec.iter_mut() {
            g.push_mut(&mut out);
        }
        out.extend([
            &mut self.attn_general,
            &mut self.attn_out,
            &mut self.output_proj,
            &mut self.out_bias,
        ]);
        out
    }
}

impl ModelParams<Tensor> {
    /// Records every parameter on `tape`, trainable or frozen.
    pub(crate) fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> ModelParams<Var> {
        if trainable {
            self.map(&mut |t| tape.param(t))
        } else {
            self.map(&mut |t| tape.constant_ref(t))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabHashes {
    pub src: String,
    pub tgt: String,
}

impl VocabHashes {
    pub fn of(src: &Vocabulary, tgt: &Vocabulary) -> Self {
        Self {
            src: src.content_hash(),
            tgt: tgt.content_hash(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    dims: ModelDims,
    vocab: Option<VocabHashes>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel {
    pub dims: ModelDims,
    pub params: ModelParams<Tensor>,
    pub vocab: Option<VocabHashes>,
}

/// Per-layer decoder hiddens (`[1 × d_h]` rows) plus the input feed.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<Tensor>,
    pub input_feed: Tensor,
}

/// Encoder output for one source sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// Annotations laid out `[1 × T_s × d_h]`.
    pub annotations: Tensor,
    pub init_state: DecoderState,
}

impl Encoded {
    pub fn src_len(&self) -> usize {
        self.annotations.shape()[1]
    }

    /// Annotation of source position `t`.
    pub fn annotation(&self, t: usize) -> &[f64] {
        let d = self.annotations.shape()[2];
        &self.annotations.data()[t * d..(t + 1) * d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// `[1 × |V_tgt|]` log-probabilities.
    pub log_probs: Tensor,
    pub new_state: DecoderState,
    /// Top-layer decoder hidden `h_t`.
    pub hidden: Tensor,
    /// Attention context `e_t`.
    pub context: Tensor,
    /// Attention weights over source positions, `[1 × T_s]`.
    pub attn_weights: Tensor,
    /// Attentional hidden state before the action is added.
    pub attn_pre: Tensor,
    /// Attentional hidden state fed to the output layer.
    pub attn_hidden: Tensor,
    pub action: Option<Tensor>,
    pub actor_state: Option<ActorState>,
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

fn gru_init(rng: &mut impl Rng, input: usize, h: usize) -> GruParams<Tensor> {
    GruParams {
        w_x: uniform(rng, &[input, 3 * h]),
        u_zr: uniform(rng, &[h, 2 * h]),
        u_h: uniform(rng, &[h, h]),
        b: Tensor::zeros(&[1, 3 * h]),
    }
}

impl Seq2SeqModel {
    /// Weights uniform in ±0.1 from the `model-init` substream; biases zero.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = substream(seed, "model-init");
        let rng = &mut rng;
        let ModelDims {
            src_vocab,
            tgt_vocab,
            d_emb,
            d_h,
            n_layers,
        } = dims;
        let embed_src = uniform(rng, &[src_vocab, d_emb]);
        let embed_tgt = uniform(rng, &[tgt_vocab, d_emb]);
        let enc = (0..n_layers)
            .map(|l| {
                let input = if l == 0 { d_emb } else { 2 * d_h };
                [gru_init(rng, input, d_h), gru_init(rng, input, d_h)]
            })
            .collect();
        let enc_proj = uniform(rng, &[2 * d_h, d_h]);
        let bridge = (0..n_layers)
            .map(|_| (uniform(rng, &[2 * d_h, d_h]), Tensor::zeros(&[1, d_h])))
            .collect();
        let dec = (0..n_layers)
            .map(|l| {
                let input = if l == 0 { d_emb + d_h } else { d_h };
                gru_init(rng, input, d_h)
            })
            .collect();
        let params = ModelParams {
            embed_src,
            embed_tgt,
            enc,
            enc_proj,
            bridge,
            dec,
            attn_general: uniform(rng, &[d_h, d_h]),
            attn_out: uniform(rng, &[2 * d_h, d_h]),
            output_proj: uniform(rng, &[d_h, tgt_vocab]),
            out_bias: Tensor::zeros(&[1, tgt_vocab]),
        };
        Ok(Self {
            dims,
            params,
            vocab: None,
        })
    }

    pub fn with_vocab(mut self, src: &Vocabulary, tgt: &Vocabulary) -> Result<Self> {
        if src.len() != self.dims.src_vocab || tgt.len() != self.dims.tgt_vocab {
            return Err(Error::Config(format!(
                "vocabulary sizes {}/{} do not match model dims {}/{}",
                src.len(),
                tgt.len(),
                self.dims.src_vocab,
                self.dims.tgt_vocab
            )));
        }
        self.vocab = Some(VocabHashes::of(src, tgt));
        Ok(self)
    }

    pub fn num_params(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub(crate) fn check_src(&self, src: &[usize]) -> Result<()> {
        if src.is_empty() {
            return Err(Error::Contract("empty source sentence".into()));
        }
        check_ids(src, self.dims.src_vocab)
    }

    pub(crate) fn check_tgt(&self, tgt: &[usize]) -> Result<()> {
        if tgt.is_empty() {
            return Err(Error::Contract("empty target sentence".into()));
        }
        check_ids(tgt, self.dims.tgt_vocab)
    }

    pub fn encode(&self, src: &[usize]) -> Result<Encoded> {
        self.check_src(src)?;
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape, false);
        let enc = encode_vars(&mut tape, &p, &[src], self.dims.d_h)?;
        let layers = enc.init.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(Encoded {
            annotations: tape.value(enc.keys).clone(),
            init_state: DecoderState {
                layers,
                input_feed: Tensor::zeros(&[1, self.dims.d_h]),
            },
        })
    }

    pub fn decode_step(
        &self,
        state: &DecoderState,
        prev: usize,
        enc: &Encoded,
        actor: Option<&Actor>,
        actor_state: Option<&ActorState>,
    ) -> Result<StepOutput> {
        self.step_impl(state, prev, enc, actor, actor_state, None)
    }

    /// As [`Seq2SeqModel::decode_step`], with `noise` added to the
    /// attentional hidden state (after any action).
    pub fn decode_step_perturbed(
        &self,
        state: &DecoderState,
        prev: usize,
        enc: &Encoded,
        noise: &Tensor,
    ) -> Result<StepOutput> {
        self.step_impl(state, prev, enc, None, None, Some(noise))
    }

    fn step_impl(
        &self,
        state: &DecoderState,
        prev: usize,
        enc: &Encoded,
        actor: Option<&Actor>,
        actor_state: Option<&ActorState>,
        noise: Option<&Tensor>,
    ) -> Result<StepOutput> {
        check_ids(&[prev], self.dims.tgt_vocab)?;
        if state.layers.len() != self.dims.n_layers {
            return Err(Error::Contract(format!(
                "decoder state has {} layers, model has {}",
                state.layers.len(),
                self.dims.n_layers
            )));
        }
        if let Some(a) = actor {
            if a.d_h != self.dims.d_h {
                return Err(Error::Contract(format!(
                    "actor d_h {} does not match model d_h {}",
                    a.d_h, self.dims.d_h
                )));
            }
        }
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape, false);
        let layers: Vec<Var> = state.layers.iter().map(|t| tape.constant_ref(t)).collect();
        let feed = tape.constant_ref(&state.input_feed);
        let keys = tape.constant_ref(&enc.annotations);
        let encv = EncodedVars {
            keys,
            mask: None,
            init: Vec::new(),
        };
        let ap = actor.map(|a| a.bind(&mut tape));
        let sv = actor_state.map(|s| tape.constant_ref(&s.s));
        let binding = ap.as_ref().map(|params| ActorBinding { params, state: sv });
        let nv = noise.map(|n| tape.constant_ref(n));
        let out = step_vars(&mut tape, &p, &layers, feed, &[prev], &encv, binding, nv)?;
        let value = |v: Var| tape.value(v).clone();
        Ok(StepOutput {
            log_probs: value(out.log_probs),
            new_state: DecoderState {
                layers: out.layers.iter().map(|&v| value(v)).collect(),
                input_feed: value(out.attn_hidden),
            },
            hidden: value(out.hidden),
            context: value(out.context),
            attn_weights: value(out.attn_weights),
            attn_pre: value(out.attn_pre),
            attn_hidden: value(out.attn_hidden),
            action: out.action.map(value),
            actor_state: out.actor_state.map(|s| ActorState { s: value(s) }),
        })
    }

    /// Teacher-forced per-token log-probabilities of `tgt` given `src`.
    pub fn token_logprobs(&self, src: &[usize], tgt: &[usize], actor: Option<&Actor>) -> Result<Vec<f64>> {
        self.check_src(src)?;
        self.check_tgt(tgt)?;
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape, false);
        let ap = actor.map(|a| a.bind(&mut tape));
        let binding = ap.as_ref().zip(actor);
        let fwd = batch_forward(&mut tape, &p, &[src], &[tgt], self.dims.d_h, binding)?;
        Ok(fwd.per_step.iter().map(|&v| tape.value(v).data()[0]).collect())
    }

    /// Teacher-forced total log-probability of `tgt` given `src`.
    pub fn sequence_logprob(&self, src: &[usize], tgt: &[usize], actor: Option<&Actor>) -> Result<f64> {
        Ok(self.token_logprobs(src, tgt, actor)?.iter().sum())
    }

    /// SHA-256 over all parameter bytes, in checkpoint order.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.named() {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = ModelMeta {
            dims: self.dims,
            vocab: self.vocab.clone(),
        };
        let named = self.params.named();
        let refs: Vec<(String, &Tensor)> = named.into_iter().collect();
        checkpoint::encode("seq2seq", serde_json::to_value(meta)?, &refs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = checkpoint::read(path, "seq2seq")?;
        let meta: ModelMeta = serde_json::from_value(header.meta)?;
        let mut model = Seq2SeqModel::new(meta.dims, 0)?;
        model.vocab = meta.vocab;
        let expected: Vec<(String, Vec<usize>)> = model
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let bad = |message: String| Error::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        if expected.len() != tensors.len() {
            return Err(bad(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, shape)), (got, t)) in model.params.values_mut().into_iter().zip(expected).zip(tensors) {
            if name != got || shape != t.shape() {
                return Err(bad(format!("parameter {got} {:?} does not match {name} {shape:?}", t.shape())));
            }
            *slot = t;
        }
        Ok(model)
    }

    /// Loads a checkpoint and checks it was trained with these vocabularies.
    pub fn load_for(path: &Path, src: &Vocabulary, tgt: &Vocabulary) -> Result<Self> {
        let model = Self::load(path)?;
        if let Some(h) = &model.vocab {
            if *h != VocabHashes::of(src, tgt) {
                return Err(Error::Checkpoint {
                    path: path.display().to_string(),
                    message: "vocabulary hashes do not match the supplied vocabularies".into(),
                });
            }
        }
        Ok(model)
    }
}

fn check_ids(ids: &[usize], size: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= size) {
        Some(&id) => Err(Error::Vocab { id, size }),
        None => Ok(()),
    }
}
