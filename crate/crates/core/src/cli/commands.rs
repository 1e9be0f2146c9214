use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actors::{Actor, NormReport};
use crate::decoding::{self, CorpusDecode, DecodeResult};
use crate::distill::{self, select_top1, strip_eos, ActorTrainReport, SweepAxis, SweepBase, SweepRow};
use crate::error::{Error, Result};
use crate::metrics::{self, word_likelihood, MetricReport};
use crate::seq2seq::{ModelDims, Seq2SeqModel, TrainReport};
use crate::textio::{gen_synthetic, load_parallel, ParallelCorpus, Vocabulary};

use super::config::{MethodName, ReportFormat, RunConfig};

const SENTINEL: &str = ".incomplete";

/// Marks an output directory as in progress until [`RunGuard::finish`].
pub struct RunGuard {
    sentinel: PathBuf,
}

impl RunGuard {
    /// Creates `out_dir`, writes the effective config and the sentinel.
    pub fn begin(cfg: &RunConfig) -> Result<Self> {
        let dir = &cfg.out_dir;
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut snapshot = cfg.clone();
        snapshot.version = super::config::VERSION.to_string();
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(&snapshot)?).map_err(Error::io(&path))?;
        let sentinel = dir.join(SENTINEL);
        fs::write(&sentinel, b"").map_err(Error::io(&sentinel))?;
        Ok(Self { sentinel })
    }

    pub fn finish(self) -> Result<()> {
        fs::remove_file(&self.sentinel).map_err(Error::io(&self.sentinel))
    }
}

/// Validates `cfg`, then runs `f` inside a [`RunGuard`]. On error the
/// sentinel stays behind to flag the partial outputs.
fn guarded<T>(cfg: &RunConfig, f: impl FnOnce() -> Result<T>) -> Result<T> {
    cfg.validate()?;
    let guard = RunGuard::begin(cfg)?;
    let out = f()?;
    guard.finish()?;
    Ok(out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, contents).map_err(Error::io(path))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "required input is missing"),
        })
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Writes a serializable report as JSON, or as CSV via `csv`.
fn write_report<T: Serialize>(cfg: &RunConfig, stem: &str, value: &T, csv: impl FnOnce() -> String) -> Result<PathBuf> {
    let path = match cfg.format {
        ReportFormat::Json => {
            let p = cfg.out_dir.join(format!("{stem}.json"));
            write(&p, serde_json::to_string_pretty(value)?)?;
            p
        }
        ReportFormat::Csv => {
            let p = cfg.out_dir.join(format!("{stem}.csv"));
            write(&p, csv())?;
            p
        }
    };
    Ok(path)
}

pub struct Data {
    pub vocab_src: Vocabulary,
    pub vocab_tgt: Vocabulary,
    pub train: ParallelCorpus,
    pub test: ParallelCorpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

/// Generates the synthetic corpus and writes it with its vocabularies.
pub fn run_gen_data(cfg: &RunConfig) -> Result<DataSummary> {
    cfg.validate()?;
    let (corpus, vs, vt) = gen_synthetic(&cfg.data.synthetic(cfg.seed))?;
    let (train, test) = corpus.split_at(cfg.data.n_train);
    let (ts, tt) = cfg.train_paths();
    let (es, et) = cfg.test_paths();
    let (pvs, pvt) = cfg.vocab_paths();
    for p in [&ts, &es, &pvs] {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
    }
    train.write_text(&ts, &tt, &vs, &vt)?;
    test.write_text(&es, &et, &vs, &vt)?;
    vs.save(&pvs)?;
    vt.save(&pvt)?;
    Ok(DataSummary {
        n_train: train.len(),
        n_test: test.len(),
        src_vocab: vs.len(),
        tgt_vocab: vt.len(),
    })
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let (pvs, pvt) = cfg.vocab_paths();
    let (ts, tt) = cfg.train_paths();
    let (es, et) = cfg.test_paths();
    for p in [&pvs, &pvt, &ts, &tt, &es, &et] {
        require(p)?;
    }
    let vocab_src = Vocabulary::load(&pvs)?;
    let vocab_tgt = Vocabulary::load(&pvt)?;
    let train = load_parallel(&ts, &tt, &vocab_src, &vocab_tgt)?;
    let test = load_parallel(&es, &et, &vocab_src, &vocab_tgt)?;
    Ok(Data {
        vocab_src,
        vocab_tgt,
        train,
        test,
    })
}

fn load_model(cfg: &RunConfig, data: &Data) -> Result<Seq2SeqModel> {
    let path = cfg.base_ckpt();
    require(&path)?;
    Seq2SeqModel::load_for(&path, &data.vocab_src, &data.vocab_tgt)
}

fn load_actor(cfg: &RunConfig) -> Result<Actor> {
    let path = cfg.actor_ckpt();
    require(&path)?;
    Actor::load(&path)
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l:.6}", i + 1);
    }
    s
}

pub fn run_train_base(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let dims = ModelDims {
        src_vocab: data.vocab_src.len(),
        tgt_vocab: data.vocab_tgt.len(),
        d_emb: cfg.model.d_emb,
        d_h: cfg.model.d_h,
        n_layers: cfg.model.n_layers,
    };
    let mut model = Seq2SeqModel::new(dims, cfg.seed)?.with_vocab(&data.vocab_src, &data.vocab_tgt)?;
    let report = crate::seq2seq::train_base(&mut model, &data.train.pairs, &cfg.base_train())?;
    model.save(&cfg.base_ckpt())?;
    write(&cfg.out_dir.join("base_loss.csv"), loss_csv(&report.epoch_losses))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub sentences: usize,
    pub records: usize,
    pub path: PathBuf,
}

pub fn run_distill(cfg: &RunConfig) -> Result<DistillSummary> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let records = distill::build_pseudo_corpus(&model, &data.train.pairs, &cfg.distill)?;
    let path = cfg.pseudo_corpus();
    distill::write_jsonl(&path, &records)?;
    Ok(DistillSummary {
        sentences: data.train.len(),
        records: records.len(),
        path,
    })
}

fn norms_csv(norms: &[NormReport]) -> String {
    let mut s = String::from("epoch,action,hidden,attn_hidden,context\n");
    for (i, n) in norms.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{:.6},{:.6},{:.6},{:.6}",
            n.action, n.hidden, n.attn_hidden, n.context
        );
    }
    s
}

fn probe_sources(cfg: &RunConfig, data: &Data) -> Vec<Vec<usize>> {
    data.test
        .pairs
        .iter()
        .take(cfg.actor.probe_sentences.max(1))
        .map(|p| p.src.clone())
        .collect()
}

pub fn run_train_actor(cfg: &RunConfig) -> Result<ActorTrainReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let pseudo_path = cfg.pseudo_corpus();
    require(&pseudo_path)?;
    let corpus = distill::read_jsonl(&pseudo_path)?;
    let mut actor = Actor::new(cfg.actor.kind, model.dims.d_h, cfg.actor_hidden(), cfg.seed)?;
    let probe = probe_sources(cfg, &data);
    let report = distill::train_actor(
        &model,
        &mut actor,
        &corpus,
        &cfg.actor_train(),
        Some((&probe, cfg.decode.max_len)),
    )?;
    actor.save(&cfg.actor_ckpt())?;
    write(&cfg.out_dir.join("actor_loss.csv"), loss_csv(&report.epoch_losses))?;
    write(&cfg.out_dir.join("norms.csv"), norms_csv(&report.norms))?;
    Ok(report)
}

pub fn run_train_cont(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let pseudo_path = cfg.pseudo_corpus();
    require(&pseudo_path)?;
    let corpus = distill::read_jsonl(&pseudo_path)?;
    let train = crate::seq2seq::TrainConfig {
        seed: cfg.seed,
        ..cfg.actor.train.clone()
    };
    let (clone, report) = distill::train_cont_baseline(&model, &corpus, &train)?;
    clone.save(&cfg.out_dir.join("cont.ckpt"))?;
    write(&cfg.out_dir.join("cont_loss.csv"), loss_csv(&report.epoch_losses))?;
    Ok(report)
}

fn output_path(cfg: &RunConfig, method: MethodName) -> PathBuf {
    cfg.out_dir.join(format!("decode.{}.txt", cfg.method_label(method)))
}

fn decoded_text(vocab: &Vocabulary, results: &[DecodeResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&vocab.decode(&r.tokens));
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub method: String,
    pub sentences: usize,
    pub tokens: usize,
    pub tokens_per_sec: f64,
    pub output: PathBuf,
}

fn read_sources(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(crate::textio::TextError::Format {
                path: path.display().to_string(),
                message: format!("empty line {}", i + 1),
            }
            .into());
        }
        out.push(vocab.encode(line));
    }
    Ok(out)
}

/// Sentence-by-sentence decode of the input file with `method`.
pub fn run_decode(cfg: &RunConfig, method: MethodName) -> Result<DecodeSummary> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let actor = if method.uses_actor() { Some(load_actor(cfg)?) } else { None };
    let input = cfg.path(&cfg.paths.input, "data/test.src");
    require(&input)?;
    let srcs = read_sources(&input, &data.vocab_src)?;
    let out = decoding::decode_corpus(&model, &srcs, &cfg.decode_config(method), actor.as_ref())?;
    let output = output_path(cfg, method);
    write(&output, decoded_text(&data.vocab_tgt, &out.results))?;
    if cfg.decode.trace {
        let mut s = String::new();
        for r in &out.results {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        write(&output.with_extension("trace.jsonl"), s)?;
    }
    Ok(DecodeSummary {
        method: cfg.method_label(method),
        sentences: srcs.len(),
        tokens: out.tokens,
        tokens_per_sec: out.tokens_per_sec,
        output,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Corpus BLEU ×100.
    pub bleu: f64,
    /// Corpus TER ×100.
    pub ter: f64,
    pub objective: String,
    pub metrics: MetricReport,
}

fn eval_csv(r: &EvalReport) -> String {
    let mut s = format!("bleu,{:.4}\nter,{:.4}\nsentence,{}\n", r.bleu, r.ter, r.objective);
    for (i, v) in r.metrics.per_sentence.iter().enumerate() {
        let _ = writeln!(s, "{i},{v:.6}");
    }
    s
}

pub fn evaluate_tokens<H: AsRef<[usize]>>(cfg: &RunConfig, hyps: &[H], refs: &[&[usize]]) -> Result<EvalReport> {
    let metrics = metrics::evaluate(hyps, refs, cfg.distill.objective)?;
    Ok(EvalReport {
        bleu: 100.0 * metrics.corpus_bleu,
        ter: 100.0 * metrics.ter,
        objective: cfg.distill.objective.name().to_string(),
        metrics,
    })
}

/// Scores a hypothesis file against the test references.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let hyp_path = cfg.paths.hyp.clone().unwrap_or_else(|| output_path(cfg, cfg.decode.method));
    require(&hyp_path)?;
    let text = fs::read_to_string(&hyp_path).map_err(Error::io(&hyp_path))?;
    let hyps: Vec<Vec<usize>> = text.lines().map(|l| data.vocab_tgt.encode(l)).collect();
    let refs: Vec<&[usize]> = data.test.pairs.iter().map(|p| strip_eos(&p.tgt)).collect();
    let report = evaluate_tokens(cfg, &hyps, &refs)?;
    write_report(cfg, "eval", &report, || eval_csv(&report))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    /// Corpus BLEU ×100.
    pub bleu: f64,
    pub tokens_per_sec: f64,
    pub n_sentences: usize,
    pub wall_clock_sec: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn get(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,bleu,tokens_per_sec,n_sentences,wall_clock_sec\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.2},{:.1},{},{:.4}",
                r.method, r.bleu, r.tokens_per_sec, r.n_sentences, r.wall_clock_sec
            );
        }
        s
    }
}

/// Times each method in its own single-threaded pass after an untimed warm-up.
pub fn bench(
    cfg: &RunConfig,
    model: &Seq2SeqModel,
    actor: Option<&Actor>,
    test: &ParallelCorpus,
    methods: &[MethodName],
) -> Result<(BenchReport, Vec<CorpusDecode>)> {
    let srcs: Vec<Vec<usize>> = test.pairs.iter().map(|p| p.src.clone()).collect();
    let refs: Vec<&[usize]> = test.pairs.iter().map(|p| strip_eos(&p.tgt)).collect();
    let mut report = BenchReport::default();
    let mut decodes = Vec::new();
    for &m in methods {
        let a = if m.uses_actor() {
            Some(actor.ok_or_else(|| Error::Config(format!("method {m:?} needs a trained actor")))?)
        } else {
            None
        };
        let dc = cfg.decode_config(m);
        let warm = cfg.bench.warmup.min(srcs.len());
        if warm > 0 {
            decoding::decode_corpus(model, &srcs[..warm], &dc, a)?;
        }
        let out = decoding::decode_corpus(model, &srcs, &dc, a)?;
        let hyps: Vec<&[usize]> = out.results.iter().map(DecodeResult::content).collect();
        let row = BenchRow {
            method: cfg.method_label(m),
            bleu: 100.0 * metrics::corpus_bleu(&hyps, &refs)?,
            tokens_per_sec: out.tokens_per_sec,
            n_sentences: srcs.len(),
            wall_clock_sec: out.wall_secs,
            tokens: out.tokens,
        };
        info!("bench {}: bleu {:.2} tok/s {:.0}", row.method, row.bleu, row.tokens_per_sec);
        report.rows.push(row);
        decodes.push(out);
    }
    Ok((report, decodes))
}

pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let needs_actor = cfg.bench.methods.iter().any(|m| m.uses_actor());
    let actor = if needs_actor { Some(load_actor(cfg)?) } else { None };
    let (report, _) = bench(cfg, &model, actor.as_ref(), &data.test, &cfg.bench.methods)?;
    write_report(cfg, "bench", &report, || report.to_csv())?;
    Ok(report)
}

pub const PROBE_COLUMNS: [&str; 4] = ["ref", "greedy", "kbest-oracle", "tg"];

/// Mean word-level likelihood for each evaluator over each translation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub columns: Vec<String>,
    /// `base` then `base+actor`, in `columns` order.
    pub base: Vec<f64>,
    pub actor: Vec<f64>,
    /// Norms with a fresh actor and with the trained actor.
    pub norms_init: NormReport,
    pub norms_trained: NormReport,
}

impl ProbeReport {
    pub fn entry(&self, row_actor: bool, column: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == column)?;
        Some(if row_actor { self.actor[i] } else { self.base[i] })
    }

    pub fn likelihood_csv(&self) -> String {
        let mut s = format!("evaluator,{}\n", self.columns.join(","));
        for (name, row) in [("base", &self.base), ("base+actor", &self.actor)] {
            let cells: Vec<String> = row.iter().map(|v| format!("{:.4}", 100.0 * v)).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }

    pub fn norms_csv(&self) -> String {
        let mut s = String::from("checkpoint,action,hidden,attn_hidden,context\n");
        for (name, n) in [("init", &self.norms_init), ("trained", &self.norms_trained)] {
            let _ = writeln!(
                s,
                "{name},{:.6},{:.6},{:.6},{:.6}",
                n.action, n.hidden, n.attn_hidden, n.context
            );
        }
        s
    }
}

fn mean_pw(model: &Seq2SeqModel, actor: Option<&Actor>, srcs: &[Vec<usize>], tgts: &[Vec<usize>]) -> Result<f64> {
    let vals = srcs
        .par_iter()
        .zip(tgts)
        .map(|(s, t)| word_likelihood(model, actor, s, t))
        .collect::<Result<Vec<f64>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Likelihood matrix and norm diagnostics on the test set.
pub fn probe(cfg: &RunConfig, model: &Seq2SeqModel, actor: &Actor, test: &ParallelCorpus) -> Result<ProbeReport> {
    let srcs: Vec<Vec<usize>> = test.pairs.iter().map(|p| p.src.clone()).collect();
    let greedy_cfg = cfg.decode_config(MethodName::Greedy);
    let greedy: Vec<Vec<usize>> = decoding::decode_parallel(model, &srcs, &greedy_cfg, None)?
        .into_iter()
        .map(|r| r.tokens)
        .collect();
    let tg: Vec<Vec<usize>> = decoding::decode_parallel(model, &srcs, &greedy_cfg, Some(actor))?
        .into_iter()
        .map(|r| r.tokens)
        .collect();
    let oracle = test
        .pairs
        .par_iter()
        .map(|p| {
            let max_len = cfg.decode.max_len.for_source(p.src.len());
            let kbest = decoding::beam(model, &p.src, cfg.distill.beam_k, None, max_len, cfg.distill.len_norm)?.kbest;
            let scores: Vec<f64> = kbest
                .iter()
                .map(|z| cfg.distill.objective.score(z.content(), strip_eos(&p.tgt)))
                .collect();
            let best = select_top1(&scores).expect("beam returns at least one hypothesis");
            Ok(kbest[best].tokens.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<usize>> = test.pairs.iter().map(|p| p.tgt.clone()).collect();
    let sets = [&refs, &greedy, &oracle, &tg];
    let mut base = Vec::new();
    let mut with_actor = Vec::new();
    for set in sets {
        base.push(mean_pw(model, None, &srcs, set)?);
        with_actor.push(mean_pw(model, Some(actor), &srcs, set)?);
    }
    let probe_srcs: Vec<Vec<usize>> = srcs.iter().take(cfg.actor.probe_sentences.max(1)).cloned().collect();
    let fresh = Actor::new(actor.kind(), actor.d_h, actor.hidden_dim, cfg.seed)?;
    Ok(ProbeReport {
        columns: PROBE_COLUMNS.iter().map(|c| c.to_string()).collect(),
        base,
        actor: with_actor,
        norms_init: distill::probe_norms(model, &fresh, &probe_srcs, cfg.decode.max_len)?,
        norms_trained: distill::probe_norms(model, actor, &probe_srcs, cfg.decode.max_len)?,
    })
}

pub fn run_probe(cfg: &RunConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let actor = load_actor(cfg)?;
    let report = probe(cfg, &model, &actor, &data.test)?;
    write(&cfg.out_dir.join("probe_likelihood.csv"), report.likelihood_csv())?;
    write(&cfg.out_dir.join("probe_norms.csv"), report.norms_csv())?;
    Ok(report)
}

pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let axis: SweepAxis = cfg
        .sweep
        .axis
        .as_deref()
        .ok_or_else(|| Error::Config("sweep needs an axis".into()))?
        .parse()?;
    if cfg.sweep.values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let base = SweepBase {
        distill: cfg.distill.clone(),
        actor_kind: cfg.actor.kind,
        hidden_dim: cfg.actor_hidden(),
        train: cfg.actor_train(),
        actor_seed: cfg.seed,
        eval_beam_k: cfg.decode.beam_k,
    };
    let rows = distill::sweep(&model, &data.train.pairs, &data.test.pairs, axis, &cfg.sweep.values, &base)?;
    write(&cfg.out_dir.join("sweep.csv"), distill::sweep_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub base: TrainReport,
    pub pseudo_records: usize,
    pub actor: ActorTrainReport,
    /// Rows greedy, beam, tg, tg+beam with BLEU ×100 and tokens/sec.
    pub table: BenchReport,
    pub probe: ProbeReport,
    /// Whether every tg decode ran with the actor attached.
    pub tg_used_actor: bool,
}

/// Runs every stage end to end: data, base training, distillation, actor
/// training, evaluation, benchmark and probe.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    stage("gen-data", run_gen_data(cfg))?;
    let base = stage("train-base", run_train_base(cfg))?;
    let pseudo = stage("distill", run_distill(cfg))?;
    let actor_report = stage("train-actor", run_train_actor(cfg))?;
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let actor = load_actor(cfg)?;
    let methods = [MethodName::Greedy, MethodName::Beam, MethodName::Tg, MethodName::TgBeam];
    let srcs: Vec<Vec<usize>> = data.test.pairs.iter().map(|p| p.src.clone()).collect();
    let mut tg_used_actor = true;
    stage(
        "eval",
        (|| {
            for m in methods {
                let a = m.uses_actor().then_some(&actor);
                let out = decoding::decode_parallel(&model, &srcs, &cfg.decode_config(m), a)?;
                if m == MethodName::Tg {
                    tg_used_actor = out.iter().all(|r| r.actor_applied);
                }
                write(&output_path(cfg, m), decoded_text(&data.vocab_tgt, &out))?;
            }
            Ok(())
        })(),
    )?;
    let (table, _) = stage("bench", bench(cfg, &model, Some(&actor), &data.test, &methods))?;
    let probe_report = stage("probe", probe(cfg, &model, &actor, &data.test))?;
    write(&cfg.out_dir.join("probe_likelihood.csv"), probe_report.likelihood_csv())?;
    write(&cfg.out_dir.join("probe_norms.csv"), probe_report.norms_csv())?;
    let report = PipelineReport {
        seed: cfg.seed,
        base,
        pseudo_records: pseudo.records,
        actor: actor_report,
        table,
        probe: probe_report,
        tg_used_actor,
    };
    write(&cfg.out_dir.join("pipeline.csv"), report.table.to_csv())?;
    write(&cfg.out_dir.join("pipeline.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DataSummary> {
    guarded(cfg, || run_gen_data(cfg))
}

pub fn cmd_train_base(cfg: &RunConfig) -> Result<TrainReport> {
    guarded(cfg, || run_train_base(cfg))
}

pub fn cmd_distill(cfg: &RunConfig) -> Result<DistillSummary> {
    guarded(cfg, || run_distill(cfg))
}

pub fn cmd_train_actor(cfg: &RunConfig) -> Result<ActorTrainReport> {
    guarded(cfg, || run_train_actor(cfg))
}

pub fn cmd_train_cont(cfg: &RunConfig) -> Result<TrainReport> {
    guarded(cfg, || run_train_cont(cfg))
}

pub fn cmd_decode(cfg: &RunConfig, method: MethodName) -> Result<DecodeSummary> {
    guarded(cfg, || run_decode(cfg, method))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    guarded(cfg, || run_eval(cfg))
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    guarded(cfg, || run_bench(cfg))
}

pub fn cmd_probe(cfg: &RunConfig) -> Result<ProbeReport> {
    guarded(cfg, || run_probe(cfg))
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    guarded(cfg, || run_sweep(cfg))
}

pub fn cmd_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    guarded(cfg, || run_pipeline(cfg))
}
