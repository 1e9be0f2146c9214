//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod support;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgdecode::actors::{Actor, ActorKind};
use tgdecode::cli::{self, load_data, PipelineReport, RunConfig};
use tgdecode::decoding::{beam, greedy};
use tgdecode::distill::{actor_train_config, build_pseudo_corpus, read_jsonl, select_top1, train_actor, Strategy};
use tgdecode::seq2seq::Seq2SeqModel;
use tgdecode::textio::{EOS, NUM_RESERVED};

const SEEDS: [u64; 3] = [0, 1, 2];
const GRAD_TOL: f64 = 1e-4;
const TIME_LIMIT_SEC: f64 = 15.0 * 60.0;

type Outcome = std::result::Result<String, String>;

struct Run {
    cfg: RunConfig,
    report: PipelineReport,
}

impl Run {
    fn model(&self) -> Seq2SeqModel {
        let data = load_data(&self.cfg).unwrap();
        Seq2SeqModel::load_for(&self.cfg.base_ckpt(), &data.vocab_src, &data.vocab_tgt).unwrap()
    }

    fn bleu(&self, method: &str) -> f64 {
        self.report.table.get(method).unwrap().bleu
    }

    fn speed(&self, method: &str) -> f64 {
        self.report.table.get(method).unwrap().tokens_per_sec
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn content(tokens: &[usize]) -> &[usize] {
    tokens.strip_suffix(&[EOS]).unwrap_or(tokens)
}

fn k1_is_greedy(runs: &[Run]) -> Outcome {
    let mut checked = 0;
    for run in runs {
        let model = run.model();
        let fresh = Actor::new(run.cfg.actor.kind, model.dims.d_h, run.cfg.actor_hidden(), run.cfg.seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
        for i in 0..70 {
            let len = rng.random_range(1..=20);
            let src: Vec<usize> = (0..len).map(|_| rng.random_range(NUM_RESERVED..model.dims.src_vocab)).collect();
            let max_len = run.cfg.decode.max_len.for_source(len);
            let g = greedy(&model, &src, None, max_len).unwrap();
            let b = beam(&model, &src, 1, None, max_len, false).unwrap().into_best();
            if g.tokens != b.tokens || g.logprob.to_bits() != b.logprob.to_bits() {
                return Err(format!("seed {} input {i}: beam(1) differs from greedy", run.cfg.seed));
            }
            let a = greedy(&model, &src, Some(&fresh), max_len).unwrap();
            if a.tokens != g.tokens || a.logprob.to_bits() != g.logprob.to_bits() {
                return Err(format!("seed {} input {i}: fresh actor changed the output", run.cfg.seed));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} inputs over {} models", runs.len()))
}

fn oracles() -> Outcome {
    support::check_beam_oracle(30)?;
    support::check_bleu_oracle(50)?;
    support::check_ter_oracle(400)?;
    Ok("beam vs enumeration (30 toys), BLEU on 50 corpora, TER on 400 pairs".into())
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (kind, err) in support::actor_gradient_errors()? {
        parts.push(format!("{kind} {err:.1e}"));
        worst = worst.max(err);
    }
    for layers in [1, 2] {
        let err = support::base_gradient_error(layers)?;
        parts.push(format!("base/{layers}L {err:.1e}"));
        worst = worst.max(err);
    }
    let msg = parts.join(", ");
    if worst < GRAD_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn distill_invariants(run: &Run) -> Outcome {
    let cfg = &run.cfg;
    let model = run.model();
    let data = load_data(cfg).unwrap();
    let records = read_jsonl(&cfg.pseudo_corpus()).unwrap();
    let obj = cfg.distill.objective;
    for (i, r) in records.iter().take(200).enumerate() {
        let max_len = cfg.distill.max_len.for_source(r.src.len());
        let kbest = beam(&model, &r.src, cfg.distill.beam_k, None, max_len, cfg.distill.len_norm).unwrap().kbest;
        let scores: Vec<f64> = kbest.iter().map(|z| obj.score(z.content(), content(&r.gold))).collect();
        let best = select_top1(&scores).unwrap();
        if kbest[best].tokens != r.tgt || scores[best] != r.objective {
            return Err(format!("record {i} is not the argmax of its rescanned k-best list"));
        }
    }

    let mut thd_cfg = cfg.distill.clone();
    thd_cfg.strategy = Strategy::Thd;
    let pairs = &data.train.pairs[..200];
    let thd = build_pseudo_corpus(&model, pairs, &thd_cfg).unwrap();
    for r in &thd {
        let g = greedy(&model, &r.src, None, cfg.distill.max_len.for_source(r.src.len())).unwrap();
        if r.objective <= obj.score(g.content(), content(&r.gold)) {
            return Err("thd record does not beat greedy".into());
        }
    }

    let before = fs::read(cfg.base_ckpt()).unwrap();
    let hash = model.param_hash();
    let mut actor = Actor::new(ActorKind::Gate, model.dims.d_h, cfg.actor_hidden(), 7).unwrap();
    train_actor(&model, &mut actor, &records[..200], &actor_train_config(1, 7), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let after = dir.path().join("base.ckpt");
    model.save(&after).unwrap();
    if model.param_hash() != hash || fs::read(&after).unwrap() != before {
        return Err("actor training modified the base model".into());
    }
    Ok(format!("200 records rescanned, {} thd records, base bytes unchanged", thd.len()))
}

fn desk_table(runs: &[Run], elapsed: f64) -> Outcome {
    let g = mean(runs.iter().map(|r| r.bleu("greedy")));
    let b = mean(runs.iter().map(|r| r.bleu("beam4")));
    let tg = mean(runs.iter().map(|r| r.bleu("tg")));
    let tgb = mean(runs.iter().map(|r| r.bleu("tg+beam4")));
    let msg = format!("greedy {g:.2} beam4 {b:.2} tg {tg:.2} tg+beam4 {tgb:.2}, {elapsed:.0}s");
    let ok = b > g && tg >= g + 0.5 * (b - g) && tgb >= tg && elapsed <= TIME_LIMIT_SEC;
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn speed(runs: &[Run]) -> Outcome {
    let g = mean(runs.iter().map(|r| r.speed("greedy")));
    let b = mean(runs.iter().map(|r| r.speed("beam4")));
    let tg = mean(runs.iter().map(|r| r.speed("tg")));
    let msg = format!("tok/s greedy {g:.0} beam4 {b:.0} tg {tg:.0}");
    if g >= 2.0 * b && tg >= 0.8 * g {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn actor_likelihood(runs: &[Run]) -> Outcome {
    let on_tg = mean(runs.iter().map(|r| r.report.probe.entry(true, "tg").unwrap()));
    let on_greedy = mean(runs.iter().map(|r| r.report.probe.entry(true, "greedy").unwrap()));
    let msg = format!("P_w with actor: tg outputs {on_tg:.4}, greedy outputs {on_greedy:.4}");
    if on_tg > on_greedy {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn norms(runs: &[Run]) -> Outcome {
    let init = runs.iter().map(|r| r.report.probe.norms_init.action).fold(0.0, f64::max);
    let action = mean(runs.iter().map(|r| r.report.probe.norms_trained.action));
    let state = mean(runs.iter().map(|r| r.report.probe.norms_trained.attn_hidden));
    let msg = format!("init ‖a‖ {init:.3}, trained ‖a‖ {action:.3} vs ‖h̃‖ {state:.3}");
    if init == 0.0 && action < state {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn rerun_is_identical(root: &Path) -> Outcome {
    let mut cfg = RunConfig::desk();
    cfg.seed = 3;
    cfg.data.n_train = 300;
    cfg.data.n_test = 40;
    cfg.model.d_emb = 16;
    cfg.model.d_h = 16;
    cfg.base.epochs = 2;
    cfg.actor.train.epochs = 2;
    cfg.actor.probe_sentences = 5;
    let (a, b) = (root.join("rerun-a"), root.join("rerun-b"));
    for dir in [&a, &b] {
        cfg.out_dir = dir.clone();
        cli::cmd_pipeline(&cfg).map_err(|e| e.to_string())?;
    }
    let files = [
        "pseudo.jsonl",
        "base.ckpt",
        "actor.ckpt",
        "decode.greedy.txt",
        "decode.beam4.txt",
        "decode.tg.txt",
        "decode.tg+beam4.txt",
    ];
    for f in files {
        if fs::read(a.join(f)).map_err(|e| e.to_string())? != fs::read(b.join(f)).map_err(|e| e.to_string())? {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} artifacts byte-identical", files.len()))
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let runs: Vec<Run> = SEEDS
        .iter()
        .map(|&seed| {
            let mut cfg = RunConfig::desk();
            cfg.seed = seed;
            cfg.out_dir = root.path().join(format!("seed{seed}"));
            let report = cli::cmd_pipeline(&cfg).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            println!("seed {seed}\n{}", report.table.to_csv());
            Run { cfg, report }
        })
        .collect();
    let elapsed = start.elapsed().as_secs_f64();

    let results: Vec<(&str, Outcome)> = vec![
        ("beam k=1 equals greedy; fresh actor is inert", k1_is_greedy(&runs)),
        ("beam, BLEU and TER match brute-force oracles", oracles()),
        ("analytic gradients match finite differences", gradients()),
        ("distillation invariants", distill_invariants(&runs[0])),
        ("desk table ordering", desk_table(&runs, elapsed)),
        ("decoding speed ratios", speed(&runs)),
        ("actor raises likelihood of its own outputs", actor_likelihood(&runs)),
        ("action norm stays below the attentional state", norms(&runs)),
        ("rerun is byte-identical", rerun_is_identical(root.path())),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(msg) => println!("criterion {}: PASS  {name} ({msg})", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({msg})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
