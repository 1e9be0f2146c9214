use std::sync::OnceLock;

use tgdecode::actors::{Actor, ActorKind};
use tgdecode::decoding::{beam, greedy, LengthLimit};
use tgdecode::distill::{
    actor_train_config, build_pseudo_corpus, read_jsonl, train_actor, write_jsonl, DistillConfig, Strategy,
};
use tgdecode::metrics::ObjectiveFn;
use tgdecode::optim::OptimConfig;
use tgdecode::seq2seq::{train_base, ModelDims, Seq2SeqModel, TrainConfig};
use tgdecode::textio::{gen_synthetic, SentencePair, SyntheticConfig, SyntheticTask, EOS};

struct Fixture {
    model: Seq2SeqModel,
    pairs: Vec<SentencePair>,
}

/// A briefly trained model on a small dict_sub corpus, shared by every test.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (corpus, vs, vt) = gen_synthetic(&SyntheticConfig {
            task: SyntheticTask::DictSub,
            n_pairs: 240,
            vocab_size: 10,
            len_min: 2,
            len_max: 5,
            noise_prob: 0.15,
            seed: 4,
        })
        .unwrap();
        let dims = ModelDims {
            src_vocab: vs.len(),
            tgt_vocab: vt.len(),
            d_emb: 12,
            d_h: 12,
            n_layers: 1,
        };
        let mut model = Seq2SeqModel::new(dims, 4).unwrap();
        let cfg = TrainConfig {
            optim: OptimConfig {
                lr: 1e-2,
                batch_size: 16,
                ..OptimConfig::default()
            },
            epochs: 3,
            seed: 4,
        };
        train_base(&mut model, &corpus.pairs[..200], &cfg).unwrap();
        Fixture {
            model,
            pairs: corpus.pairs[200..].to_vec(),
        }
    })
}

fn cfg(strategy: Strategy, objective: &str) -> DistillConfig {
    DistillConfig {
        beam_k: 5,
        objective: objective.parse().unwrap(),
        strategy,
        ..DistillConfig::default()
    }
}

fn content(tokens: &[usize]) -> &[usize] {
    tokens.strip_suffix(&[EOS]).unwrap_or(tokens)
}

#[test]
fn top1_records_are_the_argmax_under_rescan() {
    let f = fixture();
    for objective in ["sbleu", "sbleu-raw", "neg-ter"] {
        let c = cfg(Strategy::Top1, objective);
        let obj: ObjectiveFn = objective.parse().unwrap();
        let records = build_pseudo_corpus(&f.model, &f.pairs, &c).unwrap();
        assert_eq!(records.len(), f.pairs.len());
        for (r, p) in records.iter().zip(&f.pairs) {
            assert_eq!(r.src, p.src);
            let max_len = c.max_len.for_source(p.src.len());
            let kbest = beam(&f.model, &p.src, c.beam_k, None, max_len, false).unwrap().kbest;
            let scores: Vec<f64> = kbest.iter().map(|z| obj.score(z.content(), content(&p.tgt))).collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = scores.iter().position(|&s| s == best).unwrap();
            assert_eq!(r.objective, best);
            assert_eq!(r.beam_rank, first + 1);
            assert_eq!(r.tgt, kbest[first].tokens);
        }
    }
}

#[test]
fn thd_records_strictly_beat_greedy() {
    let f = fixture();
    let c = cfg(Strategy::Thd, "sbleu");
    let obj = c.objective;
    let records = build_pseudo_corpus(&f.model, &f.pairs, &c).unwrap();
    for r in &records {
        let p = f.pairs.iter().find(|p| p.src == r.src && p.tgt == r.gold).unwrap();
        let g = greedy(&f.model, &p.src, None, c.max_len.for_source(p.src.len())).unwrap();
        let base = obj.score(g.content(), content(&p.tgt));
        assert!(r.objective > base);
        assert_eq!(r.objective, obj.score(content(&r.tgt), content(&p.tgt)));
    }
}

#[test]
fn full_and_comb_layouts() {
    let f = fixture();
    let full = build_pseudo_corpus(&f.model, &f.pairs, &cfg(Strategy::Full, "sbleu")).unwrap();
    let mut i = 0;
    for p in &f.pairs {
        let mut rank = 1;
        while i < full.len() && full[i].src == p.src && full[i].beam_rank == rank {
            i += 1;
            rank += 1;
        }
        assert!(rank > 1 && rank <= 6);
    }
    assert_eq!(i, full.len());

    let top1 = build_pseudo_corpus(&f.model, &f.pairs, &cfg(Strategy::Top1, "sbleu")).unwrap();
    let comb = build_pseudo_corpus(&f.model, &f.pairs, &cfg(Strategy::Comb, "sbleu")).unwrap();
    assert_eq!(comb.len(), 2 * f.pairs.len());
    for ((pair, t), p) in comb.chunks(2).zip(&top1).zip(&f.pairs) {
        assert_eq!(pair[0].strategy, Strategy::Comb);
        assert_eq!((&pair[0].tgt, pair[0].beam_rank, pair[0].objective), (&t.tgt, t.beam_rank, t.objective));
        assert_eq!(pair[1].beam_rank, 0);
        assert_eq!(pair[1].tgt, p.tgt);
    }
}

#[test]
fn jsonl_round_trip() {
    let f = fixture();
    let records = build_pseudo_corpus(&f.model, &f.pairs, &cfg(Strategy::Comb, "neg-ter")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pseudo.jsonl");
    write_jsonl(&path, &records).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), records);
}

#[test]
fn actor_training_leaves_the_base_untouched() {
    let f = fixture();
    let records = build_pseudo_corpus(&f.model, &f.pairs, &cfg(Strategy::Top1, "sbleu")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let before_path = dir.path().join("before.ckpt");
    f.model.save(&before_path).unwrap();
    for kind in ActorKind::ALL {
        let mut actor = Actor::new(kind, 12, 8, 1).unwrap();
        let fresh = actor.to_bytes().unwrap();
        let srcs: Vec<Vec<usize>> = f.pairs.iter().take(5).map(|p| p.src.clone()).collect();
        let report = train_actor(
            &f.model,
            &mut actor,
            &records,
            &actor_train_config(2, 0),
            Some((&srcs, LengthLimit::default())),
        )
        .unwrap();
        assert_eq!(report.epoch_losses.len(), 2);
        assert_eq!(report.norms.len(), 3);
        assert_eq!(report.norms[0].action, 0.0);
        assert_ne!(actor.to_bytes().unwrap(), fresh, "{kind} did not move");
        let after_path = dir.path().join("after.ckpt");
        f.model.save(&after_path).unwrap();
        assert_eq!(std::fs::read(&before_path).unwrap(), std::fs::read(&after_path).unwrap());
    }
}
