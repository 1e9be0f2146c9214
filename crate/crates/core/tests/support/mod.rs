//! Oracles and checks shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgdecode::decoding::{beam_search, greedy_search, Scored, StepScorer};
use tgdecode::metrics::{corpus_bleu_stats, ter_edits, MAX_N};
use tgdecode::actors::{Actor, ActorKind};
use tgdecode::distill::actor_grads;
use tgdecode::numkit::Tensor;
use tgdecode::seq2seq::{model_grads, nll_loss, ModelDims, Seq2SeqModel};
use tgdecode::textio::{SentencePair, EOS};
use tgdecode::Result;

/// Toy autoregressive model over {0, 1, 2} with EOS = 2. Each prefix gets
/// its own pseudo-random next-token distribution.
pub struct Toy {
    pub seed: u64,
}

impl Toy {
    fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let key = prefix.iter().fold(self.seed.wrapping_mul(31) + 7, |h, &t| h * 4 + t as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - z).collect()
    }
}

/// Scorer whose state is the prefix emitted so far.
pub struct Growing(pub Toy);

impl StepScorer for Growing {
    type State = Vec<usize>;

    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, prefix: &Vec<usize>, prev: usize, t: usize) -> Result<Scored<Vec<usize>>> {
        let mut p = prefix.clone();
        if t > 1 {
            p.push(prev);
        }
        let lp = self.0.log_probs(&p);
        Ok(Scored {
            log_probs: lp,
            state: p,
            trace: None,
        })
    }

    fn start_token(&self) -> usize {
        0
    }

    fn eos(&self) -> usize {
        2
    }

    fn allowed(&self, _id: usize) -> bool {
        true
    }
}

pub const MAX_LEN: usize = 4;

/// Every finished sequence with its exact score.
pub fn enumerate(toy: &Toy) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let lp = toy.log_probs(&prefix);
        for tok in 0..3 {
            let mut seq: Vec<usize> = prefix.clone();
            seq.push(tok);
            let s = score + lp[tok];
            if tok == 2 || seq.len() == MAX_LEN {
                out.push((seq, s));
            } else {
                stack.push((seq, s));
            }
        }
    }
    out
}

/// Straightforward level-by-level beam: expand every live prefix, rank the
/// children, fill the completed pool and the next beam in rank order.
pub fn reference_beam(toy: &Toy, k: usize) -> Vec<(Vec<usize>, f64)> {
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
    for t in 1..=MAX_LEN {
        // (total, parent, local, token)
        let mut children = Vec::new();
        for (rank, (prefix, score)) in live.iter().enumerate() {
            let lp = toy.log_probs(prefix);
            for tok in 0..3 {
                children.push((score + lp[tok], rank, lp[tok], tok));
            }
        }
        children.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(b.2.partial_cmp(&a.2).unwrap())
                .then(a.3.cmp(&b.3))
        });
        let mut next = Vec::new();
        for (total, parent, _, tok) in children {
            if next.len() == k || done.len() == k {
                break;
            }
            let mut seq = live[parent].0.clone();
            seq.push(tok);
            if tok == 2 || t == MAX_LEN {
                done.push((seq, total));
            } else {
                next.push((seq, total));
            }
        }
        if done.len() >= k || next.is_empty() {
            break;
        }
        live = next;
    }
    done.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    done
}




/// Occurrences of `gram` in `seq`, by direct scan.
pub fn occurrences(seq: &[usize], gram: &[usize]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len()).filter(|&i| &seq[i..i + gram.len()] == gram).count()
}

pub fn naive_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>, f64) {
    let mut matches = vec![0; MAX_N];
    let mut totals = vec![0; MAX_N];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_N {
            if h.len() < n {
                continue;
            }
            totals[n - 1] += h.len() - n + 1;
            let mut seen: Vec<&[usize]> = Vec::new();
            for i in 0..=h.len() - n {
                let g = &h[i..i + n];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                matches[n - 1] += occurrences(h, g).min(occurrences(rf, g));
            }
        }
    }
    if matches.contains(&0) {
        return (matches, totals, 0.0);
    }
    let mut logp = 0.0;
    for n in 0..MAX_N {
        logp += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    (matches, totals, bp * (logp / MAX_N as f64).exp())
}


fn lev_memo(a: &[usize], b: &[usize], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(&d) = memo.get(&(a.len(), b.len())) {
        return d;
    }
    let sub = lev_memo(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
    let del = lev_memo(&a[1..], b, memo) + 1;
    let ins = lev_memo(a, &b[1..], memo) + 1;
    let d = sub.min(del).min(ins);
    memo.insert((a.len(), b.len()), d);
    d
}

pub fn lev(a: &[usize], b: &[usize]) -> usize {
    lev_memo(a, b, &mut HashMap::new())
}

/// Every sequence reachable by one block move, in (start, len, dest) order.
pub fn all_shifts(seq: &[usize]) -> Vec<Vec<usize>> {
    let n = seq.len();
    let mut out = Vec::new();
    for start in 0..n {
        for len in 1..=n - start {
            for dest in 0..=n - len {
                if dest == start {
                    continue;
                }
                let mut v = seq.to_vec();
                let block: Vec<usize> = v.drain(start..start + len).collect();
                for (j, x) in block.into_iter().enumerate() {
                    v.insert(dest + j, x);
                }
                out.push(v);
            }
        }
    }
    out
}

/// The greedy best-shift loop, evaluated by trying every shift.
pub fn greedy_shift_oracle(hyp: &[usize], reference: &[usize]) -> usize {
    let mut cur = hyp.to_vec();
    let mut shifts = 0;
    loop {
        let base = lev(&cur, reference);
        let mut best_gain = 1;
        let mut best = None;
        for cand in all_shifts(&cur) {
            let gain = base as isize - lev(&cand, reference) as isize;
            if gain > best_gain {
                best_gain = gain;
                best = Some(cand);
            }
        }
        match best {
            Some(c) => {
                cur = c;
                shifts += 1;
            }
            None => return shifts + base,
        }
    }
}

/// Minimum of shifts + Levenshtein over every reachable arrangement.
pub fn optimal_shift_edits(hyp: &[usize], reference: &[usize]) -> usize {
    let mut seen = HashSet::new();
    let mut queue = VecDeque::from([(hyp.to_vec(), 0usize)]);
    seen.insert(hyp.to_vec());
    let mut best = usize::MAX;
    while let Some((seq, depth)) = queue.pop_front() {
        best = best.min(depth + lev(&seq, reference));
        if depth + 1 >= best {
            continue;
        }
        for next in all_shifts(&seq) {
            if seen.insert(next.clone()) {
                queue.push_back((next, depth + 1));
            }
        }
    }
    best
}


fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Beam search against full enumeration (k large enough to keep every
/// prefix) and against the reference beam for k = 1..=10.
pub fn check_beam_oracle(seeds: u64) -> std::result::Result<(), String> {
    for seed in 0..seeds {
        let mut all = enumerate(&Toy { seed });
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let out = beam_search(&Growing(Toy { seed }), all.len(), MAX_LEN, false).map_err(|e| e.to_string())?;
        ensure(out.kbest.len() == all.len(), || format!("seed {seed}: {} of {} sequences", out.kbest.len(), all.len()))?;
        for (r, (seq, score)) in out.kbest.iter().zip(&all) {
            ensure(&r.tokens == seq && (r.logprob - score).abs() < 1e-12, || {
                format!("seed {seed}: got {:?} ({}) expected {seq:?} ({score})", r.tokens, r.logprob)
            })?;
        }
        let exact: HashMap<Vec<usize>, f64> = all.into_iter().collect();
        let best_possible = exact.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        for k in 1..=10 {
            let out = beam_search(&Growing(Toy { seed }), k, MAX_LEN, false).map_err(|e| e.to_string())?;
            let want: Vec<Vec<usize>> = reference_beam(&Toy { seed }, k).into_iter().map(|(s, _)| s).collect();
            let got: Vec<Vec<usize>> = out.kbest.iter().map(|r| r.tokens.clone()).collect();
            ensure(got == want, || format!("seed {seed} k {k}: {got:?} vs {want:?}"))?;
            for r in &out.kbest {
                ensure((r.logprob - exact[&r.tokens]).abs() < 1e-12, || format!("seed {seed} k {k}: score drift"))?;
            }
            ensure(out.best().logprob <= best_possible + 1e-12, || "beam beat exhaustive search".into())?;
        }
        let s = Growing(Toy { seed });
        let g = greedy_search(&s, MAX_LEN).map_err(|e| e.to_string())?;
        let b = beam_search(&s, 1, MAX_LEN, false).map_err(|e| e.to_string())?.into_best();
        ensure(g.tokens == b.tokens && g.logprob.to_bits() == b.logprob.to_bits(), || {
            format!("seed {seed}: k=1 differs from greedy")
        })?;
    }
    Ok(())
}

/// Corpus BLEU statistics and score against [`naive_bleu`] on random corpora.
pub fn check_bleu_oracle(corpora: usize) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for corpus in 0..corpora {
        let n_sent = rng.random_range(1..8);
        let vocab = rng.random_range(2..6);
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..n_sent {
            let rl = rng.random_range(1..12);
            let rf: Vec<usize> = (0..rl).map(|_| rng.random_range(0..vocab)).collect();
            let hl = rng.random_range(1..12);
            // mostly copies of the reference so high orders match
            let h: Vec<usize> = (0..hl)
                .map(|i| {
                    if i < rl && rng.random_bool(0.8) {
                        rf[i]
                    } else {
                        rng.random_range(0..vocab)
                    }
                })
                .collect();
            hyps.push(h);
            refs.push(rf);
        }
        let (score, stats) = corpus_bleu_stats(&hyps, &refs, MAX_N).map_err(|e| e.to_string())?;
        let (m, t, naive) = naive_bleu(&hyps, &refs);
        ensure(stats.matches == m && stats.totals == t, || format!("corpus {corpus}: counts differ"))?;
        ensure(score == naive, || format!("corpus {corpus}: {score} vs {naive}"))?;
    }
    Ok(())
}

/// TER edits against the brute-force greedy shift loop for lengths ≤ 6,
/// bounded by the optimal shift sequence and by plain Levenshtein.
pub fn check_ter_oracle(cases: usize) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..cases {
        let hl = rng.random_range(0..=6);
        let rl = rng.random_range(1..=6);
        let vocab = rng.random_range(2..5);
        let reference: Vec<usize> = (0..rl).map(|_| rng.random_range(0..vocab)).collect();
        let hyp: Vec<usize> = if case % 2 == 0 {
            // shuffled reference gives shift-heavy cases
            let mut h = reference.clone();
            for i in (1..h.len()).rev() {
                h.swap(i, rng.random_range(0..=i));
            }
            h.truncate(hl.max(1));
            h
        } else {
            (0..hl).map(|_| rng.random_range(0..vocab)).collect()
        };
        let got = ter_edits(&hyp, &reference);
        let want = greedy_shift_oracle(&hyp, &reference);
        ensure(got == want, || format!("{hyp:?} vs {reference:?}: {got} edits, oracle {want}"))?;
        ensure(got >= optimal_shift_edits(&hyp, &reference), || "beat the optimum".into())?;
        ensure(got <= lev(&hyp, &reference), || "shifts made it worse".into())?;
    }
    Ok(())
}

const FD_STEP: f64 = 1e-5;

fn micro_dims(n_layers: usize) -> ModelDims {
    ModelDims {
        src_vocab: 8,
        tgt_vocab: 7,
        d_emb: 5,
        d_h: 6,
        n_layers,
    }
}

/// Two pairs of different lengths (T ≤ 3) so padding is exercised.
fn micro_pairs() -> Vec<SentencePair> {
    vec![
        SentencePair {
            src: vec![4, 7, 5],
            tgt: vec![6, 4, EOS],
        },
        SentencePair {
            src: vec![5, 6],
            tgt: vec![5, EOS],
        },
    ]
}

/// Worst relative error over every gradient entry.
fn worst_error(grads: &[Tensor], mut loss_with: impl FnMut(usize, usize, f64) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.numel() {
            let fd = (loss_with(pi, j, FD_STEP) - loss_with(pi, j, -FD_STEP)) / (2.0 * FD_STEP);
            let an = g.data()[j];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}

/// Worst relative finite-difference error of the actor gradients, per kind.
/// Weights are randomized first since a fresh actor's output map is zero.
pub fn actor_gradient_errors() -> std::result::Result<Vec<(ActorKind, f64)>, String> {
    let model = Seq2SeqModel::new(micro_dims(2), 3).map_err(|e| e.to_string())?;
    let pairs = micro_pairs();
    let (srcs, tgts): (Vec<&[usize]>, Vec<&[usize]>) =
        pairs.iter().map(|p| (p.src.as_slice(), p.tgt.as_slice())).unzip();
    let mut out = Vec::new();
    for (i, kind) in ActorKind::ALL.into_iter().enumerate() {
        let mut actor = Actor::new(kind, 6, 4, 10 + i as u64).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(10 + i as u64);
        for p in actor.params.values_mut() {
            for x in p.data_mut() {
                *x = rng.random_range(-0.5..0.5);
            }
        }
        let (loss, grads) = actor_grads(&model, &actor, &srcs, &tgts).map_err(|e| e.to_string())?;
        let direct = nll_loss(&model, &pairs, Some(&actor)).map_err(|e| e.to_string())?;
        ensure((loss - direct).abs() < 1e-12, || format!("{kind}: batch loss {loss} vs {direct}"))?;
        ensure(grads.iter().any(|g| g.data().iter().any(|&x| x != 0.0)), || format!("{kind}: all-zero gradient"))?;
        let worst = worst_error(&grads, |pi, j, delta| {
            let mut a = actor.clone();
            a.params.values_mut()[pi].data_mut()[j] += delta;
            nll_loss(&model, &pairs, Some(&a)).unwrap()
        });
        out.push((kind, worst));
    }
    Ok(out)
}

/// Worst relative finite-difference error over every base-model parameter.
pub fn base_gradient_error(n_layers: usize) -> std::result::Result<f64, String> {
    let model = Seq2SeqModel::new(micro_dims(n_layers), 5).map_err(|e| e.to_string())?;
    let pairs = micro_pairs();
    let (srcs, tgts): (Vec<&[usize]>, Vec<&[usize]>) =
        pairs.iter().map(|p| (p.src.as_slice(), p.tgt.as_slice())).unzip();
    let (loss, grads) = model_grads(&model, &srcs, &tgts).map_err(|e| e.to_string())?;
    let direct = nll_loss(&model, &pairs, None).map_err(|e| e.to_string())?;
    ensure((loss - direct).abs() < 1e-12, || format!("batch loss {loss} vs {direct}"))?;
    Ok(worst_error(&grads, |pi, j, delta| {
        let mut m = model.clone();
        m.params.values_mut()[pi].data_mut()[j] += delta;
        nll_loss(&m, &pairs, None).unwrap()
    }))
}
