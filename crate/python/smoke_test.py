"""Smoke test for the tgdecode_py extension module.

Build and install it first, e.g. `maturin build --release -m
crates/python/Cargo.toml` followed by `pip install` of the wheel.
"""

import tgdecode_py as tg

EOS = 2


def strip(tokens):
    return tokens[:-1] if tokens and tokens[-1] == EOS else tokens


def main():
    pairs = tg.gen_synthetic(n_pairs=120, vocab_size=12, len_min=3, len_max=6, seed=0)
    assert len(pairs) == 120
    n_vocab = 12 + 4
    model = tg.Model(n_vocab, n_vocab, d_emb=16, d_h=16, seed=0)
    losses = model.train(pairs[:100], epochs=3, lr=5e-3, seed=0)
    assert len(losses) == 3 and losses[-1] < losses[0], losses

    src = pairs[100][0]
    greedy, lp = model.greedy(src)
    kbest = model.beam(src, k=1)
    assert kbest[0][0] == greedy and abs(kbest[0][1] - lp) < 1e-12
    assert abs(model.sequence_logprob(src, greedy) - lp) < 1e-8

    actor = tg.Actor("gate", d_h=16, seed=0)
    assert model.greedy(src, actor=actor)[0] == greedy

    before = model.param_hash()
    pseudo = tg.distill_corpus(model, pairs[:50], beam_k=4)
    actor.train(model, pseudo, epochs=1)
    assert model.param_hash() == before

    hyps = [strip(model.greedy(s)[0]) for s, _ in pairs[100:]]
    refs = [strip(t) for _, t in pairs[100:]]
    bleu = tg.corpus_bleu(hyps, refs)
    assert 0.0 <= bleu <= 1.0
    assert tg.ter([5, 6], [6, 5]) == 0.5
    assert tg.sentence_bleu(refs[0], refs[0]) == 1.0
    print(f"ok: {model!r}, {actor!r}, bleu={bleu:.3f}")


if __name__ == "__main__":
    main()
