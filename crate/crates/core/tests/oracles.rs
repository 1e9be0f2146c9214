//! Brute-force oracles for beam search, BLEU and TER.

mod support;

#[test]
fn beam_search_matches_enumeration_and_reference_beam() {
    support::check_beam_oracle(30).unwrap();
}

#[test]
fn corpus_bleu_matches_a_naive_recount() {
    support::check_bleu_oracle(50).unwrap();
}

#[test]
fn ter_matches_the_exhaustive_shift_oracle() {
    support::check_ter_oracle(400).unwrap();
}

#[test]
fn toy_enumeration_covers_every_finished_sequence() {
    // EOS after 0..3 free tokens, plus every length-4 sequence
    let all = support::enumerate(&support::Toy { seed: 0 });
    assert_eq!(all.len(), 1 + 2 + 4 + 3usize.pow(3) - 3);
    let total: f64 = all.iter().map(|(_, s)| s.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}
