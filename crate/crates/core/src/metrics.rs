//! BLEU, TER and word-level likelihood.
//!
//! Sentences are token-id slices with EOS already stripped. BLEU and TER
//! are reported in `[0, 1]`-style fractions; callers scale for display.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::actors::Actor;
use crate::error::{Error, Result};
use crate::seq2seq::Seq2SeqModel;

pub const MAX_N: usize = 4;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and total hypothesis n-grams for one order.
fn clipped(hyp: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, hyp.len().saturating_sub(n - 1))
}

/// Pooled statistics for corpus-level BLEU.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    pub fn add(&mut self, hyp: &[usize], reference: &[usize]) {
        for n in 1..=self.matches.len() {
            let (m, t) = clipped(hyp, reference, n);
            self.matches[n - 1] += m;
            self.totals[n - 1] += t;
        }
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    /// Unsmoothed BLEU; `None` when some precision is zero or undefined.
    pub fn bleu(&self) -> Option<f64> {
        let mut log_sum = 0.0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if m == 0 || t == 0 {
                return None;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        Some(self.brevity_penalty() * (log_sum / self.matches.len() as f64).exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub corpus_bleu: f64,
    pub brevity_penalty: f64,
    pub precisions: Vec<f64>,
    /// Corpus TER: total edits over total reference length.
    pub ter: f64,
    pub per_sentence: Vec<f64>,
}

/// Corpus BLEU with clipped n-gram precisions up to `max_n`. A zero
/// precision yields a score of 0 and a warning.
pub fn corpus_bleu_stats<H, R>(hyps: &[H], refs: &[R], max_n: usize) -> Result<(f64, BleuStats)>
where
    H: AsRef<[usize]>,
    R: AsRef<[usize]>,
{
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.is_empty() || max_n == 0 {
        return Err(Error::Contract("BLEU needs references and max_n >= 1".into()));
    }
    let mut stats = BleuStats::new(max_n);
    for (h, r) in hyps.iter().zip(refs) {
        stats.add(h.as_ref(), r.as_ref());
    }
    let score = stats.bleu().unwrap_or_else(|| {
        warn!("BLEU: an n-gram precision is zero, score defined as 0");
        0.0
    });
    Ok((score, stats))
}

pub fn corpus_bleu<H: AsRef<[usize]>, R: AsRef<[usize]>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    Ok(corpus_bleu_stats(hyps, refs, MAX_N)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// Add one to matches and totals for n ≥ 2.
    AddOne,
}

/// Sentence BLEU. With add-one smoothing a zero unigram match still gives 0.
pub fn sentence_bleu(hyp: &[usize], reference: &[usize], smoothing: Smoothing) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_N {
        let (mut m, mut t) = clipped(hyp, reference, n);
        if n >= 2 && smoothing == Smoothing::AddOne {
            m += 1;
            t += 1;
        }
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / MAX_N as f64).exp()
}

/// Token-level edit distance with unit costs.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Moves `seq[start..start + len]` so that it begins at `dest` in the
/// sequence left after removing it.
pub fn apply_shift(seq: &[usize], start: usize, len: usize, dest: usize) -> Vec<usize> {
    let block = &seq[start..start + len];
    let mut rest: Vec<usize> = seq[..start].iter().chain(&seq[start + len..]).copied().collect();
    rest.splice(dest..dest, block.iter().copied());
    rest
}

/// Edit count (insertions, deletions, substitutions and block shifts).
///
/// Shifts are chosen greedily: each round applies the single shift that
/// most reduces `1 + levenshtein`, scanning `(start, len, dest)` in
/// ascending order and keeping the first best; rounds stop when no shift
/// strictly helps.
pub fn ter_edits(hyp: &[usize], reference: &[usize]) -> usize {
    let mut cur = hyp.to_vec();
    let mut shifts = 0;
    let mut dist = levenshtein(&cur, reference);
    loop {
        let mut best: Option<(usize, Vec<usize>)> = None;
        let n = cur.len();
        for start in 0..n {
            for len in 1..=n - start {
                for dest in 0..=n - len {
                    if dest == start {
                        continue;
                    }
                    let cand = apply_shift(&cur, start, len, dest);
                    let d = levenshtein(&cand, reference);
                    if d + 1 < dist && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                        best = Some((d, cand));
                    }
                }
            }
        }
        match best {
            Some((d, cand)) => {
                cur = cand;
                dist = d;
                shifts += 1;
            }
            None => return shifts + dist,
        }
    }
}

/// Translation edit rate: edits over reference length.
pub fn ter(hyp: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 0.0 } else { f64::INFINITY };
    }
    ter_edits(hyp, reference) as f64 / reference.len() as f64
}

pub fn corpus_ter<H: AsRef<[usize]>, R: AsRef<[usize]>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    if hyps.len() != refs.len() || refs.is_empty() {
        return Err(Error::Contract("TER needs equal, non-empty hypothesis and reference lists".into()));
    }
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| ter_edits(h.as_ref(), r.as_ref())).sum();
    let len: usize = refs.iter().map(|r| r.as_ref().len()).sum();
    Ok(edits as f64 / len.max(1) as f64)
}

/// Sentence-level decoding objective; higher is better for every kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveFn {
    SentenceBleu { smoothing: Smoothing },
    NegTer,
}

impl Default for ObjectiveFn {
    fn default() -> Self {
        ObjectiveFn::SentenceBleu {
            smoothing: Smoothing::AddOne,
        }
    }
}

impl ObjectiveFn {
    pub fn score(&self, hyp: &[usize], reference: &[usize]) -> f64 {
        match self {
            ObjectiveFn::SentenceBleu { smoothing } => sentence_bleu(hyp, reference, *smoothing),
            ObjectiveFn::NegTer => -ter(hyp, reference),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveFn::SentenceBleu {
                smoothing: Smoothing::AddOne,
            } => "sbleu",
            ObjectiveFn::SentenceBleu {
                smoothing: Smoothing::None,
            } => "sbleu-raw",
            ObjectiveFn::NegTer => "neg-ter",
        }
    }
}

impl std::str::FromStr for ObjectiveFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbleu" => Ok(ObjectiveFn::SentenceBleu {
                smoothing: Smoothing::AddOne,
            }),
            "sbleu-raw" => Ok(ObjectiveFn::SentenceBleu {
                smoothing: Smoothing::None,
            }),
            "neg-ter" => Ok(ObjectiveFn::NegTer),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

/// Corpus BLEU, corpus TER and per-sentence objective values.
pub fn evaluate<H, R>(hyps: &[H], refs: &[R], objective: ObjectiveFn) -> Result<MetricReport>
where
    H: AsRef<[usize]>,
    R: AsRef<[usize]>,
{
    let (corpus_bleu, stats) = corpus_bleu_stats(hyps, refs, MAX_N)?;
    let precisions = stats
        .matches
        .iter()
        .zip(&stats.totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    Ok(MetricReport {
        corpus_bleu,
        brevity_penalty: stats.brevity_penalty(),
        precisions,
        ter: corpus_ter(hyps, refs)?,
        per_sentence: hyps
            .iter()
            .zip(refs)
            .map(|(h, r)| objective.score(h.as_ref(), r.as_ref()))
            .collect(),
    })
}

/// Mean per-token probability of `tgt` under teacher forcing.
pub fn word_likelihood(model: &Seq2SeqModel, actor: Option<&Actor>, src: &[usize], tgt: &[usize]) -> Result<f64> {
    let lps = model.token_logprobs(src, tgt, actor)?;
    Ok(lps.iter().map(|v| v.exp()).sum::<f64>() / lps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_basics() {
        let refs = vec![vec![4, 5, 6, 7, 8]];
        assert_eq!(corpus_bleu(&refs, &refs).unwrap(), 1.0);
        assert_eq!(corpus_bleu(&[vec![9, 9]], &refs).unwrap(), 0.0);
        assert!(corpus_bleu(&refs, &[refs[0].clone(), refs[0].clone()]).is_err());
    }

    #[test]
    fn clipped_unigram_precision() {
        // "the the the the the the the" vs "the cat is on the mat"
        let hyp = [1usize; 7];
        let reference = [1, 2, 3, 4, 1, 5];
        assert_eq!(clipped(&hyp, &reference, 1), (2, 7));
    }

    #[test]
    fn sentence_bleu_cases() {
        let r = [4, 5, 6, 7];
        assert_eq!(sentence_bleu(&r, &r, Smoothing::AddOne), 1.0);
        assert_eq!(sentence_bleu(&[9, 10], &r, Smoothing::AddOne), 0.0);
        assert_eq!(sentence_bleu(&[], &r, Smoothing::AddOne), 0.0);
        let partial = sentence_bleu(&[4, 5], &r, Smoothing::AddOne);
        assert!(partial > 0.0 && partial < 1.0);
        assert_eq!(sentence_bleu(&[4, 5], &r, Smoothing::None), 0.0);
    }

    #[test]
    fn ter_cases() {
        assert_eq!(ter(&[4, 5, 6], &[4, 5, 6]), 0.0);
        assert_eq!(ter(&[4, 5], &[5, 4]), 0.5);
        assert_eq!(ter(&[], &[4, 5]), 1.0);
        assert_eq!(ter(&[4, 5, 6, 7], &[4, 5]), 1.0);
    }

    #[test]
    fn shift_moves_block() {
        assert_eq!(apply_shift(&[1, 2, 3, 4], 0, 2, 2), vec![3, 4, 1, 2]);
        assert_eq!(apply_shift(&[1, 2, 3, 4], 3, 1, 0), vec![4, 1, 2, 3]);
    }

    #[test]
    fn objectives_orientation() {
        let r = [4, 5, 6];
        for o in [ObjectiveFn::default(), ObjectiveFn::NegTer] {
            assert!(o.score(&r, &r) >= o.score(&[4, 6], &r));
            assert_eq!(o.name().parse::<ObjectiveFn>().unwrap(), o);
        }
    }

    #[test]
    fn report_fields_in_range() {
        let hyps = vec![vec![4, 5, 6], vec![7, 8]];
        let refs = vec![vec![4, 5, 6, 9], vec![7, 8]];
        let rep = evaluate(&hyps, &refs, ObjectiveFn::default()).unwrap();
        assert!((0.0..=1.0).contains(&rep.corpus_bleu));
        assert!(rep.brevity_penalty <= 1.0 && rep.brevity_penalty > 0.0);
        assert_eq!(rep.per_sentence.len(), 2);
        assert!((rep.ter - 1.0 / 6.0).abs() < 1e-12);
    }
}
