//! ROUGE-N and ROUGE-L with precision, recall and F1.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::tokenizer::Vocabulary;

#[derive(Debug, Error, PartialEq)]
pub enum RougeError {
    #[error("no candidate/reference pairs to score")]
    Empty,
    #[error("subword evaluation requires a vocabulary")]
    MissingVocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }

    fn from_counts(overlap: usize, cand_total: usize, ref_total: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self::from_pr(ratio(overlap, cand_total), ratio(overlap, ref_total))
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_default() += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap: `Σ_g min(cand(g), ref(g))`.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |len: usize| if n == 0 { 0 } else { (len + 1).saturating_sub(n) };
    RougeScore::from_counts(overlap, total(candidate.len()), total(reference.len()))
}

/// Longest common subsequence length, `O(|a| |b|)` time and `O(|b|)` space.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_length(candidate, reference), candidate.len(), reference.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalTokenMode {
    #[default]
    WhitespaceWords,
    SubwordIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct EvalTokenization {
    pub mode: EvalTokenMode,
    #[serde(default)]
    pub lowercase: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusRouge {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairRouge {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

fn eval_tokens(text: &str, tok: &EvalTokenization, vocab: Option<&Vocabulary>) -> Result<Vec<String>, RougeError> {
    let nfc: String = text.nfc().collect();
    let text = if tok.lowercase { nfc.to_lowercase() } else { nfc };
    match tok.mode {
        EvalTokenMode::WhitespaceWords => Ok(text.split_whitespace().map(str::to_string).collect()),
        EvalTokenMode::SubwordIds => {
            let vocab = vocab.ok_or(RougeError::MissingVocabulary)?;
            Ok(vocab.encode(&text, false).ids.iter().map(u32::to_string).collect())
        }
    }
}

pub fn score_pair(candidate: &str, reference: &str, tok: &EvalTokenization, vocab: Option<&Vocabulary>) -> Result<PairRouge, RougeError> {
    let c = eval_tokens(candidate, tok, vocab)?;
    let r = eval_tokens(reference, tok, vocab)?;
    Ok(PairRouge {
        rouge1: rouge_n(&c, &r, 1),
        rouge2: rouge_n(&c, &r, 2),
        rouge_l: rouge_l(&c, &r),
    })
}

fn mean(scores: impl Iterator<Item = RougeScore>, n: usize) -> RougeScore {
    let (p, r, f) = scores.fold((0.0, 0.0, 0.0), |(p, r, f), s| (p + s.precision, r + s.recall, f + s.f1));
    RougeScore {
        precision: p / n as f64,
        recall: r / n as f64,
        f1: f / n as f64,
    }
}

/// Per-pair scores and their unweighted means (of precision, recall and F1 separately).
pub fn corpus_rouge_detailed<C, R>(
    pairs: &[(C, R)],
    tok: &EvalTokenization,
    vocab: Option<&Vocabulary>,
) -> Result<(Vec<PairRouge>, CorpusRouge), RougeError>
where
    C: AsRef<str>,
    R: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(RougeError::Empty);
    }
    let per = pairs
        .iter()
        .map(|(c, r)| score_pair(c.as_ref(), r.as_ref(), tok, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let n = per.len();
    let agg = CorpusRouge {
        rouge1: mean(per.iter().map(|s| s.rouge1), n),
        rouge2: mean(per.iter().map(|s| s.rouge2), n),
        rouge_l: mean(per.iter().map(|s| s.rouge_l), n),
    };
    Ok((per, agg))
}

pub fn corpus_rouge<C, R>(pairs: &[(C, R)], tok: &EvalTokenization, vocab: Option<&Vocabulary>) -> Result<CorpusRouge, RougeError>
where
    C: AsRef<str>,
    R: AsRef<str>,
{
    corpus_rouge_detailed(pairs, tok, vocab).map(|(_, agg)| agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn unigram_fixture() {
        let s = rouge_n(&toks("the cat sat"), &toks("the cat"), 1);
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.precision, 2.0 / 3.0);
        assert!((s.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn bigram_fixture() {
        let s = rouge_n(&toks("the cat sat on"), &toks("the cat sat"), 2);
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.precision, 2.0 / 3.0);
        assert!((s.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identity_and_disjoint() {
        let x = toks("a b c d");
        for n in 1..=4 {
            let s = rouge_n(&x, &x, n);
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        let s = rouge_n(&toks("a b"), &toks("c d"), 1);
        assert_eq!(s, RougeScore::default());
        assert_eq!(rouge_n::<&str>(&[], &x, 1), RougeScore::default());
        assert_eq!(rouge_n(&toks("a"), &toks("a"), 2), RougeScore::default());
    }

    #[test]
    fn lcs_fixtures() {
        let a = ["a", "b", "c", "d"];
        assert_eq!(lcs_length(&a, &a), 4);
        assert_eq!(lcs_length(&a, &["a", "c", "d", "b"]), 3);
        assert_eq!(lcs_length::<&str>(&[], &a), 0);
        assert_eq!(lcs_length::<&str>(&a, &[]), 0);
    }

    #[test]
    fn rouge_l_fixtures() {
        let s = rouge_l(&["a", "b", "c", "d"], &["a", "c", "d", "b"]);
        assert_eq!((s.precision, s.recall), (0.75, 0.75));
        assert!((s.f1 - 0.75).abs() < 1e-12);
        let s = rouge_l(&["x", "y", "z", "w"], &["x", "y", "z", "w"]);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = rouge_l(&["a", "b", "c", "d"], &["e", "f", "a", "g"]);
        assert_eq!((s.precision, s.recall), (0.25, 0.25));
        assert_eq!(rouge_l::<u32>(&[], &[]), RougeScore::default());
    }

    #[test]
    fn corpus_means() {
        let tok = EvalTokenization::default();
        let single = [("the cat sat", "the cat")];
        let one = corpus_rouge(&single, &tok, None).unwrap();
        let pair = score_pair("the cat sat", "the cat", &tok, None).unwrap();
        assert_eq!(one.rouge1, pair.rouge1);
        assert_eq!(one.rouge_l, pair.rouge_l);

        let list = [("a b c", "a c"), ("x y", "y x z")];
        let doubled: Vec<_> = list.iter().chain(list.iter()).cloned().collect();
        let a = corpus_rouge(&list, &tok, None).unwrap();
        let b = corpus_rouge(&doubled, &tok, None).unwrap();
        for (x, y) in [(a.rouge1, b.rouge1), (a.rouge2, b.rouge2), (a.rouge_l, b.rouge_l)] {
            assert!((x.f1 - y.f1).abs() < 1e-15);
        }
        assert_eq!(corpus_rouge::<&str, &str>(&[], &tok, None), Err(RougeError::Empty));
    }

    #[test]
    fn subword_mode_needs_vocab_and_lowercase_applies() {
        let tok = EvalTokenization {
            mode: EvalTokenMode::SubwordIds,
            lowercase: false,
        };
        assert_eq!(score_pair("a", "a", &tok, None), Err(RougeError::MissingVocabulary));
        let lower = EvalTokenization {
            mode: EvalTokenMode::WhitespaceWords,
            lowercase: true,
        };
        let s = score_pair("The Cat", "the cat", &lower, None).unwrap();
        assert_eq!(s.rouge1.f1, 1.0);
    }
}
