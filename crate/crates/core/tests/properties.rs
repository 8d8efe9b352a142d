//! Property tests for the invariants of each module.

mod common;

use std::collections::HashSet;

use proptest::prelude::*;

use common::*;
use warmsum::corpus::{compute_stats, CorpusError, parse_jsonl, split, split_sizes, to_jsonl, CorpusExample, SplitRatios};
use warmsum::decoding::{beam_search, BeamConfig, DecodeSpecials, ModelScorer, TableScorer};
use warmsum::model::ModelKind;
use warmsum::rng::SplitMix64;
use warmsum::rouge::{lcs_length, rouge_l, rouge_n, RougeScore};
use warmsum::tensor::{Tape, Tensor};
use warmsum::tokenizer::{normalize, train_bpe, TokenizerOptions, Vocabulary, PAD, UNK, WORD_MARKER};

const LETTERS: &[&str] = &["a", "ă", "â", "b", "c", "đ", "ê", "g", "h", "i", "n", "ô", "ơ", "t", "ư", "ng", "nh"];

fn word() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(LETTERS), 1..6).prop_map(|p| p.concat())
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..8).prop_map(|w| w.join(" "))
}

fn trained_vocab(extra: &[String]) -> Vocabulary {
    let mut corpus: Vec<String> = vec![LETTERS.join(" ")];
    corpus.extend(extra.iter().cloned());
    train_bpe(&corpus, 60, TokenizerOptions::default()).unwrap()
}

fn tensor(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    // ---- tensor ----

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..7, scale in 0.1f64..20.0) {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(rows, cols, seed, scale));
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.data(y).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..9) {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(rows, cols, seed, 3.0));
        let g = tape.constant(Tensor::full(&[cols], 1.0));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.data(y).chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient(seed in any::<u64>(), cols in 1usize..8) {
        let mut tape = Tape::new();
        let x = tape.param(&tensor(2, cols, seed, 2.0));
        let y = tape.softmax(x, 1).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        prop_assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn shared_input_accumulates_both_paths(seed in any::<u64>()) {
        // loss = sum(x * x + 3x), so dloss/dx = 2x + 3
        let x0 = tensor(2, 3, seed, 1.0);
        let mut tape = Tape::new();
        let x = tape.param(&x0);
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let s = tape.add(sq, lin).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        for (g, v) in tape.grad(x).unwrap().iter().zip(x0.data()) {
            prop_assert!((g - (2.0 * v + 3.0)).abs() < 1e-12);
        }
    }

    // ---- tokenizer ----

    #[test]
    fn encode_decode_round_trip(texts in prop::collection::vec(sentence(), 1..6)) {
        let vocab = trained_vocab(&texts);
        for t in &texts {
            let ids = vocab.encode(t, true).ids;
            prop_assert!(!ids.contains(&UNK));
            prop_assert_eq!(vocab.decode(&ids).unwrap(), normalize(t, vocab.options()));
        }
    }

    #[test]
    fn out_of_alphabet_symbol_becomes_unk(a in sentence(), b in sentence()) {
        let vocab = trained_vocab(&[a.clone(), b.clone()]);
        let text = format!("{a} ☃ {b}");
        let ids = vocab.encode(&text, false).ids;
        prop_assert!(ids.contains(&UNK));
        let decoded = vocab.decode(&ids).unwrap();
        let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        prop_assert_eq!(words(&decoded), words(&format!("{a} {b}")));
    }

    #[test]
    fn encoding_is_prefix_stable(a in sentence(), b in word()) {
        let vocab = trained_vocab(&[a.clone(), b.clone()]);
        let short = vocab.encode(&a, false).ids;
        let long = vocab.encode(&format!("{a} {b}"), false).ids;
        prop_assert_eq!(&long[..short.len()], &short[..]);
    }

    // ---- rouge ----

    #[test]
    fn rouge_identity(x in prop::collection::vec(0u8..6, 1..12), n in 1usize..4) {
        prop_assume!(n <= x.len());
        prop_assert_eq!(rouge_n(&x, &x, n).f1, 1.0);
        prop_assert_eq!(rouge_l(&x, &x).f1, 1.0);
    }

    #[test]
    fn rouge_swap_duality(a in prop::collection::vec(0u8..5, 0..12), b in prop::collection::vec(0u8..5, 0..12), n in 1usize..4) {
        let ab = rouge_n(&a, &b, n);
        let ba = rouge_n(&b, &a, n);
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert_eq!(ab.recall, ba.precision);
        let l_ab = rouge_l(&a, &b);
        prop_assert_eq!(l_ab.precision, rouge_l(&b, &a).recall);
    }

    #[test]
    fn f1_is_harmonic_mean(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        let s = RougeScore::from_pr(p, r);
        if p + r == 0.0 {
            prop_assert_eq!(s.f1, 0.0);
        } else {
            prop_assert!((s.f1 - 2.0 * p * r / (p + r)).abs() <= 1e-12);
        }
    }

    #[test]
    fn lcs_symmetric_and_bounded(a in prop::collection::vec(0u8..4, 0..15), b in prop::collection::vec(0u8..4, 0..15)) {
        let l = lcs_length(&a, &b);
        prop_assert_eq!(l, lcs_length(&b, &a));
        prop_assert!(l <= a.len().min(b.len()));
    }

    #[test]
    fn appending_novel_token_adds_one(a in prop::collection::vec(0u8..4, 0..15), b in prop::collection::vec(0u8..4, 0..15)) {
        let before = lcs_length(&a, &b);
        let (mut a2, mut b2) = (a.clone(), b.clone());
        a2.push(9);
        b2.push(9);
        prop_assert_eq!(lcs_length(&a2, &b2), before + 1);
    }

    // ---- corpus ----

    #[test]
    fn splits_partition_the_corpus(n in 0usize..120, seed in any::<u64>(), train in 0.0f64..1.0, dev_share in 0.0f64..1.0) {
        let dev = (1.0 - train) * dev_share;
        let ratios = SplitRatios { train, dev, test: 1.0 - train - dev };
        let examples: Vec<CorpusExample> = (0..n)
            .map(|i| CorpusExample { id: format!("e{i}"), body: format!("b {i}"), summary: "s".into() })
            .collect();
        let (nt, nd, ne) = match split_sizes(n, &ratios) {
            Ok(sizes) => sizes,
            // a positive ratio that rounds to an empty split is refused
            Err(CorpusError::EmptySplit(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let s = split(&examples, &ratios, seed).unwrap();
        prop_assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (nt, nd, ne));
        let ids: HashSet<&str> = s.iter_all().map(|e| e.id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
        prop_assert_eq!(split(&examples, &ratios, seed).unwrap(), s);
    }

    #[test]
    fn stats_are_order_invariant(bodies in prop::collection::vec(sentence(), 10..40), seed in any::<u64>()) {
        let examples: Vec<CorpusExample> = bodies
            .iter()
            .enumerate()
            .map(|(i, b)| CorpusExample { id: format!("e{i}"), body: format!("x {b}"), summary: format!("y {i}") })
            .collect();
        let mut shuffled = examples.clone();
        SplitMix64::new(seed).shuffle(&mut shuffled);
        let ratios = SplitRatios::default();
        let a = compute_stats(&split(&examples, &ratios, 0).unwrap());
        let b = compute_stats(&split(&shuffled, &ratios, 0).unwrap());
        prop_assert_eq!((a.train, a.dev, a.test), (b.train, b.dev, b.test));
        prop_assert!((a.avg_body_words - b.avg_body_words).abs() < 1e-12);
        prop_assert!((a.avg_abstract_words - b.avg_abstract_words).abs() < 1e-12);
        prop_assert!(a.avg_body_words >= 0.0 && a.avg_abstract_words >= 0.0);
    }

    #[test]
    fn jsonl_round_trip(texts in prop::collection::vec((sentence(), sentence()), 1..10)) {
        let examples: Vec<CorpusExample> = texts
            .iter()
            .enumerate()
            .map(|(i, (b, s))| CorpusExample { id: format!("id\"{i}"), body: format!("{b} .\tx"), summary: format!("{s} y") })
            .collect();
        let once = parse_jsonl(to_jsonl(&examples).as_bytes()).unwrap();
        prop_assert_eq!(&once, &examples);
        prop_assert_eq!(parse_jsonl(to_jsonl(&once).as_bytes()).unwrap(), once);
    }

    // ---- decoding ----

    #[test]
    fn beam_outputs_are_well_formed(seed in any::<u64>(), beam in 1usize..5, max_len in 1usize..6, alpha in 0.0f64..2.0) {
        let mut rng = SplitMix64::new(seed);
        let config = tiny_config();
        let model = rough_model(&config, ModelKind::Seq2Seq, &mut rng);
        let src = &random_rows(1, 1, 5, config.vocab_size, &mut rng)[0];
        let scorer = ModelScorer::new(&model, src).unwrap();
        let sp = DecodeSpecials::default();
        let h = beam_search(&scorer, &sp, &BeamConfig { beam_size: beam, max_len, alpha, no_repeat_ngram: None }).unwrap();
        prop_assert_eq!(h.ids[0], sp.bos);
        prop_assert!(!h.ids.contains(&PAD));
        prop_assert!(h.generated_len() <= max_len);
        prop_assert!(*h.ids.last().unwrap() == sp.eos || h.generated_len() == max_len);
        let rescored = scorer.sequence_log_prob(&h.ids).unwrap();
        prop_assert!((rescored - h.log_prob).abs() <= 1e-8, "rescored {} vs {}", rescored, h.log_prob);
    }

    #[test]
    fn exact_beam_dominates_narrow_beams(seed in any::<u64>(), beam in 1usize..8, alpha in 0.0f64..2.0) {
        // widening to an exhaustive beam never lowers the returned score
        let mut rng = SplitMix64::new(seed);
        let scorer = TableScorer::random(5, 5, &mut rng);
        let sp = DecodeSpecials { bos: 2, eos: 3, banned: vec![] };
        let run = |b| beam_search(&scorer, &sp, &BeamConfig { beam_size: b, max_len: 4, alpha, no_repeat_ngram: None }).unwrap();
        prop_assert!(run(625).score(alpha) >= run(beam).score(alpha) - 1e-12);
    }
}

#[test]
fn mini_corpus_round_trips_exactly() {
    let bytes = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/mini_corpus.jsonl")).unwrap();
    let examples = parse_jsonl(&bytes).unwrap();
    let texts: Vec<&str> = examples.iter().flat_map(|e| [e.body.as_str(), e.summary.as_str()]).collect();
    let vocab = train_bpe(&texts, 400, TokenizerOptions::default()).unwrap();
    for t in &texts {
        assert_eq!(vocab.decode(&vocab.encode(t, true).ids).unwrap(), normalize(t, vocab.options()));
    }
    // every non-special token occurs somewhere in the marked training text
    let marked: Vec<String> = texts
        .iter()
        .flat_map(|t| normalize(t, vocab.options()).split(' ').map(|w| format!("{WORD_MARKER}{w}")).collect::<Vec<_>>())
        .collect();
    for id in 5..vocab.len() as u32 {
        let tok = vocab.token(id).unwrap();
        assert!(marked.iter().any(|w| w.contains(tok)), "token {tok:?} never occurs");
    }
}

/// Widening the beam is not monotone in general: a wider beam can admit a
/// prefix that looks better early and crowds out the eventual winner.
#[test]
fn wider_beam_can_score_lower() {
    let sp = DecodeSpecials { bos: 2, eos: 3, banned: vec![] };
    let mut found = None;
    for seed in 0..2000 {
        let scorer = TableScorer::random(5, 5, &mut SplitMix64::new(seed));
        for b in 1..6 {
            let cfg = |beam_size| BeamConfig { beam_size, max_len: 4, alpha: 0.0, no_repeat_ngram: None };
            let narrow = beam_search(&scorer, &sp, &cfg(b)).unwrap();
            let wide = beam_search(&scorer, &sp, &cfg(b + 1)).unwrap();
            if wide.score(0.0) < narrow.score(0.0) - 1e-9 {
                found = Some((seed, b));
                break;
            }
        }
        if found.is_some() {
            break;
        }
    }
    println!("beam monotonicity counterexample (table seed, narrow width): {found:?}");
    assert!(found.is_some(), "no counterexample to beam monotonicity in 2000 random tables");
}
