//! Independent oracles shared by the integration tests: central finite
//! differences, brute-force LCS and n-gram counting, exhaustive decoding.
#![allow(dead_code)]

use std::collections::BTreeMap;

use warmsum::decoding::{length_penalty, DecodeSpecials};
use warmsum::model::{Batch, EncoderDecoderModel, Mode, ModelConfig, ModelKind};
use warmsum::rng::SplitMix64;
use warmsum::tensor::{Activation, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One differentiable operation under test: random inputs plus a builder.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn projected_loss(inputs: &[Tensor], build: &Build, proj: &Tensor, trainable: bool) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
        .collect();
    let out = build(&mut tape, &vars);
    let r = tape.constant(proj.clone());
    let weighted = tape.mul(out, r).expect("projection shape");
    let loss = tape.sum(weighted);
    (tape, vars, loss)
}

/// Max relative error between the analytic and the central-difference
/// derivative of `sum(r ⊙ op(inputs))` (random `r`), along one random
/// direction and at three random coordinates of every input.
pub fn check_op(case: &OpCase, rng: &mut SplitMix64) -> f64 {
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (case.build)(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let proj = random_tensor(&shape, rng);
    let (mut tape, vars, loss) = projected_loss(&case.inputs, &case.build, &proj, true);
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let eval = |inputs: &[Tensor]| {
        let (tape, _, loss) = projected_loss(inputs, &case.build, &proj, false);
        tape.data(loss)[0]
    };
    let perturb = |dir: &[Vec<f64>], h: f64| -> Vec<Tensor> {
        case.inputs
            .iter()
            .zip(dir)
            .map(|(t, d)| {
                let data = t.data().iter().zip(d).map(|(x, u)| x + h * u).collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            })
            .collect()
    };
    let fd = |dir: &[Vec<f64>]| (eval(&perturb(dir, FD_STEP)) - eval(&perturb(dir, -FD_STEP))) / (2.0 * FD_STEP);
    let analytic = |dir: &[Vec<f64>]| -> f64 {
        grads
            .iter()
            .zip(dir)
            .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };

    let mut worst: f64 = 0.0;
    let direction: Vec<Vec<f64>> = case.inputs.iter().map(|t| (0..t.len()).map(|_| rng.normal()).collect()).collect();
    worst = worst.max(rel_err(analytic(&direction), fd(&direction)));
    for (i, t) in case.inputs.iter().enumerate() {
        for _ in 0..3 {
            let mut dir: Vec<Vec<f64>> = case.inputs.iter().map(|t| vec![0.0; t.len()]).collect();
            dir[i][rng.below(t.len())] = 1.0;
            worst = worst.max(rel_err(analytic(&dir), fd(&dir)));
        }
    }
    worst
}

/// Every differentiable tape operation, with random inputs drawn from `rng`.
pub fn op_cases(rng: &mut SplitMix64) -> Vec<OpCase> {
    let mut t = |shape: &[usize]| random_tensor(shape, rng);
    let positive = |x: Tensor| {
        let data = x.data().iter().map(|v| 0.5 + v.abs()).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    };
    let mask: Vec<f64> = (0..2 * 3 * 4).map(|i| if i % 4 == 3 { -1e9 } else { 0.0 }).collect();
    let ids = vec![0usize, 2, 1, 2, 4];
    let targets = vec![1usize, 0, 3, 2];
    let seed_cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("add", vec![t(&[3, 4]), t(&[3, 4])], Box::new(|tp, v| tp.add(v[0], v[1]).unwrap())),
        ("mul", vec![t(&[3, 4]), t(&[3, 4])], Box::new(|tp, v| tp.mul(v[0], v[1]).unwrap())),
        ("scale", vec![t(&[5])], Box::new(|tp, v| tp.scale(v[0], -1.7))),
        ("add_bias", vec![t(&[2, 3, 4]), t(&[4])], Box::new(|tp, v| tp.add_bias(v[0], v[1]).unwrap())),
        ("matmul", vec![t(&[2, 3, 4]), t(&[4, 5])], Box::new(|tp, v| tp.matmul(v[0], v[1]).unwrap())),
        ("matmul_nt", vec![t(&[3, 4]), t(&[5, 4])], Box::new(|tp, v| tp.matmul_nt(v[0], v[1]).unwrap())),
        ("bmm", vec![t(&[2, 3, 4]), t(&[2, 4, 5])], Box::new(|tp, v| tp.bmm(v[0], v[1], false).unwrap())),
        ("bmm_nt", vec![t(&[2, 3, 4]), t(&[2, 5, 4])], Box::new(|tp, v| tp.bmm(v[0], v[1], true).unwrap())),
        ("reshape", vec![t(&[2, 6])], Box::new(|tp, v| tp.reshape(v[0], &[3, 4]).unwrap())),
        ("swap_axes12", vec![t(&[2, 3, 4, 2])], Box::new(|tp, v| tp.swap_axes12(v[0]).unwrap())),
        ("softmax_last", vec![t(&[3, 5])], Box::new(|tp, v| tp.softmax(v[0], 1).unwrap())),
        ("softmax_mid", vec![t(&[2, 4, 3])], Box::new(|tp, v| tp.softmax(v[0], 1).unwrap())),
        (
            "layer_norm",
            vec![t(&[3, 6]), positive(t(&[6])), t(&[6])],
            Box::new(|tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-12).unwrap()),
        ),
        ("gelu", vec![t(&[4, 3])], Box::new(|tp, v| tp.gelu(v[0]))),
        ("relu", vec![t(&[4, 3])], Box::new(|tp, v| tp.relu(v[0]))),
        ("activation_gelu", vec![t(&[6])], Box::new(|tp, v| tp.activation(v[0], Activation::Gelu))),
        (
            "embedding",
            vec![t(&[5, 3])],
            Box::new(move |tp, v| tp.embedding(v[0], &ids).unwrap()),
        ),
        (
            "dropout",
            vec![t(&[4, 5])],
            Box::new(|tp, v| tp.dropout(v[0], 0.3, &mut SplitMix64::new(99)).unwrap()),
        ),
        (
            "concat",
            vec![t(&[2, 3]), t(&[2, 2])],
            Box::new(|tp, v| tp.concat(&[v[0], v[1]], 1).unwrap()),
        ),
        ("slice", vec![t(&[4, 5])], Box::new(|tp, v| tp.slice(v[0], 1, 1, 3).unwrap())),
        (
            "add_mask",
            vec![t(&[4, 3, 4])],
            Box::new(move |tp, v| {
                let x = tp.add_mask(v[0], &mask, 2).unwrap();
                tp.softmax(x, 2).unwrap()
            }),
        ),
        (
            "cross_entropy",
            vec![t(&[4, 5])],
            Box::new(move |tp, v| tp.cross_entropy(v[0], &targets, 3).unwrap()),
        ),
        ("sum", vec![t(&[3, 3])], Box::new(|tp, v| tp.sum(v[0]))),
        (
            "linear",
            vec![t(&[3, 4]), t(&[4, 2]), t(&[2])],
            Box::new(|tp, v| tp.linear(v[0], v[1], v[2]).unwrap()),
        ),
    ];
    seed_cases
        .into_iter()
        .map(|(name, inputs, build)| OpCase { name, inputs, build })
        .collect()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_enc_layers: 2,
        n_dec_layers: 2,
        max_positions: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Random weights at a scale where the network is clearly nonlinear.
pub fn rough_model(config: &ModelConfig, kind: ModelKind, rng: &mut SplitMix64) -> EncoderDecoderModel {
    let mut m = EncoderDecoderModel::random(config.clone(), kind, rng.next_u64()).unwrap();
    for (name, t) in m.weights.iter_mut() {
        let gain = name.ends_with(".gain");
        for x in t.data_mut() {
            *x = if gain { 1.0 + 0.2 * rng.normal() } else { 0.5 * rng.normal() };
        }
    }
    m
}

/// Random id rows of random lengths in `min..=max` using ids `5..vocab`,
/// BOS-prefixed and EOS-terminated.
pub fn random_rows(n: usize, min: usize, max: usize, vocab: usize, rng: &mut SplitMix64) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let len = min + rng.below(max - min + 1);
            let mut row = vec![2u32];
            row.extend((0..len).map(|_| 5 + rng.below(vocab - 5) as u32));
            row.push(3);
            row
        })
        .collect()
}

fn model_loss(model: &EncoderDecoderModel, src: &Batch, tgt: &Batch, mlm: Option<&(Vec<usize>, Vec<usize>)>) -> f64 {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let loss = model_loss_on(model, &mut tape, &p, src, tgt, mlm);
    tape.data(loss)[0]
}

fn model_loss_on(
    model: &EncoderDecoderModel,
    tape: &mut Tape,
    p: &warmsum::model::Bound,
    src: &Batch,
    tgt: &Batch,
    mlm: Option<&(Vec<usize>, Vec<usize>)>,
) -> Var {
    match mlm {
        None => model.forward_loss(tape, p, src, tgt, &mut Mode::Eval).unwrap(),
        Some((positions, targets)) => {
            let h = model.encode(tape, p, src, &mut Mode::Eval).unwrap();
            let logits = model.mlm_logits(tape, p, h, positions).unwrap();
            tape.cross_entropy(logits, targets, usize::MAX).unwrap()
        }
    }
}

/// Finite-difference check of the full model loss with respect to all
/// parameters: one random direction plus `coords` random coordinates.
/// Seq2seq kinds use the teacher-forced loss, encoder kinds the MLM loss.
pub fn check_model(config: &ModelConfig, kind: ModelKind, coords: usize, rng: &mut SplitMix64) -> f64 {
    let model = rough_model(config, kind, rng);
    let src = Batch::from_sequences(&random_rows(2, 2, 5, config.vocab_size, rng)).unwrap();
    let tgt = Batch::from_sequences(&random_rows(2, 1, 4, config.vocab_size, rng)).unwrap();
    let mlm = (kind == ModelKind::Encoder).then(|| {
        let positions: Vec<usize> = (0..src.ids.len()).filter(|&i| src.ids[i] >= 5).collect();
        let targets = positions.iter().map(|_| 5 + rng.below(config.vocab_size - 5)).collect();
        (positions, targets)
    });

    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let loss = model_loss_on(&model, &mut tape, &p, &src, &tgt, mlm.as_ref());
    tape.backward(loss).unwrap();
    let grads = p.grads(&tape);

    let shifted = |dir: &BTreeMap<String, Vec<f64>>, h: f64| {
        let mut m = model.clone();
        for (name, t) in m.weights.iter_mut() {
            if let Some(d) = dir.get(name) {
                for (x, u) in t.data_mut().iter_mut().zip(d) {
                    *x += h * u;
                }
            }
        }
        model_loss(&m, &src, &tgt, mlm.as_ref())
    };
    let compare = |dir: &BTreeMap<String, Vec<f64>>| {
        let fd = (shifted(dir, FD_STEP) - shifted(dir, -FD_STEP)) / (2.0 * FD_STEP);
        let analytic: f64 = dir
            .iter()
            .map(|(name, d)| grads[name].iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        rel_err(analytic, fd)
    };

    let direction: BTreeMap<String, Vec<f64>> = model
        .weights
        .iter()
        .map(|(n, t)| (n.clone(), (0..t.len()).map(|_| rng.normal()).collect()))
        .collect();
    let mut worst = compare(&direction);
    let names: Vec<&String> = model.weights.keys().collect();
    for _ in 0..coords {
        let name = names[rng.below(names.len())];
        let len = model.weights[name].len();
        let mut d = vec![0.0; len];
        d[rng.below(len)] = 1.0;
        worst = worst.max(compare(&BTreeMap::from([(name.clone(), d)])));
    }
    worst
}

/// LCS length by enumerating every subsequence of `a` (bitmask) and
/// testing whether it is a subsequence of `b`.
pub fn brute_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&T> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = b.iter();
        if sub.iter().all(|x| it.any(|y| y == *x)) {
            best = sub.len();
        }
    }
    best
}

/// Clipped n-gram overlap by pairwise list matching instead of hashing.
pub fn naive_rouge_n(cand: &[u32], reference: &[u32], n: usize) -> (f64, f64, f64) {
    let grams = |s: &[u32]| -> Vec<Vec<u32>> {
        if s.len() < n {
            vec![]
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let c = grams(cand);
    let mut r = grams(reference);
    let mut overlap = 0;
    for g in &c {
        if let Some(pos) = r.iter().position(|x| x == g) {
            r.remove(pos);
            overlap += 1;
        }
    }
    let total_c = c.len();
    let total_r = grams(reference).len();
    let p = if total_c == 0 { 0.0 } else { overlap as f64 / total_c as f64 };
    let rc = if total_r == 0 { 0.0 } else { overlap as f64 / total_r as f64 };
    let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
    (p, rc, f)
}

/// Every complete hypothesis of at most `max_len` generated tokens:
/// sequences ending at their first EOS, plus EOS-free ones of exactly
/// `max_len` tokens. All are BOS-prefixed.
pub fn enumerate_hypotheses(vocab: usize, sp: &DecodeSpecials, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut frontier = vec![vec![sp.bos]];
    for step in 1..=max_len {
        let mut next = Vec::new();
        for ids in frontier {
            for tok in (0..vocab as u32).filter(|t| !sp.banned.contains(t)) {
                let mut seq = ids.clone();
                seq.push(tok);
                if tok == sp.eos || step == max_len {
                    out.push(seq);
                } else {
                    next.push(seq);
                }
            }
        }
        frontier = next;
    }
    out
}

/// Exhaustive argmax of `log_prob(ids) / lp(len)`, ties to smaller ids.
/// `log_prob` scores a whole BOS-prefixed sequence.
pub fn exhaustive_best(
    vocab: usize,
    sp: &DecodeSpecials,
    max_len: usize,
    alpha: f64,
    log_prob: impl Fn(&[u32]) -> f64,
) -> (Vec<u32>, f64) {
    enumerate_hypotheses(vocab, sp, max_len)
        .into_iter()
        .map(|ids| {
            let s = log_prob(&ids) / length_penalty(ids.len() - 1, alpha);
            (ids, s)
        })
        .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
        .unwrap()
}
