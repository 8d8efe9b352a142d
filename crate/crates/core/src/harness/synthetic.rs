//! Seeded synthetic summarization corpus.
//!
//! Bodies are walks over a random Markov chain on a small inventory of
//! Vietnamese-looking syllables. Two abstract rules are available, both a
//! deterministic function of the body:
//!
//! - `lead`: the first `lead_k` words passed through a fixed word-to-word
//!   remapping (by default each word's most likely successor, otherwise a
//!   random permutation of the inventory).
//! - `salient`: the body words reached by one of the less likely chain
//!   transitions, in order, at most `lead_k` of them. Telling these apart
//!   needs the transition table, which MLM pretraining on bodies learns.

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusExample;
use crate::rng::SplitMix64;

const ONSETS: &[&str] = &[
    "b", "c", "ch", "d", "đ", "g", "h", "k", "kh", "l", "m", "n", "nh", "ph", "qu", "r", "s", "t", "th", "tr", "v", "x",
];
const NUCLEI: &[&str] = &[
    "a", "ă", "â", "e", "ê", "i", "o", "ô", "ơ", "u", "ư", "ai", "ao", "oa", "ươ", "iê", "uô",
];
const CODAS: &[&str] = &["", "", "", "n", "ng", "m", "t", "c", "nh", "p"];

/// Branching weights of each word's successors, most likely first.
const SUCCESSOR_WEIGHTS: [f64; 3] = [0.6, 0.3, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Remap {
    /// Most likely successor of the word in the chain.
    #[default]
    Successor,
    /// Fixed random permutation of the inventory.
    Permutation,
}

/// What the abstract is made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// The first `lead_k` body words, remapped.
    #[default]
    Lead,
    /// Up to `lead_k` body words reached by a less likely transition, in
    /// body order and not remapped. Falls back to the first word.
    Salient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_examples: usize,
    pub n_words: usize,
    pub body_len_min: usize,
    pub body_len_max: usize,
    pub lead_k: usize,
    pub remap: Remap,
    pub target: Target,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_examples: 5000,
            n_words: 40,
            body_len_min: 10,
            body_len_max: 14,
            lead_k: 4,
            remap: Remap::Successor,
            target: Target::Lead,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), String> {
        let max_words = ONSETS.len() * NUCLEI.len() * 7;
        if self.n_words < SUCCESSOR_WEIGHTS.len() || self.n_words > max_words {
            return Err(format!("n_words must lie in {}..={max_words}", SUCCESSOR_WEIGHTS.len()));
        }
        if self.body_len_min == 0 || self.body_len_min > self.body_len_max {
            return Err("need 0 < body_len_min <= body_len_max".into());
        }
        if self.lead_k == 0 || self.lead_k > self.body_len_min {
            return Err("need 0 < lead_k <= body_len_min".into());
        }
        Ok(())
    }
}

/// The generated inventory, chain and permutation.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub words: Vec<String>,
    pub successors: Vec<[usize; 3]>,
    pub permutation: Vec<usize>,
}

impl Grammar {
    pub fn remap(&self, w: usize, how: Remap) -> usize {
        match how {
            Remap::Successor => self.successors[w][0],
            Remap::Permutation => self.permutation[w],
        }
    }
}

impl Grammar {
    /// Body words that are not the most likely successor of the word before.
    pub fn salient(&self, body: &[usize], k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = body
            .windows(2)
            .filter(|p| p[1] != self.successors[p[0]][0])
            .map(|p| p[1])
            .take(k)
            .collect();
        if out.is_empty() {
            out.push(body[0]);
        }
        out
    }

    pub fn new(n_words: usize, rng: &mut SplitMix64) -> Self {
        let mut words: Vec<String> = Vec::with_capacity(n_words);
        while words.len() < n_words {
            let w = format!(
                "{}{}{}",
                ONSETS[rng.below(ONSETS.len())],
                NUCLEI[rng.below(NUCLEI.len())],
                CODAS[rng.below(CODAS.len())]
            );
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let successors = (0..n_words)
            .map(|_| {
                let mut pool: Vec<usize> = (0..n_words).collect();
                rng.shuffle(&mut pool);
                [pool[0], pool[1], pool[2]]
            })
            .collect();
        let mut permutation: Vec<usize> = (0..n_words).collect();
        rng.shuffle(&mut permutation);
        Self {
            words,
            successors,
            permutation,
        }
    }

    fn next(&self, w: usize, rng: &mut SplitMix64) -> usize {
        let u = rng.next_f64();
        let mut acc = 0.0;
        for (k, p) in SUCCESSOR_WEIGHTS.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.successors[w][k];
            }
        }
        self.successors[w][SUCCESSOR_WEIGHTS.len() - 1]
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<Vec<CorpusExample>, String> {
    config.validate()?;
    let mut rng = SplitMix64::new(config.seed);
    let g = Grammar::new(config.n_words, &mut rng);
    let mut out = Vec::with_capacity(config.n_examples);
    for i in 0..config.n_examples {
        let len = config.body_len_min + rng.below(config.body_len_max - config.body_len_min + 1);
        let mut w = rng.below(config.n_words);
        let mut body = Vec::with_capacity(len);
        for _ in 0..len {
            body.push(w);
            w = g.next(w, &mut rng);
        }
        let text = |ids: &mut dyn Iterator<Item = usize>| ids.map(|i| g.words[i].as_str()).collect::<Vec<_>>().join(" ");
        out.push(CorpusExample {
            id: format!("syn-{i:05}"),
            body: text(&mut body.iter().copied()),
            summary: match config.target {
                Target::Lead => text(&mut body[..config.lead_k].iter().map(|&w| g.remap(w, config.remap))),
                Target::Salient => text(&mut g.salient(&body, config.lead_k).into_iter()),
            },
        });
    }
    Ok(out)
}
