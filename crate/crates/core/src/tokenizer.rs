//! Frequency-based BPE subword tokenizer.
//!
//! Text is NFC-normalized and pre-tokenized either on whitespace (each word
//! becomes a unit prefixed with the boundary marker `▁`) or as one
//! character stream. Training greedily merges the most frequent adjacent
//! symbol pair; ties go to the lexicographically smallest `(left, right)`.
//! Encoding replays merges in training order.
//!
//! # Vocabulary file
//!
//! UTF-8 text. Line `i` (0-based) holds the token with id `i`, up to a line
//! `#MERGES`; each following line is one merge `left right` in training
//! order; an optional `#OPTIONS` section holds `key=value` lines (`mode`,
//! `lowercase`). Tokens are escaped: `\\` backslash, `\s` space, `\n`
//! newline, `\t` tab, `\r` carriage return, and a leading `\#` for a token
//! starting with `#`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];

/// Word-boundary marker used in whitespace mode.
pub const WORD_MARKER: char = '▁';

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {target} must exceed {base} base symbols + {NUM_SPECIALS} specials")]
    TargetTooSmall { target: usize, base: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("malformed vocabulary file at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PretokenizeMode {
    #[default]
    Whitespace,
    Character,
}

impl std::str::FromStr for PretokenizeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whitespace" => Ok(Self::Whitespace),
            "character" => Ok(Self::Character),
            other => Err(format!("unknown pretokenize mode `{other}` (whitespace|character)")),
        }
    }
}

impl std::fmt::Display for PretokenizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Whitespace => "whitespace",
            Self::Character => "character",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TokenizerOptions {
    pub mode: PretokenizeMode,
    pub lowercase: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    options: TokenizerOptions,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// NFC, optional lowercasing, and (whitespace mode) collapsing of runs of
/// whitespace into single spaces. `decode(encode(x)) == normalize(x)` for
/// text whose symbols are all in the vocabulary.
pub fn normalize(text: &str, options: TokenizerOptions) -> String {
    let nfc: String = text.nfc().collect();
    let cased = if options.lowercase { nfc.to_lowercase() } else { nfc };
    match options.mode {
        PretokenizeMode::Whitespace => cased.split_whitespace().collect::<Vec<_>>().join(" "),
        PretokenizeMode::Character => cased,
    }
}

/// Splits normalized text into units of base symbols.
fn pretokenize(text: &str, options: TokenizerOptions) -> Vec<Vec<String>> {
    let norm = normalize(text, options);
    match options.mode {
        PretokenizeMode::Whitespace => norm
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| {
                std::iter::once(WORD_MARKER.to_string())
                    .chain(w.chars().map(|c| c.to_string()))
                    .collect()
            })
            .collect(),
        PretokenizeMode::Character => {
            if norm.is_empty() {
                vec![]
            } else {
                vec![norm.chars().map(|c| c.to_string()).collect()]
            }
        }
    }
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{left}{right}");
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

/// Trains a vocabulary on `corpus`.
///
/// Stops when the vocabulary reaches `target_vocab_size` or when no
/// adjacent pair occurs at least twice. A pair whose concatenation would
/// spell a special token is never merged.
pub fn train_bpe<I, S>(corpus: I, target_vocab_size: usize, options: TokenizerOptions) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    // unit -> frequency, in a BTreeMap so pair counting order is fixed
    let mut units: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for text in corpus {
        for unit in pretokenize(text.as_ref(), options) {
            *units.entry(unit).or_default() += 1;
        }
    }
    if units.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut base: Vec<String> = units.keys().flatten().cloned().collect();
    base.sort();
    base.dedup();
    if target_vocab_size < base.len() + NUM_SPECIALS {
        return Err(TokenizerError::TargetTooSmall {
            target: target_vocab_size,
            base: base.len(),
        });
    }

    let mut vocab = Vocabulary::from_parts(
        SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(base).collect(),
        vec![],
        options,
    );
    let mut words: Vec<(Vec<String>, usize)> = units.into_iter().collect();
    while vocab.len() < target_vocab_size {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, freq) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += freq;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|((l, r), _)| !SPECIAL_TOKENS.contains(&format!("{l}{r}").as_str()))
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (left, right) = (l.to_string(), r.to_string());
        for (symbols, _) in words.iter_mut() {
            apply_merge(symbols, &left, &right);
        }
        let merged = format!("{left}{right}");
        if !vocab.token_to_id.contains_key(&merged) {
            vocab.push_token(merged);
        }
        vocab.merges.push((left, right));
    }
    Ok(vocab)
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>, options: TokenizerOptions) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            id_to_token: tokens,
            token_to_id,
            merges,
            options,
        }
    }

    fn push_token(&mut self, token: String) {
        self.token_to_id.insert(token.clone(), self.id_to_token.len() as u32);
        self.id_to_token.push(token);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn options(&self) -> TokenizerOptions {
        self.options
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn encode(&self, text: &str, add_bos_eos: bool) -> TokenSequence {
        let mut ids = Vec::new();
        if add_bos_eos {
            ids.push(BOS);
        }
        let ranks: HashMap<(&str, &str), usize> = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, (l, r))| ((l.as_str(), r.as_str()), i))
            .collect();
        for mut symbols in pretokenize(text, self.options) {
            loop {
                let best = symbols
                    .windows(2)
                    .filter_map(|w| ranks.get(&(w[0].as_str(), w[1].as_str())).copied())
                    .min();
                let Some(rank) = best else { break };
                let (l, r) = &self.merges[rank];
                apply_merge(&mut symbols, l, r);
            }
            ids.extend(symbols.iter().map(|s| self.id(s).unwrap_or(UNK)));
        }
        if add_bos_eos {
            ids.push(EOS);
        }
        TokenSequence { ids }
    }

    /// Concatenates non-special tokens; strips all specials including UNK.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let token = self.token(id).ok_or(TokenizerError::IdOutOfRange { id, size: self.len() })?;
            if !Self::is_special(id) {
                out.push_str(token);
            }
        }
        Ok(match self.options.mode {
            PretokenizeMode::Whitespace => {
                let spaced = out.replace(WORD_MARKER, " ");
                spaced.strip_prefix(' ').map(str::to_string).unwrap_or(spaced)
            }
            PretokenizeMode::Character => out,
        })
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(&escape(t));
            s.push('\n');
        }
        s.push_str("#MERGES\n");
        for (l, r) in &self.merges {
            s.push_str(&format!("{} {}\n", escape(l), escape(r)));
        }
        s.push_str("#OPTIONS\n");
        s.push_str(&format!("mode={}\nlowercase={}\n", self.options.mode, self.options.lowercase));
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self, TokenizerError> {
        #[derive(PartialEq)]
        enum Section {
            Tokens,
            Merges,
            Options,
        }
        let mut section = Section::Tokens;
        let mut tokens = Vec::new();
        let mut merges = Vec::new();
        let mut options = TokenizerOptions::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let err = |msg: String| TokenizerError::Format { line: lineno, msg };
            match line {
                "#MERGES" if section == Section::Tokens => section = Section::Merges,
                "#OPTIONS" if section != Section::Options => section = Section::Options,
                _ => match section {
                    Section::Tokens => tokens.push(unescape(line).map_err(err)?),
                    Section::Merges => {
                        let (l, r) = line
                            .split_once(' ')
                            .ok_or_else(|| err("merge line needs two tokens".into()))?;
                        merges.push((unescape(l).map_err(err)?, unescape(r).map_err(err)?));
                    }
                    Section::Options => {
                        let (k, v) = line
                            .split_once('=')
                            .ok_or_else(|| err("option line needs key=value".into()))?;
                        match k {
                            "mode" => options.mode = v.parse().map_err(err)?,
                            "lowercase" => {
                                options.lowercase = v.parse().map_err(|_| err(format!("bad bool `{v}`")))?
                            }
                            other => return Err(err(format!("unknown option `{other}`"))),
                        }
                    }
                },
            }
        }
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(TokenizerError::Format {
                line: 1,
                msg: "the first five tokens must be the special tokens".into(),
            });
        }
        let vocab = Self::from_parts(tokens, merges, options);
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(TokenizerError::Format {
                line: 1,
                msg: "duplicate token".into(),
            });
        }
        for (i, (l, r)) in vocab.merges.iter().enumerate() {
            if vocab.id(&format!("{l}{r}")).is_none() {
                return Err(TokenizerError::Format {
                    line: vocab.len() + 2 + i,
                    msg: "merge result is not a vocabulary token".into(),
                });
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }
}

fn escape(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for (i, c) in token.chars().enumerate() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            '#' if i == 0 => out.push_str("\\#"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('s') => out.push(' '),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('#') => out.push('#'),
            other => return Err(format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default())),
        }
    }
    if out.is_empty() {
        return Err("empty token".into());
    }
    Ok(out)
}
