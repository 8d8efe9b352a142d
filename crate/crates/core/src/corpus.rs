//! JSONL corpus ingestion, seeded splitting and dataset statistics.
//!
//! One JSON object per line with string fields `id`, `body` and
//! `abstract`. Text is NFC-normalized on load. Blank lines are skipped.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: invalid UTF-8")]
    Encoding { line: usize },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: duplicate id `{id}` (first seen on line {first})")]
    DuplicateId { line: usize, id: String, first: usize },
    #[error("invalid split ratios: {0}")]
    Ratios(String),
    #[error("split `{0}` would be empty")]
    EmptySplit(&'static str),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusExample {
    pub id: String,
    pub body: String,
    #[serde(rename = "abstract")]
    pub summary: String,
}

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

fn field(obj: &serde_json::Map<String, serde_json::Value>, key: &str, line: usize) -> Result<String> {
    match obj.get(key) {
        Some(serde_json::Value::String(s)) => Ok(nfc(s)),
        Some(_) => Err(CorpusError::Malformed {
            line,
            msg: format!("field `{key}` is not a string"),
        }),
        None => Err(CorpusError::Malformed {
            line,
            msg: format!("missing field `{key}`"),
        }),
    }
}

/// Parses JSONL bytes; line numbers in errors are 1-based.
pub fn parse_jsonl(bytes: &[u8]) -> Result<Vec<CorpusExample>> {
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = i + 1;
        let text = std::str::from_utf8(raw).map_err(|_| CorpusError::Encoding { line })?;
        if text.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
            line,
            msg: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::Malformed {
            line,
            msg: "expected a JSON object".into(),
        })?;
        let ex = CorpusExample {
            id: field(obj, "id", line)?,
            body: field(obj, "body", line)?,
            summary: field(obj, "abstract", line)?,
        };
        for (name, v) in [("body", &ex.body), ("abstract", &ex.summary)] {
            if v.trim().is_empty() {
                return Err(CorpusError::Malformed {
                    line,
                    msg: format!("field `{name}` is empty"),
                });
            }
        }
        if let Some(&first) = seen.get(&ex.id) {
            return Err(CorpusError::DuplicateId { line, id: ex.id, first });
        }
        seen.insert(ex.id.clone(), line);
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<CorpusExample>> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(&bytes)
}

pub fn to_jsonl(examples: &[CorpusExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex).expect("example serializes"));
        s.push('\n');
    }
    s
}

pub fn save_jsonl(examples: &[CorpusExample], path: &Path) -> Result<()> {
    std::fs::write(path, to_jsonl(examples)).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<CorpusExample>,
    pub dev: Vec<CorpusExample>,
    pub test: Vec<CorpusExample>,
}

impl Splits {
    pub fn iter_all(&self) -> impl Iterator<Item = &CorpusExample> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

/// Split sizes: `round(n * train)`, `round(n * dev)`, remainder to test.
pub fn split_sizes(n: usize, ratios: &SplitRatios) -> Result<(usize, usize, usize)> {
    let r = [ratios.train, ratios.dev, ratios.test];
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Ratios(format!(
            "{} / {} / {} must be nonnegative and sum to 1",
            ratios.train, ratios.dev, ratios.test
        )));
    }
    let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
    let n_dev = ((n as f64 * ratios.dev).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_dev;
    if n > 0 {
        for (name, ratio, size) in [
            ("train", ratios.train, n_train),
            ("dev", ratios.dev, n_dev),
            ("test", ratios.test, n_test),
        ] {
            if ratio > 0.0 && size == 0 {
                return Err(CorpusError::EmptySplit(name));
            }
        }
    }
    Ok((n_train, n_dev, n_test))
}

/// Fisher-Yates shuffle with `SplitMix64::new(seed)`, then consecutive slices.
pub fn split(examples: &[CorpusExample], ratios: &SplitRatios, seed: u64) -> Result<Splits> {
    let (n_train, n_dev, _) = split_sizes(examples.len(), ratios)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
    Ok(Splits {
        train: pick(&order[..n_train]),
        dev: pick(&order[n_train..n_train + n_dev]),
        test: pick(&order[n_train + n_dev..]),
    })
}

/// Keywords marking questionnaires, analytical commentary and weather
/// forecasts in Vietnamese news. Used only when filtering is requested.
pub const DEFAULT_BLACKLIST: &[&str] = &[
    "dự báo thời tiết",
    "thời tiết hôm nay",
    "bảng hỏi",
    "khảo sát ý kiến",
    "bình luận",
    "phân tích",
];

/// Drops examples whose body or abstract contains any keyword
/// (case-insensitive); returns the kept examples and the number removed.
pub fn filter_blacklist(examples: Vec<CorpusExample>, keywords: &[&str]) -> (Vec<CorpusExample>, usize) {
    let keys: Vec<String> = keywords.iter().map(|k| nfc(k).to_lowercase()).collect();
    let before = examples.len();
    let kept: Vec<_> = examples
        .into_iter()
        .filter(|ex| {
            let body = ex.body.to_lowercase();
            let summary = ex.summary.to_lowercase();
            !keys.iter().any(|k| body.contains(k.as_str()) || summary.contains(k.as_str()))
        })
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub avg_body_words: f64,
    pub avg_abstract_words: f64,
}

/// Half-up rounding used for displayed averages.
pub fn display_round(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

/// Averages run over every example in every split.
pub fn compute_stats(splits: &Splits) -> CorpusStats {
    let n = splits.train.len() + splits.dev.len() + splits.test.len();
    let (body, summary) = splits
        .iter_all()
        .fold((0usize, 0usize), |(b, a), ex| (b + word_count(&ex.body), a + word_count(&ex.summary)));
    let avg = |total: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
    CorpusStats {
        train: splits.train.len(),
        dev: splits.dev.len(),
        test: splits.test.len(),
        avg_body_words: avg(body),
        avg_abstract_words: avg(summary),
    }
}

const ROW_SIZE: &str = "Size";
const ROW_BODY: &str = "#avg of words in body";
const ROW_ABSTRACT: &str = "#avg of words in abstract";
const SUBHEADERS: [&str; 3] = ["Train", "Dev", "Test"];

/// Plain-text statistics table, one column block per dataset:
///
/// ```text
/// +---------------------------+-------+------+------+
/// |                           | Wikilingua           |
/// +---------------------------+-------+------+------+
/// | Size                      | Train | Dev  | Test |
/// |                           | 13707 | 1957 | 3916 |
/// +---------------------------+-------+------+------+
/// | #avg of words in body     | 521                  |
/// | #avg of words in abstract | 44                   |
/// +---------------------------+-------+------+------+
/// ```
///
/// Every cell is left-aligned with one space of padding on each side.
/// Sub-column widths fit the larger of header and count; a block is
/// widened by growing its Test column when the dataset name is longer.
pub fn render_stats_table(datasets: &[(&str, CorpusStats)]) -> String {
    let label_w = ROW_ABSTRACT.chars().count();
    let blocks: Vec<[usize; 3]> = datasets
        .iter()
        .map(|(name, s)| {
            let counts = [s.train, s.dev, s.test];
            let mut w = [0; 3];
            for i in 0..3 {
                w[i] = SUBHEADERS[i].len().max(counts[i].to_string().len());
            }
            let inner = w[0] + w[1] + w[2] + 6;
            let need = [
                name.chars().count(),
                display_round(s.avg_body_words).to_string().len(),
                display_round(s.avg_abstract_words).to_string().len(),
            ]
            .into_iter()
            .max()
            .unwrap();
            if need > inner {
                w[2] += need - inner;
            }
            w
        })
        .collect();

    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));
    let mut rule = format!("+{}", "-".repeat(label_w + 2));
    for w in &blocks {
        for x in w {
            rule.push_str(&format!("+{}", "-".repeat(x + 2)));
        }
    }
    rule.push_str("+\n");

    let wide = |label: &str, cells: Vec<String>| {
        let mut line = format!("| {} ", pad(label, label_w));
        for (cell, w) in cells.iter().zip(&blocks) {
            line.push_str(&format!("| {} ", pad(cell, w[0] + w[1] + w[2] + 6)));
        }
        line.push_str("|\n");
        line
    };
    let split_row = |label: &str, cells: Vec<[String; 3]>| {
        let mut line = format!("| {} ", pad(label, label_w));
        for (c, w) in cells.iter().zip(&blocks) {
            for i in 0..3 {
                line.push_str(&format!("| {} ", pad(&c[i], w[i])));
            }
        }
        line.push_str("|\n");
        line
    };

    let mut out = String::new();
    out.push_str(&rule);
    out.push_str(&wide("", datasets.iter().map(|(n, _)| n.to_string()).collect()));
    out.push_str(&rule);
    out.push_str(&split_row(ROW_SIZE, datasets.iter().map(|_| SUBHEADERS.map(String::from)).collect()));
    out.push_str(&split_row(
        "",
        datasets
            .iter()
            .map(|(_, s)| [s.train.to_string(), s.dev.to_string(), s.test.to_string()])
            .collect(),
    ));
    out.push_str(&rule);
    out.push_str(&wide(
        ROW_BODY,
        datasets.iter().map(|(_, s)| display_round(s.avg_body_words).to_string()).collect(),
    ));
    out.push_str(&wide(
        ROW_ABSTRACT,
        datasets.iter().map(|(_, s)| display_round(s.avg_abstract_words).to_string()).collect(),
    ));
    out.push_str(&rule);
    out
}

/// CSV with exact averages to 4 decimals.
pub fn render_stats_csv(datasets: &[(&str, CorpusStats)]) -> String {
    let mut out = String::from("dataset,train,dev,test,avg_body_words,avg_abstract_words\n");
    for (name, s) in datasets {
        let _ = writeln!(
            out,
            "{name},{},{},{},{:.4},{:.4}",
            s.train, s.dev, s.test, s.avg_body_words, s.avg_abstract_words
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, body: &str, summary: &str) -> CorpusExample {
        CorpusExample {
            id: id.into(),
            body: body.into(),
            summary: summary.into(),
        }
    }

    #[test]
    fn parses_and_reports_line_numbers() {
        let ok = b"{\"id\":\"a\",\"body\":\"x y\",\"abstract\":\"x\"}\n\n{\"id\":\"b\",\"body\":\"z\",\"abstract\":\"z\"}\n";
        assert_eq!(parse_jsonl(ok).unwrap().len(), 2);
        let missing = b"{\"id\":\"a\",\"body\":\"x\",\"abstract\":\"x\"}\n{\"id\":\"b\",\"body\":\"z\"}\n";
        let err = parse_jsonl(missing).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("abstract"), "{err}");
        let dup = b"{\"id\":\"a\",\"body\":\"x\",\"abstract\":\"x\"}\n{\"id\":\"a\",\"body\":\"z\",\"abstract\":\"z\"}\n";
        assert!(matches!(parse_jsonl(dup), Err(CorpusError::DuplicateId { line: 2, first: 1, .. })));
        assert!(matches!(parse_jsonl(b"\xff\xfe\n"), Err(CorpusError::Encoding { line: 1 })));
        assert!(parse_jsonl(b"").unwrap().is_empty());
    }

    #[test]
    fn nfc_applied_on_load() {
        let decomposed = "{\"id\":\"a\",\"body\":\"Vie\u{0302}\u{0323}t\",\"abstract\":\"x\"}";
        let got = parse_jsonl(decomposed.as_bytes()).unwrap();
        assert_eq!(got[0].body, "Việt");
    }

    #[test]
    fn split_sizes_and_determinism() {
        let exs: Vec<_> = (0..10).map(|i| ex(&i.to_string(), "a b", "a")).collect();
        let r = SplitRatios {
            train: 0.6,
            dev: 0.2,
            test: 0.2,
        };
        let s = split(&exs, &r, 7).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s, split(&exs, &r, 7).unwrap());
        let mut ids: Vec<_> = s.iter_all().map(|e| e.id.clone()).collect();
        ids.sort();
        let mut want: Vec<_> = exs.iter().map(|e| e.id.clone()).collect();
        want.sort();
        assert_eq!(ids, want);
    }

    #[test]
    fn split_errors() {
        let exs: Vec<_> = (0..2).map(|i| ex(&i.to_string(), "a", "a")).collect();
        let bad = SplitRatios {
            train: 0.5,
            dev: 0.2,
            test: 0.2,
        };
        assert!(matches!(split(&exs, &bad, 0), Err(CorpusError::Ratios(_))));
        assert!(matches!(
            split(&exs, &SplitRatios::default(), 0),
            Err(CorpusError::EmptySplit(_))
        ));
        assert!(split(&[], &SplitRatios::default(), 0).unwrap().train.is_empty());
    }

    #[test]
    fn stats_arithmetic() {
        let s = Splits {
            train: vec![ex("a", "w w w w", "x"), ex("b", "w w w w w w", "x y x")],
            ..Splits::default()
        };
        let st = compute_stats(&s);
        assert_eq!(st.avg_body_words, 5.0);
        assert_eq!(st.avg_abstract_words, 2.0);
        assert_eq!(compute_stats(&Splits::default()), CorpusStats::default());
        assert_eq!(display_round(2.5), 3);
        assert_eq!(display_round(2.4999), 2);
    }

    #[test]
    fn blacklist_filter() {
        let exs = vec![ex("a", "Dự báo thời tiết ngày mai", "x"), ex("b", "tin tức", "y")];
        let (kept, removed) = filter_blacklist(exs, DEFAULT_BLACKLIST);
        assert_eq!(removed, 1);
        assert_eq!(kept[0].id, "b");
    }
}
