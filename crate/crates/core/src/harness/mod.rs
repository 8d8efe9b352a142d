//! Experiment orchestration: tokenizer training, MLM pretraining, assembly,
//! fine-tuning, decoding and ROUGE, once per (assembly mode, seed) cell.
//!
//! Artifacts under `output_dir`:
//!
//! ```text
//! config.json                      resolved experiment config
//! data/{train,dev,test}.jsonl      the splits actually used
//! vocab.txt
//! pretrain/encoder.ckpt            only when a WARM mode is requested
//! pretrain/metrics.csv
//! cells/<MODE>_seed<S>/assembled.ckpt
//! cells/<MODE>_seed<S>/metrics.csv
//! cells/<MODE>_seed<S>/model.ckpt  best-dev checkpoint
//! cells/<MODE>_seed<S>/test_outputs.txt
//! cells/<MODE>_seed<S>/result.json written last; its presence marks the cell done
//! cells/<MODE>_seed<S>/error.txt   diagnostic of a failed cell
//! results.txt, results.csv
//! ```

pub mod synthetic;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assembly::{assemble, load_checkpoint, save_checkpoint, AssemblyError, AssemblyMode, Checkpoint};
use crate::corpus::{self, CorpusError, CorpusExample, SplitRatios, Splits};
use crate::decoding::{beam_search_model, greedy_decode_batch, BeamConfig, DecodeError};
use crate::model::{EncoderDecoderModel, ModelConfig};
use crate::rouge::{corpus_rouge, EvalTokenization, RougeError};
use crate::tokenizer::{train_bpe, PretokenizeMode, TokenizerError, TokenizerOptions, Vocabulary};
use crate::training::{
    encode_pair, finetune, ids_to_text, pretrain_mlm, MetricRecord, TrainConfig, TrainError, METRICS_HEADER,
};

pub use synthetic::SyntheticConfig;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Rouge(#[from] RougeError),
    #[error("{path}: {msg}")]
    Artifact { path: PathBuf, msg: String },
}

impl HarnessError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, Self::Train(e) if e.is_numeric())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSource {
    /// One JSONL file, split by `split_ratios` and `split_seed`.
    Jsonl { path: PathBuf },
    /// Pre-split JSONL files.
    Presplit { train: PathBuf, dev: PathBuf, test: PathBuf },
    Synthetic(SyntheticConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: CorpusSource,
    pub split_ratios: SplitRatios,
    pub split_seed: u64,
    /// Apply the keyword blacklist filter before splitting.
    pub blacklist: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::Synthetic(SyntheticConfig::default()),
            split_ratios: SplitRatios::default(),
            split_seed: 0,
            blacklist: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
    pub mode: PretokenizeMode,
    pub lowercase: bool,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            mode: PretokenizeMode::Whitespace,
            lowercase: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub alpha: f64,
    /// Generated tokens after BOS, EOS included.
    pub max_len: usize,
    pub no_repeat_ngram: Option<usize>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        let b = BeamConfig::default();
        Self {
            strategy: Strategy::Greedy,
            beam_size: b.beam_size,
            alpha: b.alpha,
            max_len: b.max_len,
            no_repeat_ngram: None,
        }
    }
}

impl DecodingConfig {
    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam_size,
            max_len: self.max_len,
            alpha: self.alpha,
            no_repeat_ngram: self.no_repeat_ngram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerSettings,
    /// `vocab_size` is replaced by the trained vocabulary's size.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    /// `seed` is replaced by each cell's seed.
    pub finetune: TrainConfig,
    pub modes: Vec<AssemblyMode>,
    pub decoding: DecodingConfig,
    pub eval_tokenization: EvalTokenization,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            tokenizer: TokenizerSettings::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            modes: AssemblyMode::ALL.to_vec(),
            decoding: DecodingConfig::default(),
            eval_tokenization: EvalTokenization::default(),
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs/experiment"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return fail("seeds must be nonempty".into());
        }
        if self.modes.is_empty() {
            return fail("modes must be nonempty".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return fail("seeds must be distinct".into());
        }
        match &self.data.corpus {
            CorpusSource::Jsonl { path } => {
                if !path.exists() {
                    return fail(format!("corpus file {} does not exist", path.display()));
                }
            }
            CorpusSource::Presplit { train, dev, test } => {
                for p in [train, dev, test] {
                    if !p.exists() {
                        return fail(format!("corpus file {} does not exist", p.display()));
                    }
                }
            }
            CorpusSource::Synthetic(s) => s.validate().map_err(HarnessError::Config)?,
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let mut m = self.model.clone();
        // the real size is only known after tokenizer training
        m.vocab_size = m.vocab_size.max(crate::tokenizer::SPECIAL_TOKENS.len() + 1);
        m.validate().map_err(HarnessError::Config)?;
        let longest = self.pretrain.max_src_len.max(self.finetune.max_src_len).max(self.finetune.max_tgt_len);
        if longest > self.model.max_positions || self.decoding.max_len + 1 > self.model.max_positions {
            return fail(format!(
                "max_positions {} is shorter than the configured sequence lengths",
                self.model.max_positions
            ));
        }
        if self.decoding.strategy == Strategy::Beam && self.decoding.beam_size == 0 {
            return fail("beam_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Loads the corpus described by `data` and splits it.
pub fn load_splits(data: &DataConfig) -> Result<Splits> {
    let filter = |exs: Vec<CorpusExample>| {
        if data.blacklist {
            corpus::filter_blacklist(exs, corpus::DEFAULT_BLACKLIST).0
        } else {
            exs
        }
    };
    Ok(match &data.corpus {
        CorpusSource::Jsonl { path } => corpus::split(&filter(corpus::load_jsonl(path)?), &data.split_ratios, data.split_seed)?,
        CorpusSource::Presplit { train, dev, test } => Splits {
            train: filter(corpus::load_jsonl(train)?),
            dev: filter(corpus::load_jsonl(dev)?),
            test: filter(corpus::load_jsonl(test)?),
        },
        CorpusSource::Synthetic(s) => {
            let exs = synthetic::generate(s).map_err(HarnessError::Config)?;
            corpus::split(&filter(exs), &data.split_ratios, data.split_seed)?
        }
    })
}

/// Summaries for `bodies`, one string per body.
pub fn generate_summaries(
    model: &EncoderDecoderModel,
    vocab: &Vocabulary,
    bodies: &[String],
    max_src_len: usize,
    truncation: crate::training::Truncation,
    decoding: &DecodingConfig,
) -> Result<Vec<String>> {
    let srcs: Vec<Vec<u32>> = bodies
        .iter()
        .map(|b| crate::training::truncate_ids(&vocab.encode(b, true).ids, max_src_len, truncation))
        .collect();
    let mut out = Vec::with_capacity(bodies.len());
    match decoding.strategy {
        Strategy::Greedy => {
            for chunk in srcs.chunks(64) {
                for seq in greedy_decode_batch(model, chunk, decoding.max_len)? {
                    out.push(ids_to_text(vocab, &seq.ids)?);
                }
            }
        }
        Strategy::Beam => {
            for src in &srcs {
                let h = beam_search_model(model, src, &decoding.beam())?;
                out.push(ids_to_text(vocab, &h.ids)?);
            }
        }
    }
    // one summary per line, whatever the tokenizer produced
    Ok(out.into_iter().map(|s| s.replace(['\n', '\r'], " ")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: AssemblyMode,
    pub seed: u64,
    /// Test-split F1 ×100.
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub best_step: usize,
    pub best_dev_rouge_l: f64,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub outputs: String,
    pub outputs_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Done(CellResult),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub mode: AssemblyMode,
    pub seed: u64,
    pub status: CellStatus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeMedian {
    pub mode: AssemblyMode,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<CellRow>,
    pub medians: Vec<ModeMedian>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

impl ResultsTable {
    /// Medians over successful cells, per mode, in row order of first appearance.
    pub fn from_rows(rows: Vec<CellRow>) -> Self {
        let mut modes: Vec<AssemblyMode> = Vec::new();
        for r in &rows {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        let medians = modes
            .into_iter()
            .filter_map(|mode| {
                let done: Vec<&CellResult> = rows
                    .iter()
                    .filter(|r| r.mode == mode)
                    .filter_map(|r| match &r.status {
                        CellStatus::Done(c) => Some(c),
                        CellStatus::Failed(_) => None,
                    })
                    .collect();
                let pick = |f: fn(&CellResult) -> f64| median(&done.iter().map(|c| f(c)).collect::<Vec<_>>());
                Some(ModeMedian {
                    mode,
                    rouge1: pick(|c| c.rouge1)?,
                    rouge2: pick(|c| c.rouge2)?,
                    rouge_l: pick(|c| c.rouge_l)?,
                    n: done.len(),
                })
            })
            .collect();
        Self { rows, medians }
    }

    pub fn median_rouge_l(&self, mode: AssemblyMode) -> Option<f64> {
        self.medians.iter().find(|m| m.mode == mode).map(|m| m.rouge_l)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>6} {:>8} {:>8} {:>8}", "Mode", "Seed", "ROUGE-1", "ROUGE-2", "ROUGE-L");
        for r in &self.rows {
            match &r.status {
                CellStatus::Done(c) => {
                    let _ = writeln!(
                        s,
                        "{:<10} {:>6} {:>8.2} {:>8.2} {:>8.2}",
                        r.mode.as_str(),
                        r.seed,
                        c.rouge1,
                        c.rouge2,
                        c.rouge_l
                    );
                }
                CellStatus::Failed(_) => {
                    let _ = writeln!(s, "{:<10} {:>6} {:>8} {:>8} {:>8}", r.mode.as_str(), r.seed, "failed", "-", "-");
                }
            }
        }
        let _ = writeln!(s);
        for m in &self.medians {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>8.2} {:>8.2} {:>8.2}",
                m.mode.as_str(),
                "median",
                m.rouge1,
                m.rouge2,
                m.rouge_l
            );
        }
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("mode,seed,rouge1,rouge2,rouge_l\n");
        for r in &self.rows {
            match &r.status {
                CellStatus::Done(c) => {
                    let _ = writeln!(s, "{},{},{:.2},{:.2},{:.2}", r.mode, r.seed, c.rouge1, c.rouge2, c.rouge_l);
                }
                CellStatus::Failed(_) => {
                    let _ = writeln!(s, "{},{},failed,failed,failed", r.mode, r.seed);
                }
            }
        }
        for m in &self.medians {
            let _ = writeln!(s, "{},median,{:.2},{:.2},{:.2}", m.mode, m.rouge1, m.rouge2, m.rouge_l);
        }
        s
    }
}

pub fn cell_dir(output_dir: &Path, mode: AssemblyMode, seed: u64) -> PathBuf {
    output_dir.join("cells").join(format!("{}_seed{seed}", mode.as_str()))
}

/// Reads one cell's persisted outcome, `None` if it never finished.
pub fn read_cell(output_dir: &Path, mode: AssemblyMode, seed: u64) -> Result<Option<CellStatus>> {
    let dir = cell_dir(output_dir, mode, seed);
    let result = dir.join("result.json");
    if result.exists() {
        let text = fs::read_to_string(&result).map_err(io_err(&result))?;
        let c: CellResult = serde_json::from_str(&text).map_err(|e| HarnessError::Artifact {
            path: result.clone(),
            msg: e.to_string(),
        })?;
        return Ok(Some(CellStatus::Done(c)));
    }
    let error = dir.join("error.txt");
    if error.exists() {
        let msg = fs::read_to_string(&error).map_err(io_err(&error))?;
        return Ok(Some(CellStatus::Failed(msg.trim().to_string())));
    }
    Ok(None)
}

/// Rebuilds the table from the artifacts of a (possibly partial) run.
pub fn report(output_dir: &Path) -> Result<ResultsTable> {
    let cfg_path = output_dir.join("config.json");
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let config = ExperimentConfig::from_json(&text)?;
    let mut rows = Vec::new();
    for &mode in &config.modes {
        for &seed in &config.seeds {
            let status = read_cell(output_dir, mode, seed)?
                .unwrap_or_else(|| CellStatus::Failed("not run".into()));
            rows.push(CellRow { mode, seed, status });
        }
    }
    Ok(ResultsTable::from_rows(rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub table: ResultsTable,
    pub computed: usize,
    pub reused: usize,
}

struct Shared {
    vocab: Vocabulary,
    model_config: ModelConfig,
    splits: Splits,
    encoder: Option<Checkpoint>,
}

fn prepare(config: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Shared> {
    let out = &config.output_dir;
    let data_dir = out.join("data");
    let names = ["train", "dev", "test"];
    let splits = if names.iter().all(|n| data_dir.join(format!("{n}.jsonl")).exists()) {
        log("reusing persisted splits");
        let load = |n: &str| corpus::load_jsonl(&data_dir.join(format!("{n}.jsonl")));
        Splits {
            train: load("train")?,
            dev: load("dev")?,
            test: load("test")?,
        }
    } else {
        let s = load_splits(&config.data)?;
        for (n, part) in names.iter().zip([&s.train, &s.dev, &s.test]) {
            write_file(&data_dir.join(format!("{n}.jsonl")), corpus::to_jsonl(part))?;
        }
        s
    };
    for (n, part) in names.iter().zip([&splits.train, &splits.dev, &splits.test]) {
        if part.is_empty() {
            return Err(HarnessError::Config(format!("{n} split is empty")));
        }
    }
    log(&format!(
        "splits: train {} / dev {} / test {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len()
    ));

    let vocab_path = out.join("vocab.txt");
    let vocab = if vocab_path.exists() {
        Vocabulary::load(&vocab_path)?
    } else {
        let texts = splits.train.iter().flat_map(|e| [e.body.as_str(), e.summary.as_str()]);
        let opts = TokenizerOptions {
            mode: config.tokenizer.mode,
            lowercase: config.tokenizer.lowercase,
        };
        let v = train_bpe(texts, config.tokenizer.vocab_size, opts)?;
        v.save(&vocab_path)?;
        log(&format!("trained vocabulary of {} tokens", v.len()));
        v
    };
    let mut model_config = config.model.clone();
    model_config.vocab_size = vocab.len();

    let encoder = if config.modes.iter().any(|m| m.needs_source()) {
        let path = out.join("pretrain").join("encoder.ckpt");
        if path.exists() {
            log("reusing pretrained encoder");
            Some(load_checkpoint(&path)?)
        } else {
            let texts: Vec<String> = splits
                .train
                .iter()
                .flat_map(|e| [e.body.clone(), e.summary.clone()])
                .collect();
            let metrics_path = out.join("pretrain").join("metrics.csv");
            let mut metrics = MetricsFile::create(&metrics_path)?;
            let mut enc_config = model_config.clone();
            enc_config.n_enc_layers = model_config.n_enc_layers.max(if config.modes.contains(&AssemblyMode::Warm2Warm) {
                model_config.n_dec_layers
            } else {
                0
            });
            log("pretraining encoder");
            let outcome = pretrain_mlm(&texts, &vocab, &enc_config, &config.pretrain, &mut |r| metrics.append(r))?;
            metrics.finish()?;
            let mut ckpt = outcome.checkpoint;
            ckpt.vocab_ref = Some("vocab.txt".into());
            save_checkpoint(&ckpt, &path)?;
            log(&format!(
                "pretraining done, MLM loss {:.4} -> {:.4}",
                outcome.losses.first().copied().unwrap_or(f64::NAN),
                outcome.losses.last().copied().unwrap_or(f64::NAN)
            ));
            Some(ckpt)
        }
    } else {
        None
    };
    Ok(Shared {
        vocab,
        model_config,
        splits,
        encoder,
    })
}

/// Line-buffered metrics CSV written as records arrive.
struct MetricsFile {
    path: PathBuf,
    file: fs::File,
    error: Option<std::io::Error>,
}

impl MetricsFile {
    fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut file = fs::File::create(path).map_err(io_err(path))?;
        writeln!(file, "{METRICS_HEADER}").map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            error: None,
        })
    }

    fn append(&mut self, r: &MetricRecord) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.file, "{}", r.csv_line()) {
                self.error = Some(e);
            }
        }
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(io_err(&self.path)(e)),
            None => Ok(()),
        }
    }
}

fn run_cell(config: &ExperimentConfig, shared: &Shared, mode: AssemblyMode, seed: u64, dir: &Path) -> Result<CellResult> {
    let assembled = assemble(shared.encoder.as_ref(), mode, &shared.model_config, seed)?;
    let mut assembled = assembled;
    assembled.vocab_ref = Some("vocab.txt".into());
    save_checkpoint(&assembled, &dir.join("assembled.ckpt"))?;

    let ft_config = TrainConfig {
        seed,
        ..config.finetune.clone()
    };
    let mut metrics = MetricsFile::create(&dir.join("metrics.csv"))?;
    let outcome = finetune(
        &assembled,
        &shared.vocab,
        &shared.splits.train,
        &shared.splits.dev,
        &ft_config,
        &config.eval_tokenization,
        &mut |r| metrics.append(r),
    )?;
    metrics.finish()?;
    let ckpt_path = dir.join("model.ckpt");
    let ckpt_bytes = outcome.checkpoint.to_bytes();
    write_file(&ckpt_path, &ckpt_bytes)?;

    let model = outcome.checkpoint.to_model()?;
    let bodies: Vec<String> = shared.splits.test.iter().map(|e| e.body.clone()).collect();
    let outputs = generate_summaries(
        &model,
        &shared.vocab,
        &bodies,
        ft_config.max_src_len,
        ft_config.truncation,
        &config.decoding,
    )?;
    let mut text = String::new();
    for o in &outputs {
        text.push_str(o);
        text.push('\n');
    }
    let outputs_path = dir.join("test_outputs.txt");
    write_file(&outputs_path, &text)?;
    let pairs: Vec<(&str, &str)> = outputs
        .iter()
        .zip(&shared.splits.test)
        .map(|(c, e)| (c.as_str(), e.summary.as_str()))
        .collect();
    let scores = corpus_rouge(&pairs, &config.eval_tokenization, Some(&shared.vocab))?;
    Ok(CellResult {
        mode,
        seed,
        rouge1: scores.rouge1.f1 * 100.0,
        rouge2: scores.rouge2.f1 * 100.0,
        rouge_l: scores.rouge_l.f1 * 100.0,
        best_step: outcome.best_step,
        best_dev_rouge_l: outcome.best_dev_rouge_l * 100.0,
        checkpoint: "model.ckpt".into(),
        checkpoint_sha256: sha256_hex(&ckpt_bytes),
        outputs: "test_outputs.txt".into(),
        outputs_sha256: sha256_hex(text.as_bytes()),
    })
}

/// Runs (or resumes) every requested cell and writes the results table.
/// A failing cell records `error.txt` and the remaining cells still run;
/// failed cells are retried on the next invocation.
pub fn run_experiment(config: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg_path = out.join("config.json");
    let cfg_json = config.to_json();
    if cfg_path.exists() {
        let existing = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
        if existing != cfg_json {
            return Err(HarnessError::Config(format!(
                "{} holds artifacts of a different experiment config",
                out.display()
            )));
        }
    } else {
        write_file(&cfg_path, &cfg_json)?;
    }

    let mut shared: Option<Shared> = None;
    let mut rows = Vec::new();
    let (mut computed, mut reused) = (0, 0);
    for &mode in &config.modes {
        for &seed in &config.seeds {
            if let Some(CellStatus::Done(c)) = read_cell(out, mode, seed)? {
                reused += 1;
                rows.push(CellRow {
                    mode,
                    seed,
                    status: CellStatus::Done(c),
                });
                continue;
            }
            if shared.is_none() {
                shared = Some(prepare(config, log)?);
            }
            let dir = cell_dir(out, mode, seed);
            let _ = fs::remove_file(dir.join("error.txt"));
            log(&format!("cell {mode} seed {seed}"));
            computed += 1;
            let status = match run_cell(config, shared.as_ref().unwrap(), mode, seed, &dir) {
                Ok(c) => {
                    let json = serde_json::to_string_pretty(&c).expect("result serializes") + "\n";
                    write_file(&dir.join("result.json"), json)?;
                    log(&format!("  test ROUGE-L {:.2}", c.rouge_l));
                    CellStatus::Done(c)
                }
                Err(e) => {
                    let msg = e.to_string();
                    write_file(&dir.join("error.txt"), format!("{msg}\n"))?;
                    log(&format!("  failed: {msg}"));
                    CellStatus::Failed(msg)
                }
            };
            rows.push(CellRow { mode, seed, status });
        }
    }
    let table = ResultsTable::from_rows(rows);
    write_file(&out.join("results.txt"), table.render_text())?;
    write_file(&out.join("results.csv"), table.render_csv())?;
    Ok(RunSummary {
        table,
        computed,
        reused,
    })
}

/// Encoded lengths of the longest source and target after truncation; used
/// to sanity-check configs against `max_positions`.
pub fn longest_encoded(vocab: &Vocabulary, examples: &[CorpusExample], config: &TrainConfig) -> (usize, usize) {
    examples.iter().fold((0, 0), |(s, t), ex| {
        let p = encode_pair(vocab, ex, config);
        (s.max(p.src.len()), t.max(p.tgt.len()))
    })
}
