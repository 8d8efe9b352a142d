//! `warmsum` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use warmsum::assembly::{assemble, load_checkpoint, save_checkpoint, AssemblyMode, Checkpoint};
use warmsum::corpus::{self, SplitRatios, Splits};
use warmsum::harness::{self, DecodingConfig, ExperimentConfig, Strategy, SyntheticConfig};
use warmsum::model::{ModelConfig, ModelKind};
use warmsum::rouge::{corpus_rouge_detailed, EvalTokenMode, EvalTokenization};
use warmsum::tokenizer::{train_bpe, PretokenizeMode, TokenizerOptions, Vocabulary};
use warmsum::training::{finetune, metrics_csv, pretrain_mlm, TrainConfig, TrainError};

#[derive(Debug, Parser)]
#[command(name = "warmsum", version, about = "Warm-started transformer summarization at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a BPE vocabulary on the bodies and abstracts of a JSONL corpus.
    TokenizerTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 256)]
        vocab_size: usize,
        #[arg(long, default_value = "whitespace")]
        mode: PretokenizeMode,
        #[arg(long)]
        lowercase: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// MLM-pretrain an encoder on the bodies and abstracts of a JSONL corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        configs: ConfigFiles,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV (default: next to the checkpoint).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Build a seq2seq checkpoint in one of the three assembly modes.
    Assemble {
        #[arg(long, value_parser = parse_mode)]
        mode: AssemblyMode,
        /// Pretrained encoder checkpoint; required for WARM modes.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Model config JSON (default: the encoder's config, or defaults).
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Vocabulary whose size overrides the config's vocab_size.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a seq2seq checkpoint on JSONL train/dev splits.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Summarize one body per input line, writing one summary per line.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Score aligned candidate/reference files (one text per line).
    Evaluate {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        lowercase: bool,
        /// Score subword ids instead of whitespace words (needs --vocab).
        #[arg(long)]
        subword: bool,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Per-line and aggregate CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Corpus statistics table for a JSONL corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        /// Dataset name in the table (default: file stem).
        #[arg(long)]
        name: Option<String>,
        #[arg(long, value_enum, default_value_t = StatsFormat::Text)]
        format: StatsFormat,
        #[arg(long, default_value_t = 0.8)]
        train_ratio: f64,
        #[arg(long, default_value_t = 0.1)]
        dev_ratio: f64,
        #[arg(long, default_value_t = 0.1)]
        test_ratio: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Drop examples matching the built-in keyword blacklist first.
        #[arg(long)]
        blacklist: bool,
    },
    /// Render the results table of an experiment directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = StatsFormat::Text)]
        format: StatsFormat,
    },
    /// Run (or resume) a full experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Experiment config utilities.
    Config {
        /// Print the default experiment config as JSON.
        #[arg(long, required = true)]
        print_defaults: bool,
    },
    /// Write the synthetic benchmark corpus as JSONL.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
struct ConfigFiles {
    /// Model config JSON.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Training config JSON.
    #[arg(long)]
    train_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DecodingArgs {
    /// Beam width; 0 selects greedy decoding.
    #[arg(long, default_value_t = 4)]
    beam_size: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long, default_value_t = 64)]
    max_src_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StatsFormat {
    Text,
    Csv,
}

fn parse_mode(s: &str) -> Result<AssemblyMode, String> {
    s.parse::<AssemblyMode>().map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Numeric(m) => m,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn train_failure(e: TrainError) -> Failure {
    if e.is_numeric() {
        Failure::Numeric(e.to_string())
    } else {
        Failure::Data(e.to_string())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_vocab(path: &Path) -> Result<Vocabulary, Failure> {
    Vocabulary::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::TokenizerTrain {
            corpus: path,
            vocab_size,
            mode,
            lowercase,
            out,
        } => {
            let exs = corpus::load_jsonl(&path).map_err(data)?;
            let texts = exs.iter().flat_map(|e| [e.body.as_str(), e.summary.as_str()]);
            let vocab = train_bpe(texts, vocab_size, TokenizerOptions { mode, lowercase }).map_err(data)?;
            vocab.save(&out).map_err(data)?;
            println!("vocabulary of {} tokens written to {}", vocab.len(), out.display());
        }
        Command::Pretrain {
            corpus: path,
            vocab,
            configs,
            out,
            metrics,
        } => {
            let vocab = load_vocab(&vocab)?;
            let mut model: ModelConfig = match &configs.model_config {
                Some(p) => read_json(p)?,
                None => ModelConfig::default(),
            };
            model.vocab_size = vocab.len();
            let train: TrainConfig = match &configs.train_config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            let exs = corpus::load_jsonl(&path).map_err(data)?;
            let texts: Vec<String> = exs.iter().flat_map(|e| [e.body.clone(), e.summary.clone()]).collect();
            let mut records = Vec::new();
            let outcome = pretrain_mlm(&texts, &vocab, &model, &train, &mut |r| {
                eprintln!("step {} loss {:.4}", r.step, r.loss);
                records.push(r.clone());
            })
            .map_err(train_failure)?;
            save_checkpoint(&outcome.checkpoint, &out).map_err(data)?;
            write(&metrics.unwrap_or_else(|| out.with_extension("metrics.csv")), metrics_csv(&records))?;
        }
        Command::Assemble {
            mode,
            encoder,
            model_config,
            vocab,
            seed,
            out,
        } => {
            if mode.needs_source() && encoder.is_none() {
                return Err(Failure::Usage(format!("--mode {mode} requires --encoder <checkpoint>")));
            }
            let source = encoder.as_deref().map(load_ckpt).transpose()?;
            let mut config = match (&model_config, &source) {
                (Some(p), _) => read_json(p)?,
                (None, Some(src)) => ModelConfig {
                    n_dec_layers: src.config.n_enc_layers,
                    ..src.config.clone()
                },
                (None, None) => ModelConfig::default(),
            };
            if let Some(v) = &vocab {
                config.vocab_size = load_vocab(v)?.len();
            }
            let ckpt = assemble(source.as_ref(), mode, &config, seed).map_err(data)?;
            save_checkpoint(&ckpt, &out).map_err(data)?;
            println!("{mode} checkpoint written to {} ({})", out.display(), ckpt.hash());
        }
        Command::Finetune {
            checkpoint,
            vocab,
            train,
            dev,
            train_config,
            out,
            metrics,
        } => {
            let ckpt = load_ckpt(&checkpoint)?;
            if ckpt.kind != ModelKind::Seq2Seq {
                return Err(Failure::Data(format!("{} is not a seq2seq checkpoint", checkpoint.display())));
            }
            let vocab = load_vocab(&vocab)?;
            let config: TrainConfig = match &train_config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            let train = corpus::load_jsonl(&train).map_err(data)?;
            let dev = corpus::load_jsonl(&dev).map_err(data)?;
            let outcome = finetune(&ckpt, &vocab, &train, &dev, &config, &EvalTokenization::default(), &mut |r| {
                eprintln!("{}", r.csv_line());
            })
            .map_err(train_failure)?;
            save_checkpoint(&outcome.checkpoint, &out).map_err(data)?;
            write(&metrics.unwrap_or_else(|| out.with_extension("metrics.csv")), metrics_csv(&outcome.metrics))?;
            println!(
                "best dev ROUGE-L {:.2} at step {}",
                outcome.best_dev_rouge_l * 100.0,
                outcome.best_step
            );
        }
        Command::Generate {
            checkpoint,
            vocab,
            input,
            out,
            decoding,
        } => {
            let model = load_ckpt(&checkpoint)?.to_model().map_err(data)?;
            let vocab = load_vocab(&vocab)?;
            let bodies = read_lines(&input)?;
            let config = DecodingConfig {
                strategy: if decoding.beam_size == 0 { Strategy::Greedy } else { Strategy::Beam },
                beam_size: decoding.beam_size,
                alpha: decoding.alpha,
                max_len: decoding.max_len,
                no_repeat_ngram: None,
            };
            let summaries = harness::generate_summaries(
                &model,
                &vocab,
                &bodies,
                decoding.max_src_len.min(model.config.max_positions),
                Default::default(),
                &config,
            )
            .map_err(data)?;
            let mut text = summaries.join("\n");
            if !summaries.is_empty() {
                text.push('\n');
            }
            write(&out, text)?;
        }
        Command::Evaluate {
            candidates,
            references,
            lowercase,
            subword,
            vocab,
            csv,
        } => {
            let cands = read_lines(&candidates)?;
            let refs = read_lines(&references)?;
            if cands.len() != refs.len() {
                return Err(Failure::Data(format!(
                    "{} candidates but {} references",
                    cands.len(),
                    refs.len()
                )));
            }
            if subword && vocab.is_none() {
                return Err(Failure::Usage("--subword requires --vocab".into()));
            }
            let vocab = vocab.as_deref().map(load_vocab).transpose()?;
            let tok = EvalTokenization {
                mode: if subword { EvalTokenMode::SubwordIds } else { EvalTokenMode::WhitespaceWords },
                lowercase,
            };
            let pairs: Vec<(&str, &str)> = cands.iter().map(String::as_str).zip(refs.iter().map(String::as_str)).collect();
            let (per, agg) = corpus_rouge_detailed(&pairs, &tok, vocab.as_ref()).map_err(data)?;
            for (name, s) in [("ROUGE-1", agg.rouge1), ("ROUGE-2", agg.rouge2), ("ROUGE-L", agg.rouge_l)] {
                println!(
                    "{name}: P {:.2} R {:.2} F1 {:.2}",
                    s.precision * 100.0,
                    s.recall * 100.0,
                    s.f1 * 100.0
                );
            }
            if let Some(path) = csv {
                let mut s = String::from("line,r1_p,r1_r,r1_f,r2_p,r2_r,r2_f,rl_p,rl_r,rl_f\n");
                let row = |label: String, p: &warmsum::rouge::PairRouge| {
                    let mut line = label;
                    for sc in [p.rouge1, p.rouge2, p.rouge_l] {
                        line.push_str(&format!(
                            ",{:.4},{:.4},{:.4}",
                            sc.precision * 100.0,
                            sc.recall * 100.0,
                            sc.f1 * 100.0
                        ));
                    }
                    line + "\n"
                };
                for (i, p) in per.iter().enumerate() {
                    s.push_str(&row((i + 1).to_string(), p));
                }
                let mean = warmsum::rouge::PairRouge {
                    rouge1: agg.rouge1,
                    rouge2: agg.rouge2,
                    rouge_l: agg.rouge_l,
                };
                s.push_str(&row("mean".into(), &mean));
                write(&path, s)?;
            }
        }
        Command::Stats {
            corpus: path,
            name,
            format,
            train_ratio,
            dev_ratio,
            test_ratio,
            split_seed,
            blacklist,
        } => {
            let mut exs = corpus::load_jsonl(&path).map_err(data)?;
            if blacklist {
                exs = corpus::filter_blacklist(exs, corpus::DEFAULT_BLACKLIST).0;
            }
            let ratios = SplitRatios {
                train: train_ratio,
                dev: dev_ratio,
                test: test_ratio,
            };
            let splits: Splits = corpus::split(&exs, &ratios, split_seed).map_err(|e| match e {
                corpus::CorpusError::Ratios(m) => Failure::Usage(m),
                other => data(other),
            })?;
            let stats = corpus::compute_stats(&splits);
            let name = name.unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "corpus".into())
            });
            let rendered = match format {
                StatsFormat::Text => corpus::render_stats_table(&[(&name, stats)]),
                StatsFormat::Csv => corpus::render_stats_csv(&[(&name, stats)]),
            };
            print!("{rendered}");
        }
        Command::Report { dir, format } => {
            let table = harness::report(&dir).map_err(data)?;
            match format {
                StatsFormat::Text => print!("{}", table.render_text()),
                StatsFormat::Csv => print!("{}", table.render_csv()),
            }
        }
        Command::Run { config } => {
            let text = fs::read_to_string(&config).map_err(|e| Failure::Data(format!("{}: {e}", config.display())))?;
            let config = ExperimentConfig::from_json(&text).map_err(|e| Failure::Usage(e.to_string()))?;
            config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let summary = harness::run_experiment(&config, &mut |m| eprintln!("{m}")).map_err(|e| {
                if e.is_numeric() {
                    Failure::Numeric(e.to_string())
                } else {
                    data(e)
                }
            })?;
            eprintln!("{} cells computed, {} reused", summary.computed, summary.reused);
            print!("{}", summary.table.render_text());
            let failed = summary
                .table
                .rows
                .iter()
                .filter(|r| matches!(r.status, harness::CellStatus::Failed(_)))
                .count();
            if failed > 0 {
                return Err(Failure::Data(format!("{failed} cell(s) failed; see error.txt in their directories")));
            }
        }
        Command::Config { .. } => print!("{}", ExperimentConfig::default().to_json()),
        Command::Synth { out, n, seed } => {
            let defaults = SyntheticConfig::default();
            let cfg = SyntheticConfig {
                n_examples: n.unwrap_or(defaults.n_examples),
                seed: seed.unwrap_or(defaults.seed),
                ..defaults
            };
            let exs = harness::synthetic::generate(&cfg).map_err(Failure::Usage)?;
            corpus::save_jsonl(&exs, &out).map_err(data)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
