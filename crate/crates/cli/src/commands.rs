use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tokenforge_core::corpus::{
    build_corpus, corpus_stats, list_records, read_encoded, read_record, render_overlay, validate_file, write_record,
    BpeVocab, BuildOptions, TokenRecord,
};
use tokenforge_core::evalkit::{edit_distance_report, RetrievalScoring};
use tokenforge_core::losses::LossWeights;
use tokenforge_core::model::{load_checkpoint, save_checkpoint};
use tokenforge_core::trainer::{
    generate_synthetic_corpus, retrieval_report, segmentation_report, train, SyntheticCorpusSpec, TrainConfig,
};

use crate::service::{router, AppState, LoadedModel};

#[derive(Debug, Parser)]
#[command(name = "tokenforge", version, about = "Token-level image-text alignment toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build, check, summarize and visualize token-mask corpora.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train an alignment model on a corpus directory.
    Train(TrainArgs),
    /// Score a checkpoint or a set of predictions; prints a JSON report.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the HTTP query service.
    Serve(ServeArgs),
    /// Write a small synthetic glyph corpus and a demo checkpoint.
    DemoData(DemoArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Turn character-level annotations into token records.
    Build {
        /// Directory of annotation JSON files.
        #[arg(long)]
        chars: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep this many randomly chosen tokens per record.
        #[arg(long)]
        select: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check every record; exits 1 if any record has violations.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to `<corpus>/vocab.json`.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Record, token and image-type counts.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
    /// Draw a record's token masks over its image.
    Render {
        /// Record metadata JSON.
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<corpus>/vocab.json`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Zero-shot segmentation fgIoU per record and token.
    Seg {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Token-to-image retrieval mAP.
    Retrieval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Normalized edit distance between line-paired prediction and reference files.
    Edit {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "CHECKPOINT_PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "0.0.0.0")]
    pub host: String,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub records: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optimizer steps for `demo.ckpt`; 0 skips training.
    #[arg(long, default_value_t = 300)]
    pub train_steps: usize,
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let written = serde_json::to_writer_pretty(&mut out, value)
        .map_err(std::io::Error::from)
        .and_then(|()| writeln!(out));
    match written {
        // a closed pipe (e.g. `| head`) is not a failure
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn corpus_vocab(corpus: &Path, vocab: Option<&Path>) -> Result<BpeVocab> {
    let path = vocab.map_or_else(|| corpus.join("vocab.json"), Path::to_path_buf);
    BpeVocab::load(&path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_records(corpus: &Path) -> Result<Vec<TokenRecord>> {
    let paths = list_records(corpus)?;
    if paths.is_empty() {
        bail!("no records in {}", corpus.display());
    }
    paths
        .iter()
        .map(|p| read_record(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn load_model(path: &Path) -> Result<(tokenforge_core::model::ModelParams, BpeVocab)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let vocab = ckpt.vocab.context("checkpoint has no vocabulary")?;
    Ok((ckpt.params, vocab))
}

#[derive(Serialize)]
struct ValidationSummary {
    records: usize,
    invalid: usize,
    failures: Vec<RecordFailure>,
}

#[derive(Serialize)]
struct RecordFailure {
    record: String,
    violations: Vec<String>,
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    final_loss: Option<f64>,
    best_epoch_loss: Option<f64>,
    out: PathBuf,
}

#[derive(Serialize)]
struct DemoSummary {
    records: usize,
    out: PathBuf,
    image: PathBuf,
    checkpoint: Option<PathBuf>,
}

/// Training settings for the bundled glyph demo.
pub fn demo_config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1000,
        max_steps: Some(steps),
        batch_size: 8,
        lr: 3e-3,
        patch_size: 8,
        encoder_dim: 32,
        embed_dim: 32,
        seed,
        weights: LossWeights {
            dis: 1.0,
            sim: 1.0,
            sig: 0.01,
        },
        ..Default::default()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(cmd) => run_corpus(cmd),
        Command::Train(args) => {
            let config = TrainConfig::load(&args.config)?;
            let vocab = corpus_vocab(&args.corpus, args.vocab.as_deref())?;
            let records = load_records(&args.corpus)?;
            let outcome = train(&config, &vocab, &records, Some(&args.out))?;
            print_json(&TrainSummary {
                steps: outcome.metrics.len(),
                final_loss: outcome.metrics.last().map(|m| m.loss),
                best_epoch_loss: outcome.best_epoch_loss,
                out: args.out,
            })
        }
        Command::Eval(cmd) => run_eval(cmd),
        Command::Serve(args) => serve(args),
        Command::DemoData(args) => demo_data(args),
    }
}

fn run_corpus(cmd: CorpusCommand) -> Result<()> {
    match cmd {
        CorpusCommand::Build {
            chars,
            vocab,
            out,
            select,
            seed,
        } => {
            let v = BpeVocab::load(&vocab)?;
            print_json(&build_corpus(&chars, &out, &v, &BuildOptions { select, seed })?)
        }
        CorpusCommand::Validate { corpus, vocab } => {
            let v = corpus_vocab(&corpus, vocab.as_deref())?;
            let paths = list_records(&corpus)?;
            let mut failures = Vec::new();
            for p in &paths {
                let report = validate_file(p, &v)?;
                if !report.is_valid() {
                    failures.push(RecordFailure {
                        record: p.display().to_string(),
                        violations: report.violations.iter().map(|x| format!("{x:?}")).collect(),
                    });
                }
            }
            let summary = ValidationSummary {
                records: paths.len(),
                invalid: failures.len(),
                failures,
            };
            print_json(&summary)?;
            if summary.invalid > 0 {
                bail!("{} of {} records failed validation", summary.invalid, summary.records);
            }
            Ok(())
        }
        CorpusCommand::Stats { corpus, top } => {
            let metas = list_records(&corpus)?
                .iter()
                .map(|p| read_encoded(p).map(|e| e.meta))
                .collect::<tokenforge_core::Result<Vec<_>>>()?;
            print_json(&corpus_stats(&metas, top)?)
        }
        CorpusCommand::Render { record, out } => {
            let rec = read_record(&record)?;
            render_overlay(&rec)
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn run_eval(cmd: EvalCommand) -> Result<()> {
    let report = match cmd {
        EvalCommand::Seg {
            checkpoint,
            corpus,
            threshold,
        } => {
            let (params, vocab) = load_model(&checkpoint)?;
            segmentation_report(&params, &vocab, &load_records(&corpus)?, threshold)?
        }
        EvalCommand::Retrieval { checkpoint, corpus } => {
            let (params, vocab) = load_model(&checkpoint)?;
            retrieval_report(&params, &vocab, &load_records(&corpus)?, &RetrievalScoring::MaxCell)?
        }
        EvalCommand::Edit { pred, gt } => edit_distance_report(&read_lines(&pred)?, &read_lines(&gt)?)?,
    };
    print_json(&report)
}

fn serve(args: ServeArgs) -> Result<()> {
    let model = LoadedModel::load(&args.checkpoint)?;
    let state = AppState::new(model, Some(args.checkpoint.clone()));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("serving on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn demo_data(args: DemoArgs) -> Result<()> {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
        records: args.records,
        seed: args.seed,
        ..Default::default()
    })?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (i, rec) in corpus.records.iter().enumerate() {
        write_record(&args.out, &format!("glyph{i:05}"), rec)?;
    }
    corpus.vocab.save(&args.out.join("vocab.json"))?;
    let image = args.out.join("demo.png");
    if let Some(first) = corpus.records.first() {
        first.image.save(&image).with_context(|| format!("writing {}", image.display()))?;
    }
    let checkpoint = if args.train_steps > 0 {
        let config = demo_config(args.train_steps, args.seed);
        std::fs::write(args.out.join("demo.conf"), config.to_text())?;
        let outcome = train(&config, &corpus.vocab, &corpus.records, None)?;
        let path = args.out.join("demo.ckpt");
        save_checkpoint(&path, &outcome.params, Some(&corpus.vocab))?;
        Some(path)
    } else {
        None
    };
    print_json(&DemoSummary {
        records: corpus.records.len(),
        out: args.out,
        image,
        checkpoint,
    })
}
