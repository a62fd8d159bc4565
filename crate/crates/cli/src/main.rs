//! `islu`: generate corpora, stitch streams, train, evaluate, check gradients
//! and run models over a live token stream.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when data or a
//! model cannot be processed.

mod bundle;

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use bundle::{history_path, Bundle};
use islu::corpus::{build_vocab, gen_synthetic, load_corpus, stitch_streams, stitch_streams_labeled};
use islu::evaluation::{early_detection, evaluate, EarlyDetection, EvalReport, EvalSources};
use islu::models::gradcheck;
use islu::streaming::{EosMode, Event, Session};
use islu::training::{grid_search, train, TrainSpec};
use islu::Variant;

#[derive(Parser)]
#[command(name = "islu", version, about = "Incremental online intent detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Oracle,
    Predicted,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a keyword-separable synthetic corpus as TSV.
    GenCorpus {
        #[arg(long)]
        intents: usize,
        #[arg(long)]
        utts: usize,
        #[arg(long, default_value_t = 4)]
        len_min: usize,
        #[arg(long, default_value_t = 10)]
        len_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stitch a corpus into streams; one stream per line, `|` after utterance ends.
    Stitch {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        max_utts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant and write a checkpoint with its sidecar files.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        variant: Variant,
        /// `key=value` training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Search the hidden-size × dropout grid instead of training one point.
        #[arg(long)]
        grid: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on stitched streams; prints one CSV row per max_utts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Separate boundary model for predicted mode.
        #[arg(long)]
        eos_checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        max_utts: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Mode::Oracle)]
        mode: Mode,
        #[arg(long)]
        threshold: Option<f64>,
        /// Stitching seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Full JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory receiving one early-detection histogram CSV per max_utts.
        #[arg(long)]
        histogram_dir: Option<PathBuf>,
    },
    /// Read whitespace-separated tokens from stdin and print events as they occur.
    ///
    /// Without a boundary model every input line is treated as one utterance.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eos_checkpoint: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck {
        #[arg(long)]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus {
            intents,
            utts,
            len_min,
            len_max,
            seed,
            out,
        } => {
            eprintln!("seed: {seed}");
            gen_synthetic(intents, utts, (len_min, len_max), seed)?.save(&out)?;
        }
        Command::Stitch {
            corpus,
            max_utts,
            seed,
            out,
        } => {
            eprintln!("seed: {seed}");
            let corpus = load_corpus(&corpus)?;
            let vocab = build_vocab(&corpus, 1);
            let streams = stitch_streams(&corpus, &vocab, max_utts, seed)?;
            write(&out, &streams.dump(&vocab))?;
        }
        Command::Train {
            corpus,
            dev,
            variant,
            config,
            seed,
            epochs,
            grid,
            out,
        } => cmd_train(&corpus, &dev, variant, config.as_deref(), seed, epochs, grid, &out)?,
        Command::Eval {
            checkpoint,
            eos_checkpoint,
            corpus,
            max_utts,
            mode,
            threshold,
            seed,
            report,
            histogram_dir,
        } => cmd_eval(EvalArgs {
            checkpoint,
            eos_checkpoint,
            corpus,
            max_utts,
            mode,
            threshold,
            seed,
            report,
            histogram_dir,
        })?,
        Command::Stream {
            checkpoint,
            eos_checkpoint,
            threshold,
        } => cmd_stream(&checkpoint, eos_checkpoint.as_deref(), threshold)?,
        Command::Gradcheck { variant, seed } => {
            eprintln!("seed: {seed}");
            let r = gradcheck(variant, seed)?;
            println!(
                "{}\tmax_rel_error={:.3e}\tworst={}[{}]\tchecked={}",
                r.variant, r.max_rel_error, r.worst_tensor, r.worst_index, r.n_checked
            );
        }
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    corpus: &Path,
    dev: &Path,
    variant: Variant,
    config: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    grid: bool,
    out: &Path,
) -> Result<()> {
    let mut spec = match config {
        Some(p) => TrainSpec::load(variant, p)?,
        None => TrainSpec::new(variant),
    };
    if spec.variant() != variant {
        bail!("config file asks for {} but --variant is {variant}", spec.variant());
    }
    if let Some(s) = seed {
        spec.config.seed = s;
    }
    if let Some(e) = epochs {
        spec.epochs = e;
    }
    eprintln!("seed: {}", spec.seed());
    let train_corpus = load_corpus(corpus)?;
    let dev_corpus = load_corpus(dev)?;

    let outcome = if grid {
        let g = grid_search::<f64>(&spec, &train_corpus, &dev_corpus)?;
        for p in &g.points {
            eprintln!(
                "grid hidden_dim={} dropout={} dev={:.4}",
                p.hidden_dim, p.dropout, p.dev_score
            );
        }
        g.best
    } else {
        train::<f64>(&spec, &train_corpus, &dev_corpus)?
    };
    let h = &outcome.history;
    eprintln!(
        "{variant}: best epoch {} of {}, dev score {:.4}, hidden_dim={}, dropout={}",
        h.best_epoch,
        h.len(),
        h.best_dev_score(variant),
        outcome.model.config.hidden_dim,
        outcome.model.config.dropout
    );
    write(&history_path(out), &h.to_csv())?;
    Bundle {
        model: outcome.model,
        vocab: outcome.vocab,
        intents: outcome.intents,
    }
    .save(out)
}

struct EvalArgs {
    checkpoint: PathBuf,
    eos_checkpoint: Option<PathBuf>,
    corpus: PathBuf,
    max_utts: Vec<usize>,
    mode: Mode,
    threshold: Option<f64>,
    seed: u64,
    report: Option<PathBuf>,
    histogram_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct Cell<'a> {
    model: &'a str,
    mode: &'a str,
    metrics: EvalReport,
    early_detection: Option<EarlyDetection>,
}

fn model_name(main: &Bundle, eos: Option<&Bundle>) -> String {
    match eos {
        Some(e) => format!("{}+{}", main.model.variant(), e.model.variant()),
        None => main.model.variant().to_string(),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    eprintln!("seed: {}", args.seed);
    let main = Bundle::load(&args.checkpoint)?;
    let eos = args.eos_checkpoint.as_deref().map(Bundle::load).transpose()?;
    if let Some(e) = &eos {
        if e.vocab != main.vocab {
            bail!("the EOS checkpoint was trained with a different vocabulary");
        }
    }
    let corpus = load_corpus(&args.corpus)?;
    let variant = main.model.variant();

    let eos_source = match &eos {
        Some(e) => Some(&e.model),
        None => variant.has_eos().then_some(&main.model),
    };
    let intent_source = variant.has_intent().then_some(&main.model);
    let eos_source = match args.mode {
        Mode::Predicted if eos_source.is_none() => {
            bail!("predicted mode needs an EOS source; {variant} has none (use --eos-checkpoint)")
        }
        Mode::Predicted => eos_source,
        Mode::Oracle if intent_source.is_none() => eos_source,
        Mode::Oracle => None,
    };
    let threshold = args
        .threshold
        .or(eos_source.map(|m| m.config.eos_threshold))
        .unwrap_or(0.5);
    let sources = EvalSources {
        intent: intent_source,
        eos: eos_source,
        threshold,
    };

    let name = model_name(&main, eos.as_ref());
    let mode = match args.mode {
        Mode::Oracle => "oracle",
        Mode::Predicted => "predicted",
    };
    if let Some(dir) = &args.histogram_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut cells = Vec::new();
    println!("{}", EvalReport::CSV_HEADER);
    for &k in &args.max_utts {
        let streams = stitch_streams_labeled(&corpus, &main.vocab, &main.intents, k, args.seed)?;
        let metrics = evaluate(&sources, &streams)?;
        println!("{}", metrics.csv_row(&name));
        let early = match intent_source {
            Some(m) => Some(early_detection(m, &streams)?),
            None => None,
        };
        if let (Some(dir), Some(e)) = (&args.histogram_dir, &early) {
            write(&dir.join(format!("early_k{k}.csv")), &e.stable.to_csv())?;
        }
        cells.push(Cell {
            model: &name,
            mode,
            metrics,
            early_detection: early,
        });
    }
    if let Some(path) = &args.report {
        write(path, &serde_json::to_string_pretty(&cells)?)?;
    }
    Ok(())
}

fn top_k(dist: &[f64], labels: &[String], k: usize) -> String {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    idx.iter()
        .take(k)
        .map(|&i| format!("{}:{:.4}", labels[i], dist[i]))
        .collect::<Vec<_>>()
        .join(" ")
}

fn format_event(e: &Event<f64>, labels: &[String]) -> String {
    match e {
        Event::Hypothesis { position, intent_dist } => {
            format!("{position}\tHYPOTHESIS\t{}", top_k(intent_dist, labels, 3))
        }
        Event::EosDetected { position, eos_prob } => {
            format!("{position}\tEOS_DETECTED\teos:{eos_prob:.4}")
        }
        Event::IntentCommitted { span, intent_dist, .. } => {
            format!("{}\tINTENT_COMMITTED\t{}", span.1 - 1, top_k(intent_dist, labels, 3))
        }
    }
}

fn cmd_stream(checkpoint: &Path, eos_checkpoint: Option<&Path>, threshold: Option<f64>) -> Result<()> {
    let main = Bundle::load(checkpoint)?;
    let eos = eos_checkpoint.map(Bundle::load).transpose()?;
    if let Some(e) = &eos {
        if e.vocab != main.vocab {
            bail!("the EOS checkpoint was trained with a different vocabulary");
        }
    }
    let mut session = match &eos {
        Some(e) => Session::composite(&main.model, &e.model)?,
        None if main.model.variant().has_eos() => Session::open(&main.model, EosMode::Predicted)?,
        None => Session::open(&main.model, EosMode::Oracle)?,
    };
    if let Some(t) = threshold {
        session = session.with_threshold(t)?;
    }
    let oracle = session.mode() == EosMode::Oracle;

    let stdout = io::stdout();
    let mut out = stdout.lock();
    for line in io::stdin().lock().lines() {
        let line = line.context("reading standard input")?;
        let words: Vec<String> = line.split_whitespace().map(str::to_lowercase).collect();
        for (i, w) in words.iter().enumerate() {
            let flag = oracle.then_some(i + 1 == words.len());
            for e in session.push(main.vocab.lookup(w), flag)? {
                writeln!(out, "{}", format_event(&e, &main.intents))?;
            }
        }
        out.flush()?;
    }
    Ok(())
}
