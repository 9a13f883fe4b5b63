//! Command-line surface: corpus generation, training, evaluation, single-text
//! reconstruction, and error-profile analysis. Every command is deterministic
//! given its config, inputs, and seed.

use c3::cascade::CascadeModel;
use c3::config::{ExperimentConfig, Manifest};
use c3::corpus::{self, CorpusSpec, Mode, ShuffleUnit};
use c3::eval::{self, EvalRecord};
use c3::tokenizer;
use c3::training::{self, TrainState};
use c3::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "c3", about = "context cascade compression experiments", version)]
struct Cli {
    /// Experiment config JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as JSON lines.
    GenCorpus(GenCorpusArgs),
    /// Train a cascade on a corpus file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus file.
    Eval(EvalArgs),
    /// Reconstruct one text with a trained checkpoint.
    Repeat(RepeatArgs),
    /// Compute the positional error profile from evaluation records.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    min: usize,
    #[arg(long, default_value_t = 256)]
    max: usize,
    /// prose | second_language | random_chars | shuffled
    #[arg(long, default_value = "prose")]
    mode: String,
    #[arg(long, default_value_t = 0.05)]
    injection_rate: f64,
    /// sentence | word
    #[arg(long, default_value = "sentence")]
    shuffle_unit: String,
    /// Output file; defaults to <out-dir>/corpus.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON-lines corpus to train on.
    #[arg(long)]
    corpus: PathBuf,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Token-count bin edges, e.g. 64,96,128,192,256.
    #[arg(long, value_delimiter = ',')]
    bins: Option<Vec<usize>>,
    /// Generation budget per document.
    #[arg(long, default_value_t = 512)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct RepeatArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 512)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// records.jsonl written by `eval`.
    #[arg(long)]
    records: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| Error::io(cli.out_dir.display().to_string(), e))?;
    match &cli.command {
        Command::GenCorpus(args) => cmd_gen_corpus(&cli, args),
        Command::Train(args) => cmd_train(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Repeat(args) => cmd_repeat(&cli, args),
        Command::Analyze(args) => cmd_analyze(&cli, args),
    }
}

fn sha_json<T: Serialize>(value: &T) -> String {
    let canon = serde_json::to_vec(value).expect("serializes");
    Sha256::digest(&canon).iter().map(|b| format!("{b:02x}")).collect()
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("this command requires --config".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.corpus.seed = seed;
    }
    Ok(cfg)
}

fn cmd_gen_corpus(cli: &Cli, args: &GenCorpusArgs) -> Result<()> {
    let spec = CorpusSpec {
        seed: cli.seed.unwrap_or(0),
        n_documents: args.n,
        min_tokens: args.min,
        max_tokens: args.max,
        mode: args.mode.parse::<Mode>()?,
        injection_rate: args.injection_rate,
        shuffle_unit: match args.shuffle_unit.as_str() {
            "sentence" => ShuffleUnit::Sentence,
            "word" => ShuffleUnit::Word,
            other => {
                return Err(Error::Spec(format!(
                    "unknown shuffle unit `{other}`; valid units: sentence, word"
                )))
            }
        },
    };
    let docs = corpus::generate(&spec)?;
    let out = args.out.clone().unwrap_or_else(|| cli.out_dir.join("corpus.jsonl"));
    corpus::write_jsonl(&docs, &out)?;
    c3::config::write_manifest(
        &Manifest {
            config_hash: sha_json(&spec),
            command: "gen-corpus".into(),
            artifacts: vec![out.display().to_string()],
        },
        &cli.out_dir,
    )?;
    println!("wrote {} documents to {}", docs.len(), out.display());
    Ok(())
}

fn encoded_docs(path: &Path, max_len: usize) -> Result<Vec<Vec<usize>>> {
    let docs = corpus::read_jsonl(path)?;
    let mut out = Vec::with_capacity(docs.len());
    for d in &docs {
        let toks = tokenizer::encode(d.text.as_bytes());
        if toks.len() > max_len {
            return Err(Error::SequenceTooLong {
                len: toks.len(),
                max: max_len,
            });
        }
        out.push(toks);
    }
    Ok(out)
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    if !args.corpus.exists() {
        return Err(Error::Usage(format!(
            "corpus file not found: {}",
            args.corpus.display()
        )));
    }
    let cfg = load_config(cli)?;
    let hash = cfg.hash();
    let (mut model, train_cfg, mut state) = match &args.resume {
        Some(path) => {
            let (model, train_cfg, state) = training::load_checkpoint(path)?;
            println!("resuming from step {}", state.step);
            (model, train_cfg, state)
        }
        None => {
            let model = CascadeModel::<f32>::init(cfg.cascade.clone(), cfg.train.seed)?;
            let state = TrainState::new(&model.store, cfg.train.seed);
            (model, cfg.train.clone(), state)
        }
    };
    let docs = encoded_docs(&args.corpus, model.config.max_text_len())?;
    let curve = training::train(&mut model, &docs, &train_cfg, &mut state, Some(&cli.out_dir))?;
    c3::config::write_manifest(
        &Manifest {
            config_hash: hash,
            command: "train".into(),
            artifacts: vec![
                cli.out_dir.join("checkpoint.bin").display().to_string(),
                cli.out_dir.join("loss.csv").display().to_string(),
            ],
        },
        &cli.out_dir,
    )?;
    match curve.last() {
        Some(row) => println!("finished at step {} with loss {:.6}", row.step, row.loss),
        None => println!("no steps to run"),
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let (model, train_cfg, _) = training::load_checkpoint(&args.checkpoint)?;
    let docs = corpus::read_jsonl(&args.corpus)?;
    let records = eval::evaluate(&model, &docs, args.max_new_tokens, cli.workers)?;
    let bins = args.bins.clone().unwrap_or_else(|| vec![64, 96, 128, 192, 256]);
    let report = eval::bin_report(&records, &bins)?;

    let records_path = cli.out_dir.join("records.jsonl");
    let err = |e: std::io::Error| Error::io(records_path.display().to_string(), e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(&records_path).map_err(err)?);
    for r in &records {
        serde_json::to_writer(&mut w, r).map_err(|e| err(e.into()))?;
        w.write_all(b"\n").map_err(err)?;
    }
    w.flush().map_err(err)?;

    eval::write_report_json(&report, &cli.out_dir.join("report.json"))?;
    eval::write_report_csv(&report, &cli.out_dir.join("report.csv"))?;
    eval::write_deciles_csv(&report.deciles, &cli.out_dir.join("deciles.csv"))?;
    c3::config::write_manifest(
        &Manifest {
            config_hash: sha_json(&(&model.config, &train_cfg)),
            command: "eval".into(),
            artifacts: ["records.jsonl", "report.json", "report.csv", "deciles.csv"]
                .iter()
                .map(|f| cli.out_dir.join(f).display().to_string())
                .collect(),
        },
        &cli.out_dir,
    )?;

    let mean = records.iter().map(|r| r.precision).sum::<f64>() / records.len().max(1) as f64;
    println!("evaluated {} documents, mean precision {mean:.4}", records.len());
    Ok(())
}

fn cmd_repeat(cli: &Cli, args: &RepeatArgs) -> Result<()> {
    if args.text.is_empty() {
        return Err(Error::Usage("--text must be non-empty".into()));
    }
    let (model, _, _) = training::load_checkpoint(&args.checkpoint)?;
    let tokens = tokenizer::encode(args.text.as_bytes());
    let rec = model.reconstruct(&tokens, args.max_new_tokens)?;
    let bytes = tokenizer::decode(&rec.tokens)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&bytes).map_err(|e| Error::io("stdout", e))?;
    stdout.write_all(b"\n").map_err(|e| Error::io("stdout", e))?;
    let _ = cli;
    Ok(())
}

fn cmd_analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<()> {
    let err = |e: std::io::Error| Error::io(args.records.display().to_string(), e);
    let file = std::fs::File::open(&args.records).map_err(err)?;
    let mut records: Vec<EvalRecord> = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(err)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{}: bad record: {e}", args.records.display())))?,
        );
    }
    let profile = eval::positional_error_profile(&records);
    let out = cli.out_dir.join("deciles.csv");
    eval::write_deciles_csv(&profile, &out)?;
    let total_errors: usize = records.iter().map(|r| r.error_positions.len()).sum();
    println!(
        "{} records, {} errors; profile written to {}",
        records.len(),
        total_errors,
        out.display()
    );
    for (i, d) in profile.iter().enumerate() {
        match d {
            Some(f) => println!("decile {:2}: {f:.4}", i + 1),
            None => println!("decile {:2}: null", i + 1),
        }
    }
    Ok(())
}
