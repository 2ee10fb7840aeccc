use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use nbkd::corpus::{
    write_pseudo_labels, ExternalScoreTable, LabelFormat, NBestCorpus, ReferenceSet, SourceCorpus,
};
use nbkd::distill::{kd_top1, ki_select, rerank_labels};
use nbkd::features::{assemble_matrix, FeatureMatrix, FeatureSpec, NativeFeature};
use nbkd::metrics::{bleu_signature, chrf_signature, corpus_bleu_raw, corpus_chrf, Smoothing};
use nbkd::mira::{tune_mira, InitWeights, MiraConfig, WeightVector};
use nbkd::pipeline::{format_status, run_selftrain, Ledger, PipelineConfig};
use nbkd::rerank::{
    beam_sweep, oracle_select, rerank, rerank_scored, select_models, OracleMode, SWEEP_HEADER,
};

#[derive(Parser, Debug)]
#[command(author, version, about = "n-best reranking and distillation toolkit")]
struct Cli {
    /// Log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score a hypothesis file against references
    Evaluate(EvaluateArgs),
    /// Build a feature matrix from an n-best list
    Assemble(AssembleArgs),
    /// Tune reranker weights with batch MIRA
    Tune(TuneArgs),
    /// Select one hypothesis per sentence with tuned weights
    Rerank(RerankArgs),
    /// Oracle or anti-oracle selection and beam-size sweeps
    Oracle(OracleArgs),
    /// Write pseudo-labels for a transfer set
    Distill(DistillArgs),
    /// Run the iterative self-training loop
    Selftrain(SelftrainArgs),
    /// Print the iteration ledger of a self-training run
    Status(StatusArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Metric {
    Bleu,
    Chrf,
}

#[derive(Parser, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    /// Comma-separated reference files
    #[arg(long, value_delimiter = ',', required = true)]
    refs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "bleu")]
    metric: Metric,
}

#[derive(Parser, Debug)]
struct AssembleArgs {
    #[arg(long)]
    nbest: PathBuf,
    /// Native features: mbr_bleu, mbr_chrf, len, len_ratio
    #[arg(long, value_delimiter = ',')]
    native: Vec<NativeFeature>,
    /// Score names copied from the n-best file (`total` is the last field)
    #[arg(long, value_delimiter = ',')]
    passthrough: Vec<String>,
    /// External score files as NAME=FILE
    #[arg(long = "scores", value_parser = parse_named_path)]
    scores: Vec<(String, PathBuf)>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Init {
    Baseline,
    Zeros,
    Uniform,
}

#[derive(Parser, Debug)]
struct TuneArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    nbest: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    refs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    c: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "baseline")]
    init: Init,
    /// Start from an existing weights file instead of --init
    #[arg(long)]
    init_weights: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Parser, Debug)]
struct RerankArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    nbest: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Keep only the K features with largest |weight|
    #[arg(long)]
    top_k_models: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    refs: Vec<PathBuf>,
    /// Print corpus BLEU of the selections (needs --refs)
    #[arg(long)]
    report: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Mode {
    Oracle,
    Anti,
}

#[derive(Parser, Debug)]
struct OracleArgs {
    #[arg(long)]
    nbest: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    refs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "oracle")]
    mode: Mode,
    /// Beam sizes; writes the sweep table instead of selections
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum StrategyArg {
    Kd,
    Ki,
    Rerank,
}

#[derive(Parser, Debug)]
struct DistillArgs {
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long)]
    nbest: PathBuf,
    /// Source sentences, one per line, aligned with the n-best lists
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    top_k_models: Option<usize>,
    /// Original references for `ki`
    #[arg(long, value_delimiter = ',')]
    orig_refs: Vec<PathBuf>,
    /// Output prefix
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "parallel", value_parser = parse_format)]
    format: LabelFormat,
}

#[derive(Parser, Debug)]
struct SelftrainArgs {
    /// TOML or JSON configuration
    #[arg(long)]
    config: PathBuf,
    /// Continue the run recorded in the working directory
    #[arg(long)]
    resume: bool,
}

#[derive(Parser, Debug)]
struct StatusArgs {
    #[arg(long)]
    workdir: PathBuf,
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), path.into()))
        }
        _ => Err(format!("expected NAME=FILE, got `{s}`")),
    }
}

fn parse_format(s: &str) -> Result<LabelFormat, String> {
    s.parse().map_err(|e: nbkd::Error| e.to_string())
}

/// Writes to `path`, or stdout when absent.
fn emit(path: Option<&Path>, body: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => io::stdout()
            .lock()
            .write_all(body)
            .context("writing stdout"),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .collect::<io::Result<_>>()
        .with_context(|| format!("reading {}", path.display()))
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let hyps = read_lines(&args.hyp)?;
    let streams: Vec<Vec<String>> = args
        .refs
        .iter()
        .map(|p| read_lines(p))
        .collect::<Result<_>>()?;
    for (p, s) in args.refs.iter().zip(&streams) {
        if s.len() != hyps.len() {
            bail!(
                "{} has {} lines, hypotheses have {}",
                p.display(),
                s.len(),
                hyps.len()
            );
        }
    }
    let refs: Vec<Vec<String>> = (0..hyps.len())
        .map(|i| streams.iter().map(|s| s[i].clone()).collect())
        .collect();
    let nrefs = streams.len();
    let out = match args.metric {
        Metric::Bleu => {
            let score = corpus_bleu_raw(&hyps, &refs, Smoothing::Exp);
            format!(
                "BLEU\t{:.4}\nsignature\t{}\n",
                score.value,
                bleu_signature(nrefs, Smoothing::Exp)
            )
        }
        Metric::Chrf => {
            let pairs: Vec<(String, Vec<String>)> = hyps.into_iter().zip(refs).collect();
            let score = corpus_chrf(&pairs);
            format!(
                "chrF\t{:.4}\nsignature\t{}\n",
                score.value,
                chrf_signature(nrefs)
            )
        }
    };
    emit(None, out.as_bytes())
}

fn assemble(args: AssembleArgs) -> Result<()> {
    let corpus = NBestCorpus::from_path(&args.nbest)?;
    let tables = args
        .scores
        .iter()
        .map(|(name, path)| ExternalScoreTable::from_path(path, name))
        .collect::<nbkd::Result<Vec<_>>>()?;
    let spec = FeatureSpec {
        passthrough: args.passthrough,
        native: args.native,
    };
    let matrix = assemble_matrix(&corpus, &spec, &tables)?;
    let mut buf = Vec::new();
    matrix.write_tsv(&mut buf)?;
    emit(args.out.as_deref(), &buf)
}

fn tune(args: TuneArgs) -> Result<()> {
    let matrix = FeatureMatrix::from_path(&args.matrix)?;
    let corpus = NBestCorpus::from_path(&args.nbest)?;
    let refs = ReferenceSet::from_paths(&args.refs)?;
    let init = match (&args.init_weights, args.init) {
        (Some(p), _) => InitWeights::Given(WeightVector::from_path(p)?),
        (None, Init::Baseline) => InitWeights::Baseline,
        (None, Init::Zeros) => InitWeights::Zeros,
        (None, Init::Uniform) => InitWeights::Uniform,
    };
    let config = MiraConfig {
        c: args.c,
        epochs: args.epochs,
        seed: args.seed,
        init,
    };
    let run = tune_mira(&matrix, &corpus, &refs, &config)?;
    log::info!(
        "best epoch {} with tune BLEU {:.4}",
        run.best_epoch,
        run.best_bleu()
    );
    let mut buf = Vec::new();
    run.best_weights
        .write_tsv(&mut buf, Some((run.best_epoch, run.best_bleu())))?;
    emit(args.out.as_deref(), &buf)
}

fn rerank_cmd(args: RerankArgs) -> Result<()> {
    let matrix = FeatureMatrix::from_path(&args.matrix)?;
    let corpus = NBestCorpus::from_path(&args.nbest)?;
    let weights = WeightVector::from_path(&args.weights)?;
    let mask = args.top_k_models.map(|k| select_models(&weights, k));
    if args.report && args.refs.is_empty() {
        bail!("--report needs --refs");
    }
    let result = if args.refs.is_empty() {
        rerank(&matrix, &corpus, &weights, mask.as_ref())?
    } else {
        let refs = ReferenceSet::from_paths(&args.refs)?;
        rerank_scored(&matrix, &corpus, &weights, mask.as_ref(), &refs)?
    };
    let mut buf = Vec::new();
    result.write_tsv(&mut buf)?;
    if args.out.is_some() {
        emit(args.out.as_deref(), &buf)?;
    }
    if args.report {
        let active = match &mask {
            Some(m) => m.active.join(","),
            None => weights.names().join(","),
        };
        let bleu = result.corpus_score.map(|s| s.value).unwrap_or(0.0);
        println!("active\t{active}");
        println!("BLEU\t{bleu:.4}");
    } else if args.out.is_none() {
        emit(None, &buf)?;
    }
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let corpus = NBestCorpus::from_path(&args.nbest)?;
    let refs = ReferenceSet::from_paths(&args.refs)?;
    let mut buf = Vec::new();
    if args.sweep.is_empty() {
        let mode = match args.mode {
            Mode::Oracle => OracleMode::Oracle,
            Mode::Anti => OracleMode::AntiOracle,
        };
        let result = oracle_select(&corpus, &refs, mode)?;
        result.write_tsv(&mut buf)?;
        if let Some(s) = result.corpus_score {
            eprintln!("BLEU\t{:.4}", s.value);
        }
    } else {
        buf.extend_from_slice(b"#selection\tgreedy per sentence by smoothed sentence BLEU\n");
        buf.extend_from_slice(SWEEP_HEADER.as_bytes());
        for row in beam_sweep(&corpus, &refs, &args.sweep)? {
            if row.short_lists > 0 {
                log::warn!("n={}: {} lists are shorter than n", row.n, row.short_lists);
            }
            buf.extend_from_slice(row.to_tsv().as_bytes());
        }
    }
    eprintln!(
        "note: oracle and anti-oracle choose greedily per sentence by smoothed sentence BLEU"
    );
    emit(args.out.as_deref(), &buf)
}

fn distill(args: DistillArgs) -> Result<()> {
    let corpus = NBestCorpus::from_path(&args.nbest)?;
    let sources = SourceCorpus::from_path(&args.src)?;
    let labels = match args.strategy {
        StrategyArg::Kd => kd_top1(&corpus),
        StrategyArg::Ki => {
            if args.orig_refs.is_empty() {
                bail!("--strategy ki needs --orig-refs");
            }
            ki_select(&corpus, &ReferenceSet::from_paths(&args.orig_refs)?)?
        }
        StrategyArg::Rerank => {
            let (Some(m), Some(w)) = (&args.matrix, &args.weights) else {
                bail!("--strategy rerank needs --matrix and --weights");
            };
            let matrix = FeatureMatrix::from_path(m)?;
            let weights = WeightVector::from_path(w)?;
            let mask = args.top_k_models.map(|k| select_models(&weights, k));
            rerank_labels(&matrix, &corpus, &weights, mask.as_ref())?
        }
    };
    log::info!(
        "{} labels from {} ({})",
        labels.len(),
        labels.strategy,
        labels.provenance
    );
    let written = write_pseudo_labels(&sources, &labels.labels, args.format, &args.out)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn selftrain(args: SelftrainArgs) -> Result<()> {
    let config = PipelineConfig::from_path(&args.config)?;
    let outcome = run_selftrain(&config, args.resume)?;
    print!("{}", format_status(&outcome.history));
    println!("stop\t{}", outcome.stop_reason);
    println!("final_iter\t{}", outcome.final_state.iter);
    for p in &outcome.final_labels {
        println!("final\t{}", p.display());
    }
    Ok(())
}

fn status(args: StatusArgs) -> Result<()> {
    let entries = Ledger::new(&args.workdir).read()?;
    if entries.is_empty() {
        bail!("no ledger entries in {}", args.workdir.display());
    }
    print!("{}", format_status(&entries));
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Evaluate(a) => evaluate(a),
        Command::Assemble(a) => assemble(a),
        Command::Tune(a) => tune(a),
        Command::Rerank(a) => rerank_cmd(a),
        Command::Oracle(a) => oracle(a),
        Command::Distill(a) => distill(a),
        Command::Selftrain(a) => selftrain(a),
        Command::Status(a) => status(a),
    }
}
