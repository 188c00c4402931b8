//! `cbart` command line.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{load_config, ConfigError, RunConfig, StrategyName};
use crate::inference::{PenaltyMode, Ranker};
use crate::metrics;
use crate::model::Objective;
use crate::pipeline::{self, GenerationRecord, Generator, PipelineError};
use crate::synthesis::{self, InsertionStrategy};
use crate::text::{self, Vocab};
use crate::training;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cbart", version, about = "Keyword-constrained sentence generation by parallel edit refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary file from a corpus.
    Vocab(Flags),
    /// Synthesize a JSONL training set from a corpus.
    Synth(Flags),
    /// Train the edit model on a synthesized dataset.
    Train(Flags),
    /// Train the ranking language model on a corpus.
    TrainLm(Flags),
    /// Generate sentences for every line of a constraints file.
    Generate(Flags),
    /// Score generations against references.
    Evaluate(Flags),
    /// Report per-case refinement counts and latency.
    Bench(Flags),
}

fn parse_ranker(s: &str) -> Result<Ranker, String> {
    s.parse().map_err(|e: crate::inference::InferenceError| e.to_string())
}

fn parse_penalty(s: &str) -> Result<PenaltyMode, String> {
    s.parse().map_err(|e: crate::inference::InferenceError| e.to_string())
}

fn parse_insertion(s: &str) -> Result<InsertionStrategy, String> {
    s.parse().map_err(|e: synthesis::SynthError| e.to_string())
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    match s.to_ascii_lowercase().as_str() {
        "lm" => Ok(Objective::Lm),
        "mlm" => Ok(Objective::Mlm),
        _ => Err(format!("unknown objective {s:?} (lm, mlm)")),
    }
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub lm_checkpoint: Option<PathBuf>,
    /// Tab-separated keywords, one case per line.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    /// Reference sentences aligned with the generations.
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Generation JSONL to evaluate.
    #[arg(long)]
    pub generations: Option<PathBuf>,
    /// Output file (or directory for train and train-lm).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Decoding strategy (greedy, topk, topp); for synth, the insertion strategy.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    /// Repetition penalty rule (sign_aware, literal, off).
    #[arg(long, value_parser = parse_penalty)]
    pub penalty: Option<PenaltyMode>,
    #[arg(long)]
    pub num_sequences: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Candidate ranking (lm, decoder).
    #[arg(long, value_parser = parse_ranker)]
    pub ranker: Option<Ranker>,
    /// Decoder objective (lm, mlm).
    #[arg(long, value_parser = parse_objective)]
    pub objective: Option<Objective>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub causal_mask: Option<bool>,
    /// Gold insertion strategy (left, middle, right, random, tfidf).
    #[arg(long, value_parser = parse_insertion)]
    pub insertion: Option<InsertionStrategy>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub per_sentence: Option<usize>,
    #[arg(long)]
    pub replace_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Write elapsed_ms as 0 so generation files are byte-reproducible.
    #[arg(long)]
    pub zero_timing: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Pipeline(_) => EXIT_RUNTIME,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn runtime<E: Into<PipelineError>>(e: E) -> CliError {
    CliError::Pipeline(e.into())
}

/// Merges the config file (if any) with the flags; flags win.
pub fn resolve(flags: &Flags, synth: bool) -> CliResult<RunConfig> {
    let mut c = match &flags.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = flags.$f.clone() { c.$f = v; } )* };
    }
    macro_rules! set_opt {
        ($($f:ident),*) => { $( if let Some(v) = flags.$f.clone() { c.$f = Some(v); } )* };
    }
    set!(seed, k, p, theta, penalty, num_sequences, max_steps, ranker, objective, causal_mask, insertion, alpha);
    set!(per_sentence, replace_rate, epochs, batch_size, learning_rate, min_freq, max_vocab);
    set_opt!(threads, corpus, vocab, dataset, checkpoint, lm_checkpoint, constraints, references, generations, out);
    if let Some(s) = &flags.strategy {
        if synth {
            c.insertion = parse_insertion(s).map_err(CliError::Usage)?;
        } else {
            c.strategy = match s.to_ascii_lowercase().as_str() {
                "greedy" => StrategyName::Greedy,
                "topk" | "top-k" => StrategyName::Topk,
                "topp" | "top-p" => StrategyName::Topp,
                _ => return Err(CliError::Usage(format!("unknown strategy {s:?} (greedy, topk, topp)"))),
            };
        }
    }
    c.validate()?;
    Ok(c)
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

fn load_vocab(c: &RunConfig) -> CliResult<Vocab> {
    Vocab::load(need(&c.vocab, "vocab")?).map_err(runtime)
}

fn write_output(out: Option<&Path>, content: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, content).map_err(runtime),
        None => std::io::stdout().write_all(content.as_bytes()).map_err(runtime),
    }
}

fn cmd_vocab(c: &RunConfig) -> CliResult<String> {
    let corpus = text::read_corpus(need(&c.corpus, "corpus")?).map_err(runtime)?;
    let out = need(&c.out, "out")?;
    let v = text::build_vocab(&corpus, c.min_freq, c.max_vocab).map_err(runtime)?;
    v.save(out).map_err(runtime)?;
    Ok(format!("vocab: {} entries -> {}", v.size(), out.display()))
}

fn cmd_synth(c: &RunConfig) -> CliResult<String> {
    let corpus = text::read_corpus(need(&c.corpus, "corpus")?).map_err(runtime)?;
    let vocab = load_vocab(c)?;
    let out = need(&c.out, "out")?;
    let data = synthesis::make_dataset(&corpus, &vocab, c.insertion, c.per_sentence, c.replace_rate, c.seed).map_err(runtime)?;
    synthesis::write_dataset(out, &data).map_err(runtime)?;
    Ok(format!("synth: {} instances from {} lines ({}) -> {}", data.len(), corpus.len(), c.insertion, out.display()))
}

fn cmd_train(c: &RunConfig) -> CliResult<String> {
    let dataset = need(&c.dataset, "dataset")?;
    let vocab = load_vocab(c)?;
    let out = need(&c.out, "out")?;
    let report = training::train(dataset, &c.model_config(vocab.size()), &c.train_config(), out, Some(&vocab)).map_err(runtime)?;
    let best = &report.history[report.best_epoch];
    Ok(format!(
        "train: best epoch {} (score {:.4}) -> {}",
        report.best_epoch,
        best.score(),
        report.best_checkpoint.display()
    ))
}

fn cmd_train_lm(c: &RunConfig) -> CliResult<String> {
    let corpus = text::read_corpus(need(&c.corpus, "corpus")?).map_err(runtime)?;
    let vocab = load_vocab(c)?;
    let out = need(&c.out, "out")?;
    let sentences: Vec<Vec<u32>> = corpus.iter().map(|l| text::encode(l, &vocab).into_inner()).collect();
    let report = training::train_lm(&sentences, &c.model_config(vocab.size()), &c.train_config(), out, Some(&vocab)).map_err(runtime)?;
    Ok(format!("train-lm: best epoch {} -> {}", report.best_epoch, report.best_checkpoint.display()))
}

fn generator(c: &RunConfig) -> CliResult<Generator> {
    let vocab = c.vocab.as_deref().map(Vocab::load).transpose().map_err(runtime)?;
    let lm = if c.ranker == Ranker::LmNll { Some(need(&c.lm_checkpoint, "lm-checkpoint")?) } else { c.lm_checkpoint.as_deref() };
    Generator::load(need(&c.checkpoint, "checkpoint")?, lm, vocab.as_ref()).map_err(runtime)
}

pub fn generate_records(generator: &Generator, cases: &[Vec<String>], c: &RunConfig) -> Result<Vec<GenerationRecord>, PipelineError> {
    let cfg = c.decode_config();
    cases.par_iter().map(|kws| generator.generate(kws, &cfg)).collect()
}

pub fn records_to_jsonl(records: &[GenerationRecord], zero_timing: bool) -> String {
    let mut s = String::new();
    for r in records {
        let mut r = r.clone();
        if zero_timing {
            r.elapsed_ms = 0.0;
        }
        s.push_str(&serde_json::to_string(&r).expect("records serialize"));
        s.push('\n');
    }
    s
}

fn cmd_generate(c: &RunConfig, zero_timing: bool) -> CliResult<String> {
    let cases = pipeline::read_constraints(need(&c.constraints, "constraints")?)?;
    let g = generator(c)?;
    let records = generate_records(&g, &cases, c)?;
    let covered = records
        .iter()
        .filter(|r| {
            let out: Vec<&str> = r.output.split_whitespace().collect();
            metrics::keyword_covered(&out, &r.keywords.iter().map(String::as_str).collect::<Vec<_>>())
        })
        .count();
    write_output(c.out.as_deref(), &records_to_jsonl(&records, zero_timing))?;
    Ok(format!("generate: {} cases, keyword coverage {}/{}", records.len(), covered, records.len()))
}

fn cmd_evaluate(c: &RunConfig) -> CliResult<String> {
    let records = pipeline::read_generations(need(&c.generations, "generations")?)?;
    let refs = text::read_corpus(need(&c.references, "references")?).map_err(runtime)?;
    let outputs: Vec<Vec<&str>> = records.iter().map(|r| r.output.split_whitespace().collect()).collect();
    let references: Vec<Vec<&str>> = refs.iter().map(|r| r.split_whitespace().collect()).collect();
    let keywords: Vec<Vec<&str>> = records.iter().map(|r| r.keywords.iter().map(String::as_str).collect()).collect();
    let report = metrics::evaluate(&outputs, &references, &keywords).map_err(runtime)?;
    write_output(c.out.as_deref(), &report.to_tsv())?;
    let o = &report.overall;
    Ok(format!("evaluate: {} cases, BLEU-4 {:.4}, NIST-4 {:.4}, coverage {:.4}", o.cases, o.bleu4, o.nist4, o.keyword_coverage))
}

fn cmd_bench(c: &RunConfig) -> CliResult<String> {
    let cases = pipeline::read_constraints(need(&c.constraints, "constraints")?)?;
    let g = generator(c)?;
    let cfg = c.decode_config();
    let mut tsv = String::from("case\tn_keywords\tsteps\tdecoder_passes\telapsed_ms\n");
    let (mut steps, mut passes, mut ms, mut nk) = (0.0, 0.0, 0.0, 0.0);
    for (i, kws) in cases.iter().enumerate() {
        let r = g.generate(kws, &cfg)?;
        let _ = writeln!(tsv, "{i}\t{}\t{}\t{}\t{:.3}", kws.len(), r.steps, r.decoder_passes, r.elapsed_ms);
        steps += r.steps as f64;
        passes += r.decoder_passes as f64;
        ms += r.elapsed_ms;
        nk += kws.len() as f64;
    }
    let n = cases.len().max(1) as f64;
    let _ = writeln!(tsv, "mean\t{:.3}\t{:.3}\t{:.3}\t{:.3}", nk / n, steps / n, passes / n, ms / n);
    write_output(c.out.as_deref(), &tsv)?;
    Ok(format!("bench: {} cases, mean steps {:.3}, mean latency {:.3} ms", cases.len(), steps / n, ms / n))
}

fn execute(command: &Command) -> CliResult<String> {
    let (flags, synth) = match command {
        Command::Synth(f) => (f, true),
        Command::Vocab(f) | Command::Train(f) | Command::TrainLm(f) | Command::Generate(f) | Command::Evaluate(f) | Command::Bench(f) => (f, false),
    };
    let c = resolve(flags, synth)?;
    let work = || match command {
        Command::Vocab(_) => cmd_vocab(&c),
        Command::Synth(_) => cmd_synth(&c),
        Command::Train(_) => cmd_train(&c),
        Command::TrainLm(_) => cmd_train_lm(&c),
        Command::Generate(f) => cmd_generate(&c, f.zero_timing),
        Command::Evaluate(_) => cmd_evaluate(&c),
        Command::Bench(_) => cmd_bench(&c),
    };
    match c.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            eprintln!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
