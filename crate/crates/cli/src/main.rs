//! `smart`: ingest manuals, train, and answer questions with provenance.

mod commands;
mod error;
mod render;
mod settings;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, USAGE};
use crate::settings::{Preset, Settings};

#[derive(Debug, Parser)]
#[command(
    name = "smart",
    version,
    about = "Fact-memory question answering over technical manuals"
)]
struct Cli {
    /// Flat `key = value` config file (default: $SMART_HOME/smart.conf).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for initialization, batching and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint directory (default: $SMART_HOME/checkpoint).
    #[arg(long, global = true, value_name = "DIR")]
    ckpt: Option<PathBuf>,
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compile a document (chunk, embed, extract facts) for fast queries.
    Ingest(IngestArgs),
    /// Extract facts from a parse file and print them as JSON lines.
    Extract(ExtractArgs),
    /// List a compiled document's passages, or rank them for a query.
    Index(IndexArgs),
    /// Run one training stage on a checkpoint.
    Train(TrainArgs),
    /// Answer a question from a compiled or a new document.
    Query(QueryArgs),
    /// Score answers against a reference test set.
    Eval(EvalArgs),
    /// Show one stored fact with its source text.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ChunkArgs {
    /// Words per passage.
    #[arg(long)]
    window: Option<usize>,
    /// Words between passage starts.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Document text (UTF-8).
    doc: PathBuf,
    /// Dependency parses of the document's passages (JSON lines).
    #[arg(long, value_name = "FILE")]
    parses: PathBuf,
    /// Output directory (default: $SMART_HOME/docs/<doc id>).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Document id (default: the file stem).
    #[arg(long)]
    doc_id: Option<String>,
    /// Recompile even if the output is up to date.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    chunk: ChunkArgs,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long, value_name = "FILE")]
    parses: PathBuf,
    /// Write the fact table here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Compiled document directory or id under $SMART_HOME/docs.
    #[arg(long)]
    doc: String,
    /// Rank passages for this query instead of listing them.
    query: Option<String>,
    /// Passages to show for a query.
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: u8,
    /// Stage 1: plain text. Stages 2 and 3: query/fact JSON lines.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Parses the fact ids of stage 2/3 data refer to.
    #[arg(long, value_name = "FILE")]
    parses: Option<PathBuf>,
    /// Output checkpoint directory (default: overwrite --ckpt).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Loss CSV (default: <out>/loss_stage<N>.csv).
    #[arg(long, value_name = "FILE")]
    loss_log: Option<PathBuf>,
    /// Extra texts for the vocabulary of a new checkpoint.
    #[arg(long, value_name = "FILE")]
    vocab_from: Vec<PathBuf>,
    /// Model size of a new checkpoint.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// The question (omit with --repl).
    #[arg(required_unless_present = "repl")]
    question: Option<String>,
    /// Compiled document directory or id under $SMART_HOME/docs (Path A).
    #[arg(long, conflicts_with = "new_doc", required_unless_present = "new_doc")]
    doc: Option<String>,
    /// Answer from an uncompiled document (Path B); needs --parses.
    #[arg(long, value_name = "FILE", requires = "parses")]
    new_doc: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "new_doc")]
    parses: Option<PathBuf>,
    /// Path B: save the transient fact store here.
    #[arg(long, value_name = "DIR", requires = "new_doc")]
    persist: Option<PathBuf>,
    /// Read questions from stdin, one per line.
    #[arg(long, conflicts_with = "question")]
    repl: bool,
    /// Print the answer only.
    #[arg(long, short)]
    quiet: bool,
    /// Print the answer record as JSON.
    #[arg(long, conflicts_with = "quiet")]
    json: bool,
    #[arg(long)]
    top_passages: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Sampling temperature; 0 decodes greedily.
    #[arg(long)]
    temperature: Option<f64>,
    #[command(flatten)]
    chunk: ChunkArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON lines of {query, reference, doc_id}.
    #[arg(long, value_name = "FILE")]
    testset: PathBuf,
    /// Compiled documents the test set refers to.
    #[arg(long, required = true)]
    doc: Vec<String>,
    /// Also write the full report as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    doc: String,
    #[arg(long)]
    fact: String,
    /// Characters of context on each side.
    #[arg(long, default_value_t = 80)]
    window: usize,
}

fn settings(cli: &Cli) -> error::Result<Settings> {
    let mut s = Settings::load(Settings::home_from_env(), cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    if let Some(c) = &cli.ckpt {
        s.ckpt = Some(c.clone());
    }
    Ok(s)
}

fn run(cli: Cli) -> error::Result<()> {
    let mut s = settings(&cli)?;
    let out = &mut std::io::stdout().lock();
    let verbose = cli.verbose;
    match cli.command {
        Command::Ingest(a) => commands::ingest(&mut s, a, out, verbose),
        Command::Extract(a) => commands::extract(&s, a, out),
        Command::Index(a) => commands::index(&s, a, out),
        Command::Train(a) => commands::train(&mut s, a, out, verbose),
        Command::Query(a) => commands::query(&mut s, a, out),
        Command::Eval(a) => commands::eval(&s, a, out),
        Command::Inspect(a) => commands::inspect(&s, a, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
