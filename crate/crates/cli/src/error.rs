//! Exit codes: 1 usage, 2 data or format, 3 numeric failure.

use std::fmt;
use std::path::Path;

use smart_core::evalkit::EvalError;
use smart_core::grammarian::GrammarianError;
use smart_core::librarian::LibrarianError;
use smart_core::numerics::NumericsError;
use smart_core::pipeline::PipelineError;
use smart_core::reasoner::ReasonerError;
use smart_core::trainer::TrainerError;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }

    /// Prefixes the message with the flag or file it concerns.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Attaches a flag/file name to any error convertible into [`CliError`].
pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> Result<T>;
}

impl<T, E: Into<CliError>> Context<T> for std::result::Result<T, E> {
    fn context(self, what: impl fmt::Display) -> Result<T> {
        self.map_err(|e| e.into().context(what))
    }
}

fn numerics_code(_: &NumericsError) -> u8 {
    NUMERIC
}

fn librarian_code(e: &LibrarianError) -> u8 {
    match e {
        LibrarianError::Usage(_) => USAGE,
        LibrarianError::Degenerate => NUMERIC,
        LibrarianError::Numerics(n) => numerics_code(n),
        _ => DATA,
    }
}

fn grammarian_code(e: &GrammarianError) -> u8 {
    match e {
        GrammarianError::Usage(_) => USAGE,
        GrammarianError::Numerics(n) => numerics_code(n),
        _ => DATA,
    }
}

fn reasoner_code(e: &ReasonerError) -> u8 {
    match e {
        ReasonerError::Config(_) | ReasonerError::Usage(_) => USAGE,
        ReasonerError::Numerics(n) => numerics_code(n),
        ReasonerError::Librarian(l) => librarian_code(l),
        ReasonerError::Grammarian(g) => grammarian_code(g),
        _ => DATA,
    }
}

fn pipeline_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Usage(_) => USAGE,
        PipelineError::Librarian(l) => librarian_code(l),
        PipelineError::Grammarian(g) => grammarian_code(g),
        PipelineError::Reasoner(r) => reasoner_code(r),
        _ => DATA,
    }
}

fn trainer_code(e: &TrainerError) -> u8 {
    match e {
        TrainerError::Config(_) => USAGE,
        TrainerError::NonFinite { .. } | TrainerError::Numerics(_) => NUMERIC,
        TrainerError::Reasoner(r) => reasoner_code(r),
        TrainerError::Grammarian(g) => grammarian_code(g),
        _ => DATA,
    }
}

fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::Usage(_) => USAGE,
        EvalError::Format { .. } => DATA,
        EvalError::Pipeline(p) => pipeline_code(p),
        EvalError::NonFinite(_) => NUMERIC,
    }
}

macro_rules! classify {
    ($($t:ty => $f:expr),* $(,)?) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self { code: $f(&e), message: e.to_string() }
            }
        }
    )*};
}

classify! {
    NumericsError => numerics_code,
    LibrarianError => librarian_code,
    GrammarianError => grammarian_code,
    ReasonerError => reasoner_code,
    PipelineError => pipeline_code,
    TrainerError => trainer_code,
    EvalError => eval_code,
}
