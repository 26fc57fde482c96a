//! Flat `key = value` configuration. Precedence: flags, then the config
//! file, then built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use smart_core::librarian::AssemblyConfig;
use smart_core::pipeline::{ChunkConfig, QueryOptions};
use smart_core::reasoner::{DecodeMode, GenerateOptions, ModelConfig};
use smart_core::trainer::{ReconMode, TrainingConfig};

use crate::error::{CliError, Result};

pub const HOME_VAR: &str = "SMART_HOME";
pub const CONFIG_FILE: &str = "smart.conf";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "toy" => Ok(Self::Toy),
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            _ => Err(format!("unknown preset `{s}` (toy, desk, full)")),
        }
    }
}

impl Preset {
    pub fn model(self, vocab_size: usize) -> ModelConfig {
        match self {
            Self::Toy => ModelConfig::toy(vocab_size),
            Self::Desk => ModelConfig::desk(vocab_size),
            Self::Full => ModelConfig {
                vocab_size,
                ..ModelConfig::full_size()
            },
        }
    }

    pub fn training(self, stage: u8) -> TrainingConfig {
        match self {
            Self::Full => TrainingConfig::for_stage(stage),
            _ => TrainingConfig::desk(stage),
        }
    }
}

fn parse_recon(s: &str) -> std::result::Result<ReconMode, String> {
    match s {
        "memory_only" => Ok(ReconMode::MemoryOnly),
        "query_conditioned" => Ok(ReconMode::QueryConditioned),
        _ => Err(format!(
            "unknown reconstruction mode `{s}` (memory_only, query_conditioned)"
        )),
    }
}

/// Every setting a config file may hold. Training fields left unset fall
/// back to the preset's per-stage defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub home: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub seed: u64,
    pub preset: Preset,
    pub chunk: ChunkConfig,
    pub top_passages: usize,
    pub slots_per_passage: usize,
    pub max_rows: usize,
    pub max_new_tokens: usize,
    pub top_provenance: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub steps: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub warmup_steps: Option<u64>,
    pub save_every: Option<u64>,
    pub recon_mode: Option<ReconMode>,
}

pub const KEYS: [&str; 18] = [
    "ckpt",
    "seed",
    "preset",
    "window",
    "stride",
    "min_tail",
    "top_passages",
    "slots_per_passage",
    "max_rows",
    "max_new_tokens",
    "top_provenance",
    "temperature",
    "steps",
    "lr",
    "batch_size",
    "warmup_steps",
    "save_every",
    "recon_mode",
];

impl Settings {
    pub fn defaults(home: PathBuf) -> Self {
        let q = QueryOptions::default();
        Self {
            home,
            ckpt: None,
            seed: 7,
            preset: Preset::Desk,
            chunk: ChunkConfig::default(),
            top_passages: q.top_passages,
            slots_per_passage: q.assembly.slots_per_passage,
            max_rows: q.assembly.max_rows,
            max_new_tokens: q.generate.max_new_tokens,
            top_provenance: q.generate.top_provenance,
            temperature: 0.0,
            steps: None,
            lr: None,
            batch_size: None,
            warmup_steps: None,
            save_every: None,
            recon_mode: None,
        }
    }

    /// `SMART_HOME`, or `.smart` under the working directory.
    pub fn home_from_env() -> PathBuf {
        std::env::var_os(HOME_VAR)
            .filter(|v| !v.is_empty())
            .map_or_else(|| PathBuf::from(".smart"), PathBuf::from)
    }

    /// Applies one `key = value` pair; the error names the key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("`{key}` expects a number, got `{v}`"))
        }
        match key {
            "ckpt" => self.ckpt = Some(PathBuf::from(value)),
            "seed" => self.seed = num(key, value)?,
            "preset" => self.preset = value.parse()?,
            "window" => self.chunk.window = num(key, value)?,
            "stride" => self.chunk.stride = num(key, value)?,
            "min_tail" => self.chunk.min_tail = num(key, value)?,
            "top_passages" => self.top_passages = num(key, value)?,
            "slots_per_passage" => self.slots_per_passage = num(key, value)?,
            "max_rows" => self.max_rows = num(key, value)?,
            "max_new_tokens" => self.max_new_tokens = num(key, value)?,
            "top_provenance" => self.top_provenance = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "steps" => self.steps = Some(num(key, value)?),
            "lr" => self.lr = Some(num(key, value)?),
            "batch_size" => self.batch_size = Some(num(key, value)?),
            "warmup_steps" => self.warmup_steps = Some(num(key, value)?),
            "save_every" => self.save_every = Some(num(key, value)?),
            "recon_mode" => self.recon_mode = Some(parse_recon(value)?),
            _ => return Err(format!("unknown key `{key}` (known: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Applies a config file. Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| CliError::usage(format!("{}:{}: {m}", path.display(), i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    /// Loads `--config`, or `smart.conf` in the home directory if present.
    pub fn load(home: PathBuf, config: Option<&Path>) -> Result<Self> {
        let mut s = Self::defaults(home);
        match config {
            Some(path) => s.apply_file(path).map_err(|e| e.context("--config"))?,
            None => {
                let path = s.home.join(CONFIG_FILE);
                if path.is_file() {
                    s.apply_file(&path)?;
                }
            }
        }
        Ok(s)
    }

    pub fn ckpt_path(&self) -> PathBuf {
        self.ckpt.clone().unwrap_or_else(|| self.home.join("checkpoint"))
    }

    pub fn docs_dir(&self) -> PathBuf {
        self.home.join("docs")
    }

    pub fn query_options(&self) -> Result<QueryOptions> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(CliError::usage(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if self.top_passages == 0 || self.max_rows == 0 || self.slots_per_passage == 0 {
            return Err(CliError::usage(
                "top_passages, slots_per_passage and max_rows must be positive",
            ));
        }
        let mode = if self.temperature == 0.0 {
            DecodeMode::Greedy
        } else {
            DecodeMode::Temperature {
                temperature: self.temperature,
                seed: self.seed,
            }
        };
        Ok(QueryOptions {
            top_passages: self.top_passages,
            assembly: AssemblyConfig {
                max_passages: self.top_passages,
                slots_per_passage: self.slots_per_passage,
                max_rows: self.max_rows,
                ..AssemblyConfig::default()
            },
            generate: GenerateOptions {
                max_new_tokens: self.max_new_tokens,
                mode,
                top_provenance: self.top_provenance,
            },
        })
    }

    pub fn training(&self, stage: u8) -> TrainingConfig {
        let base = self.preset.training(stage);
        TrainingConfig {
            seed: self.seed,
            steps: self.steps.unwrap_or(base.steps),
            lr: self.lr.unwrap_or(base.lr),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            warmup_steps: self.warmup_steps.unwrap_or(base.warmup_steps),
            save_every: self.save_every.or(base.save_every),
            recon_mode: self.recon_mode.unwrap_or(base.recon_mode),
            ..base
        }
    }
}
