//! Three-stage training: language pretraining, memory warmup and joint
//! fine-tuning.

mod data;
mod losses;
mod optimizer;

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{load_fact_examples, serialize_triple, split_sentences, stage1_sequences, FactExample, FactQuery};
pub use losses::{info_nce, info_nce_scores, lm_loss, reconstruction_logits, reconstruction_loss, warmup_mse};
pub use optimizer::{clip_global_norm, global_norm, learning_rate, AdamW};

use crate::grammarian::{fact_row, GrammarianError};
use crate::numerics::{lit, Graph, NumericsError, Scalar, Var};
use crate::reasoner::{Checkpoint, Model, OptimizerState, ReasonerError};
use crate::text::BOS;

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stage {stage} needs a checkpoint that completed stage {needed}, found stage {found}")]
    Prerequisite { stage: u8, needed: u8, found: u8 },
    #[error("non-finite value at stage {stage} step {step}: {detail}")]
    NonFinite { stage: u8, step: u64, detail: String },
    #[error("{0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Grammarian(#[from] GrammarianError),
}

/// How stage 3 conditions the triple reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    /// Encoder input `<bos>`, memory = the fact's row alone.
    MemoryOnly,
    /// Encoder input = the query, memory = every row of the batch; the
    /// decoder has to find the right row through memory attention.
    QueryConditioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub nce: f64,
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            nce: 1.0,
            recon: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub stage: u8,
    pub lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub tau: f64,
    pub weights: LossWeights,
    /// Sentences packed into one pretraining sample.
    pub context_sentences: usize,
    pub steps: u64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps.
    pub save_every: Option<u64>,
    pub recon_mode: ReconMode,
    pub optimizer: AdamWConfig,
}

/// Serializable mirror of [`AdamW`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<AdamWConfig> for AdamW {
    fn from(c: AdamWConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        let a = AdamW::default();
        Self {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl TrainingConfig {
    /// Full-scale defaults for a stage.
    pub fn for_stage(stage: u8) -> Self {
        Self {
            stage,
            lr: if stage == 1 { 4e-5 } else { 1e-4 },
            warmup_steps: 3000,
            batch_size: 32,
            weight_decay: 0.01,
            clip_norm: 1.0,
            tau: 0.07,
            weights: LossWeights::default(),
            context_sentences: 4,
            steps: 1000,
            seed: 0,
            save_every: None,
            recon_mode: ReconMode::MemoryOnly,
            optimizer: AdamWConfig::default(),
        }
    }

    /// Settings for the bundled synthetic manual: short warmup, larger rate.
    pub fn desk(stage: u8) -> Self {
        Self {
            lr: 3e-3,
            warmup_steps: 50,
            batch_size: 16,
            recon_mode: ReconMode::QueryConditioned,
            steps: match stage {
                1 => 300,
                2 => 300,
                _ => 400,
            },
            ..Self::for_stage(stage)
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::Config(m.into()));
        if !(1..=3).contains(&self.stage) {
            return bad("stage must be 1, 2 or 3");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad("temperature must be positive");
        }
        let w = self.weights;
        if !(w.mse >= 0.0 && w.nce >= 0.0 && w.recon >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return bad("weight decay must be non-negative and the clip norm positive");
        }
        if self.batch_size == 0 || self.steps == 0 || self.context_sentences == 0 {
            return bad("batch size, steps and context window must be positive");
        }
        if self.stage == 3 && self.batch_size < 2 && w.nce > 0.0 {
            return bad("contrastive training needs at least two facts per batch");
        }
        Ok(())
    }
}

/// Parameters updated in each stage. Stage 1 trains the language model only;
/// stage 2 the memory read projections, the fact projections and the
/// warmup head; stage 3 everything.
pub fn trainable_in(stage: u8, name: &str) -> bool {
    let memory = name.contains(".mem.") || name.starts_with("memory.shared.");
    match stage {
        1 => !(name.starts_with("grammarian.") || name.starts_with("memory.") || memory || name.ends_with(".gate")),
        2 => memory || name.starts_with("grammarian.proj.") || name.starts_with("memory.warmup_head."),
        _ => true,
    }
}

/// Training data of one stage.
#[derive(Debug, Clone)]
pub enum StageData {
    /// Token sequences (without `<bos>`/`<eos>`).
    Sequences(Vec<Vec<usize>>),
    Facts(Vec<FactExample>),
}

impl StageData {
    pub fn len(&self) -> usize {
        match self {
            Self::Sequences(s) => s.len(),
            Self::Facts(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub stage: u8,
    pub loss: f64,
    pub lm: f64,
    pub mse: f64,
    pub nce: f64,
    pub recon: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,stage,loss,lm,mse,nce,recon,lr,grad_norm";

impl LossRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.stage, self.loss, self.lm, self.mse, self.nce, self.recon, self.lr, self.grad_norm
        )
    }
}

/// Graph handles of every loss term of one batch; terms a stage does not
/// use are `None`.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub lm: Option<Var>,
    pub mse: Option<Var>,
    pub nce: Option<Var>,
    pub recon: Option<Var>,
}

/// Next-token loss of a batch of sequences: each is decoded from `<bos>`
/// with `<bos>` as the only encoder input, and all target tokens share one
/// mean.
pub fn sequence_batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    batch: &[&[usize]],
) -> Result<BatchLoss, TrainerError> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for seq in batch {
        let (tgt_in, tgt) = data::lm_pair(seq, model.config.max_positions);
        let (l, _) = model.forward(g, &[BOS], &tgt_in, None, None)?;
        logits.push(l);
        targets.extend(tgt);
    }
    let all = g.concat_rows(&logits)?;
    let lm = lm_loss(g, all, &targets)?;
    Ok(BatchLoss {
        total: lm,
        lm: Some(lm),
        mse: None,
        nce: None,
        recon: None,
    })
}

/// Query vectors (`B×d`, unit rows) and normalized memory rows (`B×d`) of a
/// fact batch.
pub fn fact_batch_rows<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    batch: &[&FactExample],
) -> Result<(Vec<Var>, Var), TrainerError> {
    let mut qs = Vec::with_capacity(batch.len());
    let mut ms = Vec::with_capacity(batch.len());
    for ex in batch {
        qs.push(model.query_vector(g, &ex.query)?);
        let f = fact_row(g, &model.params, &model.vocab, &ex.sentence, ex.fact_index)?;
        ms.push(f.m);
    }
    let m = g.concat_rows(&ms)?;
    let m = g.l2_normalize_rows(m)?;
    Ok((qs, m))
}

/// Stage-2 loss (MSE only) or the stage-3 combined loss
/// `w_mse·MSE + w_nce·InfoNCE + w_recon·recon`.
pub fn fact_batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    batch: &[&FactExample],
    cfg: &TrainingConfig,
) -> Result<BatchLoss, TrainerError> {
    if batch.is_empty() {
        return Err(TrainerError::Data("empty batch".into()));
    }
    let (qs, m) = fact_batch_rows(g, model, batch)?;
    let q = g.concat_rows(&qs)?;
    let q_proj = model.project_query(g, q)?;
    let mse = warmup_mse(g, q_proj, m)?;
    if cfg.stage == 2 {
        return Ok(BatchLoss {
            total: mse,
            lm: None,
            mse: Some(mse),
            nce: None,
            recon: None,
        });
    }
    let q_unit = g.l2_normalize_rows(q_proj)?;
    let nce = info_nce(g, q_unit, m, cfg.tau)?;
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        let (l, t) = match cfg.recon_mode {
            ReconMode::MemoryOnly => {
                let row = g.gather(m, &[i])?;
                reconstruction_logits(g, model, &[BOS], row, None, &ex.target)?
            }
            ReconMode::QueryConditioned => reconstruction_logits(g, model, &ex.query, m, Some(qs[i]), &ex.target)?,
        };
        logits.push(l);
        targets.extend(t);
    }
    let all = g.concat_rows(&logits)?;
    let recon = lm_loss(g, all, &targets)?;
    let w = cfg.weights;
    let a = g.scale(mse, lit(w.mse))?;
    let b = g.scale(nce, lit(w.nce))?;
    let c = g.scale(recon, lit(w.recon))?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(BatchLoss {
        total,
        lm: None,
        mse: Some(mse),
        nce: Some(nce),
        recon: Some(recon),
    })
}

/// Deterministic epoch-wise shuffling. Fact batches never hold two
/// examples with the same key, so in-batch negatives are true negatives.
struct Batcher {
    rng: ChaCha8Rng,
    keys: Vec<String>,
    queue: Vec<usize>,
    batch_size: usize,
}

impl Batcher {
    fn new(keys: Vec<String>, batch_size: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            keys,
            queue: Vec::new(),
            batch_size,
        }
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.keys.len()).collect();
        order.shuffle(&mut self.rng);
        self.queue.extend(order);
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let distinct = {
            let mut k: Vec<&String> = self.keys.iter().collect();
            k.sort();
            k.dedup();
            k.len()
        };
        let want = self.batch_size.min(distinct);
        let mut batch: Vec<usize> = Vec::with_capacity(want);
        let mut i = 0;
        while batch.len() < want {
            if i >= self.queue.len() {
                self.refill();
            }
            let cand = self.queue[i];
            if batch.iter().any(|&b| self.keys[b] == self.keys[cand]) {
                i += 1;
            } else {
                batch.push(cand);
                self.queue.remove(i);
            }
        }
        batch
    }
}

fn value<S: Scalar>(g: &Graph<S>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).data()[0].to_f64().unwrap_or(f64::NAN))
}

fn non_finite(stage: u8, step: u64, detail: impl Into<String>) -> TrainerError {
    TrainerError::NonFinite {
        stage,
        step,
        detail: detail.into(),
    }
}

/// Runs one training stage on a checkpoint. Every step's losses go to
/// `log` as CSV (header first); with `out_dir` the checkpoint is saved at
/// the end and every `save_every` steps.
pub fn train_stage<S: Scalar>(
    mut ckpt: Checkpoint<S>,
    data: &StageData,
    cfg: &TrainingConfig,
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<(Checkpoint<S>, Vec<LossRow>), TrainerError> {
    cfg.validate()?;
    let needed = cfg.stage - 1;
    if ckpt.stage < needed {
        return Err(TrainerError::Prerequisite {
            stage: cfg.stage,
            needed,
            found: ckpt.stage,
        });
    }
    let keys: Vec<String> = match (data, cfg.stage) {
        (StageData::Sequences(s), 1) => (0..s.len()).map(|i| i.to_string()).collect(),
        (StageData::Facts(f), 2 | 3) => f.iter().map(|e| e.key.clone()).collect(),
        _ => {
            return Err(TrainerError::Data(format!(
                "stage {} needs {} data",
                cfg.stage,
                if cfg.stage == 1 { "text" } else { "fact-query" }
            )))
        }
    };
    if keys.is_empty() {
        return Err(TrainerError::Data("no training examples".into()));
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |e| TrainerError::Io { path, source: e }
    };
    ckpt.model.params.set_trainable(|n| trainable_in(cfg.stage, n));
    let mut state = OptimizerState::zeros_like(&ckpt.model.params);
    let adamw = AdamW::from(cfg.optimizer);
    let mut batcher = Batcher::new(keys, cfg.batch_size, cfg.seed);
    let mut rows = Vec::with_capacity(cfg.steps as usize);
    writeln!(log, "{LOSS_CSV_HEADER}").map_err(io(Path::new("<loss log>")))?;
    for step in 1..=cfg.steps {
        let idx = batcher.next_batch();
        let mut g = Graph::new();
        let loss = match data {
            StageData::Sequences(s) => {
                let batch: Vec<&[usize]> = idx.iter().map(|&i| s[i].as_slice()).collect();
                sequence_batch_loss(&mut g, &ckpt.model, &batch)
            }
            StageData::Facts(f) => {
                let batch: Vec<&FactExample> = idx.iter().map(|&i| &f[i]).collect();
                fact_batch_loss(&mut g, &ckpt.model, &batch, cfg)
            }
        }
        .map_err(|e| match e {
            TrainerError::Numerics(NumericsError::NonFinite { op })
            | TrainerError::Reasoner(ReasonerError::Numerics(NumericsError::NonFinite { op }))
            | TrainerError::Grammarian(GrammarianError::Numerics(NumericsError::NonFinite { op })) => {
                non_finite(cfg.stage, step, format!("forward op `{op}` on examples {idx:?}"))
            }
            other => other,
        })?;
        let mut grads = g.backward(loss.total)?.by_name();
        let lr = learning_rate(cfg.lr, cfg.warmup_steps, step);
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            let bad: Vec<&str> = grads
                .iter()
                .filter(|(_, t)| !t.is_finite())
                .map(|(n, _)| n.as_str())
                .collect();
            return Err(non_finite(cfg.stage, step, format!("gradient of {bad:?}")));
        }
        adamw.step(&mut ckpt.model.params, &grads, &mut state, lr, cfg.weight_decay);
        let row = LossRow {
            step,
            stage: cfg.stage,
            loss: value(&g, Some(loss.total)),
            lm: value(&g, loss.lm),
            mse: value(&g, loss.mse),
            nce: value(&g, loss.nce),
            recon: value(&g, loss.recon),
            lr,
            grad_norm,
        };
        writeln!(log, "{}", row.csv()).map_err(io(Path::new("<loss log>")))?;
        rows.push(row);
        ckpt.step += 1;
        if let (Some(dir), Some(every)) = (out_dir, cfg.save_every) {
            if step % every == 0 && step != cfg.steps {
                let snapshot = Checkpoint {
                    model: ckpt.model.clone(),
                    stage: needed,
                    step: ckpt.step,
                    optimizer: Some(state.clone()),
                };
                snapshot.save(&dir.join(format!("step-{step}")))?;
            }
        }
    }
    ckpt.model.params.set_trainable(|_| true);
    ckpt.stage = ckpt.stage.max(cfg.stage);
    ckpt.optimizer = Some(state);
    if let Some(dir) = out_dir {
        ckpt.save(dir)?;
    }
    Ok((ckpt, rows))
}
