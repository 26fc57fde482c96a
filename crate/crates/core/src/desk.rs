//! Desk-scale run on the synthetic manual: train all three stages, then
//! measure fact retrieval by memory attention and end-to-end answers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::grammarian::{parse_fact_id, ParsedSentence};
use crate::librarian::MemoryMatrix;
use crate::numerics::{Graph, Scalar};
use crate::pipeline::{
    answer_path_a, answer_path_b, compile_document, memory_path_a, ChunkConfig, CompiledDocument, PipelineError,
    QueryOptions,
};
use crate::reasoner::{Checkpoint, Model, ModelConfig, ReasonerError};
use crate::synth::{SynthQuery, SyntheticManual, DOC_ID};
use crate::text::{metric_tokens, Vocab};
use crate::trainer::{
    load_fact_examples, sequence_batch_loss, stage1_sequences, train_stage, FactExample, FactQuery, LossRow, StageData,
    TrainerError, TrainingConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum DeskError {
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
}

/// Everything derived from the manual before training.
pub struct DeskData {
    pub manual: SyntheticManual,
    pub chunk: ChunkConfig,
    pub parses: Vec<ParsedSentence>,
    pub vocab: Vocab,
    pub sequences: Vec<Vec<usize>>,
    pub queries: Vec<FactQuery>,
    pub examples: Vec<FactExample>,
    pub heldout: Vec<SynthQuery>,
    /// Fact of each parsed sentence, keyed by `(passage_id, sent_id)`.
    pub sentence_fact: BTreeMap<(usize, usize), usize>,
    pub gold_passages: Vec<BTreeSet<usize>>,
}

impl DeskData {
    pub fn new(seed: u64) -> Result<Self, DeskError> {
        let manual = SyntheticManual::generate(seed);
        let chunk = ChunkConfig::default();
        let parses = manual.gold_parses(&chunk)?;
        let texts = manual.vocabulary_texts();
        let vocab = Vocab::build(texts.iter().map(String::as_str));
        let sequences = stage1_sequences(&manual.corpus(), &vocab, TrainingConfig::desk(1).context_sentences);
        let queries = manual.training_queries(&parses, &chunk)?;
        let jsonl: String = queries
            .iter()
            .map(|q| serde_json::to_string(q).expect("plain struct") + "\n")
            .collect();
        let examples = load_fact_examples(&jsonl, &parses, &vocab)?;
        Ok(Self {
            heldout: manual.heldout_queries(),
            sentence_fact: manual.parse_facts(&parses, &chunk)?,
            gold_passages: manual.gold_passages(&parses, &chunk)?,
            manual,
            chunk,
            parses,
            vocab,
            sequences,
            queries,
            examples,
        })
    }

    /// Gold fact of a stored row, via its fact id.
    pub fn row_fact(&self, fact_id: &str) -> Option<usize> {
        let (p, s, _) = parse_fact_id(fact_id)?;
        self.sentence_fact.get(&(p, s)).copied()
    }

    /// Unigram entropy (nats) of the stage-1 targets, end marker included.
    pub fn unigram_entropy(&self, max_positions: usize) -> f64 {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        let mut n = 0usize;
        for s in &self.sequences {
            let k = s.len().min(max_positions - 1);
            for &t in &s[..k] {
                *counts.entry(t).or_default() += 1;
            }
            *counts.entry(crate::text::EOS).or_default() += 1;
            n += k + 1;
        }
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.ln()
            })
            .sum()
    }
}

/// Token-weighted mean next-token loss over all stage-1 sequences.
pub fn corpus_lm_loss<S: Scalar>(model: &Model<S>, sequences: &[Vec<usize>]) -> Result<f64, DeskError> {
    let (mut total, mut n) = (0.0, 0usize);
    for s in sequences {
        let mut g = Graph::new();
        let l = sequence_batch_loss(&mut g, model, &[s.as_slice()])?;
        let k = s.len().min(model.config.max_positions - 1) + 1;
        total += g.value(l.total).data()[0].to_f64().unwrap_or(f64::NAN) * k as f64;
        n += k;
    }
    Ok(total / n as f64)
}

/// Mean warmup MSE over every fact example.
pub fn fact_mse<S: Scalar>(model: &Model<S>, examples: &[FactExample]) -> Result<f64, DeskError> {
    let cfg = TrainingConfig::desk(2);
    let mut total = 0.0;
    for chunk in examples.chunks(16) {
        let mut g = Graph::new();
        let batch: Vec<&FactExample> = chunk.iter().collect();
        let l = crate::trainer::fact_batch_loss(&mut g, model, &batch, &cfg)?;
        total += g.value(l.total).data()[0].to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Final-block memory attention of a query over `memory`.
pub fn alpha<S: Scalar>(model: &Model<S>, query: &str, memory: &MemoryMatrix) -> Result<Vec<f64>, DeskError> {
    let ids = model.vocab.encode(query);
    let mut g = Graph::new();
    let m = g
        .constant(
            memory
                .tensor::<S>()
                .ok_or(ReasonerError::Usage("empty memory".into()))?,
        )
        .map_err(ReasonerError::from)?;
    let x = model.embed(&mut g, &ids)?;
    let q = model.query_vector(&mut g, &ids)?;
    let enc = model.encode(&mut g, x, Some((m, q)))?;
    let a = *enc.alphas.last().expect("memory gives one weight row per block");
    Ok(g.value(a)
        .data()
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .collect())
}

/// Every row of a store as one memory matrix.
pub fn whole_store(doc: &CompiledDocument) -> MemoryMatrix {
    let n = doc.store.len();
    MemoryMatrix {
        dim: doc.store.dim(),
        rows: (0..n).collect(),
        scores: vec![0.0; n],
        pooled: n,
        data: doc.store.index().rows().to_vec(),
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryOutcome {
    pub query: String,
    pub fact: usize,
    pub answer: String,
    /// Highest-α row over the whole store belongs to the gold fact.
    pub alpha_store: bool,
    /// Highest-α row of the Path A memory belongs to the gold fact.
    pub alpha_memory: bool,
    /// Answer holds the gold value token.
    pub has_value: bool,
    /// Top cited row comes from a passage stating the gold fact.
    pub cites_passage: bool,
    /// All passages stating the gold fact were among those retrieved.
    pub all_relevant_retrieved: bool,
    /// Path B built the same memory matrix as Path A.
    pub paths_agree: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeskReport {
    pub seed: u64,
    pub config: ModelConfig,
    pub parameters: usize,
    pub sentences: usize,
    pub facts: usize,
    pub store_rows: usize,
    pub passages: usize,
    pub unigram_entropy: f64,
    pub stage1_loss_before: f64,
    pub stage1_loss_after: f64,
    pub stage2_mse_before: f64,
    pub stage2_mse_after: f64,
    pub alpha_accuracy_store: f64,
    pub alpha_accuracy_memory: f64,
    pub qa_accuracy: f64,
    pub path_agreement: f64,
    pub seconds: f64,
    pub queries: Vec<QueryOutcome>,
    #[serde(skip)]
    pub curves: Vec<LossRow>,
}

impl DeskReport {
    pub fn stage2_reduction(&self) -> f64 {
        1.0 - self.stage2_mse_after / self.stage2_mse_before
    }
}

/// Training settings of a desk run.
#[derive(Debug, Clone)]
pub struct DeskConfig {
    pub seed: u64,
    pub model: fn(usize) -> ModelConfig,
    pub stages: [TrainingConfig; 3],
}

impl DeskConfig {
    pub fn new(seed: u64) -> Self {
        let stages = [1u8, 2, 3].map(|s| TrainingConfig {
            seed,
            ..TrainingConfig::desk(s)
        });
        Self {
            seed,
            model: ModelConfig::desk,
            stages,
        }
    }
}

/// Trains the three stages on the manual and measures the result. Loss
/// rows are written to `log` as CSV.
pub fn run(cfg: &DeskConfig, log: &mut dyn Write) -> Result<(Checkpoint<f64>, DeskReport), DeskError> {
    let t0 = Instant::now();
    let data = DeskData::new(cfg.seed)?;
    let mc = (cfg.model)(data.vocab.len());
    let model = Model::<f64>::init(mc.clone(), data.vocab.clone(), cfg.seed)?;
    let mut ckpt = Checkpoint::new(model);
    let entropy = data.unigram_entropy(mc.max_positions);
    let s1_before = corpus_lm_loss(&ckpt.model, &data.sequences)?;
    let mut curves = Vec::new();
    let (c, rows) = train_stage(
        ckpt,
        &StageData::Sequences(data.sequences.clone()),
        &cfg.stages[0],
        None,
        log,
    )?;
    ckpt = c;
    curves.extend(rows);
    let s1_after = corpus_lm_loss(&ckpt.model, &data.sequences)?;
    let facts = StageData::Facts(data.examples.clone());
    let s2_before = fact_mse(&ckpt.model, &data.examples)?;
    let (c, rows) = train_stage(ckpt, &facts, &cfg.stages[1], None, log)?;
    ckpt = c;
    curves.extend(rows);
    let s2_after = fact_mse(&ckpt.model, &data.examples)?;
    let (c, rows) = train_stage(ckpt, &facts, &cfg.stages[2], None, log)?;
    ckpt = c;
    curves.extend(rows);

    let report = measure(&ckpt.model, &data, cfg.seed)?;
    let report = DeskReport {
        unigram_entropy: entropy,
        stage1_loss_before: s1_before,
        stage1_loss_after: s1_after,
        stage2_mse_before: s2_before,
        stage2_mse_after: s2_after,
        seconds: t0.elapsed().as_secs_f64(),
        curves,
        ..report
    };
    Ok((ckpt, report))
}

/// Post-training measurements on the held-out queries.
pub fn measure(model: &Model<f64>, data: &DeskData, seed: u64) -> Result<DeskReport, DeskError> {
    let doc = compile_document(DOC_ID, &data.manual.text, &data.parses, model, &data.chunk)?;
    let opts = QueryOptions::default();
    let store = whole_store(&doc);
    let fact_of = |row: usize| data.row_fact(&doc.store.meta(row).fact_id);
    let mut queries = Vec::new();
    for q in &data.heldout {
        let a_store = alpha(model, &q.query, &store)?;
        let (memory, retrieved) = memory_path_a(&q.query, &doc, model, &opts)?;
        let alpha_memory = !memory.is_empty() && {
            let a = alpha(model, &q.query, &memory)?;
            fact_of(memory.rows[argmax(&a)]) == Some(q.fact)
        };
        let answer = answer_path_a(&q.query, &doc, model, &opts)?;
        let gold_value = metric_tokens(&data.manual.facts[q.fact].value);
        let has_value = gold_value.iter().all(|v| metric_tokens(&answer.text).contains(v));
        let gold = &data.gold_passages[q.fact];
        let cites_passage = answer
            .top()
            .is_some_and(|c| gold.contains(&c.meta.provenance.passage_id) && fact_of(c.row) == Some(q.fact));
        let all_relevant_retrieved = gold.iter().all(|p| retrieved.contains(p));
        let b = answer_path_b(
            &q.query,
            DOC_ID,
            &data.manual.text,
            &data.parses,
            model,
            &opts,
            &data.chunk,
            None,
        )?;
        let paths_agree = b.memory.data == memory.data && b.memory.scores == memory.scores;
        queries.push(QueryOutcome {
            query: q.query.clone(),
            fact: q.fact,
            answer: answer.text,
            alpha_store: fact_of(argmax(&a_store)) == Some(q.fact),
            alpha_memory,
            has_value,
            cites_passage,
            all_relevant_retrieved,
            paths_agree,
        });
    }
    let n = queries.len() as f64;
    let frac = |f: fn(&QueryOutcome) -> bool| queries.iter().filter(|q| f(q)).count() as f64 / n;
    Ok(DeskReport {
        seed,
        config: model.config.clone(),
        parameters: model.params.num_scalars(),
        sentences: data.manual.sentences.len(),
        facts: data.manual.facts.len(),
        store_rows: doc.store.len(),
        passages: doc.passages.len(),
        unigram_entropy: 0.0,
        stage1_loss_before: 0.0,
        stage1_loss_after: 0.0,
        stage2_mse_before: 0.0,
        stage2_mse_after: 0.0,
        alpha_accuracy_store: frac(|q| q.alpha_store),
        alpha_accuracy_memory: frac(|q| q.alpha_memory),
        qa_accuracy: frac(|q| q.has_value && q.cites_passage),
        path_agreement: {
            let eligible: Vec<&QueryOutcome> = queries.iter().filter(|q| q.all_relevant_retrieved).collect();
            eligible.iter().filter(|q| q.paths_agree).count() as f64 / eligible.len().max(1) as f64
        },
        seconds: 0.0,
        queries,
        curves: Vec::new(),
    })
}
