//! Ingestion, chunking, passage indexing and the two answer paths: Path A
//! reads a precompiled document, Path B extracts facts on demand from the
//! passages a query retrieves.

mod chunk;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use chunk::{chunk_ranges, words, ChunkConfig, Word};

use crate::grammarian::{extract_facts, write_parse_jsonl, GrammarianError, ParsedSentence};
use crate::librarian::{
    assemble_memory, read_f32, read_json, write_f32, write_json, AssemblyConfig, FlatIndex, Hit, LibrarianError,
    MemoryMatrix, MemoryStore, QueryVector,
};
use crate::numerics::Scalar;
use crate::reasoner::{AnswerRecord, GenerateOptions, Model, ReasonerError};
use crate::text::char_slice;

pub const DOC_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("document has no words")]
    EmptyDocument,
    #[error("{0}")]
    Usage(String),
    #[error("missing parses: {0}")]
    MissingParses(String),
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Librarian(#[from] LibrarianError),
    #[error(transparent)]
    Grammarian(#[from] GrammarianError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A chunk of a document. Offsets are characters of the document text;
/// `text` is exactly `doc[char_start..char_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    pub passage_id: usize,
    pub text: String,
    pub start_word: usize,
    pub end_word: usize,
    pub char_start: usize,
    pub char_end: usize,
    /// Ids of the stored facts extracted from this passage, in extraction
    /// order (a fact seen in two overlapping passages is attached to both).
    pub fact_ids: Vec<String>,
    /// Unit embedding; stored separately from the JSON metadata.
    #[serde(skip)]
    pub embedding: Vec<f32>,
}

/// Splits a document into overlapping word windows (embeddings left empty).
pub fn chunk(doc_id: &str, text: &str, cfg: &ChunkConfig) -> Result<Vec<Passage>, PipelineError> {
    let w = words(text);
    let ranges = chunk_ranges(w.len(), cfg)?;
    Ok(ranges
        .into_iter()
        .enumerate()
        .map(|(passage_id, (a, b))| {
            let (cs, ce) = (w[a].char_start, w[b - 1].char_end);
            Passage {
                doc_id: doc_id.to_string(),
                passage_id,
                text: char_slice(text, cs, ce)
                    .expect("word offsets lie inside the text")
                    .to_string(),
                start_word: a,
                end_word: b,
                char_start: cs,
                char_end: ce,
                fact_ids: Vec::new(),
                embedding: Vec::new(),
            }
        })
        .collect())
}

/// Mean-pooled, L2-normalized token embedding of a text.
pub fn embed_text<S: Scalar>(model: &Model<S>, text: &str) -> Result<Vec<f32>, PipelineError> {
    let mut ids = model.vocab.encode(text);
    if ids.is_empty() {
        return Err(PipelineError::Usage(format!("`{}` has no tokens", truncate(text, 40))));
    }
    ids.truncate(model.config.max_positions);
    Ok(model.pooled_embedding(&ids)?)
}

pub fn embed_passage<S: Scalar>(model: &Model<S>, passage: &Passage) -> Result<Vec<f32>, PipelineError> {
    embed_text(model, &passage.text)
}

fn truncate(s: &str, n: usize) -> String {
    if s.chars().count() <= n {
        s.to_string()
    } else {
        format!("{}…", s.chars().take(n).collect::<String>())
    }
}

/// Exact inner-product index over passage embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageIndex {
    index: FlatIndex,
}

impl PassageIndex {
    pub fn build(passages: &[Passage]) -> Result<Self, PipelineError> {
        let dim = passages.first().map_or(0, |p| p.embedding.len());
        let mut rows = Vec::with_capacity(dim * passages.len());
        for p in passages {
            if p.embedding.len() != dim {
                return Err(PipelineError::Usage(format!(
                    "passage {} is not embedded",
                    p.passage_id
                )));
            }
            rows.extend_from_slice(&p.embedding);
        }
        let n = passages.len();
        Ok(Self {
            index: FlatIndex::from_parts(dim, rows, vec![1.0; n], (0..n as u64).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Best `k` passages for a unit query (all of them when `k ≥ n`).
    pub fn search(&self, q: &[f32], k: usize) -> Result<Vec<Hit>, PipelineError> {
        Ok(self.index.top_k(q, k.min(self.len()).max(1))?)
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of every parameter name and value; changes whenever the weights do.
pub fn model_fingerprint<S: Scalar>(model: &Model<S>) -> String {
    let mut h = Sha256::new();
    for p in model.params.iter() {
        h.update(p.name.as_bytes());
        h.update([0]);
        for x in p.tensor.data() {
            h.update(x.to_f64().unwrap_or(f64::NAN).to_le_bytes());
        }
    }
    h.update(model.vocab.tokens().join("\n").as_bytes());
    hex::encode(h.finalize())
}

/// `doc_manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocManifest {
    pub format_version: u32,
    pub doc_id: String,
    pub source_hash: String,
    pub parse_hash: String,
    pub model_fingerprint: String,
    /// Seconds since the Unix epoch.
    pub built_at: u64,
    pub chunk: ChunkConfig,
    pub passages: usize,
    pub sentences: usize,
    pub facts_extracted: usize,
    pub rows: usize,
    pub duplicates: usize,
    pub warnings: Vec<String>,
}

/// A document compiled for Path A: passages with embeddings, the fact
/// store, and the parses the facts came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledDocument {
    pub manifest: DocManifest,
    pub passages: Vec<Passage>,
    pub store: MemoryStore,
    pub sentences: Vec<ParsedSentence>,
    index: PassageIndex,
}

fn group_parses(
    parses: &[ParsedSentence],
    passages: &[Passage],
    doc_id: &str,
) -> Result<BTreeMap<usize, Vec<ParsedSentence>>, PipelineError> {
    let mut by_passage: BTreeMap<usize, Vec<ParsedSentence>> = BTreeMap::new();
    for s in parses {
        if s.doc_id != doc_id {
            return Err(PipelineError::MissingParses(format!(
                "parse of sentence {} belongs to `{}`, not `{doc_id}`",
                s.sent_id, s.doc_id
            )));
        }
        if s.passage_id >= passages.len() {
            return Err(PipelineError::MissingParses(format!(
                "parse refers to passage {} but the document has {} passages; were the parses made from a different chunking?",
                s.passage_id,
                passages.len()
            )));
        }
        by_passage.entry(s.passage_id).or_default().push(s.clone());
    }
    for list in by_passage.values_mut() {
        list.sort_by_key(|s| s.sent_id);
    }
    Ok(by_passage)
}

/// Checks a sentence against the passage it claims to come from.
fn check_alignment(s: &ParsedSentence, passage: &Passage) -> Result<(), GrammarianError> {
    s.validate()?;
    for t in &s.tokens {
        match char_slice(&passage.text, t.char_start, t.char_end) {
            Some(x) if x == t.text => {}
            _ => {
                return Err(GrammarianError::ParseInput {
                    doc_id: s.doc_id.clone(),
                    passage_id: s.passage_id,
                    sent_id: s.sent_id,
                    reason: format!(
                        "token `{}` at {}..{} does not match the passage text",
                        t.text, t.char_start, t.char_end
                    ),
                })
            }
        }
    }
    Ok(())
}

/// Extracts facts from the sentences of some passages into `store` and
/// attaches them to their passages. Returns (facts extracted, warnings).
fn extract_into<S: Scalar>(
    model: &Model<S>,
    store: &mut MemoryStore,
    passages: &mut [Passage],
    order: &[usize],
    by_passage: &BTreeMap<usize, Vec<ParsedSentence>>,
    skip_bad: bool,
) -> Result<(usize, Vec<String>), PipelineError> {
    let mut extracted = 0;
    let mut warnings = Vec::new();
    for &p in order {
        let Some(sentences) = by_passage.get(&p) else {
            continue;
        };
        for s in sentences {
            let facts = check_alignment(s, &passages[p]).and_then(|()| extract_facts(s, &model.params, &model.vocab));
            let facts = match facts {
                Ok(f) => f,
                Err(e) if skip_bad => {
                    warnings.push(format!("passage {p}: skipped: {e}"));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            extracted += facts.len();
            let rows = store.add_facts(&facts)?;
            for r in rows {
                let id = store.meta(r).fact_id.clone();
                if !passages[p].fact_ids.contains(&id) {
                    passages[p].fact_ids.push(id);
                }
            }
        }
    }
    Ok((extracted, warnings))
}

fn embed_all<S: Scalar>(model: &Model<S>, passages: &mut [Passage]) -> Result<(), PipelineError> {
    for p in passages {
        p.embedding = embed_passage(model, p)?;
    }
    Ok(())
}

/// Path A build: chunk, embed every passage, extract facts from every
/// parsed sentence and store them.
pub fn compile_document<S: Scalar>(
    doc_id: &str,
    text: &str,
    parses: &[ParsedSentence],
    model: &Model<S>,
    cfg: &ChunkConfig,
) -> Result<CompiledDocument, PipelineError> {
    let mut passages = chunk(doc_id, text, cfg)?;
    embed_all(model, &mut passages)?;
    let by_passage = group_parses(parses, &passages, doc_id)?;
    let mut store = MemoryStore::new(model.config.d_model);
    let order: Vec<usize> = (0..passages.len()).collect();
    let (extracted, _) = extract_into(model, &mut store, &mut passages, &order, &by_passage, false)?;
    let mut warnings = Vec::new();
    if store.is_empty() {
        warnings.push("no facts could be extracted; answers will be unsupported".to_string());
    }
    let sentences: Vec<ParsedSentence> = by_passage.into_values().flatten().collect();
    let manifest = DocManifest {
        format_version: DOC_FORMAT_VERSION,
        doc_id: doc_id.to_string(),
        source_hash: sha256_hex(text.as_bytes()),
        parse_hash: sha256_hex(write_parse_jsonl(&sentences).as_bytes()),
        model_fingerprint: model_fingerprint(model),
        built_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        chunk: *cfg,
        passages: passages.len(),
        sentences: sentences.len(),
        facts_extracted: extracted,
        rows: store.len(),
        duplicates: extracted - store.len(),
        warnings,
    };
    let index = PassageIndex::build(&passages)?;
    Ok(CompiledDocument {
        manifest,
        passages,
        store,
        sentences,
        index,
    })
}

impl CompiledDocument {
    pub fn index(&self) -> &PassageIndex {
        &self.index
    }

    /// Store rows attached to each passage.
    pub fn passage_rows(&self) -> Vec<Vec<usize>> {
        self.passages
            .iter()
            .map(|p| p.fact_ids.iter().filter_map(|id| self.store.find(id)).collect())
            .collect()
    }

    /// Writes `doc_manifest.json`, `passages.jsonl`, `passage_rows.f32`,
    /// `sentences.jsonl` and the store files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join("doc_manifest.json"), &self.manifest)?;
        let mut lines = String::new();
        let mut rows = Vec::new();
        for p in &self.passages {
            lines.push_str(&serde_json::to_string(p).expect("passages serialize"));
            lines.push('\n');
            rows.extend_from_slice(&p.embedding);
        }
        let path = dir.join("passages.jsonl");
        fs::write(&path, lines).map_err(io_err(&path))?;
        write_f32(&dir.join("passage_rows.f32"), &rows)?;
        let path = dir.join("sentences.jsonl");
        fs::write(&path, write_parse_jsonl(&self.sentences)).map_err(io_err(&path))?;
        self.store.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let mpath = dir.join("doc_manifest.json");
        let manifest: DocManifest = read_json(&mpath)?;
        let fmt = |path: &Path, reason: String| PipelineError::Format {
            path: path.to_path_buf(),
            reason,
        };
        if manifest.format_version != DOC_FORMAT_VERSION {
            return Err(fmt(
                &mpath,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let ppath = dir.join("passages.jsonl");
        let text = fs::read_to_string(&ppath).map_err(io_err(&ppath))?;
        let mut passages: Vec<Passage> = text
            .lines()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| fmt(&ppath, format!("line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?;
        let store = MemoryStore::load(dir)?;
        let rpath = dir.join("passage_rows.f32");
        let rows = read_f32(&rpath)?;
        if passages.is_empty() || rows.len() % passages.len() != 0 {
            return Err(fmt(
                &rpath,
                format!("{} floats for {} passages", rows.len(), passages.len()),
            ));
        }
        let dim = rows.len() / passages.len();
        for (p, r) in passages.iter_mut().zip(rows.chunks_exact(dim)) {
            p.embedding = r.to_vec();
        }
        let spath = dir.join("sentences.jsonl");
        let text = fs::read_to_string(&spath).map_err(io_err(&spath))?;
        let sentences = crate::grammarian::read_parse_jsonl(&text)?;
        for p in &passages {
            for id in &p.fact_ids {
                if store.find(id).is_none() {
                    return Err(fmt(
                        &ppath,
                        format!("passage {} cites unknown fact `{id}`", p.passage_id),
                    ));
                }
            }
        }
        let index = PassageIndex::build(&passages)?;
        Ok(Self {
            manifest,
            passages,
            store,
            sentences,
            index,
        })
    }

    /// Whether this compilation is current for a source, its parses and a
    /// model.
    pub fn is_current<S: Scalar>(&self, text: &str, parses: &[ParsedSentence], model: &Model<S>) -> bool {
        let mut sorted = parses.to_vec();
        sorted.sort_by_key(|s| (s.passage_id, s.sent_id));
        self.manifest.source_hash == sha256_hex(text.as_bytes())
            && self.manifest.parse_hash == sha256_hex(write_parse_jsonl(&sorted).as_bytes())
            && self.manifest.model_fingerprint == model_fingerprint(model)
    }
}

/// Compiles into `dir` unless an up-to-date compilation is already there.
/// Returns the document and whether it was reused.
pub fn compile_to_dir<S: Scalar>(
    dir: &Path,
    doc_id: &str,
    text: &str,
    parses: &[ParsedSentence],
    model: &Model<S>,
    cfg: &ChunkConfig,
) -> Result<(CompiledDocument, bool), PipelineError> {
    if dir.join("doc_manifest.json").exists() {
        if let Ok(doc) = CompiledDocument::load(dir) {
            if doc.manifest.doc_id == doc_id && doc.manifest.chunk == *cfg && doc.is_current(text, parses, model) {
                return Ok((doc, true));
            }
        }
    }
    let doc = compile_document(doc_id, text, parses, model, cfg)?;
    doc.save(dir)?;
    Ok((doc, false))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryOptions {
    /// Passages retrieved per query.
    pub top_passages: usize,
    pub assembly: AssemblyConfig,
    pub generate: GenerateOptions,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self {
            top_passages: 20,
            assembly: AssemblyConfig::default(),
            generate: GenerateOptions::default(),
        }
    }
}

/// Query vectors: the pooled embedding for passages and the projected
/// query for fact rows.
fn query_vectors<S: Scalar>(model: &Model<S>, query: &str) -> Result<(Vec<f32>, QueryVector), PipelineError> {
    let ids = model.vocab.encode(query);
    if ids.is_empty() {
        return Err(PipelineError::Usage("empty query".into()));
    }
    model.check_ids(&ids)?;
    let passage_q = model.pooled_embedding(&ids)?;
    let fact_q = QueryVector::new(&model.fact_query(&ids)?, query)?;
    Ok((passage_q, fact_q))
}

/// Path A memory: retrieve passages in the compiled index and assemble
/// their stored facts. Returns the memory and the retrieved passage ids.
pub fn memory_path_a<S: Scalar>(
    query: &str,
    doc: &CompiledDocument,
    model: &Model<S>,
    opts: &QueryOptions,
) -> Result<(MemoryMatrix, Vec<usize>), PipelineError> {
    let (pq, fq) = query_vectors(model, query)?;
    let hits = doc.index.search(&pq, opts.top_passages)?;
    let all = doc.passage_rows();
    let retrieved: Vec<usize> = hits.iter().map(|h| h.index).collect();
    if doc.store.is_empty() {
        return Ok((MemoryMatrix::empty(doc.store.dim()), retrieved));
    }
    let lists: Vec<Vec<usize>> = retrieved.iter().map(|&p| all[p].clone()).collect();
    Ok((assemble_memory(&doc.store, &fq, &lists, &opts.assembly)?, retrieved))
}

/// Answers from a compiled document. An empty store yields an answer
/// flagged `unsupported`.
pub fn answer_path_a<S: Scalar>(
    query: &str,
    doc: &CompiledDocument,
    model: &Model<S>,
    opts: &QueryOptions,
) -> Result<AnswerRecord, PipelineError> {
    let (memory, _) = memory_path_a(query, doc, model, opts)?;
    Ok(model.generate(query, &memory, &doc.store, &opts.generate)?)
}

/// Everything Path B built for one query.
#[derive(Debug, Clone)]
pub struct PathBOutcome {
    pub answer: AnswerRecord,
    pub memory: MemoryMatrix,
    /// Passage ids in retrieval order.
    pub retrieved: Vec<usize>,
    pub facts_extracted: usize,
    /// The transient store the memory rows index into.
    pub store: MemoryStore,
    pub passages: Vec<Passage>,
    pub warnings: Vec<String>,
}

/// Path B: chunk and embed a new document, retrieve the top passages for
/// the query, extract facts from those passages only and answer from the
/// resulting transient memory. Sentences that fail to parse are skipped
/// with a warning. With `persist`, the transient store is saved there.
#[allow(clippy::too_many_arguments)]
pub fn answer_path_b<S: Scalar>(
    query: &str,
    doc_id: &str,
    text: &str,
    parses: &[ParsedSentence],
    model: &Model<S>,
    opts: &QueryOptions,
    chunk_cfg: &ChunkConfig,
    persist: Option<&Path>,
) -> Result<PathBOutcome, PipelineError> {
    let (pq, fq) = query_vectors(model, query)?;
    let mut passages = chunk(doc_id, text, chunk_cfg)?;
    embed_all(model, &mut passages)?;
    let index = PassageIndex::build(&passages)?;
    let retrieved: Vec<usize> = index.search(&pq, opts.top_passages)?.iter().map(|h| h.index).collect();
    let by_passage = group_parses(parses, &passages, doc_id)?;
    let mut store = MemoryStore::new(model.config.d_model);
    // Extract in document order so insertion order, and with it the
    // tie-breaking of equal scores, matches a compiled store.
    let mut order = retrieved.clone();
    order.sort_unstable();
    let (facts_extracted, mut warnings) = extract_into(model, &mut store, &mut passages, &order, &by_passage, true)?;
    let memory = if store.is_empty() {
        warnings.push("no facts in the retrieved passages".into());
        MemoryMatrix::empty(store.dim())
    } else {
        let lists: Vec<Vec<usize>> = retrieved
            .iter()
            .map(|&p| passages[p].fact_ids.iter().filter_map(|id| store.find(id)).collect())
            .collect();
        assemble_memory(&store, &fq, &lists, &opts.assembly)?
    };
    if let Some(dir) = persist {
        store.save(dir)?;
    }
    let answer = model.generate(query, &memory, &store, &opts.generate)?;
    Ok(PathBOutcome {
        answer,
        memory,
        retrieved,
        facts_extracted,
        store,
        passages,
        warnings,
    })
}

#[cfg(test)]
mod tests;
