//! Fact extraction: dependency-parsed sentences in, projected
//! subject/relation/object memory rows with provenance out.

mod numeric;
mod parse;
mod spans;
mod tree_lstm;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NumericsError, ParamStore, Scalar, Var};
use crate::text::Vocab;

pub use numeric::{normalize_numeric, NumericValue};
pub use parse::{read_parse_jsonl, write_parse_jsonl, ParsedSentence, ParsedToken};
pub use spans::{select_spans, SelectionMethod, SpanSelection};
pub use tree_lstm::{encode_span, encode_tree, NodeKind, SpanTree, TreeLstmVars};

/// Token embedding table shared by the Tree-LSTM and the transformer.
pub const TOKEN_EMBEDDING: &str = "embed.tokens";

pub const HEURISTIC_CONFIDENCE: f64 = 0.9;
pub const FALLBACK_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrammarianError {
    #[error("bad parse for doc `{doc_id}` passage {passage_id} sentence {sent_id}: {reason}")]
    ParseInput {
        doc_id: String,
        passage_id: usize,
        sent_id: usize,
        reason: String,
    },
    #[error("parse file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Widths of the subject, relation and object projections for a memory row
/// of width `d` (equal thirds when `d` divides by three).
pub fn split3(d: usize) -> [usize; 3] {
    let a = d.div_ceil(3);
    let b = (d - a).div_ceil(2);
    [a, b, d - a - b]
}

/// Names and `(rows, cols)` shapes of every grammarian parameter for model
/// width `d`. Biases are single rows.
pub fn param_shapes(d: usize) -> Vec<(String, usize, usize)> {
    let mut out: Vec<(String, usize, usize)> = tree_lstm::param_names()
        .into_iter()
        .map(|n| {
            let rows = if n.contains(".b_") { 1 } else { d };
            (n, rows, d)
        })
        .collect();
    for (part, w) in ["s", "r", "o"].into_iter().zip(split3(d)) {
        out.push((format!("grammarian.proj.w_{part}"), d, w));
        out.push((format!("grammarian.proj.b_{part}"), 1, w));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRef {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

/// Where a fact came from. Offsets are passage-relative characters; the
/// outer range covers all three spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub doc_id: String,
    pub passage_id: usize,
    pub sent_id: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub spans: [SpanRef; 3],
}

impl Provenance {
    pub fn span_texts(&self) -> [&str; 3] {
        [&self.spans[0].text, &self.spans[1].text, &self.spans[2].text]
    }
}

/// One extracted fact. `m` is exactly `v_s ‖ v_r ‖ v_o` (not normalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactTriple {
    pub fact_id: String,
    pub subject_text: String,
    pub relation_text: String,
    pub object_text: String,
    pub v_s: Vec<f32>,
    pub v_r: Vec<f32>,
    pub v_o: Vec<f32>,
    pub m: Vec<f32>,
    pub confidence: f64,
    pub selection: SpanSelection,
    pub numeric: Option<NumericValue>,
    pub provenance: Provenance,
}

/// Identifier of the `k`-th fact of a sentence, unique within a document.
pub fn fact_id(passage_id: usize, sent_id: usize, k: usize) -> String {
    format!("p{passage_id}-s{sent_id}-f{k}")
}

/// Inverse of [`fact_id`].
pub fn parse_fact_id(id: &str) -> Option<(usize, usize, usize)> {
    let mut it = id.split('-');
    let p = it.next()?.strip_prefix('p')?.parse().ok()?;
    let s = it.next()?.strip_prefix('s')?.parse().ok()?;
    let f = it.next()?.strip_prefix('f')?.parse().ok()?;
    it.next().is_none().then_some((p, s, f))
}

/// Graph handles of a projected fact.
#[derive(Debug, Clone, Copy)]
pub struct FactVars {
    pub v_s: Var,
    pub v_r: Var,
    pub v_o: Var,
    pub m: Var,
}

/// `v_x = GELU(h_x·W_x + b_x)` for each part, and `m = [v_s | v_r | v_o]`.
pub fn project_fact<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    h_s: Var,
    h_r: Var,
    h_o: Var,
) -> Result<FactVars, GrammarianError> {
    let mut v = [h_s; 3];
    for (slot, (part, h)) in v.iter_mut().zip([("s", h_s), ("r", h_r), ("o", h_o)]) {
        let w = g.param(store, &format!("grammarian.proj.w_{part}"))?;
        let b = g.param(store, &format!("grammarian.proj.b_{part}"))?;
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, b)?;
        *slot = g.gelu(z)?;
    }
    let m = g.concat_cols(&v)?;
    Ok(FactVars {
        v_s: v[0],
        v_r: v[1],
        v_o: v[2],
        m,
    })
}

/// Embedding rows (`1×d` each) of every token of a sentence.
pub fn sentence_inputs<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    vocab: &Vocab,
    sentence: &ParsedSentence,
) -> Result<Vec<Var>, GrammarianError> {
    let table = g.param(store, TOKEN_EMBEDDING)?;
    sentence
        .tokens
        .iter()
        .map(|t| Ok(g.gather(table, &[vocab.id(&t.text)])?))
        .collect()
}

/// Encodes the three spans of a selection and projects them to a memory row.
pub fn encode_selection<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    tree: &TreeLstmVars,
    inputs: &[Var],
    sentence: &ParsedSentence,
    selection: &SpanSelection,
) -> Result<FactVars, GrammarianError> {
    let mut h = Vec::with_capacity(3);
    for range in selection.ranges() {
        let span = SpanTree::from_span(sentence, range.clone())?;
        h.push(encode_span(g, tree, &span, inputs)?);
    }
    project_fact(g, store, h[0], h[1], h[2])
}

/// Graph-side memory row of the `k`-th fact of a sentence, for training.
pub fn fact_row<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    vocab: &Vocab,
    sentence: &ParsedSentence,
    k: usize,
) -> Result<FactVars, GrammarianError> {
    let selections = select_spans(sentence)?;
    let sel = selections.get(k).ok_or_else(|| {
        GrammarianError::Usage(format!(
            "sentence {} has {} facts, asked for fact {k}",
            sentence.sent_id,
            selections.len()
        ))
    })?;
    let tree = TreeLstmVars::load(g, store)?;
    let inputs = sentence_inputs(g, store, vocab, sentence)?;
    encode_selection(g, store, &tree, &inputs, sentence, sel)
}

fn span_ref(sentence: &ParsedSentence, range: &Range<usize>) -> SpanRef {
    let start = sentence.tokens[range.start].char_start;
    let end = sentence.tokens[range.end - 1].char_end;
    SpanRef {
        text: sentence.slice(start, end).unwrap_or_default().to_string(),
        char_start: start,
        char_end: end,
    }
}

/// Source text and offsets of the three spans of a selection.
pub fn selection_spans(sentence: &ParsedSentence, selection: &SpanSelection) -> [SpanRef; 3] {
    selection.ranges().map(|r| span_ref(sentence, r))
}

fn to_f32<S: Scalar>(g: &Graph<S>, v: Var) -> Vec<f32> {
    g.value(v)
        .data()
        .iter()
        .map(|x| x.to_f32().unwrap_or(f32::NAN))
        .collect()
}

/// Selects spans, encodes them with the Tree-LSTM, projects them and
/// attaches numeric payloads and provenance. Verbless sentences yield nothing.
pub fn extract_facts<S: Scalar>(
    sentence: &ParsedSentence,
    store: &ParamStore<S>,
    vocab: &Vocab,
) -> Result<Vec<FactTriple>, GrammarianError> {
    let selections = select_spans(sentence)?;
    if selections.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let tree = TreeLstmVars::load(&mut g, store)?;
    let inputs = sentence_inputs(&mut g, store, vocab, sentence)?;
    let mut out = Vec::with_capacity(selections.len());
    for (k, sel) in selections.into_iter().enumerate() {
        let v = encode_selection(&mut g, store, &tree, &inputs, sentence, &sel)?;
        let spans = selection_spans(sentence, &sel);
        let confidence = match sel.method {
            SelectionMethod::DependencyHeuristic => HEURISTIC_CONFIDENCE,
            SelectionMethod::Fallback => FALLBACK_CONFIDENCE,
        };
        out.push(FactTriple {
            fact_id: fact_id(sentence.passage_id, sentence.sent_id, k),
            subject_text: spans[0].text.clone(),
            relation_text: spans[1].text.clone(),
            object_text: spans[2].text.clone(),
            v_s: to_f32(&g, v.v_s),
            v_r: to_f32(&g, v.v_r),
            v_o: to_f32(&g, v.v_o),
            m: to_f32(&g, v.m),
            confidence,
            numeric: normalize_numeric(&spans[2].text),
            provenance: Provenance {
                doc_id: sentence.doc_id.clone(),
                passage_id: sentence.passage_id,
                sent_id: sentence.sent_id,
                char_start: spans.iter().map(|s| s.char_start).min().unwrap_or(0),
                char_end: spans.iter().map(|s| s.char_end).max().unwrap_or(0),
                spans,
            },
            selection: sel,
        });
    }
    Ok(out)
}

/// Serializes facts as JSON lines.
pub fn write_fact_table(facts: &[FactTriple]) -> String {
    let mut out = String::new();
    for f in facts {
        out.push_str(&serde_json::to_string(f).expect("facts serialize"));
        out.push('\n');
    }
    out
}

pub fn read_fact_table(text: &str) -> Result<Vec<FactTriple>, GrammarianError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| GrammarianError::Format {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
