use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::TrainerError;
use crate::grammarian::{parse_fact_id, select_spans, selection_spans, ParsedSentence};
use crate::text::{Vocab, BOS, EOS, SEP};

/// Splits text after `.`, `!` or `?` followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|(_, n)| n.is_whitespace()) {
            let end = i + c.len_utf8();
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Pretraining samples: each non-empty line is a document, cut into
/// consecutive windows of `context` sentences.
pub fn stage1_sequences(corpus: &str, vocab: &Vocab, context: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for doc in corpus.lines().filter(|l| !l.trim().is_empty()) {
        let sentences = split_sentences(doc);
        for window in sentences.chunks(context.max(1)) {
            let ids: Vec<usize> = window.iter().flat_map(|s| vocab.encode(s)).collect();
            if !ids.is_empty() {
                out.push(ids);
            }
        }
    }
    out
}

/// Decoder input `<bos> t…` and target `t… <eos>`, truncated to fit
/// `max_positions`.
pub(crate) fn lm_pair(seq: &[usize], max_positions: usize) -> (Vec<usize>, Vec<usize>) {
    let n = seq.len().min(max_positions.saturating_sub(1));
    let mut tgt_in = vec![BOS];
    tgt_in.extend_from_slice(&seq[..n]);
    let mut tgt = seq[..n].to_vec();
    tgt.push(EOS);
    (tgt_in, tgt)
}

/// `subject <sep> relation <sep> object <eos>`.
pub fn serialize_triple(vocab: &Vocab, subject: &str, relation: &str, object: &str) -> Vec<usize> {
    let mut out = vocab.encode(subject);
    out.push(SEP);
    out.extend(vocab.encode(relation));
    out.push(SEP);
    out.extend(vocab.encode(object));
    out.push(EOS);
    out
}

/// One line of a stage-2/3 training file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactQuery {
    pub query: String,
    pub fact_id: String,
    pub passage_id: usize,
    /// Facts sharing a group are never negatives of each other; defaults to
    /// the fact id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// A resolved (query, gold fact) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FactExample {
    pub query: Vec<usize>,
    pub sentence: ParsedSentence,
    pub fact_index: usize,
    /// Serialized triple used as the reconstruction target.
    pub target: Vec<usize>,
    pub key: String,
}

/// Resolves JSONL `{query, fact_id, passage_id}` lines against the parsed
/// sentences of the training document.
pub fn load_fact_examples(
    jsonl: &str,
    sentences: &[ParsedSentence],
    vocab: &Vocab,
) -> Result<Vec<FactExample>, TrainerError> {
    let by_id: HashMap<(usize, usize), &ParsedSentence> =
        sentences.iter().map(|s| ((s.passage_id, s.sent_id), s)).collect();
    let mut out = Vec::new();
    for (i, line) in jsonl.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |reason: String| TrainerError::Data(format!("line {}: {reason}", i + 1));
        let row: FactQuery = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let (p, s, k) =
            parse_fact_id(&row.fact_id).ok_or_else(|| bad(format!("malformed fact id `{}`", row.fact_id)))?;
        if p != row.passage_id {
            return Err(bad(format!(
                "fact `{}` is not in passage {}",
                row.fact_id, row.passage_id
            )));
        }
        let sentence = *by_id
            .get(&(p, s))
            .ok_or_else(|| bad(format!("no parsed sentence for fact `{}`", row.fact_id)))?;
        let selections = select_spans(sentence)?;
        let sel = selections
            .get(k)
            .ok_or_else(|| bad(format!("sentence has no fact {k} (`{}`)", row.fact_id)))?;
        let [s_ref, r_ref, o_ref] = selection_spans(sentence, sel);
        let query = vocab.encode(&row.query);
        if query.is_empty() {
            return Err(bad("empty query".into()));
        }
        out.push(FactExample {
            query,
            sentence: sentence.clone(),
            fact_index: k,
            target: serialize_triple(vocab, &s_ref.text, &r_ref.text, &o_ref.text),
            key: row.group.unwrap_or(row.fact_id),
        });
    }
    Ok(out)
}
