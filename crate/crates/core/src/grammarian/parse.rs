use serde::{Deserialize, Serialize};

use super::GrammarianError;

/// One token of a dependency parse. `head` is the 0-based index of the
/// governing token, or `-1` for the sentence root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParsedToken {
    pub text: String,
    pub lemma: String,
    pub pos: String,
    pub head: i64,
    pub deprel: String,
    pub char_start: usize,
    pub char_end: usize,
}

/// A dependency-parsed sentence, one line of a parse file.
///
/// Token offsets count Unicode scalar values from the start of the passage
/// text. `raw_text` holds the sentence itself and starts at the first token's
/// `char_start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParsedSentence {
    pub doc_id: String,
    pub passage_id: usize,
    pub sent_id: usize,
    pub raw_text: String,
    pub tokens: Vec<ParsedToken>,
}

impl ParsedSentence {
    /// Passage offset of `raw_text[0]`.
    pub fn base_offset(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.char_start)
    }

    /// Text between two passage offsets, if they fall inside this sentence.
    pub fn slice(&self, start: usize, end: usize) -> Option<&str> {
        let base = self.base_offset();
        crate::text::char_slice(&self.raw_text, start.checked_sub(base)?, end.checked_sub(base)?)
    }

    pub fn head(&self, i: usize) -> Option<usize> {
        usize::try_from(self.tokens[i].head).ok()
    }

    /// Dependents of every token, in token order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.tokens.len()];
        for i in 0..self.tokens.len() {
            if let Some(h) = self.head(i) {
                out[h].push(i);
            }
        }
        out
    }

    pub fn root(&self) -> Option<usize> {
        self.tokens.iter().position(|t| t.head < 0)
    }

    /// Checks tree shape and offsets.
    pub fn validate(&self) -> Result<(), GrammarianError> {
        let err = |reason: String| GrammarianError::ParseInput {
            doc_id: self.doc_id.clone(),
            passage_id: self.passage_id,
            sent_id: self.sent_id,
            reason,
        };
        let n = self.tokens.len();
        if n == 0 {
            return Err(err("sentence has no tokens".into()));
        }
        let roots = self.tokens.iter().filter(|t| t.head < 0).count();
        if roots != 1 {
            return Err(err(format!("expected exactly one root, found {roots}")));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.head < -1 || t.head >= n as i64 || t.head == i as i64 {
                return Err(err(format!("token {i} has invalid head {}", t.head)));
            }
        }
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(h) = self.head(cur) {
                cur = h;
                steps += 1;
                if steps > n {
                    return Err(err(format!("head chain from token {start} has a cycle")));
                }
            }
        }
        let mut prev_end = self.base_offset();
        for (i, t) in self.tokens.iter().enumerate() {
            if t.char_start < prev_end || t.char_end < t.char_start {
                return Err(err(format!("token {i} offsets overlap or are reversed")));
            }
            match self.slice(t.char_start, t.char_end) {
                Some(s) if s == t.text => {}
                Some(s) => return Err(err(format!("token {i} text `{}` does not match source `{s}`", t.text))),
                None => return Err(err(format!("token {i} offsets fall outside raw_text"))),
            }
            prev_end = t.char_end;
        }
        Ok(())
    }
}

/// Reads a parse file (JSON lines). Blank lines are skipped.
/// One JSON object per line, in the given order.
pub fn write_parse_jsonl(parses: &[ParsedSentence]) -> String {
    let mut out = String::new();
    for s in parses {
        out.push_str(&serde_json::to_string(s).expect("parses serialize"));
        out.push('\n');
    }
    out
}

pub fn read_parse_jsonl(text: &str) -> Result<Vec<ParsedSentence>, GrammarianError> {
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
