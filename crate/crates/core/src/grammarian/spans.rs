use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{GrammarianError, ParsedSentence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMethod {
    DependencyHeuristic,
    Fallback,
}

/// Token-index ranges of the three fact spans within one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSelection {
    pub subject: Range<usize>,
    pub relation: Range<usize>,
    pub object: Range<usize>,
    pub method: SelectionMethod,
}

impl SpanSelection {
    pub fn ranges(&self) -> [&Range<usize>; 3] {
        [&self.subject, &self.relation, &self.object]
    }
}

const SUBJECT_RELS: [&str; 2] = ["nsubj", "nsubjpass"];
const VERB_GROUP_RELS: [&str; 5] = ["aux", "auxpass", "neg", "prt", "compound:prt"];

fn is_verb(pos: &str) -> bool {
    matches!(pos, "VERB" | "AUX")
}

fn is_nominal(pos: &str) -> bool {
    matches!(pos, "NOUN" | "PROPN" | "PRON")
}

struct Tree<'a> {
    s: &'a ParsedSentence,
    children: Vec<Vec<usize>>,
}

impl<'a> Tree<'a> {
    fn new(s: &'a ParsedSentence) -> Self {
        Self {
            s,
            children: s.children(),
        }
    }

    fn rel(&self, i: usize) -> String {
        self.s.tokens[i].deprel.to_ascii_lowercase()
    }

    fn pos(&self, i: usize) -> &str {
        &self.s.tokens[i].pos
    }

    fn first_child(&self, i: usize, rels: &[&str]) -> Option<usize> {
        self.children[i]
            .iter()
            .copied()
            .find(|&c| rels.contains(&self.rel(c).as_str()))
    }

    /// Covering range of the subtree rooted at `i`.
    fn subtree(&self, i: usize) -> Range<usize> {
        let (mut lo, mut hi) = (i, i);
        let mut stack = vec![i];
        while let Some(n) = stack.pop() {
            lo = lo.min(n);
            hi = hi.max(n);
            stack.extend(&self.children[n]);
        }
        lo..hi + 1
    }

    fn is_clausal_head(&self, i: usize) -> bool {
        is_verb(self.pos(i)) && !matches!(self.rel(i).as_str(), "aux" | "auxpass")
    }

    /// Object dependent searched as dobj, attr, pobj (directly or through a
    /// governed preposition), oprd. Returns the object and the preposition.
    fn object_of(&self, verb: usize) -> Option<(usize, Option<usize>)> {
        if let Some(o) = self.first_child(verb, &["dobj", "obj"]) {
            return Some((o, None));
        }
        if let Some(o) = self.first_child(verb, &["attr"]) {
            return Some((o, None));
        }
        if let Some(o) = self.first_child(verb, &["pobj"]) {
            return Some((o, None));
        }
        for &p in &self.children[verb] {
            if self.rel(p) == "prep" {
                if let Some(o) = self.first_child(p, &["pobj"]) {
                    return Some((o, Some(p)));
                }
            }
        }
        self.first_child(verb, &["oprd"]).map(|o| (o, None))
    }

    fn verb_group(&self, verb: usize, prep: Option<usize>) -> Range<usize> {
        let mut members = vec![verb];
        members.extend(
            self.children[verb]
                .iter()
                .copied()
                .filter(|&c| VERB_GROUP_RELS.contains(&self.rel(c).as_str())),
        );
        members.extend(prep);
        let lo = *members.iter().min().expect("non-empty");
        let hi = *members.iter().max().expect("non-empty");
        lo..hi + 1
    }

    fn main_verb(&self) -> Option<usize> {
        let root = self.s.root()?;
        if self.is_clausal_head(root) {
            return Some(root);
        }
        (0..self.s.tokens.len()).find(|&i| self.is_clausal_head(i))
    }

    /// Climbs from a nominal token to the head of its noun phrase, staying on
    /// one side of the verb.
    fn phrase_head(&self, mut tok: usize, verb: usize) -> usize {
        while let Some(h) = self.s.head(tok) {
            let same_side = (h < verb) == (tok < verb) && h != verb;
            if same_side && is_nominal(self.pos(h)) {
                tok = h;
            } else {
                break;
            }
        }
        tok
    }

    fn clipped_subtree(&self, tok: usize, side: Range<usize>) -> Range<usize> {
        let r = self.subtree(tok);
        r.start.max(side.start)..r.end.min(side.end)
    }

    fn fallback(&self) -> Option<SpanSelection> {
        let verb = self.main_verb()?;
        let n = self.s.tokens.len();
        let before = (0..verb)
            .rev()
            .find(|&i| is_nominal(self.pos(i)))
            .map(|i| self.clipped_subtree(self.phrase_head(i, verb), 0..verb));
        let after = (verb + 1..n)
            .find(|&i| is_nominal(self.pos(i)))
            .map(|i| self.clipped_subtree(self.phrase_head(i, verb), verb + 1..n));
        let (subject, object) = match (before, after) {
            (Some(s), Some(o)) => (s, o),
            (Some(s), None) => (s.clone(), s),
            (None, Some(o)) => (o.clone(), o),
            (None, None) => return None,
        };
        Some(SpanSelection {
            subject,
            relation: self.verb_group(verb, None),
            object,
            method: SelectionMethod::Fallback,
        })
    }
}

/// Picks subject, relation and object spans for every clause of a sentence.
///
/// Each clausal verb with an `nsubj`/`nsubjpass` and an object dependent
/// yields one selection. When no clause matches, a single fallback selection
/// is built around the main verb and its nearest noun phrases.
pub fn select_spans(sentence: &ParsedSentence) -> Result<Vec<SpanSelection>, GrammarianError> {
    sentence.validate()?;
    let tree = Tree::new(sentence);
    let mut out = Vec::new();
    for verb in 0..sentence.tokens.len() {
        if !tree.is_clausal_head(verb) {
            continue;
        }
        let Some(subj) = tree.first_child(verb, &SUBJECT_RELS) else {
            continue;
        };
        let Some((obj, prep)) = tree.object_of(verb) else {
            continue;
        };
        out.push(SpanSelection {
            subject: tree.subtree(subj),
            relation: tree.verb_group(verb, prep),
            object: tree.subtree(obj),
            method: SelectionMethod::DependencyHeuristic,
        });
    }
    if out.is_empty() {
        out.extend(tree.fallback());
    }
    Ok(out)
}
