//! Deterministic synthetic equipment manual: 50 facts, each stated by four
//! sentence templates, with gold dependency parses, training queries and
//! held-out query paraphrases.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grammarian::{fact_id, select_spans, ParsedSentence, ParsedToken};
use crate::pipeline::{chunk, ChunkConfig, PipelineError};
use crate::trainer::FactQuery;

pub const DOC_ID: &str = "manual";
pub const FACTS: usize = 50;
pub const TEMPLATES: usize = 4;

struct Device {
    noun: &'static str,
    prefix: &'static str,
    verb: &'static str,
    verb_base: &'static str,
    prep: &'static str,
    measure: &'static str,
    unit: &'static str,
}

const DEVICES: [Device; 10] = [
    Device {
        noun: "relay",
        prefix: "R",
        verb: "trips",
        verb_base: "trip",
        prep: "at",
        measure: "current",
        unit: "A",
    },
    Device {
        noun: "breaker",
        prefix: "B",
        verb: "opens",
        verb_base: "open",
        prep: "at",
        measure: "current",
        unit: "A",
    },
    Device {
        noun: "pump",
        prefix: "P",
        verb: "starts",
        verb_base: "start",
        prep: "at",
        measure: "pressure",
        unit: "kPa",
    },
    Device {
        noun: "valve",
        prefix: "V",
        verb: "closes",
        verb_base: "close",
        prep: "at",
        measure: "pressure",
        unit: "kPa",
    },
    Device {
        noun: "fan",
        prefix: "F",
        verb: "stops",
        verb_base: "stop",
        prep: "at",
        measure: "temperature",
        unit: "°C",
    },
    Device {
        noun: "heater",
        prefix: "H",
        verb: "cycles",
        verb_base: "cycle",
        prep: "at",
        measure: "temperature",
        unit: "°C",
    },
    Device {
        noun: "motor",
        prefix: "M",
        verb: "stalls",
        verb_base: "stall",
        prep: "at",
        measure: "speed",
        unit: "rpm",
    },
    Device {
        noun: "sensor",
        prefix: "S",
        verb: "triggers",
        verb_base: "trigger",
        prep: "at",
        measure: "voltage",
        unit: "V",
    },
    Device {
        noun: "alarm",
        prefix: "L",
        verb: "sounds",
        verb_base: "sound",
        prep: "at",
        measure: "level",
        unit: "dB",
    },
    Device {
        noun: "compressor",
        prefix: "C",
        verb: "resets",
        verb_base: "reset",
        prep: "after",
        measure: "delay",
        unit: "s",
    },
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthFact {
    pub index: usize,
    pub device: String,
    pub id: String,
    pub verb: String,
    pub verb_base: String,
    pub prep: String,
    pub measure: String,
    pub value: String,
    pub unit: String,
}

impl SynthFact {
    /// Expected answer text, e.g. `37 A`.
    pub fn answer(&self) -> String {
        format!("{} {}", self.value, self.unit)
    }
}

/// One sentence of the manual, located in the document text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSentence {
    pub fact: usize,
    pub template: usize,
    pub char_start: usize,
    pub char_end: usize,
    /// `(text, pos, head, deprel)` with heads relative to the sentence.
    rows: Vec<(String, &'static str, i64, &'static str)>,
}

/// A held-out or training query with its gold fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthQuery {
    pub query: String,
    pub fact: usize,
    /// Expected answer, `value unit`.
    pub reference: String,
    pub doc_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticManual {
    pub facts: Vec<SynthFact>,
    pub sentences: Vec<SynthSentence>,
    pub text: String,
}

type Row = (String, &'static str, i64, &'static str);

fn template_rows(f: &SynthFact, template: usize) -> Vec<Row> {
    let s = |x: &str| x.to_string();
    // Core clause "the DEV ID VERB PREP VALUE UNIT" with `o` tokens before it.
    let core = |o: i64, det: &str| -> Vec<Row> {
        vec![
            (s(det), "DET", o + 2, "det"),
            (s(&f.device), "NOUN", o + 2, "compound"),
            (s(&f.id), "PROPN", o + 3, "nsubj"),
            (s(&f.verb), "VERB", -1, "ROOT"),
            (s(&f.prep), "ADP", o + 3, "prep"),
            (s(&f.value), "NUM", o + 6, "nummod"),
            (s(&f.unit), "NOUN", o + 4, "pobj"),
        ]
    };
    let mut rows = match template {
        0 => core(0, "The"),
        1 => {
            let mut r = vec![(s("Normally"), "ADV", 5, "advmod"), (s(","), "PUNCT", 5, "punct")];
            r.extend(core(2, "the"));
            r
        }
        2 => {
            // "The DEV ID always VERB PREP VALUE UNIT"
            vec![
                (s("The"), "DET", 2, "det"),
                (s(&f.device), "NOUN", 2, "compound"),
                (s(&f.id), "PROPN", 4, "nsubj"),
                (s("always"), "ADV", 4, "advmod"),
                (s(&f.verb), "VERB", -1, "ROOT"),
                (s(&f.prep), "ADP", 4, "prep"),
                (s(&f.value), "NUM", 7, "nummod"),
                (s(&f.unit), "NOUN", 5, "pobj"),
            ]
        }
        _ => {
            let mut r = core(0, "The");
            r.push((s("during"), "ADP", 3, "prep"));
            r.push((s("tests"), "NOUN", 7, "pobj"));
            r
        }
    };
    let root = rows.iter().position(|r| r.2 < 0).expect("template has a root") as i64;
    rows.push((s("."), "PUNCT", root, "punct"));
    rows
}

fn render(rows: &[Row]) -> String {
    let mut out = String::new();
    for (i, (t, pos, _, _)) in rows.iter().enumerate() {
        if i > 0 && *pos != "PUNCT" {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

impl SyntheticManual {
    /// Builds the manual. Values are distinct two-digit numbers; sentence
    /// order is shuffled so the four statements of a fact are spread out.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values: Vec<u32> = (10..100).collect();
        values.shuffle(&mut rng);
        let facts: Vec<SynthFact> = (0..FACTS)
            .map(|i| {
                let d = &DEVICES[i % DEVICES.len()];
                SynthFact {
                    index: i,
                    device: d.noun.into(),
                    id: format!("{}{}", d.prefix, i / DEVICES.len() + 1),
                    verb: d.verb.into(),
                    verb_base: d.verb_base.into(),
                    prep: d.prep.into(),
                    measure: d.measure.into(),
                    value: values[i].to_string(),
                    unit: d.unit.into(),
                }
            })
            .collect();
        let mut order: Vec<(usize, usize)> = (0..FACTS).flat_map(|f| (0..TEMPLATES).map(move |t| (f, t))).collect();
        order.shuffle(&mut rng);
        let mut text = String::new();
        let mut sentences = Vec::with_capacity(order.len());
        for (f, t) in order {
            let rows = template_rows(&facts[f], t);
            let sentence = render(&rows);
            if !text.is_empty() {
                text.push(' ');
            }
            let start = text.chars().count();
            text.push_str(&sentence);
            sentences.push(SynthSentence {
                fact: f,
                template: t,
                char_start: start,
                char_end: start + sentence.chars().count(),
                rows,
            });
        }
        Self { facts, sentences, text }
    }

    /// Gold parses of every sentence lying wholly inside a passage, with
    /// passage-relative offsets. `sent_id` counts sentences within the
    /// passage.
    pub fn gold_parses(&self, cfg: &ChunkConfig) -> Result<Vec<ParsedSentence>, PipelineError> {
        let passages = chunk(DOC_ID, &self.text, cfg)?;
        let mut out = Vec::new();
        for p in &passages {
            let inside = self
                .sentences
                .iter()
                .filter(|s| s.char_start >= p.char_start && s.char_end <= p.char_end);
            for (sent_id, s) in inside.enumerate() {
                out.push(self.parse(s, p.passage_id, sent_id, s.char_start - p.char_start));
            }
        }
        Ok(out)
    }

    fn parse(&self, s: &SynthSentence, passage_id: usize, sent_id: usize, base: usize) -> ParsedSentence {
        let raw = render(&s.rows);
        let mut tokens = Vec::with_capacity(s.rows.len());
        let mut pos_in_raw = 0;
        for (i, (text, pos, head, deprel)) in s.rows.iter().enumerate() {
            if i > 0 && *pos != "PUNCT" {
                pos_in_raw += 1;
            }
            let start = base + pos_in_raw;
            let len = text.chars().count();
            tokens.push(ParsedToken {
                text: text.clone(),
                lemma: text.to_lowercase(),
                pos: (*pos).into(),
                head: *head,
                deprel: (*deprel).into(),
                char_start: start,
                char_end: start + len,
            });
            pos_in_raw += len;
        }
        ParsedSentence {
            doc_id: DOC_ID.into(),
            passage_id,
            sent_id,
            raw_text: raw,
            tokens,
        }
    }

    /// Fact index of every gold parse, keyed by `(passage_id, sent_id)`.
    pub fn parse_facts(
        &self,
        parses: &[ParsedSentence],
        cfg: &ChunkConfig,
    ) -> Result<BTreeMap<(usize, usize), usize>, PipelineError> {
        let passages = chunk(DOC_ID, &self.text, cfg)?;
        let mut out = BTreeMap::new();
        for p in parses {
            let start = passages[p.passage_id].char_start + p.base_offset();
            let s = self
                .sentences
                .iter()
                .find(|s| s.char_start == start)
                .expect("gold parses come from manual sentences");
            out.insert((p.passage_id, p.sent_id), s.fact);
        }
        Ok(out)
    }

    /// Passages holding at least one statement of each fact.
    pub fn gold_passages(
        &self,
        parses: &[ParsedSentence],
        cfg: &ChunkConfig,
    ) -> Result<Vec<BTreeSet<usize>>, PipelineError> {
        let mut out = vec![BTreeSet::new(); self.facts.len()];
        for ((p, _), f) in self.parse_facts(parses, cfg)? {
            out[f].insert(p);
        }
        Ok(out)
    }

    /// Four training paraphrases per fact, each tied to one statement of
    /// the fact (cycling through its occurrences). Facts are grouped so a
    /// batch never uses one fact as a negative for another statement of it.
    pub fn training_queries(
        &self,
        parses: &[ParsedSentence],
        cfg: &ChunkConfig,
    ) -> Result<Vec<FactQuery>, PipelineError> {
        let map = self.parse_facts(parses, cfg)?;
        let mut occurrences: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.facts.len()];
        for (&(p, s), &f) in &map {
            occurrences[f].push((p, s));
        }
        let mut out = Vec::new();
        for f in &self.facts {
            let occ = &occurrences[f.index];
            if occ.is_empty() {
                continue;
            }
            for (k, query) in train_templates(f).into_iter().enumerate() {
                let (p, s) = occ[k % occ.len()];
                out.push(FactQuery {
                    query,
                    fact_id: fact_id(p, s, 0),
                    passage_id: p,
                    group: Some(format!("fact-{}", f.index)),
                });
            }
        }
        Ok(out)
    }

    /// One held-out paraphrase per fact, worded unlike any training query.
    pub fn heldout_queries(&self) -> Vec<SynthQuery> {
        self.facts
            .iter()
            .map(|f| SynthQuery {
                query: format!(
                    "Which {} value makes the {} {} {}?",
                    f.measure, f.device, f.id, f.verb_base
                ),
                fact: f.index,
                reference: f.answer(),
                doc_id: DOC_ID.into(),
            })
            .collect()
    }

    /// Stage-1 corpus: the manual as one document line.
    pub fn corpus(&self) -> String {
        format!("{}\n", self.text)
    }

    /// Every text the vocabulary must cover.
    pub fn vocabulary_texts(&self) -> Vec<String> {
        let mut t = vec![self.text.clone()];
        for f in &self.facts {
            t.extend(train_templates(f));
        }
        t.extend(self.heldout_queries().into_iter().map(|q| q.query));
        t
    }

    /// Gold parses whose span heuristics yield exactly one fact.
    pub fn check_parses(parses: &[ParsedSentence]) -> bool {
        parses
            .iter()
            .all(|p| select_spans(p).map(|s| s.len() == 1).unwrap_or(false))
    }
}

fn train_templates(f: &SynthFact) -> Vec<String> {
    vec![
        format!("At what {} does the {} {} {}?", f.measure, f.device, f.id, f.verb_base),
        format!("When does {} {} {}?", f.device, f.id, f.verb_base),
        format!(
            "What {} is needed before the {} {} {}?",
            f.measure, f.device, f.id, f.verb
        ),
        format!("Tell me the {} setting for {} {}.", f.measure, f.device, f.id),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammarian::selection_spans;

    #[test]
    fn manual_shape() {
        let m = SyntheticManual::generate(7);
        assert_eq!(m.sentences.len(), FACTS * TEMPLATES);
        let values: BTreeSet<&str> = m.facts.iter().map(|f| f.value.as_str()).collect();
        assert_eq!(values.len(), FACTS);
        let ids: BTreeSet<&str> = m.facts.iter().map(|f| f.id.as_str()).collect();
        assert_eq!(ids.len(), FACTS);
        for s in &m.sentences {
            assert_eq!(
                crate::text::char_slice(&m.text, s.char_start, s.char_end).unwrap(),
                render(&s.rows)
            );
        }
        assert_eq!(m, SyntheticManual::generate(7));
        assert_ne!(m.text, SyntheticManual::generate(8).text);
    }

    #[test]
    fn gold_parses_are_valid_and_yield_the_fact() {
        let m = SyntheticManual::generate(1);
        let cfg = ChunkConfig::default();
        let parses = m.gold_parses(&cfg).unwrap();
        assert!(parses.len() >= FACTS * TEMPLATES);
        assert!(SyntheticManual::check_parses(&parses));
        let passages = chunk(DOC_ID, &m.text, &cfg).unwrap();
        let facts = m.parse_facts(&parses, &cfg).unwrap();
        for p in &parses {
            p.validate().unwrap();
            for t in &p.tokens {
                let text = crate::text::char_slice(&passages[p.passage_id].text, t.char_start, t.char_end).unwrap();
                assert_eq!(text, t.text);
            }
            let sel = &select_spans(p).unwrap()[0];
            let [s, r, o] = selection_spans(p, sel);
            let f = &m.facts[facts[&(p.passage_id, p.sent_id)]];
            assert!(s.text.ends_with(&format!("{} {}", f.device, f.id)), "{}", s.text);
            assert!(r.text.starts_with(&f.verb) && r.text.ends_with(&f.prep), "{}", r.text);
            assert_eq!(o.text, f.answer());
        }
        let gold = m.gold_passages(&parses, &cfg).unwrap();
        assert!(gold.iter().all(|g| !g.is_empty()));
    }

    #[test]
    fn queries_cover_every_fact() {
        let m = SyntheticManual::generate(1);
        let cfg = ChunkConfig::default();
        let parses = m.gold_parses(&cfg).unwrap();
        let q = m.training_queries(&parses, &cfg).unwrap();
        assert_eq!(q.len(), FACTS * 4);
        let held = m.heldout_queries();
        assert_eq!(held.len(), FACTS);
        let train: BTreeSet<&str> = q.iter().map(|x| x.query.as_str()).collect();
        assert!(held.iter().all(|h| !train.contains(h.query.as_str())));
    }
}
