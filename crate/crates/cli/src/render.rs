//! Plain-text rendering of answers, facts and passages.

use std::fmt::Write;

use smart_core::librarian::MemoryMeta;
use smart_core::pipeline::Passage;
use smart_core::reasoner::AnswerRecord;
use smart_core::text::char_slice;

/// Document offset of a passage-relative character, when the passage is known.
fn absolute(passages: &[Passage], passage_id: usize, offset: usize) -> Option<usize> {
    passages.get(passage_id).map(|p| p.char_start + offset)
}

/// Answer text, then one provenance entry per consulted row unless `quiet`.
pub fn answer(record: &AnswerRecord, passages: &[Passage], quiet: bool) -> String {
    let mut s = String::new();
    if record.unsupported {
        let _ = writeln!(s, "{} [unsupported: no facts in memory]", record.text);
    } else {
        let _ = writeln!(s, "{}", record.text);
    }
    if quiet {
        return s;
    }
    if record.consulted.is_empty() {
        let _ = writeln!(s, "provenance: none");
        return s;
    }
    let _ = writeln!(s, "provenance:");
    for (i, c) in record.consulted.iter().enumerate() {
        let m = &c.meta;
        let p = &m.provenance;
        let _ = writeln!(
            s,
            "  [{}] ({} | {} | {})  alpha={:.3} score={:.3}",
            i + 1,
            m.subject_text,
            m.relation_text,
            m.object_text,
            c.alpha,
            c.score
        );
        let _ = write!(
            s,
            "      fact={} doc={} passage={} sentence={} chars={}..{}",
            m.fact_id, p.doc_id, p.passage_id, p.sent_id, p.char_start, p.char_end
        );
        if let (Some(a), Some(b)) = (
            absolute(passages, p.passage_id, p.char_start),
            absolute(passages, p.passage_id, p.char_end),
        ) {
            let _ = write!(s, " (document {a}..{b})");
        }
        s.push('\n');
    }
    s
}

/// One fact with the passage text around it; the fact's span is bracketed.
pub fn fact(meta: &MemoryMeta, passage: Option<&Passage>, window: usize) -> String {
    let p = &meta.provenance;
    let mut s = String::new();
    let _ = writeln!(s, "fact       {}", meta.fact_id);
    let _ = writeln!(s, "subject    {}", meta.subject_text);
    let _ = writeln!(s, "relation   {}", meta.relation_text);
    let _ = writeln!(s, "object     {}", meta.object_text);
    let _ = writeln!(s, "confidence {:.2}", meta.confidence);
    if let Some(n) = &meta.numeric {
        if n.is_range {
            let _ = writeln!(s, "numeric    {}..{} {}", n.lo, n.hi, n.unit);
        } else {
            let _ = writeln!(s, "numeric    {} {}", n.lo, n.unit);
        }
    }
    let _ = writeln!(
        s,
        "source     doc={} passage={} sentence={} chars={}..{}",
        p.doc_id, p.passage_id, p.sent_id, p.char_start, p.char_end
    );
    for (name, span) in ["subject", "relation", "object"].iter().zip(&p.spans) {
        let _ = writeln!(s, "  {name:<9}{}..{} `{}`", span.char_start, span.char_end, span.text);
    }
    if let Some(passage) = passage {
        let n = passage.text.chars().count();
        let a = p.char_start.saturating_sub(window);
        let b = (p.char_end + window).min(n);
        let piece = |x: usize, y: usize| char_slice(&passage.text, x, y).unwrap_or("");
        let _ = writeln!(
            s,
            "context    {}{}[[{}]]{}{}",
            if a > 0 { "…" } else { "" },
            piece(a, p.char_start),
            piece(p.char_start, p.char_end),
            piece(p.char_end, b),
            if b < n { "…" } else { "" }
        );
    }
    s
}

/// Shortened single-line passage text.
pub fn snippet(text: &str, max_chars: usize) -> String {
    let flat: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= max_chars {
        flat
    } else {
        format!("{}…", flat.chars().take(max_chars).collect::<String>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use smart_core::grammarian::{Provenance, SpanRef};
    use smart_core::reasoner::Consulted;

    fn meta() -> MemoryMeta {
        let span = |t: &str, a, b| SpanRef {
            text: t.into(),
            char_start: a,
            char_end: b,
        };
        MemoryMeta {
            seq: 0,
            fact_id: "p0-s0-f0".into(),
            subject_text: "The relay R1".into(),
            relation_text: "trips at".into(),
            object_text: "37 A".into(),
            confidence: 0.9,
            numeric: None,
            provenance: Provenance {
                doc_id: "manual".into(),
                passage_id: 0,
                sent_id: 0,
                char_start: 6,
                char_end: 32,
                spans: [
                    span("The relay R1", 6, 18),
                    span("trips at", 19, 27),
                    span("37 A", 28, 32),
                ],
            },
        }
    }

    fn passage() -> Passage {
        Passage {
            doc_id: "manual".into(),
            passage_id: 0,
            text: "Note: The relay R1 trips at 37 A. Done.".into(),
            start_word: 0,
            end_word: 9,
            char_start: 100,
            char_end: 139,
            fact_ids: vec!["p0-s0-f0".into()],
            embedding: Vec::new(),
        }
    }

    fn record() -> AnswerRecord {
        AnswerRecord {
            query: "q".into(),
            text: "37 a".into(),
            tokens: vec![],
            consulted: vec![Consulted {
                row: 0,
                alpha: 0.75,
                score: 0.5,
                meta: meta(),
            }],
            memory_rows: vec![0],
            unsupported: false,
        }
    }

    #[test]
    fn provenance_lists_every_consulted_row() {
        let out = answer(&record(), &[passage()], false);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], "37 a");
        assert_eq!(lines[1], "provenance:");
        assert!(lines[2].contains("(The relay R1 | trips at | 37 A)") && lines[2].contains("alpha=0.750"));
        assert!(
            lines[3].contains("passage=0")
                && lines[3].contains("chars=6..32")
                && lines[3].contains("document 106..132")
        );
    }

    #[test]
    fn quiet_prints_only_the_answer() {
        assert_eq!(answer(&record(), &[], true), "37 a\n");
    }

    #[test]
    fn fact_context_brackets_the_span() {
        let out = fact(&meta(), Some(&passage()), 4);
        assert!(
            out.contains("context    …te: [[The relay R1 trips at 37 A]]. Do…"),
            "{out}"
        );
    }
}
