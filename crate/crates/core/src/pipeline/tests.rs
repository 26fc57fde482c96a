use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::desk::DeskData;
use crate::grammarian::testutil::sentence;
use crate::librarian::dot;
use crate::reasoner::ModelConfig;
use crate::synth::DOC_ID;
use crate::text::Vocab;

fn setup() -> (DeskData, Model<f64>) {
    let d = DeskData::new(7).unwrap();
    let m = Model::init(ModelConfig::desk(d.vocab.len()), d.vocab.clone(), 3).unwrap();
    (d, m)
}

fn opts() -> QueryOptions {
    QueryOptions::default()
}

#[test]
fn three_hundred_words_make_three_passages() {
    let text: String = (0..300).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
    let p = chunk("d", &text, &ChunkConfig::default()).unwrap();
    let starts: Vec<usize> = p.iter().map(|p| p.start_word).collect();
    assert_eq!(starts, vec![0, 105, 210]);
    assert_eq!(p[2].end_word - p[2].start_word, 90);
    for x in &p {
        assert_eq!(char_slice(&text, x.char_start, x.char_end), Some(x.text.as_str()));
        assert_eq!(
            x.text.split_whitespace().next(),
            Some(format!("w{}", x.start_word).as_str())
        );
    }
    let one: String = vec!["x"; 150].join(" ");
    assert_eq!(chunk("d", &one, &ChunkConfig::default()).unwrap().len(), 1);
    assert!(matches!(
        chunk("d", " \n\t", &ChunkConfig::default()),
        Err(PipelineError::EmptyDocument)
    ));
}

fn document() -> impl Strategy<Value = String> {
    let word = prop::string::string_regex("[a-zé0-9°]{1,6}").unwrap();
    let gap = prop::sample::select(vec![" ", "  ", "\n", "\t ", " \n\n"]);
    prop::collection::vec((word, gap), 1..700).prop_map(|v| v.into_iter().map(|(w, g)| format!("{w}{g}")).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]
    #[test]
    fn passages_reassemble_the_word_sequence(text in document()) {
        let cfg = ChunkConfig::default();
        let passages = chunk("d", &text, &cfg).unwrap();
        prop_assert_eq!(&passages, &chunk("d", &text, &cfg).unwrap());
        let mut rebuilt: Vec<&str> = Vec::new();
        for p in &passages {
            prop_assert_eq!(char_slice(&text, p.char_start, p.char_end), Some(p.text.as_str()));
            let w: Vec<&str> = p.text.split_whitespace().collect();
            prop_assert_eq!(w.len(), p.end_word - p.start_word);
            // Drop the words already covered by the previous passage.
            let skip = rebuilt.len() - p.start_word;
            rebuilt.extend(&w[skip..]);
        }
        let all: Vec<&str> = text.split_whitespace().collect();
        prop_assert_eq!(rebuilt, all);
        for pair in passages.windows(2) {
            prop_assert_eq!(pair[1].start_word - pair[0].start_word, cfg.stride);
        }
    }
}

#[test]
fn embeddings_are_unit_mean_pools() {
    let (_, model) = setup();
    let a = embed_text(&model, "relay trips at").unwrap();
    let b = embed_text(&model, "at relay trips").unwrap();
    let norm: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-7);
    }
    let one = embed_text(&model, "relay").unwrap();
    let row = model
        .params
        .tensor(crate::grammarian::TOKEN_EMBEDDING)
        .unwrap()
        .row_slice(model.vocab.id("relay"));
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (x, r) in one.iter().zip(row) {
        assert!((*x as f64 - r / n).abs() < 1e-7);
    }
    assert!(matches!(embed_text(&model, "  "), Err(PipelineError::Usage(_))));
}

#[test]
fn index_scores_are_cosines() {
    let (d, model) = setup();
    let doc = compile_document(DOC_ID, &d.manual.text, &d.parses, &model, &d.chunk).unwrap();
    let q = embed_text(&model, "when does the pump start").unwrap();
    let hits = doc.index().search(&q, 20).unwrap();
    assert_eq!(hits.len(), doc.passages.len());
    for h in hits {
        assert_eq!(h.score, dot(&q, &doc.passages[h.index].embedding));
    }
}

#[test]
fn compiled_manual_accounts_for_every_fact() {
    let (d, model) = setup();
    let doc = compile_document(DOC_ID, &d.manual.text, &d.parses, &model, &d.chunk).unwrap();
    let m = &doc.manifest;
    assert_eq!(m.passages, 15);
    assert_eq!(m.sentences, d.parses.len());
    let per_sentence: usize = d
        .parses
        .iter()
        .map(|s| extract_facts(s, &model.params, &model.vocab).unwrap().len())
        .sum();
    assert_eq!(m.facts_extracted, per_sentence);
    // Independent dedup count: distinct (texts, row) pairs.
    let mut distinct = BTreeSet::new();
    for s in &d.parses {
        for f in extract_facts(s, &model.params, &model.vocab).unwrap() {
            let bits: Vec<u32> = crate::librarian::normalize(&f.m)
                .unwrap()
                .iter()
                .map(|x| x.to_bits())
                .collect();
            distinct.insert((f.subject_text, f.relation_text, f.object_text, bits));
        }
    }
    assert_eq!(m.rows, distinct.len());
    assert_eq!(m.rows + m.duplicates, per_sentence);
    assert!(m.warnings.is_empty());
    // Every stored fact resolves to its passage, spans verbatim.
    for meta in doc.store.metas() {
        let p = &doc.passages[meta.provenance.passage_id];
        assert!(p.fact_ids.contains(&meta.fact_id));
        for span in &meta.provenance.spans {
            assert_eq!(
                char_slice(&p.text, span.char_start, span.char_end),
                Some(span.text.as_str())
            );
        }
    }
}

#[test]
fn unparsed_documents_compile_to_an_empty_store() {
    let (d, model) = setup();
    let doc = compile_document(DOC_ID, &d.manual.text, &[], &model, &d.chunk).unwrap();
    assert!(doc.store.is_empty());
    assert_eq!(doc.passages.len(), 15);
    assert_eq!(doc.manifest.warnings.len(), 1);
    let a = answer_path_a("when does the pump start", &doc, &model, &opts()).unwrap();
    assert!(a.unsupported && a.consulted.is_empty());
}

#[test]
fn bad_parses_are_rejected_or_skipped() {
    let (d, model) = setup();
    let mut far = d.parses.clone();
    far[0].passage_id = 99;
    assert!(matches!(
        compile_document(DOC_ID, &d.manual.text, &far, &model, &d.chunk),
        Err(PipelineError::MissingParses(_))
    ));
    let mut shifted = d.parses.clone();
    for t in &mut shifted[0].tokens {
        t.char_start += 1;
        t.char_end += 1;
    }
    assert!(matches!(
        compile_document(DOC_ID, &d.manual.text, &shifted, &model, &d.chunk),
        Err(PipelineError::Grammarian(GrammarianError::ParseInput { .. }))
    ));
    let b = answer_path_b(
        "when does the pump start",
        DOC_ID,
        &d.manual.text,
        &shifted,
        &model,
        &opts(),
        &d.chunk,
        None,
    )
    .unwrap();
    assert_eq!(b.warnings.len(), 1);
    assert!(b.warnings[0].contains("skipped"));
}

#[test]
fn queries_are_validated_and_deterministic() {
    let (d, model) = setup();
    let doc = compile_document(DOC_ID, &d.manual.text, &d.parses, &model, &d.chunk).unwrap();
    assert!(matches!(
        answer_path_a("", &doc, &model, &opts()),
        Err(PipelineError::Usage(_))
    ));
    let q = "At what pressure does the valve V2 close?";
    let a = answer_path_a(q, &doc, &model, &opts()).unwrap();
    assert_eq!(a, answer_path_a(q, &doc, &model, &opts()).unwrap());
    assert!(!a.unsupported && !a.consulted.is_empty());
    assert!(a.memory_rows.len() <= 64);
    for c in &a.consulted {
        let p = &doc.passages[c.meta.provenance.passage_id];
        for t in c.meta.provenance.span_texts() {
            assert!(p.text.contains(t));
        }
    }
}

#[test]
fn path_b_on_a_short_document_matches_path_a() {
    let (d, model) = setup();
    let doc = compile_document(DOC_ID, &d.manual.text, &d.parses, &model, &d.chunk).unwrap();
    for q in d.heldout.iter().take(10) {
        let (ma, ra) = memory_path_a(&q.query, &doc, &model, &opts()).unwrap();
        let b = answer_path_b(
            &q.query,
            DOC_ID,
            &d.manual.text,
            &d.parses,
            &model,
            &opts(),
            &d.chunk,
            None,
        )
        .unwrap();
        assert_eq!(b.retrieved, ra);
        assert_eq!(b.retrieved.iter().collect::<BTreeSet<_>>().len(), doc.passages.len());
        assert_eq!(b.facts_extracted, doc.manifest.facts_extracted);
        assert_eq!(b.memory.data, ma.data);
        assert_eq!(b.memory.scores, ma.scores);
        assert!(b.memory.len() <= 64 && b.memory.pooled <= 80);
        let a = answer_path_a(&q.query, &doc, &model, &opts()).unwrap();
        assert_eq!(a.text, b.answer.text);
    }
}

/// 22 one-sentence passages, each stating one fact about unit `U{i}`.
fn unit_document() -> (String, Vec<ParsedSentence>, Vocab, ChunkConfig) {
    let mut text = String::new();
    let mut parses = Vec::new();
    for i in 0..22 {
        let id = format!("U{i}");
        let value = (10 + i).to_string();
        let rows = [
            ("The", "DET", 2, "det"),
            ("unit", "NOUN", 2, "compound"),
            (id.as_str(), "PROPN", 3, "nsubj"),
            ("trips", "VERB", -1, "ROOT"),
            ("at", "ADP", 3, "prep"),
            (value.as_str(), "NUM", 6, "nummod"),
            ("A", "NOUN", 4, "pobj"),
            (".", "PUNCT", 3, "punct"),
        ];
        let mut s = sentence(i, 0, 0, &rows);
        s.doc_id = "units".into();
        if i > 0 {
            text.push(' ');
        }
        text.push_str(&s.raw_text);
        parses.push(s);
    }
    let vocab = Vocab::build([text.as_str(), "when does it trip"]);
    let cfg = ChunkConfig {
        window: 7,
        stride: 7,
        min_tail: 1,
    };
    (text, parses, vocab, cfg)
}

#[test]
fn facts_beyond_the_top_twenty_passages_are_not_consulted() {
    let (text, parses, vocab, cfg) = unit_document();
    let model = Model::<f64>::init(ModelConfig::desk(vocab.len()), vocab, 5).unwrap();
    let q = "when does unit U3 trip";
    let b = answer_path_b(q, "units", &text, &parses, &model, &opts(), &cfg, None).unwrap();
    assert_eq!(b.passages.len(), 22);
    assert_eq!(b.retrieved.len(), 20);
    let pq = embed_text(&model, q).unwrap();
    let ranking = PassageIndex::build(&b.passages).unwrap().search(&pq, 22).unwrap();
    let missed: Vec<usize> = ranking[20..].iter().map(|h| h.index).collect();
    assert!(missed.iter().all(|p| !b.retrieved.contains(p)));
    let cited: BTreeSet<usize> = b
        .memory
        .rows
        .iter()
        .map(|&r| b.store.meta(r).provenance.passage_id)
        .collect();
    for p in &missed {
        assert!(!cited.contains(p));
        assert!(b.store.metas().iter().all(|m| m.provenance.passage_id != *p));
    }
    // With the whole document retrieved, the 21st passage's fact is back.
    let all = QueryOptions {
        top_passages: 22,
        assembly: AssemblyConfig {
            max_passages: 22,
            ..AssemblyConfig::default()
        },
        ..opts()
    };
    let full = answer_path_b(q, "units", &text, &parses, &model, &all, &cfg, None).unwrap();
    let cited: BTreeSet<usize> = full
        .memory
        .rows
        .iter()
        .map(|&r| full.store.meta(r).provenance.passage_id)
        .collect();
    assert!(cited.contains(&missed[0]));
}

#[test]
fn path_b_persists_only_on_request() {
    let (text, parses, vocab, cfg) = unit_document();
    let model = Model::<f64>::init(ModelConfig::toy(vocab.len()), vocab, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let b = answer_path_b(
        "when does it trip",
        "units",
        &text,
        &parses,
        &model,
        &opts(),
        &cfg,
        Some(dir.path()),
    )
    .unwrap();
    let stored = MemoryStore::load(dir.path()).unwrap();
    assert_eq!(stored, b.store);
}

#[test]
fn compiling_twice_is_a_no_op() {
    let (d, model) = setup();
    let dir = tempfile::tempdir().unwrap();
    let (first, reused) = compile_to_dir(dir.path(), DOC_ID, &d.manual.text, &d.parses, &model, &d.chunk).unwrap();
    assert!(!reused);
    let stamp = fs::read(dir.path().join("doc_manifest.json")).unwrap();
    let (second, reused) = compile_to_dir(dir.path(), DOC_ID, &d.manual.text, &d.parses, &model, &d.chunk).unwrap();
    assert!(reused);
    assert_eq!(first, second);
    assert_eq!(stamp, fs::read(dir.path().join("doc_manifest.json")).unwrap());
    let edited = d.manual.text.replacen("The", "A", 1);
    let (_, reused) = compile_to_dir(dir.path(), DOC_ID, &edited, &[], &model, &d.chunk).unwrap();
    assert!(!reused);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn compiled_documents_round_trip_byte_identically() {
    let (d, model) = setup();
    let doc = compile_document(DOC_ID, &d.manual.text, &d.parses, &model, &d.chunk).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    doc.save(a.path()).unwrap();
    let loaded = CompiledDocument::load(a.path()).unwrap();
    assert_eq!(loaded, doc);
    loaded.save(b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    assert!(loaded.is_current(&d.manual.text, &d.parses, &model));
    fs::write(a.path().join("doc_manifest.json"), "{").unwrap();
    assert!(CompiledDocument::load(a.path()).is_err());
}
