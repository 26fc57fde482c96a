//! The committed sample corpus matches the generator and the parse schema.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use serde_json::Value;
use smart_core::evalkit::read_test_set;
use smart_core::grammarian::{read_parse_jsonl, write_parse_jsonl};
use smart_core::pipeline::ChunkConfig;
use smart_core::synth::SyntheticManual;
use smart_core::text::Vocab;
use smart_core::trainer::load_fact_examples;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn read(rel: &str) -> String {
    fs::read_to_string(root().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn strings(v: &Value) -> BTreeSet<String> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_str().unwrap().to_string())
        .collect()
}

#[test]
fn committed_parses_match_the_generator() {
    let manual = SyntheticManual::generate(7);
    let parses = manual.gold_parses(&ChunkConfig::default()).unwrap();
    assert_eq!(read("data/manual/manual.txt"), manual.corpus());
    assert_eq!(read("data/manual/manual.parses.jsonl"), write_parse_jsonl(&parses));
}

#[test]
fn committed_parses_validate() {
    let parses = read_parse_jsonl(&read("data/manual/manual.parses.jsonl")).unwrap();
    assert!(!parses.is_empty());
    for p in &parses {
        p.validate().unwrap();
    }
}

#[test]
fn schema_lists_exactly_the_serialized_fields() {
    let schema: Value = serde_json::from_str(&read("schemas/parsed_sentence.schema.json")).unwrap();
    let line = read("data/manual/manual.parses.jsonl");
    let first: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(keys(&schema["properties"]), keys(&first));
    assert_eq!(strings(&schema["required"]), keys(&first));
    let token = &schema["$defs"]["token"];
    assert_eq!(keys(&token["properties"]), keys(&first["tokens"][0]));
    assert_eq!(strings(&token["required"]), keys(&first["tokens"][0]));
}

#[test]
fn unknown_fields_are_rejected() {
    let line = read("data/manual/manual.parses.jsonl");
    let mut v: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    v["extra"] = Value::from(1);
    assert!(read_parse_jsonl(&v.to_string()).is_err());
}

#[test]
fn companion_files_resolve() {
    let parses = read_parse_jsonl(&read("data/manual/manual.parses.jsonl")).unwrap();
    let corpus = read("data/manual/manual.txt");
    let queries = read("data/manual/queries.txt");
    let vocab = Vocab::build([corpus.as_str(), queries.as_str()]);
    let examples = load_fact_examples(&read("data/manual/train_queries.jsonl"), &parses, &vocab).unwrap();
    assert_eq!(examples.len(), 200);
    assert_eq!(read_test_set(&read("data/manual/testset.jsonl")).unwrap().len(), 50);
}
