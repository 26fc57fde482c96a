//! Writes the synthetic manual and its companion files to a directory.
//! Usage: `cargo run -p smart-core --example write_sample [dir] [seed]`

use std::fs;
use std::path::PathBuf;

use smart_core::evalkit::TestCase;
use smart_core::grammarian::write_parse_jsonl;
use smart_core::pipeline::ChunkConfig;
use smart_core::synth::{SyntheticManual, DOC_ID};

fn jsonl<T: serde::Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("plain struct") + "\n")
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/manual".into()));
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let manual = SyntheticManual::generate(seed);
    let chunk = ChunkConfig::default();
    let parses = manual.gold_parses(&chunk)?;
    let tests: Vec<TestCase> = manual
        .heldout_queries()
        .into_iter()
        .map(|q| TestCase {
            query: q.query,
            reference: q.reference,
            doc_id: q.doc_id,
        })
        .collect();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(format!("{DOC_ID}.txt")), manual.corpus())?;
    fs::write(dir.join(format!("{DOC_ID}.parses.jsonl")), write_parse_jsonl(&parses))?;
    fs::write(
        dir.join("train_queries.jsonl"),
        jsonl(&manual.training_queries(&parses, &chunk)?),
    )?;
    fs::write(dir.join("testset.jsonl"), jsonl(&tests))?;
    let mut vocab_texts = manual.vocabulary_texts();
    vocab_texts.remove(0);
    fs::write(dir.join("queries.txt"), vocab_texts.join("\n") + "\n")?;
    println!(
        "wrote {} sentences, {} parses to {}",
        manual.sentences.len(),
        parses.len(),
        dir.display()
    );
    Ok(())
}
