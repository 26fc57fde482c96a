//! Runs the `smart` binary against the committed sample manual.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use smart_core::grammarian::read_parse_jsonl;
use smart_core::pipeline::{answer_path_a, compile_document, ChunkConfig, QueryOptions};
use smart_core::reasoner::{AnswerRecord, Checkpoint};

const QUESTION: &str = "Which current value makes the relay R1 trip?";

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/manual")
        .join(name)
}

fn smart(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smart"))
        .args(args)
        .env("SMART_HOME", home)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A home with a briefly trained checkpoint and the manual compiled into it.
fn trained() -> &'static Path {
    static HOME: OnceLock<tempfile::TempDir> = OnceLock::new();
    HOME.get_or_init(|| {
        let home = tempfile::tempdir().unwrap();
        let h = home.path();
        let (text, parses, queries) = (
            data("manual.txt"),
            data("manual.parses.jsonl"),
            data("train_queries.jsonl"),
        );
        ok(smart(
            h,
            &[
                "train",
                "--stage",
                "1",
                "--data",
                s(&text),
                "--vocab-from",
                s(&data("queries.txt")),
                "--steps",
                "30",
            ],
        ));
        for stage in ["2", "3"] {
            ok(smart(
                h,
                &[
                    "train",
                    "--stage",
                    stage,
                    "--data",
                    s(&queries),
                    "--parses",
                    s(&parses),
                    "--steps",
                    "30",
                ],
            ));
        }
        ok(smart(h, &["ingest", s(&text), "--parses", s(&parses)]));
        home
    })
    .path()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let home = tempfile::tempdir().unwrap();
    let o = smart(home.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage:"));
}

#[test]
fn help_succeeds() {
    let home = tempfile::tempdir().unwrap();
    let out = ok(smart(home.path(), &["--help"]));
    for sub in ["ingest", "extract", "index", "train", "query", "eval", "inspect"] {
        assert!(out.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn mutually_required_flags_are_checked_first() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    let cases: [&[&str]; 5] = [
        &["query", QUESTION],
        &["query", "--doc", "x", "--new-doc", "y", "--parses", "z", QUESTION],
        &["query", "--new-doc", "y", QUESTION],
        &["query", "--doc", "x", "--repl", QUESTION],
        &["train", "--stage", "4", "--data", "x"],
    ];
    for args in cases {
        assert_eq!(smart(h, args).status.code(), Some(1), "{args:?}");
    }
    let o = smart(h, &["train", "--stage", "2", "--data", "missing.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--parses"));
    assert!(
        fs::read_dir(h).unwrap().next().is_none(),
        "nothing is written on usage errors"
    );
}

#[test]
fn data_errors_name_the_file() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    let bad = h.join("bad.jsonl");
    fs::write(&bad, "{\"doc_id\": 3}\n").unwrap();
    let o = smart(h, &["extract", "--parses", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("--parses") && stderr(&o).contains("bad.jsonl"),
        "{}",
        stderr(&o)
    );

    let o = smart(h, &["query", "--doc", "nowhere", QUESTION]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--doc nowhere"));

    let o = smart(
        h,
        &[
            "train",
            "--stage",
            "2",
            "--data",
            "q.jsonl",
            "--parses",
            s(&data("manual.parses.jsonl")),
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data"));
}

#[test]
fn config_file_is_validated_and_applied() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    fs::write(h.join("smart.conf"), "top_passages = 0\n").unwrap();
    let o = smart(
        h,
        &[
            "query",
            "--doc",
            s(&trained().join("docs/manual")),
            "--ckpt",
            s(&trained().join("checkpoint")),
            QUESTION,
        ],
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    fs::write(h.join("smart.conf"), "colour = blue\n").unwrap();
    let o = smart(h, &["inspect", "--doc", "x", "--fact", "y"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("smart.conf:1") && stderr(&o).contains("colour"));
    // Flags win over the file.
    fs::write(h.join("smart.conf"), "max_new_tokens = 1\n").unwrap();
    let doc = trained().join("docs/manual");
    let ck = trained().join("checkpoint");
    let one = ok(smart(
        h,
        &["query", "--doc", s(&doc), "--ckpt", s(&ck), "--json", QUESTION],
    ));
    let three = ok(smart(
        h,
        &[
            "query",
            "--doc",
            s(&doc),
            "--ckpt",
            s(&ck),
            "--json",
            "--max-new-tokens",
            "3",
            QUESTION,
        ],
    ));
    let len = |j: &str| serde_json::from_str::<AnswerRecord>(j).unwrap().tokens.len();
    assert!(len(&one) <= 1);
    assert!(len(&three) > 1);
}

#[test]
fn query_prints_provenance() {
    let out = ok(smart(trained(), &["query", "--doc", "manual", QUESTION]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[1], "provenance:");
    assert!(lines.iter().any(|l| l.contains("doc=manual passage=")), "{out}");
    let quiet = ok(smart(trained(), &["query", "--doc", "manual", "--quiet", QUESTION]));
    assert_eq!(quiet, format!("{}\n", lines[0]));
}

#[test]
fn ingest_then_query_matches_the_library_path() {
    let home = trained();
    let ckpt = Checkpoint::<f64>::load(&home.join("checkpoint")).unwrap();
    let text = fs::read_to_string(data("manual.txt")).unwrap();
    let parses = read_parse_jsonl(&fs::read_to_string(data("manual.parses.jsonl")).unwrap()).unwrap();
    let doc = compile_document("manual", &text, &parses, &ckpt.model, &ChunkConfig::default()).unwrap();
    let expected = answer_path_a(QUESTION, &doc, &ckpt.model, &QueryOptions::default()).unwrap();
    let json = ok(smart(home, &["query", "--doc", "manual", "--json", QUESTION]));
    let got: AnswerRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(
        (&got.text, &got.tokens, &got.memory_rows),
        (&expected.text, &expected.tokens, &expected.memory_rows)
    );
    assert_eq!(got.consulted.len(), expected.consulted.len());
    for (g, e) in got.consulted.iter().zip(&expected.consulted) {
        assert_eq!(
            (g.row, &g.meta.fact_id, &g.meta.provenance),
            (e.row, &e.meta.fact_id, &e.meta.provenance)
        );
        // JSON text keeps floats to within an ulp or so.
        assert!((g.alpha - e.alpha).abs() < 1e-12 && (g.score - e.score).abs() < 1e-12);
    }
}

#[test]
fn path_b_matches_path_a_when_everything_is_retrieved() {
    let home = trained();
    let a = ok(smart(home, &["query", "--doc", "manual", "--json", QUESTION]));
    let persist = tempfile::tempdir().unwrap();
    let store = persist.path().join("store");
    let b = ok(smart(
        home,
        &[
            "query",
            "--new-doc",
            s(&data("manual.txt")),
            "--parses",
            s(&data("manual.parses.jsonl")),
            "--persist",
            s(&store),
            "--json",
            QUESTION,
        ],
    ));
    let (a, b): (AnswerRecord, AnswerRecord) = (serde_json::from_str(&a).unwrap(), serde_json::from_str(&b).unwrap());
    assert_eq!(a.text, b.text);
    let ids = |r: &AnswerRecord| r.consulted.iter().map(|c| c.meta.fact_id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&a), ids(&b));
    assert!(store.join("manifest.json").exists() && store.join("rows.f32").exists());
}

#[test]
fn repl_answers_each_line() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_smart"))
        .args(["query", "--doc", "manual", "--repl", "--quiet"])
        .env("SMART_HOME", trained())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(format!("{QUESTION}\n\n?!?\nWhen does relay R1 trip?\n:q\nnot reached\n").as_bytes())
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3, "{}", stdout(&o));
}

#[test]
fn seeded_training_is_reproducible() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    let text = data("manual.txt");
    let run = |dir: &str, seed: &str| {
        let out = h.join(dir);
        ok(smart(
            h,
            &[
                "train",
                "--stage",
                "1",
                "--data",
                s(&text),
                "--ckpt",
                s(&out),
                "--steps",
                "5",
                "--seed",
                seed,
                "--preset",
                "toy",
            ],
        ));
        fs::read(out.join("weights.bin")).unwrap()
    };
    let a = run("a", "3");
    assert_eq!(a, run("b", "3"));
    assert_ne!(a, run("c", "4"));
    let mut names: Vec<String> = fs::read_dir(h)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["a", "b", "c"],
        "training writes only to its checkpoint directory"
    );
}

#[test]
fn sampling_is_seeded() {
    let q = |seed: &str| {
        ok(smart(
            trained(),
            &[
                "query",
                "--doc",
                "manual",
                "--quiet",
                "--temperature",
                "1.5",
                "--seed",
                seed,
                QUESTION,
            ],
        ))
    };
    assert_eq!(q("1"), q("1"));
}

#[test]
fn read_only_commands_write_nothing() {
    let home = trained();
    let before = listing(home);
    ok(smart(home, &["query", "--doc", "manual", QUESTION]));
    ok(smart(home, &["index", "--doc", "manual", "relay"]));
    ok(smart(home, &["inspect", "--doc", "manual", "--fact", "p0-s0-f0"]));
    ok(smart(home, &["extract", "--parses", s(&data("manual.parses.jsonl"))]));
    assert_eq!(before, listing(home));
}

fn listing(dir: &Path) -> Vec<(PathBuf, u64)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_dir() {
            out.extend(listing(&e.path()));
        } else {
            out.push((e.path(), e.metadata().unwrap().len()));
        }
    }
    out.sort();
    out
}

#[test]
fn inspect_shows_the_source_window() {
    let out = ok(smart(
        trained(),
        &["inspect", "--doc", "manual", "--fact", "p0-s0-f0", "--window", "10"],
    ));
    assert!(out.contains("fact       p0-s0-f0"));
    assert!(
        out.contains("context    [[The breaker B2 always opens at 17 A]]"),
        "{out}"
    );
    let o = smart(trained(), &["inspect", "--doc", "manual", "--fact", "p99-s0-f0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--fact p99-s0-f0"));
}

#[test]
fn index_ranks_passages() {
    let listing = ok(smart(trained(), &["index", "--doc", "manual"]));
    assert_eq!(listing.lines().count(), 16);
    let ranked = ok(smart(
        trained(),
        &["index", "--doc", "manual", "--top", "3", "relay R1"],
    ));
    assert_eq!(ranked.lines().count(), 4);
}

#[test]
fn extract_writes_a_fact_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("facts.jsonl");
    let home = trained();
    ok(smart(
        home,
        &["extract", "--parses", s(&data("manual.parses.jsonl")), "--out", s(&out)],
    ));
    let facts = smart_core::grammarian::read_fact_table(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(facts.len(), 268);
}

#[test]
fn eval_reports_metrics_and_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let out = ok(smart(
        trained(),
        &[
            "eval",
            "--testset",
            s(&data("testset.jsonl")),
            "--doc",
            "manual",
            "--json",
            s(&json),
        ],
    ));
    assert!(out.starts_with("50 examples"));
    for k in ["BLEU-1", "ROUGE-L", "efficiency", "full-size model", "reported 45.51M"] {
        assert!(out.contains(k), "{k} missing:\n{out}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["examples"].as_array().unwrap().len(), 50);
}

#[test]
fn stale_compilations_are_refused() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    ok(smart(
        h,
        &[
            "train",
            "--stage",
            "1",
            "--data",
            s(&data("manual.txt")),
            "--steps",
            "1",
            "--preset",
            "toy",
            "--seed",
            "9",
        ],
    ));
    let o = smart(h, &["query", "--doc", s(&trained().join("docs/manual")), QUESTION]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("different checkpoint"));
}
