use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use smart_core::evalkit::{evaluate, read_test_set};
use smart_core::grammarian::{extract_facts, read_parse_jsonl, write_fact_table, ParsedSentence};
use smart_core::pipeline::{
    answer_path_a, answer_path_b, compile_document, compile_to_dir, embed_text, model_fingerprint, CompiledDocument,
};
use smart_core::reasoner::{Checkpoint, Model};
use smart_core::text::Vocab;
use smart_core::trainer::{load_fact_examples, stage1_sequences, train_stage, StageData};

use crate::error::{CliError, Context, Result, USAGE};
use crate::render;
use crate::settings::Settings;
use crate::{ChunkArgs, EvalArgs, ExtractArgs, IndexArgs, IngestArgs, InspectArgs, QueryArgs, TrainArgs};

type Out<'a> = &'a mut dyn Write;

fn emit(out: Out, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::data(format!("stdout: {e}")))
}

fn read(path: &Path, flag: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("{flag} {}: {e}", path.display())))
}

fn read_parses(path: &Path) -> Result<Vec<ParsedSentence>> {
    read_parse_jsonl(&read(path, "--parses")?).context(format!("--parses {}", path.display()))
}

fn load_model(s: &Settings) -> Result<Model<f64>> {
    let dir = s.ckpt_path();
    Ok(Checkpoint::<f64>::load(&dir).context("--ckpt")?.model)
}

/// A path, or a document id under the home directory's `docs/`.
fn resolve_doc(s: &Settings, doc: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(doc);
    if direct.is_dir() {
        return Ok(direct);
    }
    let named = s.docs_dir().join(doc);
    if named.is_dir() {
        return Ok(named);
    }
    Err(CliError::data(format!(
        "--doc {doc}: no compiled document there or at {}",
        named.display()
    )))
}

fn load_doc(s: &Settings, doc: &str) -> Result<CompiledDocument> {
    let dir = resolve_doc(s, doc)?;
    CompiledDocument::load(&dir).context(format!("--doc {doc}"))
}

/// Compiled embeddings and fact rows only make sense for the model that
/// produced them.
fn check_fingerprint(doc: &CompiledDocument, model: &Model<f64>, flag: &str) -> Result<()> {
    if doc.manifest.model_fingerprint != model_fingerprint(model) {
        return Err(CliError::data(format!(
            "{flag}: compiled with a different checkpoint; run `smart ingest` again with this --ckpt"
        )));
    }
    Ok(())
}

fn apply_chunk(s: &mut Settings, c: &ChunkArgs) {
    if let Some(w) = c.window {
        s.chunk.window = w;
    }
    if let Some(st) = c.stride {
        s.chunk.stride = st;
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "doc".into(), |s| s.to_string_lossy().into_owned())
}

pub fn ingest(s: &mut Settings, a: IngestArgs, out: Out, verbose: bool) -> Result<()> {
    apply_chunk(s, &a.chunk);
    let text = read(&a.doc, "document")?;
    let parses = read_parses(&a.parses)?;
    let doc_id = a.doc_id.clone().unwrap_or_else(|| file_stem(&a.doc));
    let dir = a.out.clone().unwrap_or_else(|| s.docs_dir().join(&doc_id));
    let model = load_model(s)?;
    if verbose {
        eprintln!("compiling {} into {}", a.doc.display(), dir.display());
    }
    let what = format!("{} with --parses {}", a.doc.display(), a.parses.display());
    let (doc, reused) = if a.force {
        let doc = compile_document(&doc_id, &text, &parses, &model, &s.chunk).context(&what)?;
        doc.save(&dir).context("--out")?;
        (doc, false)
    } else {
        compile_to_dir(&dir, &doc_id, &text, &parses, &model, &s.chunk).context(&what)?
    };
    let m = &doc.manifest;
    let mut t = format!(
        "{} `{}` -> {}\npassages {}  sentences {}  facts {}  rows {}  duplicates {}\n",
        if reused { "up to date" } else { "compiled" },
        m.doc_id,
        dir.display(),
        m.passages,
        m.sentences,
        m.facts_extracted,
        m.rows,
        m.duplicates
    );
    for w in &m.warnings {
        t.push_str(&format!("warning: {w}\n"));
    }
    emit(out, &t)
}

pub fn extract(s: &Settings, a: ExtractArgs, out: Out) -> Result<()> {
    let parses = read_parses(&a.parses)?;
    let model = load_model(s)?;
    let mut facts = Vec::new();
    for p in &parses {
        facts
            .extend(extract_facts(p, &model.params, &model.vocab).context(format!("--parses {}", a.parses.display()))?);
    }
    let table = write_fact_table(&facts);
    match &a.out {
        Some(path) => {
            fs::write(path, table).map_err(|e| CliError::io(path, e).context("--out"))?;
            emit(
                out,
                &format!(
                    "{} facts from {} sentences -> {}\n",
                    facts.len(),
                    parses.len(),
                    path.display()
                ),
            )
        }
        None => emit(out, &table),
    }
}

pub fn index(s: &Settings, a: IndexArgs, out: Out) -> Result<()> {
    let doc = load_doc(s, &a.doc)?;
    let mut t = String::new();
    match &a.query {
        None => {
            t.push_str(&format!(
                "{:>7} {:>11} {:>13} {:>5}  text\n",
                "passage", "words", "chars", "facts"
            ));
            for p in &doc.passages {
                t.push_str(&format!(
                    "{:>7} {:>11} {:>13} {:>5}  {}\n",
                    p.passage_id,
                    format!("{}..{}", p.start_word, p.end_word),
                    format!("{}..{}", p.char_start, p.char_end),
                    p.fact_ids.len(),
                    render::snippet(&p.text, 60)
                ));
            }
        }
        Some(q) => {
            if a.top == 0 {
                return Err(CliError::usage("--top must be positive"));
            }
            let model = load_model(s)?;
            check_fingerprint(&doc, &model, &format!("--doc {}", a.doc))?;
            let v = embed_text(&model, q)?;
            t.push_str(&format!("{:>4} {:>7} {:>8}  text\n", "rank", "passage", "score"));
            for (r, h) in doc.index().search(&v, a.top)?.iter().enumerate() {
                t.push_str(&format!(
                    "{:>4} {:>7} {:>8.4}  {}\n",
                    r + 1,
                    h.index,
                    h.score,
                    render::snippet(&doc.passages[h.index].text, 60)
                ));
            }
        }
    }
    emit(out, &t)
}

pub fn train(s: &mut Settings, a: TrainArgs, out: Out, verbose: bool) -> Result<()> {
    match (a.stage, &a.parses) {
        (1, Some(_)) => return Err(CliError::usage("--parses is only read by stages 2 and 3")),
        (2 | 3, None) => return Err(CliError::usage(format!("--parses is required for stage {}", a.stage))),
        _ => {}
    }
    if let Some(p) = a.preset {
        s.preset = p;
    }
    s.steps = a.steps.or(s.steps);
    s.lr = a.lr.or(s.lr);
    s.batch_size = a.batch_size.or(s.batch_size);
    let cfg = s.training(a.stage);
    cfg.validate()?;
    let text = read(&a.data, "--data")?;
    let parses = a.parses.as_deref().map(read_parses).transpose()?;
    let ckpt_dir = s.ckpt_path();
    let out_dir = a.out.clone().unwrap_or_else(|| ckpt_dir.clone());

    let ckpt = if ckpt_dir.join("model.json").exists() {
        if !a.vocab_from.is_empty() {
            eprintln!(
                "warning: --vocab-from ignored; {} already has a vocabulary",
                ckpt_dir.display()
            );
        }
        Checkpoint::<f64>::load(&ckpt_dir).context("--ckpt")?
    } else if a.stage == 1 {
        let mut texts = vec![text.clone()];
        for p in &a.vocab_from {
            texts.push(read(p, "--vocab-from")?);
        }
        let vocab = Vocab::build(texts.iter().map(String::as_str));
        let config = s.preset.model(vocab.len());
        if verbose {
            eprintln!("new {:?} checkpoint, vocabulary {}", s.preset, vocab.len());
        }
        Checkpoint::new(Model::init(config, vocab, s.seed)?)
    } else {
        return Err(CliError::data(format!(
            "--ckpt {}: no checkpoint; run stage 1 first",
            ckpt_dir.display()
        )));
    };

    let data = match &parses {
        None => StageData::Sequences(stage1_sequences(&text, &ckpt.model.vocab, cfg.context_sentences)),
        Some(p) => StageData::Facts(
            load_fact_examples(&text, p, &ckpt.model.vocab).context(format!("--data {}", a.data.display()))?,
        ),
    };
    if data.is_empty() {
        return Err(CliError::data(format!(
            "--data {}: no training examples",
            a.data.display()
        )));
    }
    fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e).context("--out"))?;
    let log_path = a
        .loss_log
        .clone()
        .unwrap_or_else(|| out_dir.join(format!("loss_stage{}.csv", a.stage)));
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e).context("--loss-log"))?;
    let mut log = BufWriter::new(file);
    let (ckpt, rows) =
        train_stage(ckpt, &data, &cfg, Some(&out_dir), &mut log).context(format!("stage {}", a.stage))?;
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    if verbose {
        for r in rows.iter().filter(|r| r.step % 50 == 0) {
            eprintln!("step {:>5}  loss {:.4}", r.step, r.loss);
        }
    }
    let first = rows.first().map_or(f64::NAN, |r| r.loss);
    let last = rows.last().map_or(f64::NAN, |r| r.loss);
    emit(
        out,
        &format!(
            "stage {} done: {} steps on {} examples, loss {:.4} -> {:.4}\ncheckpoint -> {} (stage {})\nlosses -> {}\n",
            a.stage,
            rows.len(),
            data.len(),
            first,
            last,
            out_dir.display(),
            ckpt.stage,
            log_path.display()
        ),
    )
}

enum Source {
    Compiled(Box<CompiledDocument>),
    New {
        doc_id: String,
        text: String,
        parses: Vec<ParsedSentence>,
        persist: Option<PathBuf>,
    },
}

pub fn query(s: &mut Settings, a: QueryArgs, out: Out) -> Result<()> {
    apply_chunk(s, &a.chunk);
    if let Some(k) = a.top_passages {
        s.top_passages = k;
    }
    if let Some(n) = a.max_new_tokens {
        s.max_new_tokens = n;
    }
    if let Some(t) = a.temperature {
        s.temperature = t;
    }
    let opts = s.query_options()?;
    let source = match (&a.doc, &a.new_doc, &a.parses) {
        (Some(d), _, _) => Source::Compiled(Box::new(load_doc(s, d)?)),
        (None, Some(path), Some(pp)) => {
            let parses = read_parses(pp)?;
            Source::New {
                doc_id: parses.first().map_or_else(|| file_stem(path), |p| p.doc_id.clone()),
                text: read(path, "--new-doc")?,
                parses,
                persist: a.persist.clone(),
            }
        }
        _ => return Err(CliError::usage("one of --doc or --new-doc (with --parses) is required")),
    };
    let model = load_model(s)?;
    if let (Source::Compiled(doc), Some(d)) = (&source, &a.doc) {
        check_fingerprint(doc, &model, &format!("--doc {d}"))?;
    }
    let answer = |q: &str| -> Result<String> {
        let (record, passages, warnings) = match &source {
            Source::Compiled(doc) => (answer_path_a(q, doc, &model, &opts)?, doc.passages.clone(), Vec::new()),
            Source::New {
                doc_id,
                text,
                parses,
                persist,
            } => {
                let b = answer_path_b(q, doc_id, text, parses, &model, &opts, &s.chunk, persist.as_deref())
                    .context(format!("--new-doc {doc_id}"))?;
                (b.answer, b.passages, b.warnings)
            }
        };
        for w in warnings {
            eprintln!("warning: {w}");
        }
        if a.json {
            Ok(serde_json::to_string_pretty(&record).expect("records serialize") + "\n")
        } else {
            Ok(render::answer(&record, &passages, a.quiet))
        }
    };
    if !a.repl {
        let q = a
            .question
            .as_deref()
            .ok_or_else(|| CliError::usage("a question is required without --repl"))?;
        return emit(out, &answer(q)?);
    }
    let stdin = io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        eprint!("> ");
        let Some(line) = lines.next() else { break };
        let line = line.map_err(|e| CliError::data(format!("stdin: {e}")))?;
        let q = line.trim();
        if q.is_empty() {
            continue;
        }
        if matches!(q, ":q" | "quit" | "exit") {
            break;
        }
        match answer(q) {
            Ok(t) => emit(out, &t)?,
            Err(e) if e.code == USAGE => eprintln!("error: {e}"),
            Err(e) => return Err(e),
        }
        out.flush().map_err(|e| CliError::data(format!("stdout: {e}")))?;
    }
    Ok(())
}

pub fn eval(s: &Settings, a: EvalArgs, out: Out) -> Result<()> {
    let cases = read_test_set(&read(&a.testset, "--testset")?).context(format!("--testset {}", a.testset.display()))?;
    let opts = s.query_options()?;
    let docs: Vec<(&String, CompiledDocument)> =
        a.doc.iter().map(|d| Ok((d, load_doc(s, d)?))).collect::<Result<_>>()?;
    let model = load_model(s)?;
    let mut by_id = BTreeMap::new();
    for (d, doc) in docs {
        check_fingerprint(&doc, &model, &format!("--doc {d}"))?;
        by_id.insert(doc.manifest.doc_id.clone(), doc);
    }
    let report = evaluate(&model, &cases, &by_id, &opts).context(format!("--testset {}", a.testset.display()))?;
    if let Some(path) = &a.json {
        let json = serde_json::to_string_pretty(&report).expect("reports serialize") + "\n";
        fs::write(path, json).map_err(|e| CliError::io(path, e).context("--json"))?;
    }
    emit(out, &format!("{} examples\n{}", report.examples.len(), report.table()))
}

pub fn inspect(s: &Settings, a: InspectArgs, out: Out) -> Result<()> {
    let doc = load_doc(s, &a.doc)?;
    let row = doc
        .store
        .find(&a.fact)
        .ok_or_else(|| CliError::data(format!("--fact {}: not in --doc {}", a.fact, a.doc)))?;
    let meta = doc.store.meta(row);
    let passage = doc.passages.get(meta.provenance.passage_id);
    emit(out, &render::fact(meta, passage, a.window))
}
