use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::flat::{dot, normalize, FlatIndex, Hit};
use super::LibrarianError;
use crate::grammarian::{FactTriple, NumericValue, Provenance};

pub const STORE_FORMAT_VERSION: u32 = 1;
/// Rows at least this similar with identical texts are the same fact.
pub const DEDUP_COSINE: f64 = 0.9999;

/// Metadata kept alongside each stored row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryMeta {
    pub seq: u64,
    pub fact_id: String,
    pub subject_text: String,
    pub relation_text: String,
    pub object_text: String,
    pub confidence: f64,
    pub numeric: Option<NumericValue>,
    pub provenance: Provenance,
}

impl MemoryMeta {
    fn texts(&self) -> (String, String, String) {
        (
            self.subject_text.clone(),
            self.relation_text.clone(),
            self.object_text.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub dimension: usize,
    pub count: usize,
    pub normalized: bool,
    pub next_seq: u64,
}

/// Fact rows (unit norm, 32-bit) with metadata aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    index: FlatIndex,
    meta: Vec<MemoryMeta>,
    next_seq: u64,
    by_text: HashMap<(String, String, String), Vec<usize>>,
}

impl MemoryStore {
    pub fn new(dim: usize) -> Self {
        Self {
            index: FlatIndex::new(dim),
            meta: Vec::new(),
            next_seq: 0,
            by_text: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.index.dim()
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn index(&self) -> &FlatIndex {
        &self.index
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.index.row(i)
    }

    pub fn meta(&self, i: usize) -> &MemoryMeta {
        &self.meta[i]
    }

    pub fn metas(&self) -> &[MemoryMeta] {
        &self.meta
    }

    pub fn find(&self, fact_id: &str) -> Option<usize> {
        self.meta.iter().position(|m| m.fact_id == fact_id)
    }

    /// Normalizes and appends facts, skipping exact duplicates. Returns the
    /// row each fact landed in (the existing row for a duplicate).
    ///
    /// Validates every fact before inserting any of them.
    pub fn add_facts(&mut self, facts: &[FactTriple]) -> Result<Vec<usize>, LibrarianError> {
        let mut rows = Vec::with_capacity(facts.len());
        for f in facts {
            self.index.check_dim(f.m.len())?;
            rows.push(normalize(&f.m)?);
        }
        let mut out = Vec::with_capacity(facts.len());
        for (f, row) in facts.iter().zip(rows) {
            let key = (f.subject_text.clone(), f.relation_text.clone(), f.object_text.clone());
            let dup = self.by_text.get(&key).and_then(|cands| {
                cands
                    .iter()
                    .copied()
                    .find(|&i| dot(&row, self.index.row(i)) >= DEDUP_COSINE)
            });
            if let Some(i) = dup {
                out.push(i);
                continue;
            }
            let i = self.len();
            let seq = self.next_seq;
            self.next_seq += 1;
            self.index.push(&row, f.confidence, seq);
            self.meta.push(MemoryMeta {
                seq,
                fact_id: f.fact_id.clone(),
                subject_text: f.subject_text.clone(),
                relation_text: f.relation_text.clone(),
                object_text: f.object_text.clone(),
                confidence: f.confidence,
                numeric: f.numeric.clone(),
                provenance: f.provenance.clone(),
            });
            self.by_text.entry(key).or_default().push(i);
            out.push(i);
        }
        Ok(out)
    }

    pub fn top_k(&self, q: &[f32], k: usize) -> Result<Vec<Hit>, LibrarianError> {
        self.index.top_k(q, k)
    }

    pub fn manifest(&self) -> StoreManifest {
        StoreManifest {
            format_version: STORE_FORMAT_VERSION,
            dimension: self.dim(),
            count: self.len(),
            normalized: true,
            next_seq: self.next_seq,
        }
    }

    /// Writes `manifest.json`, `rows.f32` and `meta.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), LibrarianError> {
        fs::create_dir_all(dir).map_err(|e| LibrarianError::io(dir, e))?;
        write_json(&dir.join("manifest.json"), &self.manifest())?;
        write_f32(&dir.join("rows.f32"), self.index.rows())?;
        let mut meta = String::new();
        for m in &self.meta {
            meta.push_str(&serde_json::to_string(m).expect("metadata serializes"));
            meta.push('\n');
        }
        let path = dir.join("meta.jsonl");
        fs::write(&path, meta).map_err(|e| LibrarianError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, LibrarianError> {
        let manifest: StoreManifest = read_json(&dir.join("manifest.json"))?;
        let fmt = |path: &Path, reason: String| LibrarianError::Format {
            path: path.to_path_buf(),
            reason,
        };
        if manifest.format_version != STORE_FORMAT_VERSION {
            return Err(fmt(
                &dir.join("manifest.json"),
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let rows_path = dir.join("rows.f32");
        let rows = read_f32(&rows_path)?;
        if rows.len() != manifest.count * manifest.dimension {
            return Err(fmt(
                &rows_path,
                format!(
                    "expected {}×{} floats, found {}",
                    manifest.count,
                    manifest.dimension,
                    rows.len()
                ),
            ));
        }
        let meta_path = dir.join("meta.jsonl");
        let text = fs::read_to_string(&meta_path).map_err(|e| LibrarianError::io(&meta_path, e))?;
        let meta: Vec<MemoryMeta> = text
            .lines()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| fmt(&meta_path, format!("line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?;
        if meta.len() != manifest.count {
            return Err(fmt(
                &meta_path,
                format!("{} metadata lines for {} rows", meta.len(), manifest.count),
            ));
        }
        let mut by_text: HashMap<_, Vec<usize>> = HashMap::new();
        for (i, m) in meta.iter().enumerate() {
            by_text.entry(m.texts()).or_default().push(i);
        }
        let index = FlatIndex::from_parts(
            manifest.dimension,
            rows,
            meta.iter().map(|m| m.confidence).collect(),
            meta.iter().map(|m| m.seq).collect(),
        );
        Ok(Self {
            index,
            meta,
            next_seq: manifest.next_seq,
            by_text,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), LibrarianError> {
    let mut s = serde_json::to_string_pretty(value).expect("manifest serializes");
    s.push('\n');
    fs::write(path, s).map_err(|e| LibrarianError::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, LibrarianError> {
    let text = fs::read_to_string(path).map_err(|e| LibrarianError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LibrarianError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Row-major little-endian 32-bit floats.
pub(crate) fn write_f32(path: &Path, data: &[f32]) -> Result<(), LibrarianError> {
    let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| LibrarianError::io(path, e))
}

pub(crate) fn read_f32(path: &Path) -> Result<Vec<f32>, LibrarianError> {
    let bytes = fs::read(path).map_err(|e| LibrarianError::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(LibrarianError::Format {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a whole number of floats", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
