//! Fact memory: unit-normalized rows with provenance, exact retrieval,
//! per-query memory assembly and the attention read over it.

mod flat;
mod store;

use std::cmp::Ordering;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::numerics::{lit, Graph, NumericsError, Scalar, Tensor, Var};

pub use flat::{dot, normalize, select_top, FlatIndex, Hit};
pub(crate) use store::{read_f32, read_json, write_f32, write_json};
pub use store::{MemoryMeta, MemoryStore, StoreManifest, DEDUP_COSINE, STORE_FORMAT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum LibrarianError {
    #[error("expected vectors of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("cannot normalize a zero or non-finite vector")]
    Degenerate,
    #[error("the store is empty")]
    EmptyStore,
    #[error("the memory matrix is empty")]
    EmptyMemory,
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl LibrarianError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A unit-norm query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector {
    pub q: Vec<f32>,
    pub source_text: String,
}

impl QueryVector {
    pub fn new(v: &[f32], source_text: impl Into<String>) -> Result<Self, LibrarianError> {
        Ok(Self {
            q: normalize(v)?,
            source_text: source_text.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrimBy {
    #[default]
    Score,
    Confidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    pub max_passages: usize,
    pub slots_per_passage: usize,
    pub max_rows: usize,
    pub trim_by: TrimBy,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            max_passages: 20,
            slots_per_passage: 4,
            max_rows: 64,
            trim_by: TrimBy::Score,
        }
    }
}

/// Per-query memory: selected store rows, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryMatrix {
    pub dim: usize,
    pub rows: Vec<usize>,
    pub scores: Vec<f64>,
    /// Candidates pooled before trimming.
    pub pooled: usize,
    pub data: Vec<f32>,
}

impl MemoryMatrix {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            scores: Vec::new(),
            pooled: 0,
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `N×d` tensor, or `None` for an empty memory.
    pub fn tensor<S: Scalar>(&self) -> Option<Tensor<S>> {
        if self.is_empty() {
            return None;
        }
        let data = self.data.iter().map(|&x| lit::<S>(x as f64)).collect();
        Some(Tensor::matrix(self.len(), self.dim, data).expect("rows × dim"))
    }
}

/// Gathers up to `slots_per_passage` facts from each of the first
/// `max_passages` passages (best ⟨q,m⟩ first), pools them, re-ranks the pool
/// and keeps the best `max_rows`. `passages[p]` lists store rows attached to
/// passage `p` in retrieval order.
pub fn assemble_memory(
    store: &MemoryStore,
    q: &QueryVector,
    passages: &[Vec<usize>],
    cfg: &AssemblyConfig,
) -> Result<MemoryMatrix, LibrarianError> {
    store.index().check_dim(q.q.len())?;
    let index = store.index();
    let mut pool: Vec<Hit> = Vec::new();
    for rows in passages.iter().take(cfg.max_passages) {
        let hits = rows.iter().map(|&i| index.hit(i, &q.q));
        for h in select_top(hits, cfg.slots_per_passage) {
            if !pool.iter().any(|p| p.index == h.index) {
                pool.push(h);
            }
        }
    }
    let pooled = pool.len();
    match cfg.trim_by {
        TrimBy::Score => pool.sort_by(Hit::rank_cmp),
        TrimBy::Confidence => pool.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then_with(|| b.score.total_cmp(&a.score))
                .then_with(|| a.seq.cmp(&b.seq))
        }),
    }
    pool.truncate(cfg.max_rows);
    let mut data = Vec::with_capacity(pool.len() * store.dim());
    for h in &pool {
        data.extend_from_slice(store.row(h.index));
    }
    Ok(MemoryMatrix {
        dim: store.dim(),
        rows: pool.iter().map(|h| h.index).collect(),
        scores: pool.iter().map(|h| h.score).collect(),
        pooled,
        data,
    })
}

/// Attention read over memory rows: `α = softmax(qW_Q·(MW_K)ᵀ/√d_k)`,
/// `c = α·MW_V`. Returns `(c (1×d_v), α (1×N))`.
pub fn memory_read<S: Scalar>(
    g: &mut Graph<S>,
    m: Var,
    q: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
) -> Result<(Var, Var), LibrarianError> {
    if g.shape(m).first().copied().unwrap_or(0) == 0 {
        return Err(LibrarianError::EmptyMemory);
    }
    let d_k = g.shape(w_k)[1];
    let qt = g.matmul(q, w_q)?;
    let kt = g.matmul(m, w_k)?;
    let vt = g.matmul(m, w_v)?;
    let s = g.matmul_nt(qt, kt)?;
    let s = g.scale(s, S::one() / lit::<S>(d_k as f64).sqrt())?;
    let alpha = g.softmax(s)?;
    let c = g.matmul(alpha, vt)?;
    Ok((c, alpha))
}

/// Orders two hits the way retrieval does; exposed for oracles.
pub fn rank_cmp(a: &Hit, b: &Hit) -> Ordering {
    a.rank_cmp(b)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammarian::FactTriple;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fact(id: usize, m: Vec<f32>, confidence: f64) -> FactTriple {
        let mut f = tests_support::fact(id, m);
        f.confidence = confidence;
        f
    }

    fn random_store(n: usize, d: usize, rng: &mut ChaCha8Rng) -> MemoryStore {
        let mut s = MemoryStore::new(d);
        let facts: Vec<_> = (0..n)
            .map(|i| fact(i, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.9))
            .collect();
        s.add_facts(&facts).unwrap();
        s
    }

    #[test]
    fn orthonormal_basis_lookup() {
        let mut s = MemoryStore::new(3);
        let basis: Vec<_> = (0..3)
            .map(|i| fact(i, (0..3).map(|j| if i == j { 2.0 } else { 0.0 }).collect(), 0.9))
            .collect();
        s.add_facts(&basis).unwrap();
        let q = QueryVector::new(&[0.0, 1.0, 0.0], "q").unwrap();
        let top = s.top_k(&q.q, 1).unwrap();
        assert_eq!((top[0].index, top[0].score), (1, 1.0));
        assert_eq!(s.top_k(&q.q, 10).unwrap().len(), 3);
        assert!(matches!(
            MemoryStore::new(3).top_k(&q.q, 1),
            Err(LibrarianError::EmptyStore)
        ));
    }

    #[test]
    fn duplicates_and_zero_rows() {
        let mut s = MemoryStore::new(2);
        let f = fact(0, vec![1.0, 2.0], 0.9);
        assert_eq!(s.add_facts(&[f.clone(), f.clone()]).unwrap(), vec![0, 0]);
        assert_eq!(s.len(), 1);
        assert!(matches!(
            s.add_facts(&[fact(1, vec![0.0, 0.0], 0.9)]),
            Err(LibrarianError::Degenerate)
        ));
        assert!(matches!(
            s.add_facts(&[fact(1, vec![1.0], 0.9)]),
            Err(LibrarianError::Dimension { .. })
        ));
        let mut other = f;
        other.object_text = "different".into();
        s.add_facts(&[other]).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn rows_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_store(50, 16, &mut rng);
        assert_eq!(s.len(), 50);
        for i in 0..s.len() {
            let n = dot(s.row(i), s.row(i)).sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn ties_prefer_confidence_then_age() {
        let mut s = MemoryStore::new(2);
        let mut facts = vec![
            fact(0, vec![1.0, 0.0], 0.5),
            fact(1, vec![1.0, 0.0], 0.9),
            fact(2, vec![1.0, 0.0], 0.9),
        ];
        facts[2].object_text = "x".into();
        s.add_facts(&facts).unwrap();
        let hits = s.top_k(&[1.0, 0.0], 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.index).collect::<Vec<_>>(), vec![1, 2, 0]);
    }

    #[test]
    fn assembly_caps_slots_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_store(100, 8, &mut rng);
        let q = QueryVector::new(&[1.0; 8], "q").unwrap();
        let passages: Vec<Vec<usize>> = (0..20).map(|p| (p * 5..p * 5 + 5).collect()).collect();
        let mm = assemble_memory(&s, &q, &passages, &AssemblyConfig::default()).unwrap();
        assert_eq!((mm.pooled, mm.len()), (80, 64));
        assert!(mm.scores.windows(2).all(|w| w[0] >= w[1]));
        let one = assemble_memory(&s, &q, &[vec![3, 7]], &AssemblyConfig::default()).unwrap();
        assert_eq!(one.len(), 2);
        let none = assemble_memory(&s, &q, &[], &AssemblyConfig::default()).unwrap();
        assert!(none.is_empty() && none.tensor::<f64>().is_none());
    }

    #[test]
    fn persistence_round_trips_byte_for_byte() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_store(30, 6, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        s.save(&a).unwrap();
        let loaded = MemoryStore::load(&a).unwrap();
        assert_eq!(loaded, s);
        loaded.save(&b).unwrap();
        for f in ["manifest.json", "rows.f32", "meta.jsonl"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        }
    }

    fn read(m: &Tensor<f64>, q: &Tensor<f64>, w: [&Tensor<f64>; 3]) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let mv = g.constant(m.clone()).unwrap();
        let qv = g.constant(q.clone()).unwrap();
        let ws: Vec<Var> = w.iter().map(|t| g.constant((*t).clone()).unwrap()).collect();
        let (c, a) = memory_read(&mut g, mv, qv, ws[0], ws[1], ws[2]).unwrap();
        (g.value(c).clone(), g.value(a).clone())
    }

    fn rand_t(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn singleton_and_duplicate_memories() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = [rand_t(4, 2, &mut rng), rand_t(4, 2, &mut rng), rand_t(4, 4, &mut rng)];
        let q = rand_t(1, 4, &mut rng);
        let m = rand_t(1, 4, &mut rng);
        let (c, a) = read(&m, &q, [&w[0], &w[1], &w[2]]);
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(c.data(), m.matmul(&w[2]).unwrap().data());
        let twice = Tensor::from_rows(&[m.data().to_vec(), m.data().to_vec()]).unwrap();
        let (_, a) = read(&twice, &q, [&w[0], &w[1], &w[2]]);
        assert_eq!(a.data(), &[0.5, 0.5]);
        let mut g = Graph::<f64>::new();
        let empty = g.constant(Tensor::new(vec![0, 4], vec![]).unwrap()).unwrap();
        let qv = g.constant(q).unwrap();
        assert!(matches!(
            memory_read(&mut g, empty, qv, qv, qv, qv),
            Err(LibrarianError::EmptyMemory)
        ));
    }

    proptest! {
        #[test]
        fn read_is_permutation_invariant(seed in 0u64..1000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = [rand_t(6, 3, &mut rng), rand_t(6, 3, &mut rng), rand_t(6, 6, &mut rng)];
            let q = rand_t(1, 6, &mut rng);
            let m = rand_t(n, 6, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % n);
            let pm = Tensor::from_rows(&perm.iter().map(|&i| m.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let (c1, a1) = read(&m, &q, [&w[0], &w[1], &w[2]]);
            let (c2, a2) = read(&pm, &q, [&w[0], &w[1], &w[2]]);
            prop_assert!((a1.sum() - 1.0).abs() <= 1e-9);
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((a2.data()[j] - a1.data()[i]).abs() <= 1e-12);
            }
            for (x, y) in c1.data().iter().zip(c2.data()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
