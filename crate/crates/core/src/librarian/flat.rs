use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::LibrarianError;

/// A scored row. Ordered best-first: higher score, then higher confidence,
/// then earlier insertion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub score: f64,
    pub confidence: f64,
    pub seq: u64,
}

impl Hit {
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| other.confidence.total_cmp(&self.confidence))
            .then_with(|| self.seq.cmp(&other.seq))
    }
}

// Heap entry whose maximum is the worst hit kept so far.
struct Worst(Hit);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank_cmp(&other.0)
    }
}

/// Keeps the `k` best hits of a stream, returned best-first.
pub fn select_top(hits: impl IntoIterator<Item = Hit>, k: usize) -> Vec<Hit> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for h in hits {
        if heap.len() < k {
            heap.push(Worst(h));
        } else if let Some(worst) = heap.peek() {
            if h.rank_cmp(&worst.0) == Ordering::Less {
                heap.pop();
                heap.push(Worst(h));
            }
        }
    }
    let mut out: Vec<Hit> = heap.into_iter().map(|w| w.0).collect();
    out.sort_by(Hit::rank_cmp);
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Unit-normalizes `v`; zero or non-finite vectors are rejected.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>, LibrarianError> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(LibrarianError::Degenerate);
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Unit rows with per-row confidence and insertion sequence, searched by
/// exact inner product.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatIndex {
    dim: usize,
    rows: Vec<f32>,
    confidence: Vec<f64>,
    seq: Vec<u64>,
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub(crate) fn from_parts(dim: usize, rows: Vec<f32>, confidence: Vec<f64>, seq: Vec<u64>) -> Self {
        Self {
            dim,
            rows,
            confidence,
            seq,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.confidence[i]
    }

    pub fn seq(&self, i: usize) -> u64 {
        self.seq[i]
    }

    pub fn check_dim(&self, got: usize) -> Result<(), LibrarianError> {
        if got == self.dim {
            Ok(())
        } else {
            Err(LibrarianError::Dimension {
                expected: self.dim,
                got,
            })
        }
    }

    /// Appends an already-normalized row.
    pub(crate) fn push(&mut self, row: &[f32], confidence: f64, seq: u64) {
        debug_assert_eq!(row.len(), self.dim);
        self.rows.extend_from_slice(row);
        self.confidence.push(confidence);
        self.seq.push(seq);
    }

    pub fn hit(&self, i: usize, q: &[f32]) -> Hit {
        Hit {
            index: i,
            score: dot(q, self.row(i)),
            confidence: self.confidence[i],
            seq: self.seq[i],
        }
    }

    /// Exact top-k by full scan.
    pub fn top_k(&self, q: &[f32], k: usize) -> Result<Vec<Hit>, LibrarianError> {
        self.check_dim(q.len())?;
        if self.is_empty() {
            return Err(LibrarianError::EmptyStore);
        }
        if k == 0 {
            return Err(LibrarianError::Usage("k must be at least 1".into()));
        }
        Ok(select_top((0..self.len()).map(|i| self.hit(i, q)), k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle(hits: &[Hit], k: usize) -> Vec<Hit> {
        let mut all = hits.to_vec();
        all.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(b.confidence.partial_cmp(&a.confidence).unwrap())
                .then(a.seq.cmp(&b.seq))
        });
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn heap_selection_matches_full_sort(
            scores in prop::collection::vec((0u8..6, 0u8..3), 1..80),
            k in 1usize..20,
        ) {
            let hits: Vec<Hit> = scores
                .iter()
                .enumerate()
                .map(|(i, &(s, c))| Hit { index: i, score: s as f64, confidence: c as f64, seq: i as u64 })
                .collect();
            prop_assert_eq!(select_top(hits.clone(), k), oracle(&hits, k));
        }
    }

    #[test]
    fn zero_vector_cannot_be_normalized() {
        assert!(matches!(normalize(&[0.0, 0.0]), Err(LibrarianError::Degenerate)));
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert_eq!(v, vec![0.6, 0.8]);
    }
}
