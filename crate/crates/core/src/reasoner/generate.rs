use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ReasonerError};
use crate::librarian::{MemoryMatrix, MemoryMeta, MemoryStore};
use crate::numerics::{Graph, Scalar};
use crate::text::{BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Temperature {
        temperature: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    /// How many memory rows (by attention weight) to cite.
    pub top_provenance: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 24,
            mode: DecodeMode::Greedy,
            top_provenance: 5,
        }
    }
}

/// A memory row the answer drew on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consulted {
    pub row: usize,
    /// Final-block memory attention weight.
    pub alpha: f64,
    /// Retrieval score ⟨q, m⟩.
    pub score: f64,
    pub meta: MemoryMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query: String,
    pub text: String,
    pub tokens: Vec<usize>,
    /// Cited rows, highest attention first.
    pub consulted: Vec<Consulted>,
    /// Store rows of the memory matrix, in matrix order.
    pub memory_rows: Vec<usize>,
    /// Set when no memory was available to ground the answer.
    pub unsupported: bool,
}

impl AnswerRecord {
    pub fn top(&self) -> Option<&Consulted> {
        self.consulted.first()
    }
}

fn pick(logits: &[f64], mode: DecodeMode, rng: &mut Option<ChaCha8Rng>) -> usize {
    let allowed = |i: usize| i != PAD && i != BOS;
    match mode {
        DecodeMode::Greedy => argmax(logits, allowed),
        DecodeMode::Temperature { temperature, .. } => {
            let max = logits
                .iter()
                .enumerate()
                .filter(|(i, _)| allowed(*i))
                .map(|(_, &l)| l)
                .fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    if allowed(i) {
                        ((l - max) / temperature).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let total: f64 = w.iter().sum();
            let rng = rng.as_mut().expect("sampling has an rng");
            let mut u = rng.random::<f64>() * total;
            for (i, &wi) in w.iter().enumerate() {
                if wi > 0.0 && u < wi {
                    return i;
                }
                u -= wi;
            }
            argmax(logits, allowed)
        }
    }
}

fn argmax(logits: &[f64], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best = EOS;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        if allowed(i) && l > best_v {
            best = i;
            best_v = l;
        }
    }
    best
}

impl<S: Scalar> Model<S> {
    /// Encodes the query with memory fusion and decodes from `<bos>` until
    /// `<eos>` or `max_new_tokens`. PAD and BOS are never emitted.
    pub fn generate(
        &self,
        query: &str,
        memory: &MemoryMatrix,
        store: &MemoryStore,
        opts: &GenerateOptions,
    ) -> Result<AnswerRecord, ReasonerError> {
        let src = self.vocab.encode(query);
        if src.is_empty() {
            return Err(ReasonerError::Usage("empty query".into()));
        }
        let mut g = Graph::new();
        let m = match memory.tensor::<S>() {
            Some(t) => Some(g.constant(t)?),
            None => None,
        };
        let x = self.embed(&mut g, &src)?;
        let mem = match m {
            Some(m) => Some((m, self.query_vector(&mut g, &src)?)),
            None => None,
        };
        let enc = self.encode(&mut g, x, mem)?;
        let alpha: Vec<f64> = enc
            .alphas
            .last()
            .map(|&a| g.value(a).data().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect())
            .unwrap_or_default();

        let mut rng = match opts.mode {
            DecodeMode::Temperature { temperature, seed } => {
                if temperature.is_nan() || temperature <= 0.0 {
                    return Err(ReasonerError::Usage("temperature must be positive".into()));
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
            DecodeMode::Greedy => None,
        };
        let mut tgt = vec![BOS];
        let mut out = Vec::new();
        while out.len() < opts.max_new_tokens && tgt.len() < self.config.max_positions {
            let y = self.embed(&mut g, &tgt)?;
            let logits = self.decode(&mut g, y, enc.z)?;
            let t = g.value(logits);
            let last: Vec<f64> = t
                .row_slice(t.rows() - 1)
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NEG_INFINITY))
                .collect();
            let next = pick(&last, opts.mode, &mut rng);
            if next == EOS {
                break;
            }
            out.push(next);
            tgt.push(next);
        }

        let mut order: Vec<usize> = (0..memory.len()).collect();
        order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
        let consulted = order
            .into_iter()
            .take(opts.top_provenance)
            .map(|j| Consulted {
                row: memory.rows[j],
                alpha: alpha[j],
                score: memory.scores[j],
                meta: store.meta(memory.rows[j]).clone(),
            })
            .collect();
        Ok(AnswerRecord {
            query: query.to_string(),
            text: self.vocab.decode(&out),
            tokens: out,
            consulted,
            memory_rows: memory.rows.clone(),
            unsupported: memory.is_empty(),
        })
    }
}
