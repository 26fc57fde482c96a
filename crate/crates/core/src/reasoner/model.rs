use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, PositionKind, ReasonerError};
use crate::grammarian::TOKEN_EMBEDDING;
use crate::librarian::memory_read;
use crate::numerics::{lit, Graph, ParamStore, Scalar, Tensor, Var};
use crate::text::Vocab;

pub const LN_EPS: f64 = 1e-5;

/// Configuration, vocabulary and named weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore<S>,
}

/// Graph handles produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderOut {
    pub z: Var,
    /// Memory attention weights `1×N` of every block; empty without memory.
    pub alphas: Vec<Var>,
    /// Memory-projected query `1×d_k` of the final block.
    pub memory_query: Option<Var>,
}

/// `PE(i,2k) = sin(i/10000^(2k/d))`, `PE(i,2k+1) = cos(i/10000^(2k/d))`.
pub fn sinusoidal_positions<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for i in 0..len {
        for j in 0..d {
            let k2 = (j - j % 2) as f64;
            let angle = i as f64 / 10000f64.powf(k2 / d as f64);
            data.push(lit(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(len, d, data).expect("len × d")
}

fn initial_value(name: &str, cfg: &ModelConfig) -> Option<f64> {
    let last = name.rsplit('.').next().unwrap_or(name);
    match last {
        "gain" => Some(1.0),
        "gate" => Some(cfg.gate_init),
        "bias" => Some(0.0),
        _ if last.starts_with("b_") || last == "b" => Some(0.0),
        _ => None,
    }
}

impl<S: Scalar> Model<S> {
    /// Random initialization: weights `N(0, init_std)`, biases 0, norm gains
    /// 1, gates `gate_init`. Deterministic in `seed`.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, ReasonerError> {
        config.validate()?;
        if vocab.len() > config.vocab_size {
            return Err(ReasonerError::Config(format!(
                "vocabulary has {} tokens but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| ReasonerError::Config(e.to_string()))?;
        let mut params = ParamStore::new();
        for (name, r, c) in config.param_shapes() {
            let data = match initial_value(&name, &config) {
                Some(v) => vec![lit(v); r * c],
                None => (0..r * c).map(|_| lit(normal.sample(&mut rng))).collect(),
            };
            params.insert(name, Tensor::matrix(r, c, data)?)?;
        }
        Ok(Self { config, vocab, params })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<(), ReasonerError> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ReasonerError::OutOfVocab {
                id,
                vocab: self.config.vocab_size,
            });
        }
        if ids.len() > self.config.max_positions {
            return Err(ReasonerError::TooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    /// Token embeddings plus positions, `T×d`.
    pub fn embed(&self, g: &mut Graph<S>, ids: &[usize]) -> Result<Var, ReasonerError> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(ReasonerError::Usage("cannot embed an empty sequence".into()));
        }
        let table = g.param(&self.params, TOKEN_EMBEDDING)?;
        let x = g.gather(table, ids)?;
        let pos = match self.config.positions {
            PositionKind::Sinusoidal => g.constant(sinusoidal_positions(ids.len(), self.config.d_model))?,
            PositionKind::Learned => {
                let p = g.param(&self.params, "embed.positions")?;
                let idx: Vec<usize> = (0..ids.len()).collect();
                g.gather(p, &idx)?
            }
        };
        Ok(g.add(x, pos)?)
    }

    /// Query intent vector: mean token embedding (no positions), unit norm.
    pub fn query_vector(&self, g: &mut Graph<S>, ids: &[usize]) -> Result<Var, ReasonerError> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(ReasonerError::Usage("empty query".into()));
        }
        let table = g.param(&self.params, TOKEN_EMBEDDING)?;
        let x = g.gather(table, ids)?;
        let mean = g.mean_rows(x)?;
        Ok(g.l2_normalize_rows(mean)?)
    }

    /// Multi-head attention without biases; returns the output and the
    /// per-head weight matrices.
    pub fn attention(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        x: Var,
        kv: Var,
        causal: bool,
    ) -> Result<(Var, Vec<Var>), ReasonerError> {
        let p = &self.params;
        let w_q = g.param(p, &format!("{prefix}.w_q"))?;
        let w_k = g.param(p, &format!("{prefix}.w_k"))?;
        let w_v = g.param(p, &format!("{prefix}.w_v"))?;
        let w_o = g.param(p, &format!("{prefix}.w_o"))?;
        let q = g.matmul(x, w_q)?;
        let k = g.matmul(kv, w_k)?;
        let v = g.matmul(kv, w_v)?;
        let dk = self.config.d_head;
        let scale = S::one() / lit::<S>(dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (a, b) = (h * dk, (h + 1) * dk);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let w = if causal { g.causal_softmax(s)? } else { g.softmax(s)? };
            heads.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Ok((g.matmul(cat, w_o)?, weights))
    }

    fn layer_norm(&self, g: &mut Graph<S>, prefix: &str, x: Var) -> Result<Var, ReasonerError> {
        let gain = g.param(&self.params, &format!("{prefix}.gain"))?;
        let bias = g.param(&self.params, &format!("{prefix}.bias"))?;
        Ok(g.layer_norm(x, gain, bias, lit(LN_EPS))?)
    }

    fn ffn(&self, g: &mut Graph<S>, prefix: &str, x: Var) -> Result<Var, ReasonerError> {
        let p = &self.params;
        let w1 = g.param(p, &format!("{prefix}.ffn.w_1"))?;
        let b1 = g.param(p, &format!("{prefix}.ffn.b_1"))?;
        let w2 = g.param(p, &format!("{prefix}.ffn.w_2"))?;
        let b2 = g.param(p, &format!("{prefix}.ffn.b_2"))?;
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, w2)?;
        Ok(g.add_row(o, b2)?)
    }

    /// Memory gate `σ(γ)` of an encoder block, `1×1`.
    pub fn gate(&self, g: &mut Graph<S>, block: usize) -> Result<Var, ReasonerError> {
        let gamma = g.param(&self.params, &format!("encoder.{block}.gate"))?;
        Ok(g.sigmoid(gamma)?)
    }

    /// Encoder stack with per-block gated memory fusion. `memory` is `N×d`
    /// with `N ≥ 1`; without it the gate is bypassed and the block is a
    /// plain transformer encoder block.
    pub fn encode(&self, g: &mut Graph<S>, x: Var, memory: Option<(Var, Var)>) -> Result<EncoderOut, ReasonerError> {
        let mut h = x;
        let mut alphas = Vec::new();
        let mut memory_query = None;
        for b in 0..self.config.encoder_layers {
            let (x_self, _) = self.attention(g, &format!("encoder.{b}.attn"), h, h, false)?;
            let fused = match memory {
                Some((m, q)) => {
                    let mp = self.config.memory_prefix(b);
                    let w_q = g.param(&self.params, &format!("{mp}.w_q"))?;
                    let w_k = g.param(&self.params, &format!("{mp}.w_k"))?;
                    let w_v = g.param(&self.params, &format!("{mp}.w_v"))?;
                    let (c_mem, alpha) = memory_read(g, m, q, w_q, w_k, w_v)?;
                    alphas.push(alpha);
                    if b + 1 == self.config.encoder_layers {
                        memory_query = Some(g.matmul(q, w_q)?);
                    }
                    let gate = self.gate(g, b)?;
                    let neg = g.scale(gate, -S::one())?;
                    let one_minus = g.add_const(neg, S::one())?;
                    let a = g.scale_by(x_self, gate)?;
                    let c = g.scale_by(c_mem, one_minus)?;
                    g.add_row(a, c)?
                }
                None => x_self,
            };
            let r = g.add(h, fused)?;
            let x1 = self.layer_norm(g, &format!("encoder.{b}.ln1"), r)?;
            let f = self.ffn(g, &format!("encoder.{b}"), x1)?;
            let r2 = g.add(x1, f)?;
            h = self.layer_norm(g, &format!("encoder.{b}.ln2"), r2)?;
        }
        Ok(EncoderOut {
            z: h,
            alphas,
            memory_query,
        })
    }

    /// Decoder stack over shifted target embeddings; returns `U×vocab`
    /// logits.
    pub fn decode(&self, g: &mut Graph<S>, y: Var, z: Var) -> Result<Var, ReasonerError> {
        let mut h = y;
        for b in 0..self.config.decoder_layers {
            let p = format!("decoder.{b}");
            let (s, _) = self.attention(g, &format!("{p}.self"), h, h, true)?;
            let r = g.add(h, s)?;
            let h1 = self.layer_norm(g, &format!("{p}.ln1"), r)?;
            let (c, _) = self.attention(g, &format!("{p}.cross"), h1, z, false)?;
            let r = g.add(h1, c)?;
            let h2 = self.layer_norm(g, &format!("{p}.ln2"), r)?;
            let f = self.ffn(g, &p, h2)?;
            let r = g.add(h2, f)?;
            h = self.layer_norm(g, &format!("{p}.ln3"), r)?;
        }
        if self.config.tie_embeddings {
            let table = g.param(&self.params, TOKEN_EMBEDDING)?;
            Ok(g.matmul_nt(h, table)?)
        } else {
            let w = g.param(&self.params, "lm_head.w")?;
            Ok(g.matmul(h, w)?)
        }
    }

    /// Encoder input ids → decoder input ids → logits, with optional memory
    /// rows (`N×d`, unit norm) read through the query vector of `src`.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        src: &[usize],
        tgt_in: &[usize],
        memory: Option<Var>,
        query: Option<Var>,
    ) -> Result<(Var, EncoderOut), ReasonerError> {
        let x = self.embed(g, src)?;
        let mem = match memory {
            Some(m) => {
                let q = match query {
                    Some(q) => q,
                    None => self.query_vector(g, src)?,
                };
                Some((m, q))
            }
            None => None,
        };
        let enc = self.encode(g, x, mem)?;
        let y = self.embed(g, tgt_in)?;
        let logits = self.decode(g, y, enc.z)?;
        Ok((logits, enc))
    }

    /// Memory-projected query mapped back to row space, using the final
    /// encoder block's `W_Q`: `(q·W_Q)·W_Kᵀ` with a tied head, so that
    /// `⟨q_proj, m⟩` is the memory attention logit up to `√d_k`, otherwise
    /// `(q·W_Q)·H + b`.
    pub fn project_query(&self, g: &mut Graph<S>, q: Var) -> Result<Var, ReasonerError> {
        let prefix = self.config.memory_prefix(self.config.encoder_layers - 1);
        let w_q = g.param(&self.params, &format!("{prefix}.w_q"))?;
        let mq = g.matmul(q, w_q)?;
        if self.config.tie_warmup_head {
            let w_k = g.param(&self.params, &format!("{prefix}.w_k"))?;
            return Ok(g.matmul_nt(mq, w_k)?);
        }
        let h = g.param(&self.params, "memory.warmup_head.w")?;
        let b = g.param(&self.params, "memory.warmup_head.b")?;
        let p = g.matmul(mq, h)?;
        Ok(g.add_row(p, b)?)
    }

    /// Unit fact-retrieval vector of a query: the normalized
    /// [`project_query`](Self::project_query) of its pooled embedding.
    pub fn fact_query(&self, ids: &[usize]) -> Result<Vec<f32>, ReasonerError> {
        let mut g = Graph::new();
        let q = self.query_vector(&mut g, ids)?;
        let p = self.project_query(&mut g, q)?;
        let p = g.l2_normalize_rows(p)?;
        Ok(g.value(p)
            .data()
            .iter()
            .map(|x| x.to_f32().unwrap_or(f32::NAN))
            .collect())
    }

    /// Mean-pooled unit embedding of `ids`, outside any graph.
    pub fn pooled_embedding(&self, ids: &[usize]) -> Result<Vec<f32>, ReasonerError> {
        let mut g = Graph::new();
        let v = self.query_vector(&mut g, ids)?;
        Ok(g.value(v)
            .data()
            .iter()
            .map(|x| x.to_f32().unwrap_or(f32::NAN))
            .collect())
    }
}
