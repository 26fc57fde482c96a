use serde::{Deserialize, Serialize};

use super::ReasonerError;
use crate::grammarian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PositionKind {
    #[default]
    Sinusoidal,
    Learned,
}

/// Architecture dimensions. The memory row width equals `d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Key width of the memory attention.
    pub mem_d_k: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub positions: PositionKind,
    pub tie_embeddings: bool,
    /// One set of memory projections for all encoder blocks.
    pub share_memory_weights: bool,
    /// Map the projected query back to row space through the final block's
    /// memory keys (`W_Kᵀ`) instead of a dedicated head, so the retrieval
    /// losses train the attention logits directly.
    #[serde(default)]
    pub tie_warmup_head: bool,
    pub gate_init: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// Full-size dimensions: 384-wide, 6 encoder + 6 decoder blocks, 8 heads.
    pub fn full_size() -> Self {
        Self {
            d_model: 384,
            d_ff: 1536,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 8,
            d_head: 48,
            mem_d_k: 48,
            vocab_size: 50257,
            max_positions: 512,
            positions: PositionKind::Sinusoidal,
            tie_embeddings: true,
            share_memory_weights: false,
            tie_warmup_head: true,
            gate_init: 2.0,
            init_std: 0.02,
        }
    }

    /// The smallest configuration used by gradient checks.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 8,
            d_ff: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            d_head: 4,
            mem_d_k: 4,
            vocab_size,
            max_positions: 32,
            ..Self::full_size()
        }
    }

    /// Small model trained on the bundled synthetic manual.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 48,
            d_ff: 96,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            d_head: 12,
            mem_d_k: 12,
            vocab_size,
            max_positions: 64,
            ..Self::full_size()
        }
    }

    pub fn validate(&self) -> Result<(), ReasonerError> {
        let bad = |m: String| Err(ReasonerError::Config(m));
        if self.heads * self.d_head != self.d_model {
            return bad(format!(
                "heads × d_head = {} × {} must equal d_model = {}",
                self.heads, self.d_head, self.d_model
            ));
        }
        if self.d_model < 3 {
            return bad("d_model must be at least 3 (three fact projections)".into());
        }
        if self.vocab_size <= crate::text::SPECIALS.len() {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("at least one encoder and one decoder block are required".into());
        }
        if self.d_ff == 0 || self.mem_d_k == 0 || self.max_positions == 0 {
            return bad("d_ff, mem_d_k and max_positions must be positive".into());
        }
        if !(self.init_std > 0.0 && self.gate_init.is_finite()) {
            return bad("init_std must be positive and gate_init finite".into());
        }
        Ok(())
    }

    pub fn memory_prefix(&self, block: usize) -> String {
        if self.share_memory_weights {
            "memory.shared".into()
        } else {
            format!("encoder.{block}.mem")
        }
    }

    /// Every parameter as `(name, rows, cols)`, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out: Vec<(String, usize, usize)> = Vec::new();
        let mut push = |n: String, r: usize, c: usize| out.push((n, r, c));
        push(grammarian::TOKEN_EMBEDDING.into(), v, d);
        if self.positions == PositionKind::Learned {
            push("embed.positions".into(), self.max_positions, d);
        }
        let attn = |push: &mut dyn FnMut(String, usize, usize), p: &str| {
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                push(format!("{p}.{w}"), d, d);
            }
        };
        let ffn = |push: &mut dyn FnMut(String, usize, usize), p: &str| {
            push(format!("{p}.ffn.w_1"), d, f);
            push(format!("{p}.ffn.b_1"), 1, f);
            push(format!("{p}.ffn.w_2"), f, d);
            push(format!("{p}.ffn.b_2"), 1, d);
        };
        let ln = |push: &mut dyn FnMut(String, usize, usize), p: &str| {
            push(format!("{p}.gain"), 1, d);
            push(format!("{p}.bias"), 1, d);
        };
        let memory = |push: &mut dyn FnMut(String, usize, usize), p: &str| {
            push(format!("{p}.w_q"), d, self.mem_d_k);
            push(format!("{p}.w_k"), d, self.mem_d_k);
            push(format!("{p}.w_v"), d, d);
        };
        if self.share_memory_weights {
            memory(&mut push, "memory.shared");
        }
        for b in 0..self.encoder_layers {
            let p = format!("encoder.{b}");
            attn(&mut push, &format!("{p}.attn"));
            if !self.share_memory_weights {
                memory(&mut push, &format!("{p}.mem"));
            }
            push(format!("{p}.gate"), 1, 1);
            ffn(&mut push, &p);
            ln(&mut push, &format!("{p}.ln1"));
            ln(&mut push, &format!("{p}.ln2"));
        }
        for b in 0..self.decoder_layers {
            let p = format!("decoder.{b}");
            attn(&mut push, &format!("{p}.self"));
            attn(&mut push, &format!("{p}.cross"));
            ffn(&mut push, &p);
            for i in 1..=3 {
                ln(&mut push, &format!("{p}.ln{i}"));
            }
        }
        if !self.tie_embeddings {
            push("lm_head.w".into(), d, v);
        }
        if !self.tie_warmup_head {
            push("memory.warmup_head.w".into(), self.mem_d_k, d);
            push("memory.warmup_head.b".into(), 1, d);
        }
        for (n, r, c) in grammarian::param_shapes(d) {
            push(n, r, c);
        }
        out
    }
}

/// Closed-form parameter counts per component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub token_embedding: usize,
    pub positions: usize,
    pub output_head: usize,
    pub encoder_attention: usize,
    pub encoder_memory: usize,
    pub encoder_gates: usize,
    pub encoder_ffn: usize,
    pub encoder_norms: usize,
    pub decoder_self_attention: usize,
    pub decoder_cross_attention: usize,
    pub decoder_ffn: usize,
    pub decoder_norms: usize,
    pub warmup_head: usize,
    pub tree_lstm: usize,
    pub fact_projections: usize,
    pub total: usize,
}

/// Analytic parameter count, derived from the dimensions alone.
pub fn count_parameters(cfg: &ModelConfig) -> ParamBreakdown {
    let (d, f, v, k) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.mem_d_k);
    let (le, ld) = (cfg.encoder_layers, cfg.decoder_layers);
    let attn = 4 * d * d;
    let ffn = d * f + f + f * d + d;
    let norm = 2 * d;
    let memory_sets = if cfg.share_memory_weights { 1 } else { le };
    let mut b = ParamBreakdown {
        token_embedding: v * d,
        positions: if cfg.positions == PositionKind::Learned {
            cfg.max_positions * d
        } else {
            0
        },
        output_head: if cfg.tie_embeddings { 0 } else { d * v },
        encoder_attention: le * attn,
        encoder_memory: memory_sets * (2 * d * k + d * d),
        encoder_gates: le,
        encoder_ffn: le * ffn,
        encoder_norms: le * 2 * norm,
        decoder_self_attention: ld * attn,
        decoder_cross_attention: ld * attn,
        decoder_ffn: ld * ffn,
        decoder_norms: ld * 3 * norm,
        warmup_head: if cfg.tie_warmup_head { 0 } else { k * d + d },
        tree_lstm: 4 * (2 * d * d + d),
        fact_projections: d * d + d,
        total: 0,
    };
    b.total = b.token_embedding
        + b.positions
        + b.output_head
        + b.encoder_attention
        + b.encoder_memory
        + b.encoder_gates
        + b.encoder_ffn
        + b.encoder_norms
        + b.decoder_self_attention
        + b.decoder_cross_attention
        + b.decoder_ffn
        + b.decoder_norms
        + b.warmup_head
        + b.tree_lstm
        + b.fact_projections;
    b
}

/// Parameter count printed for the full-size model, in millions.
pub const REPORTED_PARAMS_M: f64 = 45.51;
