use serde::{Deserialize, Serialize};

use super::PipelineError;

/// Sliding word window: `window` words, advancing `stride` words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub window: usize,
    pub stride: usize,
    /// A final window shorter than this is merged into the previous chunk.
    pub min_tail: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            window: 150,
            stride: 105,
            min_tail: 30,
        }
    }
}

/// Whitespace-separated word with its character span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Word {
    pub char_start: usize,
    pub char_end: usize,
}

/// Words of `text` with character (not byte) offsets.
pub fn words(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push(Word {
                    char_start: s,
                    char_end: i,
                });
                start = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        out.push(Word {
            char_start: s,
            char_end: n,
        });
    }
    out
}

/// Word ranges `[start, end)` of each chunk.
pub fn chunk_ranges(n_words: usize, cfg: &ChunkConfig) -> Result<Vec<(usize, usize)>, PipelineError> {
    if cfg.window == 0 || cfg.stride == 0 || cfg.stride > cfg.window {
        return Err(PipelineError::Usage(format!(
            "chunk window {} and stride {} must satisfy 0 < stride ≤ window",
            cfg.window, cfg.stride
        )));
    }
    if n_words == 0 {
        return Err(PipelineError::EmptyDocument);
    }
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + cfg.window).min(n_words);
        let partial = end - start < cfg.window;
        match out.last_mut() {
            Some(prev) if partial && end - start < cfg.min_tail => prev.1 = end,
            _ => out.push((start, end)),
        }
        if end == n_words {
            break;
        }
        start += cfg.stride;
    }
    Ok(out)
}
