//! Uniform binning of action chunks into discrete tokens.
//!
//! Each delta component is divided by the dataset normalization factor,
//! clamped to `[-1, 1]` and mapped to one of `bins` equal-width bins. Bin
//! edges belong to the upper bin, except `+1` which falls in the last bin.
//! Decoding returns bin midpoints.

use log::trace;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Action;
use crate::policy::{ActionChunk, CHUNK_HORIZON};

pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub bins: u32,
    pub normalization_factor: f64,
}

impl CodecConfig {
    pub fn new(normalization_factor: f64) -> Self {
        Self {
            bins: 128,
            normalization_factor,
        }
    }

    pub fn tokens_per_chunk(&self) -> usize {
        CHUNK_HORIZON * ACTION_DIM
    }

    pub fn bin_width(&self) -> f64 {
        2.0 / self.bins as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config("codec needs at least 2 bins".into()));
        }
        if !(self.normalization_factor > 0.0 && self.normalization_factor.is_finite()) {
            return Err(Error::Config("normalization factor must be > 0".into()));
        }
        Ok(())
    }

    fn bin(&self, value: f64) -> (u32, bool) {
        let v = value / self.normalization_factor;
        let clamped = v.clamp(-1.0, 1.0);
        let idx = ((clamped + 1.0) * self.bins as f64 / 2.0).floor() as u32;
        (idx.min(self.bins - 1), clamped != v)
    }

    fn midpoint(&self, index: u32) -> f64 {
        (-1.0 + (index as f64 + 0.5) * self.bin_width()) * self.normalization_factor
    }
}

/// Encodes a chunk as `[dx0, dy0, dx1, dy1, ...]` token indices.
pub fn tokenize(chunk: &ActionChunk, cfg: &CodecConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    let mut tokens = Vec::with_capacity(cfg.tokens_per_chunk());
    let mut clamped = 0;
    for a in chunk.iter() {
        if !a.is_finite() {
            return Err(Error::NonFinite("action chunk"));
        }
        for component in [a.dx, a.dy] {
            let (idx, c) = cfg.bin(component);
            clamped += c as usize;
            tokens.push(idx);
        }
    }
    if clamped > 0 {
        trace!("clamped {clamped} out-of-range action components");
    }
    Ok(tokens)
}

pub fn detokenize(tokens: &[u32], cfg: &CodecConfig) -> Result<ActionChunk> {
    cfg.validate()?;
    if tokens.len() != cfg.tokens_per_chunk() {
        return Err(Error::TokenCount {
            expected: cfg.tokens_per_chunk(),
            got: tokens.len(),
        });
    }
    if let Some(&index) = tokens.iter().find(|&&t| t >= cfg.bins) {
        return Err(Error::TokenOutOfRange {
            index,
            bins: cfg.bins,
        });
    }
    let deltas: Vec<Action> = tokens
        .chunks(ACTION_DIM)
        .map(|p| Action::new(cfg.midpoint(p[0]), cfg.midpoint(p[1])))
        .collect();
    ActionChunk::from_slice(&deltas)
}

/// Maps action tokens into a vocabulary where they follow `base_vocab_size` text tokens.
pub fn to_vocab_ids(tokens: &[u32], base_vocab_size: u32) -> Vec<u32> {
    tokens.iter().map(|t| base_vocab_size + t).collect()
}
