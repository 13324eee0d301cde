//! Causal attention variants: dense references and streaming tiled kernels.
//!
//! All operations here are single-head; multi-head assembly lives in the
//! model layer. The decay prefix enters the logits as the pairwise bias
//! `u_i - u_j`, applied after the scaled dot product.

pub mod reference;
pub mod tiled;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Shape and tiling parameters for one attention head.
#[derive(Debug, Clone, Copy)]
pub struct AttnConfig {
    /// Sequence length.
    pub seq_len: usize,
    /// Head dimension.
    pub head_dim: usize,
    /// Number of heads (used by multi-head callers; kernels are per-head).
    pub heads: usize,
    /// Window width, at least 1. A query at position `q` sees keys in
    /// `[q - window + 1, q]`, clipped at zero.
    pub window: usize,
    /// Logit scale applied to the dot product only, not to the decay bias.
    pub scale: f64,
    /// Query tile rows.
    pub block_rows: usize,
    /// Key tile columns.
    pub block_cols: usize,
}

impl AttnConfig {
    /// Config with the default `1/sqrt(head_dim)` scale and 32x32 tiles.
    pub fn new(seq_len: usize, head_dim: usize, window: usize) -> Self {
        AttnConfig {
            seq_len,
            head_dim,
            heads: 1,
            window,
            scale: 1.0 / (head_dim as f64).sqrt(),
            block_rows: 32,
            block_cols: 32,
        }
    }

    pub fn with_blocks(mut self, rows: usize, cols: usize) -> Self {
        self.block_rows = rows;
        self.block_cols = cols;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.block_rows == 0 || self.block_cols == 0 {
            return Err(Error::Config("tile sizes must be >= 1".into()));
        }
        if self.scale <= 0.0 {
            return Err(Error::Config("scale must be positive".into()));
        }
        Ok(())
    }

    /// First and last in-window key for query position `q` (global indices).
    #[inline]
    pub fn window_bounds(&self, q: usize) -> (usize, usize) {
        (q.saturating_sub(self.window - 1), q)
    }
}

/// Attention output plus the per-row log-normalizer of the masked, biased
/// logits. The log-normalizer is the only artifact the backward pass needs.
#[derive(Debug, Clone)]
pub struct AttnOutput {
    /// `N x head_dim`.
    pub out: Matrix,
    /// Per-row log-sum-exp `L`.
    pub log_norm: Vec<f64>,
}

pub(crate) fn check_inputs(
    op: &'static str,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    decay: Option<&[f64]>,
    cfg: &AttnConfig,
) -> Result<()> {
    cfg.validate()?;
    let n = q.rows();
    if k.rows() != n || v.rows() != n {
        return Err(Error::shape(op, "q/k/v row counts differ"));
    }
    if q.cols() != cfg.head_dim || k.cols() != cfg.head_dim || v.cols() != cfg.head_dim {
        return Err(Error::shape(op, "head dim mismatch"));
    }
    if let Some(u) = decay {
        if u.len() != n {
            return Err(Error::shape(op, "decay prefix length"));
        }
    }
    Ok(())
}
