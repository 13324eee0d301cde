//! Dense O(N^2) oracles that materialize the masked score matrix.
//!
//! Ground truth for every tiled-kernel test. Masked entries are excluded
//! from reductions rather than held as floating-point infinities.

use crate::error::Result;
use crate::numerics::{dot, Matrix};

use super::{check_inputs, AttnConfig, AttnOutput};

/// Full causal softmax attention: query `i` sees keys `0..=i`.
pub fn softmax_full(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttnConfig) -> Result<AttnOutput> {
    let full = AttnConfig {
        window: q.rows().max(1),
        ..*cfg
    };
    windowed_biased(q, k, v, None, &full, "ref_softmax_full")
}

/// Sliding-window attention: query `i` sees keys in the clipped window.
pub fn swa(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttnConfig) -> Result<AttnOutput> {
    windowed_biased(q, k, v, None, cfg, "ref_swa")
}

/// Gated windowed attention: window mask plus the decay bias `u_i - u_j`.
pub fn gated(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    decay_prefix: &[f64],
    cfg: &AttnConfig,
) -> Result<AttnOutput> {
    windowed_biased(q, k, v, Some(decay_prefix), cfg, "ref_gatedfwa")
}

fn windowed_biased(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    decay: Option<&[f64]>,
    cfg: &AttnConfig,
    op: &'static str,
) -> Result<AttnOutput> {
    check_inputs(op, q, k, v, decay, cfg)?;
    let n = q.rows();
    let d = cfg.head_dim;
    let mut out = Matrix::zeros(n, d);
    let mut log_norm = vec![0.0f64; n];

    for i in 0..n {
        let (lo, hi) = cfg.window_bounds(i);
        let mut logits = Vec::with_capacity(hi - lo + 1);
        for j in lo..=hi {
            let mut s = cfg.scale * dot(q.row(i), k.row(j));
            if let Some(u) = decay {
                s += u[i] - u[j];
            }
            logits.push(s);
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0f64;
        for &s in &logits {
            denom += (s - m).exp();
        }
        log_norm[i] = m + denom.ln();
        let row = out.row_mut(i);
        for (j, &s) in (lo..=hi).zip(logits.iter()) {
            let p = (s - m).exp() / denom;
            for (dst, &vv) in row.iter_mut().zip(v.row(j)) {
                *dst += p * vv;
            }
        }
    }
    out.ensure_finite(op)?;
    Ok(AttnOutput { out, log_norm })
}

/// Dense masked probability matrix reconstructed from an output's
/// log-normalizer; rows sum to one when the log-normalizer is consistent.
pub fn probability_matrix(
    q: &Matrix,
    k: &Matrix,
    decay: Option<&[f64]>,
    cfg: &AttnConfig,
    log_norm: &[f64],
) -> Matrix {
    let n = q.rows();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        let (lo, hi) = cfg.window_bounds(i);
        for j in lo..=hi.min(n - 1) {
            let mut s = cfg.scale * dot(q.row(i), k.row(j));
            if let Some(u) = decay {
                s += u[i] - u[j];
            }
            p.set(i, j, (s - log_norm[i]).exp());
        }
    }
    p
}

/// Gradients of the dense windowed softmax with decay bias.
///
/// Returns `(dq, dk, dv, d_decay)`. The decay gradient collects the query
/// role (`+row sums of ds`) and the key role (`-column sums of ds`).
pub fn backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    decay_prefix: &[f64],
    cfg: &AttnConfig,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix, Vec<f64>)> {
    check_inputs("ref_backward", q, k, v, Some(decay_prefix), cfg)?;
    let n = q.rows();
    let d = cfg.head_dim;
    if d_out.rows() != n || d_out.cols() != d {
        return Err(crate::error::Error::shape("ref_backward", "d_out shape"));
    }

    let fwd = gated(q, k, v, decay_prefix, cfg)?;
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut du = vec![0.0f64; n];

    for i in 0..n {
        let (lo, hi) = cfg.window_bounds(i);
        // D_i = rowsum(O . dO)_i
        let d_i = dot(fwd.out.row(i), d_out.row(i));
        for j in lo..=hi {
            let s = cfg.scale * dot(q.row(i), k.row(j)) + decay_prefix[i] - decay_prefix[j];
            let p = (s - fwd.log_norm[i]).exp();
            let dp = dot(d_out.row(i), v.row(j));
            let ds = p * (dp - d_i);

            for t in 0..d {
                dv.set(j, t, dv.get(j, t) + p * d_out.get(i, t));
                dq.set(i, t, dq.get(i, t) + cfg.scale * ds * k.get(j, t));
                dk.set(j, t, dk.get(j, t) + cfg.scale * ds * q.get(i, t));
            }
            du[i] += ds;
            du[j] -= ds;
        }
    }
    Ok((dq, dk, dv, du))
}
