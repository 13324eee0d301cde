//! Streaming tiled kernels: window-aware tile pruning, online softmax,
//! recomputation-based backward, and instrumented access counters.
//!
//! Kernels accept a key/value history longer than the query block: with
//! `k.rows() == q.rows() + h`, queries stand at global positions `h..h+n`,
//! which benchmarks use to measure steady-state windows with no startup
//! clipping. The usual square case has `h = 0`.
//!
//! Counters model loads and stores per tile visit, standing in for memory
//! traffic: inputs are counted once per tile load, outputs once per tile
//! write-back. No cache model.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

use super::{AttnConfig, AttnOutput};

/// Element loads/stores attributed to each logical tensor slot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    pub q: u64,
    pub k: u64,
    pub v: u64,
    pub decay: u64,
    pub out: u64,
    pub d_out: u64,
    pub log_norm: u64,
    pub scratch: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.q + self.k + self.v + self.decay + self.out + self.d_out + self.log_norm + self.scratch
    }
}

/// Deterministic access counts for one kernel invocation.
#[derive(Debug, Clone, Default)]
pub struct TileCounters {
    /// Key tiles visited, one entry per query row block.
    pub key_tiles_visited: Vec<u64>,
    /// Scored (query, key) pairs; masked cells are never evaluated.
    pub logit_evals: u64,
    pub reads: Traffic,
    pub writes: Traffic,
    /// Largest tile-scoped scratch allocation, in elements. Excludes
    /// output-shaped streams such as the rowsum preprocessing vector.
    pub peak_aux_elements: u64,
}

impl TileCounters {
    pub fn total_key_tiles(&self) -> u64 {
        self.key_tiles_visited.iter().sum()
    }
}

/// Inclusive 0-based range of key tiles that intersect any query window in
/// the given query row block. Mirrors the forward kernel's pruning bounds.
pub fn tile_range(row_block: usize, cfg: &AttnConfig) -> (usize, usize) {
    tile_range_at(row_block, cfg, 0, cfg.seq_len, cfg.seq_len)
        .expect("row block out of range")
}

fn tile_range_at(
    row_block: usize,
    cfg: &AttnConfig,
    q_offset: usize,
    n_q: usize,
    n_k: usize,
) -> Option<(usize, usize)> {
    let r_start = row_block * cfg.block_rows;
    if r_start >= n_q {
        return None;
    }
    let r_end = ((row_block + 1) * cfg.block_rows).min(n_q) - 1;
    let g_start = q_offset + r_start;
    let g_end = q_offset + r_end;
    let k_lo = g_start.saturating_sub(cfg.window - 1);
    let k_hi = (g_end + 1).min(n_k); // exclusive
    Some((k_lo / cfg.block_cols, (k_hi - 1) / cfg.block_cols))
}

struct RowBlockOut {
    rows: Vec<Vec<f64>>,
    log_norm: Vec<f64>,
    tiles: u64,
    logit_evals: u64,
    reads: Traffic,
    peak_aux: u64,
}

/// Streaming forward pass with online softmax and decay bias injection.
///
/// Returns the attention output, the per-row log-normalizer, and access
/// counters. Equals the dense reference on the same inputs up to rounding.
pub fn forward_tiled(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    decay_prefix: &[f64],
    cfg: &AttnConfig,
) -> Result<(AttnOutput, TileCounters)> {
    let (n_q, q_offset) = check_streaming_inputs("forward_tiled", q, k, v, decay_prefix, cfg)?;
    let n_k = k.rows();
    let d = cfg.head_dim;
    let n_blocks = n_q.div_ceil(cfg.block_rows);

    let blocks: Vec<Result<RowBlockOut>> = (0..n_blocks)
        .into_par_iter()
        .map(|rb| forward_row_block(rb, q, k, v, decay_prefix, cfg, q_offset, n_q, n_k))
        .collect();

    let mut out = Matrix::zeros(n_q, d);
    let mut log_norm = vec![0.0f64; n_q];
    let mut counters = TileCounters::default();
    for (rb, block) in blocks.into_iter().enumerate() {
        let block = block?;
        let r_start = rb * cfg.block_rows;
        for (i, row) in block.rows.iter().enumerate() {
            out.row_mut(r_start + i).copy_from_slice(row);
            log_norm[r_start + i] = block.log_norm[i];
        }
        counters.key_tiles_visited.push(block.tiles);
        counters.logit_evals += block.logit_evals;
        add_traffic(&mut counters.reads, &block.reads);
        counters.peak_aux_elements = counters.peak_aux_elements.max(block.peak_aux);
    }
    counters.writes.out = (n_q * d) as u64;
    counters.writes.log_norm = n_q as u64;
    out.ensure_finite("forward_tiled")?;
    Ok((AttnOutput { out, log_norm }, counters))
}

#[allow(clippy::too_many_arguments)]
fn forward_row_block(
    rb: usize,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    decay: &[f64],
    cfg: &AttnConfig,
    q_offset: usize,
    n_q: usize,
    n_k: usize,
) -> Result<RowBlockOut> {
    let d = cfg.head_dim;
    let r_start = rb * cfg.block_rows;
    let r_end = ((rb + 1) * cfg.block_rows).min(n_q); // exclusive, local
    let rb_len = r_end - r_start;
    let (j_lo, j_hi) = tile_range_at(rb, cfg, q_offset, n_q, n_k).expect("validated");

    let mut m = vec![f64::NEG_INFINITY; rb_len];
    let mut ell = vec![0.0f64; rb_len];
    let mut acc = vec![vec![0.0f64; d]; rb_len];
    let mut logits = vec![0.0f64; cfg.block_cols];

    // Debug-only shadow of the streaming invariant: after every tile,
    // exp(m) * ell must equal the plain sum of exponentiated logits seen so
    // far. Disabled for rows whose logits leave the safe exp range.
    #[cfg(debug_assertions)]
    let mut shadow: Vec<Option<f64>> = vec![Some(0.0); rb_len];

    let mut reads = Traffic {
        q: (rb_len * d) as u64,
        decay: rb_len as u64,
        ..Traffic::default()
    };
    let mut logit_evals = 0u64;

    for j in j_lo..=j_hi {
        let g0 = j * cfg.block_cols;
        let g1 = ((j + 1) * cfg.block_cols).min(n_k);
        let tile_len = g1 - g0;
        reads.k += (tile_len * d) as u64;
        reads.v += (tile_len * d) as u64;
        reads.decay += tile_len as u64;

        for r in 0..rb_len {
            let gq = q_offset + r_start + r;
            let (w_lo, w_hi) = cfg.window_bounds(gq);
            let lo = w_lo.max(g0);
            let hi = w_hi.min(g1 - 1);
            if lo > hi {
                continue;
            }
            let q_row = q.row(r_start + r);
            let span = hi - lo + 1;
            let mut tile_max = f64::NEG_INFINITY;
            for (slot, g) in (lo..=hi).enumerate() {
                let s = cfg.scale * dot(q_row, k.row(g)) + decay[gq] - decay[g];
                if !s.is_finite() {
                    return Err(Error::NonFinite { op: "forward_tiled" });
                }
                logits[slot] = s;
                tile_max = tile_max.max(s);
            }
            logit_evals += span as u64;

            let m_new = m[r].max(tile_max);
            // Rescale factor is zero when no tile has touched this row yet.
            let rescale = if m[r] == f64::NEG_INFINITY {
                0.0
            } else {
                (m[r] - m_new).exp()
            };
            ell[r] *= rescale;
            for a in acc[r].iter_mut() {
                *a *= rescale;
            }
            for (slot, g) in (lo..=hi).enumerate() {
                let p = (logits[slot] - m_new).exp();
                ell[r] += p;
                for (a, &vv) in acc[r].iter_mut().zip(v.row(g)) {
                    *a += p * vv;
                }
            }
            m[r] = m_new;

            #[cfg(debug_assertions)]
            {
                if let Some(s) = shadow[r].as_mut() {
                    if logits[..span].iter().any(|l| l.abs() > 400.0) {
                        shadow[r] = None;
                    } else {
                        *s += logits[..span].iter().map(|l| l.exp()).sum::<f64>();
                        let streamed = m[r].exp() * ell[r];
                        debug_assert!(
                            (streamed - *s).abs() <= 1e-9 * s.abs() + 1e-300,
                            "streaming softmax invariant broke at row {gq}: {streamed} vs {s}"
                        );
                    }
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(rb_len);
    let mut log_norm = Vec::with_capacity(rb_len);
    for r in 0..rb_len {
        // The diagonal key is always in-window, so every row saw mass.
        debug_assert!(ell[r] > 0.0, "empty window for a query row");
        if ell[r] <= 0.0 {
            return Err(Error::NonFinite { op: "forward_tiled" });
        }
        rows.push(acc[r].iter().map(|a| a / ell[r]).collect());
        log_norm.push(m[r] + ell[r].ln());
    }

    let peak_aux = (rb_len * d + 3 * rb_len + cfg.block_cols) as u64;
    Ok(RowBlockOut {
        rows,
        log_norm,
        tiles: (j_hi - j_lo + 1) as u64,
        logit_evals,
        reads,
        peak_aux,
    })
}

/// Recomputation-based backward pass per the streaming tiling: outer loop
/// over key tiles, inner loop over the query blocks that can see them.
///
/// Requires the forward's output and log-normalizer; probability rows are
/// reconstructed from the log-normalizer and validated to sum to one.
/// Accumulation runs in a fixed tile order, so results are deterministic.
#[allow(clippy::too_many_arguments)]
pub fn backward_tiled(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    decay_prefix: &[f64],
    cfg: &AttnConfig,
    out: &Matrix,
    log_norm: &[f64],
    d_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix, Vec<f64>, TileCounters)> {
    let (n_q, q_offset) = check_streaming_inputs("backward_tiled", q, k, v, decay_prefix, cfg)?;
    let n_k = k.rows();
    let d = cfg.head_dim;
    if out.rows() != n_q || out.cols() != d || d_out.rows() != n_q || d_out.cols() != d {
        return Err(Error::shape("backward_tiled", "out/d_out shape"));
    }
    if log_norm.len() != n_q {
        return Err(Error::shape("backward_tiled", "log_norm length"));
    }

    // Preprocessing: per-row dot of output and upstream gradient.
    let mut d_stat = vec![0.0f64; n_q];
    for i in 0..n_q {
        d_stat[i] = dot(out.row(i), d_out.row(i));
    }

    let mut dq = Matrix::zeros(n_q, d);
    let mut dk = Matrix::zeros(n_k, d);
    let mut dv = Matrix::zeros(n_k, d);
    let mut du = vec![0.0f64; n_k];
    let mut row_p_sum = vec![0.0f64; n_q];

    let mut counters = TileCounters::default();
    counters.reads.out = (n_q * d) as u64;
    counters.reads.d_out = (n_q * d) as u64;
    counters.writes.scratch = n_q as u64;
    counters.key_tiles_visited = vec![0; n_q.div_ceil(cfg.block_rows)];

    let n_key_tiles = n_k.div_ceil(cfg.block_cols);
    for j in 0..n_key_tiles {
        let g0 = j * cfg.block_cols;
        let g1 = ((j + 1) * cfg.block_cols).min(n_k);
        let tile_len = g1 - g0;

        // Query rows that can see this key tile: g <= q <= g + window - 1.
        let q_lo_global = g0.max(q_offset);
        let q_hi_global = (g1 - 1 + cfg.window - 1).min(q_offset + n_q - 1);
        if q_lo_global > q_hi_global {
            continue;
        }
        counters.reads.k += (tile_len * d) as u64;
        counters.reads.v += (tile_len * d) as u64;
        counters.reads.decay += tile_len as u64;

        let mut dk_acc = vec![0.0f64; tile_len * d];
        let mut dv_acc = vec![0.0f64; tile_len * d];
        let mut du_k = vec![0.0f64; tile_len];

        let i_lo = (q_lo_global - q_offset) / cfg.block_rows;
        let i_hi = (q_hi_global - q_offset) / cfg.block_rows;
        for i in i_lo..=i_hi {
            counters.key_tiles_visited[i] += 1;
            let r_start = i * cfg.block_rows;
            let r_end = ((i + 1) * cfg.block_rows).min(n_q);
            counters.reads.q += ((r_end - r_start) * d) as u64;
            counters.reads.out += ((r_end - r_start) * d) as u64;
            counters.reads.d_out += ((r_end - r_start) * d) as u64;
            counters.reads.log_norm += (r_end - r_start) as u64;
            counters.reads.scratch += (r_end - r_start) as u64;
            counters.reads.decay += (r_end - r_start) as u64;

            for r in r_start..r_end {
                let gq = q_offset + r;
                let (w_lo, w_hi) = cfg.window_bounds(gq);
                let lo = w_lo.max(g0);
                let hi = w_hi.min(g1 - 1);
                if lo > hi {
                    continue;
                }
                let q_row = q.row(r);
                let do_row = d_out.row(r);
                for g in lo..=hi {
                    let s = cfg.scale * dot(q_row, k.row(g)) + decay_prefix[gq] - decay_prefix[g];
                    if !s.is_finite() {
                        return Err(Error::NonFinite { op: "backward_tiled" });
                    }
                    let p = (s - log_norm[r]).exp();
                    row_p_sum[r] += p;
                    counters.logit_evals += 1;
                    let dp = dot(do_row, v.row(g));
                    let ds = p * (dp - d_stat[r]);
                    let gl = g - g0;
                    for t in 0..d {
                        dv_acc[gl * d + t] += p * do_row[t];
                        dk_acc[gl * d + t] += cfg.scale * ds * q_row[t];
                    }
                    let dq_row = dq.row_mut(r);
                    for (t, x) in dq_row.iter_mut().enumerate() {
                        *x += cfg.scale * ds * k.get(g, t);
                    }
                    du[gq] += ds;
                    du_k[gl] -= ds;
                }
            }
            counters.writes.q += ((r_end - r_start) * d) as u64;
            counters.writes.decay += (r_end - r_start) as u64;
        }

        for gl in 0..tile_len {
            for t in 0..d {
                dk.set(g0 + gl, t, dk_acc[gl * d + t]);
                dv.set(g0 + gl, t, dv_acc[gl * d + t]);
            }
            du[g0 + gl] += du_k[gl];
        }
        counters.writes.k += (tile_len * d) as u64;
        counters.writes.v += (tile_len * d) as u64;
        counters.writes.decay += tile_len as u64;
        counters.peak_aux_elements = counters
            .peak_aux_elements
            .max((2 * tile_len * d + tile_len) as u64);
    }

    // A log-normalizer that does not reproduce unit probability mass means
    // it belongs to different inputs.
    for (r, &s) in row_p_sum.iter().enumerate() {
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::StaleLogNormalizer { row: r, sum: s });
        }
    }

    dq.ensure_finite("backward_tiled")?;
    Ok((dq, dk, dv, du, counters))
}

fn add_traffic(into: &mut Traffic, from: &Traffic) {
    into.q += from.q;
    into.k += from.k;
    into.v += from.v;
    into.decay += from.decay;
    into.out += from.out;
    into.d_out += from.d_out;
    into.log_norm += from.log_norm;
    into.scratch += from.scratch;
}

fn check_streaming_inputs(
    op: &'static str,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    decay: &[f64],
    cfg: &AttnConfig,
) -> Result<(usize, usize)> {
    cfg.validate()?;
    let n_q = q.rows();
    let n_k = k.rows();
    if n_k < n_q {
        return Err(Error::shape(op, "fewer keys than queries"));
    }
    if v.rows() != n_k {
        return Err(Error::shape(op, "k/v row counts differ"));
    }
    if q.cols() != cfg.head_dim || k.cols() != cfg.head_dim || v.cols() != cfg.head_dim {
        return Err(Error::shape(op, "head dim mismatch"));
    }
    if decay.len() != n_k {
        return Err(Error::shape(op, "decay prefix length"));
    }
    if n_q == 0 {
        return Err(Error::shape(op, "empty query block"));
    }
    Ok((n_q, n_k - n_q))
}
