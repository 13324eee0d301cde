//! Three-branch global-context extension: token compression, top-k block
//! selection, and the gated local window, combined per token by sigmoid
//! gates. The local branch is the gated windowed kernel; compression and
//! selection keep plain softmax attention.

use crate::attn::{tiled, AttnConfig};
use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, Matrix};

/// Block geometry for compression and selection.
#[derive(Debug, Clone, Copy)]
pub struct NsaConfig {
    /// Compression block length.
    pub cmp_block: usize,
    /// Compression stride.
    pub cmp_stride: usize,
    /// Selection block size.
    pub slc_block: usize,
    /// Blocks retained by selection.
    pub top_blocks: usize,
    /// Local window width.
    pub window: usize,
}

impl NsaConfig {
    /// Aligned grids: compression block, stride, and selection block all
    /// equal, which is what the one-to-one block mapping requires.
    pub fn aligned(block: usize, top_blocks: usize, window: usize) -> Self {
        NsaConfig {
            cmp_block: block,
            cmp_stride: block,
            slc_block: block,
            top_blocks,
            window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cmp_block == 0 || self.cmp_stride == 0 || self.slc_block == 0 {
            return Err(Error::Config("block sizes must be >= 1".into()));
        }
        if self.top_blocks == 0 {
            return Err(Error::Config("top_blocks must be >= 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        Ok(())
    }

    fn require_aligned(&self) -> Result<()> {
        if self.cmp_block != self.slc_block || self.cmp_stride != self.cmp_block {
            return Err(Error::MisalignedGrids(format!(
                "one-to-one block mapping needs cmp_block == slc_block == cmp_stride, \
                 got {}/{}/{}",
                self.cmp_block, self.slc_block, self.cmp_stride
            )));
        }
        Ok(())
    }

    /// Number of compressed blocks visible at time `t` (1-based):
    /// `floor((t - cmp_block) / cmp_stride)` when positive.
    pub fn compressed_blocks(&self, t: usize) -> usize {
        if t < self.cmp_block {
            0
        } else {
            (t - self.cmp_block) / self.cmp_stride
        }
    }
}

/// Per-token branch gates, each in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct BranchGates {
    pub cmp: f64,
    pub slc: f64,
    pub loc: f64,
}

/// Per-token branch outputs; an absent branch contributes nothing and its
/// gate is forced to zero.
#[derive(Debug, Clone, Default)]
pub struct BranchOutputs {
    pub cmp: Option<Vec<f64>>,
    pub slc: Option<Vec<f64>>,
    pub loc: Option<Vec<f64>>,
}

/// Gate projection plus the optional learnable pooling map. Zero-initialized
/// weights put every gate at exactly one half.
#[derive(Debug, Clone)]
pub struct NsaParams {
    /// `d x 3` gate projection on the query.
    pub w_gate: Matrix,
    /// `1 x 3` gate bias.
    pub b_gate: Matrix,
    /// Optional `d x d` map applied to compressed keys and values after
    /// mean pooling; off by default.
    pub pool_map: Option<Matrix>,
}

impl NsaParams {
    pub fn zeros(dim: usize) -> Self {
        NsaParams {
            w_gate: Matrix::zeros(dim, 3),
            b_gate: Matrix::zeros(1, 3),
            pool_map: None,
        }
    }

    pub fn gates_for(&self, q_row: &[f64]) -> BranchGates {
        let mut z = [0.0f64; 3];
        for (c, zc) in z.iter_mut().enumerate() {
            let mut acc = self.b_gate.get(0, c);
            for (d, &x) in q_row.iter().enumerate() {
                acc += x * self.w_gate.get(d, c);
            }
            *zc = acc;
        }
        BranchGates {
            cmp: sigmoid(z[0]),
            slc: sigmoid(z[1]),
            loc: sigmoid(z[2]),
        }
    }
}

/// Mean-pools keys and values into one compressed row per covered block.
/// Block `i` covers rows `i * stride .. i * stride + block` (0-based), and
/// only blocks that end strictly before `t` exist, so the result is empty
/// for short prefixes.
pub fn compress_kv(
    k: &Matrix,
    v: &Matrix,
    t: usize,
    cfg: &NsaConfig,
) -> Result<(Matrix, Matrix)> {
    cfg.validate()?;
    if t > k.rows() || k.rows() != v.rows() {
        return Err(Error::shape("compress_kv", "time/row counts"));
    }
    let blocks = cfg.compressed_blocks(t);
    let d = k.cols();
    let mut kc = Matrix::zeros(blocks, d);
    let mut vc = Matrix::zeros(blocks, v.cols());
    for b in 0..blocks {
        let start = b * cfg.cmp_stride;
        let len = cfg.cmp_block as f64;
        for r in start..start + cfg.cmp_block {
            for c in 0..d {
                kc.set(b, c, kc.get(b, c) + k.get(r, c) / len);
            }
            for c in 0..v.cols() {
                vc.set(b, c, vc.get(b, c) + v.get(r, c) / len);
            }
        }
    }
    Ok((kc, vc))
}

/// Selected raw keys/values and the retained block indices.
#[derive(Debug, Clone)]
pub struct Selection {
    pub keys: Matrix,
    pub values: Matrix,
    /// Retained block indices in ascending order.
    pub blocks: Vec<usize>,
}

/// Scores selection blocks by the compressed-attention probability mass of
/// the query, keeps the top `top_blocks` (ties break toward the lower block
/// index), and concatenates the covered raw rows in index order.
pub fn select_blocks(
    q_row: &[f64],
    k_cmp: &Matrix,
    k: &Matrix,
    v: &Matrix,
    t: usize,
    cfg: &NsaConfig,
) -> Result<Selection> {
    cfg.validate()?;
    cfg.require_aligned()?;
    let n_blocks = k_cmp.rows();
    if n_blocks != cfg.compressed_blocks(t) {
        return Err(Error::shape("select_blocks", "compressed block count"));
    }
    let scores = block_scores(q_row, k_cmp);
    let blocks = top_k_indices(&scores, cfg.top_blocks);

    let d = k.cols();
    let rows = blocks.len() * cfg.slc_block;
    let mut ks = Matrix::zeros(rows, d);
    let mut vs = Matrix::zeros(rows, v.cols());
    for (out_block, &b) in blocks.iter().enumerate() {
        for r in 0..cfg.slc_block {
            let src = b * cfg.slc_block + r;
            let dst = out_block * cfg.slc_block + r;
            ks.row_mut(dst).copy_from_slice(k.row(src));
            vs.row_mut(dst).copy_from_slice(v.row(src));
        }
    }
    Ok(Selection {
        keys: ks,
        values: vs,
        blocks,
    })
}

/// Softmax probabilities of the query over compressed keys, scaled by
/// `1/sqrt(d)`; one score per aligned selection block.
pub fn block_scores(q_row: &[f64], k_cmp: &Matrix) -> Vec<f64> {
    let n = k_cmp.rows();
    if n == 0 {
        return Vec::new();
    }
    let scale = 1.0 / (q_row.len() as f64).sqrt();
    let logits: Vec<f64> = (0..n).map(|b| scale * dot(q_row, k_cmp.row(b))).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|s| (s - m).exp()).sum();
    logits.iter().map(|s| (s - m).exp() / denom).collect()
}

/// Indices of the `k` largest scores, ties broken toward the lower index,
/// returned in ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order.into_iter().take(k).collect();
    keep.sort_unstable();
    keep
}

/// Gated sum of the branch outputs. Absent branches contribute zero with
/// their gate forced to zero.
pub fn combine(branches: &BranchOutputs, gates: BranchGates, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; dim];
    let mut add = |branch: &Option<Vec<f64>>, g: f64| {
        if let Some(b) = branch {
            for (o, &x) in out.iter_mut().zip(b) {
                *o += g * x;
            }
        }
    };
    add(&branches.cmp, gates.cmp);
    add(&branches.slc, gates.slc);
    add(&branches.loc, gates.loc);
    out
}

/// Per-token work and causality bookkeeping from the instrumented forward.
#[derive(Debug, Clone, Copy, Default)]
pub struct NsaTokenCounters {
    /// Compressed keys attended.
    pub compressed: usize,
    /// Raw rows attended through selection.
    pub selected: usize,
    /// Local window rows attended.
    pub local: usize,
    /// Highest 1-based key/value index any branch touched.
    pub max_index_read: usize,
}

impl NsaTokenCounters {
    pub fn attended(&self) -> usize {
        self.compressed + self.selected + self.local
    }
}

/// Full three-branch forward over a sequence: compression and selection per
/// token, the gated windowed kernel for the local branch, sigmoid-gated sum.
pub fn nsa_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    decay_prefix: &[f64],
    params: &NsaParams,
    cfg: &NsaConfig,
    attn: &AttnConfig,
) -> Result<Matrix> {
    nsa_forward_instrumented(q, k, v, decay_prefix, params, cfg, attn).map(|(m, _)| m)
}

/// [`nsa_forward`] plus per-token counters.
#[allow(clippy::too_many_arguments)]
pub fn nsa_forward_instrumented(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    decay_prefix: &[f64],
    params: &NsaParams,
    cfg: &NsaConfig,
    attn: &AttnConfig,
) -> Result<(Matrix, Vec<NsaTokenCounters>)> {
    cfg.validate()?;
    let n = q.rows();
    let d = q.cols();
    if k.rows() != n || v.rows() != n || decay_prefix.len() != n {
        return Err(Error::shape("nsa_forward", "sequence lengths"));
    }

    // Local branch for all tokens in one streaming pass.
    let local_cfg = AttnConfig {
        seq_len: n,
        head_dim: d,
        window: cfg.window,
        ..*attn
    };
    let (local, _) = tiled::forward_tiled(q, k, v, decay_prefix, &local_cfg)?;

    let mut out = Matrix::zeros(n, d);
    let mut counters = vec![NsaTokenCounters::default(); n];
    for i in 0..n {
        let t = i + 1;
        let q_row = q.row(i);
        let mut gates = params.gates_for(q_row);
        let mut branches = BranchOutputs {
            loc: Some(local.out.row(i).to_vec()),
            ..BranchOutputs::default()
        };
        counters[i].local = t - t.saturating_sub(cfg.window);
        counters[i].max_index_read = t;

        let (mut k_cmp, mut v_cmp) = compress_kv(k, v, t, cfg)?;
        if let Some(map) = &params.pool_map {
            k_cmp = k_cmp.matmul(map)?;
            v_cmp = v_cmp.matmul(map)?;
        }
        if k_cmp.rows() > 0 {
            branches.cmp = Some(softmax_over(q_row, &k_cmp, &v_cmp));
            counters[i].compressed = k_cmp.rows();

            let selection = select_blocks(q_row, &k_cmp, k, v, t, cfg)?;
            if !selection.blocks.is_empty() {
                branches.slc = Some(softmax_over(q_row, &selection.keys, &selection.values));
                counters[i].selected = selection.keys.rows();
            } else {
                gates.slc = 0.0;
            }
        } else {
            gates.cmp = 0.0;
            gates.slc = 0.0;
        }

        let combined = combine(&branches, gates, d);
        out.row_mut(i).copy_from_slice(&combined);
    }
    Ok((out, counters))
}

/// Plain softmax attention of a single query over an explicit key/value set.
fn softmax_over(q_row: &[f64], keys: &Matrix, values: &Matrix) -> Vec<f64> {
    let scale = 1.0 / (q_row.len() as f64).sqrt();
    let logits: Vec<f64> = (0..keys.rows())
        .map(|r| scale * dot(q_row, keys.row(r)))
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|s| (s - m).exp()).sum();
    let mut out = vec![0.0f64; values.cols()];
    for (r, &s) in logits.iter().enumerate() {
        let p = (s - m).exp() / denom;
        for (o, &vv) in out.iter_mut().zip(values.row(r)) {
            *o += p * vv;
        }
    }
    out
}
