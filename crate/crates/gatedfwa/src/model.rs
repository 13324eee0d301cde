//! Attention layer, transformer block, and a toy recall training demo.
//!
//! The layer pipeline per head: project, gate-scan the decay prefix, run the
//! tiled windowed kernel, normalize each head, concatenate, apply the swish
//! output gate, and project out. Blocks wrap the layer and a SwiGLU feed-
//! forward in pre-norm residuals.

use crate::attn::{tiled, AttnConfig};
use crate::error::{Error, Result};
use crate::gate::{self, GateParams, DEFAULT_GATE_EPS};
use crate::numerics::{swish, Matrix, Rng};

const RMS_EPS: f64 = 1e-6;

/// Shape parameters shared by the layer and block forward passes.
#[derive(Debug, Clone, Copy)]
pub struct LayerConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    pub scan_chunk: usize,
    /// Root-mean-square normalization per head (no learned scale). The demo
    /// path turns it off to keep the analytic backward minimal.
    pub head_norm: bool,
}

impl LayerConfig {
    pub fn new(dim: usize, heads: usize, window: usize) -> Self {
        LayerConfig {
            dim,
            heads,
            window,
            block_rows: 16,
            block_cols: 16,
            scan_chunk: 16,
            head_norm: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn attn_config(&self, n: usize) -> AttnConfig {
        AttnConfig::new(n, self.head_dim(), self.window)
            .with_blocks(self.block_rows, self.block_cols)
            .with_heads(self.heads)
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// SwiGLU feed-forward weights.
#[derive(Debug, Clone)]
pub struct SwiGluParams {
    /// `d x ff` gate projection.
    pub w_gate: Matrix,
    /// `d x ff` up projection.
    pub w_up: Matrix,
    /// `ff x d` down projection.
    pub w_down: Matrix,
}

/// Weights of one attention layer plus its feed-forward.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub gate: GateParams,
    /// `d x d` swish output-gate projection.
    pub w_gate_out: Matrix,
    /// `1 x d` swish output-gate bias.
    pub b_gate_out: Matrix,
    pub w_out: Matrix,
    pub ffn: SwiGluParams,
}

impl LayerParams {
    pub fn init_random(rng: &mut Rng, cfg: &LayerConfig) -> Self {
        let d = cfg.dim;
        let ff = 2 * d;
        let s = 1.0 / (d as f64).sqrt();
        LayerParams {
            w_q: rng.normal_matrix(d, d).scale(s).unwrap(),
            w_k: rng.normal_matrix(d, d).scale(s).unwrap(),
            w_v: rng.normal_matrix(d, d).scale(s).unwrap(),
            gate: GateParams::init_random(rng, d, cfg.heads),
            w_gate_out: rng.normal_matrix(d, d).scale(s).unwrap(),
            b_gate_out: Matrix::zeros(1, d),
            w_out: rng.normal_matrix(d, d).scale(s).unwrap(),
            ffn: SwiGluParams {
                w_gate: rng.normal_matrix(d, ff).scale(s).unwrap(),
                w_up: rng.normal_matrix(d, ff).scale(s).unwrap(),
                w_down: rng.normal_matrix(ff, d).scale(1.0 / (ff as f64).sqrt()).unwrap(),
            },
        }
    }
}

fn rms_normalize_rows(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| {
        let row = m.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        m.get(r, c) / (ms + RMS_EPS).sqrt()
    })
}

fn slice_cols(m: &Matrix, lo: usize, hi: usize) -> Matrix {
    Matrix::from_fn(m.rows(), hi - lo, |r, c| m.get(r, lo + c))
}

/// Full attention layer: per-head decay prefixes via the one-pass scan, the
/// tiled kernel per head, per-head normalization, concat, swish gate, and
/// the output projection.
pub fn attn_layer_forward(x: &Matrix, params: &LayerParams, cfg: &LayerConfig) -> Result<Matrix> {
    cfg.validate()?;
    let n = x.rows();
    if x.cols() != cfg.dim {
        return Err(Error::shape("attn_layer_forward", "input dim"));
    }
    let dh = cfg.head_dim();
    let q = x.matmul(&params.w_q)?;
    let k = x.matmul(&params.w_k)?;
    let v = x.matmul(&params.w_v)?;

    let state = gate::gate_forward(x, &params.gate, DEFAULT_GATE_EPS)?;
    let prefix = gate::scan_onepass(
        &state.pre_activation,
        &state.amplitude,
        cfg.scan_chunk.min(n.max(1)),
        DEFAULT_GATE_EPS,
    )?;

    let attn_cfg = cfg.attn_config(n);
    let mut concat = Matrix::zeros(n, cfg.dim);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = slice_cols(&q, lo, hi);
        let kh = slice_cols(&k, lo, hi);
        let vh = slice_cols(&v, lo, hi);
        let u: Vec<f64> = (0..n).map(|t| prefix.get(t, h)).collect();
        let (head_out, _) = tiled::forward_tiled(&qh, &kh, &vh, &u, &attn_cfg)?;
        let normed = if cfg.head_norm {
            rms_normalize_rows(&head_out.out)
        } else {
            head_out.out
        };
        for r in 0..n {
            for c in 0..dh {
                concat.set(r, lo + c, normed.get(r, c));
            }
        }
    }

    let mut gate_pre = x.matmul(&params.w_gate_out)?;
    for r in 0..n {
        for c in 0..cfg.dim {
            gate_pre.set(r, c, gate_pre.get(r, c) + params.b_gate_out.get(0, c));
        }
    }
    let gated = gate_pre.zip_map(&concat, "attn_layer/gate", |g, o| swish(g) * o)?;
    gated.matmul(&params.w_out)
}

/// SwiGLU feed-forward: `(swish(x W_gate) . (x W_up)) W_down`.
pub fn swiglu_forward(x: &Matrix, p: &SwiGluParams) -> Result<Matrix> {
    let gate = x.matmul(&p.w_gate)?;
    let up = x.matmul(&p.w_up)?;
    gate.zip_map(&up, "swiglu", |g, u| swish(g) * u)?.matmul(&p.w_down)
}

/// Pre-norm residual block: attention then feed-forward.
pub fn transformer_block_forward(
    x: &Matrix,
    params: &LayerParams,
    cfg: &LayerConfig,
) -> Result<Matrix> {
    let y = attn_layer_forward(&rms_normalize_rows(x), params, cfg)?.add(x)?;
    swiglu_forward(&rms_normalize_rows(&y), &params.ffn)?.add(&y)
}

/// Key/value recall task: interleaved symbol pairs followed by key repeats
/// whose associated values must be reproduced.
#[derive(Debug, Clone)]
pub struct RecallTask {
    /// `N x d` input embeddings.
    pub inputs: Matrix,
    /// Positions whose outputs are scored.
    pub query_positions: Vec<usize>,
    /// `len(query_positions) x d` expected value vectors.
    pub targets: Matrix,
}

impl RecallTask {
    /// Interleaves `pairs` random (key, value) symbol pairs, then appends
    /// `queries` repeated keys. Every queried key appears earlier by
    /// construction.
    pub fn generate(seed: u64, pairs: usize, queries: usize, dim: usize) -> RecallTask {
        let mut rng = Rng::new(seed);
        let keys: Vec<Vec<f64>> = (0..pairs).map(|_| rng.normal_vec(dim)).collect();
        let values: Vec<Vec<f64>> = (0..pairs).map(|_| rng.normal_vec(dim)).collect();
        let n = 2 * pairs + queries;
        let mut inputs = Matrix::zeros(n, dim);
        for (i, (k, v)) in keys.iter().zip(&values).enumerate() {
            inputs.row_mut(2 * i).copy_from_slice(k);
            inputs.row_mut(2 * i + 1).copy_from_slice(v);
        }
        let mut query_positions = Vec::with_capacity(queries);
        let mut targets = Matrix::zeros(queries, dim);
        for qi in 0..queries {
            let which = rng.index(pairs);
            let pos = 2 * pairs + qi;
            inputs.row_mut(pos).copy_from_slice(&keys[which]);
            targets.row_mut(qi).copy_from_slice(&values[which]);
            query_positions.push(pos);
        }
        RecallTask {
            inputs,
            query_positions,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Minimal trainable model: input projections, one gated windowed attention
/// head (no norms, no output gate), and an output projection.
#[derive(Debug, Clone)]
pub struct DemoModel {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub gate: GateParams,
    pub w_out: Matrix,
}

impl DemoModel {
    pub fn init_random(rng: &mut Rng, dim: usize) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let mut gate = GateParams::init_random(rng, dim, 1);
        // Start nearly decay-free so early pairs stay reachable; the bias is
        // trained like every other parameter.
        gate.b_gate = Matrix::from_fn(1, 1, |_, _| -4.0);
        DemoModel {
            w_q: rng.normal_matrix(dim, dim).scale(s).unwrap(),
            w_k: rng.normal_matrix(dim, dim).scale(s).unwrap(),
            w_v: rng.normal_matrix(dim, dim).scale(s).unwrap(),
            gate,
            w_out: rng.normal_matrix(dim, dim).scale(s).unwrap(),
        }
    }

    fn attn_config(&self, n: usize) -> AttnConfig {
        AttnConfig::new(n, self.w_q.cols(), n).with_blocks(8, 8)
    }
}

/// Gradients for every demo parameter.
#[derive(Debug, Clone)]
pub struct DemoGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_gate: Matrix,
    pub b_gate: Matrix,
    pub w_amplitude: Matrix,
    pub w_out: Matrix,
}

/// Mean squared error over the queried positions and its analytic gradient.
pub fn demo_loss_and_grads(model: &DemoModel, task: &RecallTask) -> Result<(f64, DemoGrads)> {
    let x = &task.inputs;
    let n = x.rows();
    let d = x.cols();
    let cfg = model.attn_config(n);

    let q = x.matmul(&model.w_q)?;
    let k = x.matmul(&model.w_k)?;
    let v = x.matmul(&model.w_v)?;
    let state = gate::gate_forward(x, &model.gate, DEFAULT_GATE_EPS)?;
    let prefix = gate::scan_onepass(&state.pre_activation, &state.amplitude, 8.min(n), DEFAULT_GATE_EPS)?;
    let u: Vec<f64> = (0..n).map(|t| prefix.get(t, 0)).collect();
    let (attn_out, _) = tiled::forward_tiled(&q, &k, &v, &u, &cfg)?;
    let y = attn_out.out.matmul(&model.w_out)?;

    let denom = (task.query_positions.len() * d) as f64;
    let mut loss = 0.0f64;
    let mut dy = Matrix::zeros(n, d);
    for (qi, &pos) in task.query_positions.iter().enumerate() {
        for c in 0..d {
            let diff = y.get(pos, c) - task.targets.get(qi, c);
            loss += diff * diff / denom;
            dy.set(pos, c, 2.0 * diff / denom);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "demo_loss" });
    }

    let w_out_grad = attn_out.out.transpose().matmul(&dy)?;
    let d_attn = dy.matmul(&model.w_out.transpose())?;
    let (dq, dk, dv, du, _) =
        tiled::backward_tiled(&q, &k, &v, &u, &cfg, &attn_out.out, &attn_out.log_norm, &d_attn)?;
    let du_mat = Matrix::from_vec(n, 1, du)?;
    let gate_grads = gate::gate_backward(&du_mat, &state, x, &model.gate, DEFAULT_GATE_EPS)?;

    let xt = x.transpose();
    Ok((
        loss,
        DemoGrads {
            w_q: xt.matmul(&dq)?,
            w_k: xt.matmul(&dk)?,
            w_v: xt.matmul(&dv)?,
            w_gate: gate_grads.w_gate,
            b_gate: gate_grads.b_gate,
            w_amplitude: gate_grads.w_amplitude,
            w_out: w_out_grad,
        },
    ))
}

fn gd_step(param: &mut Matrix, grad: &Matrix, lr: f64) {
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

/// Plain gradient descent on the recall task. Returns the loss at step 0
/// (initial parameters) followed by the loss after each update; divergence
/// surfaces as an error.
pub fn train_demo(task: &RecallTask, steps: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
    let dim = task.inputs.cols();
    let mut rng = Rng::new(seed);
    let mut model = DemoModel::init_random(&mut rng, dim);
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grads) = demo_loss_and_grads(&model, task)?;
        losses.push(loss);
        gd_step(&mut model.w_q, &grads.w_q, lr);
        gd_step(&mut model.w_k, &grads.w_k, lr);
        gd_step(&mut model.w_v, &grads.w_v, lr);
        gd_step(&mut model.gate.w_gate, &grads.w_gate, lr);
        gd_step(&mut model.gate.b_gate, &grads.b_gate, lr);
        gd_step(&mut model.gate.w_amplitude, &grads.w_amplitude, lr);
        gd_step(&mut model.w_out, &grads.w_out, lr);
    }
    let (final_loss, _) = demo_loss_and_grads(&model, task)?;
    losses.push(final_loss);
    Ok(losses)
}
