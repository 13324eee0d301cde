//! Data-dependent memory gate and its cumulative decay prefix.
//!
//! Per token `t` and head: pre-activation `h = x W_g + b_g`, amplitude
//! `beta = 1 + elu(x W_b)`, gate `alpha = softplus(beta * h) / (beta + eps)`,
//! and the running prefix `u_t = -sum_{q<=t} alpha_q`. The prefix feeds the
//! pairwise decay bias `u_i - u_j` added to windowed attention logits.
//!
//! Three interchangeable scan strategies produce `u`:
//! [`scan_naive`] materializes the gate matrix and cumulative-sums it,
//! [`scan_onepass`] streams chunks with an on-chip carry and never
//! materializes the gate, and [`scan_three_phase`] reduces chunks in
//! parallel form, scans the aggregates, then recomputes and distributes.

use crate::error::{Error, Result};
use crate::numerics::{elu, elu_prime, sigmoid, softplus_safe, Matrix};

/// Denominator guard added to the amplitude; only matters near the
/// `elu -> -1` limit where the amplitude approaches zero.
pub const DEFAULT_GATE_EPS: f64 = 1e-6;

/// Gate projection weights for one layer.
///
/// The amplitude projection starts at zero so every head opens with
/// amplitude exactly one.
#[derive(Debug, Clone)]
pub struct GateParams {
    /// `d x H` pre-activation projection.
    pub w_gate: Matrix,
    /// `1 x H` pre-activation bias.
    pub b_gate: Matrix,
    /// `d x H` amplitude projection (zero at init).
    pub w_amplitude: Matrix,
}

impl GateParams {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        GateParams {
            w_gate: Matrix::zeros(dim, heads),
            b_gate: Matrix::zeros(1, heads),
            w_amplitude: Matrix::zeros(dim, heads),
        }
    }

    /// Random pre-activation projection, zero bias, zero amplitude projection.
    pub fn init_random(rng: &mut crate::numerics::Rng, dim: usize, heads: usize) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        GateParams {
            w_gate: rng.normal_matrix(dim, heads).scale(std).unwrap(),
            b_gate: Matrix::zeros(1, heads),
            w_amplitude: Matrix::zeros(dim, heads),
        }
    }
}

/// Per-token, per-head gate quantities, all `N x H`.
#[derive(Debug, Clone)]
pub struct GateState {
    /// Pre-activation `h`.
    pub pre_activation: Matrix,
    /// Amplitude `beta`, strictly positive.
    pub amplitude: Matrix,
    /// Gate `alpha`, strictly positive.
    pub gate: Matrix,
    /// Cumulative prefix `u`, strictly decreasing down each column.
    /// Absent until a scan runs.
    pub decay_prefix: Option<Matrix>,
}

/// Read/write counts observed by the instrumented one-pass scan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanCounters {
    pub reads_pre_activation: u64,
    pub reads_amplitude: u64,
    pub writes_prefix: u64,
}

impl ScanCounters {
    pub fn total_reads(&self) -> u64 {
        self.reads_pre_activation + self.reads_amplitude
    }
}

#[inline]
fn gate_value(pre: f64, amp: f64, eps: f64) -> f64 {
    softplus_safe(amp * pre) / (amp + eps)
}

/// Computes pre-activation, amplitude, and gate for every token and head.
/// The decay prefix is left unset; run one of the scans to fill it.
pub fn gate_forward(x: &Matrix, params: &GateParams, eps: f64) -> Result<GateState> {
    if eps <= 0.0 {
        return Err(Error::Config("gate eps must be positive".into()));
    }
    if x.cols() != params.w_gate.rows() {
        return Err(Error::shape(
            "gate_forward",
            format!("input dim {} vs projection {}", x.cols(), params.w_gate.rows()),
        ));
    }
    let heads = params.w_gate.cols();
    let mut pre = x.matmul(&params.w_gate)?;
    for r in 0..pre.rows() {
        for h in 0..heads {
            let v = pre.get(r, h) + params.b_gate.get(0, h);
            pre.set(r, h, v);
        }
    }
    let amp_pre = x.matmul(&params.w_amplitude)?;
    let amplitude = amp_pre.map("gate_forward/amplitude", |z| 1.0 + elu(z))?;
    let gate = pre.zip_map(&amplitude, "gate_forward/gate", |h, b| gate_value(h, b, eps))?;
    Ok(GateState {
        pre_activation: pre,
        amplitude,
        gate,
        decay_prefix: None,
    })
}

/// Prefix via explicit gate matrix and per-column cumulative sum.
pub fn scan_naive(gate: &Matrix) -> Matrix {
    let (n, heads) = (gate.rows(), gate.cols());
    let mut out = Matrix::zeros(n, heads);
    for h in 0..heads {
        let mut acc = 0.0f64;
        for t in 0..n {
            acc -= gate.get(t, h);
            out.set(t, h, acc);
        }
    }
    out
}

/// One streaming pass over `ceil(N / chunk)` chunks with a per-head carry.
///
/// Recomputes the gate inside each chunk, so no `N x H` gate intermediate is
/// materialized. The carry update threads the in-chunk cumulative sum, which
/// keeps the result bit-identical to [`scan_naive`] on the same activations.
pub fn scan_onepass(pre: &Matrix, amplitude: &Matrix, chunk: usize, eps: f64) -> Result<Matrix> {
    scan_onepass_instrumented(pre, amplitude, chunk, eps).map(|(u, _)| u)
}

/// [`scan_onepass`] with element read/write counters.
pub fn scan_onepass_instrumented(
    pre: &Matrix,
    amplitude: &Matrix,
    chunk: usize,
    eps: f64,
) -> Result<(Matrix, ScanCounters)> {
    check_scan_inputs("scan_onepass", pre, amplitude, chunk)?;
    let (n, heads) = (pre.rows(), pre.cols());
    let mut out = Matrix::zeros(n, heads);
    let mut counters = ScanCounters::default();
    let mut carry = vec![0.0f64; heads];
    let mut t0 = 0;
    while t0 < n {
        let t1 = (t0 + chunk).min(n);
        for t in t0..t1 {
            for h in 0..heads {
                let p = pre.get(t, h);
                let a = amplitude.get(t, h);
                counters.reads_pre_activation += 1;
                counters.reads_amplitude += 1;
                carry[h] -= gate_value(p, a, eps);
                out.set(t, h, carry[h]);
                counters.writes_prefix += 1;
            }
        }
        t0 = t1;
    }
    Ok((out, counters))
}

/// Scan-then-propagate: chunk reductions in parallel, a sequential scan
/// over the aggregates, then a parallel downsweep that recomputes the gate
/// and adds the global offset.
pub fn scan_three_phase(
    pre: &Matrix,
    amplitude: &Matrix,
    chunk: usize,
    eps: f64,
) -> Result<Matrix> {
    use rayon::prelude::*;

    check_scan_inputs("scan_three_phase", pre, amplitude, chunk)?;
    let (n, heads) = (pre.rows(), pre.cols());
    let n_chunks = n.div_ceil(chunk);

    // Phase 1: per-chunk block sums, independent across chunks.
    let block_sums: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let (t0, t1) = (c * chunk, ((c + 1) * chunk).min(n));
            let mut sums = vec![0.0f64; heads];
            for t in t0..t1 {
                for (h, s) in sums.iter_mut().enumerate() {
                    *s -= gate_value(pre.get(t, h), amplitude.get(t, h), eps);
                }
            }
            sums
        })
        .collect();

    // Phase 2: exclusive prefix over the aggregates, sequential.
    let mut offsets = vec![vec![0.0f64; heads]; n_chunks];
    for c in 1..n_chunks {
        for h in 0..heads {
            offsets[c][h] = offsets[c - 1][h] + block_sums[c - 1][h];
        }
    }

    // Phase 3: recompute in-chunk gates and distribute, independent across
    // chunks again; each chunk owns a disjoint slice of the output.
    let mut out = Matrix::zeros(n, heads);
    out.data_mut()
        .par_chunks_mut(chunk * heads)
        .enumerate()
        .for_each(|(c, slice)| {
            let t0 = c * chunk;
            let rows = slice.len() / heads;
            let mut acc = offsets[c].clone();
            for r in 0..rows {
                for (h, a) in acc.iter_mut().enumerate() {
                    *a -= gate_value(pre.get(t0 + r, h), amplitude.get(t0 + r, h), eps);
                    slice[r * heads + h] = *a;
                }
            }
        });
    Ok(out)
}

fn check_scan_inputs(op: &'static str, pre: &Matrix, amplitude: &Matrix, chunk: usize) -> Result<()> {
    if pre.rows() != amplitude.rows() || pre.cols() != amplitude.cols() {
        return Err(Error::shape(op, "pre-activation and amplitude shapes differ"));
    }
    if chunk == 0 || chunk > pre.rows().max(1) {
        return Err(Error::Config(format!(
            "{op}: chunk {chunk} outside 1..={}",
            pre.rows().max(1)
        )));
    }
    Ok(())
}

/// Gradients of a scalar loss through the gate pipeline.
#[derive(Debug, Clone)]
pub struct GateGrads {
    /// `N x H` gradient into the pre-activation.
    pub pre_activation: Matrix,
    /// `N x H` gradient into the amplitude pre-activation `x W_b`.
    pub amplitude_pre: Matrix,
    /// `d x H`.
    pub w_gate: Matrix,
    /// `1 x H`.
    pub b_gate: Matrix,
    /// `d x H`.
    pub w_amplitude: Matrix,
    /// `N x d` contribution into the layer input.
    pub input: Matrix,
}

/// Reverse suffix sum taking prefix-gradients to gate-gradients:
/// `d_alpha[q] = -sum_{t >= q} d_prefix[t]`.
pub fn prefix_grad_to_gate_grad(d_prefix: &Matrix) -> Matrix {
    let (n, heads) = (d_prefix.rows(), d_prefix.cols());
    let mut out = Matrix::zeros(n, heads);
    for h in 0..heads {
        let mut acc = 0.0f64;
        for t in (0..n).rev() {
            acc += d_prefix.get(t, h);
            out.set(t, h, -acc);
        }
    }
    out
}

/// Exact backward pass of `gate_forward` followed by a prefix scan.
///
/// `d_prefix` is the gradient arriving at the decay prefix, e.g. the `dU`
/// output of the tiled attention backward. Differentiates through the
/// `(beta + eps)` denominator exactly as the forward computes it.
pub fn gate_backward(
    d_prefix: &Matrix,
    state: &GateState,
    x: &Matrix,
    params: &GateParams,
    eps: f64,
) -> Result<GateGrads> {
    let (n, heads) = (state.pre_activation.rows(), state.pre_activation.cols());
    if d_prefix.rows() != n || d_prefix.cols() != heads {
        return Err(Error::shape("gate_backward", "d_prefix shape"));
    }
    if x.rows() != n {
        return Err(Error::shape("gate_backward", "input rows"));
    }

    let d_gate = prefix_grad_to_gate_grad(d_prefix);

    let mut d_pre = Matrix::zeros(n, heads);
    let mut d_amp = Matrix::zeros(n, heads);
    for t in 0..n {
        for h in 0..heads {
            let hv = state.pre_activation.get(t, h);
            let b = state.amplitude.get(t, h);
            let z = b * hv;
            let denom = b + eps;
            let sig = sigmoid(z);
            let da = d_gate.get(t, h);
            d_pre.set(t, h, da * sig * b / denom);
            d_amp.set(
                t,
                h,
                da * (sig * hv * denom - softplus_safe(z)) / (denom * denom),
            );
        }
    }

    // Amplitude pre-activation gradient needs elu'; recompute x W_b.
    let amp_pre = x.matmul(&params.w_amplitude)?;
    let d_amp_pre = d_amp.zip_map(&amp_pre, "gate_backward/amp_pre", |g, z| g * elu_prime(z))?;

    let xt = x.transpose();
    let w_gate_grad = xt.matmul(&d_pre)?;
    let w_amplitude_grad = xt.matmul(&d_amp_pre)?;
    let mut b_gate_grad = Matrix::zeros(1, heads);
    for h in 0..heads {
        let mut acc = 0.0f64;
        for t in 0..n {
            acc += d_pre.get(t, h);
        }
        b_gate_grad.set(0, h, acc);
    }
    let input = d_pre
        .matmul(&params.w_gate.transpose())?
        .add(&d_amp_pre.matmul(&params.w_amplitude.transpose())?)?;

    Ok(GateGrads {
        pre_activation: d_pre,
        amplitude_pre: d_amp_pre,
        w_gate: w_gate_grad,
        b_gate: b_gate_grad,
        w_amplitude: w_amplitude_grad,
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    const EPS: f64 = DEFAULT_GATE_EPS;

    fn random_state(seed: u64, n: usize, d: usize, heads: usize) -> (Matrix, GateParams, GateState) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_matrix(n, d);
        let mut params = GateParams::init_random(&mut rng, d, heads);
        // Nonzero amplitude projection so both branches of the gate are live.
        params.w_amplitude = rng.normal_matrix(d, heads).scale(0.5).unwrap();
        params.b_gate = rng.normal_matrix(1, heads).scale(0.2).unwrap();
        let state = gate_forward(&x, &params, EPS).unwrap();
        (x, params, state)
    }

    #[test]
    fn zero_preactivation_gives_ln2_gate() {
        // x = 0 forces h = 0 (zero bias) and beta = 1.
        let params = GateParams::zeros(3, 2);
        let x = Matrix::zeros(4, 3);
        let st = gate_forward(&x, &params, EPS).unwrap();
        for t in 0..4 {
            for h in 0..2 {
                assert_eq!(st.amplitude.get(t, h), 1.0);
                let want = LN_2 / (1.0 + EPS);
                assert!((st.gate.get(t, h) - want).abs() < 1e-12);
                assert!((st.gate.get(t, h) - 0.693146).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_amplitude_projection_gives_unit_amplitude() {
        let mut rng = Rng::new(3);
        let params = GateParams::init_random(&mut rng, 5, 3);
        let x = rng.normal_matrix(7, 5);
        let st = gate_forward(&x, &params, EPS).unwrap();
        for t in 0..7 {
            for h in 0..3 {
                assert_eq!(st.amplitude.get(t, h), 1.0);
            }
        }
    }

    #[test]
    fn gate_matches_elementwise_oracle() {
        let (_, _, st) = random_state(11, 6, 4, 2);
        for t in 0..6 {
            for h in 0..2 {
                let b = st.amplitude.get(t, h);
                let hv = st.pre_activation.get(t, h);
                let want = softplus_safe(b * hv) / (b + EPS);
                let got = st.gate.get(t, h);
                assert!(((got - want) / want).abs() < 1e-6);
                assert!(got > 0.0);
                assert!(b > 0.0);
            }
        }
    }

    #[test]
    fn scan_naive_ln2_ladder() {
        let alpha = Matrix::from_rows(&[vec![LN_2], vec![LN_2], vec![LN_2]]).unwrap();
        let u = scan_naive(&alpha);
        for t in 0..3 {
            assert!((u.get(t, 0) + (t as f64 + 1.0) * LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn scan_naive_zero_gate() {
        let u = scan_naive(&Matrix::zeros(5, 2));
        assert_eq!(u, Matrix::zeros(5, 2));
    }

    #[test]
    fn scan_naive_last_row_is_column_sum() {
        let mut rng = Rng::new(5);
        let alpha = rng.uniform_matrix(33, 3, 0.01, 2.0);
        let u = scan_naive(&alpha);
        for h in 0..3 {
            let total: f64 = (0..33).map(|t| alpha.get(t, h)).sum();
            assert!((u.get(32, h) + total).abs() < 1e-12);
        }
    }

    #[test]
    fn onepass_single_chunk_equals_naive_bitwise() {
        let (_, _, st) = random_state(17, 16, 4, 2);
        let naive = scan_naive(&st.gate);
        let one = scan_onepass(&st.pre_activation, &st.amplitude, 16, EPS).unwrap();
        assert_eq!(naive, one);
    }

    #[test]
    fn onepass_chunked_equals_naive() {
        let (_, _, st) = random_state(23, 16, 4, 2);
        let naive = scan_naive(&st.gate);
        let chunked = scan_onepass(&st.pre_activation, &st.amplitude, 2, EPS).unwrap();
        assert!(naive.max_rel_diff(&chunked) < 1e-12);
    }

    #[test]
    fn onepass_unit_state_ladder() {
        // h = 0, beta = 1 => alpha = ln2 / (1 + eps).
        let pre = Matrix::zeros(4, 1);
        let amp = Matrix::from_fn(4, 1, |_, _| 1.0);
        let u = scan_onepass(&pre, &amp, 2, EPS).unwrap();
        for t in 0..4 {
            let want = -((t + 1) as f64) * LN_2 / (1.0 + EPS);
            assert!((u.get(t, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn onepass_reads_once_writes_once() {
        let (_, _, st) = random_state(29, 20, 4, 3);
        let (_, c) = scan_onepass_instrumented(&st.pre_activation, &st.amplitude, 7, EPS).unwrap();
        assert_eq!(c.reads_pre_activation, 60);
        assert_eq!(c.reads_amplitude, 60);
        assert_eq!(c.writes_prefix, 60);
    }

    #[test]
    fn three_phase_single_chunk_equals_naive() {
        let (_, _, st) = random_state(31, 12, 4, 2);
        let naive = scan_naive(&st.gate);
        let three = scan_three_phase(&st.pre_activation, &st.amplitude, 12, EPS).unwrap();
        assert!(naive.max_rel_diff(&three) < 1e-12);
    }

    #[test]
    fn three_phase_matches_onepass_n64() {
        let (_, _, st) = random_state(37, 64, 4, 2);
        let one = scan_onepass(&st.pre_activation, &st.amplitude, 8, EPS).unwrap();
        let three = scan_three_phase(&st.pre_activation, &st.amplitude, 8, EPS).unwrap();
        assert!(one.max_rel_diff(&three) < 1e-12);
    }

    #[test]
    fn three_phase_uneven_tail_matches_naive() {
        let (_, _, st) = random_state(41, 20, 4, 2);
        let naive = scan_naive(&st.gate);
        let three = scan_three_phase(&st.pre_activation, &st.amplitude, 8, EPS).unwrap();
        assert!(naive.max_rel_diff(&three) < 1e-12);
    }

    #[test]
    fn prefix_strictly_decreasing() {
        let (_, _, st) = random_state(43, 50, 4, 2);
        let u = scan_naive(&st.gate);
        for h in 0..2 {
            assert!(u.get(0, h) < 0.0);
            for t in 1..50 {
                assert!(u.get(t, h) < u.get(t - 1, h));
            }
        }
    }

    #[test]
    fn suffix_sum_constant_case() {
        let c = 0.7;
        let d_prefix = Matrix::from_fn(6, 1, |_, _| c);
        let d_gate = prefix_grad_to_gate_grad(&d_prefix);
        for q in 0..6 {
            assert!((d_gate.get(q, 0) + c * (6 - q) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let (x, params, st) = random_state(47, 8, 4, 2);
        let g = gate_backward(&Matrix::zeros(8, 2), &st, &x, &params, EPS).unwrap();
        assert_eq!(g.w_gate.max_abs(), 0.0);
        assert_eq!(g.w_amplitude.max_abs(), 0.0);
        assert_eq!(g.input.max_abs(), 0.0);
    }

    #[test]
    fn backward_single_token_suffix() {
        let d_prefix = Matrix::from_rows(&[vec![2.5]]).unwrap();
        let d_gate = prefix_grad_to_gate_grad(&d_prefix);
        assert_eq!(d_gate.get(0, 0), -2.5);
    }

    // Central finite differences of sum(U) through the full pipeline.
    fn loss_of(x: &Matrix, params: &GateParams) -> f64 {
        let st = gate_forward(x, params, EPS).unwrap();
        let u = scan_naive(&st.gate);
        u.data().iter().sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (x, params, st) = random_state(53, 6, 3, 2);
        let ones = Matrix::from_fn(6, 2, |_, _| 1.0);
        let grads = gate_backward(&ones, &st, &x, &params, EPS).unwrap();
        let h = 1e-6;

        let check = |analytic: &Matrix, wiggle: &mut dyn FnMut(usize, usize, f64) -> f64| {
            for r in 0..analytic.rows() {
                for c in 0..analytic.cols() {
                    let plus = wiggle(r, c, h);
                    let minus = wiggle(r, c, -h);
                    let fd = (plus - minus) / (2.0 * h);
                    let a = analytic.get(r, c);
                    let denom = a.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        ((a - fd) / denom).abs() < 1e-5,
                        "grad mismatch at ({r},{c}): analytic {a} fd {fd}"
                    );
                }
            }
        };

        check(&grads.w_gate, &mut |r, c, d| {
            let mut p = params.clone();
            p.w_gate.set(r, c, p.w_gate.get(r, c) + d);
            loss_of(&x, &p)
        });
        check(&grads.b_gate, &mut |r, c, d| {
            let mut p = params.clone();
            p.b_gate.set(r, c, p.b_gate.get(r, c) + d);
            loss_of(&x, &p)
        });
        check(&grads.w_amplitude, &mut |r, c, d| {
            let mut p = params.clone();
            p.w_amplitude.set(r, c, p.w_amplitude.get(r, c) + d);
            loss_of(&x, &p)
        });
        check(&grads.input, &mut |r, c, d| {
            let mut xp = x.clone();
            xp.set(r, c, xp.get(r, c) + d);
            loss_of(&xp, &params)
        });
    }

    proptest! {
        // All three strategies agree for arbitrary chunkings.
        #[test]
        fn scans_agree(seed in 0u64..60, chunk in 1usize..20) {
            let (_, _, st) = random_state(seed, 19, 4, 2);
            let naive = scan_naive(&st.gate);
            let one = scan_onepass(&st.pre_activation, &st.amplitude, chunk, EPS).unwrap();
            let three = scan_three_phase(&st.pre_activation, &st.amplitude, chunk, EPS).unwrap();
            prop_assert!(naive.max_rel_diff(&one) < 1e-12);
            prop_assert!(naive.max_rel_diff(&three) < 1e-12);
        }
    }
}
