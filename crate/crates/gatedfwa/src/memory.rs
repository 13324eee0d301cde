//! Executable associative-memory theory.
//!
//! Attention variants induce a recurrence on a feature-space memory
//! `M_t = sum_i c_i phi(k_i)^T v_i`, and each recurrence is a single
//! gradient-descent step on an implicit objective. This module constructs
//! the memories from their definitions, evaluates both sides of every
//! identity independently, and reports residuals instead of asserting
//! anything itself.
//!
//! Time is 1-based throughout: `t` means "t tokens seen", and token `i`
//! lives at slice index `i - 1`.

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, Rng};

/// Truncated Taylor feature map for the exponential kernel.
///
/// Component `n` holds the flattened `n`-th tensor power of the input,
/// scaled by `1 / sqrt(n! * sqrt(d)^n)`, so the inner product of two maps is
/// the degree-`P` Taylor prefix of `exp(q k^T / sqrt(d))`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    input_dim: usize,
    degree: usize,
    feature_dim: usize,
}

impl FeatureMap {
    /// Guards `degree <= 6` and `input_dim <= 4`; the feature dimension is
    /// `sum_{n<=degree} d^n` and grows geometrically.
    pub fn new(input_dim: usize, degree: usize) -> Result<Self> {
        if degree > 6 || input_dim > 4 || input_dim == 0 {
            return Err(Error::DimensionGuard(format!(
                "feature map needs 1 <= input_dim <= 4 (got {input_dim}) and degree <= 6 (got {degree})"
            )));
        }
        let mut feature_dim = 0usize;
        let mut power = 1usize;
        for _ in 0..=degree {
            feature_dim += power;
            power *= input_dim;
        }
        Ok(FeatureMap {
            input_dim,
            degree,
            feature_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Kernel scale `1 / sqrt(d)` applied to the dot product.
    pub fn scale(&self) -> f64 {
        1.0 / (self.input_dim as f64).sqrt()
    }

    /// Concatenated scaled tensor powers, flattened in lexicographic index
    /// order (the order is irrelevant to every inner product).
    pub fn phi(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::shape("phi", "input length"));
        }
        let sqrt_d = (self.input_dim as f64).sqrt();
        let mut out = Vec::with_capacity(self.feature_dim);
        let mut power: Vec<f64> = vec![1.0];
        let mut factorial = 1.0f64;
        let mut dpow = 1.0f64;
        out.push(1.0);
        for n in 1..=self.degree {
            factorial *= n as f64;
            dpow *= sqrt_d;
            let mut next = Vec::with_capacity(power.len() * self.input_dim);
            for &p in &power {
                for &xi in x {
                    next.push(p * xi);
                }
            }
            let s = 1.0 / (factorial * dpow).sqrt();
            out.extend(next.iter().map(|&v| v * s));
            power = next;
        }
        debug_assert_eq!(out.len(), self.feature_dim);
        Ok(out)
    }

    /// Inner product of two mapped vectors: the truncated Taylor prefix of
    /// `exp(q k^T / sqrt(d))`.
    pub fn kernel(&self, q: &[f64], k: &[f64]) -> Result<f64> {
        Ok(dot(&self.phi(q)?, &self.phi(k)?))
    }

    /// Lagrange remainder bound for the truncation error at argument `x`:
    /// `|x|^(P+1) e^|x| / (P+1)!`.
    pub fn truncation_bound(&self, x: f64) -> f64 {
        let p1 = self.degree + 1;
        let mut fact = 1.0f64;
        for n in 1..=p1 {
            fact *= n as f64;
        }
        x.abs().powi(p1 as i32) * x.abs().exp() / fact
    }
}

/// Which attention variant induced a memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryKind {
    Softmax,
    Windowed,
    Gated,
}

/// Feature-space associative memory at a point in time.
#[derive(Debug, Clone)]
pub struct MemoryState {
    /// `feature_dim x d_v`.
    pub matrix: Matrix,
    /// 1-based time index.
    pub time: usize,
    pub kind: MemoryKind,
}

fn add_outer(m: &mut Matrix, coeff: f64, phi: &[f64], v: &[f64]) {
    for (r, &p) in phi.iter().enumerate() {
        let row = m.row_mut(r);
        for (dst, &vv) in row.iter_mut().zip(v) {
            *dst += coeff * p * vv;
        }
    }
}

fn check_tokens(op: &'static str, keys: &[Vec<f64>], values: &[Vec<f64>], t: usize) -> Result<()> {
    if keys.len() != values.len() {
        return Err(Error::shape(op, "keys/values length"));
    }
    if t == 0 || t > keys.len() {
        return Err(Error::shape(op, "time index out of range"));
    }
    Ok(())
}

/// Normalized cumulative memory of full softmax attention:
/// `(1/t) sum_{i<=t} phi(k_i)^T v_i`.
pub fn softmax_memory(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    fm: &FeatureMap,
    t: usize,
) -> Result<MemoryState> {
    check_tokens("softmax_memory", keys, values, t)?;
    let d_v = values[0].len();
    let mut m = Matrix::zeros(fm.feature_dim(), d_v);
    for i in 0..t {
        add_outer(&mut m, 1.0 / t as f64, &fm.phi(&keys[i])?, &values[i]);
    }
    Ok(MemoryState {
        matrix: m,
        time: t,
        kind: MemoryKind::Softmax,
    })
}

/// Windowed average memory: `(1/w) sum_{i=t-w+1..t} phi(k_i)^T v_i`.
pub fn windowed_memory(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    fm: &FeatureMap,
    t: usize,
    w: usize,
) -> Result<MemoryState> {
    check_tokens("windowed_memory", keys, values, t)?;
    if w == 0 || t < w {
        return Err(Error::shape("windowed_memory", "need t >= w >= 1"));
    }
    let d_v = values[0].len();
    let mut m = Matrix::zeros(fm.feature_dim(), d_v);
    for i in (t - w)..t {
        add_outer(&mut m, 1.0 / w as f64, &fm.phi(&keys[i])?, &values[i]);
    }
    Ok(MemoryState {
        matrix: m,
        time: t,
        kind: MemoryKind::Windowed,
    })
}

/// Decay-weighted window memory:
/// `(1/w) sum_{i=t-w+1..t} exp(b_{t,i}) phi(k_i)^T v_i` with
/// `b_{t,i} = -sum_{j=i+1..t} alpha_j`.
pub fn gated_memory(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    gates: &[f64],
    fm: &FeatureMap,
    t: usize,
    w: usize,
) -> Result<MemoryState> {
    check_tokens("gated_memory", keys, values, t)?;
    if gates.len() != keys.len() {
        return Err(Error::shape("gated_memory", "gates length"));
    }
    if w == 0 || t < w {
        return Err(Error::shape("gated_memory", "need t >= w >= 1"));
    }
    let d_v = values[0].len();
    let mut m = Matrix::zeros(fm.feature_dim(), d_v);
    for i in (t - w)..t {
        // b_{t,i}: gates at 1-based times i+2..=t are slice indices i+1..t.
        let bias: f64 = gates[(i + 1)..t].iter().map(|a| -a).sum();
        add_outer(&mut m, bias.exp() / w as f64, &fm.phi(&keys[i])?, &values[i]);
    }
    Ok(MemoryState {
        matrix: m,
        time: t,
        kind: MemoryKind::Gated,
    })
}

/// Residual of the softmax recurrence
/// `M_t = ((t-1)/t) M_{t-1} + (1/t) phi(k_t)^T v_t`, both sides built from
/// the definition. Exact identity: residual at rounding level.
pub fn recurrence_residual_softmax(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    fm: &FeatureMap,
    t: usize,
) -> Result<f64> {
    if t < 2 {
        return Err(Error::shape("recurrence_residual_softmax", "need t >= 2"));
    }
    let m_t = softmax_memory(keys, values, fm, t)?.matrix;
    let m_prev = softmax_memory(keys, values, fm, t - 1)?.matrix;
    let tf = t as f64;
    let mut rhs = m_prev.scale((tf - 1.0) / tf)?;
    add_outer(&mut rhs, 1.0 / tf, &fm.phi(&keys[t - 1])?, &values[t - 1]);
    Ok(m_t.sub(&rhs)?.frobenius_norm())
}

/// Residual of the windowed recurrence
/// `M_t = M_{t-1} + (1/w)(phi(k_t)^T v_t - phi(k_{t-w})^T v_{t-w})`.
pub fn recurrence_residual_windowed(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    fm: &FeatureMap,
    t: usize,
    w: usize,
) -> Result<f64> {
    if t <= w {
        return Err(Error::shape("recurrence_residual_windowed", "need t > w"));
    }
    let m_t = windowed_memory(keys, values, fm, t, w)?.matrix;
    let mut rhs = windowed_memory(keys, values, fm, t - 1, w)?.matrix;
    add_outer(&mut rhs, 1.0 / w as f64, &fm.phi(&keys[t - 1])?, &values[t - 1]);
    add_outer(
        &mut rhs,
        -1.0 / w as f64,
        &fm.phi(&keys[t - w - 1])?,
        &values[t - w - 1],
    );
    Ok(m_t.sub(&rhs)?.frobenius_norm())
}

/// Residuals of the gated recurrence under the two candidate leaving
/// coefficients.
#[derive(Debug, Clone, Copy)]
pub struct GatedRecurrenceCheck {
    /// Leaving term scaled by `c_t = prod_{j=t-w+1..t-1} exp(-alpha_j)`.
    pub residual_printed_coeff: f64,
    /// Leaving term scaled by `exp(-alpha_t) * c_t`, i.e. the full decay
    /// from `t - w` to `t`.
    pub residual_exact_coeff: f64,
}

impl GatedRecurrenceCheck {
    /// Which candidate closes the identity at the given tolerance.
    pub fn verdict(&self, tol: f64) -> &'static str {
        match (
            self.residual_exact_coeff <= tol,
            self.residual_printed_coeff <= tol,
        ) {
            (true, true) => "both",
            (true, false) => "exact",
            (false, true) => "printed",
            (false, false) => "neither",
        }
    }
}

/// Evaluates `M_t = exp(-alpha_t) M_{t-1} + (1/w)(phi(k_t)^T v_t - c *
/// phi(k_{t-w})^T v_{t-w})` for both leaving-coefficient candidates, with
/// `M_t` and `M_{t-1}` built independently from the definition.
pub fn recurrence_residual_gated(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    gates: &[f64],
    fm: &FeatureMap,
    t: usize,
    w: usize,
) -> Result<GatedRecurrenceCheck> {
    if t <= w {
        return Err(Error::shape("recurrence_residual_gated", "need t > w"));
    }
    let m_t = gated_memory(keys, values, gates, fm, t, w)?.matrix;
    let m_prev = gated_memory(keys, values, gates, fm, t - 1, w)?.matrix;
    let alpha_t = gates[t - 1];
    // c_t multiplies decays at 1-based times t-w+1..=t-1.
    let c_t: f64 = gates[(t - w)..(t - 1)].iter().map(|a| (-a).exp()).product();

    let entering = fm.phi(&keys[t - 1])?;
    let leaving = fm.phi(&keys[t - w - 1])?;

    let residual = |leaving_coeff: f64| -> Result<f64> {
        let mut rhs = m_prev.scale((-alpha_t).exp())?;
        add_outer(&mut rhs, 1.0 / w as f64, &entering, &values[t - 1]);
        add_outer(
            &mut rhs,
            -leaving_coeff / w as f64,
            &leaving,
            &values[t - w - 1],
        );
        Ok(m_t.sub(&rhs)?.frobenius_norm())
    };

    Ok(GatedRecurrenceCheck {
        residual_printed_coeff: residual(c_t)?,
        residual_exact_coeff: residual((-alpha_t).exp() * c_t)?,
    })
}

/// Objective value of the softmax memory step at a given state:
/// `(1/2t) ||M||_F^2 - (1/t) phi(k_t) M v_t^T`.
pub fn softmax_objective_value(
    m_prev: &Matrix,
    key: &[f64],
    value: &[f64],
    fm: &FeatureMap,
    t: usize,
) -> Result<f64> {
    let phi = fm.phi(key)?;
    let norm = m_prev.frobenius_norm();
    let recall = bilinear(&phi, m_prev, value);
    Ok(norm * norm / (2.0 * t as f64) - recall / t as f64)
}

/// Objective value of the windowed memory step:
/// `(1/w) <M, phi(k_{t-w})^T v_{t-w} - phi(k_t)^T v_t>`.
pub fn windowed_objective_value(
    m_prev: &Matrix,
    leaving_key: &[f64],
    leaving_value: &[f64],
    entering_key: &[f64],
    entering_value: &[f64],
    fm: &FeatureMap,
    w: usize,
) -> Result<f64> {
    let lv = bilinear(&fm.phi(leaving_key)?, m_prev, leaving_value);
    let ev = bilinear(&fm.phi(entering_key)?, m_prev, entering_value);
    Ok((lv - ev) / w as f64)
}

/// `phi M v^T` for row vectors `phi`, `v`.
fn bilinear(phi: &[f64], m: &Matrix, v: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (r, &p) in phi.iter().enumerate() {
        acc += p * dot(m.row(r), v);
    }
    acc
}

/// Gradient-step reconstruction residual for the softmax objective:
/// `|| (M_{t-1} - grad L(M_{t-1})) - M_t ||_F`.
pub fn objective_residual_softmax(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    fm: &FeatureMap,
    t: usize,
) -> Result<f64> {
    if t < 2 {
        return Err(Error::shape("objective_residual_softmax", "need t >= 2"));
    }
    let m_t = softmax_memory(keys, values, fm, t)?.matrix;
    let m_prev = softmax_memory(keys, values, fm, t - 1)?.matrix;
    // grad = (1/t) M - (1/t) phi(k_t)^T v_t
    let mut step = m_prev.scale(1.0 - 1.0 / t as f64)?;
    add_outer(&mut step, 1.0 / t as f64, &fm.phi(&keys[t - 1])?, &values[t - 1]);
    Ok(step.sub(&m_t)?.frobenius_norm())
}

/// Gradient-step reconstruction residual for the windowed objective. The
/// gradient `(1/w) Delta_t` is independent of the memory, so the update is a
/// pure translation.
pub fn objective_residual_windowed(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    fm: &FeatureMap,
    t: usize,
    w: usize,
) -> Result<f64> {
    if t <= w {
        return Err(Error::shape("objective_residual_windowed", "need t > w"));
    }
    let m_t = windowed_memory(keys, values, fm, t, w)?.matrix;
    let mut step = windowed_memory(keys, values, fm, t - 1, w)?.matrix;
    // -grad = (1/w)(phi(k_t)^T v_t - phi(k_{t-w})^T v_{t-w})
    add_outer(&mut step, 1.0 / w as f64, &fm.phi(&keys[t - 1])?, &values[t - 1]);
    add_outer(
        &mut step,
        -1.0 / w as f64,
        &fm.phi(&keys[t - w - 1])?,
        &values[t - w - 1],
    );
    Ok(step.sub(&m_t)?.frobenius_norm())
}

/// Gradient-step residuals for the gated objective under both sign
/// conventions of the difference term `Delta_t`.
#[derive(Debug, Clone, Copy)]
pub struct GatedObjectiveCheck {
    /// `Delta_t = phi(k_{t-w})^T v_{t-w} - phi(k_t)^T v_t`, as printed.
    pub residual_leaving_minus_entering: f64,
    /// `Delta_t = phi(k_t)^T v_t - phi(k_{t-w})^T v_{t-w}`, the negated
    /// convention.
    pub residual_entering_minus_leaving: f64,
}

impl GatedObjectiveCheck {
    pub fn verdict(&self, tol: f64) -> &'static str {
        match (
            self.residual_entering_minus_leaving <= tol,
            self.residual_leaving_minus_entering <= tol,
        ) {
            (true, true) => "both",
            (true, false) => "entering-minus-leaving",
            (false, true) => "leaving-minus-entering",
            (false, false) => "neither",
        }
    }
}

/// Reconstructs the gated memory step from the objective
/// `L(M) = 1/2 ||sqrt(1 - exp(-alpha_t)) M||_F^2 - (1/w) <M, c Delta_t +
/// (1 - c) phi(k_t)^T v_t>` and returns the residual against the
/// definition-built `M_t` for both `Delta_t` sign conventions. The
/// coefficient `c` is the exact leaving decay `exp(-alpha_t) c_t`, the
/// candidate validated by [`recurrence_residual_gated`].
pub fn objective_residual_gated(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    gates: &[f64],
    fm: &FeatureMap,
    t: usize,
    w: usize,
) -> Result<GatedObjectiveCheck> {
    if t <= w {
        return Err(Error::shape("objective_residual_gated", "need t > w"));
    }
    let m_t = gated_memory(keys, values, gates, fm, t, w)?.matrix;
    let m_prev = gated_memory(keys, values, gates, fm, t - 1, w)?.matrix;
    let alpha_t = gates[t - 1];
    let c_exact: f64 = (-alpha_t).exp()
        * gates[(t - w)..(t - 1)]
            .iter()
            .map(|a| (-a).exp())
            .product::<f64>();

    let entering = fm.phi(&keys[t - 1])?;
    let leaving = fm.phi(&keys[t - w - 1])?;

    let residual = |delta_sign: f64| -> Result<f64> {
        // M_{t-1} - grad L = exp(-alpha_t) M_{t-1} + (1/w)(c Delta + (1-c) phi_t^T v_t)
        let mut step = m_prev.scale((-alpha_t).exp())?;
        // c * Delta with Delta = sign * (leaving - entering outer products)
        add_outer(
            &mut step,
            delta_sign * c_exact / w as f64,
            &leaving,
            &values[t - w - 1],
        );
        add_outer(
            &mut step,
            -delta_sign * c_exact / w as f64,
            &entering,
            &values[t - 1],
        );
        add_outer(
            &mut step,
            (1.0 - c_exact) / w as f64,
            &entering,
            &values[t - 1],
        );
        Ok(step.sub(&m_t)?.frobenius_norm())
    };

    Ok(GatedObjectiveCheck {
        residual_leaving_minus_entering: residual(1.0)?,
        residual_entering_minus_leaving: residual(-1.0)?,
    })
}

/// Norm-shrink coefficient of the gated objective, `1 - exp(-alpha)`;
/// strictly inside `(0, 1)` for every positive gate.
pub fn contraction_coefficient(alpha: f64) -> f64 {
    1.0 - (-alpha).exp()
}

/// Analytic sensitivity of `M_t` to `M_p`: the product
/// `prod_{i=p+1..t} exp(-alpha_i)` of per-step decays.
pub fn decay_chain_product(gates: &[f64], p: usize, t: usize) -> Result<f64> {
    if p >= t || t > gates.len() {
        return Err(Error::shape("decay_chain_product", "need p < t <= len"));
    }
    Ok(gates[p..t].iter().map(|a| (-a).exp()).product())
}

/// Numerically probes the same sensitivity: perturbs the memory at time `p`
/// along a random direction, rolls the gated recurrence forward to `t`, and
/// measures the response. Returns `(analytic, measured)`.
#[allow(clippy::too_many_arguments)]
pub fn decay_chain_jacobian_probe(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    gates: &[f64],
    fm: &FeatureMap,
    w: usize,
    p: usize,
    t: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if p < w || p >= t || t > keys.len() {
        return Err(Error::shape(
            "decay_chain_jacobian_probe",
            "need w <= p < t <= len",
        ));
    }
    let analytic = decay_chain_product(gates, p, t)?;

    let roll = |start: &Matrix| -> Result<Matrix> {
        let mut m = start.clone();
        for i in (p + 1)..=t {
            // Exact recurrence: decay the carried state, add the entering
            // term, retire the leaving term with the full-window decay.
            let alpha = gates[i - 1];
            m = m.scale((-alpha).exp())?;
            add_outer(&mut m, 1.0 / w as f64, &fm.phi(&keys[i - 1])?, &values[i - 1]);
            let full_decay: f64 = gates[(i - w)..i].iter().map(|a| (-a).exp()).product();
            add_outer(
                &mut m,
                -full_decay / w as f64,
                &fm.phi(&keys[i - w - 1])?,
                &values[i - w - 1],
            );
        }
        Ok(m)
    };

    let base = gated_memory(keys, values, gates, fm, p, w)?.matrix;
    let mut rng = Rng::new(seed);
    let direction = rng.normal_matrix(base.rows(), base.cols());
    let dir_norm_sq = direction.frobenius_norm().powi(2);
    let h = 1e-3;

    let unperturbed = roll(&base)?;
    let perturbed = roll(&base.add(&direction.scale(h)?)?)?;
    let delta = perturbed.sub(&unperturbed)?;
    // The recurrence is affine in the state, so delta = measured * h * dir.
    let measured = delta
        .data()
        .iter()
        .zip(direction.data())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / (h * dir_norm_sq);
    Ok((analytic, measured))
}
