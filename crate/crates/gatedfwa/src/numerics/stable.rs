//! Numerically safe scalar activations.

/// Overflow-safe softplus: `nu + ln(exp(z - nu) + exp(-nu))` with `nu = max(z, 0)`.
///
/// Monotone and strictly positive on finite inputs; saturates to `z` for
/// large `z` and to `exp(z)` for very negative `z`. The shifted logarithm is
/// evaluated through `ln_1p` so the negative tail keeps full precision
/// instead of collapsing to zero near `z = -36`.
pub fn softplus_safe(z: f64) -> f64 {
    if z >= 0.0 {
        // nu = z: z + ln(1 + exp(-z))
        z + (-z).exp().ln_1p()
    } else {
        // nu = 0: ln(1 + exp(z))
        z.exp().ln_1p()
    }
}

/// Logistic function, evaluated on the side that avoids `exp` overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `elu(z) = z` for `z >= 0`, else `exp(z) - 1`.
pub fn elu(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        z.exp() - 1.0
    }
}

/// Derivative of [`elu`].
pub fn elu_prime(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        z.exp()
    }
}

/// `swish(z) = z * sigmoid(z)`.
pub fn swish(z: f64) -> f64 {
    z * sigmoid(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softplus_at_zero_is_ln_two() {
        assert!((softplus_safe(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_saturates_without_overflow() {
        let v = softplus_safe(100.0);
        assert!(v.is_finite());
        assert!((v - (100.0 + (1.0 + (-100.0f64).exp()).ln())).abs() < 1e-12);
        assert!((v - 100.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_tail_keeps_precision() {
        // softplus(-50) = ln(1 + e^-50); high-precision value via ln_1p.
        let want = (-50.0f64).exp().ln_1p();
        let got = softplus_safe(-50.0);
        assert!(got > 0.0);
        assert!(((got - want) / want).abs() < 1e-12);
    }

    #[test]
    fn elu_and_swish_at_zero() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(1.0 + elu(0.0), 1.0);
        assert_eq!(swish(0.0), 0.0);
    }

    proptest! {
        // softplus(z) - softplus(-z) == z is exact in real arithmetic.
        #[test]
        fn softplus_identity(z in -60.0f64..60.0) {
            let lhs = softplus_safe(z) - softplus_safe(-z);
            prop_assert!((lhs - z).abs() < 1e-12);
        }

        #[test]
        fn softplus_monotone_positive(a in -40.0f64..40.0, d in 1e-6f64..5.0) {
            prop_assert!(softplus_safe(a) > 0.0);
            prop_assert!(softplus_safe(a + d) > softplus_safe(a));
        }
    }
}
