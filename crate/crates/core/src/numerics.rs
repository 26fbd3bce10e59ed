//! Vector math and the special functions the estimators rely on.
//!
//! Everything here is a pure function over `f64` slices. Features travel
//! through the crate as [`UnitVector`]s so that cosine similarity reduces to a
//! dot product wherever both sides are already normalized.

use std::f64::consts::PI;
use std::ops::Deref;

use crate::error::{check_dim, PrismError, Result};

/// Zero-norm guard for normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Allowed deviation of a [`UnitVector`]'s norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Below `max(SERIES_CROSSOVER, order)` the power series is used for
/// `ln I_order(x)`; at or above it, an asymptotic expansion.
pub const SERIES_CROSSOVER: f64 = 20.0;

/// An L2-normalized feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wraps `values` after checking that the norm is within [`UNIT_NORM_TOL`] of 1.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(PrismError::domain("unit vectors need at least 2 components"));
        }
        let n = norm(&values);
        if (n - 1.0).abs() > UNIT_NORM_TOL || !n.is_finite() {
            return Err(PrismError::domain(format!("vector norm {n} is not 1")));
        }
        Ok(Self(values))
    }

    /// Normalizes `values` onto the sphere.
    pub fn normalize(values: &[f64]) -> Result<Self> {
        l2_normalize(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Dot product, which equals cosine similarity between unit vectors.
    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl Deref for UnitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A finite real held on the natural-log scale.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogReal(f64);

impl LogReal {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() {
            Ok(Self(value))
        } else {
            Err(PrismError::domain(format!("log value {value} is not finite")))
        }
    }

    pub fn ln(self) -> f64 {
        self.0
    }

    pub fn exp(self) -> f64 {
        self.0.exp()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na <= 0.0 || nb <= 0.0 {
        return Err(PrismError::domain("cosine similarity of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn l2_normalize(v: &[f64]) -> Result<UnitVector> {
    let n = norm(v);
    if n <= NORM_EPS || !n.is_finite() {
        return Err(PrismError::degenerate(format!("cannot normalize vector of norm {n}")));
    }
    if v.len() < 2 {
        return Err(PrismError::domain("unit vectors need at least 2 components"));
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

/// `ln Σ exp(x_i)` with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    let max = xs
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or_else(|| PrismError::domain("log_sum_exp of an empty list"))?;
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(PrismError::domain("softmax of an empty list"));
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `softmax(xs)[index]` without materializing the whole vector.
pub fn softmax_at(xs: &[f64], index: usize) -> Result<f64> {
    if index >= xs.len() {
        return Err(PrismError::domain("softmax index out of range"));
    }
    let lse = log_sum_exp(xs)?;
    Ok((xs[index] - lse).exp())
}

/// `ln I_order(x)` for the modified Bessel function of the first kind.
///
/// The power series is summed in log space for `x < max(SERIES_CROSSOVER, order)`.
/// Beyond that, the Hankel large-argument expansion is used while
/// `4 order² + 1 ≤ x` and Debye's uniform expansion (terms `u_0..u_6`)
/// otherwise. Both asymptotic branches agree with the series to better than
/// 1e-8 at the crossover for every order this crate needs.
pub fn log_bessel_i(order: f64, x: f64) -> Result<f64> {
    if order < 0.0 || !order.is_finite() {
        return Err(PrismError::domain(format!("Bessel order {order} must be >= 0")));
    }
    if x < 0.0 || !x.is_finite() {
        return Err(PrismError::domain(format!("Bessel argument {x} must be finite and >= 0")));
    }
    if x == 0.0 {
        return if order == 0.0 {
            Ok(0.0)
        } else {
            Err(PrismError::domain("ln I_order(0) is -inf for order > 0"))
        };
    }
    if x < SERIES_CROSSOVER.max(order) {
        Ok(log_bessel_i_series(order, x))
    } else {
        Ok(log_bessel_i_asymptotic(order, x))
    }
}

/// Log-space power series `Σ (x/2)^(2m+ν) / (m! Γ(m+ν+1))`. Valid for all
/// `x > 0` but costs `O(x)` terms.
pub fn log_bessel_i_series(order: f64, x: f64) -> f64 {
    let log_half_x = (0.5 * x).ln();
    let mut log_term = order * log_half_x - libm::lgamma(order + 1.0);
    let mut acc = log_term;
    let mut m = 0.0_f64;
    loop {
        m += 1.0;
        log_term += 2.0 * log_half_x - m.ln() - (m + order).ln();
        acc = if log_term > acc {
            log_term + (acc - log_term).exp().ln_1p()
        } else {
            acc + (log_term - acc).exp().ln_1p()
        };
        // Past the peak once m(m + ν) > (x/2)²; terms then fall geometrically.
        if m * (m + order) > 0.25 * x * x && log_term - acc < -40.0 {
            return acc;
        }
    }
}

/// Asymptotic branch of [`log_bessel_i`], without the crossover test.
pub fn log_bessel_i_asymptotic(order: f64, x: f64) -> f64 {
    if 4.0 * order * order + 1.0 <= x || order == 0.0 {
        log_bessel_i_hankel(order, x)
    } else {
        log_bessel_i_debye(order, x)
    }
}

fn log_bessel_i_hankel(order: f64, x: f64) -> f64 {
    let mu = 4.0 * order * order;
    let mut term = 1.0_f64;
    let mut total = 1.0_f64;
    for k in 1..60 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = -term * (mu - odd * odd) / (kf * 8.0 * x);
        // Asymptotic series: stop at the smallest term.
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        total += term;
        if term.abs() < 1e-17 * total.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * PI * x).ln() + total.ln()
}

// u_k(t) = t^k · P_k(t²); coefficients of P_k in ascending powers of t², and
// the common denominator.
const DEBYE_U: [(&[f64], f64); 6] = [
    (&[3.0, -5.0], 24.0),
    (&[81.0, -462.0, 385.0], 1152.0),
    (&[30375.0, -369603.0, 765765.0, -425425.0], 414720.0),
    (
        &[4465125.0, -94121676.0, 349922430.0, -446185740.0, 185910725.0],
        39813120.0,
    ),
    (
        &[
            1519035525.0,
            -49286948607.0,
            284499769554.0,
            -614135872350.0,
            566098157625.0,
            -188699385875.0,
        ],
        6688604160.0,
    ),
    (
        &[
            2757049477875.0,
            -127577298354750.0,
            1050760774457901.0,
            -3369032068261860.0,
            5104696716244125.0,
            -3685299006138750.0,
            1023694168371875.0,
        ],
        4815794995200.0,
    ),
];

fn log_bessel_i_debye(order: f64, x: f64) -> f64 {
    let z = x / order;
    let s = (1.0 + z * z).sqrt();
    let t = 1.0 / s;
    let eta = s + (z / (1.0 + s)).ln();
    let t2 = t * t;
    let mut total = 1.0;
    let mut tk = 1.0;
    let mut nuk = 1.0;
    for (coeffs, denom) in DEBYE_U {
        tk *= t;
        nuk *= order;
        let p = coeffs.iter().rev().fold(0.0, |acc, c| acc * t2 + c);
        total += tk * p / denom / nuk;
    }
    order * eta - 0.5 * (2.0 * PI * order).ln() - 0.5 * s.ln() + total.ln()
}

/// `ln Γ(x)` for positive `x`.
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_relative_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_relative_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_relative_eq!(
            cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-8
        );
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_sim(&[1.0, 0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let u = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_relative_eq!(u[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(u[1], 0.8, epsilon = 1e-15);
        let again = l2_normalize(&u).unwrap();
        assert_eq!(again.as_slice(), u.as_slice());
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(PrismError::Degenerate(_))));
        assert!(l2_normalize(&[1e-13, 0.0]).is_err());
    }

    #[test]
    fn unit_vector_rejects_off_sphere() {
        assert!(UnitVector::new(vec![1.0, 1.0]).is_err());
        assert!(UnitVector::new(vec![1.0]).is_err());
        assert!(UnitVector::new(vec![0.6, 0.8]).is_ok());
    }

    #[test]
    fn log_sum_exp_examples() {
        assert_relative_eq!(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(
            log_sum_exp(&[1000.0, 1000.0]).unwrap(),
            1000.0 + 2f64.ln(),
            epsilon = 1e-12
        );
        assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert_relative_eq!(p[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.75, epsilon = 1e-15);
        assert_eq!(softmax(&[42.0]).unwrap(), vec![1.0]);
        assert!(softmax(&[]).is_err());
        assert_relative_eq!(softmax_at(&[1.0, -1.0], 0).unwrap(), 0.8807970779778823);
    }

    fn bessel_i0_direct_series(x: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for m in 1..200 {
            let mf = m as f64;
            term *= (0.5 * x) * (0.5 * x) / (mf * mf);
            sum += term;
        }
        sum
    }

    #[test]
    fn log_bessel_order_zero_at_one() {
        let oracle = bessel_i0_direct_series(1.0).ln();
        assert_relative_eq!(oracle, 0.2359143585071786, epsilon = 1e-12);
        assert_relative_eq!(log_bessel_i(0.0, 1.0).unwrap(), oracle, epsilon = 1e-13);
    }

    #[test]
    fn log_bessel_half_integer_closed_form() {
        for x in [0.5, 2.0, 20.0, 75.0] {
            let closed = (2.0 / (PI * x)).sqrt().ln() + x.sinh().ln();
            assert_relative_eq!(log_bessel_i(0.5, x).unwrap(), closed, max_relative = 1e-10);
        }
    }

    #[test]
    fn log_bessel_branches_agree_at_crossover_and_beyond() {
        let a = log_bessel_i_series(63.0, 537.0);
        let b = log_bessel_i_asymptotic(63.0, 537.0);
        assert!(a.is_finite() && b.is_finite());
        assert_relative_eq!(a, b, max_relative = 1e-8);
        for order in [0.0, 0.5, 1.0, 3.0, 7.0, 15.0, 20.0, 31.0, 63.0, 100.0] {
            let x = SERIES_CROSSOVER.max(order);
            let s = log_bessel_i_series(order, x);
            let t = log_bessel_i_asymptotic(order, x);
            assert_relative_eq!(s, t, max_relative = 1e-8);
        }
    }

    #[test]
    fn log_bessel_rejects_negative_argument() {
        assert!(log_bessel_i(1.0, -1.0).is_err());
        assert!(log_bessel_i(-1.0, 1.0).is_err());
        assert_eq!(log_bessel_i(0.0, 0.0).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in prop::collection::vec(-5.0..5.0f64, 4),
                               b in prop::collection::vec(-5.0..5.0f64, 4)) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            prop_assert_eq!(cosine_sim(&a, &b).unwrap(), cosine_sim(&b, &a).unwrap());
            let u = l2_normalize(&a).unwrap();
            prop_assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-10.0..10.0f64, 2..20)) {
            prop_assume!(norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            let w = l2_normalize(&u).unwrap();
            for (x, y) in u.iter().zip(w.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn log_sum_exp_matches_naive(xs in prop::collection::vec(-50.0..50.0f64, 1..30)) {
            let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
            let lse = log_sum_exp(&xs).unwrap();
            prop_assert!((lse - naive).abs() <= 1e-10 * naive.abs().max(1.0));
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in prop::collection::vec(-30.0..30.0f64, 1..30),
            c in -100.0..100.0f64,
        ) {
            let p = softmax(&xs).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn log_bessel_satisfies_recurrence(order in 1.0..64.0f64, x in 1.0..100.0f64) {
            // I_{ν-1} - I_{ν+1} = (2ν/x) I_ν, divided through by I_ν.
            let l = log_bessel_i(order, x).unwrap();
            let lm = log_bessel_i(order - 1.0, x).unwrap();
            let lp = log_bessel_i(order + 1.0, x).unwrap();
            let lhs = (lm - l).exp() - (lp - l).exp();
            let rhs = 2.0 * order / x;
            prop_assert!(((lhs - rhs) / rhs).abs() < 1e-6, "lhs={lhs} rhs={rhs}");
        }
    }
}
