//! Real polynomials in the actuator displacement.

use serde::{Deserialize, Serialize};

/// Polynomial `c0 + c1*y + c2*y^2 + ...`, constant term first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolynomialFn {
    coeffs: Vec<f64>,
}

impl PolynomialFn {
    /// Returns `None` when the coefficient list is empty or contains a
    /// non-finite value.
    pub fn new(coeffs: Vec<f64>) -> Option<Self> {
        if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
            return None;
        }
        Some(Self { coeffs })
    }

    pub fn constant(c: f64) -> Self {
        Self { coeffs: vec![c] }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn is_valid(&self) -> bool {
        !self.coeffs.is_empty() && self.coeffs.iter().all(|c| c.is_finite())
    }

    /// True when every coefficient past the constant term is zero.
    pub fn is_constant(&self) -> bool {
        self.coeffs.iter().skip(1).all(|&c| c == 0.0)
    }

    pub fn degree(&self) -> usize {
        self.coeffs
            .iter()
            .rposition(|&c| c != 0.0)
            .unwrap_or(0)
    }

    pub fn eval(&self, y: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * y + c)
    }

    pub fn derivative(&self) -> PolynomialFn {
        if self.coeffs.len() <= 1 {
            return PolynomialFn::constant(0.0);
        }
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, &c)| j as f64 * c)
            .collect();
        PolynomialFn { coeffs }
    }

    pub fn scaled(&self, factor: f64) -> PolynomialFn {
        PolynomialFn {
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    /// Smallest and largest value over `n` uniformly spaced samples of `[lo, hi]`.
    pub fn sampled_range(&self, lo: f64, hi: f64, n: usize) -> (f64, f64) {
        let n = n.max(2);
        (0..n)
            .map(|k| self.eval(lo + (hi - lo) * k as f64 / (n - 1) as f64))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), v| {
                (mn.min(v), mx.max(v))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(coeffs: &[f64], y: f64) -> f64 {
        coeffs
            .iter()
            .enumerate()
            .map(|(j, c)| c * y.powi(j as i32))
            .sum()
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(PolynomialFn::new(vec![]).is_none());
        assert!(PolynomialFn::new(vec![1.0, f64::NAN]).is_none());
        assert!(PolynomialFn::new(vec![0.0]).is_some());
    }

    #[test]
    fn horner_matches_power_sum() {
        let c = vec![0.3, -0.04, 0.002, 1e-4, -3e-5];
        let p = PolynomialFn::new(c.clone()).unwrap();
        for k in 0..50 {
            let y = -2.0 + 0.17 * k as f64;
            assert!((p.eval(y) - naive(&c, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_of_cubic() {
        let p = PolynomialFn::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.derivative().coeffs(), &[2.0, 6.0, 12.0]);
        assert_eq!(PolynomialFn::constant(5.0).derivative().eval(3.0), 0.0);
    }

    #[test]
    fn degree_ignores_trailing_zeros() {
        let p = PolynomialFn::new(vec![1.0, 2.0, 0.0]).unwrap();
        assert_eq!(p.degree(), 1);
        assert!(PolynomialFn::new(vec![4.0, 0.0]).unwrap().is_constant());
    }
}
