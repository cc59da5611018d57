//! Quasi-LPV model of the biased dielectric elastomer actuator.
//!
//! The plant is `x' = A(y) x + B_f f + B_u(y) u`, `y = x1`, with state
//! `[displacement, velocity, viscoelastic strain]`. Units are mm, N, s and
//! kV; the input `u` is the squared electrode voltage in kV², the mass is
//! stored in N·s²/mm. Compressive external forces are positive.

use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::PolynomialFn;

/// Number of uniformly spaced scan points used to bracket roots.
pub const SCAN_POINTS: usize = 400;
/// Bisection tolerance, in the unit of the bracketed variable.
pub const ROOT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("y = {y} mm is outside the model bounds [{lo}, {hi}]")]
    OutOfRange { y: f64, lo: f64, hi: f64 },
    #[error("u = {u} kV² is outside the admissible range [0, {u_max}]")]
    InputOutOfRange { u: f64, u_max: f64 },
    #[error("target infeasible: required u = {u} kV² is outside [0, {u_max}]")]
    InfeasibleTarget { u: f64, u_max: f64 },
    #[error("invalid plant model: {0}")]
    Invalid(String),
}

/// Evaluated plant matrices at a frozen output value.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantMatrices {
    pub a: Matrix3<f64>,
    pub b_f: Vector3<f64>,
    pub b_u: Vector3<f64>,
    pub c: RowVector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
}

impl PlantState {
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x1, self.x2, self.x3)
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite() && self.x3.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub y_eq: f64,
    pub x3_eq: f64,
    /// Classification from the full Jacobian about the equilibrium.
    pub stability: Stability,
    /// Classification from the frozen `A(y_eq)` only, kept for diagnostics.
    pub frozen_stability: Stability,
    /// `|f_char(y_eq, u) - f_ext|` in N.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPlant", into = "RawPlant")]
pub struct PlantModel {
    a21: PolynomialFn,
    a22: PolynomialFn,
    a23: PolynomialFn,
    a31: PolynomialFn,
    b21: PolynomialFn,
    a33: f64,
    m: f64,
    y_min: f64,
    y_max: f64,
    u_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPlant {
    a21: Vec<f64>,
    a22: Vec<f64>,
    a23: Vec<f64>,
    a31: Vec<f64>,
    b21: Vec<f64>,
    a33: f64,
    m: f64,
    y_min: f64,
    y_max: f64,
    u_max: f64,
}

impl TryFrom<RawPlant> for PlantModel {
    type Error = PlantError;

    fn try_from(raw: RawPlant) -> Result<Self, Self::Error> {
        let poly = |name: &str, c: Vec<f64>| {
            PolynomialFn::new(c).ok_or_else(|| {
                PlantError::Invalid(format!("{name}: coefficients must be non-empty and finite"))
            })
        };
        PlantModel::new(
            poly("a21", raw.a21)?,
            poly("a22", raw.a22)?,
            poly("a23", raw.a23)?,
            poly("a31", raw.a31)?,
            poly("b21", raw.b21)?,
            raw.a33,
            raw.m,
            (raw.y_min, raw.y_max),
            raw.u_max,
        )
    }
}

impl From<PlantModel> for RawPlant {
    fn from(p: PlantModel) -> Self {
        RawPlant {
            a21: p.a21.coeffs().to_vec(),
            a22: p.a22.coeffs().to_vec(),
            a23: p.a23.coeffs().to_vec(),
            a31: p.a31.coeffs().to_vec(),
            b21: p.b21.coeffs().to_vec(),
            a33: p.a33,
            m: p.m,
            y_min: p.y_min,
            y_max: p.y_max,
            u_max: p.u_max,
        }
    }
}

impl PlantModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a21: PolynomialFn,
        a22: PolynomialFn,
        a23: PolynomialFn,
        a31: PolynomialFn,
        b21: PolynomialFn,
        a33: f64,
        m: f64,
        (y_min, y_max): (f64, f64),
        u_max: f64,
    ) -> Result<Self, PlantError> {
        let model = Self {
            a21,
            a22,
            a23,
            a31,
            b21,
            a33,
            m,
            y_min,
            y_max,
            u_max,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), PlantError> {
        let invalid = |msg: &str| Err(PlantError::Invalid(msg.to_string()));
        for p in [&self.a21, &self.a22, &self.a23, &self.a31, &self.b21] {
            if !p.is_valid() {
                return invalid("polynomial coefficients must be non-empty and finite");
            }
        }
        if !(self.m.is_finite() && self.m > 0.0) {
            return invalid("mass must be positive");
        }
        if !(self.a33.is_finite() && self.a33 < 0.0) {
            return invalid("a33 must be negative (stable viscoelastic relaxation)");
        }
        if !(self.u_max.is_finite() && self.u_max > 0.0) {
            return invalid("u_max must be positive");
        }
        if !(self.y_min.is_finite() && self.y_max.is_finite() && self.y_min < self.y_max) {
            return invalid("y bounds must satisfy y_min < y_max");
        }
        let (lo, hi) = self.b21.sampled_range(self.y_min, self.y_max, SCAN_POINTS);
        if !(lo > 0.0 || hi < 0.0) {
            return invalid("b21(y) must not vanish or change sign inside the bounds");
        }
        for p in [&self.a21, &self.a22, &self.a23, &self.a31, &self.b21] {
            let (lo, hi) = p.sampled_range(self.y_min, self.y_max, SCAN_POINTS);
            if !(lo.is_finite() && hi.is_finite()) {
                return invalid("polynomial evaluates to a non-finite value inside the bounds");
            }
        }
        Ok(())
    }

    /// Synthetic stand-in for the identified actuator: bi-stable biasing makes
    /// the zero-voltage characteristic non-monotonic on [0, 5] mm (negative
    /// stiffness between 1.5 and 3.5 mm), the viscoelastic state relaxes at
    /// 0.5 s⁻¹ and the electrostatic authority `m·b21·u_max` grows from 0.5 N
    /// to 0.6 N across the stroke. These are not identified coefficients.
    pub fn synthetic_default() -> Self {
        let m = 2.05e-6;
        // zero-voltage long-term force y·(-0.1575 + 0.075 y - 0.01 y²) N,
        // of which 0.02 N/mm is carried by the relaxing viscoelastic branch
        let relaxing = 0.02;
        let a21 = vec![(-0.1575 - relaxing) / m, 0.075 / m, -0.01 / m];
        let a23 = relaxing / m;
        let authority = 0.5 / (m * 6.25);
        Self::new(
            PolynomialFn::new(a21).expect("finite"),
            PolynomialFn::new(vec![-150.0, -8.0]).expect("finite"),
            PolynomialFn::constant(a23),
            PolynomialFn::constant(0.5),
            PolynomialFn::new(vec![authority, 0.04 * authority]).expect("finite"),
            -0.5,
            m,
            (0.0, 5.0),
            6.25,
        )
        .expect("synthetic default plant is valid")
    }

    /// Constant-coefficient plant used as a small, well-understood fixture.
    pub fn constant_coefficients() -> Self {
        Self::new(
            PolynomialFn::constant(-1000.0),
            PolynomialFn::constant(-10.0),
            PolynomialFn::constant(100.0),
            PolynomialFn::constant(1.0),
            PolynomialFn::constant(50.0),
            -0.5,
            2.05e-6,
            (0.0, 5.0),
            6.25,
        )
        .expect("constant plant is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, PlantError> {
        serde_json::from_str(text).map_err(|e| PlantError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plant serializes")
    }

    pub fn a21(&self) -> &PolynomialFn {
        &self.a21
    }
    pub fn a22(&self) -> &PolynomialFn {
        &self.a22
    }
    pub fn a23(&self) -> &PolynomialFn {
        &self.a23
    }
    pub fn a31(&self) -> &PolynomialFn {
        &self.a31
    }
    pub fn b21(&self) -> &PolynomialFn {
        &self.b21
    }
    pub fn a33(&self) -> f64 {
        self.a33
    }
    pub fn mass(&self) -> f64 {
        self.m
    }
    pub fn y_bounds(&self) -> (f64, f64) {
        (self.y_min, self.y_max)
    }
    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn stroke(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.y_min && y <= self.y_max
    }

    fn check_y(&self, y: f64) -> Result<(), PlantError> {
        if self.contains(y) {
            Ok(())
        } else {
            Err(PlantError::OutOfRange {
                y,
                lo: self.y_min,
                hi: self.y_max,
            })
        }
    }

    pub fn eval_matrices(&self, y: f64) -> Result<PlantMatrices, PlantError> {
        self.check_y(y)?;
        Ok(self.eval_matrices_unchecked(y))
    }

    /// Evaluation without the bounds check; simulation uses this so that a
    /// transient excursion past the modelled range does not abort a run.
    pub fn eval_matrices_unchecked(&self, y: f64) -> PlantMatrices {
        #[rustfmt::skip]
        let a = Matrix3::new(
            0.0,               1.0,               0.0,
            self.a21.eval(y),  self.a22.eval(y),  self.a23.eval(y),
            self.a31.eval(y),  0.0,               self.a33,
        );
        PlantMatrices {
            a,
            b_f: Vector3::new(0.0, -1.0 / self.m, 0.0),
            b_u: Vector3::new(0.0, self.b21.eval(y), 0.0),
            c: RowVector3::new(1.0, 0.0, 0.0),
        }
    }

    /// Plant state derivative for frozen `f` and `u`.
    pub fn derivative(&self, x: &PlantState, f: f64, u: f64) -> PlantState {
        let y = x.x1;
        PlantState {
            x1: x.x2,
            x2: self.a21.eval(y) * y
                + self.a22.eval(y) * x.x2
                + self.a23.eval(y) * x.x3
                - f / self.m
                + self.b21.eval(y) * u,
            x3: self.a31.eval(y) * y + self.a33 * x.x3,
        }
    }

    /// Long-term stiffness coefficient `a21 - a23·a31/a33` (x3 relaxed).
    fn relaxed_a21(&self, y: f64) -> f64 {
        self.a21.eval(y) - self.a23.eval(y) * self.a31.eval(y) / self.a33
    }

    /// Relaxed viscoelastic state consistent with a static displacement.
    pub fn relaxed_x3(&self, y: f64) -> f64 {
        -self.a31.eval(y) * y / self.a33
    }

    /// External force that holds the actuator at rest at `y` under input `u`.
    pub fn static_characteristic(&self, y: f64, u: f64) -> Result<f64, PlantError> {
        self.check_y(y)?;
        if !(0.0..=self.u_max).contains(&u) {
            return Err(PlantError::InputOutOfRange {
                u,
                u_max: self.u_max,
            });
        }
        Ok(self.static_force(y, u))
    }

    fn static_force(&self, y: f64, u: f64) -> f64 {
        self.m * (self.relaxed_a21(y) * y + self.b21.eval(y) * u)
    }

    /// Jacobian of the nonlinear dynamics about a rest point `(y, 0, x3)`.
    pub fn jacobian(&self, y: f64, x3: f64, u: f64) -> Matrix3<f64> {
        let d = |p: &PolynomialFn| p.derivative().eval(y);
        let j21 = d(&self.a21) * y + self.a21.eval(y) + d(&self.a23) * x3 + d(&self.b21) * u;
        let j31 = d(&self.a31) * y + self.a31.eval(y);
        #[rustfmt::skip]
        let j = Matrix3::new(
            0.0,  1.0,               0.0,
            j21,  self.a22.eval(y),  self.a23.eval(y),
            j31,  0.0,               self.a33,
        );
        j
    }

    /// All rest points with external force `f_ext` under constant `u`.
    pub fn find_equilibria(&self, u: f64, f_ext: f64) -> Result<Vec<Equilibrium>, PlantError> {
        if !(0.0..=self.u_max).contains(&u) {
            return Err(PlantError::InputOutOfRange {
                u,
                u_max: self.u_max,
            });
        }
        let g = |y: f64| self.static_force(y, u) - f_ext;
        let roots = scan_roots(g, self.y_min, self.y_max, SCAN_POINTS, ROOT_TOL);
        Ok(roots
            .into_iter()
            .map(|y_eq| {
                let x3_eq = self.relaxed_x3(y_eq);
                let full = self.jacobian(y_eq, x3_eq, u);
                let frozen = self.eval_matrices_unchecked(y_eq).a;
                Equilibrium {
                    y_eq,
                    x3_eq,
                    stability: classify(&full),
                    frozen_stability: classify(&frozen),
                    residual: g(y_eq).abs(),
                }
            })
            .collect())
    }

    /// Input that places a rest point at `y_target` under external force `f_ext`.
    pub fn voltage_for_target(&self, y_target: f64, f_ext: f64) -> Result<f64, PlantError> {
        self.check_y(y_target)?;
        // f_char is affine in u at fixed y
        let u = (f_ext / self.m - self.relaxed_a21(y_target) * y_target)
            / self.b21.eval(y_target);
        let slack = 1e-12 * self.u_max;
        if u < -slack || u > self.u_max + slack {
            return Err(PlantError::InfeasibleTarget {
                u,
                u_max: self.u_max,
            });
        }
        Ok(u.clamp(0.0, self.u_max))
    }
}

pub fn classify(a: &Matrix3<f64>) -> Stability {
    if a.complex_eigenvalues().iter().all(|l| l.re < 0.0) {
        Stability::Stable
    } else {
        Stability::Unstable
    }
}

/// Roots of `g` on `[lo, hi]`: sign changes over a uniform scan, each refined by
/// bisection. Exact zeros at scan points are reported once.
pub fn scan_roots<F: Fn(f64) -> f64>(g: F, lo: f64, hi: f64, n: usize, tol: f64) -> Vec<f64> {
    let n = n.max(2);
    let ys: Vec<f64> = (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
        .collect();
    let vals: Vec<f64> = ys.iter().map(|&y| g(y)).collect();
    let mut roots = Vec::new();
    for k in 0..n {
        if vals[k] == 0.0 {
            roots.push(ys[k]);
            continue;
        }
        if k + 1 < n && vals[k + 1] != 0.0 && vals[k].signum() != vals[k + 1].signum() {
            roots.push(bisect(&g, ys[k], ys[k + 1], vals[k], tol));
        }
    }
    roots
}

fn bisect<F: Fn(f64) -> f64>(g: &F, mut a: f64, mut b: f64, mut ga: f64, tol: f64) -> f64 {
    while b - a > tol {
        let mid = 0.5 * (a + b);
        let gm = g(mid);
        if gm == 0.0 {
            return mid;
        }
        if gm.signum() == ga.signum() {
            a = mid;
            ga = gm;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Equilibrium oracle: solve x2' = 0 and x3' = 0 for (f, x3) directly from
    /// the state derivative, without going through `static_characteristic`.
    fn equilibrium_force(p: &PlantModel, y: f64, u: f64) -> f64 {
        let x3 = -p.a31().eval(y) * y / p.a33();
        let zero_force = p.derivative(&PlantState { x1: y, x2: 0.0, x3 }, 0.0, u);
        assert!(zero_force.x3.abs() < 1e-9);
        // x2' is affine in f with slope -1/m
        zero_force.x2 * p.mass()
    }

    #[test]
    fn constant_plant_matrices() {
        let p = PlantModel::constant_coefficients();
        let m = p.eval_matrices(2.0).unwrap();
        #[rustfmt::skip]
        let a = Matrix3::new(
            0.0, 1.0, 0.0,
            -1000.0, -10.0, 100.0,
            1.0, 0.0, -0.5,
        );
        assert_eq!(m.a, a);
        assert_eq!(m.b_f, Vector3::new(0.0, -1.0 / 2.05e-6, 0.0));
        assert_eq!(m.b_u, Vector3::new(0.0, 50.0, 0.0));
        assert_eq!(m.c, RowVector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn out_of_range_is_error() {
        let p = PlantModel::synthetic_default();
        assert!(matches!(
            p.eval_matrices(5.1),
            Err(PlantError::OutOfRange { .. })
        ));
        assert!(p.eval_matrices(-1e-3).is_err());
    }

    #[test]
    fn synthetic_bounds_give_distinct_patterned_matrices() {
        let p = PlantModel::synthetic_default();
        let lo = p.eval_matrices(0.0).unwrap().a;
        let hi = p.eval_matrices(5.0).unwrap().a;
        assert_ne!(lo, hi);
        for (a, y) in [(lo, 0.0), (hi, 5.0)] {
            assert_eq!(a.row(0), RowVector3::new(0.0, 1.0, 0.0));
            assert_eq!(a[(2, 1)], 0.0);
            assert_eq!(a[(2, 2)], -0.5);
            let horner = |c: &[f64]| c.iter().rev().fold(0.0, |acc, &k| acc * y + k);
            assert_relative_eq!(a[(1, 0)], horner(p.a21().coeffs()), max_relative = 1e-14);
            assert_relative_eq!(a[(1, 1)], horner(p.a22().coeffs()), max_relative = 1e-14);
        }
    }

    #[test]
    fn origin_force_is_zero() {
        let p = PlantModel::synthetic_default();
        assert_eq!(p.static_characteristic(0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn constant_plant_characteristic_matches_oracle() {
        let p = PlantModel::constant_coefficients();
        let f = p.static_characteristic(1.0, 0.0).unwrap();
        assert_relative_eq!(f, equilibrium_force(&p, 1.0, 0.0), max_relative = 1e-12);
        assert_relative_eq!(f, 2.05e-6 * -800.0, max_relative = 1e-12);
    }

    #[test]
    fn synthetic_characteristic_matches_oracle_everywhere() {
        let p = PlantModel::synthetic_default();
        for k in 0..=50 {
            let y = 0.1 * k as f64;
            for u in [0.0, 3.0, 6.25] {
                let f = p.static_characteristic(y, u).unwrap();
                assert!((f - equilibrium_force(&p, y, u)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_zero_voltage_curve_is_non_monotonic() {
        let p = PlantModel::synthetic_default();
        let slope = |y: f64| {
            let h = 1e-5;
            p.static_characteristic((y + h).min(5.0), 0.0).unwrap()
                - p.static_characteristic((y - h).max(0.0), 0.0).unwrap()
        };
        let turns = scan_roots(slope, 0.01, 4.99, SCAN_POINTS, 1e-9);
        assert_eq!(turns.len(), 2, "turning points {turns:?}");
        assert!((turns[0] - 1.5).abs() < 1e-4 && (turns[1] - 3.5).abs() < 1e-4);
        // the full-voltage curve stays above the zero-voltage one
        for k in 0..=50 {
            let y = 0.1 * k as f64;
            let gap = p.static_characteristic(y, 6.25).unwrap()
                - p.static_characteristic(y, 0.0).unwrap();
            assert!(gap >= 0.5 - 1e-12);
        }
    }

    #[test]
    fn no_equilibrium_far_above_curve() {
        let p = PlantModel::synthetic_default();
        assert!(p.find_equilibria(0.0, 10.0).unwrap().is_empty());
    }

    #[test]
    fn three_equilibria_middle_unstable() {
        let p = PlantModel::synthetic_default();
        let f_ext = -0.08;
        let eq = p.find_equilibria(0.0, f_ext).unwrap();
        // dense-grid sign-change oracle
        let dense = (0..=100_000)
            .map(|k| 5.0 * k as f64 / 100_000.0)
            .map(|y| p.static_characteristic(y, 0.0).unwrap() - f_ext)
            .collect::<Vec<_>>();
        let changes = dense.windows(2).filter(|w| w[0].signum() != w[1].signum()).count();
        assert_eq!(changes, 3);
        assert_eq!(eq.len(), 3);
        assert_eq!(eq[0].stability, Stability::Stable);
        assert_eq!(eq[1].stability, Stability::Unstable);
        assert_eq!(eq[2].stability, Stability::Stable);
        for e in &eq {
            assert!(e.residual < 1e-9);
        }
    }

    #[test]
    fn monotonic_plant_has_single_stable_equilibrium() {
        let p = PlantModel::constant_coefficients();
        for f_ext in [-5e-3, -1e-3, 0.0, 1e-4] {
            let eq = p.find_equilibria(2.0, f_ext).unwrap();
            assert_eq!(eq.len(), 1, "f_ext = {f_ext}");
            assert_eq!(eq[0].stability, Stability::Stable);
        }
    }

    #[test]
    fn voltage_for_target_self_consistent() {
        let p = PlantModel::synthetic_default();
        let y = 2.2;
        let f0 = p.static_characteristic(y, 0.0).unwrap();
        let f1 = p.static_characteristic(y, p.u_max()).unwrap();
        assert_eq!(p.voltage_for_target(y, f0).unwrap(), 0.0);
        assert_relative_eq!(p.voltage_for_target(y, f1).unwrap(), p.u_max(), max_relative = 1e-12);
    }

    #[test]
    fn voltage_on_desired_line() {
        let p = PlantModel::synthetic_default();
        let (k_star, y0_star, f_ext) = (0.013, 2.9, 0.025);
        let y = y0_star - f_ext / k_star;
        let u = p.voltage_for_target(y, f_ext).unwrap();
        assert!(u > 0.0 && u < p.u_max());
        let residual = p.static_characteristic(y, u).unwrap() - f_ext;
        assert!(residual.abs() < 1e-9);
        // bisection oracle on u
        let u_bisect = scan_roots(
            |v| p.static_characteristic(y, v).unwrap() - f_ext,
            0.0,
            p.u_max(),
            SCAN_POINTS,
            1e-12,
        );
        assert_eq!(u_bisect.len(), 1);
        assert!((u_bisect[0] - u).abs() < 1e-9);
    }

    #[test]
    fn infeasible_target_reports_unclamped_input() {
        let p = PlantModel::synthetic_default();
        match p.voltage_for_target(2.0, 5.0) {
            Err(PlantError::InfeasibleTarget { u, .. }) => assert!(u > p.u_max()),
            other => panic!("expected infeasible target, got {other:?}"),
        }
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let p = PlantModel::synthetic_default();
        let back = PlantModel::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        let bad = p.to_json().replace("\"a33\": -0.5", "\"a33\": 0.5");
        assert!(matches!(PlantModel::from_json(&bad), Err(PlantError::Invalid(_))));
    }

    #[test]
    fn rejects_sign_changing_input_gain() {
        let r = PlantModel::new(
            PolynomialFn::constant(-1.0),
            PolynomialFn::constant(-1.0),
            PolynomialFn::constant(0.0),
            PolynomialFn::constant(0.0),
            PolynomialFn::new(vec![1.0, -1.0]).unwrap(),
            -0.5,
            1.0,
            (0.0, 2.0),
            1.0,
        );
        assert!(r.is_err());
    }
}
