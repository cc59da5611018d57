//! Desired force-to-displacement behaviour and the error shaping filter.
//!
//! A specification maps the external force `f` and the set-point `y0*` to an
//! ideal displacement `y*`, possibly through internal states `x_i` and a
//! scheduling parameter `p` (here always the measured displacement). Every
//! shipped constructor is normalised so that, at rest, `y* = y0* - f/k*`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::PolynomialFn;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImpedanceError {
    #[error("invalid stiffness profile: {0}")]
    InvalidProfile(String),
    #[error("invalid impedance specification: {0}")]
    InvalidSpec(String),
    #[error("invalid shaping filter: {0}")]
    InvalidFilter(String),
}

/// Stiffness profile `k*(y)` (N/mm) with its zero-force displacement `y0*` (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiffnessProfile {
    pub k_star: PolynomialFn,
    pub y0_star: f64,
}

impl StiffnessProfile {
    pub fn linear(k_star: f64, y0_star: f64) -> Self {
        Self {
            k_star: PolynomialFn::constant(k_star),
            y0_star,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    StaticLinear,
    StaticNonlinear,
    Msd,
}

/// Matrices of the desired behaviour evaluated at one scheduling point.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecMatrices {
    pub ai: DMatrix<f64>,
    pub bfi: DVector<f64>,
    pub by0i: DVector<f64>,
    pub ci: DMatrix<f64>,
    pub dfi: f64,
    pub dy0i: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImpedanceSpec {
    StaticLinear { k_star: f64 },
    StaticNonlinear { k_star: PolynomialFn },
    /// Mass-spring-damper with `m* = k*·tau²` and `b* = 2·delta·k*·tau`.
    Msd { k_star: f64, tau: f64, delta: f64 },
}

/// Static spec `y* = y0* - f/k*(y)`. A constant profile yields the linear kind.
/// `bounds` is the displacement interval over which `k*` must stay positive.
pub fn make_static_spec(
    profile: &StiffnessProfile,
    bounds: (f64, f64),
) -> Result<ImpedanceSpec, ImpedanceError> {
    let k = &profile.k_star;
    if !k.is_valid() || !profile.y0_star.is_finite() {
        return Err(ImpedanceError::InvalidProfile(
            "coefficients and y0* must be finite".into(),
        ));
    }
    let (lo, _) = k.sampled_range(bounds.0, bounds.1, crate::plant::SCAN_POINTS);
    if !(lo > 0.0) {
        return Err(ImpedanceError::InvalidProfile(format!(
            "k*(y) must be positive on [{}, {}], minimum found {lo}",
            bounds.0, bounds.1
        )));
    }
    if k.is_constant() {
        Ok(ImpedanceSpec::StaticLinear {
            k_star: k.coeffs()[0],
        })
    } else {
        Ok(ImpedanceSpec::StaticNonlinear { k_star: k.clone() })
    }
}

pub fn make_msd_spec(k_star: f64, tau: f64, delta: f64) -> Result<ImpedanceSpec, ImpedanceError> {
    for (name, v) in [("k*", k_star), ("tau", tau), ("delta", delta)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(ImpedanceError::InvalidSpec(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(ImpedanceSpec::Msd {
        k_star,
        tau,
        delta,
    })
}

/// Interaction error `y - y*`.
pub fn interaction_error(y: f64, y_star: f64) -> f64 {
    y - y_star
}

impl ImpedanceSpec {
    pub fn kind(&self) -> SpecKind {
        match self {
            ImpedanceSpec::StaticLinear { .. } => SpecKind::StaticLinear,
            ImpedanceSpec::StaticNonlinear { .. } => SpecKind::StaticNonlinear,
            ImpedanceSpec::Msd { .. } => SpecKind::Msd,
        }
    }

    pub fn n_i(&self) -> usize {
        match self {
            ImpedanceSpec::Msd { .. } => 2,
            _ => 0,
        }
    }

    /// Stiffness `k*` at scheduling point `p`.
    pub fn stiffness(&self, p: f64) -> f64 {
        match self {
            ImpedanceSpec::StaticLinear { k_star } | ImpedanceSpec::Msd { k_star, .. } => *k_star,
            ImpedanceSpec::StaticNonlinear { k_star } => k_star.eval(p),
        }
    }

    /// `k*` as a polynomial in `p`.
    pub fn stiffness_poly(&self) -> PolynomialFn {
        match self {
            ImpedanceSpec::StaticLinear { k_star } | ImpedanceSpec::Msd { k_star, .. } => {
                PolynomialFn::constant(*k_star)
            }
            ImpedanceSpec::StaticNonlinear { k_star } => k_star.clone(),
        }
    }

    pub fn eval(&self, p: f64) -> SpecMatrices {
        match self {
            ImpedanceSpec::StaticLinear { .. } | ImpedanceSpec::StaticNonlinear { .. } => {
                SpecMatrices {
                    ai: DMatrix::zeros(0, 0),
                    bfi: DVector::zeros(0),
                    by0i: DVector::zeros(0),
                    ci: DMatrix::zeros(1, 0),
                    dfi: -1.0 / self.stiffness(p),
                    dy0i: 1.0,
                }
            }
            ImpedanceSpec::Msd { k_star, tau, delta } => {
                let m = k_star * tau * tau;
                let b = 2.0 * delta * k_star * tau;
                SpecMatrices {
                    ai: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -k_star / m, -b / m]),
                    // compressive force shortens: steady state y0* - f/k*
                    bfi: DVector::from_column_slice(&[0.0, -1.0 / m]),
                    by0i: DVector::from_column_slice(&[0.0, k_star / m]),
                    ci: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                    dfi: 0.0,
                    dy0i: 0.0,
                }
            }
        }
    }

    /// Ideal displacement for internal state `x_i`, force `f`, set-point `y0`.
    pub fn output(&self, x_i: &[f64], f: f64, y0: f64, p: f64) -> f64 {
        let s = self.eval(p);
        let ci_x: f64 = s.ci.iter().zip(x_i).map(|(c, x)| c * x).sum();
        ci_x + s.dfi * f + s.dy0i * y0
    }

    /// Internal state at rest for constant `f` and `y0`.
    pub fn rest_state(&self, f: f64, y0: f64) -> Vec<f64> {
        match self {
            ImpedanceSpec::Msd { k_star, .. } => vec![y0 - f / k_star, 0.0],
            _ => Vec::new(),
        }
    }
}

/// One-state error shaping filter `x_s' = a_s x_s + b_s e_i`,
/// `z = c_s(p) x_s + d_s(p) e_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingFilter {
    pub a_s: f64,
    pub b_s: f64,
    pub c_s: PolynomialFn,
    pub d_s: PolynomialFn,
    pub omega_s: f64,
    pub m_s: Option<f64>,
}

/// Filter rows by kind: static specs get `(0, 1, k*·ω_s, k*/M_s)`, the
/// mass-spring-damper spec gets `(0, 1, k*·ω_s, 0)`.
pub fn make_shaping_filter(
    spec: &ImpedanceSpec,
    omega_s: f64,
    m_s: Option<f64>,
) -> Result<ShapingFilter, ImpedanceError> {
    if !(omega_s.is_finite() && omega_s > 0.0) {
        return Err(ImpedanceError::InvalidFilter(format!(
            "omega_s must be positive, got {omega_s}"
        )));
    }
    let k = spec.stiffness_poly();
    let d_s = match spec.kind() {
        SpecKind::StaticLinear | SpecKind::StaticNonlinear => {
            let m = m_s.ok_or_else(|| {
                ImpedanceError::InvalidFilter("M_s is required for static specifications".into())
            })?;
            if !(m.is_finite() && m > 0.0) {
                return Err(ImpedanceError::InvalidFilter(format!(
                    "M_s must be positive, got {m}"
                )));
            }
            k.scaled(1.0 / m)
        }
        SpecKind::Msd => PolynomialFn::constant(0.0),
    };
    Ok(ShapingFilter {
        a_s: 0.0,
        b_s: 1.0,
        c_s: k.scaled(omega_s),
        d_s,
        omega_s,
        m_s: match spec.kind() {
            SpecKind::Msd => None,
            _ => m_s,
        },
    })
}

impl ShapingFilter {
    pub fn n_s(&self) -> usize {
        1
    }

    /// Filter with an arbitrary (possibly leaky) state matrix.
    pub fn custom(a_s: f64, b_s: f64, c_s: PolynomialFn, d_s: PolynomialFn) -> Self {
        Self {
            a_s,
            b_s,
            c_s,
            d_s,
            omega_s: f64::NAN,
            m_s: None,
        }
    }

    pub fn has_integrator(&self) -> bool {
        self.a_s == 0.0
    }
}
