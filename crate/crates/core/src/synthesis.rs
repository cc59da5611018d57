//! Gridded LMI synthesis of the partial state-feedback gain `u = -K x_m`.
//!
//! The convex problem (minimise γ² over `P1 ≻ 0`, `P2 ≻ 0`, `Y`) is built on a
//! diagonally balanced realization `x = T x̃`, `u = s_u ũ`. The Lyapunov
//! condition in those coordinates is an exact congruence of the original one,
//! and the gain-norm condition is written in original coordinates through the
//! scaled variables, so no approximation is introduced. After recovery
//! `K = Y P1⁻¹` the original bilinear conditions are re-checked on a finer
//! validation grid; a failed point is added to the design grid and the problem
//! is solved again.

use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector, RowDVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentedMatrices, AugmentedPlant};
use crate::lmi::{
    equilibrated_margin, margin_of, AffineLmi, Assignment, ClarabelSolver, LmiError, LmiProblem,
    SdpSolver, Sense, SolveStatus, Term, VarId, VarTable,
};

pub const DEFAULT_DESIGN_POINTS: usize = 25;
pub const DEFAULT_VALIDATION_POINTS: usize = 101;
pub const MAX_DENSIFY_ROUNDS: usize = 3;
pub const DEFAULT_EPS24: f64 = 1e-6;
pub const DEFAULT_EPS27: f64 = 1e-9;
/// Relative increase applied to the optimal `γ²`.
pub const GAMMA_BACKOFF: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("invalid synthesis problem: {0}")]
    InvalidProblem(String),
    #[error("structural hypothesis violated: {0}")]
    Structural(String),
    #[error("synthesis infeasible: {0}")]
    Infeasible(InfeasibilityReport),
    #[error("solver failed: {0}")]
    NumericalFailure(String),
    #[error("validation failed after {rounds} densification rounds at {} point(s)", points.len())]
    ValidationFailed { rounds: usize, points: Vec<GridPoint> },
    #[error("certificate mismatch in {which} at p = {p}, y = {y} (margin {margin:e})")]
    CertificateMismatch {
        which: String,
        p: f64,
        y: f64,
        margin: f64,
    },
    #[error(transparent)]
    Lmi(#[from] LmiError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityReport {
    pub reason: String,
    pub lambda: f64,
    pub suggestions: Vec<String>,
}

impl std::fmt::Display for InfeasibilityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (λ = {}); try: {}", self.reason, self.lambda, self.suggestions.join("; "))
    }
}

fn relaxations(lambda: f64) -> Vec<String> {
    vec![
        format!("increase the L2-gain bound λ above {lambda}"),
        "decrease the shaping-filter bandwidth ω_s".into(),
        "increase the high-frequency error bound M_s".into(),
    ]
}

/// A realization `x' = A x + B_f f + B_u u`, `z = C_z x + D_f f` whose first
/// `n_m` states are measured.
pub trait Realization: Sync {
    fn n_x(&self) -> usize;
    fn n_m(&self) -> usize;
    /// Range of the output `y` (and of `p` when scheduled on position).
    fn bounds(&self) -> (f64, f64);
    fn eval_at(&self, p: f64, y: f64) -> AugmentedMatrices;
    /// Model-specific hypotheses checked before solving.
    fn check_hypotheses(&self, _grid: &Grid) -> Result<(), SynthesisError> {
        Ok(())
    }
}

impl Realization for AugmentedPlant {
    fn n_x(&self) -> usize {
        self.n_a()
    }
    fn n_m(&self) -> usize {
        AugmentedPlant::n_m(self)
    }
    fn bounds(&self) -> (f64, f64) {
        self.plant().y_bounds()
    }
    fn eval_at(&self, p: f64, y: f64) -> AugmentedMatrices {
        self.eval(p, y)
    }
    fn check_hypotheses(&self, grid: &Grid) -> Result<(), SynthesisError> {
        let b21 = self.plant().b21();
        let mut sign = 0.0;
        for pt in grid.all_points() {
            let v = b21.eval(pt.y);
            if v == 0.0 || (sign != 0.0 && v.signum() != sign) {
                return Err(SynthesisError::Structural(format!(
                    "input gain b21 vanishes or changes sign at y = {}",
                    pt.y
                )));
            }
            sign = v.signum();
        }
        Ok(())
    }
}

/// Constant realization, mainly for analytic oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiRealization {
    pub a: DMatrix<f64>,
    pub b_f: DVector<f64>,
    pub b_u: DVector<f64>,
    pub c_z: RowDVector<f64>,
    pub d_f: f64,
    pub n_m: usize,
}

impl LtiRealization {
    pub fn new(
        a: DMatrix<f64>,
        b_f: DVector<f64>,
        b_u: DVector<f64>,
        c_z: RowDVector<f64>,
        d_f: f64,
        n_m: usize,
    ) -> Result<Self, SynthesisError> {
        let n = a.nrows();
        if a.ncols() != n || b_f.len() != n || b_u.len() != n || c_z.len() != n {
            return Err(SynthesisError::InvalidProblem("realization not conformable".into()));
        }
        if n_m == 0 || n_m > n {
            return Err(SynthesisError::InvalidProblem(format!(
                "measured dimension {n_m} outside 1..={n}"
            )));
        }
        Ok(Self {
            a,
            b_f,
            b_u,
            c_z,
            d_f,
            n_m,
        })
    }

    /// `x' = x + u + f`, `z = x`, state measured.
    pub fn scalar_oracle() -> Self {
        Self::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            RowDVector::from_element(1, 1.0),
            0.0,
            1,
        )
        .expect("conformable")
    }
}

impl Realization for LtiRealization {
    fn n_x(&self) -> usize {
        self.a.nrows()
    }
    fn n_m(&self) -> usize {
        self.n_m
    }
    fn bounds(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
    fn eval_at(&self, _p: f64, _y: f64) -> AugmentedMatrices {
        let n = self.n_x();
        AugmentedMatrices {
            a: self.a.clone(),
            b_f: self.b_f.clone(),
            b_y0: DVector::zeros(n),
            b_u: self.b_u.clone(),
            c_z: self.c_z.clone(),
            d_f: self.d_f,
            d_y0: 0.0,
            c_m: DMatrix::identity(self.n_m, n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub p: f64,
    pub y: f64,
}

/// Design and validation points in the `(p, y)` plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub design: Vec<GridPoint>,
    pub validation: Vec<GridPoint>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if k + 1 == n {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            }
        })
        .collect()
}

fn sort_points(points: &mut Vec<GridPoint>) {
    points.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.p.total_cmp(&b.p)));
    points.dedup_by(|a, b| (a.y - b.y).abs() < 1e-12 && (a.p - b.p).abs() < 1e-12);
}

impl Grid {
    /// Uniform grid with `p = y`.
    pub fn uniform(bounds: (f64, f64), n_design: usize, n_validation: usize) -> Result<Self, SynthesisError> {
        if n_design < 2 || n_validation < 2 {
            return Err(SynthesisError::InvalidProblem("grids need at least 2 points".into()));
        }
        if !(bounds.0 < bounds.1) {
            return Err(SynthesisError::InvalidProblem("empty grid bounds".into()));
        }
        let pts = |n| {
            linspace(bounds.0, bounds.1, n)
                .into_iter()
                .map(|y| GridPoint { p: y, y })
                .collect()
        };
        Ok(Self {
            design: pts(n_design),
            validation: pts(n_validation),
        })
    }

    /// Tensor grid for a scheduling variable independent of `y`.
    pub fn product(
        y_bounds: (f64, f64),
        p_bounds: (f64, f64),
        n_design: usize,
        n_validation: usize,
    ) -> Result<Self, SynthesisError> {
        if n_design < 2 || n_validation < 2 {
            return Err(SynthesisError::InvalidProblem("grids need at least 2 points".into()));
        }
        if !(y_bounds.0 < y_bounds.1) || !(p_bounds.0 <= p_bounds.1) {
            return Err(SynthesisError::InvalidProblem("empty grid bounds".into()));
        }
        let pts = |n| {
            let mut v = Vec::new();
            for y in linspace(y_bounds.0, y_bounds.1, n) {
                for p in linspace(p_bounds.0, p_bounds.1, n) {
                    v.push(GridPoint { p, y });
                }
            }
            v
        };
        Ok(Self {
            design: pts(n_design),
            validation: pts(n_validation),
        })
    }

    pub fn all_points(&self) -> impl Iterator<Item = &GridPoint> {
        self.design.iter().chain(self.validation.iter())
    }

    /// Adds points to the design grid, keeping it sorted and duplicate-free.
    pub fn densify(&mut self, extra: &[GridPoint]) {
        self.design.extend_from_slice(extra);
        sort_points(&mut self.design);
    }

    pub fn check(&self, bounds: (f64, f64)) -> Result<(), SynthesisError> {
        for (name, pts) in [("design", &self.design), ("validation", &self.validation)] {
            if pts.len() < 2 {
                return Err(SynthesisError::InvalidProblem(format!("{name} grid has < 2 points")));
            }
            let sorted = pts.windows(2).all(|w| (w[0].y, w[0].p) <= (w[1].y, w[1].p));
            if !sorted {
                return Err(SynthesisError::InvalidProblem(format!("{name} grid not sorted")));
            }
            if let Some(pt) = pts.iter().find(|pt| {
                !pt.y.is_finite() || !pt.p.is_finite() || pt.y < bounds.0 || pt.y > bounds.1
            }) {
                return Err(SynthesisError::InvalidProblem(format!(
                    "{name} point y = {} outside [{}, {}]",
                    pt.y, bounds.0, bounds.1
                )));
            }
        }
        Ok(())
    }
}

/// Decision variables of the convex problem.
#[derive(Debug, Clone)]
pub struct LmiVars {
    pub table: VarTable,
    pub p1: VarId,
    pub p2: Option<VarId>,
    pub y: VarId,
    pub gamma_sq: VarId,
}

impl LmiVars {
    pub fn new(n_m: usize, n_u: usize) -> Self {
        let mut table = VarTable::new();
        let p1 = table.symmetric("P1", n_m);
        let p2 = (n_u > 0).then(|| table.symmetric("P2", n_u));
        let y = table.full("Y", 1, n_m);
        let gamma_sq = table.scalar("gamma_sq");
        Self {
            table,
            p1,
            p2,
            y,
            gamma_sq,
        }
    }

    pub fn assign(&self, p1: &DMatrix<f64>, p2: &DMatrix<f64>, y: &DMatrix<f64>, gamma_sq: f64) -> Assignment {
        let mut a = Assignment::new(&self.table);
        a.set(self.p1, p1.clone());
        if let Some(id) = self.p2 {
            a.set(id, p2.clone());
        }
        a.set(self.y, y.clone());
        a.set(self.gamma_sq, DMatrix::from_element(1, 1, gamma_sq));
        a
    }
}

/// Diagonal change of coordinates `x = T x̃`, `u = s_u ũ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateScaling {
    pub t: Vec<f64>,
    pub s_u: f64,
}

impl StateScaling {
    pub fn identity(n: usize) -> Self {
        Self {
            t: vec![1.0; n],
            s_u: 1.0,
        }
    }

    /// Osborne-style balancing of the grid-averaged `|A|`, bordered by the
    /// disturbance column and the performance row.
    pub fn balance(mats: &[AugmentedMatrices]) -> Self {
        let n = mats[0].a.nrows();
        let k = mats.len() as f64;
        let mut abar = DMatrix::zeros(n, n);
        let mut bf = DVector::zeros(n);
        let mut cz = DVector::zeros(n);
        let mut bu = DVector::zeros(n);
        for m in mats {
            abar += m.a.abs() / k;
            bf += m.b_f.abs() / k;
            cz += m.c_z.transpose().abs() / k;
            bu += m.b_u.abs() / k;
        }
        let mut t = DVector::from_element(n, 1.0);
        for _ in 0..100 {
            let mut moved = false;
            for i in 0..n {
                let mut r = bf[i] / t[i];
                let mut c = cz[i] * t[i];
                for j in 0..n {
                    if j != i {
                        r += abar[(i, j)] * t[j] / t[i];
                        c += abar[(j, i)] * t[i] / t[j];
                    }
                }
                if r > 0.0 && c > 0.0 {
                    let alpha = (r / c).sqrt().clamp(1e-3, 1e3);
                    if (alpha - 1.0).abs() > 1e-4 {
                        moved = true;
                    }
                    t[i] = (t[i] * alpha).clamp(1e-12, 1e12);
                }
            }
            if !moved {
                break;
            }
        }
        let a_scale = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| abar[(i, j)] * t[j] / t[i])
            .fold(0.0, f64::max);
        let bu_scale = (0..n).map(|i| bu[i] / t[i]).fold(0.0, f64::max);
        let s_u = if a_scale > 0.0 && bu_scale > 0.0 {
            a_scale / bu_scale
        } else {
            1.0
        };
        Self {
            t: t.iter().copied().collect(),
            s_u,
        }
    }

    fn t_block(&self, start: usize, len: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.t[start..start + len]))
    }

    /// Realization in scaled coordinates.
    pub fn apply(&self, m: &AugmentedMatrices) -> AugmentedMatrices {
        let n = self.t.len();
        AugmentedMatrices {
            a: DMatrix::from_fn(n, n, |i, j| m.a[(i, j)] * self.t[j] / self.t[i]),
            b_f: DVector::from_fn(n, |i, _| m.b_f[i] / self.t[i]),
            b_y0: DVector::from_fn(n, |i, _| m.b_y0[i] / self.t[i]),
            b_u: DVector::from_fn(n, |i, _| m.b_u[i] * self.s_u / self.t[i]),
            c_z: RowDVector::from_fn(n, |_, j| m.c_z[j] * self.t[j]),
            d_f: m.d_f,
            d_y0: m.d_y0,
            c_m: m.c_m.clone(),
        }
    }
}

/// `[[He{A11 P1 - B1u Y}, A12 P2 + P1 A21ᵀ, B1f, P1 C1zᵀ], [•, He{A22 P2}, B2f, P2 C2zᵀ],
///  [•, •, -I, D_fᵀ], [•, •, •, -λ² I]] ≼ -εI`. For the actuator the `B2f` and
/// `C2z` entries are structurally zero.
fn lmi24_terms(m: &AugmentedMatrices, n_m: usize, vars: &LmiVars, lambda: f64, eps: f64, name: String) -> AffineLmi {
    let n = m.a.nrows();
    let n_u = n - n_m;
    let a11 = m.a.view((0, 0), (n_m, n_m)).into_owned();
    let b1u = DMatrix::from_column_slice(n_m, 1, m.b_u.rows(0, n_m).as_slice());
    let b1f = DMatrix::from_column_slice(n_m, 1, m.b_f.rows(0, n_m).as_slice());
    let c1z_t = DMatrix::from_column_slice(n_m, 1, m.c_z.columns(0, n_m).transpose().as_slice());
    let (bf, bz) = if n_u > 0 { (2, 3) } else { (1, 2) };
    let mut blocks = vec![n_m];
    if n_u > 0 {
        blocks.push(n_u);
    }
    blocks.extend([1, 1]);
    let mut lmi = AffineLmi::new(name, blocks, Sense::NegativeDefinite, eps)
        .with(Term::var(vars.p1).left(a11).he())
        .with(Term::var(vars.y).left(-b1u).he())
        .with(Term::constant(b1f).at(0, bf))
        .with(Term::var(vars.p1).right(c1z_t).at(0, bz))
        .with(Term::constant(-DMatrix::identity(1, 1)).at(bf, bf))
        .with(Term::constant(DMatrix::from_element(1, 1, m.d_f)).at(bf, bz))
        .with(Term::constant(DMatrix::from_element(1, 1, -lambda * lambda)).at(bz, bz));
    if let Some(p2) = vars.p2 {
        let a12 = m.a.view((0, n_m), (n_m, n_u)).into_owned();
        let a21_t = m.a.view((n_m, 0), (n_u, n_m)).transpose();
        let a22 = m.a.view((n_m, n_m), (n_u, n_u)).into_owned();
        let b2f = DMatrix::from_column_slice(n_u, 1, m.b_f.rows(n_m, n_u).as_slice());
        let c2z_t = DMatrix::from_column_slice(n_u, 1, m.c_z.columns(n_m, n_u).transpose().as_slice());
        lmi.push(Term::var(p2).left(a12).at(0, 1));
        lmi.push(Term::var(vars.p1).right(a21_t).at(0, 1));
        lmi.push(Term::var(p2).left(a22).at(1, 1).he());
        if b2f.iter().any(|&v| v != 0.0) {
            lmi.push(Term::constant(b2f).at(1, bf));
        }
        if c2z_t.iter().any(|&v| v != 0.0) {
            lmi.push(Term::var(p2).right(c2z_t).at(1, bz));
        }
    }
    lmi
}

/// `[[P1 W⁻ᵀ + W⁻¹ P1 - I, Yᵀ], [•, γ² I]] ≽ εI` with `P1 = T P̃1 T`,
/// `Y = s_u Ỹ T` and `γ² = s_u² γ̃²`, after the congruence `diag(I, 1/s_u)`.
fn lmi27_terms(w_inv: &DMatrix<f64>, t_m: &DMatrix<f64>, vars: &LmiVars, eps: f64) -> AffineLmi {
    let n_m = w_inv.nrows();
    AffineLmi::new("lmi27", vec![n_m, 1], Sense::PositiveDefinite, eps)
        .with(Term::var(vars.p1).left(w_inv * t_m).right(t_m.clone()).he())
        .with(Term::constant(-DMatrix::identity(n_m, n_m)))
        .with(Term::var(vars.y).transposed().left(t_m.clone()).at(0, 1))
        .with(Term::var(vars.gamma_sq).at(1, 1))
}

fn positivity(id: VarId, n: usize, eps: f64, name: &str) -> AffineLmi {
    AffineLmi::new(name, vec![n], Sense::PositiveDefinite, eps).with(Term::var(id))
}

/// Dense `(19)`-type matrix for gain `k` and `P = diag(P1, P2)`:
/// `[[He{(A - B_u K C_m) P}, B_f, P C_zᵀ], [•, -I, D_fᵀ], [•, •, -λ² I]]`.
pub fn bmi19_matrix(
    m: &AugmentedMatrices,
    k: &RowDVector<f64>,
    p1: &DMatrix<f64>,
    p2: &DMatrix<f64>,
    lambda: f64,
) -> DMatrix<f64> {
    let n = m.a.nrows();
    let n_m = p1.nrows();
    let mut p = DMatrix::zeros(n, n);
    p.view_mut((0, 0), (n_m, n_m)).copy_from(p1);
    if n > n_m {
        p.view_mut((n_m, n_m), (n - n_m, n - n_m)).copy_from(p2);
    }
    let a_cl = &m.a - &m.b_u * k * &m.c_m;
    let ap = &a_cl * &p;
    let pcz = &p * m.c_z.transpose();
    let mut out = DMatrix::zeros(n + 2, n + 2);
    out.view_mut((0, 0), (n, n)).copy_from(&(&ap + ap.transpose()));
    for i in 0..n {
        out[(i, n)] = m.b_f[i];
        out[(n, i)] = m.b_f[i];
        out[(i, n + 1)] = pcz[i];
        out[(n + 1, i)] = pcz[i];
    }
    out[(n, n)] = -1.0;
    out[(n, n + 1)] = m.d_f;
    out[(n + 1, n)] = m.d_f;
    out[(n + 1, n + 1)] = -lambda * lambda;
    out
}

/// `[[I, Wᵀ Kᵀ], [•, γ² I]]`.
pub fn bmi20_matrix(k: &RowDVector<f64>, w: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let n_m = w.nrows();
    let wk = w.transpose() * k.transpose();
    let mut out = DMatrix::identity(n_m + 1, n_m + 1);
    for i in 0..n_m {
        out[(i, n_m)] = wk[i];
        out[(n_m, i)] = wk[i];
    }
    out[(n_m, n_m)] = gamma * gamma;
    out
}

pub struct SynthesisProblem<R> {
    pub realization: R,
    pub grid: Grid,
    pub lambda: f64,
    pub w: DMatrix<f64>,
    pub eps24: f64,
    pub eps27: f64,
    pub max_rounds: usize,
    /// Solve in balanced coordinates.
    pub balance: bool,
    pub solver: ClarabelSolver,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMargin {
    pub p: f64,
    pub y: f64,
    /// Eigenvalue margin of the assembled matrix.
    pub margin: f64,
    /// Margin after diagonal equilibration; same sign as `margin`.
    pub equilibrated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub status: SolveStatus,
    pub iterations: u32,
    pub objective: f64,
    pub residual: f64,
    pub message: String,
    /// Wall-clock solve time; not serialized so artifacts stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

mod row_major {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nr = rows.len();
        let nc = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != nc) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_fn(nr, nc, |r, c| rows[r][c]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub k: Vec<f64>,
    #[serde(with = "row_major")]
    pub p1: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub p2: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub y: DMatrix<f64>,
    /// Bound on `‖K W‖` certified by the convex gain condition.
    pub gamma: f64,
    pub norm_kw: f64,
    pub lambda: f64,
    #[serde(with = "row_major")]
    pub w: DMatrix<f64>,
    pub eps24: f64,
    pub eps27: f64,
    pub design_margins: Vec<PointMargin>,
    pub validation_margins: Vec<PointMargin>,
    pub lmi27_margin: f64,
    pub max_frozen_real: f64,
    pub rounds: usize,
    pub grid: Grid,
    pub scaling: StateScaling,
    pub solver: SolverSummary,
}

impl SynthesisResult {
    pub fn gain(&self) -> RowDVector<f64> {
        RowDVector::from_row_slice(&self.k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn worst_validation_margin(&self) -> f64 {
        self.validation_margins
            .iter()
            .map(|m| m.equilibrated)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmiReport {
    pub points: Vec<PointMargin>,
    pub margin20: f64,
    pub p_min_eig: f64,
    pub passed: bool,
}

fn spectral_norm_rect(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().iter().fold(0.0, |a: f64, &v| a.max(v))
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        f64::INFINITY
    } else {
        m.clone().symmetric_eigenvalues().min()
    }
}

impl<R: Realization> SynthesisProblem<R> {
    /// Problem on the default grid with default margins.
    pub fn new(realization: R, lambda: f64, w: DMatrix<f64>) -> Result<Self, SynthesisError> {
        let grid = Grid::uniform(
            realization.bounds(),
            DEFAULT_DESIGN_POINTS,
            DEFAULT_VALIDATION_POINTS,
        )?;
        let p = Self {
            realization,
            grid,
            lambda,
            w,
            eps24: DEFAULT_EPS24,
            eps27: DEFAULT_EPS27,
            max_rounds: MAX_DENSIFY_ROUNDS,
            balance: true,
            solver: ClarabelSolver::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_m(&self) -> usize {
        self.realization.n_m()
    }

    pub fn n_u(&self) -> usize {
        self.realization.n_x() - self.realization.n_m()
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(SynthesisError::InvalidProblem(format!("λ = {} must be positive", self.lambda)));
        }
        let n_m = self.n_m();
        if self.w.shape() != (n_m, n_m) {
            return Err(SynthesisError::InvalidProblem(format!(
                "W is {}x{}, expected {n_m}x{n_m}",
                self.w.nrows(),
                self.w.ncols()
            )));
        }
        if self.w.clone().try_inverse().is_none() {
            return Err(SynthesisError::InvalidProblem("W is singular".into()));
        }
        let sym = (&self.w + self.w.transpose()) * 0.5;
        if min_eig(&sym) <= 0.0 {
            return Err(SynthesisError::InvalidProblem("W is not positive definite".into()));
        }
        if !(self.eps24 >= 0.0 && self.eps27 >= 0.0) {
            return Err(SynthesisError::InvalidProblem("margins must be non-negative".into()));
        }
        self.grid.check(self.realization.bounds())
    }

    fn w_inv(&self) -> Result<DMatrix<f64>, SynthesisError> {
        self.w
            .clone()
            .try_inverse()
            .ok_or_else(|| SynthesisError::InvalidProblem("W is singular".into()))
    }

    /// The Lyapunov/L2 condition at one point, in original coordinates.
    pub fn assemble_lmi24(&self, vars: &LmiVars, point: GridPoint) -> Result<AffineLmi, SynthesisError> {
        let m = self.realization.eval_at(point.p, point.y);
        self.check_a22(&m, point)?;
        Ok(lmi24_terms(
            &m,
            self.n_m(),
            vars,
            self.lambda,
            self.eps24,
            format!("lmi24(p={},y={})", point.p, point.y),
        ))
    }

    /// The gain-norm condition in original coordinates.
    pub fn assemble_lmi27(&self, vars: &LmiVars) -> Result<AffineLmi, SynthesisError> {
        let n_m = self.n_m();
        Ok(lmi27_terms(
            &self.w_inv()?,
            &DMatrix::identity(n_m, n_m),
            vars,
            self.eps27,
        ))
    }

    fn check_a22(&self, m: &AugmentedMatrices, point: GridPoint) -> Result<(), SynthesisError> {
        let n_m = self.n_m();
        let n_u = self.n_u();
        if n_u == 0 {
            return Ok(());
        }
        let a22 = m.a.view((n_m, n_m), (n_u, n_u)).into_owned();
        let worst = a22
            .complex_eigenvalues()
            .iter()
            .map(|e| e.re)
            .fold(f64::NEG_INFINITY, f64::max);
        if worst >= 0.0 {
            return Err(SynthesisError::Structural(format!(
                "unmeasured block A22 is not Hurwitz at y = {} (max Re λ = {worst})",
                point.y
            )));
        }
        Ok(())
    }

    fn precheck(&self) -> Result<(), SynthesisError> {
        self.realization.check_hypotheses(&self.grid)?;
        let mut worst_df: f64 = 0.0;
        for pt in self.grid.all_points() {
            let m = self.realization.eval_at(pt.p, pt.y);
            self.check_a22(&m, *pt)?;
            worst_df = worst_df.max(m.d_f.abs());
        }
        if self.lambda * self.lambda <= worst_df * worst_df {
            return Err(SynthesisError::Infeasible(InfeasibilityReport {
                reason: format!(
                    "λ² = {:e} does not exceed the direct feedthrough D_f² = {:e}",
                    self.lambda * self.lambda,
                    worst_df * worst_df
                ),
                lambda: self.lambda,
                suggestions: relaxations(self.lambda),
            }));
        }
        Ok(())
    }

    fn solve_round(
        &self,
        design: &[GridPoint],
    ) -> Result<(StateScaling, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, f64, SolverSummary, Vec<PointMargin>), SynthesisError>
    {
        let n_m = self.n_m();
        let n_u = self.n_u();
        let mats: Vec<AugmentedMatrices> = design
            .par_iter()
            .map(|pt| self.realization.eval_at(pt.p, pt.y))
            .collect();
        let scaling = if self.balance {
            StateScaling::balance(&mats)
        } else {
            StateScaling::identity(n_m + n_u)
        };
        debug!("balancing T = {:?}, s_u = {:e}", scaling.t, scaling.s_u);
        let vars = LmiVars::new(n_m, n_u);
        let mut problem = LmiProblem::new(vars.table.clone());
        let lmis: Vec<AffineLmi> = design
            .par_iter()
            .zip(mats.par_iter())
            .map(|(pt, m)| {
                lmi24_terms(
                    &scaling.apply(m),
                    n_m,
                    &vars,
                    self.lambda,
                    self.eps24,
                    format!("lmi24(p={},y={})", pt.p, pt.y),
                )
            })
            .collect();
        problem.constraints.extend(lmis);
        problem.constraints.push(positivity(vars.p1, n_m, self.eps24, "P1"));
        if let Some(p2) = vars.p2 {
            problem.constraints.push(positivity(p2, n_u, self.eps24, "P2"));
        }
        let t_m = scaling.t_block(0, n_m);
        problem
            .constraints
            .push(lmi27_terms(&self.w_inv()?, &t_m, &vars, self.eps27));
        problem.minimize(vars.gamma_sq, 1.0);

        let started = Instant::now();
        let report = self.solver.solve(&problem)?;
        let seconds = started.elapsed().as_secs_f64();
        debug!("solver: {:?} after {} iterations ({})", report.status, report.iterations, report.message);
        match report.status {
            SolveStatus::Infeasible => {
                return Err(SynthesisError::Infeasible(InfeasibilityReport {
                    reason: format!("the LMI eigenvalue problem is infeasible on {} grid points", design.len()),
                    lambda: self.lambda,
                    suggestions: relaxations(self.lambda),
                }))
            }
            SolveStatus::NumericalFailure => {
                return Err(SynthesisError::NumericalFailure(format!(
                    "{} (iterations {}, residual {:e}, margins {:?})",
                    report.message, report.iterations, report.max_residual, report.margins
                )))
            }
            _ => {}
        }
        let get = |id: VarId| report.assignment.get(id).cloned().expect("solver assigns every variable");
        let p1s = get(vars.p1);
        let p2s = vars.p2.map(get).unwrap_or_else(|| DMatrix::zeros(0, 0));
        let ys = get(vars.y);
        // relative back-off on the active γ bound
        let gamma_sq = get(vars.gamma_sq)[(0, 0)] * scaling.s_u * scaling.s_u * (1.0 + GAMMA_BACKOFF);
        let t_u = scaling.t_block(n_m, n_u);
        let p1 = &t_m * p1s * &t_m;
        let p2 = &t_u * p2s * &t_u;
        let y = ys * &t_m * scaling.s_u;
        let design_margins = design
            .iter()
            .zip(&report.margins)
            .zip(&problem.constraints)
            .map(|((pt, &margin), c)| {
                let eq = c
                    .assemble(&problem.vars, &report.assignment)
                    .map(|m| equilibrated_margin(&m, Sense::NegativeDefinite))
                    .unwrap_or(f64::NAN);
                PointMargin {
                    p: pt.p,
                    y: pt.y,
                    margin,
                    equilibrated: eq,
                }
            })
            .collect();
        let summary = SolverSummary {
            status: report.status,
            iterations: report.iterations,
            objective: report.objective,
            residual: report.max_residual,
            message: report.message,
            seconds,
        };
        Ok((scaling, p1, p2, y, gamma_sq, summary, design_margins))
    }

    /// Margins of the convex Lyapunov condition in original coordinates.
    fn lmi24_margins(
        &self,
        points: &[GridPoint],
        p1: &DMatrix<f64>,
        p2: &DMatrix<f64>,
        y: &DMatrix<f64>,
    ) -> Result<Vec<PointMargin>, SynthesisError> {
        let vars = LmiVars::new(self.n_m(), self.n_u());
        let assignment = vars.assign(p1, p2, y, 0.0);
        points
            .par_iter()
            .map(|&pt| {
                let lmi = self.assemble_lmi24(&vars, pt)?;
                let m = lmi.assemble(&vars.table, &assignment)?;
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(SynthesisError::Lmi(LmiError::NonFinite(lmi.name)));
                }
                Ok(PointMargin {
                    p: pt.p,
                    y: pt.y,
                    margin: margin_of(&m, Sense::NegativeDefinite),
                    equilibrated: equilibrated_margin(&m, Sense::NegativeDefinite),
                })
            })
            .collect()
    }

    pub fn synthesize(&self) -> Result<SynthesisResult, SynthesisError> {
        self.validate()?;
        self.precheck()?;
        let n_m = self.n_m();
        let mut grid = self.grid.clone();
        let mut rounds = 0;
        loop {
            let (scaling, p1, p2, y, gamma_sq, solver, design_margins) = self.solve_round(&grid.design)?;
            let p1_inv = p1
                .clone()
                .try_inverse()
                .ok_or_else(|| SynthesisError::NumericalFailure("recovered P1 is singular".into()))?;
            let k = RowDVector::from_row_slice((&y * &p1_inv).as_slice());
            let validation_margins = self.lmi24_margins(&grid.validation, &p1, &p2, &y)?;
            let failed: Vec<GridPoint> = validation_margins
                .iter()
                .filter(|m| !(m.equilibrated > 0.0))
                .map(|m| GridPoint { p: m.p, y: m.y })
                .collect();
            if !failed.is_empty() {
                if rounds >= self.max_rounds {
                    return Err(SynthesisError::ValidationFailed { rounds, points: failed });
                }
                warn!("{} validation point(s) failed, densifying (round {})", failed.len(), rounds + 1);
                grid.densify(&failed);
                rounds += 1;
                continue;
            }

            let vars = LmiVars::new(n_m, self.n_u());
            let lmi27 = self.assemble_lmi27(&vars)?;
            let m27 = lmi27.assemble(&vars.table, &vars.assign(&p1, &p2, &y, gamma_sq))?;
            let lmi27_margin = equilibrated_margin(&m27, Sense::PositiveDefinite);
            let gamma = gamma_sq.max(0.0).sqrt();
            let norm_kw = spectral_norm_rect(&(DMatrix::from_row_slice(1, n_m, k.as_slice()) * &self.w));
            let max_frozen_real = grid
                .validation
                .par_iter()
                .map(|pt| {
                    let m = self.realization.eval_at(pt.p, pt.y);
                    let a_cl = &m.a - &m.b_u * &k * &m.c_m;
                    a_cl.complex_eigenvalues().iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max)
                })
                .reduce(|| f64::NEG_INFINITY, f64::max);
            info!(
                "synthesis: γ = {gamma:e}, ‖KW‖ = {norm_kw:e}, rounds = {rounds}, max Re λ_cl = {max_frozen_real:e}"
            );
            let result = SynthesisResult {
                k: k.iter().copied().collect(),
                p1,
                p2,
                y,
                gamma,
                norm_kw,
                lambda: self.lambda,
                w: self.w.clone(),
                eps24: self.eps24,
                eps27: self.eps27,
                design_margins,
                validation_margins,
                lmi27_margin,
                max_frozen_real,
                rounds,
                grid,
                scaling,
                solver,
            };
            self.verify_bmi(&result)?;
            return Ok(result);
        }
    }

    /// Re-checks the bilinear conditions with `P = diag(P1, P2)` and the
    /// recovered gain at every validation point.
    pub fn bmi_report(&self, result: &SynthesisResult) -> Result<BmiReport, SynthesisError> {
        let n_m = self.n_m();
        if result.k.len() != n_m || result.p1.shape() != (n_m, n_m) {
            return Err(SynthesisError::InvalidProblem("result does not match problem dimensions".into()));
        }
        let k = result.gain();
        let points: Vec<PointMargin> = self
            .grid
            .validation
            .par_iter()
            .chain(result.grid.validation.par_iter())
            .map(|pt| {
                let m = self.realization.eval_at(pt.p, pt.y);
                let b = bmi19_matrix(&m, &k, &result.p1, &result.p2, self.lambda);
                PointMargin {
                    p: pt.p,
                    y: pt.y,
                    margin: margin_of(&b, Sense::NegativeDefinite),
                    equilibrated: equilibrated_margin(&b, Sense::NegativeDefinite),
                }
            })
            .collect();
        let m20 = bmi20_matrix(&k, &self.w, result.gamma);
        let margin20 = equilibrated_margin(&m20, Sense::PositiveDefinite);
        let p_min_eig = min_eig(&result.p1).min(min_eig(&result.p2));
        let passed = margin20 > 0.0 && p_min_eig > 0.0 && points.iter().all(|m| m.equilibrated > 0.0);
        Ok(BmiReport {
            points,
            margin20,
            p_min_eig,
            passed,
        })
    }

    /// As [`Self::bmi_report`], failing on the first violated condition.
    pub fn verify_bmi(&self, result: &SynthesisResult) -> Result<BmiReport, SynthesisError> {
        let report = self.bmi_report(result)?;
        if report.p_min_eig <= 0.0 {
            return Err(SynthesisError::CertificateMismatch {
                which: "P = diag(P1, P2) ≻ 0".into(),
                p: f64::NAN,
                y: f64::NAN,
                margin: report.p_min_eig,
            });
        }
        if let Some(bad) = report.points.iter().find(|m| !(m.equilibrated > 0.0)) {
            return Err(SynthesisError::CertificateMismatch {
                which: "closed-loop L2 condition".into(),
                p: bad.p,
                y: bad.y,
                margin: bad.margin,
            });
        }
        if !(report.margin20 > 0.0) {
            return Err(SynthesisError::CertificateMismatch {
                which: "gain-norm condition".into(),
                p: f64::NAN,
                y: f64::NAN,
                margin: report.margin20,
            });
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::build_augmented;
    use crate::impedance::{make_msd_spec, make_shaping_filter, make_static_spec, StiffnessProfile};
    use crate::plant::PlantModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn static_aug(plant: &PlantModel, k: f64) -> AugmentedPlant {
        let spec = make_static_spec(&StiffnessProfile::linear(k, 2.9), plant.y_bounds()).unwrap();
        let filt = make_shaping_filter(&spec, 15.0, Some(2.0)).unwrap();
        build_augmented(plant, &spec, &filt).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn grid_uniform_sorted_and_bounded() {
        let g = Grid::uniform((0.0, 5.0), 25, 101).unwrap();
        assert_eq!(g.design.len(), 25);
        assert_eq!(g.validation.len(), 101);
        assert_eq!(g.design[24].y, 5.0);
        g.check((0.0, 5.0)).unwrap();
        assert!(Grid::uniform((0.0, 5.0), 1, 101).is_err());
    }

    #[test]
    fn densify_keeps_order() {
        let mut g = Grid::uniform((0.0, 1.0), 3, 5).unwrap();
        g.densify(&[GridPoint { p: 0.25, y: 0.25 }, GridPoint { p: 0.5, y: 0.5 }]);
        let ys: Vec<f64> = g.design.iter().map(|p| p.y).collect();
        assert_eq!(ys, vec![0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn lmi27_identity_case() {
        let prob = SynthesisProblem::new(LtiRealization::scalar_oracle(), 2.0, DMatrix::identity(1, 1)).unwrap();
        let vars = LmiVars::new(1, 0);
        let lmi = prob.assemble_lmi27(&vars).unwrap();
        let m = lmi
            .assemble(&vars.table, &vars.assign(&DMatrix::identity(1, 1), &DMatrix::zeros(0, 0), &DMatrix::zeros(1, 1), 1.0))
            .unwrap();
        assert_eq!(m, DMatrix::identity(2, 2));
    }

    #[test]
    fn lmi27_schur_with_identity_weight() {
        let aug = static_aug(&PlantModel::constant_coefficients(), 0.2);
        let prob = SynthesisProblem::new(aug, 1.0, DMatrix::identity(3, 3)).unwrap();
        let vars = LmiVars::new(3, 1);
        let lmi = prob.assemble_lmi27(&vars).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let y = DMatrix::from_fn(1, 3, |_, _| rng.gen_range(-2.0..2.0));
            let g: f64 = rng.gen_range(0.1..3.0);
            let a = vars.assign(&DMatrix::identity(3, 3), &DMatrix::identity(1, 1), &y, g * g);
            let m = lmi.assemble(&vars.table, &a).unwrap();
            let feasible = margin_of(&m, Sense::PositiveDefinite) > 0.0;
            assert_eq!(feasible, y.norm() < g, "‖Y‖ = {}, γ = {g}", y.norm());
        }
    }

    #[test]
    fn gain_norm_bound_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut feasible = 0;
        for _ in 0..1000 {
            let n = rng.gen_range(1..5);
            let p1 = random_spd(&mut rng, n) * rng.gen_range(0.2..3.0);
            let w = random_spd(&mut rng, n);
            let y = DMatrix::from_fn(1, n, |_, _| rng.gen_range(-1.5..1.5));
            let gamma: f64 = rng.gen_range(0.05..4.0);
            let w_inv = w.clone().try_inverse().unwrap();
            let tl = &p1 * w_inv.transpose() + &w_inv * &p1 - DMatrix::identity(n, n);
            let mut m = DMatrix::zeros(n + 1, n + 1);
            m.view_mut((0, 0), (n, n)).copy_from(&tl);
            for i in 0..n {
                m[(i, n)] = y[(0, i)];
                m[(n, i)] = y[(0, i)];
            }
            m[(n, n)] = gamma * gamma;
            if margin_of(&m, Sense::PositiveDefinite) > 0.0 {
                feasible += 1;
                let kw = &y * p1.clone().try_inverse().unwrap() * &w;
                assert!(kw.norm() < gamma, "counterexample: ‖KW‖ = {} ≥ γ = {gamma}", kw.norm());
            }
        }
        assert!(feasible > 50, "only {feasible} feasible samples");
    }

    #[test]
    fn substitution_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let plants = [
            static_aug(&PlantModel::constant_coefficients(), 0.2),
            static_aug(&PlantModel::synthetic_default(), 0.013),
        ];
        for aug in plants {
            let prob = SynthesisProblem::new(aug, 1.3, DMatrix::identity(3, 3)).unwrap();
            let vars = LmiVars::new(3, 1);
            for _ in 0..20 {
                let y_pt = rng.gen_range(0.0..5.0);
                let pt = GridPoint { p: y_pt, y: y_pt };
                let p1 = random_spd(&mut rng, 3);
                let p2 = DMatrix::from_element(1, 1, rng.gen_range(0.1..2.0));
                let yv = DMatrix::from_fn(1, 3, |_, _| rng.gen_range(-1.0..1.0));
                let lmi = prob.assemble_lmi24(&vars, pt).unwrap();
                let m24 = lmi.assemble(&vars.table, &vars.assign(&p1, &p2, &yv, 0.0)).unwrap();
                let k = RowDVector::from_row_slice((&yv * p1.clone().try_inverse().unwrap()).as_slice());
                let m19 = bmi19_matrix(&prob.realization.eval_at(pt.p, pt.y), &k, &p1, &p2, 1.3);
                let scale = m19.abs().max().max(1.0);
                assert!((&m24 - &m19).abs().max() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn degenerate_zero_plant_not_strict() {
        let n = 2;
        let real = LtiRealization::new(
            DMatrix::zeros(n, n),
            DVector::zeros(n),
            DVector::from_column_slice(&[0.0, 1.0]),
            RowDVector::zeros(n),
            0.0,
            1,
        )
        .unwrap();
        let mut prob = SynthesisProblem::new(real, 1.0, DMatrix::identity(1, 1)).unwrap();
        prob.grid = Grid::uniform((0.0, 1.0), 2, 2).unwrap();
        let vars = LmiVars::new(1, 1);
        let lmi = prob.assemble_lmi24(&vars, GridPoint { p: 0.0, y: 0.0 });
        // A22 = 0 is not Hurwitz
        assert!(matches!(lmi, Err(SynthesisError::Structural(_))));
        let real = LtiRealization::new(
            DMatrix::zeros(n, n),
            DVector::zeros(n),
            DVector::zeros(n),
            RowDVector::zeros(n),
            0.0,
            2,
        )
        .unwrap();
        let prob = SynthesisProblem::new(real, 1.0, DMatrix::identity(2, 2)).unwrap();
        let vars = LmiVars::new(2, 0);
        let lmi = prob.assemble_lmi24(&vars, GridPoint { p: 0.0, y: 0.0 }).unwrap();
        let m = lmi
            .assemble(&vars.table, &vars.assign(&DMatrix::identity(2, 2), &DMatrix::zeros(0, 0), &DMatrix::zeros(1, 2), 0.0))
            .unwrap();
        let (ok, _) = crate::lmi::check_feasible(&lmi, &vars.table, &vars.assign(&DMatrix::identity(2, 2), &DMatrix::zeros(0, 0), &DMatrix::zeros(1, 2), 0.0), 1e-9).unwrap();
        assert!(!ok);
        assert_eq!(m.view((0, 0), (2, 2)).into_owned(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn hand_assembled_lmi24_constant_plant() {
        let aug = static_aug(&PlantModel::constant_coefficients(), 0.2);
        let prob = SynthesisProblem::new(aug.clone(), 1.0, DMatrix::identity(3, 3)).unwrap();
        let vars = LmiVars::new(3, 1);
        let p1 = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 3.0]);
        let p2 = DMatrix::from_element(1, 1, 0.7);
        let yv = DMatrix::from_row_slice(1, 3, &[0.3, -0.4, 0.05]);
        let m24 = prob
            .assemble_lmi24(&vars, GridPoint { p: 1.0, y: 1.0 })
            .unwrap()
            .assemble(&vars.table, &vars.assign(&p1, &p2, &yv, 0.0))
            .unwrap();
        // x = [x_s, x1, x2, x3]; constant plant with k* = 0.2, ω_s = 15, M_s = 2
        let m = 2.05e-6;
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1000.0, -10.0, 100.0, 0.0, 1.0, 0.0, -0.5],
        );
        let bu = DVector::from_column_slice(&[0.0, 0.0, 50.0, 0.0]);
        let bf = DVector::from_column_slice(&[1.0 / 0.2, 0.0, -1.0 / m, 0.0]);
        let cz = DVector::from_column_slice(&[0.2 * 15.0, 0.1, 0.0, 0.0]);
        let a11 = a.view((0, 0), (3, 3)).into_owned();
        let b1u = bu.rows(0, 3).into_owned();
        let h = &a11 * &p1 - &b1u * &yv;
        let h = &h + h.transpose();
        let a12 = a.view((0, 3), (3, 1)).into_owned();
        let a21 = a.view((3, 0), (1, 3)).into_owned();
        let c12 = &a12 * &p2 + &p1 * a21.transpose();
        let pcz = &p1 * cz.rows(0, 3);
        let mut exp = DMatrix::zeros(6, 6);
        exp.view_mut((0, 0), (3, 3)).copy_from(&h);
        exp.view_mut((0, 3), (3, 1)).copy_from(&c12);
        exp.view_mut((3, 0), (1, 3)).copy_from(&c12.transpose());
        exp[(3, 3)] = 2.0 * -0.5 * 0.7;
        for i in 0..3 {
            exp[(i, 4)] = bf[i];
            exp[(4, i)] = bf[i];
            exp[(i, 5)] = pcz[i];
            exp[(5, i)] = pcz[i];
        }
        exp[(4, 4)] = -1.0;
        exp[(4, 5)] = 0.5;
        exp[(5, 4)] = 0.5;
        exp[(5, 5)] = -1.0;
        let err = (&m24 - &exp).abs().max();
        assert!(err <= 1e-9 * exp.abs().max(), "max diff {err}");
        let _ = make_msd_spec;
    }

    #[test]
    fn balancing_is_exact_congruence() {
        let aug = static_aug(&PlantModel::synthetic_default(), 0.2);
        let m = aug.eval(2.0, 2.0);
        let s = StateScaling::balance(std::slice::from_ref(&m));
        let ms = s.apply(&m);
        let k = RowDVector::from_row_slice(&[0.3, -0.2, 1e-3]);
        let t = DMatrix::from_diagonal(&DVector::from_column_slice(&s.t));
        let tm = t.view((0, 0), (3, 3)).into_owned();
        let tm_inv = tm.clone().try_inverse().unwrap();
        // gain in scaled coordinates: K̃ = K T_m / s_u
        let ks = &k * &tm / s.s_u;
        let a_cl = &m.a - &m.b_u * &k * &m.c_m;
        let a_cl_s = &ms.a - &ms.b_u * &ks * &ms.c_m;
        let back = &t * a_cl_s * t.clone().try_inverse().unwrap();
        assert!((back - &a_cl).abs().max() <= 1e-9 * a_cl.abs().max());
        let _ = tm_inv;
    }

    #[test]
    fn lambda_below_feedthrough_is_infeasible() {
        let aug = static_aug(&PlantModel::synthetic_default(), 0.2);
        let prob = SynthesisProblem::new(aug, 0.4, DMatrix::identity(3, 3)).unwrap();
        match prob.synthesize() {
            Err(SynthesisError::Infeasible(r)) => assert!(!r.suggestions.is_empty()),
            other => panic!("expected infeasible, got {other:?}"),
        }
        let prob = SynthesisProblem::new(LtiRealization::scalar_oracle(), 1.0, DMatrix::identity(1, 1));
        assert!(prob.is_ok());
    }

    #[test]
    fn invalid_weight_rejected() {
        let r = SynthesisProblem::new(LtiRealization::scalar_oracle(), 1.0, DMatrix::zeros(1, 1));
        assert!(matches!(r, Err(SynthesisError::InvalidProblem(_))));
        let r = SynthesisProblem::new(LtiRealization::scalar_oracle(), -1.0, DMatrix::identity(1, 1));
        assert!(matches!(r, Err(SynthesisError::InvalidProblem(_))));
    }

    #[test]
    fn scalar_oracle_gain() {
        let prob = SynthesisProblem::new(LtiRealization::scalar_oracle(), 2.0, DMatrix::identity(1, 1)).unwrap();
        let res = prob.synthesize().unwrap();
        let k = res.k[0];
        assert!(k > 1.5, "K = {k}");
        assert!(1.0 / (k - 1.0) <= 2.0);
        assert!(res.norm_kw < res.gamma);
    }

    #[test]
    fn constant_plant_synthesis_and_bmi() {
        let aug = static_aug(&PlantModel::constant_coefficients(), 0.2);
        let prob = SynthesisProblem::new(aug, 1.0, DMatrix::identity(3, 3)).unwrap();
        let res = prob.synthesize().unwrap();
        assert!(res.max_frozen_real < 0.0);
        let rep = prob.verify_bmi(&res).unwrap();
        assert!(rep.passed);

        let mut neg = res.clone();
        neg.p2 = -neg.p2.clone();
        assert!(prob.verify_bmi(&neg).is_err());

        let mut big = res.clone();
        big.k.iter_mut().for_each(|v| *v *= 1.5);
        big.gamma = res.norm_kw * 1.01;
        let m_orig = equilibrated_margin(&bmi20_matrix(&res.gain(), &prob.w, big.gamma), Sense::PositiveDefinite);
        let m_big = equilibrated_margin(&bmi20_matrix(&big.gain(), &prob.w, big.gamma), Sense::PositiveDefinite);
        assert!(m_big < m_orig);
        assert!(m_big <= 0.0);

        let json = res.to_json();
        let back = SynthesisResult::from_json(&json).unwrap();
        assert_eq!(back.k, res.k);
        assert_eq!(back.p1, res.p1);
    }
}
