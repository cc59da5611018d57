//! SDP backend on top of the Clarabel interior-point solver.
//!
//! Each constraint `σ·M(x) ≽ εI` (σ = -1 for `≼`) is rescaled by a diagonal
//! congruence `D` (Ruiz equilibration over the constant and coefficient
//! matrices) and a positive factor `c` that gives the constant part unit
//! spectral norm. Both transformations preserve the sign of the constraint,
//! so only the margin `ε` is reinterpreted in scaled units. The returned
//! assignment is re-checked on the unscaled matrices.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use log::debug;
use nalgebra::{DMatrix, DVector};
use openblas_src as _;

use super::{
    check_feasible, AffineLmi, LmiError, LmiProblem, SdpSolver, Sense, SolveReport, SolveStatus,
    Structure,
};

const RUIZ_PASSES: usize = 12;
const RECHECK_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ClarabelSolver {
    pub max_iter: u32,
    pub tol_gap: f64,
    pub tol_feas: f64,
    pub equilibrate: bool,
    pub verbose: bool,
}

impl Default for ClarabelSolver {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol_gap: 1e-9,
            tol_feas: 1e-9,
            equilibrate: true,
            verbose: false,
        }
    }
}

/// Upper-triangle column-major vectorisation with off-diagonals scaled by √2.
pub(crate) fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut v = Vec::with_capacity(n * (n + 1) / 2);
    for c in 0..n {
        for r in 0..=c {
            let x = if r == c {
                m[(r, c)]
            } else {
                std::f64::consts::SQRT_2 * 0.5 * (m[(r, c)] + m[(c, r)])
            };
            v.push(x);
        }
    }
    v
}

/// Diagonal `d` such that `D·M·D` has rows of comparable magnitude across
/// all given matrices.
pub(crate) fn ruiz_diagonal(mats: &[&DMatrix<f64>], n: usize) -> DVector<f64> {
    let mut d = DVector::from_element(n, 1.0);
    for _ in 0..RUIZ_PASSES {
        let mut r = DVector::zeros(n);
        for m in mats {
            for i in 0..n {
                for j in 0..n {
                    let v = (d[i] * m[(i, j)] * d[j]).abs();
                    if v > r[i] {
                        r[i] = v;
                    }
                }
            }
        }
        let mut done = true;
        for i in 0..n {
            if r[i] > 0.0 && r[i].is_finite() {
                let f = 1.0 / r[i].sqrt();
                if (f - 1.0).abs() > 1e-3 {
                    done = false;
                }
                d[i] *= f;
            }
        }
        if done {
            break;
        }
    }
    d
}

fn congruence(m: &DMatrix<f64>, d: &DVector<f64>, c: f64) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| c * d[i] * m[(i, j)] * d[j])
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
}

struct ScaledBlock {
    b: Vec<f64>,
    cols: Vec<Vec<f64>>,
    dim: usize,
}

fn scale_constraint(lmi: &AffineLmi, problem: &LmiProblem) -> Result<ScaledBlock, LmiError> {
    let (m0, mk) = lmi.coefficients(&problem.vars)?;
    let sigma = match lmi.sense {
        Sense::PositiveDefinite => 1.0,
        Sense::NegativeDefinite => -1.0,
    };
    let n = lmi.size();
    let g0 = m0 * sigma;
    let gk: Vec<DMatrix<f64>> = mk.into_iter().map(|m| m * sigma).collect();
    if g0.iter().chain(gk.iter().flat_map(|m| m.iter())).any(|v| !v.is_finite()) {
        return Err(LmiError::NonFinite(lmi.name.clone()));
    }
    let refs: Vec<&DMatrix<f64>> = std::iter::once(&g0).chain(gk.iter()).collect();
    let d = ruiz_diagonal(&refs, n);
    let g0d = congruence(&g0, &d, 1.0);
    let mut norm = spectral_norm(&g0d);
    if norm < 1e-12 {
        norm = gk
            .iter()
            .map(|m| congruence(m, &d, 1.0).abs().max())
            .fold(0.0, f64::max);
    }
    let c = if norm > 0.0 { 1.0 / norm } else { 1.0 };
    debug!(
        "constraint {}: ruiz range [{:e}, {:e}], scale {:e}",
        lmi.name,
        d.min(),
        d.max(),
        c
    );
    let shifted = g0d * c - DMatrix::identity(n, n) * lmi.eps;
    let b = svec(&shifted);
    let cols = gk
        .iter()
        .map(|m| svec(&congruence(m, &d, c)).into_iter().map(|v| -v).collect())
        .collect();
    Ok(ScaledBlock { b, cols, dim: n })
}

impl SdpSolver for ClarabelSolver {
    fn solve(&self, problem: &LmiProblem) -> Result<SolveReport, LmiError> {
        let nx = problem.vars.n_free();
        let offsets = problem.vars.offsets();
        let mut q = vec![0.0; nx];
        for (id, w) in &problem.objective {
            let var = problem.vars.get(*id)?;
            if var.structure != Structure::Scalar {
                return Err(LmiError::ObjectiveNotScalar(var.name.clone()));
            }
            q[offsets[id.0]] += w;
        }

        let blocks: Vec<ScaledBlock> = problem
            .constraints
            .iter()
            .filter(|c| c.size() > 0)
            .map(|c| scale_constraint(c, problem))
            .collect::<Result<_, _>>()?;
        let m: usize = blocks.iter().map(|b| b.b.len()).sum();

        let mut b = Vec::with_capacity(m);
        for blk in &blocks {
            b.extend_from_slice(&blk.b);
        }
        let mut colptr = vec![0usize];
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        for k in 0..nx {
            let mut row0 = 0;
            for blk in &blocks {
                for (i, &v) in blk.cols[k].iter().enumerate() {
                    if v != 0.0 {
                        rowval.push(row0 + i);
                        nzval.push(v);
                    }
                }
                row0 += blk.b.len();
            }
            colptr.push(rowval.len());
        }
        let a = CscMatrix::new(m, nx, colptr, rowval, nzval);
        let p = CscMatrix::zeros((nx, nx));
        let cones: Vec<SupportedConeT<f64>> = blocks
            .iter()
            .map(|blk| SupportedConeT::PSDTriangleConeT(blk.dim))
            .collect();

        let settings = DefaultSettingsBuilder::default()
            .verbose(self.verbose)
            .max_iter(self.max_iter)
            .max_threads(1)
            .tol_gap_abs(self.tol_gap)
            .tol_gap_rel(self.tol_gap)
            .tol_feas(self.tol_feas)
            .equilibrate_enable(self.equilibrate)
            .build()
            .map_err(|e| LmiError::Setup(e.to_string()))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| LmiError::Setup(format!("{e:?}")))?;
        solver.solve();
        let sol = &solver.solution;

        let mut status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => SolveStatus::Feasible,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            _ => SolveStatus::NumericalFailure,
        };
        let x: Vec<f64> = if sol.x.iter().all(|v| v.is_finite()) {
            sol.x.clone()
        } else {
            vec![0.0; nx]
        };
        let assignment = problem.vars.unstack(&x);
        let mut margins = Vec::with_capacity(problem.constraints.len());
        let mut violated = false;
        for c in &problem.constraints {
            let margin = match check_feasible(c, &problem.vars, &assignment, 0.0) {
                Ok((_, mg)) => mg,
                Err(LmiError::NonFinite(_)) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            // solver-accuracy check only; strict certificates are the caller's job
            let scale = c
                .assemble(&problem.vars, &assignment)
                .map(|m| m.abs().max())
                .unwrap_or(1.0)
                .max(1.0);
            let floor = -RECHECK_TOL * scale;
            violated |= margin.is_nan() || margin <= floor;
            margins.push(margin);
        }
        let mut message = format!("{:?}", sol.status);
        if status.is_success() && violated {
            message.push_str("; unscaled re-check failed");
            status = SolveStatus::NumericalFailure;
        }
        Ok(SolveReport {
            status,
            objective: problem.objective_value(&assignment),
            assignment,
            max_residual: sol.r_prim,
            margins,
            iterations: sol.iterations,
            message,
        })
    }
}
