//! Affine matrix inequalities in matrix-valued decision variables.
//!
//! A constraint is a symmetric block matrix whose blocks are sums of terms
//! `L · X · R` (or `L · Xᵀ · R`), where `X` is a decision variable or a
//! constant. Off-diagonal terms are mirrored into the lower triangle;
//! diagonal terms may be flagged `He`, which adds the transpose. Strict
//! inequalities are carried as `M ≼ -εI` or `M ≽ εI`.
//!
//! Feasibility is always judged by eigenvalues of the assembled matrix, so
//! certificates do not depend on which solver produced the assignment.

mod clarabel_backend;

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clarabel_backend::ClarabelSolver;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmiError {
    #[error("no value assigned to variable `{0}`")]
    MissingVariable(String),
    #[error("unknown variable id {0}")]
    UnknownVariable(usize),
    #[error("dimension mismatch in `{lmi}`: {detail}")]
    Dimension { lmi: String, detail: String },
    #[error("assembled matrix of `{0}` has non-finite entries")]
    NonFinite(String),
    #[error("objective may only reference scalar variables (got `{0}`)")]
    ObjectiveNotScalar(String),
    #[error("solver setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Symmetric,
    Full,
    Scalar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVar {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub structure: Structure,
}

impl DecisionVar {
    /// Number of free scalar entries.
    pub fn n_free(&self) -> usize {
        match self.structure {
            Structure::Symmetric => self.rows * (self.rows + 1) / 2,
            Structure::Full => self.rows * self.cols,
            Structure::Scalar => 1,
        }
    }

    /// Variable value with a single free entry set to one.
    fn basis(&self, k: usize) -> DMatrix<f64> {
        let mut e = vec![0.0; self.n_free()];
        e[k] = 1.0;
        self.from_free(&e)
    }

    /// Builds the matrix value from its free entries (upper triangle
    /// column-major for symmetric variables, column-major for full ones).
    pub fn from_free(&self, x: &[f64]) -> DMatrix<f64> {
        match self.structure {
            Structure::Scalar => DMatrix::from_element(1, 1, x[0]),
            Structure::Full => DMatrix::from_column_slice(self.rows, self.cols, x),
            Structure::Symmetric => {
                let n = self.rows;
                let mut m = DMatrix::zeros(n, n);
                let mut idx = 0;
                for c in 0..n {
                    for r in 0..=c {
                        m[(r, c)] = x[idx];
                        m[(c, r)] = x[idx];
                        idx += 1;
                    }
                }
                m
            }
        }
    }
}

/// Registry of decision variables; ids are indices into it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VarTable {
    vars: Vec<DecisionVar>,
}

impl VarTable {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, var: DecisionVar) -> VarId {
        assert!(var.rows > 0 && var.cols > 0, "variable shapes must be positive");
        self.vars.push(var);
        VarId(self.vars.len() - 1)
    }

    pub fn symmetric(&mut self, name: &str, n: usize) -> VarId {
        self.push(DecisionVar {
            name: name.into(),
            rows: n,
            cols: n,
            structure: Structure::Symmetric,
        })
    }

    pub fn full(&mut self, name: &str, rows: usize, cols: usize) -> VarId {
        self.push(DecisionVar {
            name: name.into(),
            rows,
            cols,
            structure: Structure::Full,
        })
    }

    pub fn scalar(&mut self, name: &str) -> VarId {
        self.push(DecisionVar {
            name: name.into(),
            rows: 1,
            cols: 1,
            structure: Structure::Scalar,
        })
    }

    pub fn get(&self, id: VarId) -> Result<&DecisionVar, LmiError> {
        self.vars.get(id.0).ok_or(LmiError::UnknownVariable(id.0))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (VarId, &DecisionVar)> {
        self.vars.iter().enumerate().map(|(i, v)| (VarId(i), v))
    }

    /// Offset of each variable's first free entry in the stacked vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.vars
            .iter()
            .map(|v| {
                let o = acc;
                acc += v.n_free();
                o
            })
            .collect()
    }

    pub fn n_free(&self) -> usize {
        self.vars.iter().map(DecisionVar::n_free).sum()
    }

    /// Splits a stacked vector of free entries into per-variable values.
    pub fn unstack(&self, x: &[f64]) -> Assignment {
        let mut a = Assignment::new(self);
        for ((id, v), off) in self.iter().zip(self.offsets()) {
            a.set(id, v.from_free(&x[off..off + v.n_free()]));
        }
        a
    }
}

/// Values for (some of) the variables of a table.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    values: Vec<Option<DMatrix<f64>>>,
}

impl Assignment {
    pub fn new(vars: &VarTable) -> Self {
        Self {
            values: vec![None; vars.len()],
        }
    }

    /// Every variable set to zero.
    pub fn zeros(vars: &VarTable) -> Self {
        Self {
            values: vars
                .vars
                .iter()
                .map(|v| Some(DMatrix::zeros(v.rows, v.cols)))
                .collect(),
        }
    }

    pub fn set(&mut self, id: VarId, value: DMatrix<f64>) {
        if id.0 >= self.values.len() {
            self.values.resize(id.0 + 1, None);
        }
        self.values[id.0] = Some(value);
    }

    pub fn get(&self, id: VarId) -> Option<&DMatrix<f64>> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// `alpha·self + beta·other`, entrywise over variables present in both.
    pub fn combine(&self, alpha: f64, other: &Assignment, beta: f64) -> Assignment {
        Assignment {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => Some(a * alpha + b * beta),
                    _ => None,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Var(VarId),
    Constant(DMatrix<f64>),
}

/// One summand `L · X · R` placed in block `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub row: usize,
    pub col: usize,
    /// `None` stands for the identity.
    pub left: Option<DMatrix<f64>>,
    pub operand: Operand,
    pub right: Option<DMatrix<f64>>,
    pub transpose: bool,
    pub hermitian: bool,
}

impl Term {
    pub fn var(v: VarId) -> Self {
        Self {
            row: 0,
            col: 0,
            left: None,
            operand: Operand::Var(v),
            right: None,
            transpose: false,
            hermitian: false,
        }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Self {
            operand: Operand::Constant(m),
            ..Self::var(VarId(usize::MAX))
        }
    }

    pub fn at(mut self, row: usize, col: usize) -> Self {
        self.row = row;
        self.col = col;
        self
    }

    pub fn left(mut self, l: DMatrix<f64>) -> Self {
        self.left = Some(l);
        self
    }

    pub fn right(mut self, r: DMatrix<f64>) -> Self {
        self.right = Some(r);
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transpose = true;
        self
    }

    /// Adds the transpose of the term (`He{·}`); diagonal blocks only.
    pub fn he(mut self) -> Self {
        self.hermitian = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    /// `M ≼ -εI`
    NegativeDefinite,
    /// `M ≽ εI`
    PositiveDefinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLmi {
    pub name: String,
    pub blocks: Vec<usize>,
    pub terms: Vec<Term>,
    pub sense: Sense,
    pub eps: f64,
}

impl AffineLmi {
    pub fn new(name: impl Into<String>, blocks: Vec<usize>, sense: Sense, eps: f64) -> Self {
        Self {
            name: name.into(),
            blocks,
            terms: Vec::new(),
            sense,
            eps,
        }
    }

    pub fn push(&mut self, term: Term) -> &mut Self {
        self.terms.push(term);
        self
    }

    pub fn with(mut self, term: Term) -> Self {
        self.terms.push(term);
        self
    }

    pub fn size(&self) -> usize {
        self.blocks.iter().sum()
    }

    fn offsets(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(0, |acc, &b| {
                let o = *acc;
                *acc += b;
                Some(o)
            })
            .collect()
    }

    fn dim_err(&self, detail: String) -> LmiError {
        LmiError::Dimension {
            lmi: self.name.clone(),
            detail,
        }
    }

    /// Accumulates the terms whose operand `value` resolves; `None` skips a term.
    fn accumulate<F>(&self, vars: &VarTable, value: F) -> Result<DMatrix<f64>, LmiError>
    where
        F: Fn(&Operand) -> Option<DMatrix<f64>>,
    {
        let n = self.size();
        let offs = self.offsets();
        let mut m = DMatrix::zeros(n, n);
        for t in &self.terms {
            if t.row >= self.blocks.len() || t.col >= self.blocks.len() {
                return Err(self.dim_err(format!("block ({}, {}) out of layout", t.row, t.col)));
            }
            if t.hermitian && t.row != t.col {
                return Err(self.dim_err("He{} term placed off the diagonal".into()));
            }
            let Some(x) = value(&t.operand) else { continue };
            let scalar = match &t.operand {
                Operand::Var(id) => vars.get(*id)?.structure == Structure::Scalar,
                Operand::Constant(_) => false,
            };
            let x = if scalar {
                let k = t
                    .left
                    .as_ref()
                    .map(|l| l.ncols())
                    .or(t.right.as_ref().map(|r| r.nrows()))
                    .unwrap_or(self.blocks[t.row]);
                DMatrix::identity(k, k) * x[(0, 0)]
            } else if t.transpose {
                x.transpose()
            } else {
                x
            };
            let lx = match &t.left {
                Some(l) if l.ncols() != x.nrows() => {
                    return Err(self.dim_err(format!(
                        "left factor {}x{} vs operand {}x{}",
                        l.nrows(),
                        l.ncols(),
                        x.nrows(),
                        x.ncols()
                    )))
                }
                Some(l) => l * x,
                None => x,
            };
            let c = match &t.right {
                Some(r) if r.nrows() != lx.ncols() => {
                    return Err(self.dim_err(format!(
                        "right factor {}x{} vs product {}x{}",
                        r.nrows(),
                        r.ncols(),
                        lx.nrows(),
                        lx.ncols()
                    )))
                }
                Some(r) => lx * r,
                None => lx,
            };
            let (br, bc) = (self.blocks[t.row], self.blocks[t.col]);
            if c.shape() != (br, bc) {
                return Err(self.dim_err(format!(
                    "term in block ({}, {}) is {}x{}, block is {br}x{bc}",
                    t.row,
                    t.col,
                    c.nrows(),
                    c.ncols()
                )));
            }
            let (r0, c0) = (offs[t.row], offs[t.col]);
            if t.hermitian {
                let s = &c + c.transpose();
                let mut v = m.view_mut((r0, c0), (br, bc));
                v += &s;
            } else {
                {
                    let mut v = m.view_mut((r0, c0), (br, bc));
                    v += &c;
                }
                if t.row != t.col {
                    let mut v = m.view_mut((c0, r0), (bc, br));
                    v += &c.transpose();
                }
            }
        }
        Ok((&m + m.transpose()) * 0.5)
    }

    /// Numeric value of the constraint matrix under `assignment`.
    pub fn assemble(&self, vars: &VarTable, assignment: &Assignment) -> Result<DMatrix<f64>, LmiError> {
        for t in &self.terms {
            if let Operand::Var(id) = &t.operand {
                let var = vars.get(*id)?;
                if assignment.get(*id).is_none() {
                    return Err(LmiError::MissingVariable(var.name.clone()));
                }
            }
        }
        self.accumulate(vars, |op| match op {
            Operand::Var(id) => assignment.get(*id).cloned(),
            Operand::Constant(c) => Some(c.clone()),
        })
    }

    /// Constant part and one coefficient matrix per free entry of every
    /// variable, in stacked order: `M(x) = M0 + Σ x_k M_k`.
    pub fn coefficients(
        &self,
        vars: &VarTable,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>), LmiError> {
        let m0 = self.accumulate(vars, |op| match op {
            Operand::Var(_) => None,
            Operand::Constant(c) => Some(c.clone()),
        })?;
        let mut mk = Vec::with_capacity(vars.n_free());
        for (id, var) in vars.iter() {
            let used = self
                .terms
                .iter()
                .any(|t| matches!(t.operand, Operand::Var(v) if v == id));
            for k in 0..var.n_free() {
                if !used {
                    mk.push(DMatrix::zeros(self.size(), self.size()));
                    continue;
                }
                let e = var.basis(k);
                mk.push(self.accumulate(vars, |op| match op {
                    Operand::Var(v) if *v == id => Some(e.clone()),
                    _ => None,
                })?);
            }
        }
        Ok((m0, mk))
    }

    /// Plain-text listing of the constraint's terms.
    pub fn dump(&self, vars: &VarTable) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "constraint {} sense={:?} eps={:e} blocks={:?}",
            self.name, self.sense, self.eps, self.blocks
        );
        for t in &self.terms {
            let op = match &t.operand {
                Operand::Var(id) => vars
                    .get(*id)
                    .map(|v| v.name.clone())
                    .unwrap_or_else(|_| format!("?{}", id.0)),
                Operand::Constant(c) => format!("const{}", fmt_matrix(c)),
            };
            let l = t.left.as_ref().map(fmt_matrix).unwrap_or_else(|| "I".into());
            let r = t.right.as_ref().map(fmt_matrix).unwrap_or_else(|| "I".into());
            let tr = if t.transpose { "ᵀ" } else { "" };
            let body = format!("{l} * {op}{tr} * {r}");
            let body = if t.hermitian { format!("He{{{body}}}") } else { body };
            let _ = writeln!(out, "  ({}, {}) {body}", t.row, t.col);
        }
        out
    }
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|r| {
            (0..m.ncols())
                .map(|c| format!("{:e}", m[(r, c)]))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    format!("[{}]", rows.join("; "))
}

/// Eigenvalue margin of an assembled constraint: the smallest eigenvalue for
/// `≽`, minus the largest for `≼`. Feasible iff the margin exceeds `eps`.
pub fn margin_of(matrix: &DMatrix<f64>, sense: Sense) -> f64 {
    if matrix.nrows() == 0 {
        return f64::INFINITY;
    }
    let eig = matrix.clone().symmetric_eigenvalues();
    match sense {
        Sense::PositiveDefinite => eig.min(),
        Sense::NegativeDefinite => -eig.max(),
    }
}

/// Margin of `D·M·D` for the Ruiz diagonal `D` of `M`. By Sylvester's law of
/// inertia its sign agrees with [`margin_of`], but it is computed on a matrix
/// whose rows have unit magnitude, so it stays meaningful when the entries of
/// `M` span many decades.
pub fn equilibrated_margin(matrix: &DMatrix<f64>, sense: Sense) -> f64 {
    let n = matrix.nrows();
    let d = clarabel_backend::ruiz_diagonal(&[matrix], n);
    let scaled = DMatrix::from_fn(n, n, |i, j| d[i] * matrix[(i, j)] * d[j]);
    margin_of(&scaled, sense)
}

pub fn check_feasible(
    lmi: &AffineLmi,
    vars: &VarTable,
    assignment: &Assignment,
    eps: f64,
) -> Result<(bool, f64), LmiError> {
    let m = lmi.assemble(vars, assignment)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LmiError::NonFinite(lmi.name.clone()));
    }
    let margin = margin_of(&m, lmi.sense);
    Ok((margin > eps, margin))
}

/// Linear objective over scalar variables, minimised.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiProblem {
    pub vars: VarTable,
    pub constraints: Vec<AffineLmi>,
    pub objective: Vec<(VarId, f64)>,
}

impl LmiProblem {
    pub fn new(vars: VarTable) -> Self {
        Self {
            vars,
            constraints: Vec::new(),
            objective: Vec::new(),
        }
    }

    pub fn minimize(&mut self, var: VarId, weight: f64) {
        self.objective.push((var, weight));
    }

    pub fn objective_value(&self, assignment: &Assignment) -> f64 {
        self.objective
            .iter()
            .map(|(id, w)| w * assignment.get(*id).map(|m| m[(0, 0)]).unwrap_or(0.0))
            .sum()
    }

    /// Variable table followed by every constraint's term listing.
    pub fn dump(&self) -> String {
        let mut out = String::from("variables\n");
        for ((id, v), off) in self.vars.iter().zip(self.vars.offsets()) {
            let _ = writeln!(
                out,
                "  #{} {} {:?} {}x{} offset={} free={}",
                id.0,
                v.name,
                v.structure,
                v.rows,
                v.cols,
                off,
                v.n_free()
            );
        }
        let obj: Vec<String> = self
            .objective
            .iter()
            .map(|(id, w)| {
                let name = self.vars.get(*id).map(|v| v.name.as_str()).unwrap_or("?");
                format!("{w:e}*{name}")
            })
            .collect();
        let _ = writeln!(out, "minimize {}", obj.join(" + "));
        for c in &self.constraints {
            out.push_str(&c.dump(&self.vars));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Feasible,
    Infeasible,
    NumericalFailure,
}

impl SolveStatus {
    pub fn is_success(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::Feasible)
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub assignment: Assignment,
    pub objective: f64,
    /// Primal residual reported by the backend.
    pub max_residual: f64,
    /// Unscaled eigenvalue margin of each constraint at the returned point.
    pub margins: Vec<f64>,
    pub iterations: u32,
    pub message: String,
}

/// Any conic solver able to handle semidefinite cones.
pub trait SdpSolver {
    fn solve(&self, problem: &LmiProblem) -> Result<SolveReport, LmiError>;
}
