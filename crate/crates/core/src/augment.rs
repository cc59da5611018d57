//! Augmented plant: shaping filter, desired behaviour and actuator in cascade.
//!
//! State ordering is `[x_s | x_i | x1 x2 | x3]`. The viscoelastic state is
//! always last, so the unmeasured block of the partitioned closed loop is the
//! trailing 1×1 entry.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, RowDVector};
use thiserror::Error;

use crate::impedance::{ImpedanceSpec, ShapingFilter};
use crate::plant::PlantModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("gain has length {got}, expected {expected}")]
    GainLength { got: usize, expected: usize },
}

/// Augmented realization evaluated at `(p, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedMatrices {
    pub a: DMatrix<f64>,
    pub b_f: DVector<f64>,
    pub b_y0: DVector<f64>,
    pub b_u: DVector<f64>,
    pub c_z: RowDVector<f64>,
    pub d_f: f64,
    pub d_y0: f64,
    pub c_m: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct AugmentedPlant {
    plant: PlantModel,
    spec: ImpedanceSpec,
    filter: ShapingFilter,
}

pub fn build_augmented(
    plant: &PlantModel,
    spec: &ImpedanceSpec,
    filter: &ShapingFilter,
) -> Result<AugmentedPlant, AugmentError> {
    if filter.n_s() != 1 {
        return Err(AugmentError::Dimension(format!(
            "shaping filter has {} states, expected 1",
            filter.n_s()
        )));
    }
    let s = spec.eval(plant.y_bounds().0);
    let n_i = spec.n_i();
    let consistent = s.ai.shape() == (n_i, n_i)
        && s.bfi.len() == n_i
        && s.by0i.len() == n_i
        && s.ci.shape() == (1, n_i);
    if !consistent {
        return Err(AugmentError::Dimension(
            "impedance specification matrices are not conformable".into(),
        ));
    }
    Ok(AugmentedPlant {
        plant: plant.clone(),
        spec: spec.clone(),
        filter: filter.clone(),
    })
}

impl AugmentedPlant {
    pub fn plant(&self) -> &PlantModel {
        &self.plant
    }
    pub fn spec(&self) -> &ImpedanceSpec {
        &self.spec
    }
    pub fn filter(&self) -> &ShapingFilter {
        &self.filter
    }

    pub fn n_a(&self) -> usize {
        self.filter.n_s() + self.spec.n_i() + 3
    }

    /// Dimension of the measured subvector `x_m = [x_s, x_i, x1, x2]`.
    pub fn n_m(&self) -> usize {
        self.n_a() - 1
    }

    pub fn x_s_index(&self) -> usize {
        0
    }

    pub fn x_i_range(&self) -> std::ops::Range<usize> {
        1..1 + self.spec.n_i()
    }

    /// Index of `x1`; `x2` and `x3` follow.
    pub fn x1_index(&self) -> usize {
        1 + self.spec.n_i()
    }

    pub fn x3_index(&self) -> usize {
        self.n_a() - 1
    }

    pub fn measured_indices(&self) -> Vec<usize> {
        (0..self.n_m()).collect()
    }

    pub fn eval(&self, p: f64, y: f64) -> AugmentedMatrices {
        let n = self.n_a();
        let n_i = self.spec.n_i();
        let xi = self.x_i_range();
        let x1 = self.x1_index();
        let sp = self.spec.eval(p);
        let pm = self.plant.eval_matrices_unchecked(y);
        let (a_s, b_s) = (self.filter.a_s, self.filter.b_s);
        let (c_s, d_s) = (self.filter.c_s.eval(p), self.filter.d_s.eval(p));

        let mut a = DMatrix::zeros(n, n);
        let mut b_f = DVector::zeros(n);
        let mut b_y0 = DVector::zeros(n);
        let mut b_u = DVector::zeros(n);
        let mut c_z = RowDVector::zeros(n);

        // x_s' = As x_s + Bs (y - y*)
        a[(0, 0)] = a_s;
        for j in 0..n_i {
            a[(0, xi.start + j)] = -b_s * sp.ci[(0, j)];
        }
        a[(0, x1)] = b_s;
        b_f[0] = -b_s * sp.dfi;
        b_y0[0] = -b_s * sp.dy0i;

        // x_i' = Ai x_i + Bfi f + By0i y0*
        for r in 0..n_i {
            for c in 0..n_i {
                a[(xi.start + r, xi.start + c)] = sp.ai[(r, c)];
            }
            b_f[xi.start + r] = sp.bfi[r];
            b_y0[xi.start + r] = sp.by0i[r];
        }

        // x' = A(y) x + B_f f + B_u(y) u
        for r in 0..3 {
            for c in 0..3 {
                a[(x1 + r, x1 + c)] = pm.a[(r, c)];
            }
            b_f[x1 + r] = pm.b_f[r];
            b_u[x1 + r] = pm.b_u[r];
        }

        // z = Cs x_s + Ds (y - y*)
        c_z[0] = c_s;
        for j in 0..n_i {
            c_z[xi.start + j] = -d_s * sp.ci[(0, j)];
        }
        c_z[x1] = d_s;
        let d_f = -d_s * sp.dfi;
        let d_y0 = -d_s * sp.dy0i;

        let mut c_m = DMatrix::zeros(n - 1, n);
        for r in 0..n - 1 {
            c_m[(r, r)] = 1.0;
        }

        AugmentedMatrices {
            a,
            b_f,
            b_y0,
            b_u,
            c_z,
            d_f,
            d_y0,
            c_m,
        }
    }

    pub fn partition(
        &self,
        p: f64,
        y: f64,
        k: &RowDVector<f64>,
    ) -> Result<PartitionedClosedLoop, AugmentError> {
        PartitionedClosedLoop::from_matrices(&self.eval(p, y), self.n_m(), k)
    }

    /// CSV listing of every evaluated block entry on the given grid.
    pub fn dump_blocks_csv(&self, points: &[(f64, f64)]) -> String {
        let mut out = String::from("p,y,block,row,col,value\n");
        for &(p, y) in points {
            let m = self.eval(p, y);
            let mut emit = |name: &str, mat: &DMatrix<f64>| {
                for r in 0..mat.nrows() {
                    for c in 0..mat.ncols() {
                        let _ = writeln!(out, "{p},{y},{name},{r},{c},{}", mat[(r, c)]);
                    }
                }
            };
            emit("A_a", &m.a);
            emit("B_fa", &DMatrix::from_column_slice(m.b_f.len(), 1, m.b_f.as_slice()));
            emit("B_y0a", &DMatrix::from_column_slice(m.b_y0.len(), 1, m.b_y0.as_slice()));
            emit("B_ua", &DMatrix::from_column_slice(m.b_u.len(), 1, m.b_u.as_slice()));
            emit("C_za", &DMatrix::from_row_slice(1, m.c_z.len(), m.c_z.as_slice()));
            emit("D_fa", &DMatrix::from_element(1, 1, m.d_f));
            emit("D_y0a", &DMatrix::from_element(1, 1, m.d_y0));
            emit("C_ma", &m.c_m);
        }
        out
    }
}

/// Closed loop under `u = -K x_m`, split into measured and unmeasured parts.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedClosedLoop {
    /// `A11 - B1u K`
    pub a11_cl: DMatrix<f64>,
    pub a11: DMatrix<f64>,
    pub a12: DMatrix<f64>,
    pub a21: DMatrix<f64>,
    pub a22: DMatrix<f64>,
    pub b1u: DVector<f64>,
    pub b2u: DVector<f64>,
    pub b1f: DVector<f64>,
    pub b2f: DVector<f64>,
    pub b1y0: DVector<f64>,
    pub b2y0: DVector<f64>,
    pub c1z: RowDVector<f64>,
    pub c2z: RowDVector<f64>,
    pub d_f: f64,
    pub d_y0: f64,
}

impl PartitionedClosedLoop {
    pub fn from_matrices(
        m: &AugmentedMatrices,
        n_m: usize,
        k: &RowDVector<f64>,
    ) -> Result<Self, AugmentError> {
        if k.len() != n_m {
            return Err(AugmentError::GainLength {
                got: k.len(),
                expected: n_m,
            });
        }
        let n = m.a.nrows();
        let n_u = n - n_m;
        let a11 = m.a.view((0, 0), (n_m, n_m)).into_owned();
        let b1u = m.b_u.rows(0, n_m).into_owned();
        Ok(Self {
            a11_cl: &a11 - &b1u * k,
            a11,
            a12: m.a.view((0, n_m), (n_m, n_u)).into_owned(),
            a21: m.a.view((n_m, 0), (n_u, n_m)).into_owned(),
            a22: m.a.view((n_m, n_m), (n_u, n_u)).into_owned(),
            b1u,
            b2u: m.b_u.rows(n_m, n_u).into_owned(),
            b1f: m.b_f.rows(0, n_m).into_owned(),
            b2f: m.b_f.rows(n_m, n_u).into_owned(),
            b1y0: m.b_y0.rows(0, n_m).into_owned(),
            b2y0: m.b_y0.rows(n_m, n_u).into_owned(),
            c1z: m.c_z.columns(0, n_m).into_owned(),
            c2z: m.c_z.columns(n_m, n_u).into_owned(),
            d_f: m.d_f,
            d_y0: m.d_y0,
        })
    }

    /// Reassembled closed-loop state matrix.
    pub fn closed_loop_a(&self) -> DMatrix<f64> {
        let n_m = self.a11_cl.nrows();
        let n_u = self.a22.nrows();
        let mut a = DMatrix::zeros(n_m + n_u, n_m + n_u);
        a.view_mut((0, 0), (n_m, n_m)).copy_from(&self.a11_cl);
        a.view_mut((0, n_m), (n_m, n_u)).copy_from(&self.a12);
        a.view_mut((n_m, 0), (n_u, n_m)).copy_from(&self.a21);
        a.view_mut((n_m, n_m), (n_u, n_u)).copy_from(&self.a22);
        a
    }
}
