//! Linear solvers for the two stages of the time stepper.
//!
//! Both stage matrices are time independent, so they are set up once per run.
//! Two interchangeable backends exist:
//!
//! * [`Backend::Tensor`] diagonalizes the 1-D generalized eigenproblems
//!   `S_n v = λ M_n v` and applies the Kronecker basis `V = V₂ ⊗ V₁`. With
//!   `VᵀMV = I` and `VᵀSV = D` every solve reduces to a 2×2 (stage A) or scalar
//!   (stage B) system per mode. Valid for the uniform tensor grids used here.
//! * [`Backend::SparseDirect`] factors the assembled matrices once (sparse LU
//!   for the 2N mixed system, sparse Cholesky for stage B).
//!
//! Feedback enters as a symmetric low-rank term `E D Eᵀ` and is folded in by
//! a Sherman–Morrison–Woodbury update on top of either backend.

use std::sync::Arc;

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::{Mat, MatMut, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridOperators;
use crate::sparse::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Tensor,
    SparseDirect,
}

/// A factored square system `A x = b`.
pub trait BaseSolve: Send + Sync {
    fn dim(&self) -> usize;
    /// Overwrites `x` (holding `b`) with `A⁻¹ b`.
    fn solve_in_place(&self, x: &mut [f64]) -> Result<()>;

    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }
}

/// Coefficients of the stage systems.
///
/// Stage A, unknowns `(w, p)`:
/// ```text
/// M w + dt S p            = r₁
/// (ν₂ S + c M) w − M p    = r₂
/// ```
/// Stage B: `(M + dt S) w = r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageCoefficients {
    pub dt: f64,
    pub nu2: f64,
    /// Shift `c = ν₀ν₁ + f_c'`.
    pub shift: f64,
}

pub fn stage_a_matrix(ops: &GridOperators, k: &StageCoefficients) -> CsrMatrix {
    let n = ops.n_nodes();
    let lower = ops.stiffness.linear_combination(k.nu2, &ops.mass, k.shift);
    CsrMatrix::block(
        2,
        n,
        &[
            (0, 0, &ops.mass, 1.0),
            (0, 1, &ops.stiffness, k.dt),
            (1, 0, &lower, 1.0),
            (1, 1, &ops.mass, -1.0),
        ],
    )
}

pub fn stage_b_matrix(ops: &GridOperators, dt: f64) -> CsrMatrix {
    ops.mass.linear_combination(1.0, &ops.stiffness, dt)
}

/// Builds `(stage A, stage B)` solvers for the chosen backend.
pub fn build_stage_solvers(
    ops: &GridOperators,
    k: &StageCoefficients,
    backend: Backend,
) -> Result<(Arc<dyn BaseSolve>, Arc<dyn BaseSolve>)> {
    match backend {
        Backend::Tensor => {
            let basis = Arc::new(TensorBasis::new(ops)?);
            let a = TensorStageA::new(basis.clone(), k);
            let b = TensorStageB::new(basis, k.dt);
            Ok((Arc::new(a), Arc::new(b)))
        }
        Backend::SparseDirect => {
            let a = SparseLu::new(&stage_a_matrix(ops, k))?;
            let b = SparseLlt::new(&stage_b_matrix(ops, k.dt))?;
            Ok((Arc::new(a), Arc::new(b)))
        }
    }
}

/// Eigenbasis of the 1-D pencil `(S, M)` with `VᵀMV = I`, `VᵀSV = diag(λ)`.
pub fn generalized_eigen_1d(mass: &Mat<f64>, stiffness: &Mat<f64>) -> Result<(Mat<f64>, Vec<f64>)> {
    let n = mass.nrows();
    let evd = mass
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let q = evd.U();
    let m = evd.S().column_vector();
    let mut inv_sqrt = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        if m[i] <= 0.0 {
            return Err(Error::Eigen("mass factor is not positive definite".into()));
        }
        let s = 1.0 / m[i].sqrt();
        for r in 0..n {
            for c in 0..n {
                inv_sqrt[(r, c)] += q[(r, i)] * s * q[(c, i)];
            }
        }
    }
    let b = &inv_sqrt * stiffness * &inv_sqrt;
    // symmetrize against rounding before the symmetric solver
    let b = Mat::from_fn(n, n, |i, j| 0.5 * (b[(i, j)] + b[(j, i)]));
    let evd = b
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let v = &inv_sqrt * evd.U();
    let lam = evd
        .S()
        .column_vector()
        .iter()
        .map(|&x| x.max(0.0))
        .collect();
    Ok((v, lam))
}

/// Kronecker eigenbasis of the full grid.
pub struct TensorBasis {
    vx: Mat<f64>,
    vy: Option<Mat<f64>>,
    nx: usize,
    ny: usize,
    /// `D`, indexed like the nodes.
    eigenvalues: Vec<f64>,
}

impl TensorBasis {
    pub fn new(ops: &GridOperators) -> Result<Self> {
        let ax = &ops.axes[0];
        let (vx, lx) = generalized_eigen_1d(&ax.mass, &ax.stiffness)?;
        let nx = lx.len();
        if ops.dim() == 1 {
            return Ok(Self {
                vx,
                vy: None,
                nx,
                ny: 1,
                eigenvalues: lx,
            });
        }
        let ay = &ops.axes[1];
        let (vy, ly) = generalized_eigen_1d(&ay.mass, &ay.stiffness)?;
        let ny = ly.len();
        let mut eigenvalues = Vec::with_capacity(nx * ny);
        for &b in &ly {
            for &a in &lx {
                eigenvalues.push(a + b);
            }
        }
        Ok(Self {
            vx,
            vy: Some(vy),
            nx,
            ny,
            eigenvalues,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `Vᵀ r`
    pub fn forward(&self, r: &[f64]) -> Vec<f64> {
        let rm = MatRef::from_column_major_slice(r, self.nx, self.ny);
        let out = match &self.vy {
            None => self.vx.transpose() * rm,
            Some(vy) => self.vx.transpose() * rm * vy,
        };
        flatten(&out)
    }

    /// `V c`
    pub fn backward(&self, c: &[f64]) -> Vec<f64> {
        let cm = MatRef::from_column_major_slice(c, self.nx, self.ny);
        let out = match &self.vy {
            None => &self.vx * cm,
            Some(vy) => &self.vx * cm * vy.transpose(),
        };
        flatten(&out)
    }
}

fn flatten(m: &Mat<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.nrows() * m.ncols());
    for j in 0..m.ncols() {
        v.extend(m.col(j).iter().copied());
    }
    v
}

pub struct TensorStageA {
    basis: Arc<TensorBasis>,
    // inverse of [[1, dt d], [ν₂ d + c, −1]] per mode, row major
    inverses: Vec<[f64; 4]>,
}

impl TensorStageA {
    fn new(basis: Arc<TensorBasis>, k: &StageCoefficients) -> Self {
        let inverses = basis
            .eigenvalues
            .iter()
            .map(|&d| {
                let (a, b, c, e) = (1.0, k.dt * d, k.nu2 * d + k.shift, -1.0);
                let det = a * e - b * c;
                [e / det, -b / det, -c / det, a / det]
            })
            .collect();
        Self { basis, inverses }
    }
}

impl BaseSolve for TensorStageA {
    fn dim(&self) -> usize {
        2 * self.inverses.len()
    }

    fn solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        let n = self.inverses.len();
        check_dim(2 * n, x.len())?;
        let r1 = self.basis.forward(&x[..n]);
        let r2 = self.basis.forward(&x[n..]);
        let mut w = vec![0.0; n];
        let mut p = vec![0.0; n];
        for i in 0..n {
            let inv = &self.inverses[i];
            w[i] = inv[0] * r1[i] + inv[1] * r2[i];
            p[i] = inv[2] * r1[i] + inv[3] * r2[i];
        }
        x[..n].copy_from_slice(&self.basis.backward(&w));
        x[n..].copy_from_slice(&self.basis.backward(&p));
        Ok(())
    }
}

pub struct TensorStageB {
    basis: Arc<TensorBasis>,
    inverses: Vec<f64>,
}

impl TensorStageB {
    fn new(basis: Arc<TensorBasis>, dt: f64) -> Self {
        let inverses = basis.eigenvalues.iter().map(|&d| 1.0 / (1.0 + dt * d)).collect();
        Self { basis, inverses }
    }
}

impl BaseSolve for TensorStageB {
    fn dim(&self) -> usize {
        self.inverses.len()
    }

    fn solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        check_dim(self.inverses.len(), x.len())?;
        let mut c = self.basis.forward(x);
        for (ci, s) in c.iter_mut().zip(&self.inverses) {
            *ci *= s;
        }
        x.copy_from_slice(&self.basis.backward(&c));
        Ok(())
    }
}

pub struct SparseLu {
    n: usize,
    lu: Lu<usize, f64>,
}

impl SparseLu {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let lu = a
            .to_faer()
            .sp_lu()
            .map_err(|e| Error::Solve(format!("sparse LU failed: {e:?}")))?;
        Ok(Self { n: a.nrows(), lu })
    }
}

impl BaseSolve for SparseLu {
    fn dim(&self) -> usize {
        self.n
    }

    fn solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        check_dim(self.n, x.len())?;
        self.lu
            .solve_in_place(MatMut::from_column_major_slice_mut(x, self.n, 1));
        finite_or_err(x)
    }
}

pub struct SparseLlt {
    n: usize,
    llt: Llt<usize, f64>,
}

impl SparseLlt {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let llt = a
            .to_faer()
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::Solve(format!("sparse Cholesky failed: {e:?}")))?;
        Ok(Self { n: a.nrows(), llt })
    }
}

impl BaseSolve for SparseLlt {
    fn dim(&self) -> usize {
        self.n
    }

    fn solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        check_dim(self.n, x.len())?;
        self.llt
            .solve_in_place(MatMut::from_column_major_slice_mut(x, self.n, 1));
        finite_or_err(x)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn finite_or_err(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Solve("non-finite solution".into()))
    }
}

/// `(A + E D Eᵀ)⁻¹` given a solver for `A`. `E` has `dim` rows; only its
/// first `E.nrows()` rows may be nonzero, so for stage A the update touches
/// the `w` block alone.
pub struct LowRankUpdate {
    base: Arc<dyn BaseSolve>,
    e: Mat<f64>,
    d: Mat<f64>,
    /// `A⁻¹ [E; 0]`
    y: Mat<f64>,
    capacitance: faer::linalg::solvers::PartialPivLu<f64>,
}

impl LowRankUpdate {
    pub fn new(base: Arc<dyn BaseSolve>, e: Mat<f64>, d: Mat<f64>) -> Result<Self> {
        let dim = base.dim();
        let k = e.ncols();
        if d.nrows() != k || d.ncols() != k || e.nrows() > dim {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: d.nrows(),
            });
        }
        let mut y = Mat::<f64>::zeros(dim, k);
        let mut col = vec![0.0; dim];
        for j in 0..k {
            col.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..e.nrows() {
                col[i] = e[(i, j)];
            }
            base.solve_in_place(&mut col)?;
            for i in 0..dim {
                y[(i, j)] = col[i];
            }
        }
        // I + D Eᵀ Y
        let ety = e.transpose() * y.get(0..e.nrows(), 0..k);
        let cap = Mat::<f64>::identity(k, k) + &d * &ety;
        let capacitance = cap.partial_piv_lu();
        Ok(Self {
            base,
            e,
            d,
            y,
            capacitance,
        })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        self.base.solve_in_place(x)?;
        let k = self.e.ncols();
        if k == 0 {
            return Ok(());
        }
        let m = self.e.nrows();
        let mut s = Mat::<f64>::zeros(k, 1);
        for j in 0..k {
            let mut acc = 0.0;
            for i in 0..m {
                acc += self.e[(i, j)] * x[i];
            }
            s[(j, 0)] = acc;
        }
        let s = &self.d * &s;
        let t = self.capacitance.solve(&s);
        for i in 0..x.len() {
            let mut acc = 0.0;
            for j in 0..k {
                acc += self.y[(i, j)] * t[(j, 0)];
            }
            x[i] -= acc;
        }
        finite_or_err(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assemble, GridSpec};

    fn residual_rel(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
        let ax = a.mul_vec(x);
        let num: f64 = ax.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        let den: f64 = b.iter().map(|q| q * q).sum();
        (num / den).sqrt()
    }

    fn rhs(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.4).collect()
    }

    #[test]
    fn eigenbasis_is_mass_orthonormal() {
        let ops = assemble(&GridSpec::interval(2.0, 11)).unwrap();
        let (v, lam) = generalized_eigen_1d(&ops.axes[0].mass, &ops.axes[0].stiffness).unwrap();
        let vmv = v.transpose() * &ops.axes[0].mass * &v;
        let vsv = v.transpose() * &ops.axes[0].stiffness * &v;
        for i in 0..12 {
            for j in 0..12 {
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((vmv[(i, j)] - id).abs() < 1e-12);
                let dl = if i == j { lam[i] } else { 0.0 };
                assert!((vsv[(i, j)] - dl).abs() < 1e-9 * (1.0 + lam[11]));
            }
        }
        assert!(lam[0].abs() < 1e-10);
    }

    #[test]
    fn backends_solve_both_stages() {
        let k = StageCoefficients {
            dt: 1e-3,
            nu2: 0.005,
            shift: 4.1,
        };
        for spec in [
            GridSpec::new(vec![1.0, 0.7], vec![9, 6]).unwrap(),
            GridSpec::interval(1.0, 17),
        ] {
            let ops = assemble(&spec).unwrap();
            let n = ops.n_nodes();
            let a = stage_a_matrix(&ops, &k);
            let b = stage_b_matrix(&ops, k.dt);
            for backend in [Backend::Tensor, Backend::SparseDirect] {
                let (sa, sb) = build_stage_solvers(&ops, &k, backend).unwrap();
                let ra = rhs(2 * n);
                let xa = sa.solve(&ra).unwrap();
                assert!(residual_rel(&a, &xa, &ra) < 1e-12, "{backend:?}");
                let rb = rhs(n);
                let xb = sb.solve(&rb).unwrap();
                assert!(residual_rel(&b, &xb, &rb) < 1e-12, "{backend:?}");
            }
        }
    }

    #[test]
    fn woodbury_matches_assembled_update() {
        let ops = assemble(&GridSpec::unit_square(7)).unwrap();
        let n = ops.n_nodes();
        let k = StageCoefficients {
            dt: 1e-2,
            nu2: 0.01,
            shift: 4.0,
        };
        let (sa, _) = build_stage_solvers(&ops, &k, Backend::Tensor).unwrap();
        let e = Mat::from_fn(n, 2, |i, j| if (i + j) % 5 == 0 { 1.0 + j as f64 } else { 0.0 });
        let d = Mat::from_fn(2, 2, |i, j| if i == j { 30.0 } else { 5.0 });
        let upd = LowRankUpdate::new(sa.clone(), e.clone(), d.clone()).unwrap();

        let ede = &e * &d * e.transpose();
        let mut entries: Vec<_> = stage_a_matrix(&ops, &k).iter().collect();
        for i in 0..n {
            for j in 0..n {
                if ede[(i, j)] != 0.0 {
                    entries.push((i, j, ede[(i, j)]));
                }
            }
        }
        let full = CsrMatrix::from_triplets(2 * n, 2 * n, &entries);
        let r = rhs(2 * n);
        let mut x = r.clone();
        upd.solve_in_place(&mut x).unwrap();
        assert!(residual_rel(&full, &x, &r) < 1e-11);
    }
}
