//! Structured Q1 finite elements on rectangles with homogeneous Neumann
//! boundary conditions.
//!
//! Nodes are ordered lexicographically with `x₁` running fastest:
//! node `(i, j)` has index `i + (n₁ + 1) j`. Snapshot files use the same
//! ordering.
//!
//! The assembled mass matrix `M` and stiffness matrix `S` realize the
//! discrete inner products
//!
//! ```text
//! ‖u‖²_H    = uᵀ M u
//! |u|²_V₀   = uᵀ S u
//! ‖u‖²_V    = uᵀ (S + M) u
//! ‖u‖²_D(A) = uᵀ (S + M) M⁻¹ (S + M) u     (full convention)
//!           = uᵀ S M⁻¹ S u                 (paper convention)
//! ```
//!
//! `M⁻¹` is never formed; every application is a sparse Cholesky solve.

use faer::prelude::*;
use faer::sparse::linalg::solvers::Llt;
use faer::{MatMut, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Tolerance on the relative residual of every mass solve.
pub const MASS_SOLVE_TOL: f64 = 1e-12;

const GAUSS2: [(f64, f64); 2] = [
    (0.211_324_865_405_187_1, 0.5),
    (0.788_675_134_594_812_9, 0.5),
];

// 3-point rule, exact through degree 5: integrates the quartic double-well
// of a Q1 field and cubic loads against the basis exactly.
const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_3, 5.0 / 18.0),
    (0.5, 4.0 / 9.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

/// Which quadratic form realizes `‖·‖²_D(A)` (and the matching `V` pairing in
/// the heat feedback).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DaConvention {
    /// `S M⁻¹ S`, and `S` for the heat pairing.
    #[default]
    Paper,
    /// `(S + M) M⁻¹ (S + M)`, and `S + M` for the heat pairing.
    Full,
}

impl DaConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            DaConvention::Paper => "paper",
            DaConvention::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Side lengths `L_n` of the rectangle, one per dimension.
    pub lengths: Vec<f64>,
    /// Cell counts `n_n` per dimension.
    pub cells: Vec<usize>,
}

impl GridSpec {
    pub fn new(lengths: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let spec = Self { lengths, cells };
        spec.validate()?;
        Ok(spec)
    }

    /// `[0, 1]²` with `n × n` cells.
    pub fn unit_square(n: usize) -> Self {
        Self {
            lengths: vec![1.0, 1.0],
            cells: vec![n, n],
        }
    }

    /// `[0, length]` with `n` cells.
    pub fn interval(length: f64, n: usize) -> Self {
        Self {
            lengths: vec![length],
            cells: vec![n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lengths.len();
        if !(1..=2).contains(&d) {
            return Err(Error::InvalidGrid(format!(
                "dimension must be 1 or 2, got {d}"
            )));
        }
        if self.cells.len() != d {
            return Err(Error::InvalidGrid(format!(
                "{} lengths but {} cell counts",
                d,
                self.cells.len()
            )));
        }
        for (n, (&l, &c)) in self.lengths.iter().zip(&self.cells).enumerate() {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidGrid(format!(
                    "length along axis {n} must be positive, got {l}"
                )));
            }
            if c < 2 {
                return Err(Error::InvalidGrid(format!(
                    "need at least 2 cells along axis {n}, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn nodes_per_axis(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c + 1).collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.cells.iter().map(|c| c + 1).product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.cells[axis] as f64
    }

    /// `|Ω|`
    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }
}

/// 1-D factor matrices along one axis; the 2-D operators are their Kronecker
/// products `M = M₂ ⊗ M₁`, `S = S₂ ⊗ M₁ + M₂ ⊗ S₁`.
#[derive(Clone, Debug)]
pub struct AxisFactors {
    pub mass: Mat<f64>,
    pub stiffness: Mat<f64>,
}

pub struct GridOperators {
    pub spec: GridSpec,
    pub mass: CsrMatrix,
    pub stiffness: CsrMatrix,
    /// Node coordinates; the second entry is zero in 1-D.
    pub coords: Vec<[f64; 2]>,
    pub axes: Vec<AxisFactors>,
    mass_factor: Llt<usize, f64>,
    elements: Vec<[usize; 4]>,
    nodes_per_element: usize,
    // basis values at the 3-point product rule, with weights times |J|
    quad_basis: Vec<[f64; 4]>,
    quad_weights: Vec<f64>,
}

impl std::fmt::Debug for GridOperators {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridOperators")
            .field("spec", &self.spec)
            .field("n_nodes", &self.n_nodes())
            .finish_non_exhaustive()
    }
}

fn hat(local: usize, xi: f64) -> f64 {
    if local == 0 {
        1.0 - xi
    } else {
        xi
    }
}

fn hat_deriv(local: usize) -> f64 {
    if local == 0 {
        -1.0
    } else {
        1.0
    }
}

/// 1-D element matrices for a cell of width `h`, by 2-point Gauss quadrature.
fn element_1d(h: f64) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    let mut m = [[0.0; 2]; 2];
    let mut s = [[0.0; 2]; 2];
    for &(xi, w) in &GAUSS2 {
        for a in 0..2 {
            for b in 0..2 {
                m[a][b] += w * hat(a, xi) * hat(b, xi) * h;
                s[a][b] += w * hat_deriv(a) * hat_deriv(b) / h;
            }
        }
    }
    (m, s)
}

fn axis_factors(length: f64, cells: usize) -> AxisFactors {
    let h = length / cells as f64;
    let (me, se) = element_1d(h);
    let n = cells + 1;
    let mut mass = Mat::<f64>::zeros(n, n);
    let mut stiffness = Mat::<f64>::zeros(n, n);
    for e in 0..cells {
        for a in 0..2 {
            for b in 0..2 {
                mass[(e + a, e + b)] += me[a][b];
                stiffness[(e + a, e + b)] += se[a][b];
            }
        }
    }
    AxisFactors { mass, stiffness }
}

/// Assembles mass and stiffness matrices for `spec`.
pub fn assemble(spec: &GridSpec) -> Result<GridOperators> {
    spec.validate()?;
    let d = spec.dim();
    let nodes = spec.nodes_per_axis();
    let n = spec.n_nodes();
    let h: Vec<f64> = (0..d).map(|a| spec.spacing(a)).collect();

    let mut coords = Vec::with_capacity(n);
    if d == 1 {
        for i in 0..nodes[0] {
            coords.push([i as f64 * h[0], 0.0]);
        }
    } else {
        for j in 0..nodes[1] {
            for i in 0..nodes[0] {
                coords.push([i as f64 * h[0], j as f64 * h[1]]);
            }
        }
    }

    let nodes_per_element = 1 << d;
    let mut elements = Vec::new();
    if d == 1 {
        for e in 0..spec.cells[0] {
            elements.push([e, e + 1, 0, 0]);
        }
    } else {
        let nx = nodes[0];
        for ey in 0..spec.cells[1] {
            for ex in 0..spec.cells[0] {
                let base = ex + nx * ey;
                elements.push([base, base + 1, base + nx, base + nx + 1]);
            }
        }
    }

    // Element matrices by product Gauss quadrature on the reference cell.
    let jac: f64 = h.iter().product();
    let points: Vec<(Vec<f64>, f64)> = if d == 1 {
        GAUSS2.iter().map(|&(x, w)| (vec![x], w)).collect()
    } else {
        GAUSS2
            .iter()
            .flat_map(|&(y, wy)| GAUSS2.iter().map(move |&(x, wx)| (vec![x, y], wx * wy)))
            .collect()
    };
    let local = |a: usize, axis: usize| (a >> axis) & 1;
    let mut me = vec![vec![0.0; nodes_per_element]; nodes_per_element];
    let mut se = vec![vec![0.0; nodes_per_element]; nodes_per_element];
    for (xi, w) in &points {
        for a in 0..nodes_per_element {
            for b in 0..nodes_per_element {
                let phi_a: f64 = (0..d).map(|k| hat(local(a, k), xi[k])).product();
                let phi_b: f64 = (0..d).map(|k| hat(local(b, k), xi[k])).product();
                let mut grad = 0.0;
                for k in 0..d {
                    let mut ga = hat_deriv(local(a, k)) / h[k];
                    let mut gb = hat_deriv(local(b, k)) / h[k];
                    for o in (0..d).filter(|&o| o != k) {
                        ga *= hat(local(a, o), xi[o]);
                        gb *= hat(local(b, o), xi[o]);
                    }
                    grad += ga * gb;
                }
                me[a][b] += w * phi_a * phi_b * jac;
                se[a][b] += w * grad * jac;
            }
        }
    }

    let mut mt = Vec::with_capacity(elements.len() * nodes_per_element * nodes_per_element);
    let mut st = Vec::with_capacity(mt.capacity());
    for el in &elements {
        for a in 0..nodes_per_element {
            for b in 0..nodes_per_element {
                mt.push((el[a], el[b], me[a][b]));
                st.push((el[a], el[b], se[a][b]));
            }
        }
    }
    let mass = CsrMatrix::from_triplets(n, n, &mt);
    let stiffness = CsrMatrix::from_triplets(n, n, &st);

    let mass_factor = mass
        .to_faer()
        .sp_cholesky(Side::Lower)
        .map_err(|e| Error::Solve(format!("mass matrix Cholesky failed: {e:?}")))?;

    let qpoints: Vec<(Vec<f64>, f64)> = if d == 1 {
        GAUSS3.iter().map(|&(x, w)| (vec![x], w)).collect()
    } else {
        GAUSS3
            .iter()
            .flat_map(|&(y, wy)| GAUSS3.iter().map(move |&(x, wx)| (vec![x, y], wx * wy)))
            .collect()
    };
    let mut quad_basis = Vec::with_capacity(qpoints.len());
    let mut quad_weights = Vec::with_capacity(qpoints.len());
    for (xi, w) in &qpoints {
        let mut vals = [0.0; 4];
        for (a, v) in vals.iter_mut().enumerate().take(nodes_per_element) {
            *v = (0..d).map(|k| hat(local(a, k), xi[k])).product();
        }
        quad_basis.push(vals);
        quad_weights.push(w * jac);
    }

    let axes = (0..d)
        .map(|k| axis_factors(spec.lengths[k], spec.cells[k]))
        .collect();

    Ok(GridOperators {
        spec: spec.clone(),
        mass,
        stiffness,
        coords,
        axes,
        mass_factor,
        elements,
        nodes_per_element,
        quad_basis,
        quad_weights,
    })
}

impl GridOperators {
    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn volume(&self) -> f64 {
        self.spec.volume()
    }

    pub fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: self.n_nodes(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// Evaluates a function at every node.
    pub fn interpolate(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        self.coords.iter().map(|&x| f(x)).collect()
    }

    /// `M⁻¹ b` by the cached sparse Cholesky factor, with one step of
    /// iterative refinement when the first residual is above tolerance.
    pub fn mass_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b)?;
        let n = b.len();
        let mut x = b.to_vec();
        self.mass_factor
            .solve_in_place(MatMut::from_column_major_slice_mut(&mut x, n, 1));
        let bnorm = l2(b);
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut residual = self.residual(&x, b);
        let mut rel = l2(&residual) / bnorm;
        if rel > MASS_SOLVE_TOL {
            self.mass_factor
                .solve_in_place(MatMut::from_column_major_slice_mut(&mut residual, n, 1));
            for (xi, ci) in x.iter_mut().zip(&residual) {
                *xi += ci;
            }
            rel = l2(&self.residual(&x, b)) / bnorm;
        }
        if rel > MASS_SOLVE_TOL {
            return Err(Error::MassResidual {
                residual: rel,
                tolerance: MASS_SOLVE_TOL,
            });
        }
        Ok(x)
    }

    fn residual(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        let mx = self.mass.mul_vec(x);
        b.iter().zip(&mx).map(|(bi, mi)| bi - mi).collect()
    }

    /// Column-wise `M⁻¹ B`.
    pub fn mass_solve_mat(&self, b: &Mat<f64>) -> Result<Mat<f64>> {
        let mut out = Mat::<f64>::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col: Vec<f64> = b.col(j).iter().copied().collect();
            let x = self.mass_solve(&col)?;
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    /// The sparse matrix `A_D` defining the V inner product under `conv`:
    /// `S` (paper) or `S + M` (full).
    pub fn shifted_operator(&self, conv: DaConvention) -> CsrMatrix {
        match conv {
            DaConvention::Paper => self.stiffness.clone(),
            DaConvention::Full => self.stiffness.linear_combination(1.0, &self.mass, 1.0),
        }
    }

    pub fn norm_h(&self, u: &[f64]) -> Result<f64> {
        self.check_len(u)?;
        Ok(self.mass.quad_form(u).max(0.0).sqrt())
    }

    pub fn seminorm_v0(&self, u: &[f64]) -> Result<f64> {
        self.check_len(u)?;
        Ok(self.stiffness.quad_form(u).max(0.0).sqrt())
    }

    pub fn norm_v(&self, u: &[f64]) -> Result<f64> {
        self.check_len(u)?;
        Ok((self.stiffness.quad_form(u) + self.mass.quad_form(u))
            .max(0.0)
            .sqrt())
    }

    /// `‖u‖_D(A)` under the full convention.
    pub fn norm_da(&self, u: &[f64]) -> Result<f64> {
        self.norm_da_with(u, DaConvention::Full)
    }

    pub fn norm_da_with(&self, u: &[f64], conv: DaConvention) -> Result<f64> {
        Ok(self.da_form(u, conv)?.max(0.0).sqrt())
    }

    /// `uᵀ K M⁻¹ K u` with `K` the shifted operator of `conv`.
    pub fn da_form(&self, u: &[f64], conv: DaConvention) -> Result<f64> {
        self.check_len(u)?;
        let k = self.shifted_operator(conv);
        let ku = k.mul_vec(u);
        let y = self.mass_solve(&ku)?;
        Ok(dot(&ku, &y))
    }

    /// `∫_Ω F(u_h) dx` with the 3-point product Gauss rule per cell.
    pub fn integrate(&self, u: &[f64], f: impl Fn(f64) -> f64) -> f64 {
        let npe = self.nodes_per_element;
        let mut total = 0.0;
        for el in &self.elements {
            let mut local = 0.0;
            for (phi, w) in self.quad_basis.iter().zip(&self.quad_weights) {
                let uh: f64 = (0..npe).map(|a| phi[a] * u[el[a]]).sum();
                local += w * f(uh);
            }
            total += local;
        }
        total
    }

    /// Load vector `bᵢ = ∫_Ω f(u_h) φᵢ dx` by the same quadrature as
    /// [`integrate`](Self::integrate).
    pub fn load_vector(&self, u: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        let npe = self.nodes_per_element;
        let mut b = vec![0.0; self.n_nodes()];
        for el in &self.elements {
            let mut local = [0.0; 4];
            for (phi, w) in self.quad_basis.iter().zip(&self.quad_weights) {
                let uh: f64 = (0..npe).map(|a| phi[a] * u[el[a]]).sum();
                let fw = w * f(uh);
                for a in 0..npe {
                    local[a] += fw * phi[a];
                }
            }
            for a in 0..npe {
                b[el[a]] += local[a];
            }
        }
        b
    }

    /// `𝟙ᵀ M u`, the integral of `u_h`.
    pub fn mass_of(&self, u: &[f64]) -> f64 {
        let mu = self.mass.mul_vec(u);
        mu.iter().sum()
    }

    /// A short, stable fingerprint of the discretization.
    pub fn fingerprint(&self) -> String {
        let lengths: Vec<String> = self.spec.lengths.iter().map(|l| format!("{l:e}")).collect();
        let cells: Vec<String> = self.spec.cells.iter().map(|c| c.to_string()).collect();
        format!("q1;L={};n={}", lengths.join(","), cells.join(","))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_mass_and_stiffness_patterns() {
        let ops = assemble(&GridSpec::interval(1.0, 2)).unwrap();
        let h = 0.5;
        let m = [[2.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 2.0]];
        let s = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((ops.mass.get(i, j) - h / 6.0 * m[i][j]).abs() < 1e-15);
                assert!((ops.stiffness.get(i, j) - s[i][j] / h).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(GridSpec::new(vec![1.0, -1.0], vec![4, 4]).is_err());
        assert!(GridSpec::new(vec![1.0, 1.0], vec![4, 1]).is_err());
        assert!(GridSpec::new(vec![1.0, 1.0, 1.0], vec![4, 4, 4]).is_err());
        assert!(GridSpec::new(vec![1.0], vec![4, 4]).is_err());
        assert!(assemble(&GridSpec::unit_square(0)).is_err());
    }

    #[test]
    fn kernel_and_partition_of_unity() {
        for spec in [
            GridSpec::unit_square(5),
            GridSpec::new(vec![2.0, 0.5], vec![7, 3]).unwrap(),
            GridSpec::interval(3.0, 9),
        ] {
            let ops = assemble(&spec).unwrap();
            let ones = vec![1.0; ops.n_nodes()];
            assert!((ops.mass.quad_form(&ones) - spec.volume()).abs() < 1e-13);
            let s1 = ops.stiffness.mul_vec(&ones);
            assert!(l2(&s1) < 1e-12);
            assert!(ops.mass.is_symmetric());
            assert!(ops.stiffness.is_symmetric());
            assert_eq!(ops.n_nodes(), spec.n_nodes());
        }
    }

    #[test]
    fn constant_norms() {
        let ops = assemble(&GridSpec::unit_square(6)).unwrap();
        let ones = vec![1.0; ops.n_nodes()];
        assert!((ops.norm_h(&ones).unwrap() - 1.0).abs() < 1e-13);
        assert!(ops.seminorm_v0(&ones).unwrap() < 1e-6);
        assert!((ops.norm_v(&ones).unwrap() - 1.0).abs() < 1e-13);
        assert!((ops.norm_da(&ones).unwrap() - 1.0).abs() < 1e-12);
        assert!(ops.norm_h(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn kronecker_structure_matches_assembly() {
        let ops = assemble(&GridSpec::new(vec![1.0, 2.0], vec![3, 4]).unwrap()).unwrap();
        let (a1, a2) = (&ops.axes[0], &ops.axes[1]);
        let nx = 4;
        for i in 0..ops.n_nodes() {
            for j in 0..ops.n_nodes() {
                let (ix, iy) = (i % nx, i / nx);
                let (jx, jy) = (j % nx, j / nx);
                let m = a2.mass[(iy, jy)] * a1.mass[(ix, jx)];
                let s = a2.stiffness[(iy, jy)] * a1.mass[(ix, jx)]
                    + a2.mass[(iy, jy)] * a1.stiffness[(ix, jx)];
                assert!((ops.mass.get(i, j) - m).abs() < 1e-15);
                assert!((ops.stiffness.get(i, j) - s).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn quadrature_is_exact_for_quartics_of_linear_fields() {
        // u = x on [0, 1]: ∫ u⁴ = 1/5 exactly even on a coarse grid
        let ops = assemble(&GridSpec::interval(1.0, 3)).unwrap();
        let u = ops.interpolate(|x| x[0]);
        assert!((ops.integrate(&u, |v| v.powi(4)) - 0.2).abs() < 1e-15);
        // load of f ≡ 1 equals M 𝟙
        let ones = vec![1.0; ops.n_nodes()];
        let b = ops.load_vector(&ones, |_| 1.0);
        let m1 = ops.mass.mul_vec(&ones);
        for (x, y) in b.iter().zip(&m1) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn mass_solve_inverts() {
        let ops = assemble(&GridSpec::unit_square(9)).unwrap();
        let b = ops.interpolate(|x| (3.0 * x[0]).sin() + x[1] * x[1]);
        let y = ops.mass_solve(&b).unwrap();
        let my = ops.mass.mul_vec(&y);
        let err: f64 = my.iter().zip(&b).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        assert!(err < 1e-13);
    }
}
