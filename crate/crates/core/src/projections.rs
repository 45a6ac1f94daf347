//! Oblique projections and the precomputed feedback gains.
//!
//! For a family with indicators `U` and auxiliary bumps `Ũ`
//!
//! ```text
//! G = Uᵀ M Ũ,   Q = G⁻¹
//! P y = Ũ Q Uᵀ M y               projection onto span Ũ along (span U)^⊥
//! F̂  = −λ Qᵀ R Q Uᵀ M            input coordinates û = F̂ (w − w_ref)
//! ```
//!
//! with `R = Ũᵀ K M⁻¹ K Ũ` for the order family and `R = Ũᵀ K Ũ` for the
//! heat family, where `K` is `S` or `S + M` depending on [`DaConvention`].
//! The feedback enters the weak form as the load `M U û`.

use faer::prelude::*;
use faer::Mat;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::actuators::{ActuatorFamily, Family};
use crate::dense::{max_abs, sym_gen_eig};
use crate::error::{Error, Result};
use crate::grid::{dot, DaConvention, GridOperators};

#[derive(Clone, Debug)]
pub struct Coupling {
    pub g1: Mat<f64>,
    pub q1: Mat<f64>,
    pub g2: Mat<f64>,
    pub q2: Mat<f64>,
}

impl Coupling {
    pub fn q(&self, family: Family) -> &Mat<f64> {
        match family {
            Family::Order => &self.q1,
            Family::Heat => &self.q2,
        }
    }

    pub fn g(&self, family: Family) -> &Mat<f64> {
        match family {
            Family::Order => &self.g1,
            Family::Heat => &self.g2,
        }
    }
}

/// Relative floor below which a diagonal coupling entry means the mesh does
/// not see the actuator.
pub const COUPLING_FLOOR: f64 = 1e-14;

pub fn assemble_coupling(fam: &ActuatorFamily, ops: &GridOperators) -> Result<Coupling> {
    let floor = COUPLING_FLOOR * ops.volume();
    let mut gq = Vec::new();
    for family in [Family::Order, Family::Heat] {
        let u = fam.indicators(family);
        let mut_ = ops.mass.mul_dense(fam.auxiliary(family));
        let g = u.transpose() * &mut_;
        for j in 0..g.nrows() {
            if !(g[(j, j)] > floor) {
                return Err(Error::UnresolvedActuator {
                    family: family.as_str(),
                    index: j,
                    value: g[(j, j)],
                    floor,
                });
            }
        }
        let q = inverse(&g)?;
        gq.push((g, q));
    }
    let (g2, q2) = gq.pop().expect("two families");
    let (g1, q1) = gq.pop().expect("two families");
    Ok(Coupling { g1, q1, g2, q2 })
}

pub(crate) fn inverse(g: &Mat<f64>) -> Result<Mat<f64>> {
    let k = g.nrows();
    let diagonal = (0..k).all(|i| (0..k).all(|j| i == j || g[(i, j)] == 0.0));
    let q = if diagonal {
        Mat::from_fn(k, k, |i, j| if i == j { 1.0 / g[(i, i)] } else { 0.0 })
    } else {
        g.partial_piv_lu().solve(Mat::<f64>::identity(k, k))
    };
    let check = g * &q - Mat::<f64>::identity(k, k);
    if k > 0 && max_abs(&check) > 1e-12 {
        return Err(Error::Solve(format!(
            "coupling inverse residual {:e}",
            max_abs(&check)
        )));
    }
    Ok(q)
}

#[derive(Clone, Debug)]
pub struct FeedbackGains {
    pub lambda1: f64,
    pub lambda2: f64,
    pub convention: DaConvention,
    /// `F̂₁ ∈ ℝ^{M_σ×N}`
    pub f1: Mat<f64>,
    /// `F̂₂ ∈ ℝ^{M_ς×N}`
    pub f2: Mat<f64>,
    pub r1: Mat<f64>,
    pub r2: Mat<f64>,
}

impl FeedbackGains {
    pub fn f(&self, family: Family) -> &Mat<f64> {
        match family {
            Family::Order => &self.f1,
            Family::Heat => &self.f2,
        }
    }

    pub fn lambda(&self, family: Family) -> f64 {
        match family {
            Family::Order => self.lambda1,
            Family::Heat => self.lambda2,
        }
    }
}

/// `R₁` and `R₂` under `conv`.
pub fn gain_kernels(
    fam: &ActuatorFamily,
    ops: &GridOperators,
    conv: DaConvention,
) -> Result<(Mat<f64>, Mat<f64>)> {
    let k = ops.shifted_operator(conv);
    let ku = k.mul_dense(&fam.u_tilde);
    let minv_ku = ops.mass_solve_mat(&ku)?;
    let r1 = crate::dense::symmetrize(&(ku.transpose() * &minv_ku));
    let kv = k.mul_dense(&fam.v_tilde);
    let r2 = crate::dense::symmetrize(&(fam.v_tilde.transpose() * &kv));
    Ok((r1, r2))
}

pub fn build_gains(
    fam: &ActuatorFamily,
    ops: &GridOperators,
    coupling: &Coupling,
    lambda1: f64,
    lambda2: f64,
    conv: DaConvention,
) -> Result<FeedbackGains> {
    for (name, l) in [("lambda1", lambda1), ("lambda2", lambda2)] {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "{name} must be finite and nonnegative, got {l}"
            )));
        }
    }
    let (r1, r2) = gain_kernels(fam, ops, conv)?;
    let unit = |r: &Mat<f64>, family: Family| {
        let q = coupling.q(family);
        let w = ops.mass.mul_dense(fam.indicators(family));
        q.transpose() * r * q * w.transpose()
    };
    // scale last so that F̂ is exactly linear in λ
    let f1 = Mat::from_fn(r1.nrows(), ops.n_nodes(), {
        let b = unit(&r1, Family::Order);
        move |i, j| -(lambda1 * b[(i, j)])
    });
    let f2 = Mat::from_fn(r2.nrows(), ops.n_nodes(), {
        let b = unit(&r2, Family::Heat);
        move |i, j| -(lambda2 * b[(i, j)])
    });
    Ok(FeedbackGains {
        lambda1,
        lambda2,
        convention: conv,
        f1,
        f2,
        r1,
        r2,
    })
}

/// `P y = Ũ Q Uᵀ M y` for the chosen family.
pub fn project_tilde(
    fam: &ActuatorFamily,
    coupling: &Coupling,
    ops: &GridOperators,
    y: &[f64],
    family: Family,
) -> Result<Vec<f64>> {
    ops.check_len(y)?;
    let my = ops.mass.mul_vec(y);
    let u = fam.indicators(family);
    let a: Vec<f64> = (0..u.ncols())
        .map(|j| (0..u.nrows()).map(|i| u[(i, j)] * my[i]).sum())
        .collect();
    let q = coupling.q(family);
    let alpha: Vec<f64> = (0..q.nrows())
        .map(|i| (0..q.ncols()).map(|j| q[(i, j)] * a[j]).sum())
        .collect();
    let ut = fam.auxiliary(family);
    Ok((0..ut.nrows())
        .map(|i| (0..ut.ncols()).map(|j| ut[(i, j)] * alpha[j]).sum())
        .collect())
}

/// Dense `N×N` matrix of the projection; only for small grids.
pub fn projection_matrix(
    fam: &ActuatorFamily,
    coupling: &Coupling,
    ops: &GridOperators,
    family: Family,
) -> Mat<f64> {
    let w = ops.mass.mul_dense(fam.indicators(family));
    fam.auxiliary(family) * coupling.q(family) * w.transpose()
}

/// Input coordinates `û = F̂ diff` and weak-form load `M U û`.
pub fn feedback_load(
    gains: &FeedbackGains,
    fam: &ActuatorFamily,
    ops: &GridOperators,
    diff: &[f64],
    family: Family,
) -> Result<(Vec<f64>, Vec<f64>)> {
    ops.check_len(diff)?;
    let f = gains.f(family);
    let coords: Vec<f64> = (0..f.nrows())
        .map(|i| (0..f.ncols()).map(|j| f[(i, j)] * diff[j]).sum())
        .collect();
    let u = fam.indicators(family);
    let uc: Vec<f64> = (0..u.nrows())
        .map(|i| (0..u.ncols()).map(|j| u[(i, j)] * coords[j]).sum())
        .collect();
    Ok((coords, ops.mass.mul_vec(&uc)))
}

/// Factors `F̂ = −C Wᵀ` with `W = M U`, recovering `C = −F̂ U (UᵀMU)⁻¹` from
/// the stored gain so that implicit solvers apply exactly the gain in use.
pub fn low_rank_factors(
    gains: &FeedbackGains,
    fam: &ActuatorFamily,
    ops: &GridOperators,
    family: Family,
) -> Result<(Mat<f64>, Mat<f64>)> {
    let u = fam.indicators(family);
    let w = ops.mass.mul_dense(u);
    let gu = u.transpose() * &w;
    let fu = gains.f(family) * u;
    let c = -(fu * inverse(&gu)?);
    Ok((w, c))
}

/// `‖P‖_{L(H)}` for the projection onto `span aux` along `(span ind)^⊥`.
///
/// With `a = indᵀ M y` the largest ratio `‖Py‖²_H / ‖y‖²_H` is the top
/// eigenvalue of the pencil `(G N G, G)` where `G = indᵀ M ind` and
/// `N = Qᵀ (auxᵀ M aux) Q`.
pub fn oblique_projection_norm(ind: &Mat<f64>, aux: &Mat<f64>, ops: &GridOperators) -> Result<f64> {
    let mi = ops.mass.mul_dense(ind);
    let ma = ops.mass.mul_dense(aux);
    let g = ind.transpose() * &mi;
    let coupling = ind.transpose() * &ma;
    let q = inverse(&coupling)?;
    let ga = aux.transpose() * &ma;
    let n = q.transpose() * ga * &q;
    let a = &g * n * &g;
    let (vals, _) = sym_gen_eig(&a, &g)?;
    let top = vals.last().copied().unwrap_or(0.0);
    Ok(top.max(0.0).sqrt())
}

pub fn projection_operator_norm(fam: &ActuatorFamily, ops: &GridOperators, family: Family) -> Result<f64> {
    oblique_projection_norm(fam.indicators(family), fam.auxiliary(family), ops)
}

/// Deterministic sample vectors with entries uniform in `[−1, 1]`.
pub fn sample_vectors(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect()
}

#[derive(Clone, Debug)]
pub struct DissipativityReport {
    pub family: Family,
    pub samples: usize,
    /// Largest relative gap between `(F w, w)_H` and `−λ ‖P w‖²`.
    pub max_rel_error: f64,
    /// Largest value of `(F w, w)_H`; must not be positive.
    pub max_value: f64,
}

impl DissipativityReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol && self.max_value <= 0.0
    }
}

/// Compares `(F w, w)_H = wᵀ M U F̂ w`, computed from the stored gain, with
/// `−λ (Pw)ᵀ K M⁻¹ K (Pw)` (order) or `−λ (Pw)ᵀ K (Pw)` (heat), computed
/// from the projection and the grid forms.
pub fn check_dissipativity(
    gains: &FeedbackGains,
    fam: &ActuatorFamily,
    coupling: &Coupling,
    ops: &GridOperators,
    family: Family,
    samples: &[Vec<f64>],
) -> Result<DissipativityReport> {
    let lambda = gains.lambda(family);
    let k = ops.shifted_operator(gains.convention);
    let mut max_rel_error = 0.0f64;
    let mut max_value = f64::NEG_INFINITY;
    for w in samples {
        let (_, load) = feedback_load(gains, fam, ops, w, family)?;
        let lhs = dot(&load, w);
        let pw = project_tilde(fam, coupling, ops, w, family)?;
        let form = match family {
            Family::Order => ops.da_form(&pw, gains.convention)?,
            Family::Heat => k.quad_form(&pw),
        };
        let rhs = -lambda * form;
        let scale = lhs.abs().max(rhs.abs());
        let rel = if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 };
        max_rel_error = max_rel_error.max(rel);
        max_value = max_value.max(lhs);
    }
    Ok(DissipativityReport {
        family,
        samples: samples.len(),
        max_rel_error,
        max_value,
    })
}
