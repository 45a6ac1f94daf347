//! Post-processing and spectral checks: decay fits, control energy and its
//! bound, spectral-gap constants and the gain-coercivity minimum.
//!
//! The eigenproblems are dense and meant for coarse grids (a few thousand
//! nodes at most). Their values are mesh-dependent estimates of the
//! continuous constants, not bounds.

use std::fmt::Write as _;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::actuators::{ActuatorFamily, Family};
use crate::dense::{null_space_projector, null_space_qr, sym_gen_eig, symmetrize};
use crate::error::{Error, Result};
use crate::grid::{DaConvention, GridOperators};
use crate::projections::{
    assemble_coupling, low_rank_factors, projection_matrix, projection_operator_norm, FeedbackGains,
};
use crate::run::RunRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct DecayReport {
    /// Fitted rate `μ̂` in `‖z(t)‖ ≈ C e^{−μ̂ t}`.
    pub mu: f64,
    pub window: (f64, f64),
    /// Root-mean-square residual of the log-linear fit.
    pub residual: f64,
    pub samples: usize,
    /// Earliest time from which the series never increases.
    pub monotone_after: Option<f64>,
}

/// Least-squares fit of `log ‖z‖` against `t` over `window`.
pub fn fit_decay(times: &[f64], norms: &[f64], window: (f64, f64)) -> Result<DecayReport> {
    if times.len() != norms.len() {
        return Err(Error::Series("times and norms differ in length".into()));
    }
    let (ta, tb) = window;
    if !(ta < tb) {
        return Err(Error::Series(format!("empty window [{ta}, {tb}]")));
    }
    let slack = 1e-9 * (tb - ta);
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(norms)
        .filter(|(t, _)| **t >= ta - slack && **t <= tb + slack)
        .map(|(&t, &z)| (t, z))
        .collect();
    if pts.len() < 10 {
        return Err(Error::Series(format!(
            "{} samples in window [{ta}, {tb}], need at least 10",
            pts.len()
        )));
    }
    if let Some((t, z)) = pts.iter().find(|(_, z)| !(*z > 0.0) || !z.is_finite()) {
        return Err(Error::Series(format!("nonpositive or non-finite norm {z} at t = {t}")));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let lm = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(t, z) in &pts {
        sxx += (t - tm) * (t - tm);
        sxy += (t - tm) * (z.ln() - lm);
    }
    let slope = sxy / sxx;
    let intercept = lm - slope * tm;
    let residual = (pts
        .iter()
        .map(|&(t, z)| (z.ln() - intercept - slope * t).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(DecayReport {
        mu: -slope,
        window,
        residual,
        samples: pts.len(),
        monotone_after: monotone_after(times, norms, 0.0),
    })
}

/// Earliest `t` after which every step satisfies `zₙ₊₁ ≤ zₙ (1 + slack)`.
pub fn monotone_after(times: &[f64], norms: &[f64], slack: f64) -> Option<f64> {
    if norms.is_empty() {
        return None;
    }
    let mut first = norms.len() - 1;
    for i in (0..norms.len() - 1).rev() {
        if norms[i + 1] <= norms[i] * (1.0 + slack) {
            first = i;
        } else {
            break;
        }
    }
    Some(times[first])
}

/// `Σₙ (‖ûⁿ‖² + ‖v̂ⁿ‖²) Δt` over the applied inputs (rows 1 onwards).
pub fn control_energy(record: &RunRecord) -> Result<f64> {
    if !record.has_inputs() {
        return Err(Error::Series("run has no input series".into()));
    }
    let sq = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
    Ok(record
        .inputs_u
        .iter()
        .zip(&record.inputs_v)
        .skip(1)
        .map(|(u, v)| (sq(u) + sq(v)) * record.dt)
        .sum())
}

/// Ingredients of the input-energy bound `(2μ)⁻¹ D ‖z(0)‖²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBound {
    /// `‖(U◇)⁻¹‖`, `‖(V◇)⁻¹‖`
    pub inv_u: f64,
    pub inv_v: f64,
    /// `‖P_{M,1}‖`, `‖P_{M,2}‖`
    pub proj1: f64,
    pub proj2: f64,
    /// `‖A²|_Ũ‖`, `‖A|_Ṽ‖`
    pub a2_on_u: f64,
    pub a_on_v: f64,
    /// `λ₁² ‖(U◇)⁻¹‖² ‖P₁‖⁴ ‖A²|_Ũ‖² + λ₂² ‖(V◇)⁻¹‖² ‖P₂‖⁴ ‖A|_Ṽ‖²`
    pub d_product: f64,
    /// `‖K₁‖² + ‖K₂‖²` computed directly from the gains.
    pub d_exact: f64,
}

impl ControlBound {
    pub fn bound(&self, mu: f64, z0_sq: f64) -> f64 {
        self.d_product * z0_sq / (2.0 * mu)
    }

    pub fn exact_bound(&self, mu: f64, z0_sq: f64) -> f64 {
        self.d_exact * z0_sq / (2.0 * mu)
    }
}

/// Largest `‖B a‖²_H / ‖C a‖²_H`-type ratio: top eigenvalue of `(num, den)`.
fn top_ratio(num: &Mat<f64>, den: &Mat<f64>) -> Result<f64> {
    let (vals, _) = sym_gen_eig(&symmetrize(num), den)?;
    Ok(vals.last().copied().unwrap_or(0.0).max(0.0))
}

/// `‖A^p v‖_H / ‖v‖_H` maximized over `v ∈ span(cols)`, with the discrete
/// `A = M⁻¹ K`.
fn power_norm_on_span(ops: &GridOperators, cols: &Mat<f64>, power: usize, conv: DaConvention) -> Result<f64> {
    let k = ops.shifted_operator(conv);
    let mut y = cols.clone();
    for i in 0..power {
        let ky = k.mul_dense(&y);
        // keep K y as the last factor, M⁻¹ in between
        y = if i + 1 == power { ky } else { ops.mass_solve_mat(&ky)? };
    }
    // ‖M⁻¹ y a‖²_M = aᵀ yᵀ M⁻¹ y a
    let minv_y = ops.mass_solve_mat(&y)?;
    let num = y.transpose() * &minv_y;
    let den = cols.transpose() * ops.mass.mul_dense(cols);
    Ok(top_ratio(&num, &den)?.sqrt())
}

/// `‖(U◇)⁻¹‖ = 1 / σ_min`, with `σ_min² = λ_min(UᵀMU)`.
fn inverse_synthesis_norm(ops: &GridOperators, u: &Mat<f64>) -> Result<f64> {
    let g = u.transpose() * ops.mass.mul_dense(u);
    let k = g.nrows();
    let (vals, _) = sym_gen_eig(&g, &Mat::<f64>::identity(k, k))?;
    Ok(1.0 / vals[0].sqrt())
}

/// `‖F̂‖²` from `(ℝᴺ, ‖·‖_H)` to Euclidean coordinates: top eigenvalue of
/// `F̂ M⁻¹ F̂ᵀ = C (UᵀMU) Cᵀ`.
fn gain_norm_sq(gains: &FeedbackGains, fam: &ActuatorFamily, ops: &GridOperators, family: Family) -> Result<f64> {
    let (_, c) = low_rank_factors(gains, fam, ops, family)?;
    let u = fam.indicators(family);
    let g = u.transpose() * ops.mass.mul_dense(u);
    let a = &c * &g * c.transpose();
    let k = a.nrows();
    top_ratio(&a, &Mat::<f64>::identity(k, k))
}

pub fn control_bound(gains: &FeedbackGains, fam: &ActuatorFamily, ops: &GridOperators) -> Result<ControlBound> {
    let conv = gains.convention;
    let inv_u = inverse_synthesis_norm(ops, &fam.u)?;
    let inv_v = inverse_synthesis_norm(ops, &fam.v)?;
    let proj1 = projection_operator_norm(fam, ops, Family::Order)?;
    let proj2 = projection_operator_norm(fam, ops, Family::Heat)?;
    let a2_on_u = power_norm_on_span(ops, &fam.u_tilde, 2, conv)?;
    let a_on_v = power_norm_on_span(ops, &fam.v_tilde, 1, conv)?;
    let d_product = (gains.lambda1 * inv_u * proj1 * proj1 * a2_on_u).powi(2)
        + (gains.lambda2 * inv_v * proj2 * proj2 * a_on_v).powi(2);
    let d_exact = gain_norm_sq(gains, fam, ops, Family::Order)? + gain_norm_sq(gains, fam, ops, Family::Heat)?;
    Ok(ControlBound {
        inv_u,
        inv_v,
        proj1,
        proj2,
        a2_on_u,
        a_on_v,
        d_product,
        d_exact,
    })
}

/// Largest decay rate the feedback imposes on its own range: top eigenvalue
/// of `M⁻¹ W C Wᵀ`, equal to that of `C (UᵀMU)`.
pub fn feedback_rate(gains: &FeedbackGains, fam: &ActuatorFamily, ops: &GridOperators, family: Family) -> Result<f64> {
    let (_, c) = low_rank_factors(gains, fam, ops, family)?;
    let u = fam.indicators(family);
    let g = u.transpose() * ops.mass.mul_dense(u);
    // C G is similar to the symmetric G^{1/2} C G^{1/2}; C is symmetric
    top_ratio(&symmetrize(&c), &crate::projections::inverse(&g)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GapNorm {
    /// `inf ‖w‖²_V / ‖w‖²_H` over `V_Mᵀ M w = 0`.
    H,
    /// `inf ‖w‖²_D(A) / ‖w‖²_V` over `U_Mᵀ M w = 0`.
    V,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NullBasis {
    Householder,
    Projector,
}

/// Dense `K M⁻¹ K`.
fn da_matrix(ops: &GridOperators, conv: DaConvention) -> Result<Mat<f64>> {
    let k = ops.shifted_operator(conv).to_dense();
    let minv_k = ops.mass_solve_mat(&k)?;
    Ok(symmetrize(&(&k * minv_k)))
}

fn v_matrix(ops: &GridOperators) -> Mat<f64> {
    ops.stiffness.linear_combination(1.0, &ops.mass, 1.0).to_dense()
}

/// Constrained Rayleigh-quotient minimum on the null space of the actuator
/// constraints.
pub fn estimate_alpha(
    fam: &ActuatorFamily,
    ops: &GridOperators,
    which: GapNorm,
    conv: DaConvention,
    basis: NullBasis,
) -> Result<f64> {
    let (constraint_cols, num, den) = match which {
        GapNorm::H => (&fam.v, v_matrix(ops), ops.mass.to_dense()),
        GapNorm::V => (&fam.u, da_matrix(ops, conv)?, v_matrix(ops)),
    };
    let c = ops.mass.mul_dense(constraint_cols);
    constrained_minimum(&c, &num, &den, basis)
}

/// `min xᵀ A x / xᵀ B x` subject to `Cᵀ x = 0`.
pub fn constrained_minimum(c: &Mat<f64>, a: &Mat<f64>, b: &Mat<f64>, basis: NullBasis) -> Result<f64> {
    let z = match basis {
        NullBasis::Householder => null_space_qr(c)?,
        NullBasis::Projector => null_space_projector(c)?,
    };
    let ar = z.transpose() * a * &z;
    let br = z.transpose() * b * &z;
    let (vals, _) = sym_gen_eig(&symmetrize(&ar), &br)?;
    vals.first()
        .copied()
        .ok_or_else(|| Error::Eigen("empty reduced pencil".into()))
}

/// Smallest eigenvalue of `(K_D + 2 λ₁ Pᵀ K_D P, S + M)` with `K_D` the
/// D(A) form and `P` the order-family projection.
pub fn lemma22_minimum(fam: &ActuatorFamily, ops: &GridOperators, lambda1: f64, conv: DaConvention) -> Result<f64> {
    if !(lambda1 >= 0.0) {
        return Err(Error::InvalidParameter(format!("lambda1 must be nonnegative, got {lambda1}")));
    }
    let kd = da_matrix(ops, conv)?;
    let coupling = assemble_coupling(fam, ops)?;
    let p = projection_matrix(fam, &coupling, ops, Family::Order);
    let pkp = p.transpose() * &kd * &p;
    let a = Mat::from_fn(kd.nrows(), kd.ncols(), |i, j| {
        kd[(i, j)] + 2.0 * lambda1 * 0.5 * (pkp[(i, j)] + pkp[(j, i)])
    });
    let (vals, _) = sym_gen_eig(&a, &v_matrix(ops))?;
    vals.first()
        .copied()
        .ok_or_else(|| Error::Eigen("empty pencil".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    pub level: usize,
    pub alpha_h: f64,
    pub alpha_v: f64,
    /// `(λ₁, ξ_min)` pairs.
    pub lemma22: Vec<(f64, f64)>,
}

pub fn gap_report(
    fam: &ActuatorFamily,
    ops: &GridOperators,
    lambdas: &[f64],
    conv: DaConvention,
) -> Result<GapReport> {
    Ok(GapReport {
        level: fam.layout.level,
        alpha_h: estimate_alpha(fam, ops, GapNorm::H, conv, NullBasis::Householder)?,
        alpha_v: estimate_alpha(fam, ops, GapNorm::V, conv, NullBasis::Householder)?,
        lemma22: lambdas
            .iter()
            .map(|&l| lemma22_minimum(fam, ops, l, conv).map(|x| (l, x)))
            .collect::<Result<_>>()?,
    })
}

/// CSV table `M,alpha_H,alpha_V,xi_lambda<λ>...`.
pub fn gap_table_csv(reports: &[GapReport]) -> String {
    let mut s = String::from("M,alpha_H,alpha_V");
    if let Some(r) = reports.first() {
        for (l, _) in &r.lemma22 {
            let _ = write!(s, ",xi_lambda{l}");
        }
    }
    s.push('\n');
    for r in reports {
        let _ = write!(s, "{},{:.16e},{:.16e}", r.level, r.alpha_h, r.alpha_v);
        for (_, x) in &r.lemma22 {
            let _ = write!(s, ",{x:.16e}");
        }
        s.push('\n');
    }
    s
}
