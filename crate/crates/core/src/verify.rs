//! Self-checks of the discretization, the projections and the stepper, run
//! by the command-line `verify` subcommand.
//!
//! The step check does not re-run the solver: it evaluates the residual of
//! the assembled discrete equations at the computed states, so it is
//! independent of the factorization path.

use std::time::Instant;

use faer::Mat;

use crate::actuators::{build_layout, evaluate_family, ActuatorFamily, Family};
use crate::analysis::{estimate_alpha, lemma22_minimum, GapNorm, NullBasis};
use crate::dense::max_abs;
use crate::dynamics::{
    f_expansive, isothermal_energy, total_mass, FeedbackTreatment, InitialKind, PhysParams, SchemeConfig, SimState,
    Stepper, Tracking,
};
use crate::error::Result;
use crate::grid::{assemble, l2, DaConvention, GridOperators, GridSpec};
use crate::projections::{
    assemble_coupling, build_gains, check_dissipativity, feedback_load, projection_matrix, sample_vectors,
    FeedbackGains,
};
use crate::solver::Backend;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the stored feedback gains.
    SignFlip,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn outcome(name: &str, start: Instant, r: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs the suite; `fault` tampers with the gains before the gain-based
/// checks, which must then fail.
pub fn run_suite(level: Level, fault: Option<Fault>) -> Vec<CheckOutcome> {
    let cells = match level {
        Level::Fast => 24,
        Level::Full => 48,
    };
    let mut out = Vec::new();
    let mut timed = |name: &str, f: &dyn Fn() -> Result<(bool, String)>| {
        let start = Instant::now();
        out.push(outcome(name, start, f()));
    };
    timed("projection identities", &|| projection_identities(cells));
    timed("dissipativity", &|| dissipativity(cells, fault));
    timed("mass conservation", &|| mass_conservation(cells, 500));
    timed("energy stability", &|| energy_stability(cells, 100));
    let step_cells = match level {
        Level::Fast => 12,
        Level::Full => 16,
    };
    timed("discrete equations", &|| step_residuals(step_cells, fault));
    timed("backend agreement", &|| backend_agreement(step_cells));
    let gap_cells = match level {
        Level::Fast => 24,
        Level::Full => 32,
    };
    timed("spectral-gap trends", &|| gap_trends(gap_cells));
    out
}

fn family(spec: &GridSpec, ops: &GridOperators, level: usize) -> Result<ActuatorFamily> {
    evaluate_family(&build_layout(level, spec)?, ops)
}

fn rel_max(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let d = Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] - b[(i, j)]);
    max_abs(&d) / max_abs(b).max(f64::MIN_POSITIVE)
}

fn tamper(gains: &mut FeedbackGains, fault: Option<Fault>) {
    if let Some(Fault::SignFlip) = fault {
        gains.f1 = -&gains.f1;
        gains.f2 = -&gains.f2;
    }
}

/// `M Ũ Q Uᵀ M = (M U Qᵀ Ũᵀ M)ᵀ` and `P² = P` for `M ∈ {1, 2, 3}`.
pub fn projection_identities(cells: usize) -> Result<(bool, String)> {
    let spec = GridSpec::unit_square(cells);
    let ops = assemble(&spec)?;
    let (mut adj, mut idem) = (0.0f64, 0.0f64);
    for m in 1..=3 {
        let fam = family(&spec, &ops, m)?;
        let cp = assemble_coupling(&fam, &ops)?;
        for f in [Family::Order, Family::Heat] {
            let (u, ut, q) = (fam.indicators(f), fam.auxiliary(f), cp.q(f));
            let mu = ops.mass.mul_dense(u);
            let mut_ = ops.mass.mul_dense(ut);
            let lhs = &mut_ * q * mu.transpose();
            let rhs = (&mu * q.transpose() * mut_.transpose()).transpose().to_owned();
            adj = adj.max(rel_max(&lhs, &rhs));
            let p = projection_matrix(&fam, &cp, &ops, f);
            let pp = (&p * ut) * (q * mu.transpose());
            idem = idem.max(rel_max(&pp, &p));
        }
    }
    Ok((
        adj <= 1e-10 && idem <= 1e-10,
        format!("adjoint {adj:.1e}, idempotency {idem:.1e} on {cells}² (tol 1e-10)"),
    ))
}

/// `(F w, w)_H = −λ ‖P w‖²` over 100 random `w`, for both families.
pub fn dissipativity(cells: usize, fault: Option<Fault>) -> Result<(bool, String)> {
    let spec = GridSpec::unit_square(cells);
    let ops = assemble(&spec)?;
    let samples = sample_vectors(ops.n_nodes(), 100, 11);
    let (mut err, mut top) = (0.0f64, f64::NEG_INFINITY);
    for m in 1..=3 {
        let fam = family(&spec, &ops, m)?;
        let cp = assemble_coupling(&fam, &ops)?;
        for conv in [DaConvention::Paper, DaConvention::Full] {
            let mut gains = build_gains(&fam, &ops, &cp, 100.0, 100.0, conv)?;
            tamper(&mut gains, fault);
            for f in [Family::Order, Family::Heat] {
                let r = check_dissipativity(&gains, &fam, &cp, &ops, f, &samples)?;
                err = err.max(r.max_rel_error);
                top = top.max(r.max_value);
            }
        }
    }
    Ok((
        err <= 1e-8 && top <= 0.0,
        format!("relative error {err:.1e} (tol 1e-8), max (Fw, w) {top:.2e}"),
    ))
}

fn scheme(dt: f64, steps: usize, backend: Backend) -> SchemeConfig {
    SchemeConfig {
        dt,
        t_final: dt * steps as f64,
        feedback: FeedbackTreatment::Implicit,
        backend,
        snapshot_stride: 0,
    }
}

pub fn mass_conservation(cells: usize, steps: usize) -> Result<(bool, String)> {
    let ops = assemble(&GridSpec::unit_square(cells))?;
    let stepper = Stepper::new(&ops, &PhysParams::standard(), &scheme(1e-4, steps, Backend::Tensor))?;
    let mut st = stepper.initial_state(InitialKind::Reference)?;
    let (m1, m2) = (total_mass(&st.w1, &ops), total_mass(&st.w2, &ops));
    for _ in 0..steps {
        st = stepper.step(&st, None)?.state;
    }
    let scale = ops.volume();
    let d1 = (total_mass(&st.w1, &ops) - m1).abs() / scale;
    let d2 = (total_mass(&st.w2, &ops) - m2).abs() / scale;
    Ok((
        d1.max(d2) <= 1e-8,
        format!("drift w1 {d1:.1e}, w2 {d2:.1e} over {steps} steps (tol 1e-8)"),
    ))
}

pub fn energy_stability(cells: usize, steps: usize) -> Result<(bool, String)> {
    let ops = assemble(&GridSpec::unit_square(cells))?;
    let mut params = PhysParams::standard();
    params.nu0 = 0.0;
    params.nu1 = 0.0;
    let mut worst = f64::NEG_INFINITY;
    for dt in [1e-3, params.dt_limit()] {
        let stepper = Stepper::new(&ops, &params, &scheme(dt, steps, Backend::Tensor))?;
        let mut st = stepper.initial_state(InitialKind::Controlled)?;
        let mut e = isothermal_energy(&st.w1, &params, &ops);
        for _ in 0..steps {
            st = stepper.step(&st, None)?.state;
            let next = isothermal_energy(&st.w1, &params, &ops);
            worst = worst.max((next - e) / e.abs());
            e = next;
        }
    }
    Ok((worst <= 1e-10, format!("largest relative rise {worst:.1e} (slack 1e-10)")))
}

/// Relative residuals of the three discrete equations at a controlled step.
fn residuals(
    stepper: &Stepper,
    ctrl: (&ActuatorFamily, &FeedbackGains),
    before: &SimState,
    after: &SimState,
    reference_next: &SimState,
) -> Result<f64> {
    let ops = stepper.ops();
    let p = stepper.params();
    let dt = stepper.scheme().dt;
    let n = ops.n_nodes();
    let (m, s) = (&ops.mass, &ops.stiffness);
    let c = p.nu0 * p.nu1 + 2.0 * p.tau;
    let (fam, gains) = ctrl;
    let z1: Vec<f64> = (0..n).map(|i| after.w1[i] - reference_next.w1[i]).collect();
    let z2: Vec<f64> = (0..n).map(|i| after.w2[i] - reference_next.w2[i]).collect();
    let (_, load1) = feedback_load(gains, fam, ops, &z1, Family::Order)?;
    let (_, load2) = feedback_load(gains, fam, ops, &z2, Family::Heat)?;

    let (mw1n, sp, mw1) = (m.mul_vec(&after.w1), s.mul_vec(&after.p), m.mul_vec(&before.w1));
    let sw2 = s.mul_vec(&before.w2);
    let r1: Vec<f64> = (0..n)
        .map(|i| mw1n[i] + dt * sp[i] - mw1[i] - dt * (p.nu1 * sw2[i] + load1[i]))
        .collect();
    let (sw1n, mp) = (s.mul_vec(&after.w1), m.mul_vec(&after.p));
    let le = ops.load_vector(&before.w1, |y| f_expansive(y, p.tau));
    let r2: Vec<f64> = (0..n)
        .map(|i| p.nu2 * sw1n[i] + c * mw1n[i] - mp[i] + le[i])
        .collect();
    let (mw2n, sw2n, mw2) = (m.mul_vec(&after.w2), s.mul_vec(&after.w2), m.mul_vec(&before.w2));
    let r3: Vec<f64> = (0..n)
        .map(|i| mw2n[i] + dt * sw2n[i] - mw2[i] - dt * (p.nu0 * sw1n[i] + load2[i]))
        .collect();
    Ok((l2(&r1) / l2(&mw1n).max(1e-300))
        .max(l2(&r2) / l2(&mp).max(1e-300))
        .max(l2(&r3) / l2(&mw2n).max(1e-300)))
}

/// Ten controlled steps with `M = 1`; the computed states must satisfy the
/// discrete equations, feedback included.
pub fn step_residuals(cells: usize, fault: Option<Fault>) -> Result<(bool, String)> {
    let spec = GridSpec::unit_square(cells);
    let ops = assemble(&spec)?;
    let params = PhysParams::standard();
    let fam = family(&spec, &ops, 1)?;
    let cp = assemble_coupling(&fam, &ops)?;
    let mut worst = 0.0f64;
    for conv in [DaConvention::Paper, DaConvention::Full] {
        let gains = build_gains(&fam, &ops, &cp, 50.0, 50.0, conv)?;
        // the stepper uses the tampered gains, the residual the genuine ones
        let mut used = gains.clone();
        tamper(&mut used, fault);
        for backend in [Backend::Tensor, Backend::SparseDirect] {
            let stepper = Stepper::new(&ops, &params, &scheme(1e-4, 10, backend))?;
            let ctrl = stepper.controller(&fam, &used)?;
            let mut r = stepper.initial_state(InitialKind::Reference)?;
            let mut st = stepper.initial_state(InitialKind::Controlled)?;
            for _ in 0..10 {
                let next = stepper.step(&r, None)?.state;
                let tr = Tracking {
                    controller: &ctrl,
                    reference_now: &r,
                    reference_next: &next,
                };
                let after = stepper.step(&st, Some(&tr))?.state;
                worst = worst.max(residuals(&stepper, (&fam, &gains), &st, &after, &next)?);
                st = after;
                r = next;
            }
        }
    }
    Ok((worst <= 1e-9, format!("largest relative residual {worst:.1e} (tol 1e-9)")))
}

pub fn backend_agreement(cells: usize) -> Result<(bool, String)> {
    let ops = assemble(&GridSpec::unit_square(cells))?;
    let params = PhysParams::standard();
    let a = Stepper::new(&ops, &params, &scheme(1e-3, 10, Backend::Tensor))?;
    let b = Stepper::new(&ops, &params, &scheme(1e-3, 10, Backend::SparseDirect))?;
    let mut sa = a.initial_state(InitialKind::Controlled)?;
    let mut sb = sa.clone();
    for _ in 0..10 {
        sa = a.step(&sa, None)?.state;
        sb = b.step(&sb, None)?.state;
    }
    let d: Vec<f64> = sa.w1.iter().zip(&sb.w1).map(|(x, y)| x - y).collect();
    let rel = l2(&d) / l2(&sb.w1);
    Ok((rel <= 1e-9, format!("tensor vs sparse LU after 10 steps {rel:.1e} (tol 1e-9)")))
}

/// `α_M^H`, `α_M^V` increasing in `M`; the gain-coercivity minimum
/// nondecreasing in `λ₁` and in `M`.
pub fn gap_trends(cells: usize) -> Result<(bool, String)> {
    let spec = GridSpec::unit_square(cells);
    let ops = assemble(&spec)?;
    let conv = DaConvention::Full;
    let lambdas = [0.0, 10.0, 100.0];
    let (mut ah, mut av, mut xi) = (Vec::new(), Vec::new(), Vec::new());
    for m in 1..=3 {
        let fam = family(&spec, &ops, m)?;
        ah.push(estimate_alpha(&fam, &ops, GapNorm::H, conv, NullBasis::Householder)?);
        av.push(estimate_alpha(&fam, &ops, GapNorm::V, conv, NullBasis::Householder)?);
        let row: Vec<f64> = lambdas
            .iter()
            .map(|&l| lemma22_minimum(&fam, &ops, l, conv))
            .collect::<Result<_>>()?;
        xi.push(row);
    }
    let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
    let nondecr = |a: f64, b: f64| b >= a * (1.0 - 1e-9);
    let ok = increasing(&ah)
        && increasing(&av)
        && xi.iter().all(|r| r.windows(2).all(|w| nondecr(w[0], w[1])))
        && (0..lambdas.len()).all(|j| (0..2).all(|i| nondecr(xi[i][j], xi[i + 1][j])));
    Ok((ok, format!("alpha_H {ah:.3?}, alpha_V {av:.3?} on {cells}²")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_pass_on_small_grids() {
        assert!(projection_identities(24).unwrap().0);
        assert!(dissipativity(24, None).unwrap().0);
        assert!(step_residuals(12, None).unwrap().0);
        assert!(backend_agreement(8).unwrap().0);
    }

    #[test]
    fn sign_flip_is_detected() {
        let (ok, detail) = dissipativity(24, Some(Fault::SignFlip)).unwrap();
        assert!(!ok, "{detail}");
        let (ok, detail) = step_residuals(12, Some(Fault::SignFlip)).unwrap();
        assert!(!ok, "{detail}");
    }
}
