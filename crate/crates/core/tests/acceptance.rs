//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criteria 6 to 9 and 12 share one desk-profile ensemble (96² cells,
//! `Δt = 1e−4`, `T = 1`), which takes a few minutes.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use chstab::actuators::{build_layout, evaluate_family, Family};
use chstab::analysis::{control_bound, control_energy, estimate_alpha, fit_decay, lemma22_minimum, GapNorm, NullBasis};
use chstab::dense::max_abs;
use chstab::dynamics::{isothermal_energy, total_mass, InitialKind, PhysParams, SchemeConfig, Stepper};
use chstab::grid::{assemble, DaConvention, GridOperators, GridSpec};
use chstab::presets::{controlled, Profile};
use chstab::projections::{assemble_coupling, build_gains, check_dissipativity, projection_matrix, sample_vectors};
use chstab::run::{prepare_control, run_ensemble_on, ControlConfig, EnsembleConfig, EnsembleRecord, RunRecord};
use chstab::solver::Backend;
use faer::Mat;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let d = Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] - b[(i, j)]);
    max_abs(&d) / max_abs(b).max(f64::MIN_POSITIVE)
}

fn c1_projection_algebra() -> Check {
    let start = Instant::now();
    let spec = GridSpec::unit_square(48);
    let ops = assemble(&spec).unwrap();
    let mut worst_adj = 0.0f64;
    let mut worst_idem = 0.0f64;
    for m in 1..=3 {
        let fam = evaluate_family(&build_layout(m, &spec).unwrap(), &ops).unwrap();
        let cp = assemble_coupling(&fam, &ops).unwrap();
        for family in [Family::Order, Family::Heat] {
            let (u, ut, q) = (fam.indicators(family), fam.auxiliary(family), cp.q(family));
            let mu = ops.mass.mul_dense(u);
            let mut_ = ops.mass.mul_dense(ut);
            // M Ũ Q Uᵀ M  against  (M U Qᵀ Ũᵀ M)ᵀ
            let lhs = &mut_ * q * mu.transpose();
            let rhs = (&mu * q.transpose() * mut_.transpose()).transpose().to_owned();
            worst_adj = worst_adj.max(rel(&lhs, &rhs));
            // P P = P with the dense projection
            let p = projection_matrix(&fam, &cp, &ops, family);
            let pp = (&p * ut) * (q * mu.transpose());
            worst_idem = worst_idem.max(rel(&pp, &p));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst_adj <= 1e-10 && worst_idem <= 1e-10 && secs < 10.0,
        format!("adjoint {worst_adj:.2e}, idempotency {worst_idem:.2e} (tol 1e-10), {secs:.1} s (limit 10 s)"),
    )
}

fn c2_dissipativity() -> Check {
    let spec = GridSpec::unit_square(48);
    let ops = assemble(&spec).unwrap();
    let samples = sample_vectors(ops.n_nodes(), 100, 7);
    let mut worst = 0.0f64;
    let mut top = f64::NEG_INFINITY;
    for m in 1..=3 {
        let fam = evaluate_family(&build_layout(m, &spec).unwrap(), &ops).unwrap();
        let cp = assemble_coupling(&fam, &ops).unwrap();
        let gains = build_gains(&fam, &ops, &cp, 1000.0, 1000.0, DaConvention::Paper).unwrap();
        for family in [Family::Order, Family::Heat] {
            let r = check_dissipativity(&gains, &fam, &cp, &ops, family, &samples).unwrap();
            worst = worst.max(r.max_rel_error);
            top = top.max(r.max_value);
        }
    }
    ensure(
        worst <= 1e-8 && top <= 0.0,
        format!("max relative error {worst:.2e} (tol 1e-8), max (Fw,w) = {top:.3e}"),
    )
}

fn scheme(dt: f64, steps: usize) -> SchemeConfig {
    SchemeConfig {
        dt,
        t_final: dt * steps as f64,
        feedback: Default::default(),
        backend: Backend::Tensor,
        snapshot_stride: 0,
    }
}

fn c3_conservation() -> Check {
    let ops = assemble(&GridSpec::unit_square(48)).unwrap();
    let params = PhysParams::standard();
    let stepper = Stepper::new(&ops, &params, &scheme(1e-4, 1000)).unwrap();
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (kind, label) in [(InitialKind::Controlled, "w1"), (InitialKind::Reference, "w2")] {
        let mut st = stepper.initial_state(kind).unwrap();
        let field = |s: &chstab::dynamics::SimState| if label == "w1" { s.w1.clone() } else { s.w2.clone() };
        let m0 = total_mass(&field(&st), &ops);
        for _ in 0..1000 {
            st = stepper.step(&st, None).unwrap().state;
        }
        let drift = (total_mass(&field(&st), &ops) - m0).abs() / m0.abs();
        worst = worst.max(drift);
        detail.push(format!("{label} drift {drift:.2e}"));
    }
    ensure(worst <= 1e-8, format!("{} over 1000 steps (tol 1e-8)", detail.join(", ")))
}

fn c4_energy_stability() -> Check {
    let ops = assemble(&GridSpec::unit_square(48)).unwrap();
    let mut params = PhysParams::standard();
    params.nu0 = 0.0;
    params.nu1 = 0.0;
    let mut detail = Vec::new();
    let mut ok = true;
    for dt in [1e-3, params.dt_limit()] {
        let steps = 200;
        let stepper = Stepper::new(&ops, &params, &scheme(dt, steps)).unwrap();
        let mut st = stepper.initial_state(InitialKind::Controlled).unwrap();
        let mut e = isothermal_energy(&st.w1, &params, &ops);
        let e0 = e;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..steps {
            st = stepper.step(&st, None).unwrap().state;
            let next = isothermal_energy(&st.w1, &params, &ops);
            worst = worst.max((next - e) / e.abs());
            e = next;
        }
        ok &= worst <= 1e-10;
        detail.push(format!("dt={dt}: max relative rise {worst:.2e}, energy {e0:.4e} -> {e:.4e}"));
    }
    ensure(ok, format!("{} (slack 1e-10)", detail.join("; ")))
}

fn c5_oracle() -> Check {
    let free = [Backend::Tensor, Backend::SparseDirect]
        .into_iter()
        .map(|b| common::check_free(PhysParams::standard(), 1e-3, b))
        .fold(0.0f64, f64::max);
    let ctl = common::check_controlled(DaConvention::Paper, Backend::Tensor);
    ensure(
        free <= 1e-9 && ctl.states <= 1e-9,
        format!(
            "8x8 free run {free:.2e}, 16² controlled run {:.2e} (tol 1e-9)",
            ctl.states
        ),
    )
}

fn c10_spectral_gaps() -> Check {
    let start = Instant::now();
    let spec = GridSpec::unit_square(32);
    let ops = assemble(&spec).unwrap();
    let conv = DaConvention::Full;
    let lambdas = [0.0, 10.0, 100.0];
    let mut ah = Vec::new();
    let mut av = Vec::new();
    let mut xi: Vec<Vec<f64>> = Vec::new();
    for m in 1..=3 {
        let fam = evaluate_family(&build_layout(m, &spec).unwrap(), &ops).unwrap();
        ah.push(estimate_alpha(&fam, &ops, GapNorm::H, conv, NullBasis::Householder).unwrap());
        av.push(estimate_alpha(&fam, &ops, GapNorm::V, conv, NullBasis::Householder).unwrap());
        xi.push(lambdas.iter().map(|&l| lemma22_minimum(&fam, &ops, l, conv).unwrap()).collect());
    }
    let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
    let nondecreasing = |a: f64, b: f64| b >= a * (1.0 - 1e-9);
    let in_lambda = xi.iter().all(|row| row.windows(2).all(|w| nondecreasing(w[0], w[1])));
    let in_m = (0..lambdas.len()).all(|j| (0..2).all(|i| nondecreasing(xi[i][j], xi[i + 1][j])));
    let secs = start.elapsed().as_secs_f64();
    ensure(
        increasing(&ah) && increasing(&av) && in_lambda && in_m && secs < 120.0,
        format!(
            "alpha_H {:.4?}, alpha_V {:.4?}, xi(M; 0/10/100) {:.4?}, {secs:.1} s (limit 120 s)",
            ah, av, xi
        ),
    )
}

fn c11_geometry() -> Check {
    let mut detail = Vec::new();
    let mut ok = true;
    for m in 1..=3 {
        let l2 = build_layout(m, &GridSpec::unit_square(96)).unwrap();
        let l1 = build_layout(m, &GridSpec::interval(1.0, 96)).unwrap();
        ok &= l2.m_sigma() == 3 * m * m && l2.m_varsigma() == m * m;
        ok &= l1.m_sigma() == 2 * m && l1.m_varsigma() == m;
        ok &= (l2.coverage() - 0.0625).abs() <= 1e-12;
        detail.push(format!(
            "M={m}: 2-D {}/{} coverage {:.6}%, 1-D {}/{}",
            l2.m_sigma(),
            l2.m_varsigma(),
            100.0 * l2.coverage(),
            l1.m_sigma(),
            l1.m_varsigma()
        ));
    }
    ensure(ok, detail.join("; "))
}

struct Desk {
    ops: GridOperators,
    members: Vec<ControlConfig>,
    record: EnsembleRecord,
}

impl Desk {
    fn member(&self, level: usize, lambda: f64) -> Result<&RunRecord, String> {
        let i = self
            .members
            .iter()
            .position(|c| c.level == level && c.lambda1 == lambda)
            .ok_or("member not in ensemble")?;
        self.record.members[i].as_ref().map_err(|e| format!("M={level} lambda={lambda} failed: {e}"))
    }
}

fn desk_ensemble() -> Result<Desk, String> {
    let base = controlled(Profile::Desk, 2, 1000.0);
    let members: Vec<ControlConfig> = [(2, 250.0), (2, 500.0), (2, 1000.0), (1, 1000.0), (3, 1000.0)]
        .into_iter()
        .map(|(m, l)| controlled(Profile::Desk, m, l).control.unwrap())
        .collect();
    let cfg = EnsembleConfig {
        grid: base.grid.clone(),
        physics: base.physics.clone(),
        scheme: base.scheme.clone(),
        rho: base.rho,
        members: members.iter().cloned().map(Some).collect(),
    };
    let ops = assemble(&cfg.grid).map_err(|e| e.to_string())?;
    let record = run_ensemble_on(&ops, &cfg, None).map_err(|e| e.to_string())?;
    Ok(Desk { ops, members, record })
}

fn c6_equilibration(d: &Desk) -> Check {
    let r = &d.record.reference;
    let a = r.snapshot_at(5000).ok_or("no snapshot at t = 0.5")?;
    let b = r.snapshot_at(10000).ok_or("no snapshot at t = 1")?;
    let sq = |u: &[f64]| d.ops.mass.quad_form(u);
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p - q).collect::<Vec<_>>();
    let num = (sq(&diff(&b.w1, &a.w1)) + sq(&diff(&b.w2, &a.w2))).sqrt();
    let den = (sq(&b.w1) + sq(&b.w2)).sqrt();
    let ratio = num / den;
    ensure(ratio <= 1e-3, format!("relative change over [0.5, 1] = {ratio:.3e} (tol 1e-3)"))
}

fn fitted_rate(r: &RunRecord) -> Result<f64, String> {
    fit_decay(&r.times, &r.norm_z(), (0.1, 1.0)).map(|f| f.mu).map_err(|e| e.to_string())
}

fn c7_ordering(d: &Desk) -> Check {
    let runs = [d.member(2, 250.0)?, d.member(2, 500.0)?, d.member(2, 1000.0)?];
    let err: Vec<f64> = runs.iter().map(|r| r.final_error()).collect();
    let mu_250 = fitted_rate(runs[0])?;
    let mu_1000 = fitted_rate(runs[2])?;
    ensure(
        err[2] < err[1] && err[1] < err[0] && mu_1000 > mu_250 && mu_250 > 0.0,
        format!(
            "final errors (250/500/1000) {:.6e} {:.6e} {:.6e}; mu(250) = {mu_250:.6}, mu(1000) = {mu_1000:.6}",
            err[0], err[1], err[2]
        ),
    )
}

fn drop_then_rise(times: &[f64], z: &[f64]) -> (f64, f64, f64) {
    let early_min = times
        .iter()
        .zip(z)
        .filter(|(t, _)| **t <= 0.3 + 1e-12)
        .map(|(_, z)| *z)
        .fold(f64::INFINITY, f64::min);
    let last = *z.last().unwrap();
    (last, early_min, last / early_min)
}

fn c8_failure_mode(d: &Desk) -> Check {
    let r = d.member(1, 1000.0)?;
    let (last, early_min, ratio) = drop_then_rise(&r.times, &r.norm_z());
    // component ratios are diagnostic only
    let (_, _, r1) = drop_then_rise(&r.times, &r.norm_z1);
    let (_, _, r2) = drop_then_rise(&r.times, &r.norm_z2);
    ensure(
        ratio > 1.5,
        format!(
            "err(T) = {last:.4e}, min over [0, 0.3] = {early_min:.4e}, ratio {ratio:.3} (need > 1.5); z1 ratio {r1:.3}, z2 ratio {r2:.3}"
        ),
    )
}

fn c9_monotone(d: &Desk) -> Check {
    let mut detail = Vec::new();
    let mut ok = true;
    for m in [2, 3] {
        let r = d.member(m, 1000.0)?;
        let z = r.norm_z();
        let mut worst = f64::NEG_INFINITY;
        let mut at = 0.0;
        for n in 0..z.len() - 1 {
            if r.times[n] >= 0.1 - 1e-12 {
                let rise = z[n + 1] / z[n] - 1.0;
                if rise > worst {
                    worst = rise;
                    at = r.times[n + 1];
                }
            }
        }
        ok &= worst <= 1e-6;
        detail.push(format!("M={m}: largest step rise {worst:.3e} at t = {at:.4}"));
    }
    ensure(ok, format!("{} (slack 1e-6)", detail.join("; ")))
}

fn c12_control_energy(d: &Desk) -> Check {
    let r = d.member(2, 1000.0)?;
    let energy = control_energy(r).map_err(|e| e.to_string())?;
    let mu = fitted_rate(r)?;
    let ctl = &d.members[d.members.iter().position(|c| c.level == 2 && c.lambda1 == 1000.0).unwrap()];
    let (fam, gains) = prepare_control(&d.ops, ctl, None).map_err(|e| e.to_string())?;
    let b = control_bound(&gains, &fam, &d.ops).map_err(|e| e.to_string())?;
    let z0 = r.norm_z()[0].powi(2);
    let bound = b.bound(mu, z0);
    ensure(
        energy.is_finite() && energy <= bound,
        format!(
            "energy {energy:.4e} <= bound {bound:.4e} (mu = {mu:.4}, D = {:.4e}; with exact gain norm {:.4e})",
            b.d_product,
            b.exact_bound(mu, z0)
        ),
    )
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    results.push((1, "projection algebra", guarded(c1_projection_algebra)));
    results.push((2, "dissipativity identities", guarded(c2_dissipativity)));
    results.push((3, "mass conservation", guarded(c3_conservation)));
    results.push((4, "energy stability", guarded(c4_energy_stability)));
    results.push((5, "oracle equivalence", guarded(c5_oracle)));
    results.push((10, "spectral-gap trends", guarded(c10_spectral_gaps)));
    results.push((11, "actuator geometry", guarded(c11_geometry)));

    let start = Instant::now();
    let desk = catch_unwind(desk_ensemble).unwrap_or_else(|_| Err("ensemble panicked".into()));
    eprintln!("desk ensemble: {:.0} s", start.elapsed().as_secs_f64());
    let desk_checks: [(usize, &str, fn(&Desk) -> Check); 5] = [
        (6, "reference equilibration", c6_equilibration),
        (7, "stabilization ordering", c7_ordering),
        (8, "failure mode with M = 1", c8_failure_mode),
        (9, "monotone decay", c9_monotone),
        (12, "control-energy bound", c12_control_energy),
    ];
    for (id, name, f) in desk_checks {
        let r = match &desk {
            Ok(d) => guarded(|| f(d)),
            Err(e) => Err(format!("desk ensemble failed: {e}")),
        };
        results.push((id, name, r));
    }

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
