//! Nonlinearities, the mixed chemical-potential formulation and the
//! semi-implicit Euler stepper.
//!
//! The stepped system is written in the variables `w = (y₁, y₂ + ν₀ y₁)`:
//!
//! ```text
//! ẇ₁ = −A₀ 𝔭 + ν₁ A₀ w₂ − g(w₁) + h₁ + χ F₁ (w₁ − w_r1)
//! 𝔭  = ν₂ A₀ w₁ + ν₀ν₁ w₁ + f(w₁)
//! ẇ₂ = −A₀ w₂ + ν₀ A₀ w₁ + h₂ + χ F₂ (w₂ − w_r2)
//! ```
//!
//! with `A₀ = −Δ` under Neumann conditions and `f(y) = τ y (y² − 1)`, split as
//! `f_c(y) = 2τy` (implicit) plus `f_e(y) = τy(y² − 3)` (explicit). The order
//! parameter and the chemical potential are solved together (stage A); the
//! temperature follows with the fresh order parameter (stage B).
//!
//! The explicit part of the potential is loaded as `∫ f_e(w_h) φᵢ` with the
//! same quadrature that evaluates the energy, which makes the discrete energy
//! decrease provable for the isothermal system.

use std::sync::Arc;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::actuators::{ActuatorFamily, Family};
use crate::error::{Error, Result};
use crate::grid::{dot, GridOperators};
use crate::projections::{low_rank_factors, FeedbackGains};
use crate::solver::{build_stage_solvers, Backend, BaseSolve, LowRankUpdate, StageCoefficients};

/// A spatially constant value or one value per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Field {
    Constant(f64),
    Nodal(Vec<f64>),
}

impl Default for Field {
    fn default() -> Self {
        Field::Constant(0.0)
    }
}

impl Field {
    pub fn resolve(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            Field::Constant(c) => Ok(vec![*c; n]),
            Field::Nodal(v) if v.len() == n => Ok(v.clone()),
            Field::Nodal(v) => Err(Error::DimensionMismatch {
                expected: n,
                got: v.len(),
            }),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Field::Constant(c) => *c == 0.0,
            Field::Nodal(v) => v.iter().all(|&x| x == 0.0),
        }
    }

    fn min(&self) -> f64 {
        match self {
            Field::Constant(c) => *c,
            Field::Nodal(v) => v.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// `g(w) = a₀ + a₁ w + a₂ w (|w| − 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GFamily {
    #[serde(default)]
    pub a0: Field,
    pub a1: Field,
    pub a2: Field,
}

impl GFamily {
    pub fn validate(&self) -> Result<()> {
        if !(self.a1.min() > 0.0 && self.a2.min() > 0.0) {
            return Err(Error::InvalidParameter(
                "g requires a1 > 0 and a2 > 0 everywhere".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysParams {
    pub nu0: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<GFamily>,
    #[serde(default, skip_serializing_if = "Field::is_zero")]
    pub h1: Field,
    #[serde(default, skip_serializing_if = "Field::is_zero")]
    pub h2: Field,
}

impl PhysParams {
    /// `ν₀ = 0.1, ν₁ = 1, ν₂ = 0.005, τ = 2`, no `g`, no forcing.
    pub fn standard() -> Self {
        Self {
            nu0: 0.1,
            nu1: 1.0,
            nu2: 0.005,
            tau: 2.0,
            g: None,
            h1: Field::Constant(0.0),
            h2: Field::Constant(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("nu0", self.nu0), ("nu1", self.nu1), ("nu2", self.nu2), ("tau", self.tau)] {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite")));
            }
        }
        if self.nu2 <= 0.0 {
            return Err(Error::InvalidParameter(format!("nu2 must be positive, got {}", self.nu2)));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        if let Some(g) = &self.g {
            g.validate()?;
        }
        Ok(())
    }

    /// Time-step bound `4ν₂/τ`.
    pub fn dt_limit(&self) -> f64 {
        4.0 * self.nu2 / self.tau
    }
}

/// How the feedback term is discretized in time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackTreatment {
    /// At the new time level, folded into the stage solves.
    #[default]
    Implicit,
    /// At the old time level, as a load.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default)]
    pub feedback: FeedbackTreatment,
    #[serde(default)]
    pub backend: Backend,
    /// Steps between field snapshots; zero disables them.
    #[serde(default)]
    pub snapshot_stride: usize,
}

impl SchemeConfig {
    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    /// Rejects `dt` above twice the stability bound and warns above it.
    pub fn validate(&self, params: &PhysParams) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "t_final must be positive, got {}",
                self.t_final
            )));
        }
        let limit = params.dt_limit();
        if self.dt > 2.0 * limit {
            return Err(Error::InvalidParameter(format!(
                "dt = {} exceeds twice the stability bound 4 nu2 / tau = {limit}",
                self.dt
            )));
        }
        if self.dt >= limit {
            log::warn!("dt = {} is not below the stability bound 4 nu2 / tau = {limit}", self.dt);
        }
        let steps = self.t_final / self.dt;
        if (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "t_final = {} is not a whole number of steps of dt = {}",
                self.t_final, self.dt
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    /// Chemical potential.
    pub p: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialKind {
    /// `w₁ = tanh(100 (x₁ − 1/2))`, `w₂ = 1`.
    Reference,
    /// `w₁ = 0.3 + cos(2πx₁) cos(2πx₂) / 100`, `w₂ = 0`.
    Controlled,
}

pub fn f_potential(y: f64, tau: f64) -> f64 {
    0.25 * tau * (1.0 - y * y).powi(2)
}

pub fn f_full(y: f64, tau: f64) -> f64 {
    tau * y * (y * y - 1.0)
}

pub fn f_expansive(y: f64, tau: f64) -> f64 {
    tau * y * (y * y - 3.0)
}

pub fn f_contractive(y: f64, tau: f64) -> f64 {
    2.0 * tau * y
}

/// Nodewise `(f_e(y), f_c(y))`.
pub fn f_split(y: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    (
        y.iter().map(|&v| f_expansive(v, tau)).collect(),
        y.iter().map(|&v| f_contractive(v, tau)).collect(),
    )
}

pub fn g_eval(gf: &GFamily, w: &[f64]) -> Result<Vec<f64>> {
    let n = w.len();
    let (a0, a1, a2) = (gf.a0.resolve(n)?, gf.a1.resolve(n)?, gf.a2.resolve(n)?);
    Ok((0..n)
        .map(|i| a0[i] + a1[i] * w[i] + a2[i] * w[i] * (w[i].abs() - 1.0))
        .collect())
}

/// `Ξ (y₁, y₂) = (y₁, y₂ + ν₀ y₁)`
pub fn transform_to_w(y1: &[f64], y2: &[f64], nu0: f64) -> (Vec<f64>, Vec<f64>) {
    let w2 = y1.iter().zip(y2).map(|(a, b)| b + nu0 * a).collect();
    (y1.to_vec(), w2)
}

/// `Ξ⁻¹ (w₁, w₂) = (w₁, w₂ − ν₀ w₁)`
pub fn transform_from_w(w1: &[f64], w2: &[f64], nu0: f64) -> (Vec<f64>, Vec<f64>) {
    let y2 = w1.iter().zip(w2).map(|(a, b)| b - nu0 * a).collect();
    (w1.to_vec(), y2)
}

pub fn initial_fields(kind: InitialKind, ops: &GridOperators) -> (Vec<f64>, Vec<f64>) {
    use std::f64::consts::PI;
    match kind {
        InitialKind::Reference => (
            ops.interpolate(|x| (100.0 * (x[0] - 0.5)).tanh()),
            vec![1.0; ops.n_nodes()],
        ),
        InitialKind::Controlled => (
            ops.interpolate(|x| 0.3 + (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).cos() / 100.0),
            vec![0.0; ops.n_nodes()],
        ),
    }
}

/// `𝔚 = ν₂ ‖w₁‖²_V + 2 ∫ F(w₁) + ϱ ‖w₂‖²_H`
pub fn free_energy(state: &SimState, params: &PhysParams, ops: &GridOperators, rho: f64) -> f64 {
    let v = ops.stiffness.quad_form(&state.w1) + ops.mass.quad_form(&state.w1);
    let pot = ops.integrate(&state.w1, |y| f_potential(y, params.tau));
    params.nu2 * v + 2.0 * pot + rho * ops.mass.quad_form(&state.w2)
}

/// Isothermal energy `(ν₂/2) w₁ᵀ S w₁ + ∫ F(w₁)`, nonincreasing under the
/// scheme when `ν₀ = ν₁ = 0` and `g = h = 0`.
pub fn isothermal_energy(w1: &[f64], params: &PhysParams, ops: &GridOperators) -> f64 {
    0.5 * params.nu2 * ops.stiffness.quad_form(w1) + ops.integrate(w1, |y| f_potential(y, params.tau))
}

/// Time stepper for one set of physical and scheme parameters; shared by
/// every trajectory of an ensemble.
pub struct Stepper<'a> {
    ops: &'a GridOperators,
    params: PhysParams,
    scheme: SchemeConfig,
    stage_a: Arc<dyn BaseSolve>,
    stage_b: Arc<dyn BaseSolve>,
    g: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    mh1: Vec<f64>,
    mh2: Vec<f64>,
}

/// Feedback data of one controlled trajectory.
pub struct Controller<'f> {
    pub fam: &'f ActuatorFamily,
    pub gains: &'f FeedbackGains,
    // (W, C) per family with F̂ = −C Wᵀ
    order: (Mat<f64>, Mat<f64>),
    heat: (Mat<f64>, Mat<f64>),
    implicit: Option<(LowRankUpdate, LowRankUpdate)>,
}

/// The reference trajectory at both ends of a step.
///
/// With implicit feedback `reference_next` must be the free step of
/// `reference_now` under the same stepper, as in a lockstep ensemble.
pub struct Tracking<'c, 'f> {
    pub controller: &'c Controller<'f>,
    pub reference_now: &'c SimState,
    pub reference_next: &'c SimState,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: SimState,
    /// Input coordinates `(û, v̂)` applied over the step.
    pub inputs: Option<(Vec<f64>, Vec<f64>)>,
}

impl<'a> Stepper<'a> {
    pub fn new(ops: &'a GridOperators, params: &PhysParams, scheme: &SchemeConfig) -> Result<Self> {
        params.validate()?;
        scheme.validate(params)?;
        let n = ops.n_nodes();
        let k = StageCoefficients {
            dt: scheme.dt,
            nu2: params.nu2,
            shift: params.nu0 * params.nu1 + 2.0 * params.tau,
        };
        let (stage_a, stage_b) = build_stage_solvers(ops, &k, scheme.backend)?;
        let g = match &params.g {
            Some(gf) => Some((gf.a0.resolve(n)?, gf.a1.resolve(n)?, gf.a2.resolve(n)?)),
            None => None,
        };
        let mh1 = ops.mass.mul_vec(&params.h1.resolve(n)?);
        let mh2 = ops.mass.mul_vec(&params.h2.resolve(n)?);
        Ok(Self {
            ops,
            params: params.clone(),
            scheme: scheme.clone(),
            stage_a,
            stage_b,
            g,
            mh1,
            mh2,
        })
    }

    pub fn ops(&self) -> &GridOperators {
        self.ops
    }

    pub fn params(&self) -> &PhysParams {
        &self.params
    }

    pub fn scheme(&self) -> &SchemeConfig {
        &self.scheme
    }

    /// Loads `∫ f_e(w_h) φᵢ`.
    fn expansive_load(&self, w1: &[f64]) -> Vec<f64> {
        let tau = self.params.tau;
        self.ops.load_vector(w1, |y| f_expansive(y, tau))
    }

    /// State at time `t` with the chemical potential from the constitutive
    /// relation.
    pub fn state_from_fields(&self, t: f64, w1: Vec<f64>, w2: Vec<f64>) -> Result<SimState> {
        self.ops.check_len(&w1)?;
        self.ops.check_len(&w2)?;
        let c = self.params.nu0 * self.params.nu1 + 2.0 * self.params.tau;
        let sw = self.ops.stiffness.mul_vec(&w1);
        let mw = self.ops.mass.mul_vec(&w1);
        let le = self.expansive_load(&w1);
        let rhs: Vec<f64> = (0..w1.len())
            .map(|i| self.params.nu2 * sw[i] + c * mw[i] + le[i])
            .collect();
        let p = self.ops.mass_solve(&rhs)?;
        Ok(SimState { t, w1, w2, p })
    }

    pub fn initial_state(&self, kind: InitialKind) -> Result<SimState> {
        let (w1, w2) = initial_fields(kind, self.ops);
        self.state_from_fields(0.0, w1, w2)
    }

    pub fn controller<'f>(&self, fam: &'f ActuatorFamily, gains: &'f FeedbackGains) -> Result<Controller<'f>> {
        let order = low_rank_factors(gains, fam, self.ops, Family::Order)?;
        let heat = low_rank_factors(gains, fam, self.ops, Family::Heat)?;
        let implicit = match self.scheme.feedback {
            FeedbackTreatment::Explicit => None,
            FeedbackTreatment::Implicit => {
                let dt = self.scheme.dt;
                let scaled = |c: &Mat<f64>| Mat::from_fn(c.nrows(), c.ncols(), |i, j| dt * c[(i, j)]);
                let a = LowRankUpdate::new(self.stage_a.clone(), order.0.clone(), scaled(&order.1))?;
                let b = LowRankUpdate::new(self.stage_b.clone(), heat.0.clone(), scaled(&heat.1))?;
                Some((a, b))
            }
        };
        Ok(Controller {
            fam,
            gains,
            order,
            heat,
            implicit,
        })
    }

    /// Stage A right-hand side without feedback: `(M wⁿ + Δt (ν₁ S w₂ⁿ − M g + M h₁), −L_e(wⁿ))`.
    fn stage_a_rhs(&self, state: &SimState) -> Vec<f64> {
        let ops = self.ops;
        let n = ops.n_nodes();
        let dt = self.scheme.dt;
        let sw2 = ops.stiffness.mul_vec(&state.w2);
        let mw1 = ops.mass.mul_vec(&state.w1);
        let mut forcing: Vec<f64> = (0..n).map(|i| self.params.nu1 * sw2[i] + self.mh1[i]).collect();
        if let Some((a0, a1, a2)) = &self.g {
            let gw: Vec<f64> = (0..n)
                .map(|i| {
                    let w = state.w1[i];
                    a0[i] + a1[i] * w + a2[i] * w * (w.abs() - 1.0)
                })
                .collect();
            axpy(&mut forcing, -1.0, &ops.mass.mul_vec(&gw));
        }
        let le = self.expansive_load(&state.w1);
        let mut x = vec![0.0; 2 * n];
        for i in 0..n {
            x[i] = mw1[i] + dt * forcing[i];
            x[n + i] = -le[i];
        }
        x
    }

    /// Stage B right-hand side without feedback: `M w₂ⁿ + Δt (ν₀ S w₁⁺ + M h₂)`.
    fn stage_b_rhs(&self, w2: &[f64], w1_next: &[f64]) -> Vec<f64> {
        let ops = self.ops;
        let dt = self.scheme.dt;
        let sw1 = ops.stiffness.mul_vec(w1_next);
        let mw2 = ops.mass.mul_vec(w2);
        (0..ops.n_nodes())
            .map(|i| mw2[i] + dt * (self.params.nu0 * sw1[i] + self.mh2[i]))
            .collect()
    }

    /// Advances `state` by one step, with feedback towards a reference when
    /// `tracking` is given.
    pub fn step(&self, state: &SimState, tracking: Option<&Tracking>) -> Result<StepOutput> {
        let out = match tracking {
            None => {
                let mut x = self.stage_a_rhs(state);
                self.stage_a.solve_in_place(&mut x)?;
                let n = self.ops.n_nodes();
                let w1 = x[..n].to_vec();
                let mut w2 = self.stage_b_rhs(&state.w2, &w1);
                self.stage_b.solve_in_place(&mut w2)?;
                let p = x[n..].to_vec();
                StepOutput {
                    state: SimState { t: state.t + self.scheme.dt, w1, w2, p },
                    inputs: None,
                }
            }
            Some(tr) => match &tr.controller.implicit {
                Some(updates) => self.step_implicit(state, tr, updates),
                None => self.step_explicit(state, tr),
            }?,
        };
        let st = &out.state;
        if !(st.w1.iter().chain(&st.w2).chain(&st.p).all(|v| v.is_finite())) {
            let dt = self.scheme.dt;
            return Err(Error::NonFinite {
                step: (st.t / dt).round() as usize,
                time: st.t,
            });
        }
        Ok(out)
    }

    /// Implicit feedback, solved for the deviation `y = w⁺ − w_r⁺`:
    /// `(A + Δt W C Wᵀ) y = b(wⁿ) − b(w_rⁿ)`. Since `A w_r⁺ = b(w_rⁿ)`, this is
    /// the scheme with feedback `−Δt W C Wᵀ (w⁺ − w_r⁺)`, but without the
    /// large term `Δt W C Wᵀ w_r⁺` on the right-hand side, whose cancellation
    /// would otherwise put a floor of about `ε ‖Δt C‖` under the error.
    fn step_implicit(
        &self,
        state: &SimState,
        tr: &Tracking,
        (a, b): &(LowRankUpdate, LowRankUpdate),
    ) -> Result<StepOutput> {
        let n = self.ops.n_nodes();
        let (now, next) = (tr.reference_now, tr.reference_next);
        let mut y = sub(&self.stage_a_rhs(state), &self.stage_a_rhs(now));
        a.solve_in_place(&mut y)?;
        let w1: Vec<f64> = (0..n).map(|i| next.w1[i] + y[i]).collect();
        let p: Vec<f64> = (0..n).map(|i| next.p[i] + y[n + i]).collect();
        let mut y2 = sub(&self.stage_b_rhs(&state.w2, &w1), &self.stage_b_rhs(&now.w2, &next.w1));
        b.solve_in_place(&mut y2)?;
        let w2: Vec<f64> = (0..n).map(|i| next.w2[i] + y2[i]).collect();
        let gains = tr.controller.gains;
        let inputs = (mat_vec(gains.f(Family::Order), &y[..n]), mat_vec(gains.f(Family::Heat), &y2));
        Ok(StepOutput {
            state: SimState { t: state.t + self.scheme.dt, w1, w2, p },
            inputs: Some(inputs),
        })
    }

    /// Explicit feedback: `−Δt W C Wᵀ (wⁿ − w_rⁿ)` on the right-hand side.
    fn step_explicit(&self, state: &SimState, tr: &Tracking) -> Result<StepOutput> {
        let n = self.ops.n_nodes();
        let dt = self.scheme.dt;
        let c = tr.controller;
        let now = tr.reference_now;
        let d1 = sub(&state.w1, &now.w1);
        let d2 = sub(&state.w2, &now.w2);
        let mut x = self.stage_a_rhs(state);
        axpy(&mut x[..n], -dt, &weighted(&c.order.0, &c.order.1, &d1));
        self.stage_a.solve_in_place(&mut x)?;
        let w1 = x[..n].to_vec();
        let mut w2 = self.stage_b_rhs(&state.w2, &w1);
        axpy(&mut w2, -dt, &weighted(&c.heat.0, &c.heat.1, &d2));
        self.stage_b.solve_in_place(&mut w2)?;
        let inputs = (mat_vec(c.gains.f(Family::Order), &d1), mat_vec(c.gains.f(Family::Heat), &d2));
        Ok(StepOutput {
            state: SimState { t: state.t + dt, w1, w2, p: x[n..].to_vec() },
            inputs: Some(inputs),
        })
    }
}

/// `W C Wᵀ x`
fn weighted(w: &Mat<f64>, c: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    let k = w.ncols();
    let n = w.nrows();
    let a: Vec<f64> = (0..k).map(|j| (0..n).map(|i| w[(i, j)] * x[i]).sum()).collect();
    let b: Vec<f64> = (0..k).map(|i| (0..k).map(|j| c[(i, j)] * a[j]).sum()).collect();
    (0..n).map(|i| (0..k).map(|j| w[(i, j)] * b[j]).sum()).collect()
}

pub(crate) fn mat_vec(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum())
        .collect()
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `‖u‖²_H + ‖v‖²_H` of the difference of two states.
pub fn difference_norms(a: &SimState, b: &SimState, ops: &GridOperators) -> (f64, f64) {
    let d1 = sub(&a.w1, &b.w1);
    let d2 = sub(&a.w2, &b.w2);
    (ops.mass.quad_form(&d1).max(0.0).sqrt(), ops.mass.quad_form(&d2).max(0.0).sqrt())
}

pub fn total_mass(w: &[f64], ops: &GridOperators) -> f64 {
    let ones = vec![1.0; w.len()];
    dot(&ops.mass.mul_vec(&ones), w)
}
