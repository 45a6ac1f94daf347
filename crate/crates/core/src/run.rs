//! Run configuration, the lockstep ensemble driver and run records.
//!
//! A controlled trajectory always tracks a co-simulated reference: one free
//! trajectory from the reference initial state is stepped in lockstep with
//! every member, sharing the factored stage solvers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::actuators::{build_layout, evaluate_family, ActuatorFamily};
use crate::cache::GainsCache;
use crate::dynamics::{
    difference_norms, free_energy, total_mass, Controller, InitialKind, PhysParams, SchemeConfig,
    SimState, Stepper, Tracking,
};
use crate::error::{Error, Result};
use crate::grid::{assemble, DaConvention, GridOperators, GridSpec};
use crate::projections::{assemble_coupling, build_gains, FeedbackGains};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Actuator level `M`.
    pub level: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub convention: DaConvention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Free,
    Controlled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub initial: InitialKind,
    pub grid: GridSpec,
    pub physics: PhysParams,
    pub scheme: SchemeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlConfig>,
    /// Weight of the temperature term in the free energy.
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

fn default_rho() -> f64 {
    1.0
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.physics.validate()?;
        self.scheme.validate(&self.physics)?;
        match (self.mode, &self.control) {
            (Mode::Controlled, None) => {
                return Err(Error::Config {
                    key: "control".into(),
                    message: "controlled mode needs a [control] table".into(),
                })
            }
            (Mode::Controlled, Some(c)) if c.level == 0 => {
                return Err(Error::Config {
                    key: "control.level".into(),
                    message: "must be at least 1".into(),
                })
            }
            (Mode::Controlled, _) if self.initial == InitialKind::Reference => {
                return Err(Error::Config {
                    key: "initial".into(),
                    message: "a controlled run starts from the controlled initial state".into(),
                })
            }
            _ => {}
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config {
                key: "rho".into(),
                message: format!("must be positive, got {}", self.rho),
            });
        }
        Ok(())
    }
}

/// Time series of one trajectory.
///
/// Row 0 is the initial state. For `n ≥ 1`, row `n` holds the state at `tₙ`
/// and the input coordinates applied over `[tₙ₋₁, tₙ]`; row 0 holds the
/// coordinates the feedback law assigns to the initial difference.
#[derive(Clone, Debug, Default)]
pub struct RunRecord {
    pub label: String,
    pub dt: f64,
    pub times: Vec<f64>,
    pub norm_z1: Vec<f64>,
    pub norm_z2: Vec<f64>,
    pub energy: Vec<f64>,
    pub mass: Vec<f64>,
    pub inputs_u: Vec<Vec<f64>>,
    pub inputs_v: Vec<Vec<f64>>,
    pub snapshots: Vec<(usize, SimState)>,
    pub elapsed_seconds: f64,
}

impl RunRecord {
    /// `‖z‖_{H×H}` per row.
    pub fn norm_z(&self) -> Vec<f64> {
        self.norm_z1
            .iter()
            .zip(&self.norm_z2)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .collect()
    }

    pub fn input_l2(&self) -> Vec<f64> {
        (0..self.times.len())
            .map(|i| {
                let u = self.inputs_u.get(i).map_or(0.0, |v| v.iter().map(|x| x * x).sum());
                let v = self.inputs_v.get(i).map_or(0.0, |v| v.iter().map(|x| x * x).sum());
                (u + v).sqrt()
            })
            .collect()
    }

    pub fn has_inputs(&self) -> bool {
        !self.inputs_u.is_empty()
    }

    pub fn final_error(&self) -> f64 {
        *self.norm_z().last().unwrap_or(&f64::NAN)
    }

    pub fn snapshot_at(&self, step: usize) -> Option<&SimState> {
        self.snapshots.iter().find(|(s, _)| *s == step).map(|(_, st)| st)
    }

    fn push_row(&mut self, t: f64, z: (f64, f64), energy: f64, mass: f64) {
        self.times.push(t);
        self.norm_z1.push(z.0);
        self.norm_z2.push(z.1);
        self.energy.push(energy);
        self.mass.push(mass);
    }

    pub fn timeseries_csv(&self) -> String {
        let mut s = String::from("t,norm_H_z,norm_H_z1,norm_H_z2,energy,mass,input_l2\n");
        let z = self.norm_z();
        let inp = self.input_l2();
        for i in 0..self.times.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                fmt17(self.times[i]),
                fmt17(z[i]),
                fmt17(self.norm_z1[i]),
                fmt17(self.norm_z2[i]),
                fmt17(self.energy[i]),
                fmt17(self.mass[i]),
                fmt17(inp[i])
            );
        }
        s
    }

    pub fn inputs_csv(&self) -> String {
        let ku = self.inputs_u.first().map_or(0, Vec::len);
        let kv = self.inputs_v.first().map_or(0, Vec::len);
        let mut s = String::from("t");
        for j in 1..=ku {
            let _ = write!(s, ",u{j}");
        }
        for j in 1..=kv {
            let _ = write!(s, ",v{j}");
        }
        s.push('\n');
        for i in 0..self.inputs_u.len() {
            s.push_str(&fmt17(self.times[i]));
            for x in self.inputs_u[i].iter().chain(&self.inputs_v[i]) {
                s.push(',');
                s.push_str(&fmt17(*x));
            }
            s.push('\n');
        }
        s
    }

    /// Writes `config.copy`, `timeseries.csv`, `inputs.csv` (controlled runs)
    /// and `snapshots/stepNNNNNN.csv` into `dir`.
    pub fn write(&self, dir: &Path, config_text: &str, ops: &GridOperators) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.copy"), config_text)?;
        fs::write(dir.join("timeseries.csv"), self.timeseries_csv())?;
        if self.has_inputs() {
            fs::write(dir.join("inputs.csv"), self.inputs_csv())?;
        }
        if !self.snapshots.is_empty() {
            let snap = dir.join("snapshots");
            fs::create_dir_all(&snap)?;
            for (step, st) in &self.snapshots {
                fs::write(snap.join(format!("step{step:06}.csv")), snapshot_csv(st, ops))?;
            }
        }
        Ok(())
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn snapshot_csv(st: &SimState, ops: &GridOperators) -> String {
    let mut s = String::from("x1,x2,w1,w2,p\n");
    for (i, x) in ops.coords.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            fmt17(x[0]),
            fmt17(x[1]),
            fmt17(st.w1[i]),
            fmt17(st.w2[i]),
            fmt17(st.p[i])
        );
    }
    s
}

/// Actuators, coupling and gains for one control configuration, through the
/// cache when one is given.
pub fn prepare_control(
    ops: &GridOperators,
    control: &ControlConfig,
    cache: Option<&GainsCache>,
) -> Result<(ActuatorFamily, FeedbackGains)> {
    let layout = build_layout(control.level, &ops.spec)?;
    let fam = evaluate_family(&layout, ops)?;
    let key = GainsCache::key(ops, control.level, control.lambda1, control.lambda2, control.convention);
    if let Some(cache) = cache {
        match cache.load(&key) {
            Ok(Some(g)) => {
                log::debug!("gains cache hit for {key}");
                return Ok((fam, g));
            }
            Ok(None) => {}
            Err(e) => log::warn!("ignoring unreadable gains cache entry: {e}"),
        }
    }
    let coupling = assemble_coupling(&fam, ops)?;
    let gains = build_gains(
        &fam,
        ops,
        &coupling,
        control.lambda1,
        control.lambda2,
        control.convention,
    )?;
    if let Some(cache) = cache {
        if let Err(e) = cache.store(&key, &gains) {
            log::warn!("could not store gains in {}: {e}", cache.dir().display());
        }
    }
    Ok((fam, gains))
}

/// Shared settings of a lockstep ensemble.
#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    pub grid: GridSpec,
    pub physics: PhysParams,
    pub scheme: SchemeConfig,
    pub rho: f64,
    /// One entry per member; `None` is a free trajectory from the controlled
    /// initial state.
    pub members: Vec<Option<ControlConfig>>,
}

pub struct EnsembleRecord {
    pub reference: RunRecord,
    /// Per member: the record, or the error that stopped it.
    pub members: Vec<std::result::Result<RunRecord, String>>,
}

fn member_label(c: &Option<ControlConfig>) -> String {
    match c {
        None => "free".into(),
        Some(c) => format!("M={} lambda1={} lambda2={} {}", c.level, c.lambda1, c.lambda2, c.convention.as_str()),
    }
}

/// Steps the reference and all members in lockstep.
pub fn run_ensemble(cfg: &EnsembleConfig, cache: Option<&GainsCache>) -> Result<EnsembleRecord> {
    let ops = assemble(&cfg.grid)?;
    run_ensemble_on(&ops, cfg, cache)
}

pub fn run_ensemble_on(ops: &GridOperators, cfg: &EnsembleConfig, cache: Option<&GainsCache>) -> Result<EnsembleRecord> {
    let start = Instant::now();
    let stepper = Stepper::new(ops, &cfg.physics, &cfg.scheme)?;
    let steps = cfg.scheme.n_steps();
    let stride = cfg.scheme.snapshot_stride;
    let dt = cfg.scheme.dt;

    let mut prepared: Vec<std::result::Result<Option<(ActuatorFamily, FeedbackGains)>, String>> = Vec::new();
    for m in &cfg.members {
        prepared.push(match m {
            None => Ok(None),
            Some(c) => prepare_control(ops, c, cache).map(Some).map_err(|e| e.to_string()),
        });
    }
    let mut controllers: Vec<std::result::Result<Option<Controller>, String>> = Vec::new();
    for p in &prepared {
        controllers.push(match p {
            Err(e) => Err(e.clone()),
            Ok(None) => Ok(None),
            Ok(Some((fam, gains))) => stepper.controller(fam, gains).map(Some).map_err(|e| e.to_string()),
        });
    }

    let snapshot_due = |n: usize| stride > 0 && (n % stride == 0 || n == steps);

    let mut reference = stepper.initial_state(InitialKind::Reference)?;
    let mut ref_record = RunRecord {
        label: "reference".into(),
        dt,
        ..Default::default()
    };
    let observe = |rec: &mut RunRecord, st: &SimState, refst: &SimState, n: usize| {
        rec.push_row(
            st.t,
            difference_norms(st, refst, ops),
            free_energy(st, &cfg.physics, ops, cfg.rho),
            total_mass(&st.w1, ops),
        );
        if snapshot_due(n) {
            rec.snapshots.push((n, st.clone()));
        }
    };
    observe(&mut ref_record, &reference, &reference, 0);

    struct Live {
        state: SimState,
        record: RunRecord,
    }
    let mut live: Vec<std::result::Result<Live, String>> = Vec::new();
    for (i, c) in controllers.iter().enumerate() {
        live.push(match c {
            Err(e) => Err(e.clone()),
            Ok(ctrl) => {
                let state = stepper.initial_state(InitialKind::Controlled)?;
                let mut record = RunRecord {
                    label: member_label(&cfg.members[i]),
                    dt,
                    ..Default::default()
                };
                observe(&mut record, &state, &reference, 0);
                if let Some(ctrl) = ctrl {
                    let d1 = crate::dynamics::sub(&state.w1, &reference.w1);
                    let d2 = crate::dynamics::sub(&state.w2, &reference.w2);
                    record.inputs_u.push(crate::dynamics::mat_vec(ctrl.gains.f(crate::actuators::Family::Order), &d1));
                    record.inputs_v.push(crate::dynamics::mat_vec(ctrl.gains.f(crate::actuators::Family::Heat), &d2));
                }
                Ok(Live { state, record })
            }
        });
    }

    let report_every = (steps / 10).max(1);
    let parallel = live.iter().filter(|l| l.is_ok()).count() > 1
        && std::thread::available_parallelism().map_or(1, |n| n.get()) > 1;
    for n in 0..steps {
        let next_ref = stepper.step(&reference, None)?.state;
        // members are independent given the reference; step them on scoped
        // threads (results do not depend on scheduling)
        let outcomes: Vec<Option<Result<crate::dynamics::StepOutput>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = live
                .iter()
                .enumerate()
                .map(|(i, slot)| {
                    let m = slot.as_ref().ok()?;
                    let ctrl = controllers[i].as_ref().expect("live members have controllers");
                    let (stepper, reference, next_ref) = (&stepper, &reference, &next_ref);
                    let work = move || {
                        let tracking = ctrl.as_ref().map(|c| Tracking {
                            controller: c,
                            reference_now: reference,
                            reference_next: next_ref,
                        });
                        stepper.step(&m.state, tracking.as_ref())
                    };
                    Some(if parallel { Err(scope.spawn(work)) } else { Ok(work()) })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.map(|h| match h {
                        Ok(r) => r,
                        Err(join) => join.join().expect("member step panicked"),
                    })
                })
                .collect()
        });
        for (slot, outcome) in live.iter_mut().zip(outcomes) {
            let (Ok(m), Some(outcome)) = (slot.as_mut(), outcome) else { continue };
            match outcome {
                Ok(out) => {
                    if let Some((u, v)) = out.inputs {
                        m.record.inputs_u.push(u);
                        m.record.inputs_v.push(v);
                    }
                    m.state = out.state;
                    observe(&mut m.record, &m.state, &next_ref, n + 1);
                }
                Err(e) => {
                    log::warn!("member {} stopped: {e}", m.record.label);
                    *slot = Err(e.to_string());
                }
            }
        }
        reference = next_ref;
        observe(&mut ref_record, &reference, &reference, n + 1);
        if (n + 1) % report_every == 0 {
            log::info!(
                "step {}/{} (t = {:.4}), {:.1} s",
                n + 1,
                steps,
                reference.t,
                start.elapsed().as_secs_f64()
            );
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    ref_record.elapsed_seconds = elapsed;
    let members = live
        .into_iter()
        .map(|l| {
            l.map(|mut m| {
                m.record.elapsed_seconds = elapsed;
                m.record
            })
        })
        .collect();
    Ok(EnsembleRecord {
        reference: ref_record,
        members,
    })
}

/// Runs one configuration. A free run from the reference initial state
/// produces the reference itself (`z ≡ 0`); any other run is measured
/// against a co-simulated reference.
pub fn run(config: &RunConfig, cache: Option<&GainsCache>) -> Result<(GridOperators, RunRecord)> {
    config.validate()?;
    let ops = assemble(&config.grid)?;
    let member = match config.mode {
        Mode::Controlled => config.control.clone(),
        Mode::Free => None,
    };
    let reference_only = config.mode == Mode::Free && config.initial == InitialKind::Reference;
    let ens = EnsembleConfig {
        grid: config.grid.clone(),
        physics: config.physics.clone(),
        scheme: config.scheme.clone(),
        rho: config.rho,
        members: if reference_only { vec![] } else { vec![member] },
    };
    let mut rec = run_ensemble_on(&ops, &ens, cache)?;
    let record = if reference_only {
        rec.reference
    } else {
        rec.members.pop().expect("one member").map_err(Error::Solve)?
    };
    Ok((ops, record))
}
