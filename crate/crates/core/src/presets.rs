//! Named experiment configurations.
//!
//! `paper-reference` is the free reference trajectory, `paper-free` the
//! uncontrolled trajectory from the perturbed initial state, and
//! `m<M>-lambda<λ>` a controlled run with `λ₁ = λ₂ = λ`.

use crate::dynamics::{FeedbackTreatment, InitialKind, PhysParams, SchemeConfig};
use crate::error::{Error, Result};
use crate::grid::{DaConvention, GridSpec};
use crate::run::{ControlConfig, Mode, RunConfig};
use crate::solver::Backend;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 96² cells, `Δt = 1e−4`.
    Desk,
    /// 150² cells, `Δt = 5e−5`. Hours of runtime.
    PaperScale,
}

impl Profile {
    pub fn cells(self) -> usize {
        match self {
            Profile::Desk => 96,
            Profile::PaperScale => 150,
        }
    }

    pub fn dt(self) -> f64 {
        match self {
            Profile::Desk => 1e-4,
            Profile::PaperScale => 5e-5,
        }
    }

    pub fn scheme(self) -> SchemeConfig {
        let dt = self.dt();
        SchemeConfig {
            dt,
            t_final: 1.0,
            feedback: FeedbackTreatment::Implicit,
            backend: Backend::Tensor,
            // snapshots every 0.1 time units
            snapshot_stride: (0.1 / dt).round() as usize,
        }
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "paper-reference",
    "paper-free",
    "m1-lambda1000",
    "m2-lambda250",
    "m2-lambda500",
    "m2-lambda1000",
    "m3-lambda1000",
];

fn base(profile: Profile, mode: Mode, initial: InitialKind, control: Option<ControlConfig>) -> RunConfig {
    RunConfig {
        mode,
        initial,
        grid: GridSpec::unit_square(profile.cells()),
        physics: PhysParams::standard(),
        scheme: profile.scheme(),
        control,
        rho: 1.0,
        output: None,
    }
}

/// Controlled configuration with `λ₁ = λ₂ = lambda`.
pub fn controlled(profile: Profile, level: usize, lambda: f64) -> RunConfig {
    base(
        profile,
        Mode::Controlled,
        InitialKind::Controlled,
        Some(ControlConfig {
            level,
            lambda1: lambda,
            lambda2: lambda,
            convention: DaConvention::Paper,
        }),
    )
}

/// Resolves a preset name. Besides the listed names any `m<M>-lambda<λ>`
/// is accepted.
pub fn preset(name: &str, profile: Profile) -> Result<RunConfig> {
    match name {
        "paper-reference" => return Ok(base(profile, Mode::Free, InitialKind::Reference, None)),
        "paper-free" => return Ok(base(profile, Mode::Free, InitialKind::Controlled, None)),
        _ => {}
    }
    let parsed = name
        .strip_prefix('m')
        .and_then(|rest| rest.split_once("-lambda"))
        .and_then(|(m, l)| Some((m.parse::<usize>().ok()?, l.parse::<f64>().ok()?)));
    match parsed {
        Some((m, l)) if m >= 1 && l >= 0.0 && l.is_finite() => Ok(controlled(profile, m, l)),
        _ => Err(Error::Config {
            key: "preset".into(),
            message: format!("unknown preset {name:?}; known: {}", PRESET_NAMES.join(", ")),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_presets_validate() {
        for name in PRESET_NAMES {
            let c = preset(name, Profile::Desk).unwrap();
            c.validate().unwrap();
            assert_eq!(c.scheme.n_steps(), 10_000);
        }
        let c = preset("m2-lambda1000", Profile::PaperScale).unwrap();
        assert_eq!(c.grid.cells, vec![150, 150]);
        assert_eq!(c.scheme.n_steps(), 20_000);
        let ctl = c.control.unwrap();
        assert_eq!((ctl.level, ctl.lambda1, ctl.lambda2), (2, 1000.0, 1000.0));
        assert_eq!(preset("m3-lambda50", Profile::Desk).unwrap().control.unwrap().level, 3);
    }

    #[test]
    fn unknown_presets_are_rejected() {
        for bad in ["", "m0-lambda5", "m2-lambda", "mx-lambda1", "m2-lambda-3", "reference"] {
            assert!(preset(bad, Profile::Desk).is_err(), "{bad}");
        }
    }
}
