//! Curriculum schedules for the massive-weight dropout probability.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `p0 · (1 − t / T_step)`
    #[default]
    Step,
    /// `p0 · (1 − (e − 1) / T_epoch)`
    EpochBefore,
    /// `p0 · (1 − e / T_epoch)`
    EpochAfter,
    /// `p0 · exp(−α t)`
    Exp,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [
        ScheduleKind::Step,
        ScheduleKind::EpochBefore,
        ScheduleKind::EpochAfter,
        ScheduleKind::Exp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Step => "step",
            ScheduleKind::EpochBefore => "epoch-before",
            ScheduleKind::EpochAfter => "epoch-after",
            ScheduleKind::Exp => "exp",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.as_str().replace('-', "_") == s)
            .ok_or_else(|| Error::Input(format!("unknown schedule `{s}` (step, epoch-before, epoch-after, exp)")))
    }
}

/// A dropout-probability schedule over steps `t ∈ [0, T_step]` and epochs
/// `e ∈ [1, T_epoch]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub kind: ScheduleKind,
    pub p0: f64,
    /// Decay rate of the exponential schedule.
    pub alpha: f64,
    pub total_steps: usize,
    pub total_epochs: usize,
}

impl CurriculumSchedule {
    pub fn new(kind: ScheduleKind, p0: f64, alpha: f64, total_steps: usize, total_epochs: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&p0) {
            return Err(Error::Config(format!("p0 must lie in [0, 1], got {p0}")));
        }
        if kind == ScheduleKind::Exp && !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("exp schedule needs alpha > 0, got {alpha}")));
        }
        if total_steps == 0 || total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one step and one epoch".into()));
        }
        Ok(Self {
            kind,
            p0,
            alpha,
            total_steps,
            total_epochs,
        })
    }

    /// Dropout probability at global step `t` within epoch `e`.
    pub fn eval(&self, t: usize, e: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::Input(format!("step {t} exceeds T_step = {}", self.total_steps)));
        }
        if e == 0 || e > self.total_epochs {
            return Err(Error::Input(format!("epoch {e} outside [1, {}]", self.total_epochs)));
        }
        let p = match self.kind {
            ScheduleKind::Step => self.p0 * (1.0 - t as f64 / self.total_steps as f64),
            ScheduleKind::EpochBefore => self.p0 * (1.0 - (e - 1) as f64 / self.total_epochs as f64),
            ScheduleKind::EpochAfter => self.p0 * (1.0 - e as f64 / self.total_epochs as f64),
            ScheduleKind::Exp => self.p0 * (-self.alpha * t as f64).exp(),
        };
        Ok(p.clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched(kind: ScheduleKind, p0: f64) -> CurriculumSchedule {
        CurriculumSchedule::new(kind, p0, 0.01, 100, 3).unwrap()
    }

    #[test]
    fn examples() {
        assert_eq!(sched(ScheduleKind::Step, 0.8).eval(0, 1).unwrap(), 0.8);
        assert_eq!(sched(ScheduleKind::Step, 0.8).eval(100, 3).unwrap(), 0.0);
        assert_eq!(sched(ScheduleKind::EpochAfter, 0.8).eval(5, 3).unwrap(), 0.0);
        let e = sched(ScheduleKind::Exp, 1.0).eval(100, 1).unwrap();
        assert!((e - 0.367879).abs() < 1e-6);
        let b = sched(ScheduleKind::EpochBefore, 0.9).eval(0, 3).unwrap();
        assert!((b - 0.3).abs() < 1e-12);
    }

    #[test]
    fn invalid_counters_and_parameters() {
        let s = sched(ScheduleKind::Step, 0.5);
        assert!(s.eval(101, 1).is_err());
        assert!(s.eval(0, 0).is_err());
        assert!(s.eval(0, 4).is_err());
        assert!(CurriculumSchedule::new(ScheduleKind::Step, 1.5, 0.0, 10, 1).is_err());
        assert!(CurriculumSchedule::new(ScheduleKind::Exp, 0.5, 0.0, 10, 1).is_err());
    }

    #[test]
    fn parses_cli_names() {
        for k in ScheduleKind::ALL {
            assert_eq!(k.as_str().parse::<ScheduleKind>().unwrap(), k);
        }
        assert_eq!(
            "epoch_before".parse::<ScheduleKind>().unwrap(),
            ScheduleKind::EpochBefore
        );
    }

    proptest! {
        #[test]
        fn bounded_and_non_increasing(
            kind in prop::sample::select(ScheduleKind::ALL.to_vec()),
            p0 in 0.0f64..=1.0,
            alpha in 0.001f64..1.0,
            steps in 1usize..600,
            epochs in 1usize..6,
        ) {
            let s = CurriculumSchedule::new(kind, p0, alpha, steps, epochs).unwrap();
            let mut prev = f64::INFINITY;
            for e in 1..=epochs {
                let t = (steps * e) / epochs;
                let p = s.eval(t, e).unwrap();
                prop_assert!((0.0..=p0).contains(&p));
                prop_assert!(p <= prev);
                prev = p;
            }
            if kind == ScheduleKind::EpochBefore && p0 > 0.0 {
                prop_assert!(s.eval(steps, epochs).unwrap() > 0.0);
            }
        }
    }
}
