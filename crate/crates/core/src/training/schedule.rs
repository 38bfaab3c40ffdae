use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inverse-square-root schedule with linear warmup:
/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_schedule(step: usize, warmup_steps: usize, d_model: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::StepZero);
    }
    if warmup_steps == 0 || d_model == 0 {
        return Err(Error::InvalidConfig("warmup_steps and d_model must be positive".into()));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Warmup,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub warmup_steps: usize,
    pub d_model: usize,
    pub constant_lr: f64,
}

impl LrSchedule {
    /// Rate for a 1-based optimizer step.
    pub fn at(&self, step: usize) -> Result<f64> {
        match self.kind {
            ScheduleKind::Warmup => lr_schedule(step, self.warmup_steps, self.d_model),
            ScheduleKind::Constant if step == 0 => Err(Error::StepZero),
            ScheduleKind::Constant => Ok(self.constant_lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn peak_at_warmup() {
        let r = lr_schedule(4000, 4000, 256).unwrap();
        let oracle = 1.0 / (256f64.sqrt() * 4000f64.sqrt());
        assert!((r - oracle).abs() < 1e-15);
        assert!((r - 9.8821e-4).abs() < 1e-8);
    }

    #[test]
    fn first_step_is_ramp_start() {
        let r = lr_schedule(1, 4000, 256).unwrap();
        assert!((r - 256f64.powf(-0.5) * 4000f64.powf(-1.5)).abs() < 1e-18);
    }

    #[test]
    fn step_zero_rejected() {
        assert!(matches!(lr_schedule(0, 4000, 256), Err(Error::StepZero)));
        let c = LrSchedule {
            kind: ScheduleKind::Constant,
            warmup_steps: 1,
            d_model: 1,
            constant_lr: 1e-5,
        };
        assert!(c.at(0).is_err());
        assert_eq!(c.at(7).unwrap(), 1e-5);
    }

    proptest! {
        #[test]
        fn rises_then_decays(warmup in 1usize..5000, step in 1usize..20000) {
            let a = lr_schedule(step, warmup, 256).unwrap();
            let b = lr_schedule(step + 1, warmup, 256).unwrap();
            if step + 1 <= warmup {
                prop_assert!(b >= a);
            } else if step >= warmup {
                prop_assert!(b <= a);
            }
        }
    }
}
