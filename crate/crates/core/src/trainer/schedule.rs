use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    TriPhase,
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "tri_phase" => Ok(Self::TriPhase),
            o => Err(Error::Config(format!("unknown schedule {o:?}"))),
        }
    }
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::TriPhase => "tri_phase",
        }
    }
}

/// Final rate of the tri-phase decay, relative to the base rate.
pub const TRI_PHASE_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_steps: usize,
    pub warm_frac: f64,
    pub hold_frac: f64,
}

impl ScheduleConfig {
    pub fn cosine(base_lr: f64, total_steps: usize) -> Self {
        Self { kind: ScheduleKind::Cosine, base_lr, total_steps, warm_frac: 0.0, hold_frac: 0.0 }
    }

    /// 10% linear warm-up, 80% hold, exponential decay over the rest.
    pub fn tri_phase(base_lr: f64, total_steps: usize) -> Self {
        Self { kind: ScheduleKind::TriPhase, base_lr, total_steps, warm_frac: 0.1, hold_frac: 0.8 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base learning rate must be positive, got {}", self.base_lr)));
        }
        if self.warm_frac < 0.0 || self.hold_frac < 0.0 || self.warm_frac + self.hold_frac > 1.0 {
            return Err(Error::Config("schedule fractions must be >= 0 and sum to at most 1".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` (clamped to `[0, total_steps]`).
pub fn lr_at(s: &ScheduleConfig, step: usize) -> f64 {
    let total = s.total_steps.max(1);
    let step = step.min(total);
    match s.kind {
        ScheduleKind::Cosine => s.base_lr * (1.0 + (PI * step as f64 / total as f64).cos()) / 2.0,
        ScheduleKind::TriPhase => {
            let warm = (s.warm_frac * total as f64).round() as usize;
            let hold = (s.hold_frac * total as f64).round() as usize;
            if step < warm {
                s.base_lr * step as f64 / warm as f64
            } else if step < warm + hold {
                s.base_lr
            } else {
                let decay = total.saturating_sub(warm + hold).max(1);
                let frac = (step - warm - hold) as f64 / decay as f64;
                s.base_lr * TRI_PHASE_FLOOR.powf(frac)
            }
        }
    }
}
