use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Always `peak`.
    Constant,
    /// Half cosine from `peak` to `end` over all steps.
    Cosine,
    /// Linear `start` → `peak` during warmup, then half cosine to `end`.
    WarmupCosine,
}

/// Schedule shape with warmup given as a fraction of training, as stored in presets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub start: f64,
    pub peak: f64,
    #[serde(default)]
    pub end: f64,
    #[serde(default)]
    pub warmup_fraction: f64,
}

impl ScheduleSpec {
    pub fn constant(v: f64) -> Self {
        ScheduleSpec { kind: ScheduleKind::Constant, start: v, peak: v, end: v, warmup_fraction: 0.0 }
    }

    pub fn cosine(from: f64, to: f64) -> Self {
        ScheduleSpec { kind: ScheduleKind::Cosine, start: from, peak: from, end: to, warmup_fraction: 0.0 }
    }

    pub fn warmup_cosine(start: f64, peak: f64, end: f64, warmup_fraction: f64) -> Self {
        ScheduleSpec { kind: ScheduleKind::WarmupCosine, start, peak, end, warmup_fraction }
    }

    pub fn resolve(&self, total_steps: u64) -> Result<Schedule> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!("warmup fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        let warmup_steps = match self.kind {
            ScheduleKind::WarmupCosine => (self.warmup_fraction * total_steps as f64).round() as u64,
            _ => 0,
        };
        Schedule::new(self.kind, self.start, self.peak, self.end, warmup_steps, total_steps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub start: f64,
    pub peak: f64,
    pub end: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, start: f64, peak: f64, end: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::config(format!("warmup {warmup_steps} exceeds total {total_steps} steps")));
        }
        Ok(Schedule { kind, start, peak, end, warmup_steps, total_steps })
    }

    /// Value at `step`; steps past the end hold the final value.
    pub fn value(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        match self.kind {
            ScheduleKind::Constant => self.peak,
            ScheduleKind::Cosine => half_cosine(self.peak, self.end, step, self.total_steps),
            ScheduleKind::WarmupCosine => {
                if step < self.warmup_steps {
                    self.start + (self.peak - self.start) * step as f64 / self.warmup_steps as f64
                } else {
                    half_cosine(self.peak, self.end, step - self.warmup_steps, self.total_steps - self.warmup_steps)
                }
            }
        }
    }
}

fn half_cosine(from: f64, to: f64, step: u64, span: u64) -> f64 {
    if span == 0 || step >= span {
        return to;
    }
    let t = step as f64 / span as f64;
    from + (to - from) * 0.5 * (1.0 - (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = Schedule::new(ScheduleKind::WarmupCosine, 0.0, 2.0, 0.5, 10, 110).unwrap();
        assert_eq!(s.value(0), 0.0);
        assert_eq!(s.value(5), 1.0);
        assert_eq!(s.value(10), 2.0);
        assert_eq!(s.value(110), 0.5);
        assert!((s.value(60) - 1.25).abs() < 1e-12);
        let c = ScheduleSpec::cosine(0.04, 0.4).resolve(100).unwrap();
        assert_eq!(c.value(0), 0.04);
        assert_eq!(c.value(100), 0.4);
        assert_eq!(ScheduleSpec::constant(0.1).resolve(7).unwrap().value(3), 0.1);
        assert!(Schedule::new(ScheduleKind::Cosine, 0.0, 1.0, 0.0, 5, 4).unwrap_err().is_config());
    }
}
