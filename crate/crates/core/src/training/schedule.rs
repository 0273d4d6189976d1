use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule, evaluated once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// `base * factor^k` after `k` milestones have been reached.
    MultiStep {
        milestones: Vec<usize>,
        #[serde(default = "default_factor")]
        factor: f64,
    },
    /// Multi-step with the reductions placed at the very end of training.
    Late {
        milestones: Vec<usize>,
        #[serde(default = "default_factor")]
        factor: f64,
    },
    /// Piecewise linear within each cycle: up from 0 to `peak` over the first
    /// `warmup` fraction, then down to 0 at the end of the cycle. `warmup = 0`
    /// starts every cycle at the peak; `warmup = 0.5` is symmetric.
    Cyclic {
        peak: f64,
        cycle: usize,
        #[serde(default)]
        warmup: f64,
    },
}

fn default_factor() -> f64 {
    0.1
}

impl Schedule {
    /// Reductions at 40%, 60% and 80% of training.
    pub fn standard(epochs: usize) -> Self {
        Self::MultiStep { milestones: vec![epochs * 2 / 5, epochs * 3 / 5, epochs * 4 / 5], factor: 0.1 }
    }

    /// Two reductions in the last 7% of training.
    pub fn late(epochs: usize) -> Self {
        Self::Late { milestones: vec![epochs * 14 / 15, epochs * 29 / 30], factor: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Constant => Ok(()),
            Self::MultiStep { factor, .. } | Self::Late { factor, .. } if *factor >= 0.0 => Ok(()),
            Self::Cyclic { peak, cycle, warmup } if *peak >= 0.0 && *cycle > 0 && (0.0..1.0).contains(warmup) => Ok(()),
            other => Err(Error::Config(format!("invalid learning-rate schedule {other:?}"))),
        }
    }
}

/// Learning rate for (zero-based) `epoch`.
pub fn lr_at(base: f64, schedule: &Schedule, epoch: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::MultiStep { milestones, factor } | Schedule::Late { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| m <= epoch).count();
            base * factor.powi(passed as i32)
        }
        Schedule::Cyclic { peak, cycle, warmup } => {
            let u = (epoch % cycle) as f64 / *cycle as f64;
            if u < *warmup {
                peak * u / warmup
            } else {
                peak * (1.0 - u) / (1.0 - warmup)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_step_drops_by_ten() {
        let s = Schedule::MultiStep { milestones: vec![60, 90, 120], factor: 0.1 };
        assert_eq!(lr_at(0.05, &s, 59), 0.05);
        assert!((lr_at(0.05, &s, 61) - 0.005).abs() < 1e-15);
        assert!((lr_at(0.05, &s, 149) - 0.00005).abs() < 1e-18);
        assert_eq!(Schedule::standard(150), s);
    }

    #[test]
    fn constant_ignores_epoch() {
        for e in [0, 7, 1000] {
            assert_eq!(lr_at(0.3, &Schedule::Constant, e), 0.3);
        }
    }

    #[test]
    fn cyclic_interpolates_linearly() {
        let down = Schedule::Cyclic { peak: 0.2, cycle: 30, warmup: 0.0 };
        assert!((lr_at(0.0, &down, 15) - 0.1).abs() < 1e-15);
        assert_eq!(lr_at(0.0, &down, 0), 0.2);
        assert_eq!(lr_at(0.0, &down, 30), 0.2);
        let tri = Schedule::Cyclic { peak: 0.2, cycle: 30, warmup: 0.5 };
        assert_eq!(lr_at(0.0, &tri, 0), 0.0);
        assert!((lr_at(0.0, &tri, 15) - 0.2).abs() < 1e-15);
        assert!((lr_at(0.0, &tri, 6) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn late_schedule_reduces_near_the_end() {
        let s = Schedule::late(150);
        assert_eq!(s, Schedule::Late { milestones: vec![140, 145], factor: 0.1 });
        assert_eq!(lr_at(0.05, &s, 139), 0.05);
        assert!((lr_at(0.05, &s, 146) - 0.0005).abs() < 1e-15);
    }
}
