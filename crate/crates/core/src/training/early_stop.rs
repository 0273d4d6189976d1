use serde::{Deserialize, Serialize};

/// Robust metrics on the holdout slice at one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutMetrics {
    pub epoch: usize,
    pub robust_loss: f64,
    pub robust_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub every: usize,
    pub best_epoch: Option<usize>,
    pub best_robust_error: f64,
    pub best_robust_loss: f64,
}

impl EarlyStopState {
    pub fn new(every: usize) -> Self {
        Self { every, best_epoch: None, best_robust_error: f64::INFINITY, best_robust_loss: f64::INFINITY }
    }

    pub fn due(&self, epoch: usize) -> bool {
        self.every > 0 && epoch > 0 && epoch % self.every == 0
    }
}

/// Records `metrics` as the best so far iff its robust error is strictly lower.
pub fn early_stop_update(state: &EarlyStopState, metrics: &HoldoutMetrics) -> EarlyStopState {
    if state.best_epoch.is_none() || metrics.robust_error < state.best_robust_error {
        EarlyStopState {
            best_epoch: Some(metrics.epoch),
            best_robust_error: metrics.robust_error,
            best_robust_loss: metrics.robust_loss,
            ..*state
        }
    } else {
        *state
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(epoch: usize, err: f64) -> HoldoutMetrics {
        HoldoutMetrics { epoch, robust_loss: err * 2.0, robust_error: err }
    }

    #[test]
    fn first_evaluation_is_best() {
        let s = early_stop_update(&EarlyStopState::new(5), &m(5, 0.9));
        assert_eq!(s.best_epoch, Some(5));
    }

    #[test]
    fn strict_improvement_and_earlier_ties() {
        let mut s = EarlyStopState::new(5);
        for (i, err) in [0.5, 0.4, 0.45, 0.4].into_iter().enumerate() {
            s = early_stop_update(&s, &m(5 * (i + 1), err));
        }
        assert_eq!(s.best_epoch, Some(10));
        assert_eq!(s.best_robust_error, 0.4);
    }

    #[test]
    fn non_improving_sequence_keeps_best() {
        let mut s = early_stop_update(&EarlyStopState::new(5), &m(5, 0.2));
        for e in [10, 15, 20] {
            s = early_stop_update(&s, &m(e, 0.3));
        }
        assert_eq!(s.best_epoch, Some(5));
    }
}
