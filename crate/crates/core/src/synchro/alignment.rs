//! Rolling marker QBER and the realignment trigger.

use std::collections::VecDeque;

/// Request to the receiver's polarization controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealignCommand {
    /// Acquisition time at which the command was issued.
    pub at: f64,
    pub rolling_qber: f64,
}

/// Alignment monitor state, fed once per error-correction block.
#[derive(Debug, Clone)]
pub struct AlignmentState {
    pub window: f64,
    pub threshold: f64,
    pub realigning: bool,
    pub realign_count: u64,
    samples: VecDeque<(f64, u64, u64)>,
    errors: u64,
    total: u64,
    armed: bool,
    last_completion: Option<f64>,
}

impl AlignmentState {
    pub fn new(window: f64, threshold: f64) -> Self {
        Self {
            window,
            threshold,
            realigning: false,
            realign_count: 0,
            samples: VecDeque::new(),
            errors: 0,
            total: 0,
            armed: true,
            last_completion: None,
        }
    }

    /// Marker QBER over the window (0 before any marker is seen).
    pub fn rolling_qber(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.errors as f64 / self.total as f64
        }
    }

    /// Marker count currently inside the window.
    pub fn window_markers(&self) -> u64 {
        self.total
    }

    /// Marks the running realignment as finished at time `t`.
    pub fn realign_completed(&mut self, t: f64) {
        if self.realigning {
            self.realigning = false;
            self.last_completion = Some(t);
        }
    }

    /// Whether a command would be accepted now (used for audits).
    pub fn is_armed(&self) -> bool {
        self.armed
    }
}

/// Adds the marker results of the block ending at `t` and decides whether
/// to realign.
///
/// A command is issued when the rolling QBER is above threshold, no
/// realignment is running and the trigger is armed. The trigger re-arms
/// once the rolling QBER is back at or below threshold, or one full window
/// after the last realignment finished (the window still holds pre-correction
/// samples until then).
pub fn drift_feedback_step(state: &mut AlignmentState, t: f64, errors: u64, markers: u64) -> Option<RealignCommand> {
    state.samples.push_back((t, errors, markers));
    state.errors += errors;
    state.total += markers;
    while let Some(&(ts, e, n)) = state.samples.front() {
        if ts <= t - state.window {
            state.samples.pop_front();
            state.errors -= e;
            state.total -= n;
        } else {
            break;
        }
    }
    let q = state.rolling_qber();
    if q <= state.threshold {
        state.armed = true;
    } else if let Some(done) = state.last_completion {
        if t - done >= state.window {
            state.armed = true;
        }
    }
    if q > state.threshold && !state.realigning && state.armed {
        state.realigning = true;
        state.armed = false;
        state.realign_count += 1;
        state.last_completion = None;
        return Some(RealignCommand { at: t, rolling_qber: q });
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigger_above_threshold() {
        let mut s = AlignmentState::new(60.0, 0.025);
        assert!(drift_feedback_step(&mut s, 1.0, 26, 1000).is_some());
        let mut s = AlignmentState::new(60.0, 0.025);
        assert!(drift_feedback_step(&mut s, 1.0, 10, 1000).is_none());
        let mut s = AlignmentState::new(60.0, 0.025);
        assert!(drift_feedback_step(&mut s, 1.0, 25, 1000).is_none(), "2.5% is not above");
    }

    #[test]
    fn no_duplicate_while_realigning() {
        let mut s = AlignmentState::new(60.0, 0.025);
        assert!(drift_feedback_step(&mut s, 1.0, 26, 1000).is_some());
        for t in 2..10 {
            assert!(drift_feedback_step(&mut s, t as f64, 26, 1000).is_none());
        }
        assert_eq!(s.realign_count, 1);
    }

    #[test]
    fn rearms_after_recovery() {
        let mut s = AlignmentState::new(5.0, 0.025);
        assert!(drift_feedback_step(&mut s, 1.0, 100, 1000).is_some());
        s.realign_completed(2.0);
        // stale high samples keep the window above threshold: no retrigger
        assert!(drift_feedback_step(&mut s, 3.0, 10, 1000).is_none());
        for t in 4..10 {
            drift_feedback_step(&mut s, t as f64, 10, 1000);
        }
        assert!(s.rolling_qber() <= 0.025);
        assert!(drift_feedback_step(&mut s, 10.0, 400, 1000).is_some());
        assert_eq!(s.realign_count, 2);
    }

    #[test]
    fn window_slides() {
        let mut s = AlignmentState::new(3.0, 0.025);
        drift_feedback_step(&mut s, 1.0, 50, 100);
        for t in 2..=4 {
            drift_feedback_step(&mut s, t as f64, 0, 100);
        }
        assert_eq!(s.window_markers(), 300);
        assert_eq!(s.rolling_qber(), 0.0);
    }
}
