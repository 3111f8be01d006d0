//! Pulse-period recovery from detection time tags.
//!
//! Every click is delayed by a whole number of quarter periods plus an
//! eighth, so signal tags share one phase of the quarter-period grid while
//! noise tags are spread uniformly. The period is found by maximizing the
//! coherence of that phase over growing prefixes of the record, then refined
//! by a robust straight-line fit of the phase residuals against time.

use std::f64::consts::TAU;

use super::SyncError;

/// Minimum number of tags for a period estimate.
pub const MIN_TAGS: usize = 1000;
/// Relative frequency offset the search is guaranteed to cover.
pub const MAX_RELATIVE_ERROR: f64 = 1.5e-5;
/// Fit stops once the residual drift is below this (s/s).
pub const CONVERGED_SLOPE: f64 = 1e-12;

const GRID: usize = 129;
const MAX_REFINE: usize = 30;
/// Residuals (in quarter-period cycles) beyond this are treated as noise.
const INLIER: f64 = 0.12;

/// Pulse period and phase recovered from the tags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodFit {
    pub period: f64,
    /// Time of one quarter-bin center, near the first tag.
    pub grid_center: f64,
    pub inliers: usize,
    /// Coherence of the final grid search, in units of √N.
    pub coherence_sigma: f64,
}

/// Sum of unit phasors exp(2πi·f·(t − t0)) over the tags.
fn coherence(tags: &[f64], t0: f64, f: f64) -> (f64, f64) {
    let (mut re, mut im) = (0.0, 0.0);
    for &t in tags {
        let x = f * (t - t0);
        let a = TAU * (x - x.floor());
        re += a.cos();
        im += a.sin();
    }
    (re, im)
}

fn wrap(x: f64) -> f64 {
    x - x.round()
}

/// Recovers the pulse period from sorted tags, given a nominal period
/// within ±1.5·10⁻⁵ relative of the truth.
pub fn recover_period(tags: &[f64], nominal_period: f64) -> Result<f64, SyncError> {
    fit_period(tags, nominal_period).map(|f| f.period)
}

/// As [`recover_period`], also returning the grid phase.
pub fn fit_period(tags: &[f64], nominal_period: f64) -> Result<PeriodFit, SyncError> {
    if tags.len() < MIN_TAGS {
        return Err(SyncError::SyncFailed(format!(
            "{} tags, at least {MIN_TAGS} needed",
            tags.len()
        )));
    }
    if !(nominal_period > 0.0) {
        return Err(SyncError::SyncFailed("nominal period must be positive".into()));
    }
    let t0 = tags[0];
    let span = tags[tags.len() - 1] - t0;
    if !(span > 0.0) {
        return Err(SyncError::SyncFailed("tags span no time".into()));
    }

    // coarse-to-fine search on the quarter-grid frequency
    let mut f = 4.0 / nominal_period;
    let mut half_width = f * MAX_RELATIVE_ERROR;
    let mut sigma;
    loop {
        let step = 2.0 * half_width / (GRID - 1) as f64;
        // a frequency error of step/2 costs at most 1/8 cycle over the prefix
        let horizon = (0.25 / step).min(span);
        let end = tags.partition_point(|&t| t - t0 <= horizon);
        let prefix = &tags[..end];
        let mut best = (f64::NEG_INFINITY, f);
        for g in 0..GRID {
            let cand = f - half_width + g as f64 * step;
            let (re, im) = coherence(prefix, t0, cand);
            let mag = re.hypot(im);
            if mag > best.0 {
                best = (mag, cand);
            }
        }
        f = best.1;
        sigma = best.0 / (prefix.len() as f64).sqrt();
        half_width = step;
        if horizon >= span {
            break;
        }
    }
    // A uniform-phase record gives |Σ| of order √N; require a clear excess.
    if sigma < 6.0 {
        return Err(SyncError::SyncFailed(format!(
            "no periodic structure in tags (coherence {sigma:.1}σ)"
        )));
    }

    // robust linear fit of phase residuals, iterated to convergence
    let mut phase0 = {
        let (re, im) = coherence(tags, t0, f);
        im.atan2(re) / TAU
    };
    let mut inliers = 0;
    for _ in 0..MAX_REFINE {
        let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &t in tags {
            let x = t - t0;
            let r = wrap(f * x - phase0);
            if r.abs() < INLIER {
                n += 1.0;
                sx += x;
                sy += r;
                sxx += x * x;
                sxy += x * r;
            }
        }
        inliers = n as usize;
        let denom = n * sxx - sx * sx;
        if n < MIN_TAGS as f64 / 2.0 || denom <= 0.0 {
            return Err(SyncError::SyncFailed(format!("phase fit kept only {n} tags")));
        }
        let slope = (n * sxy - sx * sy) / denom;
        let intercept = (sy - slope * sx) / n;
        // the residual grows as slope·x, so the grid runs at f − slope
        f -= slope;
        phase0 += intercept;
        if (slope / f).abs() < CONVERGED_SLOPE {
            let period = 4.0 / f;
            // bin centers sit where f·(t − t0) − phase0 is an integer
            let grid_center = t0 + phase0.rem_euclid(1.0) / f;
            return Ok(PeriodFit {
                period,
                grid_center,
                inliers,
                coherence_sigma: sigma,
            });
        }
    }
    Err(SyncError::SyncFailed(format!(
        "phase fit did not converge ({inliers} inliers)"
    )))
}

/// Keeps a clock solution locked by refitting it on each block of tags.
///
/// A signal tag sits at `offset + (slot + (line + 0.5) / 4) · period`, so
/// `4 (t − offset) / period − 0.5` is an integer for it. The wrapped
/// residuals of inlying tags are fitted by a straight line in time; the
/// slope corrects the frequency and the intercept the offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockTracker {
    pub period: f64,
    pub offset: f64,
    pub updates: u64,
}

impl ClockTracker {
    /// Tags required before a block refit is applied.
    pub const MIN_INLIERS: usize = 50;

    pub fn new(period: f64, offset: f64) -> Self {
        Self {
            period,
            offset,
            updates: 0,
        }
    }

    /// Refits on one block of sorted tags; returns whether it updated.
    pub fn refit(&mut self, tags: &[f64]) -> bool {
        if tags.len() < 2 {
            return false;
        }
        let f = 4.0 / self.period;
        let t_mid = 0.5 * (tags[0] + tags[tags.len() - 1]);
        let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &t in tags {
            let r = wrap(f * (t - self.offset) - 0.5);
            if r.abs() < INLIER {
                let x = t - t_mid;
                n += 1.0;
                sx += x;
                sy += r;
                sxx += x * x;
                sxy += x * r;
            }
        }
        let denom = n * sxx - sx * sx;
        if (n as usize) < Self::MIN_INLIERS || denom <= 0.0 {
            return false;
        }
        let beta = (n * sxy - sx * sy) / denom;
        let alpha = (sy - beta * sx) / n;
        let f_new = f - beta;
        self.offset = (f * self.offset + alpha - beta * t_mid) / f_new;
        self.period = 4.0 / f_new;
        self.updates += 1;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linksim::{ChannelParams, LinkSimulator};
    use crate::model::ProtocolParams;

    #[test]
    fn exact_multiples() {
        let p = 20e-9;
        let tags: Vec<f64> = (0..5000u64).map(|k| (k * 37) as f64 * p).collect();
        let got = recover_period(&tags, p).unwrap();
        assert!(((got - p) / p).abs() < 1e-12, "{got}");
    }

    #[test]
    fn too_few_tags() {
        let tags: Vec<f64> = (0..10).map(|k| k as f64 * 20e-9).collect();
        assert!(matches!(recover_period(&tags, 20e-9), Err(SyncError::SyncFailed(_))));
    }

    #[test]
    fn uniform_tags_fail() {
        let mut rng = crate::rng::stream(1);
        use rand::Rng;
        let mut tags: Vec<f64> = (0..20_000).map(|_| rng.gen::<f64>()).collect();
        tags.sort_by(f64::total_cmp);
        assert!(recover_period(&tags, 20e-9).is_err());
    }

    #[test]
    fn simulated_clock_error() {
        let params = ProtocolParams::default();
        let ch = ChannelParams {
            clock_error: 1e-6,
            ..Default::default()
        };
        let mut sim = LinkSimulator::new(&params, &ch, 42);
        let mut ev = Vec::new();
        sim.run_until(12_000_000, &mut ev);
        sim.finish(&mut ev);
        let tags: Vec<f64> = ev.iter().map(|e| e.timestamp).take(10_000).collect();
        assert_eq!(tags.len(), 10_000);
        let got = recover_period(&tags, params.period()).unwrap();
        let truth = params.period() * (1.0 + 1e-6);
        assert!(((got - truth) / truth).abs() <= 1e-9, "{}", (got - truth) / truth);
    }

    #[test]
    fn tracker_follows_frequency_error() {
        let p_true = 20e-9 * (1.0 + 8e-10);
        let off_true = 7.3e-9;
        // signal tags on the true grid plus uniform noise
        let mut rng = crate::rng::stream(5);
        use rand::Rng;
        let mut tags: Vec<f64> = (0..20_000u64)
            .map(|i| {
                let slot = i * 2_500;
                let line = rng.gen_range(0..4) as f64;
                off_true + (slot as f64 + (line + 0.5) / 4.0) * p_true + rng.gen_range(-1e-10..1e-10)
            })
            .collect();
        let span = tags[tags.len() - 1];
        tags.extend((0..2_000).map(|_| rng.gen_range(0.0..span)));
        tags.sort_by(f64::total_cmp);
        let mut tr = ClockTracker::new(20e-9, 7.3e-9 + 1e-10);
        for _ in 0..3 {
            assert!(tr.refit(&tags));
        }
        assert!(((tr.period - p_true) / p_true).abs() < 1e-10, "{}", tr.period);
        let t = span;
        let slot_est = (t - tr.offset) / tr.period;
        let slot_true = (t - off_true) / p_true;
        assert!((slot_est - slot_true).abs() < 0.01);
    }
}
