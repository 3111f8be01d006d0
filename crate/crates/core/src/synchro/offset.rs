//! Slot alignment against the public preamble by FFT cross-correlation.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::linksim::detector::demux_timetag;
use crate::linksim::source::sync_state;
use crate::model::{Basis, State};

use super::clock::PeriodFit;
use super::SyncError;

/// Search limits and acceptance threshold for offset recovery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetSearch {
    /// Largest slot shift considered.
    pub max_shift: u64,
    /// Peak must exceed the correlation floor by this many standard deviations.
    pub threshold_sigma: f64,
    /// Detections required inside the search window.
    pub min_detections: usize,
}

impl Default for OffsetSearch {
    fn default() -> Self {
        Self {
            max_shift: 1 << 20,
            threshold_sigma: 6.0,
            min_detections: 100,
        }
    }
}

/// Full timing solution: Bob's tag `t` belongs to transmitter slot
/// `demux_timetag(t, period, offset).slot`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockEstimate {
    pub period: f64,
    /// Tagger time of the start of transmitter slot 0.
    pub offset: f64,
    /// Significance of the correlation peak in standard deviations.
    pub confidence: f64,
}

fn encode(s: State) -> Complex<f64> {
    match s {
        State::L => Complex::new(-1.0, 0.0),
        State::R => Complex::new(1.0, 0.0),
        State::D => Complex::new(0.0, -1.0),
        State::A => Complex::new(0.0, 1.0),
    }
}

fn encode_outcome(basis: Basis, bit: bool) -> Complex<f64> {
    encode(State::from_outcome(basis, bit))
}

/// Preamble spectrum for a search window, reusable across click sets.
struct PreambleCorrelator {
    size: usize,
    window: usize,
    max_shift: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    spectrum: Vec<Complex<f64>>,
}

impl PreambleCorrelator {
    fn new(sync_seed: u64, sync_len: u64, max_shift: u64) -> Self {
        let window = (max_shift + sync_len) as usize;
        // shifts never exceed max_shift, so indices s + D stay below the
        // window and the circular correlation cannot wrap
        let size = (window + 1).next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let mut spectrum = vec![Complex::new(0.0, 0.0); size];
        for (s, v) in spectrum.iter_mut().take(sync_len as usize).enumerate() {
            *v = encode(sync_state(sync_seed, s as u64));
        }
        fwd.process(&mut spectrum);
        for v in spectrum.iter_mut() {
            *v = v.conj();
        }
        Self {
            size,
            window,
            max_shift: max_shift as usize,
            fwd,
            inv,
            spectrum,
        }
    }

    fn correlate(&self, clicks: &[(u64, Basis, bool)]) -> (u64, f64) {
        let mut b = vec![Complex::new(0.0, 0.0); self.size];
        for &(slot, basis, bit) in clicks {
            if (slot as usize) < self.window {
                b[slot as usize] += encode_outcome(basis, bit);
            }
        }
        self.fwd.process(&mut b);
        for (x, y) in b.iter_mut().zip(&self.spectrum) {
            *x *= y;
        }
        self.inv.process(&mut b);
        // score(D) = Re Σ_s conj(a[s])·b[s + D]
        let scores: Vec<f64> = b[..=self.max_shift].iter().map(|c| c.re / self.size as f64).collect();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let (best, peak) = scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
        let sigma = if var > 0.0 { (peak - mean) / var.sqrt() } else { 0.0 };
        (best as u64, sigma)
    }
}

/// Correlation of Bob's demuxed clicks against the preamble, for shifts
/// 0..=max_shift; returns (best shift, significance).
pub fn correlate_preamble(
    clicks: &[(u64, Basis, bool)],
    sync_seed: u64,
    sync_len: u64,
    max_shift: u64,
) -> (u64, f64) {
    PreambleCorrelator::new(sync_seed, sync_len, max_shift).correlate(clicks)
}

/// Finds the tagger time of transmitter slot 0.
///
/// `fit` fixes the quarter-bin grid; which quarter is the first delay line
/// and which slot is slot 0 are found by correlating against the preamble
/// for each of the four quarter assignments.
pub fn recover_offset(
    tags: &[f64],
    fit: &PeriodFit,
    sync_seed: u64,
    sync_len: u64,
    search: &OffsetSearch,
) -> Result<ClockEstimate, SyncError> {
    let p = fit.period;
    let quarter = p / 4.0;
    // bin edge phase; candidate slot-0 origins lie in (-quarter/2, p - quarter/2]
    // so that rounding at a bin edge cannot push the true origin one period late
    let base = (fit.grid_center - quarter / 2.0).rem_euclid(quarter);
    let correlator = PreambleCorrelator::new(sync_seed, sync_len, search.max_shift);
    let mut best: Option<(f64, u64, f64)> = None;
    for q in 0..4 {
        let mut origin = (base + q as f64 * quarter).rem_euclid(p);
        if origin > p - quarter / 2.0 {
            origin -= p;
        }
        let window_end = origin + (search.max_shift + sync_len) as f64 * p;
        let clicks: Vec<(u64, Basis, bool)> = tags
            .iter()
            .take_while(|&&t| t < window_end)
            .filter_map(|&t| {
                let d = demux_timetag(t, p, origin);
                (d.slot >= 0).then_some((d.slot as u64, d.basis, d.bit))
            })
            .collect();
        if clicks.len() < search.min_detections {
            return Err(SyncError::SyncFailed(format!(
                "{} detections in the preamble search window, {} needed",
                clicks.len(),
                search.min_detections
            )));
        }
        let (shift, sigma) = correlator.correlate(&clicks);
        if best.is_none_or(|b| sigma > b.2) {
            best = Some((origin, shift, sigma));
        }
    }
    let (origin, shift, sigma) = best.expect("four hypotheses evaluated");
    if sigma < search.threshold_sigma {
        return Err(SyncError::SyncFailed(format!(
            "preamble correlation peak {sigma:.1}σ below {:.1}σ",
            search.threshold_sigma
        )));
    }
    Ok(ClockEstimate {
        period: p,
        offset: origin + shift as f64 * p,
        confidence: sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linksim::{ChannelParams, LinkSimulator, SourceSeeds};
    use crate::model::ProtocolParams;
    use crate::synchro::clock::fit_period;

    fn run(ch: &ChannelParams, params: &ProtocolParams, seed: u64, slots: u64) -> Vec<f64> {
        let mut sim = LinkSimulator::new(params, ch, seed);
        let mut ev = Vec::new();
        sim.run_until(slots, &mut ev);
        sim.finish(&mut ev);
        ev.iter().map(|e| e.timestamp).collect()
    }

    #[test]
    fn noiseless_zero_shift() {
        let params = ProtocolParams {
            sync_len: 200_000,
            ..Default::default()
        };
        let ch = ChannelParams {
            fiber_loss_db: 0.0,
            mux_loss_db: 0.0,
            detector_efficiency: 1.0,
            dead_time: 1e-6,
            dark_rate: 0.0,
            background_rate: 0.0,
            intrinsic_error: 0.0,
            intrinsic_error_check: 0.0,
            drift_step: 0.0,
            jitter_sigma: 0.0,
            ..Default::default()
        };
        let tags = run(&ch, &params, 1, 400_000);
        let fit = fit_period(&tags, params.period()).unwrap();
        let search = OffsetSearch {
            max_shift: 50_000,
            ..Default::default()
        };
        let est = recover_offset(&tags, &fit, SourceSeeds::from_master(1).sync, params.sync_len, &search).unwrap();
        assert!(est.offset.abs() < params.period() / 8.0, "{}", est.offset);
        assert!(est.confidence > 20.0);

        // the same grid written with a phase on either side of a bin edge
        let q = params.period() / 4.0;
        for k in [-3.0, 0.0, 5.0, 21.0] {
            for eps in [-1e-9, 0.0, 1e-9] {
                let moved = PeriodFit {
                    grid_center: fit.grid_center + k * q + eps * q,
                    ..fit
                };
                let e = recover_offset(&tags, &moved, SourceSeeds::from_master(1).sync, params.sync_len, &search).unwrap();
                assert!(e.offset.abs() < params.period() / 8.0, "k {k} eps {eps}: {}", e.offset);
            }
        }
    }

    #[test]
    fn lossy_link_with_shift() {
        let params = ProtocolParams::default();
        let shift = 12_345u64;
        let ch = ChannelParams {
            fiber_loss_db: 15.2 - 3.0,
            tagger_offset: (shift as f64 + 0.37) * params.period(),
            ..Default::default()
        };
        let tags = run(&ch, &params, 7, 4_000_000);
        let fit = fit_period(&tags, params.period()).unwrap();
        let est = recover_offset(
            &tags,
            &fit,
            SourceSeeds::from_master(7).sync,
            params.sync_len,
            &OffsetSearch::default(),
        )
        .unwrap();
        let err = (est.offset - ch.tagger_offset) / params.period();
        assert!(err.abs() < 0.125, "offset off by {err} slots");
    }

    #[test]
    fn wrong_sequence_fails() {
        let params = ProtocolParams::default();
        let tags = run(&ChannelParams::default(), &params, 3, 3_000_000);
        let fit = fit_period(&tags, params.period()).unwrap();
        let r = recover_offset(&tags, &fit, 0xdead_beef, params.sync_len, &OffsetSearch::default());
        assert!(matches!(r, Err(SyncError::SyncFailed(_))), "{r:?}");
    }
}
