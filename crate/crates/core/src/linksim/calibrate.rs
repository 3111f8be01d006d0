//! Background-rate calibration against a target key-basis QBER penalty.
//!
//! Runs with and without background share every random stream except the
//! noise process, and the QBER is scored by expectation (signal clicks
//! contribute the channel error probability, noise clicks one half), so the
//! on/off difference is far less noisy than counting errors.

use crate::model::{Basis, ProtocolParams};

use super::channel::ChannelParams;
use super::detector::Origin;
use super::stream::LinkSimulator;

/// Key-basis sifted clicks split by origin.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KeyBasisTally {
    pub signal: u64,
    pub noise: u64,
    /// Observed errors among all sifted key-basis clicks.
    pub errors: u64,
}

impl KeyBasisTally {
    pub fn total(&self) -> u64 {
        self.signal + self.noise
    }

    /// Expected QBER given a drift-free signal error probability.
    pub fn expected_qber(&self, signal_error: f64) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.signal as f64 * signal_error + self.noise as f64 * 0.5) / self.total() as f64
    }

    pub fn observed_qber(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.errors as f64 / self.total() as f64
        }
    }
}

/// Simulates `pulses` slots and tallies sifted key-basis clicks.
pub fn key_basis_tally(params: &ProtocolParams, ch: &ChannelParams, pulses: u64, seed: u64) -> KeyBasisTally {
    let mut sim = LinkSimulator::new(params, ch, seed);
    let mut tally = KeyBasisTally::default();
    let mut events = Vec::new();
    // prepared states of the slots still awaiting their clicks
    let mut prepared = std::collections::VecDeque::new();
    let mut first_slot = 0u64;
    let mut step = |sim: &mut LinkSimulator, end: u64, finish: bool| {
        events.clear();
        sim.run_until_with(end, &mut events, |chunk| {
            prepared.extend(chunk.iter().map(|p| (p.prepared, p.is_sync)));
        });
        if finish {
            sim.finish(&mut events);
        }
        for ev in &events {
            let Some(&(state, is_sync)) = ev.slot.checked_sub(first_slot).and_then(|i| prepared.get(i as usize)) else {
                continue;
            };
            if is_sync || ev.outcome.basis() != Basis::Key || state.basis() != Basis::Key {
                continue;
            }
            match ev.origin {
                Origin::Signal => tally.signal += 1,
                _ => tally.noise += 1,
            }
            if ev.outcome != state {
                tally.errors += 1;
            }
        }
        // keep a few slots of history for clicks held back at the chunk edge
        let keep_from = sim.slot().saturating_sub(4);
        while first_slot < keep_from {
            prepared.pop_front();
            first_slot += 1;
        }
    };
    let chunk = 1u64 << 22;
    let mut at = 0;
    while at < pulses {
        at = (at + chunk).min(pulses);
        step(&mut sim, at, at == pulses);
    }
    tally
}

/// Bisects the background rate at which the expected key-basis QBER rises
/// by `target_delta` over the background-free link. Drift is disabled
/// during calibration.
pub fn calibrate_background(
    params: &ProtocolParams,
    ch: &ChannelParams,
    target_delta: f64,
    pulses: u64,
    seed: u64,
) -> f64 {
    let base = ChannelParams {
        drift_step: 0.0,
        background_rate: 0.0,
        ..ch.clone()
    };
    let e = base.error_probability(Basis::Key, 0.0);
    let q_off = key_basis_tally(params, &base, pulses, seed).expected_qber(e);
    let delta_at = |rate: f64| {
        let on = ChannelParams {
            background_rate: rate,
            ..base.clone()
        };
        key_basis_tally(params, &on, pulses, seed).expected_qber(e) - q_off
    };
    let mut lo = 0.0;
    let mut hi = 1000.0;
    while delta_at(hi) < target_delta {
        lo = hi;
        hi *= 2.0;
        assert!(hi < 1e9, "target penalty unreachable");
    }
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if delta_at(mid) < target_delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-3 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_tally_has_no_noise() {
        let params = ProtocolParams {
            sync_len: 0,
            ..Default::default()
        };
        let ch = ChannelParams {
            dark_rate: 0.0,
            background_rate: 0.0,
            drift_step: 0.0,
            ..Default::default()
        };
        let t = key_basis_tally(&params, &ch, 2_000_000, 3);
        assert_eq!(t.noise, 0);
        // about 1770 clicks in 40 ms, 0.9 x 0.5 of them in matching key bases
        assert!(t.signal > 600, "{t:?}");
        assert!((t.expected_qber(0.017) - 0.017).abs() < 1e-12);
    }
}
