//! Single time-multiplexed detector: basis choice, noise, dead time and
//! time-slot demultiplexing.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::model::{Basis, State};
use crate::rng::{stream, unit_f64};

use super::channel::{ArrivalRecord, ChannelParams};
use super::source::PulseRecord;

/// Where a click came from. Simulator-only ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Signal,
    Dark,
    Background,
}

impl Origin {
    pub fn code(self) -> u8 {
        match self {
            Origin::Signal => 0,
            Origin::Dark => 1,
            Origin::Background => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Origin> {
        match c {
            0 => Some(Origin::Signal),
            1 => Some(Origin::Dark),
            2 => Some(Origin::Background),
            _ => None,
        }
    }
}

/// A detector click. Only `timestamp` is visible to the receiver; the rest
/// is ground truth kept for oracles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionEvent {
    /// Seconds on the receiver's time tagger.
    pub timestamp: f64,
    pub origin: Origin,
    /// Transmitter slot the click is attributed to.
    pub slot: u64,
    /// Photons emitted in that slot.
    pub true_photon_number: u32,
    /// State registered by the detector.
    pub outcome: State,
    /// Probability that this click would be in error if measured in the
    /// check basis (0.5 for noise clicks).
    pub phase_error_prob: f64,
}

/// Receiver-side view of a click after slot assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DemuxedEvent {
    pub slot: i64,
    pub basis: Basis,
    pub bit: bool,
}

/// Index of the delay line used for an outcome: (K,0), (K,1), (C,0), (C,1).
pub fn delay_index(basis: Basis, bit: bool) -> u32 {
    basis.index() as u32 * 2 + bit as u32
}

fn outcome_of_index(q: u32) -> (Basis, bool) {
    match q & 3 {
        0 => (Basis::Key, false),
        1 => (Basis::Key, true),
        2 => (Basis::Check, false),
        _ => (Basis::Check, true),
    }
}

/// Maps a time tag to (slot, basis, bit) given the pulse period and the time
/// of slot 0. Quarter-period phase bins select the outcome.
pub fn demux_timetag(t: f64, period: f64, offset: f64) -> DemuxedEvent {
    assert!(period > 0.0, "period must be positive");
    let rel = t - offset;
    let phase = rel.rem_euclid(period);
    let q = ((phase / (period / 4.0)).floor() as u32).min(3);
    let (basis, bit) = outcome_of_index(q);
    let slot = ((rel - q as f64 * period / 4.0) / period).round() as i64;
    DemuxedEvent { slot, basis, bit }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    t: f64,
    event: DetectionEvent,
}

/// Stateful detector: carries dead time, pending events and the noise
/// process across chunks.
#[derive(Debug, Clone)]
pub struct Detector {
    ch: ChannelParams,
    period: f64,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    noise: Option<Exp<f64>>,
    dark_fraction: f64,
    next_noise: f64,
    last_kept: f64,
    carry: Vec<Candidate>,
    scratch: Vec<Candidate>,
    dropped_dead: u64,
}

impl Detector {
    /// `period` is the true pulse period.
    pub fn new(ch: &ChannelParams, period: f64, seed: u64) -> Self {
        let rate = ch.dark_rate + ch.background_rate;
        // Separate streams keep signal clicks identical when only the noise
        // rates change (common random numbers for calibration).
        let rng = stream(seed);
        let mut noise_rng = stream(seed ^ 0x6e6f_6973_65);
        let noise = (rate > 0.0).then(|| Exp::new(rate).expect("positive rate"));
        let next_noise = match &noise {
            Some(d) => d.sample(&mut noise_rng),
            None => f64::INFINITY,
        };
        Self {
            ch: ch.clone(),
            period,
            rng,
            noise_rng,
            noise,
            dark_fraction: if rate > 0.0 { ch.dark_rate / rate } else { 0.0 },
            next_noise,
            last_kept: f64::NEG_INFINITY,
            carry: Vec::new(),
            scratch: Vec::new(),
            dropped_dead: 0,
        }
    }

    /// Candidate clicks removed by the dead-time rule so far.
    pub fn dead_time_losses(&self) -> u64 {
        self.dropped_dead
    }

    /// Processes the arrivals of one chunk of contiguous pulses and appends
    /// the clicks that can no longer be reordered to `out`. `paused` lists
    /// intervals (transmitter time) during which clicks are discarded.
    pub fn detect_chunk(
        &mut self,
        arrivals: &[ArrivalRecord],
        pulses: &[PulseRecord],
        paused: &[(f64, f64)],
        out: &mut Vec<DetectionEvent>,
    ) {
        let Some(first) = pulses.first() else {
            return;
        };
        let start_slot = first.slot;
        let end_slot = start_slot + pulses.len() as u64;
        let quarter = self.period / 4.0;
        let mut cands = std::mem::take(&mut self.scratch);
        cands.clear();
        cands.append(&mut self.carry);

        for a in arrivals {
            let prepared = pulses[(a.slot - start_slot) as usize].prepared;
            let word = self.rng.next_u64();
            let basis = if word & 1 == 0 { Basis::Key } else { Basis::Check };
            let bit = if prepared.basis() == basis {
                let e = self.ch.error_probability(basis, a.theta);
                prepared.bit() ^ (unit_f64(self.rng.next_u64()) < e)
            } else {
                word & 2 != 0
            };
            let jitter: f64 = if self.ch.jitter_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * self.ch.jitter_sigma
            } else {
                0.0
            };
            let t = a.time + (delay_index(basis, bit) as f64 + 0.5) * quarter + jitter;
            cands.push(Candidate {
                t,
                event: DetectionEvent {
                    timestamp: 0.0,
                    origin: Origin::Signal,
                    slot: a.slot,
                    true_photon_number: a.photon_number,
                    outcome: State::from_outcome(basis, bit),
                    phase_error_prob: self.ch.error_probability(Basis::Check, a.theta),
                },
            });
        }

        // Noise clicks belong to the quarter bin they fall in.
        let window_end = end_slot as f64 * self.period;
        if let Some(dist) = self.noise {
            while self.next_noise < window_end {
                let t = self.next_noise;
                self.next_noise += dist.sample(&mut self.noise_rng);
                let pos = (t / quarter).floor() as i64;
                let slot = pos.div_euclid(4) as u64;
                let q = pos.rem_euclid(4) as u32;
                let (basis, bit) = outcome_of_index(q);
                let origin = if unit_f64(self.noise_rng.next_u64()) < self.dark_fraction {
                    Origin::Dark
                } else {
                    Origin::Background
                };
                if slot < start_slot || slot >= end_slot {
                    continue;
                }
                cands.push(Candidate {
                    t,
                    event: DetectionEvent {
                        timestamp: 0.0,
                        origin,
                        slot,
                        true_photon_number: pulses[(slot - start_slot) as usize].photon_number,
                        outcome: State::from_outcome(basis, bit),
                        phase_error_prob: 0.5,
                    },
                });
            }
        }

        cands.sort_by(|a, b| a.t.total_cmp(&b.t));
        let hold = end_slot as f64 * self.period - (self.period / 8.0).min(1e-9);
        for c in cands.drain(..) {
            if c.t >= hold {
                self.carry.push(c);
                continue;
            }
            self.emit(c, paused, out);
        }
        self.scratch = cands;
    }

    /// Emits everything still held back.
    pub fn flush(&mut self, paused: &[(f64, f64)], out: &mut Vec<DetectionEvent>) {
        let mut carry = std::mem::take(&mut self.carry);
        carry.sort_by(|a, b| a.t.total_cmp(&b.t));
        for c in carry {
            self.emit(c, paused, out);
        }
    }

    fn emit(&mut self, c: Candidate, paused: &[(f64, f64)], out: &mut Vec<DetectionEvent>) {
        if paused.iter().any(|&(a, b)| c.t >= a && c.t < b) {
            return;
        }
        if c.t - self.last_kept < self.ch.dead_time {
            self.dropped_dead += 1;
            return;
        }
        self.last_kept = c.t;
        let mut ev = c.event;
        ev.timestamp = c.t + self.ch.tagger_offset;
        out.push(ev);
    }
}

/// Runs the detector over the arrivals of a complete pulse train.
pub fn detect(
    arrivals: &[ArrivalRecord],
    pulses: &[PulseRecord],
    ch: &ChannelParams,
    period: f64,
    seed: u64,
) -> Vec<DetectionEvent> {
    let mut det = Detector::new(ch, period * (1.0 + ch.clock_error), seed);
    let mut out = Vec::new();
    det.detect_chunk(arrivals, pulses, &[], &mut out);
    det.flush(&[], &mut out);
    out
}

/// Applies the dead-time rule to a sorted list of candidate click times and
/// returns the kept ones.
pub fn apply_dead_time(times: &[f64], dead_time: f64) -> Vec<f64> {
    let mut last = f64::NEG_INFINITY;
    let mut kept = Vec::new();
    for &t in times {
        if t - last >= dead_time {
            kept.push(t);
            last = t;
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linksim::channel::transmit;
    use crate::linksim::source::generate_pulse_train;
    use crate::model::ProtocolParams;

    #[test]
    fn demux_examples() {
        let p = 20e-9;
        let e = demux_timetag(7e-9, p, 0.0);
        assert_eq!((e.basis, e.bit), (Basis::Key, true));
        let e = demux_timetag(0.0, p, 0.0);
        assert_eq!((e.slot, e.basis, e.bit), (0, Basis::Key, false));
        let e = demux_timetag(37e-9, p, 0.0);
        assert_eq!((e.slot, e.basis, e.bit), (1, Basis::Check, true));
    }

    #[test]
    fn dead_time_drops_close_clicks() {
        let kept = apply_dead_time(&[0.0, 1e-6, 25e-6], 20e-6);
        assert_eq!(kept, vec![0.0, 25e-6]);
    }

    fn quiet() -> ChannelParams {
        ChannelParams {
            dark_rate: 0.0,
            background_rate: 0.0,
            intrinsic_error: 0.0,
            intrinsic_error_check: 0.0,
            drift_step: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_channel_has_no_errors() {
        let params = ProtocolParams {
            sync_len: 0,
            ..Default::default()
        };
        let ch = quiet();
        let pulses = generate_pulse_train(2_000_000, &params, 8);
        let arrivals = transmit(&pulses, &ch, params.period(), 9);
        let events = detect(&arrivals, &pulses, &ch, params.period(), 10);
        assert!(events.len() > 500);
        let mut sifted = 0;
        for ev in &events {
            let prepared = pulses[ev.slot as usize].prepared;
            if prepared.basis() == ev.outcome.basis() {
                sifted += 1;
                assert_eq!(prepared, ev.outcome);
            }
            let d = demux_timetag(ev.timestamp, params.period(), 0.0);
            assert_eq!(d.slot as u64, ev.slot);
            assert_eq!((d.basis, d.bit), (ev.outcome.basis(), ev.outcome.bit()));
        }
        assert!(sifted > 200);
    }

    #[test]
    fn kept_clicks_respect_dead_time() {
        let params = ProtocolParams {
            sync_len: 0,
            ..Default::default()
        };
        let ch = ChannelParams::default();
        let pulses = generate_pulse_train(1_000_000, &params, 1);
        let arrivals = transmit(&pulses, &ch, params.period(), 2);
        let events = detect(&arrivals, &pulses, &ch, params.period(), 3);
        for w in events.windows(2) {
            assert!(w[1].timestamp - w[0].timestamp >= ch.dead_time);
        }
    }

    #[test]
    fn pauses_discard_clicks() {
        let params = ProtocolParams {
            sync_len: 0,
            ..Default::default()
        };
        let ch = quiet();
        let pulses = generate_pulse_train(500_000, &params, 1);
        let arrivals = transmit(&pulses, &ch, params.period(), 2);
        let mut det = Detector::new(&ch, params.period(), 3);
        let pause = [(2e-3, 6e-3)];
        let mut out = Vec::new();
        det.detect_chunk(&arrivals, &pulses, &pause, &mut out);
        det.flush(&pause, &mut out);
        assert!(!out.is_empty());
        assert!(out.iter().all(|e| e.timestamp < 2e-3 || e.timestamp >= 6e-3));
    }
}
