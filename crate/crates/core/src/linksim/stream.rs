//! Chunked end-to-end simulation of the optical link, used for long runs
//! where the pulse train cannot be held in memory.

use crate::model::{Basis, ProtocolParams};
use crate::rng::derive_seed;

use super::channel::{ArrivalRecord, ChannelParams, Transmitter};
use super::detector::{DetectionEvent, Detector};
use super::source::{PulseRecord, PulseSource, SourceSeeds};

const CHUNK: usize = 1 << 18;

/// Source, channel and detector advanced together slot by slot.
pub struct LinkSimulator {
    source: PulseSource,
    tx: Transmitter,
    det: Detector,
    ch: ChannelParams,
    period: f64,
    pulses: Vec<PulseRecord>,
    arrivals: Vec<ArrivalRecord>,
    pauses: Vec<(f64, f64)>,
    realign_commands: u64,
    emitted: u64,
}

impl LinkSimulator {
    pub fn new(params: &ProtocolParams, ch: &ChannelParams, seed: u64) -> Self {
        Self::with_seeds(params, ch, SourceSeeds::from_master(seed), seed)
    }

    /// Source seeds given explicitly; `seed` drives channel and detector.
    pub fn with_seeds(params: &ProtocolParams, ch: &ChannelParams, seeds: SourceSeeds, seed: u64) -> Self {
        let period = params.period() * (1.0 + ch.clock_error);
        Self {
            source: PulseSource::new(params, seeds),
            tx: Transmitter::new(ch, period, derive_seed(seed, "link/channel")),
            det: Detector::new(ch, period, derive_seed(seed, "link/detector")),
            ch: ch.clone(),
            period,
            pulses: Vec::with_capacity(CHUNK),
            arrivals: Vec::new(),
            pauses: Vec::new(),
            realign_commands: 0,
            emitted: 0,
        }
    }

    /// First slot not yet simulated.
    pub fn slot(&self) -> u64 {
        self.source.next_slot()
    }

    /// Transmitter time of the next slot.
    pub fn time(&self) -> f64 {
        self.slot() as f64 * self.period
    }

    pub fn true_period(&self) -> f64 {
        self.period
    }

    /// Simulates up to (excluding) `end_slot`, appending clicks to `out`.
    pub fn run_until(&mut self, end_slot: u64, out: &mut Vec<DetectionEvent>) {
        self.run_until_with(end_slot, out, |_| {});
    }

    /// As [`run_until`](Self::run_until), handing every chunk of emitted
    /// pulses to `truth` before detection.
    pub fn run_until_with<F: FnMut(&[PulseRecord])>(&mut self, end_slot: u64, out: &mut Vec<DetectionEvent>, mut truth: F) {
        while self.slot() < end_slot {
            let n = ((end_slot - self.slot()) as usize).min(CHUNK);
            self.source.fill(n, &mut self.pulses);
            truth(&self.pulses);
            self.tx.transmit_chunk(&self.pulses, &mut self.arrivals);
            let before = out.len();
            self.det.detect_chunk(&self.arrivals, &self.pulses, &self.pauses, out);
            self.emitted += (out.len() - before) as u64;
        }
        self.tx.advance_to(self.time());
    }

    /// Releases clicks held back at the chunk edge. Call once at the end.
    pub fn finish(&mut self, out: &mut Vec<DetectionEvent>) {
        let before = out.len();
        self.det.flush(&self.pauses, out);
        self.emitted += (out.len() - before) as u64;
    }

    /// Starts a polarization realignment at the current time. Returns false
    /// if one is already in progress.
    pub fn realign(&mut self) -> bool {
        let now = self.time();
        self.tx.advance_to(now);
        if self.tx.drift().is_realigning() {
            return false;
        }
        self.tx.drift_mut().begin_realign();
        self.realign_commands += 1;
        if self.ch.pause_during_realign {
            self.pauses.push((now, now + self.ch.realign_time));
        }
        true
    }

    pub fn is_realigning(&self) -> bool {
        self.tx.drift().is_realigning()
    }

    pub fn realign_commands(&self) -> u64 {
        self.realign_commands
    }

    /// Schedules a drift jump of `delta` radians at transmitter time `at`.
    pub fn inject_drift(&mut self, at: f64, delta: f64) {
        self.tx.drift_mut().inject(at, delta);
    }

    /// Current drift angle (ground truth).
    pub fn theta(&mut self) -> f64 {
        let now = self.time();
        self.tx.drift_mut().theta_at(now)
    }

    /// Current same-basis error probability (ground truth).
    pub fn error_probability(&mut self, basis: Basis) -> f64 {
        let theta = self.theta();
        self.ch.error_probability(basis, theta)
    }

    pub fn clicks_emitted(&self) -> u64 {
        self.emitted
    }

    pub fn dead_time_losses(&self) -> u64 {
        self.det.dead_time_losses()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linksim::channel::transmit;
    use crate::linksim::detector::detect;
    use crate::linksim::source::generate_pulse_train;

    #[test]
    fn chunked_run_matches_one_shot_without_drift() {
        let params = ProtocolParams {
            sync_len: 0,
            ..Default::default()
        };
        let ch = ChannelParams {
            drift_step: 0.0,
            ..Default::default()
        };
        let n = 3 * CHUNK as u64 + 1234;
        let mut sim = LinkSimulator::new(&params, &ch, 77);
        let mut chunked = Vec::new();
        sim.run_until(n / 2, &mut chunked);
        sim.run_until(n, &mut chunked);
        sim.finish(&mut chunked);

        let pulses = generate_pulse_train(n as usize, &params, 77);
        let arrivals = transmit(&pulses, &ch, params.period(), derive_seed(77, "link/channel"));
        let oneshot = detect(&arrivals, &pulses, &ch, params.period(), derive_seed(77, "link/detector"));
        assert_eq!(chunked.len(), oneshot.len());
        assert_eq!(chunked, oneshot);
    }

    #[test]
    fn deterministic_per_seed() {
        let params = ProtocolParams::default();
        let ch = ChannelParams::default();
        let run = |seed| {
            let mut sim = LinkSimulator::new(&params, &ch, seed);
            let mut out = Vec::new();
            sim.run_until(2_000_000, &mut out);
            sim.finish(&mut out);
            out
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
