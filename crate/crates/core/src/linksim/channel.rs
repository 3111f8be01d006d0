//! Fiber, multiplexing loss and polarization drift.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::Basis;
use crate::rng::{stream, unit_f64};

use super::source::PulseRecord;

/// Background rate (counts/s) at which the multiplexed classical channel
/// adds 0.006 to the key-basis QBER of the 50 MHz profile. Produced by
/// [`crate::linksim::calibrate_background`]; see the calibration test.
pub const FIELD_BACKGROUND_RATE: f64 = 4_720.0;

/// Optical channel and detector parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub fiber_loss_db: f64,
    /// Extra loss of the time-multiplexed receiver.
    pub mux_loss_db: f64,
    pub detector_efficiency: f64,
    pub dead_time: f64,
    pub dark_rate: f64,
    /// Count rate leaking from the wavelength-multiplexed classical channel.
    pub background_rate: f64,
    /// Residual error of key-basis states.
    pub intrinsic_error: f64,
    /// Residual error of the check-basis state.
    pub intrinsic_error_check: f64,
    /// Polarization random-walk strength in rad/√s.
    pub drift_step: f64,
    pub jitter_sigma: f64,
    /// Time for a realignment to bring the drift angle back to zero.
    pub realign_time: f64,
    /// Drop detections while a realignment is running.
    pub pause_during_realign: bool,
    /// Relative error of the transmitter clock against its nominal period.
    pub clock_error: f64,
    /// Time of transmitter slot 0 on the receiver's time tagger.
    pub tagger_offset: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            fiber_loss_db: 6.7,
            mux_loss_db: 3.0,
            detector_efficiency: 0.15,
            dead_time: 2e-5,
            dark_rate: 200.0,
            background_rate: FIELD_BACKGROUND_RATE,
            intrinsic_error: 0.017,
            intrinsic_error_check: 0.012,
            drift_step: 0.003,
            jitter_sigma: 1e-10,
            realign_time: 5.0,
            pause_during_realign: false,
            clock_error: 0.0,
            tagger_offset: 0.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut bad = Vec::new();
        let nonneg = [
            ("fiber_loss_db", self.fiber_loss_db),
            ("mux_loss_db", self.mux_loss_db),
            ("dead_time", self.dead_time),
            ("dark_rate", self.dark_rate),
            ("background_rate", self.background_rate),
            ("drift_step", self.drift_step),
            ("jitter_sigma", self.jitter_sigma),
            ("realign_time", self.realign_time),
            ("tagger_offset", self.tagger_offset),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                bad.push(format!("{name} must be non-negative (got {v})"));
            }
        }
        if !(0.0..=1.0).contains(&self.detector_efficiency) {
            bad.push(format!(
                "detector_efficiency must lie in [0,1] (got {})",
                self.detector_efficiency
            ));
        }
        for (name, v) in [
            ("intrinsic_error", self.intrinsic_error),
            ("intrinsic_error_check", self.intrinsic_error_check),
        ] {
            if !(0.0..=0.5).contains(&v) {
                bad.push(format!("{name} must lie in [0,0.5] (got {v})"));
            }
        }
        if !(self.clock_error.abs() < 1e-3) {
            bad.push(format!("clock_error must be below 1e-3 (got {})", self.clock_error));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }

    /// Per-photon probability of producing a click: channel and receiver
    /// losses times detector efficiency.
    pub fn photon_survival(&self) -> f64 {
        10f64.powf(-(self.fiber_loss_db + self.mux_loss_db) / 10.0) * self.detector_efficiency
    }

    /// Probability that a same-basis detection yields the wrong bit at drift
    /// angle `theta`.
    pub fn error_probability(&self, basis: Basis, theta: f64) -> f64 {
        let intrinsic = match basis {
            Basis::Key => self.intrinsic_error,
            Basis::Check => self.intrinsic_error_check,
        };
        let s = (theta / 2.0).sin();
        (intrinsic + s * s).clamp(0.0, 0.5)
    }
}

/// Polarization drift angle as a function of time: a Gaussian random walk
/// with variance `step²·t`, plus injected jumps, pulled to zero by
/// realignments.
#[derive(Debug, Clone)]
pub struct DriftProcess {
    step: f64,
    realign_time: f64,
    dt: f64,
    theta: f64,
    t: f64,
    rng: ChaCha8Rng,
    realign: Option<Realignment>,
    spikes: Vec<(f64, f64)>,
    completed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Realignment {
    start: f64,
    theta0: f64,
}

impl DriftProcess {
    const STEP: f64 = 1e-3;

    pub fn new(step: f64, realign_time: f64, seed: u64) -> Self {
        Self {
            step,
            realign_time,
            dt: Self::STEP,
            theta: 0.0,
            t: 0.0,
            rng: stream(seed),
            realign: None,
            spikes: Vec::new(),
            completed: 0,
        }
    }

    /// Schedules a jump of `delta` radians at time `at`.
    pub fn inject(&mut self, at: f64, delta: f64) {
        self.spikes.push((at, delta));
        self.spikes.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    pub fn is_realigning(&self) -> bool {
        self.realign.is_some()
    }

    pub fn completed_realignments(&self) -> u64 {
        self.completed
    }

    /// Starts a realignment at the current process time. Ignored while one
    /// is already running.
    pub fn begin_realign(&mut self) {
        if self.realign.is_none() {
            self.realign = Some(Realignment {
                start: self.t,
                theta0: self.theta,
            });
        }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Drift angle at `t`; calls must be made with non-decreasing `t`.
    pub fn theta_at(&mut self, t: f64) -> f64 {
        if t > self.t {
            self.advance(t);
        }
        self.theta
    }

    fn advance(&mut self, t: f64) {
        while self.t < t {
            let next = (self.t + self.dt).min(t);
            let h = next - self.t;
            while let Some(&(at, delta)) = self.spikes.first() {
                if at > next {
                    break;
                }
                self.theta += delta;
                if let Some(r) = self.realign.as_mut() {
                    r.theta0 += delta;
                }
                self.spikes.remove(0);
            }
            match self.realign {
                Some(r) => {
                    let elapsed = next - r.start;
                    if elapsed >= self.realign_time {
                        self.theta = 0.0;
                        self.realign = None;
                        self.completed += 1;
                    } else {
                        self.theta = r.theta0 * (-5.0 * elapsed / self.realign_time).exp();
                    }
                }
                None => {
                    if self.step > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        self.theta += self.step * h.sqrt() * z;
                    }
                }
            }
            self.t = next;
        }
    }
}

/// A pulse with at least one photon reaching the detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalRecord {
    pub slot: u64,
    /// Arrival time on the transmitter clock (slot·period).
    pub time: f64,
    pub theta: f64,
    pub photon_number: u32,
    pub survivors: u32,
}

/// Applies channel loss and polarization drift to emitted pulses.
#[derive(Debug, Clone)]
pub struct Transmitter {
    survival: f64,
    period: f64,
    rng: ChaCha8Rng,
    drift: DriftProcess,
}

impl Transmitter {
    /// `period` is the true pulse period (nominal times clock error).
    pub fn new(ch: &ChannelParams, period: f64, seed: u64) -> Self {
        Self {
            survival: ch.photon_survival(),
            period,
            rng: stream(seed),
            drift: DriftProcess::new(ch.drift_step, ch.realign_time, seed ^ 0x5eed_d71f),
        }
    }

    pub fn drift(&self) -> &DriftProcess {
        &self.drift
    }

    pub fn drift_mut(&mut self) -> &mut DriftProcess {
        &mut self.drift
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn transmit_chunk(&mut self, pulses: &[PulseRecord], out: &mut Vec<ArrivalRecord>) {
        out.clear();
        for p in pulses {
            if p.photon_number == 0 {
                continue;
            }
            let survivors = (0..p.photon_number)
                .filter(|_| unit_f64(self.rng.next_u64()) < self.survival)
                .count() as u32;
            if survivors == 0 {
                continue;
            }
            let time = p.slot as f64 * self.period;
            let theta = self.drift.theta_at(time);
            out.push(ArrivalRecord {
                slot: p.slot,
                time,
                theta,
                photon_number: p.photon_number,
                survivors,
            });
        }
    }

    /// Advances the drift process to `t` without emitting anything.
    pub fn advance_to(&mut self, t: f64) {
        self.drift.theta_at(t);
    }
}

/// Runs a pulse train through the channel; `period` is the pulse period.
pub fn transmit(pulses: &[PulseRecord], ch: &ChannelParams, period: f64, seed: u64) -> Vec<ArrivalRecord> {
    let mut tx = Transmitter::new(ch, period * (1.0 + ch.clock_error), seed);
    let mut out = Vec::new();
    tx.transmit_chunk(pulses, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linksim::source::generate_pulse_train;
    use crate::model::ProtocolParams;

    fn signal_only() -> ProtocolParams {
        ProtocolParams {
            p_mu: 0.999_999_999,
            sync_len: 0,
            ..Default::default()
        }
    }

    #[test]
    fn arrival_probability_matches_thinning() {
        let params = signal_only();
        let ch = ChannelParams::default();
        let pulses = generate_pulse_train(1_000_000, &params, 1);
        let arrivals = transmit(&pulses, &ch, params.period(), 2);
        let rate = arrivals.len() as f64 / 1e6;
        let want = 1.0 - (-0.6f64 * 0.15 * 10f64.powf(-0.97)).exp();
        assert!((want - 9.60e-3).abs() < 1e-5);
        assert!((rate - want).abs() < 2e-4, "{rate} vs {want}");
    }

    #[test]
    fn infinite_loss_blocks_everything() {
        let params = signal_only();
        let ch = ChannelParams {
            fiber_loss_db: f64::INFINITY,
            ..Default::default()
        };
        let pulses = generate_pulse_train(100_000, &params, 1);
        assert!(transmit(&pulses, &ch, params.period(), 2).is_empty());
    }

    #[test]
    fn no_drift_keeps_theta_zero() {
        let mut d = DriftProcess::new(0.0, 5.0, 1);
        for i in 0..10_000 {
            assert_eq!(d.theta_at(i as f64 * 0.01), 0.0);
        }
    }

    #[test]
    fn random_walk_variance_grows_linearly() {
        let step = 0.01;
        let n = 400;
        let t = 100.0;
        let var = (0..n)
            .map(|s| {
                let mut d = DriftProcess::new(step, 5.0, s);
                d.theta_at(t).powi(2)
            })
            .sum::<f64>()
            / n as f64;
        let want = step * step * t;
        // chi-square with 400 dof: relative sd ≈ 0.07
        assert!((var / want - 1.0).abs() < 0.25, "{var} vs {want}");
    }

    #[test]
    fn realignment_pulls_theta_to_zero() {
        let mut d = DriftProcess::new(0.0, 5.0, 1);
        d.inject(1.0, 0.8);
        assert!((d.theta_at(2.0) - 0.8).abs() < 1e-12);
        d.begin_realign();
        let mid = d.theta_at(4.5);
        assert!(mid > 0.0 && mid < 0.8 * (-2.0f64).exp());
        assert!(d.is_realigning());
        assert_eq!(d.theta_at(7.01), 0.0);
        assert!(!d.is_realigning());
        assert_eq!(d.completed_realignments(), 1);
    }

    #[test]
    fn error_probability_saturates() {
        let ch = ChannelParams::default();
        assert!((ch.error_probability(Basis::Key, 0.0) - 0.017).abs() < 1e-15);
        assert!((ch.error_probability(Basis::Check, 0.0) - 0.012).abs() < 1e-15);
        assert_eq!(ch.error_probability(Basis::Key, 3.0), 0.5);
    }
}
