//! Transmitter model: the prepared-state sequence and photon statistics.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::model::{Basis, Intensity, ProtocolParams, State};
use crate::rng::{counter_word, derive_seed, stream, unit_f64};

/// Seeds of the independent random streams behind one transmitter.
///
/// `secret` drives Alice's private choices; `sync` and `markers` seed the
/// public sequences and are exchanged in the clear; `photons` stands in for
/// the physics of the attenuated laser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceSeeds {
    pub secret: u64,
    pub photons: u64,
    pub sync: u64,
    pub markers: u64,
}

impl SourceSeeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            secret: derive_seed(seed, "alice/secret"),
            photons: derive_seed(seed, "alice/photons"),
            sync: derive_seed(seed, "public/sync"),
            markers: derive_seed(seed, "public/markers"),
        }
    }
}

/// Public state of the synchronization preamble at `slot`.
pub fn sync_state(sync_seed: u64, slot: u64) -> State {
    match counter_word(sync_seed, slot) % 3 {
        0 => State::L,
        1 => State::R,
        _ => State::D,
    }
}

/// Public value of the `index`-th marker bit.
pub fn marker_bit(marker_seed: u64, index: u64) -> bool {
    counter_word(marker_seed, index) >> 63 == 1
}

/// Position of marker groups within the key-basis slot sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkerSchedule {
    pub period: u32,
    pub group: u32,
}

impl MarkerSchedule {
    pub fn from_params(p: &ProtocolParams) -> Self {
        Self {
            period: p.marker_period,
            group: p.marker_group,
        }
    }

    fn cycle(&self) -> u64 {
        (self.period + self.group) as u64
    }

    /// Whether the key-basis slot with ordinal `key_index` is a marker.
    pub fn is_marker(&self, key_index: u64) -> bool {
        key_index % self.cycle() >= self.period as u64
    }

    /// Sequence number of the marker occupying `key_index`.
    pub fn marker_number(&self, key_index: u64) -> Option<u64> {
        if !self.is_marker(key_index) {
            return None;
        }
        let cycle = key_index / self.cycle();
        Some(cycle * self.group as u64 + (key_index % self.cycle() - self.period as u64))
    }

    pub fn overhead(&self) -> f64 {
        self.group as f64 / self.cycle() as f64
    }
}

/// What Alice knows about one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preparation {
    pub slot: u64,
    pub prepared: State,
    pub intensity: Intensity,
    pub is_marker: bool,
    pub is_sync: bool,
    /// Ordinal among post-preamble key-basis slots (markers included).
    pub key_index: Option<u64>,
}

/// Ground-truth record of one emitted pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PulseRecord {
    pub slot: u64,
    pub prepared: State,
    pub intensity_class: Intensity,
    pub photon_number: u32,
    pub is_marker: bool,
    pub is_sync: bool,
    pub key_index: Option<u64>,
}

impl PulseRecord {
    pub fn new(prep: Preparation, photon_number: u32) -> Self {
        Self {
            slot: prep.slot,
            prepared: prep.prepared,
            intensity_class: prep.intensity,
            photon_number,
            is_marker: prep.is_marker,
            is_sync: prep.is_sync,
            key_index: prep.key_index,
        }
    }

    pub fn preparation(&self) -> Preparation {
        Preparation {
            slot: self.slot,
            prepared: self.prepared,
            intensity: self.intensity_class,
            is_marker: self.is_marker,
            is_sync: self.is_sync,
            key_index: self.key_index,
        }
    }
}

/// Alice's prepared-state sequence. Replaying it from the same seeds yields
/// the same slots, which is how the transmitter node answers basis queries
/// without storing the whole pulse train.
#[derive(Debug, Clone)]
pub struct AliceSequence {
    rng: ChaCha8Rng,
    seeds: SourceSeeds,
    schedule: MarkerSchedule,
    sync_len: u64,
    key_threshold: u64,
    signal_threshold: u64,
    next_slot: u64,
    next_key_index: u64,
    next_marker: u64,
    private_run: u32,
    pending_markers: u32,
}

impl AliceSequence {
    pub fn new(params: &ProtocolParams, seeds: SourceSeeds) -> Self {
        Self {
            rng: stream(seeds.secret),
            seeds,
            schedule: MarkerSchedule::from_params(params),
            sync_len: params.sync_len,
            key_threshold: (params.p_key * (1u64 << 32) as f64) as u64,
            signal_threshold: (params.p_mu * (1u64 << 31) as f64) as u64,
            next_slot: 0,
            next_key_index: 0,
            next_marker: 0,
            private_run: 0,
            pending_markers: 0,
        }
    }

    pub fn seeds(&self) -> SourceSeeds {
        self.seeds
    }

    pub fn schedule(&self) -> MarkerSchedule {
        self.schedule
    }

    pub fn next_slot(&self) -> u64 {
        self.next_slot
    }

    pub fn next_prep(&mut self) -> Preparation {
        let slot = self.next_slot;
        self.next_slot += 1;
        if slot < self.sync_len {
            return Preparation {
                slot,
                prepared: sync_state(self.seeds.sync, slot),
                intensity: Intensity::Signal,
                is_marker: false,
                is_sync: true,
                key_index: None,
            };
        }
        let word = self.rng.next_u64();
        let intensity = if (word >> 1) & 0x7FFF_FFFF < self.signal_threshold {
            Intensity::Signal
        } else {
            Intensity::Decoy
        };
        if word >> 32 < self.key_threshold {
            let key_index = self.take_key_index();
            if self.pending_markers > 0 {
                self.pending_markers -= 1;
                let bit = marker_bit(self.seeds.markers, self.next_marker);
                self.next_marker += 1;
                debug_assert!(self.schedule.is_marker(key_index));
                return Preparation {
                    slot,
                    prepared: State::from_outcome(Basis::Key, bit),
                    intensity,
                    is_marker: true,
                    is_sync: false,
                    key_index: Some(key_index),
                };
            }
            self.private_run += 1;
            if self.private_run == self.schedule.period {
                self.private_run = 0;
                self.pending_markers = self.schedule.group;
            }
            Preparation {
                slot,
                prepared: State::from_outcome(Basis::Key, word & 1 == 1),
                intensity,
                is_marker: false,
                is_sync: false,
                key_index: Some(key_index),
            }
        } else {
            Preparation {
                slot,
                prepared: State::D,
                intensity,
                is_marker: false,
                is_sync: false,
                key_index: None,
            }
        }
    }

    fn take_key_index(&mut self) -> u64 {
        let k = self.next_key_index;
        self.next_key_index += 1;
        k
    }

    /// Advances to `slot` (which must not be in the past) and returns its
    /// preparation.
    pub fn seek(&mut self, slot: u64) -> Preparation {
        assert!(slot >= self.next_slot, "cannot rewind the sequence");
        loop {
            let p = self.next_prep();
            if p.slot == slot {
                return p;
            }
        }
    }
}

/// Inverse-CDF Poisson sampler for a fixed mean.
#[derive(Debug, Clone)]
struct PoissonTable {
    cdf: Vec<f64>,
}

impl PoissonTable {
    fn new(mean: f64) -> Self {
        let mut cdf = Vec::new();
        let mut pmf = (-mean).exp();
        let mut acc = 0.0;
        for n in 0..64u32 {
            acc += pmf;
            cdf.push(acc);
            if 1.0 - acc < 1e-17 {
                break;
            }
            pmf *= mean / (n + 1) as f64;
        }
        Self { cdf }
    }

    fn sample(&self, u: f64) -> u32 {
        self.cdf.iter().position(|&c| u < c).unwrap_or(self.cdf.len()) as u32
    }
}

/// Full transmitter: Alice's sequence plus sampled photon numbers.
#[derive(Debug, Clone)]
pub struct PulseSource {
    alice: AliceSequence,
    photons: ChaCha8Rng,
    tables: [PoissonTable; 2],
}

impl PulseSource {
    pub fn new(params: &ProtocolParams, seeds: SourceSeeds) -> Self {
        Self {
            alice: AliceSequence::new(params, seeds),
            photons: stream(seeds.photons),
            tables: [PoissonTable::new(params.mu), PoissonTable::new(params.nu)],
        }
    }

    pub fn next_slot(&self) -> u64 {
        self.alice.next_slot()
    }

    pub fn next_pulse(&mut self) -> PulseRecord {
        let prep = self.alice.next_prep();
        let u = unit_f64(self.photons.next_u64());
        let n = self.tables[prep.intensity.index()].sample(u);
        PulseRecord::new(prep, n)
    }

    pub fn fill(&mut self, n: usize, out: &mut Vec<PulseRecord>) {
        out.clear();
        out.reserve(n);
        for _ in 0..n {
            out.push(self.next_pulse());
        }
    }
}

/// Generates `n_pulses` pulse records from a master seed.
pub fn generate_pulse_train(n_pulses: usize, params: &ProtocolParams, seed: u64) -> Vec<PulseRecord> {
    let mut src = PulseSource::new(params, SourceSeeds::from_master(seed));
    let mut out = Vec::new();
    src.fill(n_pulses, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_sync() -> ProtocolParams {
        ProtocolParams {
            sync_len: 0,
            ..Default::default()
        }
    }

    #[test]
    fn check_basis_fraction_matches_p_key() {
        let pulses = generate_pulse_train(1_000_000, &no_sync(), 11);
        let d = pulses.iter().filter(|p| p.prepared == State::D).count() as f64 / 1e6;
        // binomial 3σ at p = 0.1, n = 10^6 is 0.0009
        assert!((d - 0.10).abs() < 0.001, "{d}");
        assert!(pulses.iter().all(|p| p.prepared.is_preparable()));
    }

    #[test]
    fn vacuum_source_emits_nothing() {
        let params = ProtocolParams {
            mu: 0.0,
            nu: 0.0,
            ..no_sync()
        };
        assert!(generate_pulse_train(10_000, &params, 3)
            .iter()
            .all(|p| p.photon_number == 0));
    }

    #[test]
    fn same_seed_same_train() {
        let a = generate_pulse_train(20_000, &ProtocolParams::default(), 5);
        let b = generate_pulse_train(20_000, &ProtocolParams::default(), 5);
        assert_eq!(a, b);
        let c = generate_pulse_train(20_000, &ProtocolParams::default(), 6);
        assert_ne!(a, c);
    }

    #[test]
    fn preamble_then_markers() {
        let params = ProtocolParams {
            sync_len: 1000,
            ..Default::default()
        };
        let pulses = generate_pulse_train(200_000, &params, 9);
        assert!(pulses[..1000].iter().all(|p| p.is_sync && !p.is_marker));
        assert!(pulses[1000..].iter().all(|p| !p.is_sync));
        let schedule = MarkerSchedule::from_params(&params);
        let key: Vec<_> = pulses.iter().filter(|p| p.key_index.is_some()).collect();
        for (i, p) in key.iter().enumerate() {
            assert_eq!(p.key_index, Some(i as u64));
            assert_eq!(p.is_marker, schedule.is_marker(i as u64));
            assert_eq!(p.prepared.basis(), Basis::Key);
        }
        // markers carry the public bits in order
        let seeds = SourceSeeds::from_master(9);
        for (j, p) in pulses.iter().filter(|p| p.is_marker).enumerate() {
            assert_eq!(p.prepared.bit(), marker_bit(seeds.markers, j as u64));
        }
        let markers = key.iter().filter(|p| p.is_marker).count() as f64;
        assert!((markers / key.len() as f64 - 0.1).abs() < 0.002);
    }

    #[test]
    fn photon_numbers_follow_intensity() {
        let pulses = generate_pulse_train(400_000, &no_sync(), 21);
        for k in Intensity::ALL {
            let sel: Vec<_> = pulses.iter().filter(|p| p.intensity_class == k).collect();
            let mean = sel.iter().map(|p| p.photon_number as f64).sum::<f64>() / sel.len() as f64;
            let want = ProtocolParams::default().intensity_value(k);
            let sigma = (want / sel.len() as f64).sqrt();
            assert!((mean - want).abs() < 5.0 * sigma, "{k:?}: {mean} vs {want}");
        }
        let signal = pulses.iter().filter(|p| p.intensity_class == Intensity::Signal).count() as f64;
        assert!((signal / 4e5 - 0.7).abs() < 0.005);
    }

    #[test]
    fn seek_replays_sequence() {
        let params = ProtocolParams {
            sync_len: 100,
            ..Default::default()
        };
        let seeds = SourceSeeds::from_master(4);
        let pulses = generate_pulse_train(5000, &params, 4);
        let mut alice = AliceSequence::new(&params, seeds);
        for slot in [3u64, 150, 151, 2000, 4999] {
            assert_eq!(alice.seek(slot), pulses[slot as usize].preparation());
        }
    }

    #[test]
    fn marker_numbering() {
        let s = MarkerSchedule { period: 36, group: 4 };
        assert_eq!(s.marker_number(35), None);
        assert_eq!(s.marker_number(36), Some(0));
        assert_eq!(s.marker_number(39), Some(3));
        assert_eq!(s.marker_number(76), Some(4));
        assert!((s.overhead() - 0.1).abs() < 1e-15);
    }
}
