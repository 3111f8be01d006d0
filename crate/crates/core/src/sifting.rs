//! Basis reconciliation, QBER estimation, the discard rule and assembly of
//! finite-key blocks from corrected error-correction blocks.
//!
//! Each node holds only its own bits. Bob reveals his click slots and
//! bases, Alice answers with the match pattern, intensities and key-basis
//! ordinals, then Bob publishes his marker and check-basis outcomes so both
//! sides reach the same verdict on the block.

use thiserror::Error;

use crate::linksim::source::{AliceSequence, MarkerSchedule};
use crate::model::{Basis, CountError, DecoyStats, Intensity, ProtocolParams, State};
use crate::synchro::{marker_extract, KeyBasisItem, MarkerObservation, SyncError};

/// Marker disagreement above this fraction signals slot misalignment.
pub const DESYNC_FRACTION: f64 = 0.25;
/// Markers needed before the desync test is applied.
pub const DESYNC_MIN_MARKERS: u64 = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SiftError {
    #[error("no sifted events in the {0} basis")]
    EmptyBasis(Basis),
    #[error("desynchronized: {errors} of {markers} markers disagree")]
    DesyncDetected { errors: u64, markers: u64 },
    #[error("revealed slots must be strictly increasing (slot {0})")]
    UnorderedSlots(u64),
    #[error("basis reply does not fit the revealed clicks: {0}")]
    MalformedReply(&'static str),
    #[error(transparent)]
    Schedule(#[from] SyncError),
    #[error(transparent)]
    Counts(#[from] CountError),
}

/// A demultiplexed click on Bob's side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawClick {
    pub slot: u64,
    pub basis: Basis,
    pub bit: bool,
}

/// One side's private key-basis bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiftedBit {
    pub slot: u64,
    pub intensity: Intensity,
    pub bit: bool,
}

/// A publicly compared check-basis detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckOutcome {
    pub slot: u64,
    pub intensity: Intensity,
    pub error: bool,
}

/// Alice's answer to a basis reveal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BasisReply {
    /// One flag per revealed click.
    pub matched: Vec<bool>,
    /// Intensity of each matched click, in order.
    pub intensities: Vec<Intensity>,
    /// Key-basis ordinal of each matched key-basis click, in order.
    pub key_indices: Vec<u64>,
}

/// Bob's public outcomes for markers and check-basis clicks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MarkerReport {
    pub marker_bits: Vec<bool>,
    pub check_bits: Vec<bool>,
}

/// Sifted content of one error-correction block as held by one node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiftedBlock {
    pub block_id: u64,
    /// Acquisition time span of the block.
    pub start: f64,
    pub end: f64,
    /// Private key-basis bits (markers removed).
    pub key: Vec<SiftedBit>,
    pub markers: Vec<MarkerObservation>,
    pub check: Vec<CheckOutcome>,
}

impl SiftedBlock {
    pub fn marker_errors(&self) -> u64 {
        self.markers.iter().filter(|m| m.is_error()).count() as u64
    }

    pub fn check_errors(&self) -> u64 {
        self.check.iter().filter(|c| c.error).count() as u64
    }

    /// Marker-estimated key-basis QBER.
    pub fn qber_k(&self) -> Result<f64, SiftError> {
        estimate_qber(self.marker_errors(), self.markers.len() as u64, Basis::Key)
    }

    pub fn qber_c(&self) -> Result<f64, SiftError> {
        estimate_qber(self.check_errors(), self.check.len() as u64, Basis::Check)
    }

    /// Check-basis detections and errors per intensity.
    pub fn check_counts(&self) -> ([u64; 2], [u64; 2]) {
        let mut n = [0; 2];
        let mut m = [0; 2];
        for c in &self.check {
            n[c.intensity.index()] += 1;
            m[c.intensity.index()] += c.error as u64;
        }
        (n, m)
    }

    pub fn key_bits(&self) -> Vec<u8> {
        self.key.iter().map(|b| b.bit as u8).collect()
    }

    pub fn verdict(&self, threshold: f64) -> Verdict {
        let q_k = match self.qber_k() {
            Ok(q) => q,
            Err(_) => return Verdict::Empty(Basis::Key),
        };
        let q_c = match self.qber_c() {
            Ok(q) => q,
            Err(_) => return Verdict::Empty(Basis::Check),
        };
        if q_k > threshold || q_c > threshold {
            Verdict::Discard { qber_k: q_k, qber_c: q_c }
        } else {
            Verdict::Keep { qber_k: q_k, qber_c: q_c }
        }
    }
}

/// Outcome of the pre-correction block check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Keep { qber_k: f64, qber_c: f64 },
    /// Either QBER is above the discard threshold.
    Discard { qber_k: f64, qber_c: f64 },
    /// No events to estimate one of the QBERs; the block is skipped.
    Empty(Basis),
}

impl Verdict {
    pub fn is_kept(&self) -> bool {
        matches!(self, Verdict::Keep { .. })
    }
}

/// Error fraction in one basis.
pub fn estimate_qber(errors: u64, total: u64, basis: Basis) -> Result<f64, SiftError> {
    if total == 0 {
        return Err(SiftError::EmptyBasis(basis));
    }
    Ok(errors as f64 / total as f64)
}

/// Fails if markers disagree often enough to indicate a wrong slot offset.
pub fn check_desync(errors: u64, markers: u64) -> Result<(), SiftError> {
    if markers >= DESYNC_MIN_MARKERS && errors as f64 > DESYNC_FRACTION * markers as f64 {
        return Err(SiftError::DesyncDetected { errors, markers });
    }
    Ok(())
}

/// Alice's half of sifting for one block, awaiting Bob's marker report.
#[derive(Debug, Clone)]
pub struct AlicePending {
    block: SiftedBlock,
    /// Expected value of each marker in reveal order.
    markers: Vec<(u64, u64, bool)>,
    /// Prepared state of each check-basis match.
    check: Vec<(u64, Intensity, State)>,
}

impl AlicePending {
    pub fn marker_count(&self) -> usize {
        self.markers.len()
    }

    pub fn check_count(&self) -> usize {
        self.check.len()
    }

    /// Completes the block with Bob's public outcomes.
    pub fn complete(mut self, report: &MarkerReport) -> Result<SiftedBlock, SiftError> {
        if report.marker_bits.len() != self.markers.len() || report.check_bits.len() != self.check.len() {
            return Err(SiftError::MalformedReply("marker report length"));
        }
        self.block.markers = self
            .markers
            .iter()
            .zip(&report.marker_bits)
            .map(|(&(slot, number, expected), &observed)| MarkerObservation {
                slot,
                number,
                expected,
                observed,
            })
            .collect();
        self.block.check = self
            .check
            .iter()
            .zip(&report.check_bits)
            .map(|(&(slot, intensity, prepared), &bit)| CheckOutcome {
                slot,
                intensity,
                error: State::from_outcome(Basis::Check, bit) != prepared,
            })
            .collect();
        Ok(self.block)
    }
}

/// Alice answers Bob's reveal by replaying her preparation sequence.
pub fn alice_sift(
    seq: &mut AliceSequence,
    block_id: u64,
    slots: &[u64],
    bases: &[Basis],
) -> Result<(BasisReply, AlicePending), SiftError> {
    if slots.len() != bases.len() {
        return Err(SiftError::MalformedReply("slot and basis counts differ"));
    }
    let schedule = seq.schedule();
    let mut reply = BasisReply {
        matched: Vec::with_capacity(slots.len()),
        ..Default::default()
    };
    let mut pending = AlicePending {
        block: SiftedBlock {
            block_id,
            ..Default::default()
        },
        markers: Vec::new(),
        check: Vec::new(),
    };
    for (&slot, &basis) in slots.iter().zip(bases) {
        if slot < seq.next_slot() {
            return Err(SiftError::UnorderedSlots(slot));
        }
        let prep = seq.seek(slot);
        let matched = !prep.is_sync && prep.prepared.basis() == basis;
        reply.matched.push(matched);
        if !matched {
            continue;
        }
        reply.intensities.push(prep.intensity);
        match basis {
            Basis::Key => {
                let key_index = prep.key_index.expect("key-basis slot has an ordinal");
                reply.key_indices.push(key_index);
                match schedule.marker_number(key_index) {
                    Some(number) => pending.markers.push((slot, number, prep.prepared.bit())),
                    None => pending.block.key.push(SiftedBit {
                        slot,
                        intensity: prep.intensity,
                        bit: prep.prepared.bit(),
                    }),
                }
                debug_assert_eq!(prep.is_marker, schedule.is_marker(key_index));
            }
            Basis::Check => pending.check.push((slot, prep.intensity, prep.prepared)),
        }
    }
    Ok((reply, pending))
}

/// Bob applies Alice's reply, splits markers off and prepares his report.
pub fn bob_sift(
    block_id: u64,
    clicks: &[RawClick],
    reply: &BasisReply,
    schedule: MarkerSchedule,
    marker_seed: u64,
) -> Result<(SiftedBlock, MarkerReport), SiftError> {
    if reply.matched.len() != clicks.len() {
        return Err(SiftError::MalformedReply("match flags"));
    }
    let n_matched = reply.matched.iter().filter(|&&m| m).count();
    if reply.intensities.len() != n_matched {
        return Err(SiftError::MalformedReply("intensities"));
    }
    let mut intensities = reply.intensities.iter();
    let mut key_indices = reply.key_indices.iter();
    let mut key_items = Vec::new();
    let mut key_intensity = Vec::new();
    let mut block = SiftedBlock {
        block_id,
        ..Default::default()
    };
    let mut report = MarkerReport::default();
    for (c, _) in clicks.iter().zip(&reply.matched).filter(|(_, &m)| m) {
        let intensity = *intensities.next().expect("counted above");
        match c.basis {
            Basis::Key => {
                let key_index = *key_indices.next().ok_or(SiftError::MalformedReply("key indices"))?;
                key_items.push(KeyBasisItem {
                    slot: c.slot,
                    key_index,
                    bit: c.bit,
                });
                key_intensity.push((c.slot, intensity));
            }
            Basis::Check => {
                // Alice only prepares D in the check basis
                block.check.push(CheckOutcome {
                    slot: c.slot,
                    intensity,
                    error: c.bit,
                });
                report.check_bits.push(c.bit);
            }
        }
    }
    if key_indices.next().is_some() {
        return Err(SiftError::MalformedReply("surplus key indices"));
    }
    let (markers, private) = marker_extract(&key_items, schedule, marker_seed)?;
    report.marker_bits = markers.iter().map(|m| m.observed).collect();
    let mut ki = key_intensity.iter().peekable();
    for it in private {
        let intensity = loop {
            let &(slot, k) = ki.next().expect("private items come from key_items");
            if slot == it.slot {
                break k;
            }
        };
        block.key.push(SiftedBit {
            slot: it.slot,
            intensity,
            bit: it.bit,
        });
    }
    block.markers = markers;
    Ok((block, report))
}

/// A sifted click pair with both sides' values, for simulation audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchedPair {
    pub slot: u64,
    pub basis: Basis,
    pub intensity: Intensity,
    pub key_index: Option<u64>,
    pub is_marker: bool,
    pub prepared: State,
    pub bob_bit: bool,
}

impl MatchedPair {
    pub fn is_error(&self) -> bool {
        State::from_outcome(self.basis, self.bob_bit) != self.prepared
    }
}

/// Keeps the clicks whose measurement basis equals Alice's preparation
/// basis. Sync-preamble slots are dropped.
pub fn reconcile_bases(clicks: &[RawClick], seq: &mut AliceSequence) -> Result<Vec<MatchedPair>, SiftError> {
    let mut out = Vec::new();
    for c in clicks {
        if c.slot < seq.next_slot() {
            return Err(SiftError::UnorderedSlots(c.slot));
        }
        let p = seq.seek(c.slot);
        if p.is_sync || p.prepared.basis() != c.basis {
            continue;
        }
        out.push(MatchedPair {
            slot: c.slot,
            basis: c.basis,
            intensity: p.intensity,
            key_index: p.key_index,
            is_marker: p.is_marker,
            prepared: p.prepared,
            bob_bit: c.bit,
        });
    }
    Ok(out)
}

/// Decoy statistics of a matched set, markers excluded from the key basis.
pub fn decoy_stats(pairs: &[MatchedPair]) -> Result<DecoyStats, SiftError> {
    let mut n = [[0u64; 2]; 2];
    let mut m = [[0u64; 2]; 2];
    for p in pairs.iter().filter(|p| !p.is_marker) {
        n[p.basis.index()][p.intensity.index()] += 1;
        m[p.basis.index()][p.intensity.index()] += p.is_error() as u64;
    }
    Ok(DecoyStats::from_counts(n, m)?)
}

/// A corrected, confirmed error-correction block ready for assembly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrectedBlock {
    pub block_id: u64,
    pub start: f64,
    pub end: f64,
    /// Corrected key bits, one per byte.
    pub bits: Vec<u8>,
    pub intensities: Vec<Intensity>,
    /// Bits flipped by error correction (known to Bob only; all false on
    /// Alice's side).
    pub flipped: Vec<bool>,
    pub lambda_ec: u64,
    pub lambda_c: u64,
    pub check_n: [u64; 2],
    pub check_m: [u64; 2],
}

/// Exactly `sifted_block_len` corrected bits plus their accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteKeyBlock {
    pub index: u64,
    pub bits: Vec<u8>,
    pub stats: DecoyStats,
    pub lambda_ec: u64,
    pub lambda_c: u64,
    pub start: f64,
    pub end: f64,
    /// Error-correction blocks contributing at least one bit.
    pub ec_blocks: Vec<u64>,
}

impl FiniteKeyBlock {
    pub fn acquisition_time(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Default)]
struct OpenBlock {
    bits: Vec<u8>,
    n_k: [u64; 2],
    m_k: [u64; 2],
    n_c: [u64; 2],
    m_c: [u64; 2],
    lambda_ec: u64,
    lambda_c: u64,
    start: Option<f64>,
    end: f64,
    ec_blocks: Vec<u64>,
}

/// Concatenates corrected blocks into finite-key blocks of a fixed length.
///
/// Bits carry over between finite-key blocks. An error-correction block
/// that straddles a boundary charges its full leakage to both blocks; its
/// check-basis counts go to the block open when it arrives.
#[derive(Debug, Clone)]
pub struct KeyAssembler {
    block_len: usize,
    next_index: u64,
    open: OpenBlock,
}

impl KeyAssembler {
    pub fn new(block_len: u64) -> Self {
        assert!(block_len > 0);
        Self {
            block_len: block_len as usize,
            next_index: 0,
            open: OpenBlock::default(),
        }
    }

    /// Bits waiting for the next finite-key block.
    pub fn pending_bits(&self) -> usize {
        self.open.bits.len()
    }

    pub fn push(&mut self, b: &CorrectedBlock) -> Result<Vec<FiniteKeyBlock>, SiftError> {
        debug_assert_eq!(b.bits.len(), b.intensities.len());
        debug_assert_eq!(b.bits.len(), b.flipped.len());
        let mut done = Vec::new();
        for i in 0..2 {
            self.open.n_c[i] += b.check_n[i];
            self.open.m_c[i] += b.check_m[i];
        }
        self.charge(b);
        let mut at = 0;
        while at < b.bits.len() {
            let take = (self.block_len - self.open.bits.len()).min(b.bits.len() - at);
            for j in at..at + take {
                self.open.bits.push(b.bits[j]);
                let k = b.intensities[j].index();
                self.open.n_k[k] += 1;
                self.open.m_k[k] += b.flipped[j] as u64;
            }
            at += take;
            if self.open.bits.len() == self.block_len {
                done.push(self.close()?);
                if at < b.bits.len() {
                    self.charge(b);
                }
            }
        }
        Ok(done)
    }

    fn charge(&mut self, b: &CorrectedBlock) {
        let o = &mut self.open;
        if o.ec_blocks.last() != Some(&b.block_id) {
            o.lambda_ec += b.lambda_ec;
            o.lambda_c += b.lambda_c;
            o.ec_blocks.push(b.block_id);
        }
        o.start.get_or_insert(b.start);
        o.end = b.end;
    }

    fn close(&mut self) -> Result<FiniteKeyBlock, SiftError> {
        let o = std::mem::take(&mut self.open);
        let stats = DecoyStats::from_counts([o.n_k, o.n_c], [o.m_k, o.m_c])?;
        let index = self.next_index;
        self.next_index += 1;
        Ok(FiniteKeyBlock {
            index,
            bits: o.bits,
            stats,
            lambda_ec: o.lambda_ec,
            lambda_c: o.lambda_c,
            start: o.start.unwrap_or(o.end),
            end: o.end,
            ec_blocks: o.ec_blocks,
        })
    }
}

/// Runs a stream of corrected blocks through a [`KeyAssembler`].
pub fn assemble_blocks(stream: &[CorrectedBlock], params: &ProtocolParams) -> Result<Vec<FiniteKeyBlock>, SiftError> {
    let mut a = KeyAssembler::new(params.sifted_block_len);
    let mut out = Vec::new();
    for b in stream {
        out.extend(a.push(b)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linksim::SourceSeeds;

    fn block(markers: (u64, u64), check: (u64, u64)) -> SiftedBlock {
        let mut b = SiftedBlock::default();
        for i in 0..markers.1 {
            b.markers.push(MarkerObservation {
                slot: i,
                number: i,
                expected: false,
                observed: i < markers.0,
            });
        }
        for i in 0..check.1 {
            b.check.push(CheckOutcome {
                slot: i,
                intensity: Intensity::Signal,
                error: i < check.0,
            });
        }
        b
    }

    #[test]
    fn check_error_on_anti_diagonal() {
        let params = ProtocolParams {
            sync_len: 0,
            ..Default::default()
        };
        let mut seq = AliceSequence::new(&params, SourceSeeds::from_master(4));
        let d = (0..100)
            .map(|_| seq.next_prep())
            .find(|p| p.prepared == State::D)
            .unwrap();
        let mut seq = AliceSequence::new(&params, SourceSeeds::from_master(4));
        let (reply, pending) = alice_sift(&mut seq, 0, &[d.slot], &[Basis::Check]).unwrap();
        assert_eq!(reply.matched, vec![true]);
        let done = pending
            .complete(&MarkerReport {
                marker_bits: vec![],
                check_bits: vec![true],
            })
            .unwrap();
        assert_eq!(done.check_counts().1[d.intensity.index()], 1);
    }

    #[test]
    fn basis_mismatch_dropped() {
        let params = ProtocolParams {
            sync_len: 0,
            ..Default::default()
        };
        let mut seq = AliceSequence::new(&params, SourceSeeds::from_master(9));
        let l = (0..100)
            .map(|_| seq.next_prep())
            .find(|p| p.prepared.basis() == Basis::Key)
            .unwrap();
        let mut seq = AliceSequence::new(&params, SourceSeeds::from_master(9));
        let pairs = reconcile_bases(
            &[RawClick {
                slot: l.slot,
                basis: Basis::Check,
                bit: false,
            }],
            &mut seq,
        )
        .unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn qber_examples() {
        assert_eq!(estimate_qber(18, 1000, Basis::Check).unwrap(), 0.018);
        assert_eq!(estimate_qber(0, 10, Basis::Key).unwrap(), 0.0);
        assert_eq!(estimate_qber(10, 10, Basis::Key).unwrap(), 1.0);
        assert_eq!(estimate_qber(0, 0, Basis::Key), Err(SiftError::EmptyBasis(Basis::Key)));
    }

    #[test]
    fn discard_rule() {
        assert!(matches!(block((0, 1000), (51, 1000)).verdict(0.05), Verdict::Discard { .. }));
        assert!(block((24, 1000), (19, 1000)).verdict(0.05).is_kept());
        assert!(block((50, 1000), (50, 1000)).verdict(0.05).is_kept(), "5.0% is not above");
        assert_eq!(block((0, 0), (1, 10)).verdict(0.05), Verdict::Empty(Basis::Key));
    }

    #[test]
    fn desync_rule() {
        assert!(check_desync(6, 20).is_err());
        assert!(check_desync(5, 20).is_ok());
        assert!(check_desync(19, 19).is_ok(), "too few markers to judge");
    }

    #[test]
    fn empty_stream_no_blocks() {
        assert!(assemble_blocks(&[], &ProtocolParams::default()).unwrap().is_empty());
    }

    fn corrected(id: u64, n: usize) -> CorrectedBlock {
        CorrectedBlock {
            block_id: id,
            start: id as f64,
            end: id as f64 + 1.0,
            bits: (0..n).map(|i| (i % 3 == 0) as u8).collect(),
            intensities: (0..n)
                .map(|i| if i % 4 == 0 { Intensity::Decoy } else { Intensity::Signal })
                .collect(),
            flipped: (0..n).map(|i| i % 50 == 0).collect(),
            lambda_ec: 100 + id,
            lambda_c: 50,
            check_n: [10, 3],
            check_m: [1, 0],
        }
    }

    #[test]
    fn assembly_cuts_exact_lengths() {
        let params = ProtocolParams {
            sifted_block_len: 250,
            ..Default::default()
        };
        let stream: Vec<_> = (0..5).map(|i| corrected(i, 120)).collect();
        let blocks = assemble_blocks(&stream, &params).unwrap();
        assert_eq!(blocks.len(), 2);
        assert!(blocks.iter().all(|b| b.bits.len() == 250));
        // block 0: EC 0, 1, 2 (2 straddles); block 1: EC 2, 3, 4
        assert_eq!(blocks[0].ec_blocks, vec![0, 1, 2]);
        assert_eq!(blocks[1].ec_blocks, vec![2, 3, 4]);
        assert_eq!(blocks[0].lambda_ec, 100 + 101 + 102);
        assert_eq!(blocks[1].lambda_ec, 102 + 103 + 104);
        assert_eq!(blocks[0].lambda_c, 150);
        assert_eq!(blocks[0].stats.n_total(Basis::Key), 250);
        // check counts go to the block open when the EC block arrives
        assert_eq!(blocks[0].stats.n(Basis::Check, Intensity::Signal), 30);
        assert_eq!(blocks[1].stats.n(Basis::Check, Intensity::Signal), 20);
        assert_eq!(blocks[0].start, 0.0);
        assert_eq!(blocks[1].end, 5.0);
    }

    #[test]
    fn assembly_conserves_bits() {
        let params = ProtocolParams {
            sifted_block_len: 97,
            ..Default::default()
        };
        let stream: Vec<_> = (0..7).map(|i| corrected(i, 33 + 20 * i as usize)).collect();
        let blocks = assemble_blocks(&stream, &params).unwrap();
        let concat: Vec<u8> = stream.iter().flat_map(|b| b.bits.clone()).collect();
        let got: Vec<u8> = blocks.iter().flat_map(|b| b.bits.clone()).collect();
        assert_eq!(&concat[..got.len()], &got[..]);
        assert_eq!(got.len() / 97, concat.len() / 97);
    }

    #[test]
    fn simulated_pairing_audit() {
        let params = ProtocolParams {
            sync_len: 1000,
            ..Default::default()
        };
        let ch = crate::linksim::ChannelParams::default();
        let mut sim = crate::linksim::LinkSimulator::new(&params, &ch, 11);
        let mut ev = Vec::new();
        let mut truth = std::collections::HashMap::new();
        sim.run_until_with(3_000_000, &mut ev, |c| {
            for p in c {
                truth.insert(p.slot, p.prepared);
            }
        });
        let clicks: Vec<RawClick> = ev
            .iter()
            .map(|e| RawClick {
                slot: e.slot,
                basis: e.outcome.basis(),
                bit: e.outcome.bit(),
            })
            .collect();
        let seeds = SourceSeeds::from_master(11);

        // protocol split agrees with the joint reconciliation
        let mut seq = AliceSequence::new(&params, seeds);
        let pairs = reconcile_bases(&clicks, &mut seq).unwrap();
        for p in &pairs {
            assert_eq!(truth[&p.slot], p.prepared);
            assert_eq!(p.basis, p.prepared.basis());
        }
        let mut seq = AliceSequence::new(&params, seeds);
        let slots: Vec<u64> = clicks.iter().map(|c| c.slot).collect();
        let bases: Vec<Basis> = clicks.iter().map(|c| c.basis).collect();
        let (reply, pending) = alice_sift(&mut seq, 0, &slots, &bases).unwrap();
        let schedule = MarkerSchedule::from_params(&params);
        let (bob, report) = bob_sift(0, &clicks, &reply, schedule, seeds.markers).unwrap();
        let alice = pending.complete(&report).unwrap();
        assert_eq!(alice.key.len(), bob.key.len());
        for (a, b) in alice.key.iter().zip(&bob.key) {
            assert_eq!((a.slot, a.intensity), (b.slot, b.intensity));
        }
        assert_eq!(alice.markers, bob.markers);
        assert_eq!(alice.check, bob.check);
        let stats = decoy_stats(&pairs).unwrap();
        assert_eq!(stats.n_total(Basis::Key), bob.key.len() as u64);
        assert_eq!(stats.n_total(Basis::Check), bob.check.len() as u64);
        let errs = alice.key.iter().zip(&bob.key).filter(|(a, b)| a.bit != b.bit).count() as u64;
        assert_eq!(errs, stats.m_total(Basis::Key));
    }
}
