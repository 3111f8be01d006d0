//! The receiver node. Bob drives the classical protocol: he reveals his
//! clicks block by block, runs error correction in batches, and closes each
//! finite-key block by choosing the privacy-amplification seed.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::classical::messages::pack_bits;
use crate::classical::{ConfirmEntry, Link, Message, Provenance, Sender, SyncAnnounce};
use crate::distill::{confirm_hash, toeplitz_extract, CascadeConfig, CascadeError, CascadeSession, ConfirmKey, Layout};
use crate::finitekey::key_block;
use crate::linksim::{demux_timetag, MarkerSchedule};
use crate::model::ProtocolParams;
use crate::rng::{derive_seed, stream};
use crate::sifting::{bob_sift, check_desync, CorrectedBlock, FiniteKeyBlock, KeyAssembler, RawClick, SiftedBlock, Verdict};
use crate::synchro::{drift_feedback_step, fit_period, recover_offset, AlignmentState, ClockEstimate, ClockTracker, OffsetSearch};

use super::config::SessionConfig;
use super::output::{
    AuditSummary, EcLogEntry, FiniteKeyRecord, KeyStore, ManifestEntry, MetricsRecord, MetricsWriter, RealignEvent,
};
use super::sim::{self, SimChunk};
use super::{abort_message, config_digest, unexpected, SessionError};

/// Everything the receiver reports at the end of a session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BobReport {
    pub audit: AuditSummary,
    pub keys: KeyStore,
    pub ec_log: Vec<EcLogEntry>,
    pub realigns: Vec<RealignEvent>,
    pub metrics: Vec<MetricsRecord>,
    pub finite_key: Vec<FiniteKeyRecord>,
    pub clock: Option<ClockEstimate>,
}

/// Runs the receiver over `stream` until the session ends.
pub fn run_bob<S: Read + Write>(cfg: &SessionConfig, link: &mut Link<S>) -> Result<BobReport, SessionError> {
    let result = Bob::new(cfg).and_then(|mut bob| bob.run(link).map(|_| bob.into_report(link)));
    if let Err(e) = &result {
        if !e.peer_informed() {
            let _ = link.send(&abort_message(e));
        }
    }
    result
}

struct Pending {
    block: SiftedBlock,
    qber: f64,
}

struct Bob<'a> {
    cfg: &'a SessionConfig,
    params: &'a ProtocolParams,
    session: u64,
    budget: u64,
    blocks: u64,
    announce: Option<SyncAnnounce>,
    schedule: MarkerSchedule,
    tracker: Option<ClockTracker>,
    tags: VecDeque<f64>,
    chunk_truth: Vec<(f64, bool)>,
    align: AlignmentState,
    realign_done_at: Option<f64>,
    batch: Vec<Pending>,
    batch_span: usize,
    assembler: KeyAssembler,
    rng: ChaCha8Rng,
    cascade: CascadeConfig,
    round: u64,
    report: BobReport,
    /// Cumulative (realignments, discarded) after each block.
    counters: Vec<(u64, u64)>,
    metrics: MetricsWriter,
    last_skr: f64,
    ec_errors: u64,
    corrected_bits: u64,
}

impl<'a> Bob<'a> {
    fn new(cfg: &'a SessionConfig) -> Result<Self, SessionError> {
        let params = &cfg.protocol;
        let budget = cfg.pulse_budget();
        Ok(Self {
            cfg,
            params,
            session: super::session_id(cfg.seed),
            budget,
            blocks: sim::block_count(params, budget),
            announce: None,
            schedule: MarkerSchedule::from_params(params),
            tracker: None,
            tags: VecDeque::new(),
            chunk_truth: Vec::new(),
            align: AlignmentState::new(params.rolling_window_seconds, params.qber_realign),
            realign_done_at: None,
            batch: Vec::new(),
            batch_span: 0,
            assembler: KeyAssembler::new(params.sifted_block_len),
            rng: stream(derive_seed(cfg.seed, "bob/rng")),
            cascade: CascadeConfig::default(),
            round: 0,
            report: BobReport::default(),
            counters: Vec::new(),
            metrics: MetricsWriter::create(cfg.metrics.as_deref()),
            last_skr: 0.0,
            ec_errors: 0,
            corrected_bits: 0,
        })
    }

    fn run<S: Read + Write>(&mut self, link: &mut Link<S>) -> Result<(), SessionError> {
        let announce = match link.recv()? {
            Message::SyncSeed(a) => a,
            m => return Err(unexpected("SYNC_SEED", &m)),
        };
        if announce.config_digest != config_digest(self.cfg) || announce.sync_len != self.params.sync_len {
            return Err(SessionError::ConfigMismatch);
        }
        self.announce = Some(announce);
        let stage = sim::spawn(
            self.params.clone(),
            self.cfg.channel.clone(),
            self.cfg.seed,
            self.budget,
            self.cfg.drift_spike,
        );
        let result = self.acquire(link, &stage);
        drop(stage.chunks);
        drop(stage.feedback);
        let _ = stage.handle.join();
        result?;
        self.run_batch(link)?;
        self.emit_metrics();
        self.metrics.finish();
        link.send(&Message::Abort {
            code: 0,
            reason: "session complete".into(),
        })?;
        Ok(())
    }

    fn acquire<S: Read + Write>(&mut self, link: &mut Link<S>, stage: &sim::SimStage) -> Result<(), SessionError> {
        for _ in 0..self.blocks {
            let chunk = stage
                .chunks
                .recv()
                .map_err(|_| SessionError::Protocol("simulator stopped early".into()))?;
            self.ingest(chunk)?;
            let b = self.chunk_truth.len() as u64 - 1;
            if b >= 1 {
                let realign = self.process_block(link, b - 1)?;
                let _ = stage.feedback.send(realign);
            }
        }
        if self.blocks > 0 {
            self.process_block(link, self.blocks - 1)?;
        }
        Ok(())
    }

    fn ingest(&mut self, chunk: SimChunk) -> Result<(), SessionError> {
        self.report.audit.raw_detections += chunk.tags.len() as u64;
        if self.tracker.is_none() {
            let announce = self.announce.expect("announce received");
            let fit = fit_period(&chunk.tags, self.params.period())?;
            let search = OffsetSearch {
                max_shift: self.cfg.max_offset_search,
                ..Default::default()
            };
            let est = recover_offset(&chunk.tags, &fit, announce.sync_seed, announce.sync_len, &search)?;
            log::info!(
                "synchronized: period {:.9e} s, offset {:.6e} s ({:.1} sigma)",
                est.period,
                est.offset,
                est.confidence
            );
            self.report.clock = Some(est);
            let shift = self.cfg.fault_slot_shift as f64 * est.period;
            self.tracker = Some(ClockTracker::new(est.period, est.offset + shift));
        }
        self.tags.extend(chunk.tags);
        self.chunk_truth.push((chunk.true_error_k, chunk.realigning));
        Ok(())
    }

    /// Takes the tags of block `b` off the buffer and demultiplexes them.
    fn collect_clicks(&mut self, lo: u64, hi: u64) -> (Vec<RawClick>, Vec<f64>) {
        let tr = self.tracker.expect("synchronized before the first block");
        let mut clicks: Vec<RawClick> = Vec::new();
        let mut tags = Vec::new();
        while let Some(&t) = self.tags.front() {
            let d = demux_timetag(t, tr.period, tr.offset);
            if d.slot >= hi as i64 {
                break;
            }
            self.tags.pop_front();
            if d.slot < lo as i64 {
                // preamble, or a click whose block was already revealed
                if d.slot >= self.params.sync_len as i64 {
                    self.report.audit.late_clicks += 1;
                }
                continue;
            }
            tags.push(t);
            let slot = d.slot as u64;
            if clicks.last().is_some_and(|c| c.slot >= slot) {
                self.report.audit.late_clicks += 1;
                continue;
            }
            clicks.push(RawClick {
                slot,
                basis: d.basis,
                bit: d.bit,
            });
        }
        (clicks, tags)
    }

    /// Sifts block `b`; returns whether a realignment was commanded.
    fn process_block<S: Read + Write>(&mut self, link: &mut Link<S>, b: u64) -> Result<bool, SessionError> {
        let announce = self.announce.expect("announce received");
        let (lo, hi) = sim::block_slots(self.params, self.budget, b);
        let period = self.params.period();
        let (start, end) = (lo as f64 * period, hi as f64 * period);
        let (clicks, tags) = self.collect_clicks(lo, hi);
        link.send(&Message::BasisReveal {
            block: b,
            start,
            end,
            slots: clicks.iter().map(|c| c.slot).collect(),
            bases: clicks.iter().map(|c| c.basis).collect(),
        })?;
        let reply = match link.recv()? {
            Message::BasisReply { block, reply } if block == b => reply,
            m => return Err(unexpected("BASIS_REVEAL reply", &m)),
        };
        let (mut sifted, report) = bob_sift(b, &clicks, &reply, self.schedule, announce.marker_seed)?;
        sifted.start = start;
        sifted.end = end;
        link.send(&Message::MarkerReport { block: b, report })?;
        if let Some(tr) = self.tracker.as_mut() {
            tr.refit(&tags);
        }

        let (errors, markers) = (sifted.marker_errors(), sifted.markers.len() as u64);
        check_desync(errors, markers).map_err(|_| SessionError::Desync { block: b, errors, markers })?;

        if let Some(done) = self.realign_done_at.filter(|&d| d <= end) {
            self.align.realign_completed(done);
            self.realign_done_at = None;
        }
        let command = drift_feedback_step(&mut self.align, end, errors, markers);
        if let Some(cmd) = command {
            let applied_block = b + sim::FEEDBACK_LAG;
            let applied_at = sim::block_slots(self.params, self.budget, applied_block).0 as f64 * period;
            let completes_at = applied_at + self.cfg.channel.realign_time;
            self.realign_done_at = Some(completes_at);
            self.report.realigns.push(RealignEvent {
                triggered_at: cmd.at,
                rolling_qber: cmd.rolling_qber,
                applied_block,
                applied_at,
                completes_at,
            });
        }

        let verdict = sifted.verdict(self.params.qber_discard);
        let (truth, realigning) = self.chunk_truth[b as usize];
        let audit = &mut self.report.audit;
        audit.ec_blocks += 1;
        audit.sifted_key_bits += sifted.key.len() as u64;
        let verdict_name = match verdict {
            Verdict::Keep { .. } => "keep",
            Verdict::Discard { .. } => "discard",
            Verdict::Empty(_) => "empty",
        };
        match verdict {
            Verdict::Keep { .. } => audit.blocks_kept += 1,
            Verdict::Discard { .. } => audit.blocks_discarded += 1,
            Verdict::Empty(_) => audit.blocks_empty += 1,
        }
        self.report.ec_log.push(EcLogEntry {
            block: b,
            start,
            end,
            detections: tags.len() as u64,
            key_bits: sifted.key.len() as u64,
            markers,
            marker_errors: errors,
            checks: sifted.check.len() as u64,
            check_errors: sifted.check_errors(),
            verdict: verdict_name,
            rolling_qber: self.align.rolling_qber(),
            ec_errors: None,
            lambda_ec: 0,
            confirmed: false,
            true_error_k: truth,
            realigning,
        });
        self.counters
            .push((self.report.realigns.len() as u64, self.report.audit.blocks_discarded));
        if let Verdict::Keep { qber_k, .. } = verdict {
            self.batch.push(Pending {
                block: sifted,
                qber: qber_k,
            });
        }
        self.batch_span += 1;
        if self.batch_span >= self.cfg.ec_batch_blocks {
            self.run_batch(link)?;
            self.emit_metrics();
        }
        Ok(command.is_some())
    }

    /// Lockstep Cascade over the kept blocks of the batch, then confirmation.
    fn run_batch<S: Read + Write>(&mut self, link: &mut Link<S>) -> Result<(), SessionError> {
        self.batch_span = 0;
        let batch = std::mem::take(&mut self.batch);
        if batch.is_empty() {
            return Ok(());
        }
        let lambda_c = self.params.lambda_c();
        let mut sessions: Vec<Option<CascadeSession>> = batch
            .iter()
            .map(|p| {
                let bits = p.block.key_bits();
                (!bits.is_empty()).then(|| {
                    let layout = Layout::new(
                        bits.len(),
                        self.cascade.top_block_size(p.qber),
                        self.cascade.passes,
                        derive_seed(self.session, &format!("cascade/{}", p.block.block_id)),
                    );
                    CascadeSession::new(bits, layout, &self.cascade)
                })
            })
            .collect();
        loop {
            let mut request = Vec::new();
            for (p, s) in batch.iter().zip(sessions.iter_mut()) {
                let Some(sess) = s else { continue };
                if let Some(q) = sess.next_queries()? {
                    request.push((p.block.block_id, q));
                }
            }
            if request.is_empty() {
                break;
            }
            self.round += 1;
            link.send(&Message::EcParityReq {
                round: self.round,
                blocks: request.clone(),
            })?;
            let answers = match link.recv()? {
                Message::EcParityResp { round, blocks } if round == self.round => blocks,
                m => return Err(unexpected("EC_PARITY_RESP", &m)),
            };
            if answers.len() != request.len() || answers.iter().zip(&request).any(|(a, r)| a.0 != r.0) {
                return Err(SessionError::Protocol("parity response does not match the request".into()));
            }
            let mut ans = answers.into_iter();
            for (p, s) in batch.iter().zip(sessions.iter_mut()) {
                let Some(sess) = s else { continue };
                if !request.iter().any(|r| r.0 == p.block.block_id) {
                    continue;
                }
                let (_, a) = ans.next().expect("checked lengths");
                match sess.apply_answers(&a) {
                    Ok(()) => {}
                    Err(CascadeError::EcAborted { disclosed, len }) => {
                        log::warn!("block {}: error correction aborted ({disclosed} of {len} bits disclosed)", p.block.block_id);
                        *s = None;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }

        let entries: Vec<ConfirmEntry> = batch
            .iter()
            .zip(&sessions)
            .map(|(p, s)| match s {
                Some(sess) => {
                    let key_seed = derive_seed(self.session, &format!("confirm/{}", p.block.block_id));
                    ConfirmEntry {
                        block: p.block.block_id,
                        key_seed,
                        tag: confirm_hash(sess.bits(), ConfirmKey::from_seed(key_seed), lambda_c as u32),
                        dropped: false,
                    }
                }
                None => ConfirmEntry {
                    block: p.block.block_id,
                    key_seed: 0,
                    tag: 0,
                    dropped: true,
                },
            })
            .collect();
        link.send(&Message::ConfirmRequest(entries.clone()))?;
        let verdicts = match link.recv()? {
            Message::ConfirmResult(v) => v,
            m => return Err(unexpected("CONFIRM_TAG result", &m)),
        };
        if verdicts.len() != entries.len() || verdicts.iter().zip(&entries).any(|(v, e)| v.block != e.block) {
            return Err(SessionError::Protocol("confirmation result does not match the request".into()));
        }

        for ((p, s), v) in batch.into_iter().zip(sessions).zip(verdicts) {
            let id = p.block.block_id;
            let Some(sess) = s.filter(|_| v.ok) else {
                self.report.audit.blocks_dropped += 1;
                continue;
            };
            let original = p.block.key_bits();
            let disclosed = sess.disclosed_bits();
            let bits = sess.into_bits();
            let flipped: Vec<bool> = bits.iter().zip(&original).map(|(a, b)| a != b).collect();
            let n_err = flipped.iter().filter(|&&f| f).count() as u64;
            let entry = &mut self.report.ec_log[id as usize];
            entry.ec_errors = Some(n_err);
            entry.lambda_ec = disclosed;
            entry.confirmed = true;
            self.ec_errors += n_err;
            self.corrected_bits += bits.len() as u64;
            let (check_n, check_m) = p.block.check_counts();
            let corrected = CorrectedBlock {
                block_id: id,
                start: p.block.start,
                end: p.block.end,
                intensities: p.block.key.iter().map(|k| k.intensity).collect(),
                bits,
                flipped,
                lambda_ec: disclosed,
                lambda_c,
                check_n,
                check_m,
            };
            for fk in self.assembler.push(&corrected)? {
                self.close_finite_key(link, fk)?;
            }
        }
        Ok(())
    }

    fn close_finite_key<S: Read + Write>(&mut self, link: &mut Link<S>, fk: FiniteKeyBlock) -> Result<(), SessionError> {
        link.send(&Message::DecoyStats {
            index: fk.index,
            stats: fk.stats,
            lambda_ec: fk.lambda_ec,
            lambda_c: fk.lambda_c,
        })?;
        let (bounds, mut result) = key_block(&fk.stats, fk.lambda_ec, fk.lambda_c, self.params)?;
        let skl = result.skl as usize;
        let seed: Vec<u8> = if skl == 0 {
            Vec::new()
        } else {
            (0..fk.bits.len() + skl - 1).map(|_| self.rng.gen::<bool>() as u8).collect()
        };
        let key = toeplitz_extract(&fk.bits, &seed, skl)
            .map_err(|e| SessionError::Protocol(e.to_string()))?;
        link.send(&Message::PaSeed {
            index: fk.index,
            out_len: skl as u64,
            seed,
        })?;
        let mut packed = Vec::with_capacity(skl.div_ceil(8));
        pack_bits(key.iter().map(|&b| b != 0), &mut packed);
        let digest: [u8; 32] = Sha256::digest(&packed).into();
        match link.recv()? {
            Message::BlockResult { index, skl: s, digest: d } if index == fk.index => {
                if s != skl as u64 || d != digest {
                    return Err(SessionError::Protocol(format!("final key of block {index} differs between the nodes")));
                }
            }
            m => return Err(unexpected("BLOCK_RESULT", &m)),
        }
        let acq = fk.acquisition_time();
        result.wall_time = acq;
        result.skr = if acq > 0.0 { result.skl as f64 / acq } else { 0.0 };
        self.last_skr = result.skr;
        let usable = &packed[..skl / 8];
        let auth = refill_reservoirs(link, usable, self.cfg.auth_refill_bytes, Sender::Bob);
        self.report.keys.append(
            ManifestEntry {
                index: fk.index,
                ec_blocks: (*fk.ec_blocks.first().unwrap_or(&0), *fk.ec_blocks.last().unwrap_or(&0)),
                skl: skl as u64,
                auth_bytes: auth as u64,
                output_bytes: 0,
                sha256: [0; 32],
            },
            &usable[auth..],
        );
        self.report.audit.finite_key_blocks += 1;
        self.report.audit.secret_bits += skl as u64;
        log::info!(
            "finite-key block {}: {} bits, SKL {} ({:.1} bit/s)",
            fk.index,
            fk.bits.len(),
            skl,
            result.skr
        );
        self.report.finite_key.push(FiniteKeyRecord {
            index: fk.index,
            sifted_bits: fk.bits.len() as u64,
            bounds,
            result,
        });
        Ok(())
    }

    /// Metrics rows for every block processed so far.
    fn emit_metrics(&mut self) {
        let rate = self.params.pulse_rate;
        let sync = self.params.sync_len as f64;
        for b in self.report.metrics.len()..self.report.ec_log.len() {
            let e = &self.report.ec_log[b];
            let (realigns, discarded) = self.counters[b];
            let row = MetricsRecord {
                t: (e.end * rate - sync) / rate,
                qber_k: e.ec_qber().or(e.marker_qber()).unwrap_or(0.0),
                qber_c: e.check_qber().unwrap_or(0.0),
                skr: self.last_skr,
                detections: e.detections,
                realign_events: realigns,
                blocks_discarded: discarded,
            };
            self.metrics.push(&row);
            self.report.metrics.push(row);
        }
    }

    fn into_report<S: Read + Write>(mut self, link: &Link<S>) -> BobReport {
        let a = &mut self.report.audit;
        a.role = "bob";
        a.pulses = if self.blocks > 0 { self.params.sync_len + self.budget } else { 0 };
        a.acquisition_seconds = self.budget as f64 / self.params.pulse_rate;
        a.corrected_bits = self.corrected_bits;
        a.realignments = self.report.realigns.len() as u64;
        a.output_bits = 8 * self.report.keys.bytes.len() as u64;
        let log = &self.report.ec_log;
        a.mean_qber_k = if self.corrected_bits > 0 {
            self.ec_errors as f64 / self.corrected_bits as f64
        } else {
            let (e, n) = log.iter().fold((0, 0), |acc, l| (acc.0 + l.marker_errors, acc.1 + l.markers));
            if n > 0 { e as f64 / n as f64 } else { 0.0 }
        };
        let (ce, cn) = log.iter().fold((0, 0), |acc, l| (acc.0 + l.check_errors, acc.1 + l.checks));
        a.mean_qber_c = if cn > 0 { ce as f64 / cn as f64 } else { 0.0 };
        a.mean_skr = if a.acquisition_seconds > 0.0 {
            a.secret_bits as f64 / a.acquisition_seconds
        } else {
            0.0
        };
        fill_link_audit(a, link);
        self.report
    }
}

/// Authentication and traffic counters of a link.
pub(super) fn fill_link_audit<S: Read + Write>(a: &mut AuditSummary, link: &Link<S>) {
    let (o, i) = (&link.outgoing().reservoir, &link.incoming().reservoir);
    a.auth_bytes_consumed = o.consumed() + i.consumed();
    a.auth_bytes_refilled = o.refilled() + i.refilled();
    let st = link.stats();
    a.frames_sent = st.frames_sent;
    a.frames_received = st.frames_received;
}

/// Moves key bytes into reservoirs below their low-water mark, Alice→Bob
/// first. Returns the number of bytes taken from the front of `key`.
pub(super) fn refill_reservoirs<S: Read + Write>(
    link: &mut Link<S>,
    key: &[u8],
    chunk: usize,
    me: Sender,
) -> usize {
    let mut taken = 0;
    for dir in [Sender::Alice, Sender::Bob] {
        let res = if dir == me {
            &mut link.outgoing_mut().reservoir
        } else {
            &mut link.incoming_mut().reservoir
        };
        if res.needs_refill() {
            let n = chunk.min(key.len() - taken);
            if n > 0 {
                res.refill(&key[taken..taken + n], Provenance::Qkd);
                taken += n;
            }
        }
    }
    taken
}
