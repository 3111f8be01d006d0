//! The transmitter node. Alice replays her preparation sequence to answer
//! Bob's reveals, answers parity queries, checks confirmation tags and
//! applies the privacy-amplification seed Bob sends.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::classical::messages::pack_bits;
use crate::classical::{ConfirmEntry, ConfirmVerdict, Link, Message, Sender, SyncAnnounce};
use crate::distill::{confirm_hash, toeplitz_extract, CascadeConfig, CascadeResponder, ConfirmKey, Layout};
use crate::finitekey::key_block;
use crate::model::KeyBlockResult;
use crate::linksim::{AliceSequence, SourceSeeds};
use crate::model::{Basis, DecoyStats, Intensity, ProtocolParams};
use crate::rng::derive_seed;
use crate::sifting::{alice_sift, AlicePending, CorrectedBlock, FiniteKeyBlock, KeyAssembler, SiftedBlock, Verdict};

use super::bob::{fill_link_audit, refill_reservoirs};
use super::config::SessionConfig;
use super::output::{AuditSummary, KeyStore, ManifestEntry};
use super::{abort_message, config_digest, unexpected, SessionError};

/// What the transmitter reports at the end of a session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AliceReport {
    pub audit: AuditSummary,
    pub keys: KeyStore,
    pub finite_key: Vec<KeyBlockResult>,
}

/// Runs the transmitter over `link` until Bob closes the session.
pub fn run_alice<S: Read + Write>(cfg: &SessionConfig, link: &mut Link<S>) -> Result<AliceReport, SessionError> {
    let mut alice = Alice::new(cfg);
    let result = alice.run(link);
    if let Err(e) = &result {
        if !e.peer_informed() {
            let _ = link.send(&abort_message(e));
        }
    }
    result.map(|_| alice.into_report(link))
}

struct Kept {
    block: SiftedBlock,
    qber: f64,
    responder: Option<CascadeResponder>,
    disclosed: u64,
}

struct Closing {
    fk: FiniteKeyBlock,
    result: KeyBlockResult,
}

struct Alice<'a> {
    cfg: &'a SessionConfig,
    params: &'a ProtocolParams,
    session: u64,
    seq: AliceSequence,
    pending: HashMap<u64, (AlicePending, f64, f64)>,
    kept: BTreeMap<u64, Kept>,
    assembler: KeyAssembler,
    closed: VecDeque<FiniteKeyBlock>,
    closing: Option<Closing>,
    cascade: CascadeConfig,
    next_block: u64,
    /// Marker errors, markers, check errors, checks.
    qber_counts: [u64; 4],
    report: AliceReport,
}

impl<'a> Alice<'a> {
    fn new(cfg: &'a SessionConfig) -> Self {
        let params = &cfg.protocol;
        Self {
            cfg,
            params,
            session: super::session_id(cfg.seed),
            seq: AliceSequence::new(params, SourceSeeds::from_master(cfg.seed)),
            pending: HashMap::new(),
            kept: BTreeMap::new(),
            assembler: KeyAssembler::new(params.sifted_block_len),
            closed: VecDeque::new(),
            closing: None,
            cascade: CascadeConfig::default(),
            next_block: 0,
            qber_counts: [0; 4],
            report: AliceReport::default(),
        }
    }

    fn run<S: Read + Write>(&mut self, link: &mut Link<S>) -> Result<(), SessionError> {
        let seeds = self.seq.seeds();
        link.send(&Message::SyncSeed(SyncAnnounce {
            sync_seed: seeds.sync,
            marker_seed: seeds.markers,
            sync_len: self.params.sync_len,
            config_digest: config_digest(self.cfg),
        }))?;
        loop {
            match link.recv()? {
                Message::BasisReveal {
                    block,
                    start,
                    end,
                    slots,
                    bases,
                } => {
                    if block != self.next_block {
                        return Err(SessionError::Protocol(format!("reveal of block {block}, expected {}", self.next_block)));
                    }
                    self.next_block += 1;
                    let (reply, pending) = alice_sift(&mut self.seq, block, &slots, &bases)?;
                    self.report.audit.raw_detections += slots.len() as u64;
                    self.pending.insert(block, (pending, start, end));
                    link.send(&Message::BasisReply { block, reply })?;
                }
                Message::MarkerReport { block, report } => {
                    let (pending, start, end) = self
                        .pending
                        .remove(&block)
                        .ok_or_else(|| SessionError::Protocol(format!("marker report for unknown block {block}")))?;
                    let mut sifted = pending.complete(&report)?;
                    sifted.start = start;
                    sifted.end = end;
                    self.judge(sifted);
                }
                Message::EcParityReq { round, blocks } => {
                    let mut answers = Vec::with_capacity(blocks.len());
                    for (id, queries) in blocks {
                        let cascade = self.cascade;
                        let session = self.session;
                        let k = self
                            .kept
                            .get_mut(&id)
                            .ok_or_else(|| SessionError::Protocol(format!("parity query on block {id}, which is not kept")))?;
                        let responder = k.responder.get_or_insert_with(|| {
                            let bits = k.block.key_bits();
                            let layout = Layout::new(
                                bits.len(),
                                cascade.top_block_size(k.qber),
                                cascade.passes,
                                derive_seed(session, &format!("cascade/{id}")),
                            );
                            CascadeResponder::new(bits, layout)
                        });
                        answers.push((id, responder.answer(&queries)?));
                        k.disclosed += queries.len() as u64;
                    }
                    link.send(&Message::EcParityResp { round, blocks: answers })?;
                }
                Message::ConfirmRequest(entries) => {
                    let verdicts = self.confirm(&entries)?;
                    link.send(&Message::ConfirmResult(verdicts))?;
                }
                Message::DecoyStats {
                    index,
                    stats,
                    lambda_ec,
                    lambda_c,
                } => self.open_finite_key(index, &stats, lambda_ec, lambda_c)?,
                Message::PaSeed { index, out_len, seed } => self.amplify(link, index, out_len, &seed)?,
                Message::Abort { .. } => return Ok(()),
                m => return Err(unexpected("a receiver message", &m)),
            }
        }
    }

    /// Applies the discard rule to a completed block, as Bob does.
    fn judge(&mut self, block: SiftedBlock) {
        let a = &mut self.report.audit;
        a.ec_blocks += 1;
        a.sifted_key_bits += block.key.len() as u64;
        self.qber_counts[0] += block.marker_errors();
        self.qber_counts[1] += block.markers.len() as u64;
        self.qber_counts[2] += block.check_errors();
        self.qber_counts[3] += block.check.len() as u64;
        match block.verdict(self.params.qber_discard) {
            Verdict::Keep { qber_k, .. } => {
                a.blocks_kept += 1;
                self.kept.insert(
                    block.block_id,
                    Kept {
                        block,
                        qber: qber_k,
                        responder: None,
                        disclosed: 0,
                    },
                );
            }
            Verdict::Discard { .. } => a.blocks_discarded += 1,
            Verdict::Empty(_) => a.blocks_empty += 1,
        }
    }

    fn confirm(&mut self, entries: &[ConfirmEntry]) -> Result<Vec<ConfirmVerdict>, SessionError> {
        let lambda_c = self.params.lambda_c();
        let mut verdicts = Vec::with_capacity(entries.len());
        for e in entries {
            let k = self
                .kept
                .remove(&e.block)
                .ok_or_else(|| SessionError::Protocol(format!("confirmation of block {}, which is not kept", e.block)))?;
            let bits = k.block.key_bits();
            let tag = confirm_hash(&bits, ConfirmKey::from_seed(e.key_seed), lambda_c as u32);
            let ok = !e.dropped && e.key_seed == derive_seed(self.session, &format!("confirm/{}", e.block)) && tag == e.tag;
            verdicts.push(ConfirmVerdict { block: e.block, tag, ok });
            if !ok {
                self.report.audit.blocks_dropped += 1;
                continue;
            }
            self.report.audit.corrected_bits += bits.len() as u64;
            let (check_n, check_m) = k.block.check_counts();
            let corrected = CorrectedBlock {
                block_id: e.block,
                start: k.block.start,
                end: k.block.end,
                intensities: k.block.key.iter().map(|b| b.intensity).collect(),
                flipped: vec![false; bits.len()],
                bits,
                lambda_ec: k.disclosed,
                lambda_c,
                check_n,
                check_m,
            };
            self.closed.extend(self.assembler.push(&corrected)?);
        }
        Ok(verdicts)
    }

    /// Bob's statistics for the next finite-key block; the counts Alice can
    /// see herself must agree.
    fn open_finite_key(&mut self, index: u64, stats: &DecoyStats, lambda_ec: u64, lambda_c: u64) -> Result<(), SessionError> {
        let fk = self
            .closed
            .pop_front()
            .ok_or_else(|| SessionError::Protocol(format!("statistics for finite-key block {index} before it closed")))?;
        let mismatch = |what: &str| SessionError::Protocol(format!("finite-key block {index}: {what} differs between the nodes"));
        if fk.index != index {
            return Err(mismatch("index"));
        }
        if fk.lambda_ec != lambda_ec || fk.lambda_c != lambda_c {
            return Err(mismatch("leakage"));
        }
        for k in Intensity::ALL {
            if fk.stats.n(Basis::Key, k) != stats.n(Basis::Key, k)
                || fk.stats.n(Basis::Check, k) != stats.n(Basis::Check, k)
                || fk.stats.m(Basis::Check, k) != stats.m(Basis::Check, k)
            {
                return Err(mismatch("detection counts"));
            }
        }
        let (_, result) = key_block(stats, lambda_ec, lambda_c, self.params)?;
        self.closing = Some(Closing { fk, result });
        Ok(())
    }

    fn amplify<S: Read + Write>(&mut self, link: &mut Link<S>, index: u64, out_len: u64, seed: &[u8]) -> Result<(), SessionError> {
        let Closing { fk, mut result } = self
            .closing
            .take()
            .filter(|c| c.fk.index == index)
            .ok_or_else(|| SessionError::Protocol(format!("privacy-amplification seed for unopened block {index}")))?;
        if out_len != result.skl {
            return Err(SessionError::Protocol(format!(
                "block {index}: Bob asks for {out_len} bits, the bound gives {}",
                result.skl
            )));
        }
        let skl = out_len as usize;
        let key = toeplitz_extract(&fk.bits, seed, skl).map_err(|e| SessionError::Protocol(e.to_string()))?;
        let mut packed = Vec::with_capacity(skl.div_ceil(8));
        pack_bits(key.iter().map(|&b| b != 0), &mut packed);
        let digest: [u8; 32] = Sha256::digest(&packed).into();
        link.send(&Message::BlockResult {
            index,
            skl: out_len,
            digest,
        })?;
        let acq = fk.acquisition_time();
        result.wall_time = acq;
        result.skr = if acq > 0.0 { result.skl as f64 / acq } else { 0.0 };
        let usable = &packed[..skl / 8];
        let auth = refill_reservoirs(link, usable, self.cfg.auth_refill_bytes, Sender::Alice);
        self.report.keys.append(
            ManifestEntry {
                index,
                ec_blocks: (*fk.ec_blocks.first().unwrap_or(&0), *fk.ec_blocks.last().unwrap_or(&0)),
                skl: out_len,
                auth_bytes: auth as u64,
                output_bytes: 0,
                sha256: [0; 32],
            },
            &usable[auth..],
        );
        self.report.audit.finite_key_blocks += 1;
        self.report.audit.secret_bits += out_len;
        self.report.finite_key.push(result);
        Ok(())
    }

    fn into_report<S: Read + Write>(mut self, link: &Link<S>) -> AliceReport {
        let budget = self.cfg.pulse_budget();
        let a = &mut self.report.audit;
        a.role = "alice";
        a.pulses = if budget > 0 { self.params.sync_len + budget } else { 0 };
        a.acquisition_seconds = budget as f64 / self.params.pulse_rate;
        a.output_bits = 8 * self.report.keys.bytes.len() as u64;
        let ratio = |e: u64, n: u64| if n > 0 { e as f64 / n as f64 } else { 0.0 };
        let [me, mn, ce, cn] = self.qber_counts;
        a.mean_qber_k = ratio(me, mn);
        a.mean_qber_c = ratio(ce, cn);
        a.mean_skr = if a.acquisition_seconds > 0.0 {
            a.secret_bits as f64 / a.acquisition_seconds
        } else {
            0.0
        };
        fill_link_audit(a, link);
        self.report
    }
}
