//! Message registry and payload layouts. All integers are little-endian;
//! `varint` is unsigned LEB128; bitmaps pack flag i into bit i % 8 of byte
//! i / 8.

use thiserror::Error;

use crate::distill::ParityQuery;
use crate::model::{Basis, DecoyStats, Intensity};
use crate::sifting::{BasisReply, MarkerReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    SyncSeed = 1,
    BasisReveal = 2,
    MarkerReport = 3,
    DecoyStats = 4,
    EcParityReq = 5,
    EcParityResp = 6,
    ConfirmTag = 7,
    PaSeed = 8,
    BlockResult = 9,
    Abort = 10,
}

impl MsgType {
    pub fn from_u8(b: u8) -> Option<MsgType> {
        use MsgType::*;
        [
            SyncSeed,
            BasisReveal,
            MarkerReport,
            DecoyStats,
            EcParityReq,
            EcParityResp,
            ConfirmTag,
            PaSeed,
            BlockResult,
            Abort,
        ]
        .into_iter()
        .find(|t| *t as u8 == b)
    }
}

/// Which node sent a message; a few types have one layout per direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sender {
    Alice,
    Bob,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MessageError {
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed {0:?} payload: {1}")]
    Malformed(MsgType, &'static str),
}

/// Public session parameters announced by Alice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncAnnounce {
    pub sync_seed: u64,
    pub marker_seed: u64,
    pub sync_len: u64,
    /// Digest of the protocol parameters both nodes must share.
    pub config_digest: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfirmEntry {
    pub block: u64,
    pub key_seed: u64,
    pub tag: u64,
    /// Error correction gave up on this block; both sides drop it.
    pub dropped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfirmVerdict {
    pub block: u64,
    pub tag: u64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// A→B: `sync_seed u64 | marker_seed u64 | sync_len u64 | config_digest u64`.
    SyncSeed(SyncAnnounce),
    /// B→A: `block u64 | start f64 | end f64 | count u32 | varint slot deltas
    /// (first absolute) | basis bitmap (1 = check)`.
    BasisReveal {
        block: u64,
        start: f64,
        end: f64,
        slots: Vec<u64>,
        bases: Vec<Basis>,
    },
    /// A→B: `block u64 | count u32 | match bitmap | intensity bitmap over
    /// matches (1 = decoy) | key count u32 | varint key-index deltas`.
    BasisReply { block: u64, reply: BasisReply },
    /// B→A: `block u64 | markers u32 | bitmap | checks u32 | bitmap`.
    MarkerReport { block: u64, report: MarkerReport },
    /// B→A: `index u64 | n[K,C][μ,ν] 4×u64 | m[K,C][μ,ν] 4×u64 |
    /// lambda_ec u64 | lambda_c u64`.
    DecoyStats {
        index: u64,
        stats: DecoyStats,
        lambda_ec: u64,
        lambda_c: u64,
    },
    /// B→A: `round u64 | blocks u32 | per block: id u64 | count u32 |
    /// count × (pass u8 | start u32 | end u32)`.
    EcParityReq { round: u64, blocks: Vec<(u64, Vec<ParityQuery>)> },
    /// A→B: `round u64 | blocks u32 | per block: id u64 | count u32 | bitmap`.
    EcParityResp { round: u64, blocks: Vec<(u64, Vec<u8>)> },
    /// B→A: `count u32 | count × (block u64 | key_seed u64 | tag u64 |
    /// dropped u8)`.
    ConfirmRequest(Vec<ConfirmEntry>),
    /// A→B: `count u32 | count × (block u64 | tag u64 | ok u8)`.
    ConfirmResult(Vec<ConfirmVerdict>),
    /// B→A: `index u64 | out_len u64 | seed bits u64 | packed seed`.
    PaSeed { index: u64, out_len: u64, seed: Vec<u8> },
    /// A→B: `index u64 | skl u64 | sha256 of the final key [32]`.
    BlockResult { index: u64, skl: u64, digest: [u8; 32] },
    /// Either way: `code u8 | reason length u16 | utf-8`. Code 0 closes a
    /// finished session.
    Abort { code: u8, reason: String },
}

pub fn pack_bits<I: IntoIterator<Item = bool>>(flags: I, out: &mut Vec<u8>) {
    let mut byte = 0u8;
    let mut n = 0;
    for f in flags {
        byte |= (f as u8) << (n % 8);
        n += 1;
        if n % 8 == 0 {
            out.push(byte);
            byte = 0;
        }
    }
    if n % 8 != 0 {
        out.push(byte);
    }
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

struct W(Vec<u8>);

impl W {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn varint(&mut self, v: u64) {
        leb128::write::unsigned(&mut self.0, v).expect("writing to a Vec");
    }
    fn bits<I: IntoIterator<Item = bool>>(&mut self, flags: I) {
        pack_bits(flags, &mut self.0);
    }
}

struct R<'a> {
    buf: &'a [u8],
    ty: MsgType,
}

impl<'a> R<'a> {
    fn bad(&self, what: &'static str) -> MessageError {
        MessageError::Malformed(self.ty, what)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], MessageError> {
        if self.buf.len() < n {
            return Err(self.bad("truncated"));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }
    fn u8(&mut self) -> Result<u8, MessageError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, MessageError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize, MessageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, MessageError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, MessageError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn varint(&mut self) -> Result<u64, MessageError> {
        let mut rd = self.buf;
        let v = leb128::read::unsigned(&mut rd).map_err(|_| self.bad("bad varint"))?;
        self.buf = rd;
        Ok(v)
    }
    fn bits(&mut self, n: usize) -> Result<Vec<bool>, MessageError> {
        let bytes = self.take(n.div_ceil(8))?;
        Ok(unpack_bits(bytes, n))
    }
    /// Guards counts read from the wire against absurd allocations.
    fn count(&mut self, min_bytes_each: usize) -> Result<usize, MessageError> {
        let n = self.u32()?;
        if n.saturating_mul(min_bytes_each) > self.buf.len() * 8 {
            return Err(self.bad("count exceeds payload"));
        }
        Ok(n)
    }
    fn done(&self) -> Result<(), MessageError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(self.bad("trailing bytes"))
        }
    }
}

fn deltas(values: &[u64], w: &mut W) {
    let mut prev = 0;
    for (i, &v) in values.iter().enumerate() {
        w.varint(if i == 0 { v } else { v - prev });
        prev = v;
    }
}

fn read_deltas(r: &mut R<'_>, n: usize) -> Result<Vec<u64>, MessageError> {
    let mut out = Vec::with_capacity(n);
    let mut prev = 0u64;
    for i in 0..n {
        let d = r.varint()?;
        let v = if i == 0 { d } else { prev.checked_add(d).ok_or_else(|| r.bad("delta overflow"))? };
        out.push(v);
        prev = v;
    }
    Ok(out)
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::SyncSeed(_) => MsgType::SyncSeed,
            Message::BasisReveal { .. } | Message::BasisReply { .. } => MsgType::BasisReveal,
            Message::MarkerReport { .. } => MsgType::MarkerReport,
            Message::DecoyStats { .. } => MsgType::DecoyStats,
            Message::EcParityReq { .. } => MsgType::EcParityReq,
            Message::EcParityResp { .. } => MsgType::EcParityResp,
            Message::ConfirmRequest(_) | Message::ConfirmResult(_) => MsgType::ConfirmTag,
            Message::PaSeed { .. } => MsgType::PaSeed,
            Message::BlockResult { .. } => MsgType::BlockResult,
            Message::Abort { .. } => MsgType::Abort,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = W(Vec::new());
        match self {
            Message::SyncSeed(s) => {
                w.u64(s.sync_seed);
                w.u64(s.marker_seed);
                w.u64(s.sync_len);
                w.u64(s.config_digest);
            }
            Message::BasisReveal {
                block,
                start,
                end,
                slots,
                bases,
            } => {
                w.u64(*block);
                w.f64(*start);
                w.f64(*end);
                w.u32(slots.len());
                deltas(slots, &mut w);
                w.bits(bases.iter().map(|b| *b == Basis::Check));
            }
            Message::BasisReply { block, reply } => {
                w.u64(*block);
                w.u32(reply.matched.len());
                w.bits(reply.matched.iter().copied());
                w.bits(reply.intensities.iter().map(|k| *k == Intensity::Decoy));
                w.u32(reply.key_indices.len());
                deltas(&reply.key_indices, &mut w);
            }
            Message::MarkerReport { block, report } => {
                w.u64(*block);
                w.u32(report.marker_bits.len());
                w.bits(report.marker_bits.iter().copied());
                w.u32(report.check_bits.len());
                w.bits(report.check_bits.iter().copied());
            }
            Message::DecoyStats {
                index,
                stats,
                lambda_ec,
                lambda_c,
            } => {
                w.u64(*index);
                for b in Basis::ALL {
                    for k in Intensity::ALL {
                        w.u64(stats.n(b, k));
                    }
                }
                for b in Basis::ALL {
                    for k in Intensity::ALL {
                        w.u64(stats.m(b, k));
                    }
                }
                w.u64(*lambda_ec);
                w.u64(*lambda_c);
            }
            Message::EcParityReq { round, blocks } => {
                w.u64(*round);
                w.u32(blocks.len());
                for (id, qs) in blocks {
                    w.u64(*id);
                    w.u32(qs.len());
                    for q in qs {
                        w.u8(q.pass);
                        w.u32(q.start as usize);
                        w.u32(q.end as usize);
                    }
                }
            }
            Message::EcParityResp { round, blocks } => {
                w.u64(*round);
                w.u32(blocks.len());
                for (id, answers) in blocks {
                    w.u64(*id);
                    w.u32(answers.len());
                    w.bits(answers.iter().map(|&a| a == 1));
                }
            }
            Message::ConfirmRequest(entries) => {
                w.u32(entries.len());
                for e in entries {
                    w.u64(e.block);
                    w.u64(e.key_seed);
                    w.u64(e.tag);
                    w.u8(e.dropped as u8);
                }
            }
            Message::ConfirmResult(entries) => {
                w.u32(entries.len());
                for e in entries {
                    w.u64(e.block);
                    w.u64(e.tag);
                    w.u8(e.ok as u8);
                }
            }
            Message::PaSeed { index, out_len, seed } => {
                w.u64(*index);
                w.u64(*out_len);
                w.u64(seed.len() as u64);
                w.bits(seed.iter().map(|&b| b == 1));
            }
            Message::BlockResult { index, skl, digest } => {
                w.u64(*index);
                w.u64(*skl);
                w.0.extend_from_slice(digest);
            }
            Message::Abort { code, reason } => {
                w.u8(*code);
                let r = &reason.as_bytes()[..reason.len().min(u16::MAX as usize)];
                w.u16(r.len() as u16);
                w.0.extend_from_slice(r);
            }
        }
        w.0
    }

    pub fn decode(msg_type: u8, payload: &[u8], sender: Sender) -> Result<Message, MessageError> {
        let ty = MsgType::from_u8(msg_type).ok_or(MessageError::UnknownType(msg_type))?;
        let mut r = R { buf: payload, ty };
        let msg = match (ty, sender) {
            (MsgType::SyncSeed, _) => Message::SyncSeed(SyncAnnounce {
                sync_seed: r.u64()?,
                marker_seed: r.u64()?,
                sync_len: r.u64()?,
                config_digest: r.u64()?,
            }),
            (MsgType::BasisReveal, Sender::Bob) => {
                let block = r.u64()?;
                let start = r.f64()?;
                let end = r.f64()?;
                let n = r.count(9)?;
                let slots = read_deltas(&mut r, n)?;
                let bases = r
                    .bits(n)?
                    .into_iter()
                    .map(|c| if c { Basis::Check } else { Basis::Key })
                    .collect();
                Message::BasisReveal {
                    block,
                    start,
                    end,
                    slots,
                    bases,
                }
            }
            (MsgType::BasisReveal, Sender::Alice) => {
                let block = r.u64()?;
                let n = r.count(1)?;
                let matched = r.bits(n)?;
                let n_matched = matched.iter().filter(|&&m| m).count();
                let intensities = r
                    .bits(n_matched)?
                    .into_iter()
                    .map(|d| if d { Intensity::Decoy } else { Intensity::Signal })
                    .collect();
                let nk = r.count(8)?;
                if nk > n_matched {
                    return Err(r.bad("more key indices than matches"));
                }
                let key_indices = read_deltas(&mut r, nk)?;
                Message::BasisReply {
                    block,
                    reply: BasisReply {
                        matched,
                        intensities,
                        key_indices,
                    },
                }
            }
            (MsgType::MarkerReport, _) => {
                let block = r.u64()?;
                let nm = r.count(1)?;
                let marker_bits = r.bits(nm)?;
                let nc = r.count(1)?;
                let check_bits = r.bits(nc)?;
                Message::MarkerReport {
                    block,
                    report: MarkerReport {
                        marker_bits,
                        check_bits,
                    },
                }
            }
            (MsgType::DecoyStats, _) => {
                let index = r.u64()?;
                let mut n = [[0u64; 2]; 2];
                let mut m = [[0u64; 2]; 2];
                for row in n.iter_mut() {
                    for v in row.iter_mut() {
                        *v = r.u64()?;
                    }
                }
                for row in m.iter_mut() {
                    for v in row.iter_mut() {
                        *v = r.u64()?;
                    }
                }
                let stats = DecoyStats::from_counts(n, m).map_err(|_| r.bad("errors exceed detections"))?;
                Message::DecoyStats {
                    index,
                    stats,
                    lambda_ec: r.u64()?,
                    lambda_c: r.u64()?,
                }
            }
            (MsgType::EcParityReq, _) => {
                let round = r.u64()?;
                let nb = r.count(96)?;
                let mut blocks = Vec::with_capacity(nb);
                for _ in 0..nb {
                    let id = r.u64()?;
                    let nq = r.count(72)?;
                    let mut qs = Vec::with_capacity(nq);
                    for _ in 0..nq {
                        qs.push(ParityQuery {
                            pass: r.u8()?,
                            start: r.u32()? as u32,
                            end: r.u32()? as u32,
                        });
                    }
                    blocks.push((id, qs));
                }
                Message::EcParityReq { round, blocks }
            }
            (MsgType::EcParityResp, _) => {
                let round = r.u64()?;
                let nb = r.count(96)?;
                let mut blocks = Vec::with_capacity(nb);
                for _ in 0..nb {
                    let id = r.u64()?;
                    let n = r.count(1)?;
                    let answers = r.bits(n)?.into_iter().map(|b| b as u8).collect();
                    blocks.push((id, answers));
                }
                Message::EcParityResp { round, blocks }
            }
            (MsgType::ConfirmTag, Sender::Bob) => {
                let n = r.count(200)?;
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(ConfirmEntry {
                        block: r.u64()?,
                        key_seed: r.u64()?,
                        tag: r.u64()?,
                        dropped: match r.u8()? {
                            0 => false,
                            1 => true,
                            _ => return Err(r.bad("dropped flag")),
                        },
                    });
                }
                Message::ConfirmRequest(v)
            }
            (MsgType::ConfirmTag, Sender::Alice) => {
                let n = r.count(136)?;
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(ConfirmVerdict {
                        block: r.u64()?,
                        tag: r.u64()?,
                        ok: match r.u8()? {
                            0 => false,
                            1 => true,
                            _ => return Err(r.bad("status byte")),
                        },
                    });
                }
                Message::ConfirmResult(v)
            }
            (MsgType::PaSeed, _) => {
                let index = r.u64()?;
                let out_len = r.u64()?;
                let n = r.u64()? as usize;
                if n.div_ceil(8) > r.buf.len() {
                    return Err(r.bad("seed length"));
                }
                let seed = r.bits(n)?.into_iter().map(|b| b as u8).collect();
                Message::PaSeed { index, out_len, seed }
            }
            (MsgType::BlockResult, _) => Message::BlockResult {
                index: r.u64()?,
                skl: r.u64()?,
                digest: r.take(32)?.try_into().unwrap(),
            },
            (MsgType::Abort, _) => {
                let code = r.u8()?;
                let n = r.u16()? as usize;
                let reason = String::from_utf8_lossy(r.take(n)?).into_owned();
                Message::Abort { code, reason }
            }
        };
        r.done()?;
        Ok(msg)
    }
}
