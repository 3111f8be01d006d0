//! Binary event-stream dump for offline analysis.
//!
//! Header: magic `QSIM`, version (u32), record count (u64). Each record is a
//! timestamp in picoseconds (u64), the origin code (u8) and the slot (u64).
//! Everything is little-endian.

use std::io::{self, Read, Write};

use super::detector::{DetectionEvent, Origin};

pub const MAGIC: [u8; 4] = *b"QSIM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpRecord {
    pub timestamp_ps: u64,
    pub origin: Origin,
    pub slot: u64,
}

impl From<&DetectionEvent> for DumpRecord {
    fn from(e: &DetectionEvent) -> Self {
        Self {
            timestamp_ps: (e.timestamp * 1e12).round().max(0.0) as u64,
            origin: e.origin,
            slot: e.slot,
        }
    }
}

pub fn write_dump<W: Write>(mut w: W, events: &[DetectionEvent]) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(events.len() as u64).to_le_bytes())?;
    for e in events {
        let r = DumpRecord::from(e);
        w.write_all(&r.timestamp_ps.to_le_bytes())?;
        w.write_all(&[r.origin.code()])?;
        w.write_all(&r.slot.to_le_bytes())?;
    }
    w.flush()
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

pub fn read_dump<R: Read>(mut r: R) -> io::Result<Vec<DumpRecord>> {
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head)?;
    if head[..4] != MAGIC {
        return Err(invalid("not a QSIM dump".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(invalid(format!("unsupported dump version {version}")));
    }
    let count = u64::from_le_bytes(head[8..16].try_into().unwrap());
    let mut out = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut rec = [0u8; RECORD_LEN];
    for i in 0..count {
        r.read_exact(&mut rec)?;
        let origin = Origin::from_code(rec[8]).ok_or_else(|| invalid(format!("record {i}: bad origin {}", rec[8])))?;
        out.push(DumpRecord {
            timestamp_ps: u64::from_le_bytes(rec[..8].try_into().unwrap()),
            origin,
            slot: u64::from_le_bytes(rec[9..].try_into().unwrap()),
        });
    }
    Ok(out)
}
