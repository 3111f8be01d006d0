//! Single-use pool of authentication key material.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("authentication key reservoir empty: {requested} bytes requested, {available} available")]
pub struct ReservoirEmpty {
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Preshared,
    Qkd,
}

/// Byte pool consumed front to back. Every byte has an absolute position;
/// a draw covers positions `[cursor, cursor + n)` and advances the cursor.
#[derive(Debug, Clone)]
pub struct KeyReservoir {
    pool: VecDeque<u8>,
    /// Absolute position of `pool[0]`.
    cursor: u64,
    /// Provenance boundaries: (first position, provenance).
    segments: Vec<(u64, Provenance)>,
    low_water: usize,
    consumed: [u64; 2],
    refilled: u64,
    draws: Vec<(u64, usize)>,
    record_draws: bool,
}

impl KeyReservoir {
    pub fn new(preshared: Vec<u8>, low_water: usize) -> Self {
        Self {
            pool: preshared.into(),
            cursor: 0,
            segments: vec![(0, Provenance::Preshared)],
            low_water,
            consumed: [0; 2],
            refilled: 0,
            draws: Vec::new(),
            record_draws: false,
        }
    }

    /// Keeps the position of every draw for audits.
    pub fn with_audit(mut self) -> Self {
        self.record_draws = true;
        self
    }

    pub fn available(&self) -> usize {
        self.pool.len()
    }

    pub fn low_water(&self) -> usize {
        self.low_water
    }

    pub fn needs_refill(&self) -> bool {
        self.pool.len() < self.low_water
    }

    /// Total bytes drawn so far.
    pub fn consumed(&self) -> u64 {
        self.consumed[0] + self.consumed[1]
    }

    pub fn consumed_from(&self, p: Provenance) -> u64 {
        self.consumed[p as usize]
    }

    /// Bytes added from produced keys.
    pub fn refilled(&self) -> u64 {
        self.refilled
    }

    /// Positions and lengths of all recorded draws.
    pub fn draws(&self) -> &[(u64, usize)] {
        &self.draws
    }

    fn provenance_at(&self, pos: u64) -> Provenance {
        let i = self.segments.partition_point(|&(start, _)| start <= pos);
        self.segments[i - 1].1
    }

    pub fn draw(&mut self, n: usize) -> Result<Vec<u8>, ReservoirEmpty> {
        if n > self.pool.len() {
            return Err(ReservoirEmpty {
                requested: n,
                available: self.pool.len(),
            });
        }
        for k in 0..n as u64 {
            let p = self.provenance_at(self.cursor + k);
            self.consumed[p as usize] += 1;
        }
        if self.record_draws {
            self.draws.push((self.cursor, n));
        }
        self.cursor += n as u64;
        Ok(self.pool.drain(..n).collect())
    }

    pub fn draw_array<const N: usize>(&mut self) -> Result<[u8; N], ReservoirEmpty> {
        let v = self.draw(N)?;
        Ok(v.try_into().expect("exact length"))
    }

    pub fn refill(&mut self, bytes: &[u8], provenance: Provenance) {
        if bytes.is_empty() {
            return;
        }
        let end = self.cursor + self.pool.len() as u64;
        if self.segments.last().map(|s| s.1) != Some(provenance) {
            self.segments.push((end, provenance));
        }
        if provenance == Provenance::Qkd {
            self.refilled += bytes.len() as u64;
        }
        self.pool.extend(bytes);
    }
}
