//! Cascade error correction.
//!
//! Bob drives the protocol: [`CascadeSession`] emits rounds of parity
//! queries over ranges of a per-pass permutation and Alice answers them
//! with a [`CascadeResponder`]. Binary search only asks for the left half
//! of a range; the right half follows from the parent parity. Parities are
//! cached so that cascaded searches in earlier passes reuse them.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::{derive_seed, stream};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CascadeError {
    #[error("disclosed {disclosed} parity bits on a block of {len} bits")]
    EcAborted { disclosed: u64, len: usize },
    #[error("blocks differ in length ({alice} vs {bob})")]
    LengthMismatch { alice: usize, bob: usize },
    #[error("expected {expected} parity answers, got {got}")]
    AnswerCount { expected: usize, got: usize },
    #[error("query out of range")]
    BadQuery,
}

/// Parity of positions `start..end` of the permutation used in `pass`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParityQuery {
    pub pass: u8,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeConfig {
    pub passes: u32,
    /// Top block size is ⌈top_factor / qber⌉.
    pub top_factor: f64,
    /// Abort once disclosure exceeds this fraction of the block.
    pub max_disclosed_fraction: f64,
    /// Floor applied to the QBER estimate (an estimate of 0 would give an
    /// unbounded block size).
    pub min_qber: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            passes: 4,
            top_factor: 0.73,
            max_disclosed_fraction: 0.9,
            min_qber: 0.002,
        }
    }
}

impl CascadeConfig {
    pub fn top_block_size(&self, qber: f64) -> usize {
        let q = qber.max(self.min_qber);
        ((self.top_factor / q).ceil() as usize).max(1)
    }
}

/// Block sizes and permutations of every pass, derived from a public seed.
#[derive(Debug, Clone)]
pub struct Layout {
    n: usize,
    sizes: Vec<usize>,
    perms: Vec<Vec<u32>>,
    inverse: Vec<Vec<u32>>,
}

impl Layout {
    pub fn new(n: usize, top_block: usize, passes: u32, seed: u64) -> Self {
        let mut sizes = Vec::new();
        let mut perms = Vec::new();
        let mut inverse = Vec::new();
        for p in 0..passes {
            sizes.push(top_block.saturating_mul(1 << p).min(n).max(1));
            let mut perm: Vec<u32> = (0..n as u32).collect();
            if p > 0 {
                perm.shuffle(&mut stream(derive_seed(seed, &format!("cascade/pass{p}"))));
            }
            let mut inv = vec![0u32; n];
            for (i, &x) in perm.iter().enumerate() {
                inv[x as usize] = i as u32;
            }
            perms.push(perm);
            inverse.push(inv);
        }
        Self {
            n,
            sizes,
            perms,
            inverse,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn passes(&self) -> usize {
        self.sizes.len()
    }

    pub fn block_size(&self, pass: usize) -> usize {
        self.sizes[pass]
    }

    fn blocks(&self, pass: usize) -> usize {
        self.n.div_ceil(self.sizes[pass])
    }

    fn block_range(&self, pass: usize, block: usize) -> (u32, u32) {
        let k = self.sizes[pass];
        let lo = block * k;
        (lo as u32, (lo + k).min(self.n) as u32)
    }

    fn block_of(&self, pass: usize, pos: usize) -> usize {
        self.inverse[pass][pos] as usize / self.sizes[pass]
    }

    pub fn parity(&self, bits: &[u8], q: &ParityQuery) -> u8 {
        let perm = &self.perms[q.pass as usize];
        perm[q.start as usize..q.end as usize]
            .iter()
            .fold(0u8, |a, &i| a ^ (bits[i as usize] & 1))
    }
}

/// Alice's side: answers parity queries on her block.
#[derive(Debug, Clone)]
pub struct CascadeResponder {
    bits: Vec<u8>,
    layout: Layout,
}

impl CascadeResponder {
    pub fn new(bits: Vec<u8>, layout: Layout) -> Self {
        Self { bits, layout }
    }

    pub fn answer(&self, queries: &[ParityQuery]) -> Result<Vec<u8>, CascadeError> {
        queries
            .iter()
            .map(|q| {
                if (q.pass as usize) < self.layout.passes() && q.start < q.end && q.end as usize <= self.layout.n {
                    Ok(self.layout.parity(&self.bits, q))
                } else {
                    Err(CascadeError::BadQuery)
                }
            })
            .collect()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }
}

#[derive(Debug, Clone, Copy)]
struct Search {
    pass: u8,
    lo: u32,
    hi: u32,
    block: u32,
}

/// Bob's side of one block.
#[derive(Debug, Clone)]
pub struct CascadeSession {
    bits: Vec<u8>,
    layout: Layout,
    cache: HashMap<(u8, u32, u32), u8>,
    searches: Vec<Search>,
    searching: Vec<Vec<bool>>,
    touched: BTreeSet<(u8, u32)>,
    pass: Option<usize>,
    pending: Vec<ParityQuery>,
    transcript: Vec<(ParityQuery, u8)>,
    max_disclosed: u64,
    done: bool,
}

impl CascadeSession {
    pub fn new(bits: Vec<u8>, layout: Layout, cfg: &CascadeConfig) -> Self {
        assert_eq!(bits.len(), layout.len());
        let searching = (0..layout.passes()).map(|p| vec![false; layout.blocks(p)]).collect();
        let max_disclosed = (cfg.max_disclosed_fraction * bits.len() as f64) as u64;
        Self {
            bits,
            layout,
            cache: HashMap::new(),
            searches: Vec::new(),
            searching,
            touched: BTreeSet::new(),
            pass: None,
            pending: Vec::new(),
            transcript: Vec::new(),
            max_disclosed,
            done: false,
        }
    }

    pub fn disclosed_bits(&self) -> u64 {
        self.transcript.len() as u64
    }

    pub fn transcript(&self) -> &[(ParityQuery, u8)] {
        &self.transcript
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<u8> {
        self.bits
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Next round of queries, or `None` once all passes are complete.
    pub fn next_queries(&mut self) -> Result<Option<Vec<ParityQuery>>, CascadeError> {
        if !self.pending.is_empty() {
            return Ok(Some(self.pending.clone()));
        }
        if self.done {
            return Ok(None);
        }
        loop {
            self.rescan_touched();
            let mut queries = Vec::new();
            let mut i = 0;
            while i < self.searches.len() {
                match self.advance(i) {
                    Step::Query(q) => {
                        queries.push(q);
                        i += 1;
                    }
                    Step::Finished => {
                        let s = self.searches.swap_remove(i);
                        self.searching[s.pass as usize][s.block as usize] = false;
                    }
                }
            }
            if !queries.is_empty() {
                self.pending = queries.clone();
                return Ok(Some(queries));
            }
            if !self.searches.is_empty() || !self.touched.is_empty() {
                continue;
            }
            let next = self.pass.map_or(0, |p| p + 1);
            if next >= self.layout.passes() || self.layout.is_empty() {
                self.done = true;
                return Ok(None);
            }
            self.pass = Some(next);
            let queries: Vec<ParityQuery> = (0..self.layout.blocks(next))
                .map(|b| {
                    let (lo, hi) = self.layout.block_range(next, b);
                    self.touched.insert((next as u8, b as u32));
                    ParityQuery {
                        pass: next as u8,
                        start: lo,
                        end: hi,
                    }
                })
                .collect();
            self.pending = queries.clone();
            return Ok(Some(queries));
        }
    }

    /// Records Alice's answers to the last round.
    pub fn apply_answers(&mut self, answers: &[u8]) -> Result<(), CascadeError> {
        if answers.len() != self.pending.len() {
            return Err(CascadeError::AnswerCount {
                expected: self.pending.len(),
                got: answers.len(),
            });
        }
        for (q, &a) in self.pending.drain(..).zip(answers) {
            self.cache.insert((q.pass, q.start, q.end), a & 1);
            self.transcript.push((q, a & 1));
        }
        if self.disclosed_bits() > self.max_disclosed {
            return Err(CascadeError::EcAborted {
                disclosed: self.disclosed_bits(),
                len: self.bits.len(),
            });
        }
        Ok(())
    }

    fn bob_parity(&self, pass: u8, lo: u32, hi: u32) -> u8 {
        self.layout.parity(
            &self.bits,
            &ParityQuery {
                pass,
                start: lo,
                end: hi,
            },
        )
    }

    fn rescan_touched(&mut self) {
        let touched = std::mem::take(&mut self.touched);
        for (pass, block) in touched {
            if self.searching[pass as usize][block as usize] {
                continue;
            }
            let (lo, hi) = self.layout.block_range(pass as usize, block as usize);
            let Some(&alice) = self.cache.get(&(pass, lo, hi)) else {
                continue;
            };
            if alice != self.bob_parity(pass, lo, hi) {
                self.searching[pass as usize][block as usize] = true;
                self.searches.push(Search { pass, lo, hi, block });
            }
        }
    }

    fn advance(&mut self, i: usize) -> Step {
        let mut s = self.searches[i];
        let parent = self.cache[&(s.pass, s.lo, s.hi)];
        if parent == self.bob_parity(s.pass, s.lo, s.hi) {
            // an earlier flip landed in this range; recheck the whole block
            self.touched.insert((s.pass, s.block));
            return Step::Finished;
        }
        loop {
            if s.hi - s.lo == 1 {
                let pos = self.layout.perms[s.pass as usize][s.lo as usize] as usize;
                self.bits[pos] ^= 1;
                let upto = self.pass.unwrap_or(0);
                for p in 0..=upto {
                    self.touched.insert((p as u8, self.layout.block_of(p, pos) as u32));
                }
                return Step::Finished;
            }
            let mid = s.lo + (s.hi - s.lo) / 2;
            let Some(&left) = self.cache.get(&(s.pass, s.lo, mid)) else {
                self.searches[i] = s;
                return Step::Query(ParityQuery {
                    pass: s.pass,
                    start: s.lo,
                    end: mid,
                });
            };
            let parent = self.cache[&(s.pass, s.lo, s.hi)];
            self.cache.entry((s.pass, mid, s.hi)).or_insert(parent ^ left);
            if left != self.bob_parity(s.pass, s.lo, mid) {
                s.hi = mid;
            } else {
                s.lo = mid;
            }
        }
    }
}

enum Step {
    Query(ParityQuery),
    Finished,
}

/// Runs Cascade locally between two blocks; returns Bob's corrected block
/// and the number of disclosed parity bits.
pub fn cascade_reconcile(
    alice: &[u8],
    bob: &[u8],
    qber_estimate: f64,
    seed: u64,
    cfg: &CascadeConfig,
) -> Result<(Vec<u8>, u64), CascadeError> {
    if alice.len() != bob.len() {
        return Err(CascadeError::LengthMismatch {
            alice: alice.len(),
            bob: bob.len(),
        });
    }
    let layout = Layout::new(alice.len(), cfg.top_block_size(qber_estimate), cfg.passes, seed);
    let responder = CascadeResponder::new(alice.to_vec(), layout.clone());
    let mut session = CascadeSession::new(bob.to_vec(), layout, cfg);
    while let Some(q) = session.next_queries()? {
        let a = responder.answer(&q)?;
        session.apply_answers(&a)?;
    }
    let disclosed = session.disclosed_bits();
    Ok((session.into_bits(), disclosed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::binary_entropy;
    use rand::Rng;

    fn bits(s: &str) -> Vec<u8> {
        s.bytes().map(|c| c - b'0').collect()
    }

    #[test]
    fn eight_bit_trace() {
        let cfg = CascadeConfig {
            passes: 1,
            ..Default::default()
        };
        let alice = bits("10110010");
        let bob = bits("10100010");
        let layout = Layout::new(8, 4, 1, 0);
        let responder = CascadeResponder::new(alice.clone(), layout.clone());
        let mut s = CascadeSession::new(bob, layout, &cfg);
        let mut asked = Vec::new();
        while let Some(q) = s.next_queries().unwrap() {
            asked.extend(q.iter().map(|q| (q.start, q.end)));
            s.apply_answers(&responder.answer(&q).unwrap()).unwrap();
        }
        // top blocks [0..3] and [4..7], then [0..1], then {2}; [2..3] and
        // {3} follow from the parents
        assert_eq!(asked, vec![(0, 4), (4, 8), (0, 2), (2, 3)]);
        assert_eq!(s.bits(), &alice[..]);
        assert_eq!(s.disclosed_bits(), 4);
    }

    #[test]
    fn identical_blocks_disclose_only_top_parities() {
        let cfg = CascadeConfig::default();
        let a: Vec<u8> = (0..5000).map(|i| ((i * 7919) % 13 < 6) as u8).collect();
        let (out, disclosed) = cascade_reconcile(&a, &a, 0.02, 1, &cfg).unwrap();
        assert_eq!(out, a);
        let layout = Layout::new(5000, cfg.top_block_size(0.02), 4, 1);
        let tops: usize = (0..4).map(|p| layout.blocks(p)).sum();
        assert_eq!(disclosed, tops as u64);
    }

    #[test]
    fn corrects_typical_blocks_efficiently() {
        let cfg = CascadeConfig::default();
        let mut rng = stream(8);
        let n = 10_000;
        let q = 0.023;
        let mut total = 0u64;
        let trials = 100;
        for t in 0..trials {
            let a: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let b: Vec<u8> = a.iter().map(|&x| x ^ (rng.gen::<f64>() < q) as u8).collect();
            let (out, d) = cascade_reconcile(&a, &b, q, t, &cfg).unwrap();
            let residual = out.iter().zip(&a).filter(|(x, y)| x != y).count();
            assert!(residual <= 4, "trial {t}: {residual} residual errors");
            total += d;
        }
        let mean = total as f64 / trials as f64;
        let bound = 1.45 * n as f64 * binary_entropy(q).unwrap();
        assert!(mean <= bound, "mean disclosure {mean} above {bound}");
    }

    #[test]
    fn transcript_counts_disclosure() {
        let cfg = CascadeConfig::default();
        let mut rng = stream(3);
        let a: Vec<u8> = (0..4096).map(|_| rng.gen_range(0..2)).collect();
        let b: Vec<u8> = a.iter().map(|&x| x ^ (rng.gen::<f64>() < 0.04) as u8).collect();
        let layout = Layout::new(a.len(), cfg.top_block_size(0.04), 4, 9);
        let responder = CascadeResponder::new(a.clone(), layout.clone());
        let mut s = CascadeSession::new(b, layout.clone(), &cfg);
        while let Some(q) = s.next_queries().unwrap() {
            s.apply_answers(&responder.answer(&q).unwrap()).unwrap();
        }
        assert_eq!(s.disclosed_bits(), s.transcript().len() as u64);
        for (q, p) in s.transcript() {
            assert_eq!(layout.parity(&a, q), *p);
        }
    }

    #[test]
    fn gross_mismatch_aborts() {
        let cfg = CascadeConfig::default();
        let mut rng = stream(4);
        let a: Vec<u8> = (0..2048).map(|_| rng.gen_range(0..2)).collect();
        let b: Vec<u8> = (0..2048).map(|_| rng.gen_range(0..2)).collect();
        assert!(matches!(
            cascade_reconcile(&a, &b, 0.01, 0, &cfg),
            Err(CascadeError::EcAborted { .. })
        ));
    }

    #[test]
    fn wrong_answer_count_rejected() {
        let cfg = CascadeConfig::default();
        let layout = Layout::new(100, 10, 4, 0);
        let mut s = CascadeSession::new(vec![0; 100], layout, &cfg);
        let q = s.next_queries().unwrap().unwrap();
        assert_eq!(q.len(), 10);
        assert!(s.apply_answers(&[0; 3]).is_err());
    }
}
