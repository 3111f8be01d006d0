//! The simulator stage: runs the optical link one error-correction block at
//! a time and hands the receiver its time tags. Realignment commands come
//! back from the receiver's alignment monitor and take effect two blocks
//! after the block that triggered them.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread::JoinHandle;

use crate::linksim::{ChannelParams, LinkSimulator};
use crate::model::{Basis, ProtocolParams};

/// Blocks the simulator may run ahead of the receiver's feedback.
pub const FEEDBACK_LAG: u64 = 2;

/// Time tags of one block of slots. Chunk 0 also holds the preamble.
#[derive(Debug, Clone, PartialEq)]
pub struct SimChunk {
    pub index: u64,
    pub first_slot: u64,
    pub end_slot: u64,
    pub tags: Vec<f64>,
    /// Ground truth at the end of the chunk, for audits only.
    pub true_error_k: f64,
    pub realigning: bool,
}

/// Slot range `[lo, hi)` of acquisition block `b`.
pub fn block_slots(params: &ProtocolParams, budget: u64, b: u64) -> (u64, u64) {
    let s = params.slots_per_ec_block();
    let lo = params.sync_len + (b * s).min(budget);
    let hi = params.sync_len + ((b + 1) * s).min(budget);
    (lo, hi)
}

pub fn block_count(params: &ProtocolParams, budget: u64) -> u64 {
    budget.div_ceil(params.slots_per_ec_block())
}

pub struct SimStage {
    pub chunks: Receiver<SimChunk>,
    pub feedback: SyncSender<bool>,
    pub handle: JoinHandle<()>,
}

/// Starts the simulator thread for `budget` post-preamble slots.
pub fn spawn(
    params: ProtocolParams,
    ch: ChannelParams,
    seed: u64,
    budget: u64,
    drift_spike: Option<(f64, f64)>,
) -> SimStage {
    let (chunk_tx, chunks) = sync_channel(1);
    let (feedback, feedback_rx) = sync_channel::<bool>(FEEDBACK_LAG as usize + 1);
    let handle = std::thread::Builder::new()
        .name("link-sim".into())
        .spawn(move || {
            let mut sim = LinkSimulator::new(&params, &ch, seed);
            if let Some((at, delta)) = drift_spike {
                sim.inject_drift(at, delta);
            }
            let blocks = block_count(&params, budget);
            let mut events = Vec::new();
            for b in 0..blocks {
                if b >= FEEDBACK_LAG {
                    match feedback_rx.recv() {
                        Ok(true) => {
                            sim.realign();
                        }
                        Ok(false) => {}
                        Err(_) => return,
                    }
                }
                let first_slot = sim.slot();
                let (_, hi) = block_slots(&params, budget, b);
                events.clear();
                sim.run_until(hi, &mut events);
                if b + 1 == blocks {
                    sim.finish(&mut events);
                }
                let chunk = SimChunk {
                    index: b,
                    first_slot,
                    end_slot: hi,
                    tags: events.iter().map(|e| e.timestamp).collect(),
                    true_error_k: sim.error_probability(Basis::Key),
                    realigning: sim.is_realigning(),
                };
                if chunk_tx.send(chunk).is_err() {
                    return;
                }
            }
        })
        .expect("spawn simulator thread");
    SimStage {
        chunks,
        feedback,
        handle,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_ranges_tile_the_budget() {
        let p = ProtocolParams {
            pulse_rate: 1e6,
            sync_len: 1000,
            ..Default::default()
        };
        assert_eq!(block_count(&p, 2_500_000), 3);
        assert_eq!(block_slots(&p, 2_500_000, 0), (1000, 1_001_000));
        assert_eq!(block_slots(&p, 2_500_000, 2), (2_001_000, 2_501_000));
        assert_eq!(block_count(&p, 0), 0);
    }
}
