//! Clock recovery, preamble alignment, markers and the alignment monitor.

use thiserror::Error;

pub mod alignment;
pub mod clock;
pub mod marker;
pub mod offset;

pub use alignment::{drift_feedback_step, AlignmentState, RealignCommand};
pub use clock::{fit_period, recover_period, ClockTracker, PeriodFit};
pub use marker::{marker_extract, KeyBasisItem, MarkerObservation};
pub use offset::{recover_offset, ClockEstimate, OffsetSearch};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("synchronization failed: {0}")]
    SyncFailed(String),
    #[error("key-basis ordinal {key_index} at slot {slot} is inconsistent with the marker schedule")]
    ScheduleMismatch { slot: u64, key_index: u64 },
}
