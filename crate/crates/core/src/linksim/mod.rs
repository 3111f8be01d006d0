//! Simulated transmitter, fiber channel and time-tagged detector.

pub mod calibrate;
pub mod channel;
pub mod detector;
pub mod dump;
pub mod source;
pub mod stream;

pub use calibrate::{calibrate_background, key_basis_tally, KeyBasisTally};
pub use channel::{ChannelParams, DriftProcess, FIELD_BACKGROUND_RATE};
pub use detector::{demux_timetag, DemuxedEvent, DetectionEvent, Origin};
pub use dump::{read_dump, write_dump, DumpRecord};
pub use source::{generate_pulse_train, AliceSequence, MarkerSchedule, PulseRecord, SourceSeeds};
pub use stream::LinkSimulator;
