//! Authenticated classical channel: framing, Wegman-Carter tags, the key
//! reservoir, the message registry and the transports.

pub mod frame;
pub mod mac;
pub mod messages;
pub mod reservoir;
pub mod transport;

pub use frame::{decode_frame, encode_frame, Frame, FrameError, FrameKey, MAX_PAYLOAD};
pub use mac::{gf128_mul, mac_tag, poly_hash};
pub use messages::{ConfirmEntry, ConfirmVerdict, Message, MessageError, MsgType, Sender, SyncAnnounce};
pub use reservoir::{KeyReservoir, Provenance, ReservoirEmpty};
pub use transport::{memory_pair, tcp_stream, DirectionKeys, Link, LinkError, LinkStats, MemoryStream};
