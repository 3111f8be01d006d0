//! Node executables as library code: the transmitter and receiver session
//! state machines, the simulator stage co-located with the receiver, the
//! single-process orchestrator, the TCP daemons and their outputs.

pub mod alice;
pub mod bob;
pub mod config;
pub mod output;
pub mod run;
pub mod sim;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classical::{FrameError, KeyReservoir, LinkError, DirectionKeys};
use crate::distill::CascadeError;
use crate::finitekey::FiniteKeyError;
use crate::rng::{derive_seed, stream};
use crate::sifting::SiftError;
use crate::synchro::SyncError;

pub use config::{load_config, parse_config, Budget, ConfigError, FrameFault, Role, SessionConfig};
pub use output::{AuditSummary, EcLogEntry, MetricsRecord, RealignEvent};
pub use run::{run_alice_daemon, run_bob_daemon, run_orchestrator, run_session, SessionReport};

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 2;
    pub const SYNC_FAILED: u8 = 3;
    pub const DESYNC: u8 = 4;
    pub const TAG_MISMATCH: u8 = 5;
    pub const RESERVOIR_EMPTY: u8 = 6;
    pub const IO: u8 = 7;
    pub const PEER_ABORT: u8 = 8;
    pub const INTERNAL: u8 = 9;
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("configuration differs from the peer's")]
    ConfigMismatch,
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("desynchronized in block {block}: {errors} of {markers} markers disagree")]
    Desync { block: u64, errors: u64, markers: u64 },
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl SessionError {
    pub fn exit_code(&self) -> u8 {
        match self {
            SessionError::Config(_) | SessionError::ConfigMismatch => exit::CONFIG,
            SessionError::Sync(_) => exit::SYNC_FAILED,
            SessionError::Desync { .. } => exit::DESYNC,
            SessionError::Io(_) => exit::IO,
            SessionError::Protocol(_) => exit::INTERNAL,
            SessionError::Link(e) => match e {
                LinkError::Frame(_) => exit::TAG_MISMATCH,
                LinkError::Reservoir(_) => exit::RESERVOIR_EMPTY,
                LinkError::Io(_) => exit::IO,
                LinkError::PeerAbort { code, .. } => match *code {
                    exit::CONFIG..=exit::IO | exit::INTERNAL => *code,
                    _ => exit::PEER_ABORT,
                },
                LinkError::Message(_) | LinkError::Unexpected(_) => exit::INTERNAL,
            },
        }
    }

    /// Whether the peer already knows (it sent the abort, or the channel
    /// itself is gone).
    pub(crate) fn peer_informed(&self) -> bool {
        matches!(
            self,
            SessionError::Link(LinkError::PeerAbort { .. }) | SessionError::Link(LinkError::Io(_))
        )
    }
}

impl From<SiftError> for SessionError {
    fn from(e: SiftError) -> Self {
        match e {
            SiftError::DesyncDetected { errors, markers } => SessionError::Desync {
                block: u64::MAX,
                errors,
                markers,
            },
            SiftError::Schedule(s) => SessionError::Sync(s),
            e => SessionError::Protocol(e.to_string()),
        }
    }
}

impl From<CascadeError> for SessionError {
    fn from(e: CascadeError) -> Self {
        SessionError::Protocol(e.to_string())
    }
}

impl From<FiniteKeyError> for SessionError {
    fn from(e: FiniteKeyError) -> Self {
        SessionError::Protocol(e.to_string())
    }
}

impl From<FrameError> for SessionError {
    fn from(e: FrameError) -> Self {
        SessionError::Link(LinkError::Frame(e))
    }
}

fn unexpected(what: &str, got: &crate::classical::Message) -> SessionError {
    SessionError::Link(LinkError::Unexpected(format!("{got:?} while waiting for {what}").chars().take(200).collect()))
}

/// Session identifier carried in every frame.
pub fn session_id(seed: u64) -> u64 {
    derive_seed(seed, "session")
}

/// Digest of the protocol parameters both nodes must agree on.
pub fn config_digest(cfg: &SessionConfig) -> u64 {
    let h = Sha256::digest(format!("{:?}", cfg.protocol).as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("digest has 32 bytes"))
}

/// Pre-shared key: the file contents, or bytes expanded from the seed.
/// The first half authenticates Alice to Bob, the second half Bob to Alice.
pub fn preshared_key(cfg: &SessionConfig) -> Result<Vec<u8>, SessionError> {
    match &cfg.psk_file {
        Some(path) => Ok(std::fs::read(path)?),
        None => {
            use rand::RngCore;
            let mut bytes = vec![0u8; cfg.psk_bytes];
            stream(derive_seed(cfg.seed, "psk")).fill_bytes(&mut bytes);
            Ok(bytes)
        }
    }
}

/// Direction keys (Alice→Bob, Bob→Alice) from the pre-shared key.
pub fn direction_keys(cfg: &SessionConfig) -> Result<(DirectionKeys, DirectionKeys), SessionError> {
    let psk = preshared_key(cfg)?;
    let half = psk.len() / 2;
    let mk = |bytes: &[u8]| {
        DirectionKeys::from_reservoir(KeyReservoir::new(bytes.to_vec(), cfg.auth_low_water))
            .map_err(|e| SessionError::Link(LinkError::Reservoir(e)))
    };
    Ok((mk(&psk[..half])?, mk(&psk[half..2 * half])?))
}

/// Code and reason for an abort frame reporting `e`.
fn abort_message(e: &SessionError) -> crate::classical::Message {
    let reason: String = e.to_string().chars().take(400).collect();
    crate::classical::Message::Abort {
        code: e.exit_code(),
        reason,
    }
}
