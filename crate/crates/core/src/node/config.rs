//! Flat `key = value` session configuration.
//!
//! Blank lines and `#` comments are ignored; several pairs may share a line
//! when separated by whitespace. Unknown keys are rejected. `QKD_ENDPOINT`,
//! `QKD_PSK_FILE`, `QKD_METRICS` and `QKD_KEYS` override the matching keys.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::classical::Sender;
use crate::linksim::ChannelParams;
use crate::model::ProtocolParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Alice,
    Bob,
    Orchestrator,
}

/// Acquisition budget after the synchronization preamble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Seconds(f64),
    Pulses(u64),
}

/// A frame to corrupt on purpose, for fault-injection tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameFault {
    pub sender: Sender,
    pub sequence: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub role: Role,
    pub protocol: ProtocolParams,
    pub channel: ChannelParams,
    /// `host:port` Alice listens on and Bob connects to.
    pub endpoint: String,
    pub psk_file: Option<PathBuf>,
    /// Size of the pre-shared key derived from the seed when no file is given.
    pub psk_bytes: usize,
    pub auth_low_water: usize,
    /// Bytes moved from a new key into a reservoir below its low-water mark.
    pub auth_refill_bytes: usize,
    pub budget: Budget,
    pub seed: u64,
    pub metrics: Option<PathBuf>,
    pub keys: Option<PathBuf>,
    /// Error-correction blocks reconciled together in one message exchange.
    pub ec_batch_blocks: usize,
    /// Preamble search range in slots.
    pub max_offset_search: u64,
    pub fault: Option<FrameFault>,
    /// Slots added to the receiver's recovered offset (fault tests).
    pub fault_slot_shift: i64,
    /// Polarization kick (radians) applied at the given acquisition time.
    pub drift_spike: Option<(f64, f64)>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            role: Role::Orchestrator,
            protocol: ProtocolParams::default(),
            channel: ChannelParams::default(),
            endpoint: "127.0.0.1:7878".into(),
            psk_file: None,
            psk_bytes: 4 << 20,
            auth_low_water: 256 << 10,
            auth_refill_bytes: 64 << 10,
            budget: Budget::Seconds(10.0),
            seed: 1,
            metrics: None,
            keys: None,
            ec_batch_blocks: 10,
            max_offset_search: 1 << 20,
            fault: None,
            fault_slot_shift: 0,
            drift_spike: None,
        }
    }
}

impl SessionConfig {
    /// Post-preamble slots to simulate.
    pub fn pulse_budget(&self) -> u64 {
        match self.budget {
            Budget::Pulses(n) => n,
            Budget::Seconds(s) => (s * self.protocol.pulse_rate).round().max(0.0) as u64,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad = Vec::new();
        if let Err(crate::model::ParamError::Invalid(v)) = self.protocol.validate() {
            bad.extend(v);
        }
        if let Err(v) = self.channel.validate() {
            bad.extend(v);
        }
        if self.ec_batch_blocks == 0 {
            bad.push("ec_batch_blocks must be positive".into());
        }
        if self.psk_bytes < 64 {
            bad.push("psk_bytes must be at least 64".into());
        }
        if let Budget::Seconds(s) = self.budget {
            if !(s >= 0.0 && s.is_finite()) {
                bad.push(format!("duration must be a non-negative number of seconds (got {s})"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(bad))
        }
    }

    /// Applies one key; returns an error message for bad keys or values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn flag(key: &str, v: &str) -> Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("{key}: expected true or false, got {v:?}")),
            }
        }
        let p = &mut self.protocol;
        let c = &mut self.channel;
        match key {
            "pulse_rate" => p.pulse_rate = num(key, value)?,
            "mu" => p.mu = num(key, value)?,
            "nu" => p.nu = num(key, value)?,
            "p_mu" => p.p_mu = num(key, value)?,
            "p_key" => p.p_key = num(key, value)?,
            "eps_sec" => p.eps_sec = num(key, value)?,
            "eps_cor" => p.eps_cor = num(key, value)?,
            "sifted_block_len" => p.sifted_block_len = num::<f64>(key, value)? as u64,
            "ec_block_seconds" => p.ec_block_seconds = num(key, value)?,
            "qber_discard" => p.qber_discard = num(key, value)?,
            "qber_realign" => p.qber_realign = num(key, value)?,
            "marker_period" => p.marker_period = num(key, value)?,
            "marker_group" => p.marker_group = num(key, value)?,
            "sync_len" => p.sync_len = num::<f64>(key, value)? as u64,
            "rolling_window_seconds" => p.rolling_window_seconds = num(key, value)?,
            "fiber_loss_db" => c.fiber_loss_db = num(key, value)?,
            "mux_loss_db" => c.mux_loss_db = num(key, value)?,
            "detector_efficiency" => c.detector_efficiency = num(key, value)?,
            "dead_time" => c.dead_time = num(key, value)?,
            "dark_rate" => c.dark_rate = num(key, value)?,
            "background_rate" => c.background_rate = num(key, value)?,
            "intrinsic_error" => c.intrinsic_error = num(key, value)?,
            "intrinsic_error_check" => c.intrinsic_error_check = num(key, value)?,
            "drift_step" => c.drift_step = num(key, value)?,
            "jitter_sigma" => c.jitter_sigma = num(key, value)?,
            "realign_time" => c.realign_time = num(key, value)?,
            "pause_during_realign" => c.pause_during_realign = flag(key, value)?,
            "clock_error" => c.clock_error = num(key, value)?,
            "tagger_offset" => c.tagger_offset = num(key, value)?,
            "role" => {
                self.role = match value {
                    "alice" => Role::Alice,
                    "bob" => Role::Bob,
                    "orchestrator" => Role::Orchestrator,
                    _ => return Err(format!("role: expected alice, bob or orchestrator, got {value:?}")),
                }
            }
            "endpoint" => self.endpoint = value.to_string(),
            "psk_file" => self.psk_file = Some(value.into()),
            "psk_bytes" => self.psk_bytes = num(key, value)?,
            "auth_low_water" => self.auth_low_water = num(key, value)?,
            "auth_refill_bytes" => self.auth_refill_bytes = num(key, value)?,
            "duration" => self.budget = Budget::Seconds(num(key, value)?),
            "pulses" => self.budget = Budget::Pulses(num::<f64>(key, value)? as u64),
            "seed" => self.seed = num(key, value)?,
            "metrics" => self.metrics = Some(value.into()),
            "keys" => self.keys = Some(value.into()),
            "ec_batch_blocks" => self.ec_batch_blocks = num(key, value)?,
            "max_offset_search" => self.max_offset_search = num::<f64>(key, value)? as u64,
            "fault_corrupt_frame" => {
                let (who, seq) = value
                    .split_once(':')
                    .ok_or_else(|| format!("{key}: expected alice:<seq> or bob:<seq>"))?;
                let sender = match who {
                    "alice" => Sender::Alice,
                    "bob" => Sender::Bob,
                    _ => return Err(format!("{key}: unknown sender {who:?}")),
                };
                self.fault = Some(FrameFault {
                    sender,
                    sequence: num(key, seq)?,
                });
            }
            "fault_slot_shift" => self.fault_slot_shift = num(key, value)?,
            "drift_spike" => {
                let (at, rad) = value
                    .split_once(':')
                    .ok_or_else(|| format!("{key}: expected <seconds>:<radians>"))?;
                self.drift_spike = Some((num(key, at)?, num(key, rad)?));
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Overrides endpoint and paths from the environment.
    pub fn apply_env(&mut self) {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(v) = var("QKD_ENDPOINT") {
            self.endpoint = v;
        }
        if let Some(v) = var("QKD_PSK_FILE") {
            self.psk_file = Some(v.into());
        }
        if let Some(v) = var("QKD_METRICS") {
            self.metrics = Some(v.into());
        }
        if let Some(v) = var("QKD_KEYS") {
            self.keys = Some(v.into());
        }
    }
}

/// Removes whitespace around `=` so `a = 1 b=2` splits into pairs.
fn tighten(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        if c.is_whitespace() {
            let mut ws = String::from(c);
            while let Some(&n) = chars.peek().filter(|n| n.is_whitespace()) {
                ws.push(n);
                chars.next();
            }
            if chars.peek() != Some(&'=') && !out.ends_with('=') {
                out.push_str(&ws);
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Parses configuration text over the defaults, reporting every bad key.
pub fn parse_config(text: &str) -> Result<SessionConfig, ConfigError> {
    let mut cfg = SessionConfig::default();
    let mut bad = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = tighten(line.split('#').next().unwrap_or(""));
        for item in line.split_whitespace() {
            match item.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim()) {
                        bad.push(format!("line {}: {e}", lineno + 1));
                    }
                }
                None => bad.push(format!("line {}: expected key=value, got {item:?}", lineno + 1)),
            }
        }
    }
    if let Err(ConfigError::Invalid(v)) = cfg.validate() {
        bad.extend(v);
    }
    if bad.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(bad))
    }
}

/// Reads a configuration file and applies environment overrides.
pub fn load_config(path: &Path) -> Result<SessionConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut cfg = parse_config(&text)?;
    cfg.apply_env();
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_defaults() {
        assert_eq!(parse_config("").unwrap(), SessionConfig::default());
        assert_eq!(parse_config("# only a comment\n\n").unwrap(), SessionConfig::default());
    }

    #[test]
    fn swapped_intensities_rejected() {
        let err = parse_config("mu=0.17 nu=0.6").unwrap_err();
        let ConfigError::Invalid(v) = err else { panic!() };
        assert!(v.iter().any(|m| m.contains("nu < mu")), "{v:?}");
    }

    #[test]
    fn discard_threshold_round_trips() {
        let cfg = parse_config("qber_discard=0.05").unwrap();
        assert_eq!(cfg.protocol.qber_discard, 0.05);
    }

    #[test]
    fn every_bad_key_listed() {
        let ConfigError::Invalid(v) = parse_config("mu_=1\nfoo=2\np_key=abc").unwrap_err() else {
            panic!()
        };
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn spaces_around_equals() {
        let cfg = parse_config("mu = 0.5  nu =0.1\n seed= 9").unwrap();
        assert_eq!((cfg.protocol.mu, cfg.protocol.nu, cfg.seed), (0.5, 0.1, 9));
    }

    #[test]
    fn budget_and_faults() {
        let cfg = parse_config("pulses=1e8\nfault_corrupt_frame=alice:3\ndrift_spike=30:0.4").unwrap();
        assert_eq!(cfg.pulse_budget(), 100_000_000);
        assert_eq!(
            cfg.fault,
            Some(FrameFault {
                sender: Sender::Alice,
                sequence: 3
            })
        );
        assert_eq!(cfg.drift_spike, Some((30.0, 0.4)));
        let cfg = parse_config("duration=2 pulse_rate=1e6").unwrap();
        assert_eq!(cfg.pulse_budget(), 2_000_000);
    }

    #[test]
    fn shipped_profiles_load() {
        for name in ["field.conf", "desk.conf"] {
            let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../profiles").join(name);
            let text = std::fs::read_to_string(&path).unwrap();
            parse_config(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
