//! Shared domain types and protocol constants.

use std::fmt;

use thiserror::Error;

/// Measurement/preparation basis. `Key` is the circular basis {L, R},
/// `Check` the diagonal basis {D, A}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Basis {
    Key,
    Check,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::Key, Basis::Check];

    pub fn index(self) -> usize {
        match self {
            Basis::Key => 0,
            Basis::Check => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Basis> {
        match i {
            0 => Some(Basis::Key),
            1 => Some(Basis::Check),
            _ => None,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Basis::Key => 'K',
            Basis::Check => 'C',
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

/// Polarization state. Alice only ever prepares L, R or D; A appears only
/// as a measurement outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum State {
    L,
    R,
    D,
    A,
}

impl State {
    pub fn basis(self) -> Basis {
        match self {
            State::L | State::R => Basis::Key,
            State::D | State::A => Basis::Check,
        }
    }

    /// Bit value within the basis: L and D encode 0, R and A encode 1.
    pub fn bit(self) -> bool {
        matches!(self, State::R | State::A)
    }

    pub fn from_outcome(basis: Basis, bit: bool) -> State {
        match (basis, bit) {
            (Basis::Key, false) => State::L,
            (Basis::Key, true) => State::R,
            (Basis::Check, false) => State::D,
            (Basis::Check, true) => State::A,
        }
    }

    pub fn is_preparable(self) -> bool {
        self != State::A
    }
}

/// Intensity class of an emitted pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Intensity {
    /// Signal intensity μ.
    Signal,
    /// Decoy intensity ν.
    Decoy,
}

impl Intensity {
    pub const ALL: [Intensity; 2] = [Intensity::Signal, Intensity::Decoy];

    pub fn index(self) -> usize {
        match self {
            Intensity::Signal => 0,
            Intensity::Decoy => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Intensity> {
        match i {
            0 => Some(Intensity::Signal),
            1 => Some(Intensity::Decoy),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("invalid protocol parameters: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// Protocol-level constants shared by both nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    /// Pulse repetition rate in Hz.
    pub pulse_rate: f64,
    /// Signal mean photon number μ.
    pub mu: f64,
    /// Decoy mean photon number ν.
    pub nu: f64,
    /// Probability that a pulse carries intensity μ.
    pub p_mu: f64,
    /// Probability that Alice prepares a key-basis state.
    pub p_key: f64,
    pub eps_sec: f64,
    pub eps_cor: f64,
    /// Sifted key-basis bits per finite-key block.
    pub sifted_block_len: u64,
    /// Duration of one error-correction block of acquisition.
    pub ec_block_seconds: f64,
    pub qber_discard: f64,
    pub qber_realign: f64,
    /// Private key-basis slots between marker groups.
    pub marker_period: u32,
    /// Marker slots per group.
    pub marker_group: u32,
    /// Pulses of public synchronization preamble at the start of a run.
    pub sync_len: u64,
    /// Length of the rolling QBER window used by the alignment monitor.
    pub rolling_window_seconds: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            pulse_rate: 5.0e7,
            mu: 0.6,
            nu: 0.17,
            p_mu: 0.7,
            p_key: 0.9,
            eps_sec: 1e-10,
            eps_cor: 2f64.powi(-50),
            sifted_block_len: 5_000_000,
            ec_block_seconds: 1.0,
            qber_discard: 0.05,
            qber_realign: 0.025,
            marker_period: 36,
            marker_group: 4,
            sync_len: 1_000_000,
            rolling_window_seconds: 60.0,
        }
    }
}

impl ProtocolParams {
    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<(), ParamError> {
        let mut bad = Vec::new();
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !(self.pulse_rate.is_finite() && self.pulse_rate > 0.0) {
            bad.push(format!("pulse_rate must be positive (got {})", self.pulse_rate));
        }
        if !(self.nu > 0.0 && self.nu < self.mu && self.mu.is_finite()) {
            bad.push(format!(
                "intensities must satisfy 0 < nu < mu (got mu={}, nu={})",
                self.mu, self.nu
            ));
        }
        if !open_unit(self.p_mu) {
            bad.push(format!("p_mu must lie in (0,1) (got {})", self.p_mu));
        }
        if !open_unit(self.p_key) {
            bad.push(format!("p_key must lie in (0,1) (got {})", self.p_key));
        }
        if !open_unit(self.eps_sec) {
            bad.push(format!("eps_sec must lie in (0,1) (got {})", self.eps_sec));
        }
        if !open_unit(self.eps_cor) {
            bad.push(format!("eps_cor must lie in (0,1) (got {})", self.eps_cor));
        }
        if self.sifted_block_len == 0 {
            bad.push("sifted_block_len must be positive".into());
        }
        if !(self.ec_block_seconds > 0.0) {
            bad.push(format!("ec_block_seconds must be positive (got {})", self.ec_block_seconds));
        } else if self.slots_per_ec_block() > u32::MAX as u64 {
            bad.push("pulse_rate * ec_block_seconds must fit in 32 bits".into());
        }
        if !open_unit(self.qber_discard) {
            bad.push(format!("qber_discard must lie in (0,1) (got {})", self.qber_discard));
        }
        if !open_unit(self.qber_realign) {
            bad.push(format!("qber_realign must lie in (0,1) (got {})", self.qber_realign));
        }
        if self.marker_period == 0 {
            bad.push("marker_period must be positive".into());
        }
        if !(self.rolling_window_seconds > 0.0) {
            bad.push("rolling_window_seconds must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ParamError::Invalid(bad))
        }
    }

    pub fn period(&self) -> f64 {
        1.0 / self.pulse_rate
    }

    pub fn intensity_value(&self, k: Intensity) -> f64 {
        match k {
            Intensity::Signal => self.mu,
            Intensity::Decoy => self.nu,
        }
    }

    pub fn intensity_prob(&self, k: Intensity) -> f64 {
        match k {
            Intensity::Signal => self.p_mu,
            Intensity::Decoy => 1.0 - self.p_mu,
        }
    }

    pub fn slots_per_ec_block(&self) -> u64 {
        (self.pulse_rate * self.ec_block_seconds).round() as u64
    }

    /// Secrecy penalty term in bits, ⌈6·log2(19/ε_sec)⌉.
    pub fn lambda_sec(&self) -> u64 {
        (6.0 * (19.0 / self.eps_sec).log2()).ceil() as u64
    }

    /// Length in bits of one correctness-confirmation tag, ⌈log2(1/ε_cor)⌉.
    pub fn lambda_c(&self) -> u64 {
        (1.0 / self.eps_cor).log2().ceil() as u64
    }

    /// Epsilon assigned to each of the 19 bound terms.
    pub fn eps_per_term(&self) -> f64 {
        self.eps_sec / 19.0
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CountError {
    #[error("count {field} is negative ({value})")]
    Negative { field: &'static str, value: i64 },
    #[error("error count exceeds detections for {basis}/{intensity:?}: {errors} > {detections}")]
    ErrorsExceedDetections {
        basis: Basis,
        intensity: Intensity,
        errors: u64,
        detections: u64,
    },
}

/// Per-basis, per-intensity detection and error counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecoyStats {
    detections: [[u64; 2]; 2],
    errors: [[u64; 2]; 2],
}

impl DecoyStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds stats from signed inputs (as read from external sources),
    /// indexed `[basis][intensity]`.
    pub fn from_signed(detections: [[i64; 2]; 2], errors: [[i64; 2]; 2]) -> Result<Self, CountError> {
        let mut s = Self::default();
        for b in Basis::ALL {
            for k in Intensity::ALL {
                let n = detections[b.index()][k.index()];
                let m = errors[b.index()][k.index()];
                if n < 0 {
                    return Err(CountError::Negative { field: "detections", value: n });
                }
                if m < 0 {
                    return Err(CountError::Negative { field: "errors", value: m });
                }
                s.detections[b.index()][k.index()] = n as u64;
                s.errors[b.index()][k.index()] = m as u64;
            }
        }
        s.check()?;
        Ok(s)
    }

    pub fn from_counts(detections: [[u64; 2]; 2], errors: [[u64; 2]; 2]) -> Result<Self, CountError> {
        let s = Self { detections, errors };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<(), CountError> {
        for b in Basis::ALL {
            for k in Intensity::ALL {
                let (n, m) = (self.n(b, k), self.m(b, k));
                if m > n {
                    return Err(CountError::ErrorsExceedDetections {
                        basis: b,
                        intensity: k,
                        errors: m,
                        detections: n,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn record(&mut self, basis: Basis, intensity: Intensity, error: bool) {
        self.detections[basis.index()][intensity.index()] += 1;
        if error {
            self.errors[basis.index()][intensity.index()] += 1;
        }
    }

    /// Adds errors found after the fact (key-basis errors become known only
    /// after error correction).
    pub fn add_errors(&mut self, basis: Basis, intensity: Intensity, count: u64) -> Result<(), CountError> {
        self.errors[basis.index()][intensity.index()] += count;
        self.check()
    }

    pub fn n(&self, basis: Basis, intensity: Intensity) -> u64 {
        self.detections[basis.index()][intensity.index()]
    }

    pub fn m(&self, basis: Basis, intensity: Intensity) -> u64 {
        self.errors[basis.index()][intensity.index()]
    }

    pub fn n_total(&self, basis: Basis) -> u64 {
        self.detections[basis.index()].iter().sum()
    }

    pub fn m_total(&self, basis: Basis) -> u64 {
        self.errors[basis.index()].iter().sum()
    }

    pub fn merge(&mut self, other: &DecoyStats) {
        for b in 0..2 {
            for k in 0..2 {
                self.detections[b][k] += other.detections[b][k];
                self.errors[b][k] += other.errors[b][k];
            }
        }
    }

    /// Every count multiplied by `factor`; used for scaling studies.
    pub fn scaled(&self, factor: u64) -> DecoyStats {
        let mut s = *self;
        for b in 0..2 {
            for k in 0..2 {
                s.detections[b][k] *= factor;
                s.errors[b][k] *= factor;
            }
        }
        s
    }

    pub fn raw(&self) -> ([[u64; 2]; 2], [[u64; 2]; 2]) {
        (self.detections, self.errors)
    }
}

/// Secret key length of one finite-key block plus every term that went
/// into it.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyBlockResult {
    pub s0_lower: f64,
    pub s1_lower: f64,
    pub phi_upper: f64,
    pub lambda_ec: u64,
    pub lambda_c: u64,
    pub lambda_sec: u64,
    pub skl: u64,
    pub wall_time: f64,
    pub skr: f64,
}

impl KeyBlockResult {
    pub fn with_wall_time(mut self, seconds: f64) -> Self {
        self.wall_time = seconds;
        self.skr = if seconds > 0.0 { self.skl as f64 / seconds } else { 0.0 };
        self
    }
}
