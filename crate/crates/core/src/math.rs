//! Entropy, concentration and Poisson-mixture helpers used by the bounds.

use thiserror::Error;

use crate::model::{Intensity, ProtocolParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("{what} = {value} is outside {range}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        range: &'static str,
    },
}

/// h(p) = −p·log2(p) − (1−p)·log2(1−p), with h(0) = h(1) = 0.
pub fn binary_entropy(p: f64) -> Result<f64, DomainError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DomainError::OutOfRange {
            what: "p",
            value: p,
            range: "[0, 1]",
        });
    }
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    let q = 1.0 - p;
    Ok(-p * p.log2() - q * q.log2())
}

/// Hoeffding deviation sqrt((n/2)·ln(1/eps)).
pub fn hoeffding_delta(n: f64, eps: f64) -> Result<f64, DomainError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(DomainError::OutOfRange {
            what: "eps",
            value: eps,
            range: "(0, 1)",
        });
    }
    if !(n >= 0.0) {
        return Err(DomainError::OutOfRange {
            what: "n",
            value: n,
            range: "[0, inf)",
        });
    }
    Ok((n / 2.0 * (1.0 / eps).ln()).sqrt())
}

/// Probability that a pulse drawn from the two-intensity mixture carries
/// exactly `n` photons: Σ_k p_k·e^(−k)·kⁿ/n!.
pub fn tau_n(n: u32, params: &ProtocolParams) -> f64 {
    Intensity::ALL
        .iter()
        .map(|&k| params.intensity_prob(k) * poisson_pmf(n, params.intensity_value(k)))
        .sum()
}

/// Poisson probability mass, evaluated in log space for stability.
pub fn poisson_pmf(n: u32, mean: f64) -> f64 {
    if mean == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    let log_fact: f64 = (1..=n).map(|i| (i as f64).ln()).sum();
    (n as f64 * mean.ln() - mean - log_fact).exp()
}
