//! One-decoy finite-key bounds and the secret key length.
//!
//! Every bound term uses the same epsilon, `eps_sec / 19`.

use thiserror::Error;

use crate::math::{binary_entropy, hoeffding_delta, tau_n};
use crate::model::{Basis, DecoyStats, Intensity, KeyBlockResult, ProtocolParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiniteKeyError {
    #[error("degenerate intensities: mu = {mu} must exceed nu = {nu}")]
    DegenerateIntensities { mu: f64, nu: f64 },
    #[error("insufficient statistics: s1_C = {s1_c}, s1_K = {s1_k}")]
    InsufficientStatistics { s1_c: f64, s1_k: f64 },
}

/// Hoeffding-corrected, intensity-conditioned counts, indexed
/// `[basis][intensity]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CorrectedCounts {
    pub n_plus: [[f64; 2]; 2],
    pub n_minus: [[f64; 2]; 2],
    pub m_plus: [[f64; 2]; 2],
    pub m_minus: [[f64; 2]; 2],
}

impl CorrectedCounts {
    pub fn n_plus(&self, b: Basis, k: Intensity) -> f64 {
        self.n_plus[b.index()][k.index()]
    }
    pub fn n_minus(&self, b: Basis, k: Intensity) -> f64 {
        self.n_minus[b.index()][k.index()]
    }
    pub fn m_plus(&self, b: Basis, k: Intensity) -> f64 {
        self.m_plus[b.index()][k.index()]
    }
    pub fn m_minus(&self, b: Basis, k: Intensity) -> f64 {
        self.m_minus[b.index()][k.index()]
    }
}

/// X±_Bk = (e^k / p_k)·(X_Bk ± δ(X_B, eps)), minus variants clamped at 0.
pub fn corrected_counts(stats: &DecoyStats, params: &ProtocolParams, eps: f64) -> CorrectedCounts {
    let mut c = CorrectedCounts::default();
    for b in Basis::ALL {
        let dn = delta(stats.n_total(b) as f64, eps);
        let dm = delta(stats.m_total(b) as f64, eps);
        for k in Intensity::ALL {
            let w = params.intensity_value(k).exp() / params.intensity_prob(k);
            let (n, m) = (stats.n(b, k) as f64, stats.m(b, k) as f64);
            let (bi, ki) = (b.index(), k.index());
            c.n_plus[bi][ki] = w * (n + dn);
            c.n_minus[bi][ki] = (w * (n - dn)).max(0.0);
            c.m_plus[bi][ki] = w * (m + dm);
            c.m_minus[bi][ki] = (w * (m - dm)).max(0.0);
        }
    }
    c
}

fn delta(n: f64, eps: f64) -> f64 {
    // eps is always in (0,1) here; counts are non-negative
    hoeffding_delta(n, eps).expect("eps validated")
}

fn check_intensities(params: &ProtocolParams) -> Result<(), FiniteKeyError> {
    if params.mu > params.nu {
        Ok(())
    } else {
        Err(FiniteKeyError::DegenerateIntensities {
            mu: params.mu,
            nu: params.nu,
        })
    }
}

/// Vacuum-event bounds (lower, upper) in basis `b`.
pub fn bound_s0(
    cc: &CorrectedCounts,
    stats: &DecoyStats,
    b: Basis,
    params: &ProtocolParams,
    eps: f64,
) -> Result<(f64, f64), FiniteKeyError> {
    check_intensities(params)?;
    let (mu, nu) = (params.mu, params.nu);
    let tau0 = tau_n(0, params);
    let lower = tau0 * (mu * cc.n_minus(b, Intensity::Decoy) - nu * cc.n_plus(b, Intensity::Signal)) / (mu - nu);
    // vacuum clicks are random, so half of them show up as errors
    let upper = 2.0 * (stats.m_total(b) as f64 + delta(stats.n_total(b) as f64, eps));
    let clamped = lower.clamp(0.0, upper);
    if clamped != lower {
        log::debug!("s0_lower({b}) clamped from {lower} to {clamped}");
    }
    Ok((clamped, upper))
}

/// Single-photon lower bound in basis `b` given the vacuum upper bound.
pub fn bound_s1(cc: &CorrectedCounts, s0_upper: f64, b: Basis, params: &ProtocolParams) -> Result<f64, FiniteKeyError> {
    check_intensities(params)?;
    let (mu, nu) = (params.mu, params.nu);
    let (tau0, tau1) = (tau_n(0, params), tau_n(1, params));
    let inner = cc.n_minus(b, Intensity::Decoy)
        - (nu * nu / (mu * mu)) * cc.n_plus(b, Intensity::Signal)
        - ((mu * mu - nu * nu) / (mu * mu)) * (s0_upper / tau0);
    let s1 = tau1 * mu / (nu * (mu - nu)) * inner;
    if s1 < 0.0 {
        log::debug!("s1_lower({b}) clamped from {s1} to 0");
    }
    Ok(s1.max(0.0))
}

/// Upper bound on single-photon errors in the check basis.
pub fn bound_v1_check(cc: &CorrectedCounts, s1_c: f64, params: &ProtocolParams) -> Result<f64, FiniteKeyError> {
    check_intensities(params)?;
    let tau1 = tau_n(1, params);
    let v = tau1 * (cc.m_plus(Basis::Check, Intensity::Signal) - cc.m_minus(Basis::Check, Intensity::Decoy))
        / (params.mu - params.nu);
    Ok(v.clamp(0.0, s1_c.max(0.0)))
}

/// Correction for random sampling without replacement.
pub fn gamma(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let b = if b <= 0.0 || b >= 1.0 { 1.0 / (c + d) } else { b };
    let q = (1.0 - b) * b;
    let arg = ((c + d) / (c * d * q)) * (21.0 / a).powi(2);
    ((c + d) * q / (c * d * std::f64::consts::LN_2) * arg.log2()).max(0.0).sqrt()
}

/// φ_K upper bound from the single-photon statistics of both bases.
pub fn bound_phase_error(s1_k: f64, s1_c: f64, v1_c: f64, eps: f64) -> Result<f64, FiniteKeyError> {
    if !(s1_c > 0.0 && s1_k > 0.0) {
        return Err(FiniteKeyError::InsufficientStatistics { s1_c, s1_k });
    }
    let b = (v1_c / s1_c).clamp(0.0, 1.0);
    Ok((b + gamma(eps, b, s1_c, s1_k)).min(0.5))
}

/// All intermediate quantities of one block's analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsBreakdown {
    pub counts: CorrectedCounts,
    /// Indexed by basis.
    pub s0_lower: [f64; 2],
    pub s0_upper: [f64; 2],
    pub s1_lower: [f64; 2],
    pub v1_upper_c: f64,
    pub phi_upper: f64,
    pub eps_alloc: f64,
}

impl BoundsBreakdown {
    /// Breakdown with only the key-basis terms set, as used by the
    /// secret-key formula.
    pub fn from_key_terms(s0: f64, s1: f64, phi: f64) -> Self {
        let mut b = Self {
            counts: CorrectedCounts::default(),
            s0_lower: [0.0; 2],
            s0_upper: [0.0; 2],
            s1_lower: [0.0; 2],
            v1_upper_c: 0.0,
            phi_upper: phi,
            eps_alloc: 0.0,
        };
        b.s0_lower[Basis::Key.index()] = s0;
        b.s1_lower[Basis::Key.index()] = s1;
        b
    }
}

/// Runs every bound for one block of statistics.
pub fn analyze(stats: &DecoyStats, params: &ProtocolParams) -> Result<BoundsBreakdown, FiniteKeyError> {
    check_intensities(params)?;
    let eps = params.eps_per_term();
    let cc = corrected_counts(stats, params, eps);
    let mut s0_lower = [0.0; 2];
    let mut s0_upper = [0.0; 2];
    let mut s1_lower = [0.0; 2];
    for b in Basis::ALL {
        let (lo, hi) = bound_s0(&cc, stats, b, params, eps)?;
        s0_lower[b.index()] = lo;
        s0_upper[b.index()] = hi;
        s1_lower[b.index()] = bound_s1(&cc, hi, b, params)?;
    }
    let s1_c = s1_lower[Basis::Check.index()];
    let s1_k = s1_lower[Basis::Key.index()];
    let v1 = bound_v1_check(&cc, s1_c, params)?;
    let phi = bound_phase_error(s1_k, s1_c, v1, eps)?;
    Ok(BoundsBreakdown {
        counts: cc,
        s0_lower,
        s0_upper,
        s1_lower,
        v1_upper_c: v1,
        phi_upper: phi,
        eps_alloc: eps,
    })
}

/// SKL = max(0, ⌊s0 + s1·(1 − h(φ)) − λ_EC − λ_c − λ_sec⌋) for the key basis.
pub fn compute_skl(bounds: &BoundsBreakdown, lambda_ec: u64, lambda_c: u64, params: &ProtocolParams) -> KeyBlockResult {
    let k = Basis::Key.index();
    let s0 = bounds.s0_lower[k].max(0.0);
    let s1 = bounds.s1_lower[k].max(0.0);
    let phi = bounds.phi_upper.clamp(0.0, 0.5);
    let lambda_sec = params.lambda_sec();
    let h = binary_entropy(phi).expect("phi clamped into [0, 0.5]");
    let raw = s0 + s1 * (1.0 - h) - lambda_ec as f64 - lambda_c as f64 - lambda_sec as f64;
    let skl = if raw > 0.0 { raw.floor() as u64 } else { 0 };
    KeyBlockResult {
        s0_lower: s0,
        s1_lower: s1,
        phi_upper: phi,
        lambda_ec,
        lambda_c,
        lambda_sec,
        skl,
        wall_time: 0.0,
        skr: 0.0,
    }
}

/// Full analysis of one finite-key block; statistics too thin for a phase
/// error bound give a zero-length key.
pub fn key_block(
    stats: &DecoyStats,
    lambda_ec: u64,
    lambda_c: u64,
    params: &ProtocolParams,
) -> Result<(Option<BoundsBreakdown>, KeyBlockResult), FiniteKeyError> {
    match analyze(stats, params) {
        Ok(b) => {
            let r = compute_skl(&b, lambda_ec, lambda_c, params);
            Ok((Some(b), r))
        }
        Err(FiniteKeyError::InsufficientStatistics { .. }) => {
            let zero = BoundsBreakdown::from_key_terms(0.0, 0.0, 0.5);
            Ok((None, compute_skl(&zero, lambda_ec, lambda_c, params)))
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> ProtocolParams {
        ProtocolParams::default()
    }

    fn stats(nk: [u64; 2], mk: [u64; 2], nc: [u64; 2], mc: [u64; 2]) -> DecoyStats {
        DecoyStats::from_counts([nk, nc], [mk, mc]).unwrap()
    }

    /// Counts near the operating point, about one second of the field
    /// profile. Decoy/signal ratio follows p_ν·ν / (p_μ·μ) plus noise.
    fn typical(scale: u64) -> DecoyStats {
        stats([17_500, 2_200], [395, 62], [1_950, 245], [33, 6]).scaled(scale)
    }

    #[test]
    fn zero_counts_give_zero_corrections() {
        let c = corrected_counts(&DecoyStats::new(), &params(), 1e-10 / 19.0);
        assert_eq!(c, CorrectedCounts::default());
    }

    #[test]
    fn corrected_count_example() {
        let p = params();
        let eps = 1e-10 / 19.0;
        let s = stats([1_000_000, 300_000], [0, 0], [0, 0], [0, 0]);
        let c = corrected_counts(&s, &p, eps);
        let delta = (0.65e6 * (19.0e10f64).ln()).sqrt();
        assert!((delta - 4108.6).abs() < 0.1);
        let expected = (0.6f64).exp() / 0.7 * (1e6 + delta);
        assert!((c.n_plus(Basis::Key, Intensity::Signal) - expected).abs() < 1e-6 * expected);
    }

    #[test]
    fn eps_near_one_removes_correction() {
        let s = typical(1);
        let c = corrected_counts(&s, &params(), 1.0 - 1e-15);
        for b in 0..2 {
            for k in 0..2 {
                assert!((c.n_plus[b][k] - c.n_minus[b][k]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn empty_stats() {
        let p = params();
        let eps = p.eps_per_term();
        let s = DecoyStats::new();
        let c = corrected_counts(&s, &p, eps);
        let (lo, hi) = bound_s0(&c, &s, Basis::Key, &p, eps).unwrap();
        assert_eq!((lo, hi), (0.0, 0.0));
        assert_eq!(bound_s1(&c, hi, Basis::Key, &p).unwrap(), 0.0);
        assert!(matches!(analyze(&s, &p), Err(FiniteKeyError::InsufficientStatistics { .. })));
        let (_, r) = key_block(&s, 0, 50, &p).unwrap();
        assert_eq!(r.skl, 0);
    }

    #[test]
    fn degenerate_intensities() {
        let p = ProtocolParams {
            nu: 0.6,
            ..params()
        };
        let c = CorrectedCounts::default();
        let s = DecoyStats::new();
        assert!(matches!(
            bound_s0(&c, &s, Basis::Key, &p, 1e-11),
            Err(FiniteKeyError::DegenerateIntensities { .. })
        ));
        assert!(bound_s1(&c, 0.0, Basis::Key, &p).is_err());
    }

    #[test]
    fn zero_observed_errors_still_bounded_away_from_zero() {
        let phi = bound_phase_error(1e6, 1e5, 0.0, 1e-11).unwrap();
        assert!(phi > 0.0 && phi < 0.1, "{phi}");
        assert!(bound_phase_error(1e6, 0.0, 0.0, 1e-11).is_err());
    }

    #[test]
    fn lambda_sec_is_225() {
        assert_eq!(params().lambda_sec(), 225);
        assert_eq!(params().lambda_c(), 50);
    }

    #[test]
    fn skl_golden() {
        let b = BoundsBreakdown::from_key_terms(1000.0, 1e5, 0.05);
        let r = compute_skl(&b, 30_000, 50, &params());
        assert_eq!(r.skl, 42_085);
        let zero = BoundsBreakdown::from_key_terms(0.0, 0.0, 0.0);
        assert_eq!(compute_skl(&zero, 0, 50, &params()).skl, 0);
    }

    #[test]
    fn skl_is_deterministic() {
        let b = analyze(&typical(300), &params()).unwrap();
        let a = compute_skl(&b, 1_000_000, 50, &params());
        assert_eq!(a, compute_skl(&b, 1_000_000, 50, &params()));
    }

    #[test]
    fn skl_monotone_on_grid() {
        let p = params();
        for i in 0..50 {
            let phi = i as f64 * 0.01;
            for j in 0..50 {
                let ec = j * 2000;
                let at = |phi: f64, ec: u64| compute_skl(&BoundsBreakdown::from_key_terms(500.0, 2e5, phi), ec, 50, &p).skl;
                assert!(at(phi + 0.01, ec) <= at(phi, ec));
                assert!(at(phi, ec + 2000) <= at(phi, ec));
            }
        }
    }

    #[test]
    fn more_statistics_raise_s1() {
        let p = params();
        let one = analyze(&typical(300), &p).unwrap();
        let two = analyze(&typical(600), &p).unwrap();
        assert!(two.s1_lower[0] > one.s1_lower[0]);
        assert!(two.phi_upper < one.phi_upper);
    }

    #[test]
    fn realistic_block_gives_positive_key() {
        // ~5e6 key-basis detections at the operating point
        let p = params();
        let s = typical(280);
        let b = analyze(&s, &p).unwrap();
        assert!(b.s0_lower[0] <= b.s0_upper[0]);
        let lambda_ec = (1.2 * 5e6 * 0.158) as u64;
        let r = compute_skl(&b, lambda_ec, 50, &p);
        assert!(r.skl > 0, "{b:?} {r:?}");
    }

    proptest! {
        #[test]
        fn bounds_stay_physical(nk in 0u64..1_000_000, nkv in 0u64..300_000, ek in 0.0f64..0.1,
                                nc in 0u64..100_000, ncv in 0u64..30_000, ec in 0.0f64..0.1) {
            let p = params();
            let mk = [(nk as f64 * ek) as u64, (nkv as f64 * ek) as u64];
            let mc = [(nc as f64 * ec) as u64, (ncv as f64 * ec) as u64];
            let s = stats([nk, nkv], mk, [nc, ncv], mc);
            match analyze(&s, &p) {
                Ok(b) => {
                    for i in 0..2 {
                        prop_assert!(b.s0_lower[i] >= 0.0 && b.s0_lower[i] <= b.s0_upper[i]);
                        prop_assert!(b.s1_lower[i] >= 0.0);
                    }
                    prop_assert!((0.0..=0.5).contains(&b.phi_upper));
                    prop_assert!(b.v1_upper_c <= b.s1_lower[1]);
                }
                Err(FiniteKeyError::InsufficientStatistics { .. }) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
