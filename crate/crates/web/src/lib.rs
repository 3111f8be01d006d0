//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every entry point takes plain numbers and returns a JSON string.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use qkdtwin::distill::{cascade_reconcile, confirm_hash, CascadeConfig, ConfirmKey};
use qkdtwin::finitekey::key_block;
use qkdtwin::linksim::{ChannelParams, LinkSimulator, SourceSeeds};
use qkdtwin::math::binary_entropy;
use qkdtwin::model::{Basis, DecoyStats, ProtocolParams};
use qkdtwin::synchro::{fit_period, recover_offset, OffsetSearch};

/// Desk-scale protocol: 1 MHz, otherwise the field parameters.
fn desk_params() -> ProtocolParams {
    ProtocolParams {
        pulse_rate: 1e6,
        sync_len: 0,
        ..Default::default()
    }
}

fn desk_channel(loss_db: f64, background_rate: f64) -> ChannelParams {
    ChannelParams {
        fiber_loss_db: (loss_db - 3.0).max(0.0),
        mux_loss_db: loss_db.min(3.0),
        dark_rate: 4.0,
        background_rate,
        ..Default::default()
    }
}

/// Sifted decoy statistics of one simulated second, markers excluded.
fn one_second(params: &ProtocolParams, ch: &ChannelParams, seed: u64) -> DecoyStats {
    let mut sim = LinkSimulator::new(params, ch, seed);
    let mut pulses = Vec::new();
    let mut events = Vec::new();
    sim.run_until_with(params.slots_per_ec_block(), &mut events, |chunk| pulses.extend_from_slice(chunk));
    sim.finish(&mut events);
    let mut n = [[0u64; 2]; 2];
    let mut m = [[0u64; 2]; 2];
    for ev in &events {
        let Some(p) = pulses.get(ev.slot as usize) else { continue };
        let b = ev.outcome.basis();
        if p.is_marker || b != p.prepared.basis() {
            continue;
        }
        n[b.index()][p.intensity_class.index()] += 1;
        m[b.index()][p.intensity_class.index()] += (ev.outcome != p.prepared) as u64;
    }
    DecoyStats::from_counts(n, m).expect("errors never exceed detections")
}

/// Secret key rate against acquisition time, extrapolated from one second
/// of simulated statistics. λ_EC assumes Cascade at efficiency 1.16.
pub fn finite_key_curve_value(loss_db: f64, background_rate: f64, seed: u64) -> Value {
    let params = desk_params();
    let ch = desk_channel(loss_db, background_rate);
    let second = one_second(&params, &ch, seed);
    let qber = |b: Basis| second.m_total(b) as f64 / second.n_total(b).max(1) as f64;
    let (q_k, q_c) = (qber(Basis::Key), qber(Basis::Check));
    let mut rows = Vec::new();
    for exp10 in 0..=40 {
        let seconds = 10f64.powf(1.0 + exp10 as f64 / 10.0).round() as u64;
        let stats = second.scaled(seconds);
        let n_k = stats.n_total(Basis::Key);
        let lambda_ec = (1.16 * n_k as f64 * binary_entropy(q_k.min(0.5)).unwrap_or(1.0)).ceil() as u64;
        let lambda_c = params.lambda_c() * seconds;
        let Ok((_, r)) = key_block(&stats, lambda_ec, lambda_c, &params) else {
            continue;
        };
        rows.push(json!({
            "seconds": seconds,
            "sifted_bits": n_k,
            "skl": r.skl,
            "skr": r.skl as f64 / seconds as f64,
            "phi_upper": r.phi_upper,
        }));
    }
    json!({
        "sifted_rate": second.n_total(Basis::Key),
        "qber_k": q_k,
        "qber_c": q_c,
        "rows": rows,
    })
}

/// One Cascade run on random blocks with independent bit flips, followed by
/// a 50-bit confirmation.
pub fn cascade_value(n: usize, qber: f64, seed: u64) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alice: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
    let flip = qber.clamp(0.0, 0.5);
    let bob: Vec<u8> = alice.iter().map(|&b| b ^ rng.gen_bool(flip) as u8).collect();
    let errors = alice.iter().zip(&bob).filter(|(a, b)| a != b).count();
    let estimate = errors as f64 / n.max(1) as f64;
    match cascade_reconcile(&alice, &bob, estimate, seed, &CascadeConfig::default()) {
        Ok((corrected, disclosed)) => {
            let residual = alice.iter().zip(&corrected).filter(|(a, b)| a != b).count();
            let key = ConfirmKey::from_seed(seed ^ 0x5151);
            let confirmed = confirm_hash(&alice, key, 50) == confirm_hash(&corrected, key, 50);
            let ideal = n as f64 * binary_entropy(estimate).unwrap_or(0.0);
            json!({
                "errors": errors,
                "disclosed": disclosed,
                "efficiency": if ideal > 0.0 { disclosed as f64 / ideal } else { 0.0 },
                "residual": residual,
                "confirmed": confirmed,
            })
        }
        Err(e) => json!({ "errors": errors, "error": e.to_string() }),
    }
}

/// Simulates a preamble behind an unknown tagger offset and recovers it.
pub fn sync_value(loss_db: f64, shift: u64, seed: u64) -> Value {
    let params = ProtocolParams {
        sync_len: 200_000,
        ..desk_params()
    };
    let max_shift = 200_000u64;
    let shift = shift.min(max_shift);
    let ch = ChannelParams {
        tagger_offset: shift as f64 * params.period(),
        ..desk_channel(loss_db, 94.7)
    };
    let mut sim = LinkSimulator::new(&params, &ch, seed);
    let mut events = Vec::new();
    sim.run_until(params.sync_len + max_shift + 10_000, &mut events);
    sim.finish(&mut events);
    let tags: Vec<f64> = events.iter().map(|e| e.timestamp).collect();
    let search = OffsetSearch {
        max_shift,
        ..Default::default()
    };
    let result = fit_period(&tags, params.period())
        .and_then(|fit| recover_offset(&tags, &fit, SourceSeeds::from_master(seed).sync, params.sync_len, &search));
    match result {
        Ok(est) => json!({
            "tags": tags.len(),
            "true_shift": shift,
            "recovered_shift": est.offset / params.period(),
            "period_error": est.period / params.period() - 1.0,
            "sigma": est.confidence,
        }),
        Err(e) => json!({ "tags": tags.len(), "true_shift": shift, "error": e.to_string() }),
    }
}

#[wasm_bindgen]
pub fn finite_key_curve(loss_db: f64, background_rate: f64, seed: u32) -> String {
    finite_key_curve_value(loss_db, background_rate, seed as u64).to_string()
}

#[wasm_bindgen]
pub fn cascade(n: u32, qber: f64, seed: u32) -> String {
    cascade_value(n as usize, qber, seed as u64).to_string()
}

#[wasm_bindgen]
pub fn synchronize(loss_db: f64, shift: u32, seed: u32) -> String {
    sync_value(loss_db, shift as u64, seed as u64).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_rate_grows_then_saturates() {
        let v = finite_key_curve_value(9.7, 94.7, 1);
        let rows = v["rows"].as_array().unwrap();
        assert!(!rows.is_empty());
        let first = rows.first().unwrap()["skr"].as_f64().unwrap();
        let last = rows.last().unwrap()["skr"].as_f64().unwrap();
        assert_eq!(first, 0.0);
        assert!(last > 0.0, "{v}");
        let q = v["qber_k"].as_f64().unwrap();
        assert!((0.015..0.035).contains(&q), "{q}");
    }

    #[test]
    fn cascade_corrects_and_confirms() {
        let v = cascade_value(10_000, 0.03, 4);
        assert_eq!(v["residual"], 0);
        assert_eq!(v["confirmed"], true);
        assert!(v["efficiency"].as_f64().unwrap() < 1.45);
    }

    #[test]
    fn sync_recovers_the_shift() {
        let v = sync_value(9.7, 12_345, 2);
        let got = v["recovered_shift"].as_f64().expect("synchronized");
        assert!((got - 12_345.0).abs() < 0.125, "{v}");
    }

    #[test]
    fn json_entry_points_parse() {
        let s = cascade(2000, 0.02, 1);
        assert!(serde_json::from_str::<Value>(&s).is_ok());
    }
}
