use std::path::{Path, PathBuf};

use qkdtwin::node::{exit, parse_config, run_orchestrator, SessionConfig};

fn profile(name: &str) -> SessionConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../profiles").join(name);
    parse_config(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Desk profile shortened so that finite-key blocks close within seconds.
fn small_desk(seconds: f64) -> SessionConfig {
    let mut cfg = profile("desk.conf");
    cfg.set("duration", &seconds.to_string()).unwrap();
    cfg.set("sifted_block_len", "4000").unwrap();
    cfg.set("sync_len", "200000").unwrap();
    cfg.set("max_offset_search", "20000").unwrap();
    cfg
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qkdtwin-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

/// Lossless short link at 1 MHz: about 10^5 sifted bits per second, so
/// 10^6-bit finite-key blocks close every few seconds.
fn bright(seconds: f64) -> SessionConfig {
    let mut cfg = small_desk(seconds);
    for (k, v) in [
        ("fiber_loss_db", "0"),
        ("mux_loss_db", "0"),
        ("detector_efficiency", "0.3"),
        ("dead_time", "1e-7"),
        ("dark_rate", "100"),
        ("background_rate", "1000"),
        ("sifted_block_len", "1e6"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn bright_run_produces_matching_keys() {
    let mut cfg = bright(25.0);
    let dir = scratch("desk");
    cfg.keys = Some(dir.clone());
    cfg.metrics = Some(dir.join("metrics.csv"));
    let r = run_orchestrator(&cfg);
    assert_eq!(r.exit_code, exit::OK, "{:?}", r.error);
    let (a, b) = (r.alice.unwrap(), r.bob.unwrap());
    println!("{}", b.audit.to_text());
    assert!(!b.keys.bytes.is_empty());
    assert_eq!(a.keys, b.keys);
    let ka = std::fs::read(dir.join("alice.key")).unwrap();
    let kb = std::fs::read(dir.join("bob.key")).unwrap();
    assert_eq!(ka, kb);
    let rows = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 26);
    let fk = std::fs::read_to_string(dir.join("finite_key_log.csv")).unwrap();
    assert_eq!(fk.lines().count(), 1 + b.finite_key.len());
    assert!(b.finite_key.iter().all(|r| r.bounds.is_some()));
}

#[test]
fn orchestrator_is_deterministic() {
    let cfg = bright(12.0);
    let a = run_orchestrator(&cfg);
    let b = run_orchestrator(&cfg);
    assert_eq!(a.exit_code, exit::OK, "{:?}", a.error);
    assert_eq!(a, b);
}

#[test]
fn zero_duration_gives_empty_outputs() {
    let mut cfg = small_desk(0.0);
    let dir = scratch("zero");
    cfg.keys = Some(dir.clone());
    cfg.metrics = Some(dir.join("metrics.csv"));
    let r = run_orchestrator(&cfg);
    assert_eq!(r.exit_code, exit::OK);
    for name in ["alice.key", "bob.key"] {
        assert!(std::fs::read(dir.join(name)).unwrap().is_empty());
    }
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

fn exit_code_with(settings: &[(&str, &str)]) -> (u8, Option<String>) {
    let mut cfg = small_desk(6.0);
    for (k, v) in settings {
        cfg.set(k, v).unwrap();
    }
    let r = run_orchestrator(&cfg);
    (r.exit_code, r.error)
}

#[test]
fn corrupted_frame_is_fatal() {
    for who in ["alice:3", "bob:2"] {
        let (code, err) = exit_code_with(&[("fault_corrupt_frame", who)]);
        assert_eq!(code, exit::TAG_MISMATCH, "{who}: {err:?}");
    }
}

#[test]
fn slot_misalignment_is_detected() {
    let (code, err) = exit_code_with(&[("fault_slot_shift", "1")]);
    assert_eq!(code, exit::DESYNC, "{err:?}");
}

#[test]
fn dark_link_fails_to_synchronize() {
    let (code, err) = exit_code_with(&[("detector_efficiency", "0"), ("dark_rate", "0"), ("background_rate", "0")]);
    assert_eq!(code, exit::SYNC_FAILED, "{err:?}");
}

#[test]
fn exhausted_preshared_key_halts() {
    let (code, err) = exit_code_with(&[("psk_bytes", "96")]);
    assert_eq!(code, exit::RESERVOIR_EMPTY, "{err:?}");
}

#[test]
fn daemons_match_orchestrator() {
    use qkdtwin::node::{run_alice_daemon, run_bob_daemon};
    let mut cfg = bright(8.0);
    cfg.set("sifted_block_len", "5e5").unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    cfg.endpoint = format!("127.0.0.1:{port}");
    let reference = run_orchestrator(&cfg);
    assert_eq!(reference.exit_code, exit::OK, "{:?}", reference.error);

    let alice_cfg = cfg.clone();
    let alice = std::thread::spawn(move || run_alice_daemon(&alice_cfg));
    let bob = run_bob_daemon(&cfg);
    let alice = alice.join().unwrap();
    assert_eq!(bob.exit_code, exit::OK, "{:?}", bob.error);
    assert_eq!(alice.exit_code, exit::OK, "{:?}", alice.error);
    let (a, b) = (alice.alice.unwrap(), bob.bob.unwrap());
    assert_eq!(a.keys, b.keys);
    assert_eq!(b.keys, reference.bob.as_ref().unwrap().keys);
    assert_eq!(b.metrics, reference.bob.unwrap().metrics);
}
