//! Coexistence calibration on the field-link operating point.

use std::path::Path;

use qkdtwin::linksim::{calibrate_background, FIELD_BACKGROUND_RATE};
use qkdtwin::node::parse_config;

#[test]
fn field_background_reproduces_penalty() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../profiles/field.conf");
    let cfg = parse_config(&std::fs::read_to_string(path).unwrap()).unwrap();
    let rate = calibrate_background(&cfg.protocol, &cfg.channel, 0.006, 10_000_000, 11);
    let rel = rate / FIELD_BACKGROUND_RATE - 1.0;
    assert!(rel.abs() <= 0.2, "calibrated {rate:.0} /s, {:+.1}% from the profile", 100.0 * rel);
}
