//! Session outputs: per-second metrics, the error-correction, realignment
//! and finite-key logs, final keys with their manifest, and the audit summary.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::finitekey::BoundsBreakdown;
use crate::model::{Basis, KeyBlockResult};

/// One row of the metrics file, one per error-correction block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    /// Acquisition time at the end of the block, seconds after the preamble.
    pub t: f64,
    pub qber_k: f64,
    pub qber_c: f64,
    /// Rate of the most recent finite-key block, bits/s.
    pub skr: f64,
    pub detections: u64,
    pub realign_events: u64,
    pub blocks_discarded: u64,
}

pub const METRICS_HEADER: [&str; 7] = [
    "t",
    "qber_k",
    "qber_c",
    "skr",
    "detections",
    "realign_events",
    "blocks_discarded",
];

/// CSV metrics sink. Write failures disable metrics without touching the
/// session.
pub struct MetricsWriter {
    out: Option<csv::Writer<File>>,
    rows: u64,
}

impl MetricsWriter {
    const FLUSH_EVERY: u64 = 10;

    pub fn create(path: Option<&Path>) -> Self {
        let out = path.and_then(|p| match Self::open(p) {
            Ok(w) => Some(w),
            Err(e) => {
                log::warn!("metrics disabled: cannot create {}: {e}", p.display());
                None
            }
        });
        Self { out, rows: 0 }
    }

    fn open(path: &Path) -> io::Result<csv::Writer<File>> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_writer(File::create(path)?);
        w.write_record(METRICS_HEADER)?;
        w.flush()?;
        Ok(w)
    }

    pub fn push(&mut self, r: &MetricsRecord) {
        let Some(w) = self.out.as_mut() else { return };
        let row = [
            format!("{}", r.t),
            format!("{:.6}", r.qber_k),
            format!("{:.6}", r.qber_c),
            format!("{:.3}", r.skr),
            r.detections.to_string(),
            r.realign_events.to_string(),
            r.blocks_discarded.to_string(),
        ];
        self.rows += 1;
        let res = w
            .write_record(&row)
            .and_then(|_| if self.rows % Self::FLUSH_EVERY == 0 { w.flush().map_err(Into::into) } else { Ok(()) });
        if let Err(e) = res {
            log::warn!("metrics disabled after write error: {e}");
            self.out = None;
        }
    }

    pub fn finish(&mut self) {
        if let Some(w) = self.out.as_mut() {
            if let Err(e) = w.flush() {
                log::warn!("metrics flush failed: {e}");
            }
        }
    }
}

/// Receiver-side record of one error-correction block.
#[derive(Debug, Clone, PartialEq)]
pub struct EcLogEntry {
    pub block: u64,
    pub start: f64,
    pub end: f64,
    pub detections: u64,
    pub key_bits: u64,
    pub markers: u64,
    pub marker_errors: u64,
    pub checks: u64,
    pub check_errors: u64,
    /// `keep`, `discard` or `empty`.
    pub verdict: &'static str,
    pub rolling_qber: f64,
    /// Errors corrected, when error correction ran.
    pub ec_errors: Option<u64>,
    pub lambda_ec: u64,
    pub confirmed: bool,
    /// Simulator ground truth at the end of the block.
    pub true_error_k: f64,
    pub realigning: bool,
}

impl EcLogEntry {
    pub fn marker_qber(&self) -> Option<f64> {
        (self.markers > 0).then(|| self.marker_errors as f64 / self.markers as f64)
    }

    pub fn check_qber(&self) -> Option<f64> {
        (self.checks > 0).then(|| self.check_errors as f64 / self.checks as f64)
    }

    /// Key-basis QBER measured by error correction.
    pub fn ec_qber(&self) -> Option<f64> {
        match self.ec_errors {
            Some(e) if self.confirmed && self.key_bits > 0 => Some(e as f64 / self.key_bits as f64),
            _ => None,
        }
    }

    pub fn was_corrected(&self) -> bool {
        self.ec_errors.is_some()
    }
}

pub const EC_LOG_HEADER: &str = "block,start,end,detections,key_bits,markers,marker_errors,checks,check_errors,verdict,rolling_qber,ec_errors,lambda_ec,confirmed,true_error_k,realigning";

impl EcLogEntry {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{},{},{},{:.6},{}",
            self.block,
            self.start,
            self.end,
            self.detections,
            self.key_bits,
            self.markers,
            self.marker_errors,
            self.checks,
            self.check_errors,
            self.verdict,
            self.rolling_qber,
            self.ec_errors.map(|e| e.to_string()).unwrap_or_default(),
            self.lambda_ec,
            self.confirmed,
            self.true_error_k,
            self.realigning
        )
    }
}

/// A realignment command and its completion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealignEvent {
    /// End of the block whose rolling QBER triggered the command.
    pub triggered_at: f64,
    pub rolling_qber: f64,
    /// Block that ran first with the command applied.
    pub applied_block: u64,
    pub applied_at: f64,
    pub completes_at: f64,
}

/// Totals of one node's session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditSummary {
    pub role: &'static str,
    pub pulses: u64,
    pub acquisition_seconds: f64,
    pub raw_detections: u64,
    pub late_clicks: u64,
    pub sifted_key_bits: u64,
    pub corrected_bits: u64,
    pub secret_bits: u64,
    pub output_bits: u64,
    pub ec_blocks: u64,
    pub blocks_kept: u64,
    pub blocks_discarded: u64,
    pub blocks_empty: u64,
    pub blocks_dropped: u64,
    pub finite_key_blocks: u64,
    pub realignments: u64,
    pub mean_qber_k: f64,
    pub mean_qber_c: f64,
    pub mean_skr: f64,
    pub auth_bytes_consumed: u64,
    pub auth_bytes_refilled: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
}

impl AuditSummary {
    /// Secret bits left after paying for authentication.
    pub fn net_production_bits(&self) -> i64 {
        self.secret_bits as i64 - 8 * self.auth_bytes_consumed as i64
    }

    /// Authentication consumption as a fraction of produced secret key.
    pub fn auth_fraction(&self) -> f64 {
        if self.secret_bits == 0 {
            f64::INFINITY
        } else {
            8.0 * self.auth_bytes_consumed as f64 / self.secret_bits as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("role", self.role.to_string());
        kv("pulses", self.pulses.to_string());
        kv("acquisition_seconds", format!("{}", self.acquisition_seconds));
        kv("raw_detections", self.raw_detections.to_string());
        kv("late_clicks", self.late_clicks.to_string());
        kv("sifted_key_bits", self.sifted_key_bits.to_string());
        kv("corrected_bits", self.corrected_bits.to_string());
        kv("secret_bits", self.secret_bits.to_string());
        kv("output_bits", self.output_bits.to_string());
        kv("ec_blocks", self.ec_blocks.to_string());
        kv("blocks_kept", self.blocks_kept.to_string());
        kv("blocks_discarded", self.blocks_discarded.to_string());
        kv("blocks_empty", self.blocks_empty.to_string());
        kv("blocks_dropped", self.blocks_dropped.to_string());
        kv("finite_key_blocks", self.finite_key_blocks.to_string());
        kv("realignments", self.realignments.to_string());
        kv("mean_qber_k", format!("{:.6}", self.mean_qber_k));
        kv("mean_qber_c", format!("{:.6}", self.mean_qber_c));
        kv("mean_skr", format!("{:.3}", self.mean_skr));
        kv("auth_bytes_consumed", self.auth_bytes_consumed.to_string());
        kv("auth_bytes_refilled", self.auth_bytes_refilled.to_string());
        kv("net_production_bits", self.net_production_bits().to_string());
        kv("frames_sent", self.frames_sent.to_string());
        kv("frames_received", self.frames_received.to_string());
        s
    }
}

/// One finite-key block of final key in the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: u64,
    pub ec_blocks: (u64, u64),
    pub skl: u64,
    /// Bytes moved into the authentication reservoirs.
    pub auth_bytes: u64,
    pub output_bytes: u64,
    pub sha256: [u8; 32],
}

/// Final key of one node: raw bytes plus manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyStore {
    pub bytes: Vec<u8>,
    pub manifest: Vec<ManifestEntry>,
}

impl KeyStore {
    pub fn append(&mut self, entry_base: ManifestEntry, output: &[u8]) {
        let mut e = entry_base;
        e.output_bytes = output.len() as u64;
        e.sha256 = Sha256::digest(output).into();
        self.bytes.extend_from_slice(output);
        self.manifest.push(e);
    }

    pub fn manifest_text(&self) -> String {
        let mut s = String::from("index,first_ec_block,last_ec_block,skl,auth_bytes,output_bytes,sha256\n");
        for e in &self.manifest {
            let hex: String = e.sha256.iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{hex}",
                e.index, e.ec_blocks.0, e.ec_blocks.1, e.skl, e.auth_bytes, e.output_bytes
            );
        }
        s
    }
}

/// Writes `<role>.key`, `<role>.manifest` and `<role>.audit` into `dir`.
pub fn write_node_outputs(dir: &Path, role: &str, keys: &KeyStore, audit: &AuditSummary) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files = [
        (dir.join(format!("{role}.key")), keys.bytes.clone()),
        (dir.join(format!("{role}.manifest")), keys.manifest_text().into_bytes()),
        (dir.join(format!("{role}.audit")), audit.to_text().into_bytes()),
    ];
    let mut paths = Vec::new();
    for (path, bytes) in files {
        File::create(&path)?.write_all(&bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes the receiver's error-correction and realignment logs.
/// Bounds and key length of one closed finite-key block.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteKeyRecord {
    pub index: u64,
    pub sifted_bits: u64,
    /// None when the statistics were too thin for a phase-error bound.
    pub bounds: Option<BoundsBreakdown>,
    pub result: KeyBlockResult,
}

pub const FINITE_KEY_LOG_HEADER: &str = "index,sifted_bits,s0_lower_k,s0_upper_k,s1_lower_k,s0_lower_c,s1_lower_c,v1_upper_c,phi_upper,eps_term,lambda_ec,lambda_c,lambda_sec,skl,wall_time,skr";

impl FiniteKeyRecord {
    fn csv_row(&self) -> String {
        let (k, c) = (Basis::Key.index(), Basis::Check.index());
        let b = self.bounds.as_ref();
        let field = |f: &dyn Fn(&BoundsBreakdown) -> f64| b.map(|b| f(b).to_string()).unwrap_or_default();
        let r = &self.result;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.index,
            self.sifted_bits,
            field(&|b| b.s0_lower[k]),
            field(&|b| b.s0_upper[k]),
            field(&|b| b.s1_lower[k]),
            field(&|b| b.s0_lower[c]),
            field(&|b| b.s1_lower[c]),
            field(&|b| b.v1_upper_c),
            r.phi_upper,
            field(&|b| b.eps_alloc),
            r.lambda_ec,
            r.lambda_c,
            r.lambda_sec,
            r.skl,
            r.wall_time,
            r.skr
        )
    }
}

/// Writes `ec_log.csv`, `realign_log.csv` and `finite_key_log.csv`.
pub fn write_logs(
    dir: &Path,
    ec_log: &[EcLogEntry],
    realigns: &[RealignEvent],
    finite_key: &[FiniteKeyRecord],
) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = io::BufWriter::new(File::create(dir.join("ec_log.csv"))?);
    writeln!(f, "{EC_LOG_HEADER}")?;
    for e in ec_log {
        writeln!(f, "{}", e.csv_row())?;
    }
    f.flush()?;
    let mut f = io::BufWriter::new(File::create(dir.join("realign_log.csv"))?);
    writeln!(f, "triggered_at,rolling_qber,applied_block,applied_at,completes_at")?;
    for r in realigns {
        writeln!(
            f,
            "{},{:.6},{},{},{}",
            r.triggered_at, r.rolling_qber, r.applied_block, r.applied_at, r.completes_at
        )?;
    }
    f.flush()?;
    let mut f = io::BufWriter::new(File::create(dir.join("finite_key_log.csv"))?);
    writeln!(f, "{FINITE_KEY_LOG_HEADER}")?;
    for r in finite_key {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_header_and_rows() {
        let dir = std::env::temp_dir().join(format!("qkdtwin-metrics-{}", std::process::id()));
        let path = dir.join("m.csv");
        let mut w = MetricsWriter::create(Some(&path));
        for i in 0..60 {
            w.push(&MetricsRecord {
                t: (i + 1) as f64,
                qber_k: 0.02,
                qber_c: 0.018,
                skr: 0.0,
                detections: 100,
                realign_events: 0,
                blocks_discarded: 0,
            });
        }
        w.finish();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 61);
        assert_eq!(lines[0], METRICS_HEADER.join(","));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn unwritable_metrics_are_ignored() {
        let mut w = MetricsWriter::create(Some(Path::new("/proc/definitely/not/here.csv")));
        w.push(&MetricsRecord {
            t: 1.0,
            qber_k: 0.0,
            qber_c: 0.0,
            skr: 0.0,
            detections: 0,
            realign_events: 0,
            blocks_discarded: 0,
        });
        w.finish();
    }

    #[test]
    fn manifest_hashes_output() {
        let mut k = KeyStore::default();
        k.append(
            ManifestEntry {
                index: 0,
                ec_blocks: (3, 9),
                skl: 16,
                auth_bytes: 0,
                output_bytes: 0,
                sha256: [0; 32],
            },
            &[0xab, 0xcd],
        );
        let text = k.manifest_text();
        assert!(text.lines().nth(1).unwrap().starts_with("0,3,9,16,0,2,"));
        assert_eq!(k.bytes, vec![0xab, 0xcd]);
    }
}
