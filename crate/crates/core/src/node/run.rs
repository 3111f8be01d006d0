//! Session entry points: the in-process orchestrator and the TCP daemons.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use crate::classical::{memory_pair, tcp_stream, DirectionKeys, Link, Sender};

use super::alice::{run_alice, AliceReport};
use super::bob::{run_bob, BobReport};
use super::config::{Role, SessionConfig};
use super::output::{write_logs, write_node_outputs, AuditSummary, MetricsWriter};
use super::{direction_keys, exit, session_id, SessionError};

/// Outcome of one run, whatever the role.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionReport {
    pub exit_code: u8,
    pub error: Option<String>,
    pub alice: Option<AliceReport>,
    pub bob: Option<BobReport>,
}

impl SessionReport {
    fn failed(e: &SessionError) -> Self {
        Self {
            exit_code: e.exit_code(),
            error: Some(e.to_string()),
            ..Default::default()
        }
    }
}

/// Runs the configured role.
pub fn run_session(cfg: &SessionConfig) -> SessionReport {
    match cfg.role {
        Role::Orchestrator => run_orchestrator(cfg),
        Role::Alice => run_alice_daemon(cfg),
        Role::Bob => run_bob_daemon(cfg),
    }
}

fn link_for<S: Read + Write>(cfg: &SessionConfig, stream: S, me: Sender, keys: (DirectionKeys, DirectionKeys)) -> Link<S> {
    let (a2b, b2a) = keys;
    let (out, inc) = match me {
        Sender::Alice => (a2b, b2a),
        Sender::Bob => (b2a, a2b),
    };
    let mut link = Link::new(stream, me, session_id(cfg.seed), out, inc);
    if let Some(f) = cfg.fault.filter(|f| f.sender == me) {
        link.set_corrupt_frame(Some(f.sequence));
    }
    link
}

/// Zero-length run: empty outputs for the given roles.
fn empty_run(cfg: &SessionConfig, roles: &[Sender]) -> SessionReport {
    let mut report = SessionReport::default();
    MetricsWriter::create(cfg.metrics.as_deref()).finish();
    for &r in roles {
        match r {
            Sender::Alice => {
                let mut a = AliceReport::default();
                a.audit.role = "alice";
                report.alice = Some(a);
            }
            Sender::Bob => {
                let mut b = BobReport::default();
                b.audit.role = "bob";
                report.bob = Some(b);
            }
        }
    }
    write_outputs(cfg, &mut report);
    report
}

fn write_outputs(cfg: &SessionConfig, report: &mut SessionReport) {
    let Some(dir) = &cfg.keys else { return };
    let mut res = Ok(());
    if let Some(a) = &report.alice {
        res = res.and(write_node_outputs(dir, "alice", &a.keys, &a.audit).map(|_| ()));
    }
    if let Some(b) = &report.bob {
        res = res.and(write_node_outputs(dir, "bob", &b.keys, &b.audit).map(|_| ()));
        res = res.and(write_logs(dir, &b.ec_log, &b.realigns, &b.finite_key));
    }
    if let Err(e) = res {
        let e = SessionError::Io(e);
        report.exit_code = e.exit_code();
        report.error = Some(format!("writing outputs: {e}"));
    }
}

/// Both nodes in one process over an in-memory byte stream.
pub fn run_orchestrator(cfg: &SessionConfig) -> SessionReport {
    if cfg.pulse_budget() == 0 {
        return empty_run(cfg, &[Sender::Alice, Sender::Bob]);
    }
    let keys = match direction_keys(cfg) {
        Ok(k) => k,
        Err(e) => return SessionReport::failed(&e),
    };
    let started = Instant::now();
    let (sa, sb) = memory_pair(64);
    let alice_cfg = cfg.clone();
    let alice_keys = keys.clone();
    let alice = std::thread::Builder::new()
        .name("alice".into())
        .spawn(move || {
            let mut link = link_for(&alice_cfg, sa, Sender::Alice, alice_keys);
            run_alice(&alice_cfg, &mut link)
        })
        .expect("spawn alice thread");
    let bob_result = {
        let mut link = link_for(cfg, sb, Sender::Bob, keys);
        run_bob(cfg, &mut link)
    };
    let alice_result = alice
        .join()
        .unwrap_or_else(|_| Err(SessionError::Protocol("transmitter thread panicked".into())));
    log::info!("session finished in {:.1} s", started.elapsed().as_secs_f64());

    let mut report = SessionReport::default();
    // A node that saw its peer abort or hang up reports a consequence;
    // prefer the error of the node that failed first.
    let cause = match (&bob_result, &alice_result) {
        (Err(b), Err(a)) if b.peer_informed() && !a.peer_informed() => Some(a),
        (Err(b), _) => Some(b),
        (Ok(_), Err(a)) => Some(a),
        _ => None,
    };
    if let Some(e) = cause {
        report.exit_code = e.exit_code();
        report.error = Some(e.to_string());
    }
    report.bob = bob_result.ok();
    report.alice = alice_result.ok();
    if report.exit_code == exit::OK {
        write_outputs(cfg, &mut report);
    }
    report
}

/// Transmitter daemon: accepts one connection on the endpoint.
pub fn run_alice_daemon(cfg: &SessionConfig) -> SessionReport {
    if cfg.pulse_budget() == 0 {
        return empty_run(cfg, &[Sender::Alice]);
    }
    let result = (|| {
        let keys = direction_keys(cfg)?;
        let listener = TcpListener::bind(&cfg.endpoint)?;
        log::info!("alice listening on {}", listener.local_addr()?);
        let (stream, peer) = listener.accept()?;
        log::info!("alice: connection from {peer}");
        let mut link = link_for(cfg, tcp_stream(stream)?, Sender::Alice, keys);
        run_alice(cfg, &mut link)
    })();
    finish_daemon(cfg, result.map(|a| (Some(a), None)))
}

/// Receiver daemon: connects to the endpoint, retrying for a while, and
/// hosts the link simulator.
pub fn run_bob_daemon(cfg: &SessionConfig) -> SessionReport {
    if cfg.pulse_budget() == 0 {
        return empty_run(cfg, &[Sender::Bob]);
    }
    let result = (|| {
        let keys = direction_keys(cfg)?;
        let stream = connect_with_retry(&cfg.endpoint, Duration::from_secs(30))?;
        let mut link = link_for(cfg, tcp_stream(stream)?, Sender::Bob, keys);
        run_bob(cfg, &mut link)
    })();
    finish_daemon(cfg, result.map(|b| (None, Some(b))))
}

fn connect_with_retry(endpoint: &str, patience: Duration) -> std::io::Result<TcpStream> {
    let deadline = Instant::now() + patience;
    loop {
        match TcpStream::connect(endpoint) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}

type NodeReports = (Option<AliceReport>, Option<BobReport>);

fn finish_daemon(cfg: &SessionConfig, result: Result<NodeReports, SessionError>) -> SessionReport {
    match result {
        Ok((alice, bob)) => {
            let mut report = SessionReport {
                alice,
                bob,
                ..Default::default()
            };
            write_outputs(cfg, &mut report);
            report
        }
        Err(e) => SessionReport::failed(&e),
    }
}

impl SessionReport {
    /// The receiver's audit if present, else the transmitter's.
    pub fn audit(&self) -> Option<&AuditSummary> {
        self.bob.as_ref().map(|b| &b.audit).or(self.alice.as_ref().map(|a| &a.audit))
    }
}
