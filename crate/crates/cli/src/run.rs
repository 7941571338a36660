//! Running a pipeline: a root fed from a source, a relay, optional local
//! volunteers and an optional fault plan.

use std::sync::Arc;
use std::time::Duration;

use pando_core::{DemandSource, StreamError};
use pando_overlay::config::{ConfigError, OverlayConfig};
use pando_overlay::fault::{FaultPlan, Selector};
use pando_overlay::net::{
    serve_http, spawn_relay, spawn_root, spawn_volunteer, InprocNet, JobRunner, NodeHandle,
    NodeOptions, RelayHandle, RootEvent, Transport,
};
use pando_overlay::node::Role;
use pando_worker::FunctionSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::sync::mpsc::unbounded_channel;
use tracing::{info, warn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Inproc,
    Socket,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelaySetting {
    /// Start a relay in this process on the given port (0 picks one).
    Port(u16),
    /// Use a relay already running there.
    External(String),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub function: FunctionSpec,
    pub overlay: OverlayConfig,
    pub relay: RelaySetting,
    pub transport: TransportKind,
    /// In-process volunteers to start alongside the root.
    pub local: usize,
    pub seed: u64,
    pub faults: FaultPlan,
    /// Serve the volunteer page and websocket endpoint on this port.
    pub http_port: Option<u16>,
    /// Give up after this long.
    pub watchdog: Option<Duration>,
}

impl RunConfig {
    pub fn new(function: FunctionSpec) -> Self {
        Self {
            function,
            overlay: OverlayConfig::default(),
            relay: RelaySetting::Port(0),
            transport: TransportKind::Socket,
            local: 0,
            seed: 0,
            faults: Vec::new(),
            http_port: None,
            watchdog: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error("stream failed: {0}")]
    Stream(StreamError),
    #[error("no result within {0:?}")]
    Timeout(Duration),
    #[error("root stopped without finishing")]
    Lost,
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.to_string())
    }
}

impl RunError {
    /// Process exit status: 2 for configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub fn job_runner(spec: &FunctionSpec) -> JobRunner {
    match spec {
        FunctionSpec::Builtin(b) => JobRunner::Builtin(b.clone()),
        other => {
            let spec = other.clone();
            JobRunner::Function(Arc::new(move || spec.instantiate()))
        }
    }
}

fn listen_addr(transport: &Transport) -> String {
    match transport {
        Transport::Tcp => "127.0.0.1:0".into(),
        Transport::Inproc(_) => String::new(),
    }
}

/// Runs `input` through the overlay, handing each result line to `emit` in
/// input order.
pub async fn run_pipeline(
    cfg: RunConfig,
    input: DemandSource<String>,
    mut emit: impl FnMut(String),
) -> Result<(), RunError> {
    cfg.overlay.validate()?;
    let transport = match cfg.transport {
        TransportKind::Inproc => Transport::Inproc(InprocNet::default()),
        TransportKind::Socket => Transport::Tcp,
    };
    let mut _relay: Option<RelayHandle> = None;
    let relay_addr = match (&cfg.relay, cfg.transport) {
        (RelaySetting::External(addr), TransportKind::Socket) => addr.clone(),
        (RelaySetting::External(_), TransportKind::Inproc) => {
            return Err(RunError::Config(
                "an external relay needs the socket transport".into(),
            ))
        }
        (RelaySetting::Port(port), kind) => {
            let addr = match kind {
                TransportKind::Socket => format!("0.0.0.0:{port}"),
                TransportKind::Inproc => String::new(),
            };
            let relay = spawn_relay(transport.clone(), &addr, None)
                .await
                .map_err(|e| RunError::Config(format!("cannot start relay on {addr}: {e}")))?;
            let addr = relay.addr.clone();
            if kind == TransportKind::Socket {
                eprintln!("pando: relay listening on {addr}");
            }
            _relay = Some(relay);
            addr
        }
    };
    let relay_addr = relay_addr.replace("0.0.0.0", "127.0.0.1");
    let _http = match (cfg.http_port, &_relay) {
        (Some(port), Some(relay)) => {
            let (addr, task) = serve_http(relay, &format!("0.0.0.0:{port}"), None)
                .await
                .map_err(|e| RunError::Config(format!("cannot serve http on port {port}: {e}")))?;
            eprintln!("pando: volunteer page on http://{addr}/");
            Some(task)
        }
        (Some(_), None) => return Err(RunError::Config("--http-port needs a local relay".into())),
        _ => None,
    };

    let runner = job_runner(&cfg.function);
    let (events_tx, mut events) = unbounded_channel();
    let root_opts = NodeOptions {
        transport: transport.clone(),
        relay: Some(relay_addr.clone()),
        listen: listen_addr(&transport),
        runner: runner.clone(),
        seed: cfg.seed,
        behind_relay: false,
    };
    let root = spawn_root(cfg.overlay.clone(), input, root_opts, events_tx)
        .await
        .map_err(|e| RunError::Config(format!("cannot start root: {e}")))?;

    let mut locals = Vec::with_capacity(cfg.local);
    for k in 0..cfg.local {
        let opts = NodeOptions {
            transport: transport.clone(),
            relay: Some(relay_addr.clone()),
            listen: listen_addr(&transport),
            runner: runner.clone(),
            seed: cfg.seed.wrapping_add(1 + k as u64),
            behind_relay: false,
        };
        let v = spawn_volunteer(cfg.overlay.clone(), opts)
            .await
            .map_err(|e| RunError::Config(format!("cannot start volunteer: {e}")))?;
        locals.push(v);
    }
    let locals = Arc::new(locals);
    let faults = (!cfg.faults.is_empty())
        .then(|| tokio::spawn(inject(cfg.faults.clone(), locals.clone(), cfg.seed)));

    let deadline = cfg.watchdog.map(|d| tokio::time::Instant::now() + d);
    let result = loop {
        let next = match deadline {
            Some(at) => match tokio::time::timeout_at(at, events.recv()).await {
                Ok(ev) => ev,
                Err(_) => break Err(RunError::Timeout(cfg.watchdog.expect("deadline set"))),
            },
            None => events.recv().await,
        };
        match next {
            Some(RootEvent::Line(line)) => emit(line),
            Some(RootEvent::Finished(Ok(()))) => break Ok(()),
            Some(RootEvent::Finished(Err(e))) => break Err(RunError::Stream(e)),
            None => break Err(RunError::Lost),
        }
    };
    if let Some(f) = faults {
        f.abort();
    }
    drop(root);
    result
}

/// Kills local volunteers following `plan`, times counted from the call.
pub async fn inject(plan: FaultPlan, nodes: Arc<Vec<NodeHandle>>, seed: u64) {
    let start = tokio::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6661_756c_7473);
    for fault in plan {
        tokio::time::sleep_until(start + fault.at()).await;
        let mut candidates: Vec<usize> = (0..nodes.len())
            .filter(|&i| !nodes[i].is_finished())
            .filter(|&i| {
                let info = nodes[i].info();
                match fault.select {
                    Selector::Leaf => info.role == Some(Role::Processor) && info.parent.is_some(),
                    Selector::Coordinator => info.role == Some(Role::Coordinator),
                    Selector::Id(id) => info.id == Some(id),
                }
            })
            .collect();
        if candidates.is_empty() {
            warn!(select = %fault.select, "fault selector matched no volunteer");
            continue;
        }
        for _ in 0..fault.count.min(candidates.len()) {
            let victim = candidates.swap_remove(rng.random_range(0..candidates.len()));
            info!(id = ?nodes[victim].info().id, "killing volunteer");
            nodes[victim].kill();
        }
    }
}
