use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use pando_core::{DemandSource, StreamError};
use pando_worker::{Builtin, JobFunction, JobResult, Processor};
use parking_lot::Mutex;
use serde_json::json;
use tokio::sync::mpsc::{unbounded_channel, UnboundedSender};
use tokio::task::JoinHandle;
use tokio::time::Instant;
use tracing::{debug, warn};

use super::{Duplex, Listener, Transport};
use crate::config::OverlayConfig;
use crate::id::NodeId;
use crate::node::{Action, ConnId, Input, Peer, Role, TreeNode, INBOUND};
use crate::wire::{Boot, Frame};

/// How a node executes its jobs.
#[derive(Clone)]
pub enum JobRunner {
    /// Computed on the blocking pool after the function's delay elapses on
    /// the runtime's timer.
    Builtin(Builtin),
    /// Anything else; each node gets its own sequential processor thread.
    /// The factory is called once per node (exec functions start one
    /// child process per node).
    Function(Arc<dyn Fn() -> Arc<dyn JobFunction> + Send + Sync>),
}

pub struct NodeOptions {
    pub transport: Transport,
    /// Relay address; `None` runs a root without a relay.
    pub relay: Option<String>,
    /// Where this node accepts children (`127.0.0.1:0`, or empty inproc).
    pub listen: String,
    pub runner: JobRunner,
    pub seed: u64,
    /// Join through relay-spliced channels instead of accepting connections.
    pub behind_relay: bool,
}

/// Externally visible state, refreshed after every step.
#[derive(Debug, Clone, Default)]
pub struct NodeInfo {
    pub id: Option<NodeId>,
    pub role: Option<Role>,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub subtree_nodes: u64,
    pub jobs_done: u64,
    pub parents_lost: u64,
    pub description: String,
}

pub enum RootEvent {
    Line(String),
    Finished(Result<(), StreamError>),
}

pub struct NodeHandle {
    pub info: Arc<Mutex<NodeInfo>>,
    pub addr: String,
    task: JoinHandle<()>,
}

impl NodeHandle {
    pub fn info(&self) -> NodeInfo {
        self.info.lock().clone()
    }

    /// Stops the node abruptly; its connections close.
    pub fn kill(&self) {
        self.task.abort();
    }

    pub fn is_finished(&self) -> bool {
        self.task.is_finished()
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

enum Ev {
    Line(ConnId, String),
    Eof(ConnId),
    Connected(ConnId, Duplex),
    ConnectFailed(ConnId),
    Accepted(Duplex),
    JobDone(u64, JobResult),
    Wake,
}

pub async fn spawn_root(
    cfg: OverlayConfig,
    input: DemandSource<String>,
    opts: NodeOptions,
    events: UnboundedSender<RootEvent>,
) -> std::io::Result<NodeHandle> {
    let listener = opts.transport.listen(&opts.listen).await?;
    let signal = json!({ "addr": listener.addr() });
    let node = TreeNode::root(cfg, input, signal, opts.seed, opts.relay.is_some());
    Ok(spawn(node, listener, opts, Some(events)))
}

pub async fn spawn_volunteer(cfg: OverlayConfig, opts: NodeOptions) -> std::io::Result<NodeHandle> {
    let listener = opts.transport.listen(&opts.listen).await?;
    let node = if opts.behind_relay {
        TreeNode::volunteer_behind_relay(cfg, opts.seed)
    } else {
        TreeNode::volunteer(cfg, json!({ "addr": listener.addr() }), opts.seed)
    };
    Ok(spawn(node, listener, opts, None))
}

fn spawn(
    node: TreeNode,
    listener: Listener,
    opts: NodeOptions,
    root_events: Option<UnboundedSender<RootEvent>>,
) -> NodeHandle {
    let info = Arc::new(Mutex::new(NodeInfo::default()));
    let addr = listener.addr().to_owned();
    let driver = Driver {
        node,
        opts,
        info: info.clone(),
        root_events,
        conns: HashMap::new(),
        readers: HashMap::new(),
        next_inbound: INBOUND,
        timer: None,
        start: Instant::now(),
        processor: None,
    };
    let task = tokio::spawn(driver.run(listener));
    NodeHandle { info, addr, task }
}

struct Driver {
    node: TreeNode,
    opts: NodeOptions,
    info: Arc<Mutex<NodeInfo>>,
    root_events: Option<UnboundedSender<RootEvent>>,
    conns: HashMap<ConnId, UnboundedSender<String>>,
    readers: HashMap<ConnId, JoinHandle<()>>,
    next_inbound: ConnId,
    timer: Option<Duration>,
    start: Instant,
    processor: Option<Processor>,
}

impl Drop for Driver {
    fn drop(&mut self) {
        for r in self.readers.values() {
            r.abort();
        }
    }
}

impl Driver {
    async fn run(mut self, mut listener: Listener) {
        let (tx, mut rx) = unbounded_channel::<Ev>();
        let pending_wake = Arc::new(AtomicBool::new(false));
        {
            let (tx, pending) = (tx.clone(), pending_wake.clone());
            self.node.set_waker(Arc::new(move || {
                if !pending.swap(true, Ordering::SeqCst) {
                    let _ = tx.send(Ev::Wake);
                }
            }));
        }
        if let JobRunner::Function(make) = &self.opts.runner {
            let tx = tx.clone();
            self.processor = Some(Processor::spawn(make(), move |job, r| {
                let _ = tx.send(Ev::JobDone(job, r));
            }));
        }
        self.apply(Input::Start, &tx);
        loop {
            let sleep_until = self.timer.map(|t| self.start + t);
            let ev = tokio::select! {
                ev = rx.recv() => match ev {
                    Some(ev) => ev,
                    None => return,
                },
                acc = listener.accept() => match acc {
                    Ok(d) => Ev::Accepted(d),
                    Err(e) => {
                        warn!(error = %e, "listener failed");
                        tokio::time::sleep(Duration::from_millis(100)).await;
                        continue;
                    }
                },
                _ = async { tokio::time::sleep_until(sleep_until.expect("guarded")).await },
                    if sleep_until.is_some() => {
                    self.timer = None;
                    self.apply(Input::Timer, &tx);
                    continue;
                }
            };
            let input = match ev {
                Ev::Line(conn, line) => match Frame::decode(&line) {
                    Ok(f) => Input::Frame(conn, f),
                    Err(e) => {
                        debug!(conn, error = %e, "undecodable line ignored");
                        continue;
                    }
                },
                Ev::Eof(conn) => {
                    self.conns.remove(&conn);
                    self.readers.remove(&conn);
                    Input::Closed(conn)
                }
                Ev::Connected(conn, duplex) => {
                    self.attach(conn, duplex, &tx);
                    Input::Connected(conn)
                }
                Ev::ConnectFailed(conn) => Input::ConnectFailed(conn),
                Ev::Accepted(duplex) => {
                    let conn = self.next_inbound;
                    self.next_inbound += 1;
                    self.attach(conn, duplex, &tx);
                    Input::Accepted(conn)
                }
                Ev::JobDone(job, result) => Input::JobDone { job, result },
                Ev::Wake => {
                    pending_wake.store(false, Ordering::SeqCst);
                    Input::Wake
                }
            };
            self.apply(input, &tx);
            if self.node.is_finished() {
                // Give queued frames a moment to flush, then stop.
                return;
            }
        }
    }

    fn attach(&mut self, conn: ConnId, duplex: Duplex, tx: &UnboundedSender<Ev>) {
        let Duplex { tx: out, mut rx } = duplex;
        self.conns.insert(conn, out);
        let events = tx.clone();
        self.readers.insert(
            conn,
            tokio::spawn(async move {
                while let Some(line) = rx.recv().await {
                    if events.send(Ev::Line(conn, line)).is_err() {
                        return;
                    }
                }
                let _ = events.send(Ev::Eof(conn));
            }),
        );
    }

    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn apply(&mut self, input: Input, tx: &UnboundedSender<Ev>) {
        let is_timer = input == Input::Timer;
        let actions = self.node.step(self.now(), input);
        for a in actions {
            self.act(a, tx);
        }
        let mut info = self.info.lock();
        info.id = self.node.id();
        info.role = Some(self.node.role());
        info.parent = self.node.parent();
        info.children = self.node.children();
        info.subtree_nodes = self.node.subtree_nodes();
        info.jobs_done = self.node.stats().jobs_done;
        info.parents_lost = self.node.stats().parents_lost;
        if is_timer {
            info.description = self.node.describe();
        }
    }

    fn act(&mut self, action: Action, tx: &UnboundedSender<Ev>) {
        match action {
            Action::Connect { conn, peer } => {
                let transport = self.opts.transport.clone();
                let relay = self.opts.relay.clone();
                let tx = tx.clone();
                tokio::spawn(async move {
                    let result = match peer {
                        Peer::Relay => match relay {
                            Some(r) => transport.connect(&r).await,
                            None => Err(std::io::Error::other("no relay configured")),
                        },
                        Peer::RelayBind(token) => match relay {
                            Some(r) => transport.connect(&r).await.and_then(|d| {
                                d.tx.send(Frame::from(Boot::Bind { token }).encode())
                                    .map_err(|_| std::io::Error::other("relay closed"))?;
                                Ok(d)
                            }),
                            None => Err(std::io::Error::other("no relay configured")),
                        },
                        Peer::Signal(signal) => match signal["addr"].as_str() {
                            Some(addr) => transport.connect(addr).await,
                            None => Err(std::io::Error::other("signal without an address")),
                        },
                    };
                    let _ = tx.send(match result {
                        Ok(d) => Ev::Connected(conn, d),
                        Err(e) => {
                            debug!(conn, error = %e, "connect failed");
                            Ev::ConnectFailed(conn)
                        }
                    });
                });
            }
            Action::Send(conn, frame) => {
                if let Some(out) = self.conns.get(&conn) {
                    let _ = out.send(frame.encode());
                }
            }
            Action::Close(conn) => {
                self.conns.remove(&conn);
                if let Some(r) = self.readers.remove(&conn) {
                    r.abort();
                }
            }
            Action::Schedule(at) => self.timer = Some(at),
            Action::StartJob { job, payload } => match &self.opts.runner {
                JobRunner::Builtin(b) => {
                    let b = b.clone();
                    let tx = tx.clone();
                    tokio::spawn(async move {
                        tokio::time::sleep(b.delay()).await;
                        let result = tokio::task::spawn_blocking(move || b.compute(&payload))
                            .await
                            .unwrap_or_else(|e| Err(pando_worker::JobError::worker(e.to_string())));
                        let _ = tx.send(Ev::JobDone(job, result));
                    });
                }
                JobRunner::Function(_) => {
                    self.processor
                        .as_ref()
                        .expect("processor started")
                        .submit(job, payload);
                }
            },
            Action::Emit(line) => {
                if let Some(ev) = &self.root_events {
                    let _ = ev.send(RootEvent::Line(line));
                }
            }
            Action::Finished(result) => {
                if let Some(ev) = &self.root_events {
                    let _ = ev.send(RootEvent::Finished(result));
                }
            }
        }
    }
}
