//! One member of the tree, without I/O.
//!
//! [`TreeNode::step`] takes the current time and one [`Input`] (connection
//! event, decoded frame, timer, finished job) and returns the [`Action`]s a
//! driver must carry out. The same state machine runs under the
//! discrete-event simulator and the socket driver.
//!
//! Data flow: the root lends its input stream through a [`LendLedger`];
//! every other node lends the values pushed by its parent. Each connected
//! child is a gated sub-stream of that ledger, and so is the local
//! processor while the node has no children. Results come back in input
//! order and go to the parent, or to the output at the root.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use pando_core::{
    drain, gate, open_substream, pushable, DemandSource, LendLedger, LimitGate, PushHandle,
    StreamError, SubStream, SubStreamState, Ticket,
};
use pando_worker::{JobError, JobResult};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tracing::{debug, info, warn};

use crate::config::OverlayConfig;
use crate::id::{NodeId, Token};
use crate::wire::{Boot, Ctrl, Data, Frame, JoinRequest};

/// Connection handle. Ids the node allocates for its own outgoing
/// connections are below [`INBOUND`]; drivers number accepted connections
/// from `INBOUND` upwards.
pub type ConnId = u64;
pub const INBOUND: ConnId = 1 << 63;

/// Where an outgoing connection goes.
#[derive(Debug, Clone, PartialEq)]
pub enum Peer {
    /// The bootstrap relay.
    Relay,
    /// The node described by an answer signal.
    Signal(Value),
    /// The relay, binding the given token so it splices this connection
    /// with the peer's.
    RelayBind(Token),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Start,
    Connected(ConnId),
    ConnectFailed(ConnId),
    Accepted(ConnId),
    Frame(ConnId, Frame),
    Closed(ConnId),
    Timer,
    JobDone {
        job: u64,
        result: JobResult,
    },
    /// Something queued work from another thread.
    Wake,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Connect {
        conn: ConnId,
        peer: Peer,
    },
    Send(ConnId, Frame),
    Close(ConnId),
    /// Deliver [`Input::Timer`] at this time, replacing earlier requests.
    Schedule(Duration),
    StartJob {
        job: u64,
        payload: String,
    },
    /// One output line (root only).
    Emit(String),
    /// The output stream ended (root only).
    Finished(Result<(), StreamError>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Candidate,
    Processor,
    Coordinator,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub jobs_started: u64,
    pub jobs_done: u64,
    pub joins_accepted: u64,
    pub joins_delegated: u64,
    pub joins_queued: u64,
    pub children_lost: u64,
    pub slots_purged: u64,
    pub parents_lost: u64,
    pub join_attempts: u64,
}

type Ledger = LendLedger<String, JobResult>;
type LaneId = u64;

enum Note {
    Dispatch {
        lane: LaneId,
        ticket: Ticket<String>,
    },
    Result {
        epoch: u64,
        result: JobResult,
    },
    ResultsEnded {
        epoch: u64,
        outcome: Result<(), StreamError>,
    },
}

/// Work queued by stream callbacks, which may run inside library calls or
/// on other threads; drained at the end of every step.
#[derive(Default)]
struct Mailbox {
    notes: Mutex<VecDeque<Note>>,
    waker: Mutex<Option<Arc<dyn Fn() + Send + Sync>>>,
}

impl Mailbox {
    fn post(&self, note: Note) {
        self.notes.lock().push_back(note);
        let waker = self.waker.lock().clone();
        if let Some(w) = waker {
            w();
        }
    }

    fn take(&self) -> Option<Note> {
        self.notes.lock().pop_front()
    }
}

enum LaneTarget {
    Local,
    Child(usize),
}

struct Lane {
    target: LaneTarget,
    sub: SubStream<String, JobResult>,
    gate: LimitGate<Ticket<String>>,
    /// Sequence numbers handed to the target and not answered yet.
    dispatched: BTreeSet<u64>,
}

struct Flow {
    epoch: u64,
    ledger: Ledger,
    /// Feed of values from the parent; `None` at the root.
    feed: Option<PushHandle<String>>,
    /// Parent sequence numbers of the values in the ledger, in ledger order.
    origins: VecDeque<u64>,
}

enum Slot {
    Empty,
    Pending {
        since: Duration,
        origin: NodeId,
        token: Token,
        relay: bool,
        ctrl: Option<ConnId>,
        data_token: Option<Token>,
    },
    Connected {
        child: NodeId,
        ctrl: ConnId,
        data: ConnId,
        lane: LaneId,
        leaves: u64,
        nodes: u64,
        last_heard: Duration,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConnRole {
    Boot,
    ParentCtrl,
    ParentData,
    /// Accepted (or relay-bound) and not yet identified by its first frame.
    Inbound(Duration),
    ChildCtrl(usize),
    ChildData(usize),
}

enum Stage {
    Idle,
    Waiting {
        until: Duration,
    },
    Registering {
        boot: ConnId,
    },
    Joining {
        boot: ConnId,
        deadline: Duration,
    },
    Handshake {
        boot: ConnId,
        ctrl: ConnId,
        parent: NodeId,
        signal: Value,
        token: Token,
        data: Option<(ConnId, Token)>,
        deadline: Duration,
    },
    Member {
        parent: NodeId,
        ctrl: ConnId,
        data: ConnId,
        last_heard: Duration,
    },
}

pub struct TreeNode {
    cfg: OverlayConfig,
    root: bool,
    id: Option<NodeId>,
    /// What accepting nodes put in answers so candidates can reach them.
    local_signal: Value,
    /// This node cannot accept connections; its parent reaches it through
    /// relay-spliced channels.
    behind_relay: bool,
    rng: ChaCha8Rng,
    mailbox: Arc<Mailbox>,
    started: bool,

    next_conn: ConnId,
    next_lane: LaneId,
    next_job: u64,
    epoch: u64,

    stage: Stage,
    /// Root only: the standing relay connection.
    relay: Option<ConnId>,
    relay_up: bool,
    relay_retry: Option<Duration>,
    retries: u32,
    conns: BTreeMap<ConnId, ConnRole>,
    slots: Vec<Slot>,
    queued: Vec<VecDeque<JoinRequest>>,

    input: Option<DemandSource<String>>,
    flow: Option<Flow>,
    lanes: BTreeMap<LaneId, Lane>,
    local_lane: Option<LaneId>,
    jobs: BTreeMap<u64, (LaneId, u64)>,
    attempts: BTreeMap<u64, u32>,
    finished: bool,

    next_heartbeat: Duration,
    next_status: Duration,
    scheduled: Option<Duration>,
    stats: NodeStats,
}

impl TreeNode {
    fn new(cfg: OverlayConfig, root: bool, local_signal: Value, seed: u64) -> Self {
        let slots = (0..cfg.max_degree).map(|_| Slot::Empty).collect();
        let queued = (0..cfg.max_degree).map(|_| VecDeque::new()).collect();
        Self {
            cfg,
            root,
            id: None,
            local_signal,
            behind_relay: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mailbox: Arc::default(),
            started: false,
            next_conn: 1,
            next_lane: 1,
            next_job: 1,
            epoch: 0,
            stage: Stage::Idle,
            relay: None,
            relay_up: false,
            relay_retry: None,
            retries: 0,
            conns: BTreeMap::new(),
            slots,
            queued,
            input: None,
            flow: None,
            lanes: BTreeMap::new(),
            local_lane: None,
            jobs: BTreeMap::new(),
            attempts: BTreeMap::new(),
            finished: false,
            next_heartbeat: Duration::ZERO,
            next_status: Duration::ZERO,
            scheduled: None,
            stats: NodeStats::default(),
        }
    }

    /// The client: lends `input` to the tree and emits results in order.
    /// `use_relay` false runs without a relay (local processing only).
    pub fn root(
        cfg: OverlayConfig,
        input: DemandSource<String>,
        local_signal: Value,
        seed: u64,
        use_relay: bool,
    ) -> Self {
        let mut node = Self::new(cfg, true, local_signal, seed);
        node.input = Some(input);
        node.relay_retry = use_relay.then_some(Duration::ZERO);
        node
    }

    /// A volunteer that joins through the relay.
    pub fn volunteer(cfg: OverlayConfig, local_signal: Value, seed: u64) -> Self {
        Self::new(cfg, false, local_signal, seed)
    }

    /// A volunteer that cannot accept connections, like a browser tab.
    pub fn volunteer_behind_relay(cfg: OverlayConfig, seed: u64) -> Self {
        let mut node = Self::new(cfg, false, Value::Null, seed);
        node.behind_relay = true;
        node
    }

    /// Called whenever a stream callback queues work from outside `step`;
    /// the driver should then deliver [`Input::Wake`].
    pub fn set_waker(&self, waker: Arc<dyn Fn() + Send + Sync>) {
        *self.mailbox.waker.lock() = Some(waker);
    }

    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    pub fn is_root(&self) -> bool {
        self.root
    }

    pub fn config(&self) -> &OverlayConfig {
        &self.cfg
    }

    pub fn role(&self) -> Role {
        if !self.root && !self.is_member() {
            Role::Candidate
        } else if self.root || self.child_count() > 0 {
            Role::Coordinator
        } else {
            Role::Processor
        }
    }

    pub fn is_member(&self) -> bool {
        matches!(self.stage, Stage::Member { .. })
    }

    pub fn parent(&self) -> Option<NodeId> {
        match self.stage {
            Stage::Member { parent, .. } => Some(parent),
            _ => None,
        }
    }

    pub fn child_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Connected { .. }))
            .count()
    }

    /// Slots holding a connected child or a pending candidate.
    pub fn occupied(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| !matches!(s, Slot::Empty))
            .count()
    }

    pub fn children(&self) -> Vec<NodeId> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Connected { child, .. } => Some(*child),
                _ => None,
            })
            .collect()
    }

    /// Whether the local processor lane is taking jobs.
    pub fn processing(&self) -> bool {
        self.local_lane
            .and_then(|l| self.lanes.get(&l))
            .is_some_and(|l| l.sub.state() == SubStreamState::Open)
    }

    /// Leaf count of this subtree as reported upwards.
    pub fn subtree_leaves(&self) -> u64 {
        if self.child_count() == 0 {
            return 1;
        }
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Connected { leaves, .. } => *leaves,
                _ => 0,
            })
            .sum()
    }

    /// Node count of this subtree, from the children's latest reports.
    pub fn subtree_nodes(&self) -> u64 {
        1 + self
            .slots
            .iter()
            .map(|s| match s {
                Slot::Connected { nodes, .. } => *nodes,
                _ => 0,
            })
            .sum::<u64>()
    }

    /// Gate capacity currently applied to each connected child.
    pub fn child_capacities(&self) -> Vec<(NodeId, usize)> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Connected { child, lane, .. } => {
                    Some((*child, self.lanes.get(lane)?.gate.capacity()))
                }
                _ => None,
            })
            .collect()
    }

    pub fn stats(&self) -> NodeStats {
        self.stats
    }

    pub fn ledger_stats(&self) -> Option<pando_core::LedgerStats> {
        self.flow.as_ref().map(|f| f.ledger.stats())
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// One-line summary for stall diagnostics.
    pub fn describe(&self) -> String {
        let snap = self.flow.as_ref().map(|f| f.ledger.snapshot());
        format!(
            "node {} role {:?} children {} occupied {} processing {} jobs {} ledger {:?}",
            self.id.map(|i| i.to_string()).unwrap_or_else(|| "-".into()),
            self.role(),
            self.child_count(),
            self.occupied(),
            self.processing(),
            self.jobs.len(),
            snap,
        )
    }

    pub fn step(&mut self, now: Duration, input: Input) -> Vec<Action> {
        let mut out = Vec::new();
        match input {
            Input::Start => self.start(now, &mut out),
            Input::Connected(conn) => self.connected(now, conn, &mut out),
            Input::ConnectFailed(conn) => self.connection_lost(now, conn, &mut out),
            Input::Accepted(conn) => {
                self.conns.insert(conn, ConnRole::Inbound(now));
            }
            Input::Frame(conn, frame) => self.frame(now, conn, frame, &mut out),
            Input::Closed(conn) => self.connection_lost(now, conn, &mut out),
            Input::Timer => self.timer(now, &mut out),
            Input::JobDone { job, result } => self.job_done(job, result),
            Input::Wake => {}
        }
        self.process_mailbox(&mut out);
        if !self.finished {
            self.schedule(now, &mut out);
        }
        out
    }

    fn new_conn(&mut self) -> ConnId {
        let c = self.next_conn;
        self.next_conn += 1;
        c
    }

    fn token(&mut self) -> Token {
        NodeId(self.rng.random())
    }

    // ---- lifecycle ---------------------------------------------------------

    fn start(&mut self, now: Duration, out: &mut Vec<Action>) {
        if self.started {
            return;
        }
        self.started = true;
        self.next_heartbeat = now + self.cfg.heartbeat_interval;
        self.next_status = now + self.cfg.status_interval;
        if self.root {
            let input = self.input.take().expect("root input");
            self.open_flow(input, None);
            self.update_local_lane();
            if self.relay_retry.is_some() {
                self.connect_relay(out);
            }
        } else {
            self.begin_join(out);
        }
    }

    fn open_flow(&mut self, source: DemandSource<String>, feed: Option<PushHandle<String>>) {
        self.epoch += 1;
        let epoch = self.epoch;
        let ledger = Ledger::new(source);
        let (mb, mb_end) = (self.mailbox.clone(), self.mailbox.clone());
        drain(
            ledger.result_source(),
            move |result| mb.post(Note::Result { epoch, result }),
            move |outcome| mb_end.post(Note::ResultsEnded { epoch, outcome }),
        );
        self.flow = Some(Flow {
            epoch,
            ledger,
            feed,
            origins: VecDeque::new(),
        });
    }

    fn open_lane(&mut self, target: LaneTarget, capacity: usize) -> LaneId {
        let flow = self.flow.as_ref().expect("lanes need a flow");
        let id = self.next_lane;
        self.next_lane += 1;
        let sub = open_substream(&flow.ledger, id);
        let (gated, gate_handle) = gate(sub.outgoing(), capacity);
        self.lanes.insert(
            id,
            Lane {
                target,
                sub,
                gate: gate_handle,
                dispatched: BTreeSet::new(),
            },
        );
        let mb = self.mailbox.clone();
        drain(
            gated,
            move |ticket| mb.post(Note::Dispatch { lane: id, ticket }),
            |_| {},
        );
        id
    }

    /// The local processor runs exactly while the node is attached and has
    /// no connected child.
    fn update_local_lane(&mut self) {
        let attached = self.root || self.is_member();
        let want = attached && self.flow.is_some() && self.child_count() == 0;
        if want && !self.processing() {
            self.local_lane = Some(self.open_lane(LaneTarget::Local, 1));
        } else if !want {
            if let Some(lane) = self.local_lane.and_then(|l| self.lanes.get(&l)) {
                lane.sub.close();
            }
        }
    }

    // ---- joining (candidate side) ------------------------------------------

    fn begin_join(&mut self, out: &mut Vec<Action>) {
        let boot = self.new_conn();
        self.conns.insert(boot, ConnRole::Boot);
        self.stage = Stage::Registering { boot };
        self.stats.join_attempts += 1;
        out.push(Action::Connect {
            conn: boot,
            peer: Peer::Relay,
        });
    }

    /// Drops a failed join attempt and schedules the next one.
    fn retry_join(&mut self, now: Duration, out: &mut Vec<Action>) {
        for conn in self.candidate_conns() {
            self.conns.remove(&conn);
            out.push(Action::Close(conn));
        }
        self.retries += 1;
        let until = now + self.cfg.retry_delay(self.retries);
        debug!(retries = self.retries, ?until, "join attempt failed");
        self.stage = Stage::Waiting { until };
    }

    fn candidate_conns(&self) -> Vec<ConnId> {
        match self.stage {
            Stage::Registering { boot } | Stage::Joining { boot, .. } => vec![boot],
            Stage::Handshake {
                boot, ctrl, data, ..
            } => {
                let mut v = vec![boot, ctrl];
                v.extend(data.map(|(c, _)| c));
                v
            }
            _ => vec![],
        }
    }

    fn join_signal(&self) -> Value {
        if self.behind_relay {
            json!({ "relay": true })
        } else {
            json!({})
        }
    }

    fn peer_for(&self, signal: &Value, token: Token) -> Peer {
        if self.behind_relay {
            Peer::RelayBind(token)
        } else {
            Peer::Signal(signal.clone())
        }
    }

    fn become_member(
        &mut self,
        now: Duration,
        parent: NodeId,
        ctrl: ConnId,
        data: ConnId,
        out: &mut Vec<Action>,
    ) {
        self.conns.insert(ctrl, ConnRole::ParentCtrl);
        self.conns.insert(data, ConnRole::ParentData);
        self.stage = Stage::Member {
            parent,
            ctrl,
            data,
            last_heard: now,
        };
        self.retries = 0;
        let (source, feed) = pushable();
        self.open_flow(source, Some(feed));
        self.update_local_lane();
        info!(id = ?self.id, %parent, "joined the tree");
        self.send_status(out);
    }

    // ---- connections -------------------------------------------------------

    fn connected(&mut self, now: Duration, conn: ConnId, out: &mut Vec<Action>) {
        if Some(conn) == self.relay {
            self.relay_up = true;
            out.push(Action::Send(
                conn,
                Boot::Register {
                    role: Some("root".into()),
                }
                .into(),
            ));
            return;
        }
        match self.stage {
            Stage::Registering { boot } if boot == conn => {
                out.push(Action::Send(conn, Boot::Register { role: None }.into()));
                return;
            }
            Stage::Handshake {
                boot,
                ctrl,
                parent,
                token,
                data,
                ..
            } => {
                let id = self.id.expect("registered");
                if ctrl == conn {
                    out.push(Action::Send(
                        conn,
                        Boot::Join(JoinRequest {
                            origin: id,
                            signal: json!({ "token": token }),
                            destination: Some(parent),
                        })
                        .into(),
                    ));
                    self.conns.remove(&boot);
                    out.push(Action::Close(boot));
                    return;
                }
                if let Some((data, data_token)) = data.filter(|(c, _)| *c == conn) {
                    out.push(Action::Send(
                        data,
                        Ctrl::OpenData { token: data_token }.into(),
                    ));
                    self.become_member(now, parent, ctrl, data, out);
                    return;
                }
            }
            _ => {}
        }
        if matches!(self.conns.get(&conn), Some(ConnRole::Inbound(_))) {
            // A relay-bound channel: the candidate's first frame follows.
            return;
        }
        debug!(conn, "connect completion for a forgotten connection");
        out.push(Action::Close(conn));
    }

    fn connection_lost(&mut self, now: Duration, conn: ConnId, out: &mut Vec<Action>) {
        if Some(conn) == self.relay {
            self.relay = None;
            self.relay_up = false;
            self.retries += 1;
            self.relay_retry = Some(now + self.cfg.retry_delay(self.retries));
            warn!("lost the relay connection; will reconnect");
            return;
        }
        let Some(role) = self.conns.remove(&conn) else {
            return;
        };
        match role {
            ConnRole::Boot => {
                if !matches!(self.stage, Stage::Handshake { .. }) {
                    self.retry_join(now, out);
                }
            }
            ConnRole::ParentCtrl | ConnRole::ParentData => {
                if self.is_member() {
                    self.parent_lost(now, out);
                } else {
                    self.retry_join(now, out);
                }
            }
            ConnRole::Inbound(_) => {}
            ConnRole::ChildCtrl(slot) | ConnRole::ChildData(slot) => self.drop_slot(now, slot, out),
        }
    }

    fn connect_relay(&mut self, out: &mut Vec<Action>) {
        let conn = self.new_conn();
        self.relay = Some(conn);
        self.relay_retry = None;
        out.push(Action::Connect {
            conn,
            peer: Peer::Relay,
        });
    }

    // ---- frames ------------------------------------------------------------

    fn frame(&mut self, now: Duration, conn: ConnId, frame: Frame, out: &mut Vec<Action>) {
        if Some(conn) == self.relay {
            return self.relay_frame(now, frame, out);
        }
        let Some(&role) = self.conns.get(&conn) else {
            return;
        };
        match role {
            ConnRole::Boot => self.boot_frame(now, conn, frame, out),
            ConnRole::ParentCtrl | ConnRole::ParentData => {
                if let Stage::Member { last_heard, .. } = &mut self.stage {
                    *last_heard = now;
                    self.parent_frame(now, frame, out);
                } else {
                    self.handshake_frame(conn, frame, out);
                }
            }
            ConnRole::Inbound(_) => self.inbound_frame(now, conn, frame, out),
            ConnRole::ChildCtrl(slot) | ConnRole::ChildData(slot) => {
                self.child_frame(now, slot, frame, out)
            }
        }
    }

    fn relay_frame(&mut self, now: Duration, frame: Frame, out: &mut Vec<Action>) {
        match frame {
            Frame::Boot(Boot::Id { id }) => {
                info!(%id, "root registered");
                self.id = Some(id);
                self.retries = 0;
            }
            Frame::Boot(Boot::Join(req)) => self.route_join(now, req, out),
            Frame::Boot(Boot::Reject { reason, .. }) => {
                warn!(%reason, "relay rejected root registration; retrying");
                if let Some(conn) = self.relay.take() {
                    out.push(Action::Close(conn));
                }
                self.relay_up = false;
                self.retries += 1;
                self.relay_retry = Some(now + self.cfg.retry_delay(self.retries));
            }
            other => debug!(?other, "ignored relay frame"),
        }
    }

    fn boot_frame(&mut self, now: Duration, conn: ConnId, frame: Frame, out: &mut Vec<Action>) {
        match (frame, &self.stage) {
            (Frame::Boot(Boot::Id { id }), Stage::Registering { boot }) if *boot == conn => {
                self.id = Some(id);
                let deadline = now + self.cfg.candidate_timeout;
                self.stage = Stage::Joining {
                    boot: conn,
                    deadline,
                };
                out.push(Action::Send(
                    conn,
                    Boot::Join(JoinRequest {
                        origin: id,
                        signal: self.join_signal(),
                        destination: None,
                    })
                    .into(),
                ));
            }
            (Frame::Boot(Boot::Join(answer)), &Stage::Joining { boot, deadline })
                if boot == conn && Some(answer.origin) == self.id =>
            {
                let Some(parent) = answer.destination else {
                    return;
                };
                let Some(token) = answer.signal["token"].as_str().and_then(|s| s.parse().ok())
                else {
                    warn!("answer without a token ignored");
                    return;
                };
                let ctrl = self.new_conn();
                self.conns.insert(ctrl, ConnRole::ParentCtrl);
                let peer = self.peer_for(&answer.signal, token);
                self.stage = Stage::Handshake {
                    boot: conn,
                    ctrl,
                    parent,
                    signal: answer.signal,
                    token,
                    data: None,
                    deadline,
                };
                out.push(Action::Connect { conn: ctrl, peer });
            }
            (Frame::Boot(Boot::Reject { reason, .. }), _) => {
                debug!(%reason, "join rejected");
                self.retry_join(now, out);
            }
            (other, _) => debug!(?other, "ignored bootstrap frame"),
        }
    }

    fn handshake_frame(&mut self, conn: ConnId, frame: Frame, out: &mut Vec<Action>) {
        let Stage::Handshake {
            ctrl,
            data: None,
            ref signal,
            ..
        } = self.stage
        else {
            return;
        };
        if conn != ctrl {
            return;
        }
        if let Frame::Ctrl(Ctrl::OpenData { token }) = frame {
            let peer = self.peer_for(signal, token);
            let data = self.new_conn();
            if let Stage::Handshake { data: d, .. } = &mut self.stage {
                *d = Some((data, token));
            }
            self.conns.insert(data, ConnRole::ParentData);
            out.push(Action::Connect { conn: data, peer });
        }
    }

    fn parent_frame(&mut self, now: Duration, frame: Frame, out: &mut Vec<Action>) {
        match frame {
            Frame::Data(Data::Value { seq, payload }) => {
                if let Some(flow) = &mut self.flow {
                    flow.origins.push_back(seq);
                    flow.feed.as_ref().expect("member feed").push(payload);
                }
            }
            Frame::Boot(Boot::Join(req)) => self.route_join(now, req, out),
            Frame::Ctrl(Ctrl::Heartbeat { .. }) => {}
            other => debug!(?other, "ignored frame from parent"),
        }
    }

    fn inbound_frame(&mut self, now: Duration, conn: ConnId, frame: Frame, out: &mut Vec<Action>) {
        match frame {
            Frame::Boot(Boot::Join(req)) if req.destination == self.id && self.id.is_some() => {
                let token: Option<Token> =
                    req.signal["token"].as_str().and_then(|s| s.parse().ok());
                let found = self.slots.iter().position(|s| {
                    matches!(s, Slot::Pending { origin, token: t, ctrl: None, .. }
                        if *origin == req.origin && Some(*t) == token)
                });
                let Some(i) = found else {
                    debug!(origin = %req.origin, "control connection matches no pending slot");
                    self.conns.remove(&conn);
                    out.push(Action::Close(conn));
                    return;
                };
                let data_token = self.token();
                if let Slot::Pending {
                    ctrl,
                    data_token: dt,
                    relay,
                    ..
                } = &mut self.slots[i]
                {
                    *ctrl = Some(conn);
                    *dt = Some(data_token);
                    if *relay {
                        let bind = self.next_conn;
                        self.next_conn += 1;
                        self.conns.insert(bind, ConnRole::Inbound(now));
                        out.push(Action::Connect {
                            conn: bind,
                            peer: Peer::RelayBind(data_token),
                        });
                    }
                }
                self.conns.insert(conn, ConnRole::ChildCtrl(i));
                out.push(Action::Send(
                    conn,
                    Ctrl::OpenData { token: data_token }.into(),
                ));
            }
            Frame::Ctrl(Ctrl::OpenData { token }) => {
                let found = self.slots.iter().position(
                    |s| matches!(s, Slot::Pending { data_token: Some(t), ctrl: Some(_), .. } if *t == token),
                );
                let Some(i) = found else {
                    self.conns.remove(&conn);
                    out.push(Action::Close(conn));
                    return;
                };
                self.child_connected(now, i, conn, out);
            }
            other => {
                debug!(?other, "unexpected first frame on inbound connection");
                self.conns.remove(&conn);
                out.push(Action::Close(conn));
            }
        }
    }

    fn child_connected(&mut self, now: Duration, i: usize, data: ConnId, out: &mut Vec<Action>) {
        let Slot::Pending {
            origin,
            ctrl: Some(ctrl),
            ..
        } = self.slots[i]
        else {
            unreachable!("slot checked pending");
        };
        self.conns.insert(data, ConnRole::ChildData(i));
        let lane = self.open_lane(LaneTarget::Child(i), self.cfg.child_capacity(1));
        self.slots[i] = Slot::Connected {
            child: origin,
            ctrl,
            data,
            lane,
            leaves: 1,
            nodes: 1,
            last_heard: now,
        };
        debug!(child = %origin, slot = i, "child connected");
        self.update_local_lane();
        for req in std::mem::take(&mut self.queued[i]) {
            out.push(Action::Send(ctrl, Boot::Join(req).into()));
        }
    }

    fn child_frame(&mut self, now: Duration, i: usize, frame: Frame, out: &mut Vec<Action>) {
        let Slot::Connected {
            lane,
            leaves,
            nodes,
            last_heard,
            ..
        } = &mut self.slots[i]
        else {
            return;
        };
        *last_heard = now;
        let lane = *lane;
        match frame {
            Frame::Data(Data::Result { seq, ok, payload }) => {
                let result = if ok {
                    Ok(payload)
                } else {
                    let (code, message) = payload.split_once(' ').unwrap_or((&payload, ""));
                    Err(JobError::new(code, message))
                };
                self.lane_result(lane, seq, result);
            }
            Frame::Ctrl(Ctrl::Status {
                leaves: l,
                nodes: n,
            }) => {
                *leaves = l.max(1);
                *nodes = n.unwrap_or(1).max(1);
                let capacity = self.cfg.child_capacity(l);
                if let Some(lane) = self.lanes.get(&lane) {
                    if lane.gate.capacity() != capacity {
                        lane.gate.set_capacity(capacity);
                    }
                }
            }
            Frame::Boot(Boot::Join(answer)) if answer.destination.is_some() => {
                self.send_up(answer, out);
            }
            Frame::Ctrl(Ctrl::Heartbeat { .. }) => {}
            other => debug!(?other, "ignored frame from child"),
        }
    }

    // ---- routing -----------------------------------------------------------

    fn route_join(&mut self, now: Duration, req: JoinRequest, out: &mut Vec<Action>) {
        let Some(me) = self.id else {
            return;
        };
        if let Some(dest) = req.destination {
            // A follow-up signal for a candidate already accepted somewhere
            // below: it follows the same hash path.
            if dest != me && self.occupied() == self.cfg.max_degree {
                self.delegate(me, req, out);
            }
            return;
        }
        if self.root {
            if let Some(cap) = self.cfg.max_nodes {
                let pending = self
                    .slots
                    .iter()
                    .filter(|s| matches!(s, Slot::Pending { .. }))
                    .count() as u64;
                if self.subtree_nodes() + pending >= cap as u64 {
                    out.extend(self.relay.map(|c| {
                        Action::Send(
                            c,
                            Boot::Reject {
                                origin: Some(req.origin),
                                reason: "tree is full".into(),
                            }
                            .into(),
                        )
                    }));
                    return;
                }
            }
        }
        match self.slots.iter().position(|s| matches!(s, Slot::Empty)) {
            Some(i) => self.accept(now, me, i, req, out),
            None => self.delegate(me, req, out),
        }
    }

    fn accept(
        &mut self,
        now: Duration,
        me: NodeId,
        i: usize,
        req: JoinRequest,
        out: &mut Vec<Action>,
    ) {
        let token = self.token();
        let relay = req.signal["relay"].as_bool() == Some(true);
        self.slots[i] = Slot::Pending {
            since: now,
            origin: req.origin,
            token,
            relay,
            ctrl: None,
            data_token: None,
        };
        self.stats.joins_accepted += 1;
        let mut signal = if relay {
            json!({ "relay": true })
        } else {
            self.local_signal.clone()
        };
        if !signal.is_object() {
            signal = json!({});
        }
        signal["token"] = json!(token);
        if relay {
            let bind = self.new_conn();
            self.conns.insert(bind, ConnRole::Inbound(now));
            out.push(Action::Connect {
                conn: bind,
                peer: Peer::RelayBind(token),
            });
        }
        self.send_up(
            JoinRequest {
                origin: req.origin,
                signal,
                destination: Some(me),
            },
            out,
        );
    }

    fn delegate(&mut self, me: NodeId, req: JoinRequest, out: &mut Vec<Action>) {
        let h = me.delegate_index(req.origin, self.cfg.max_degree);
        match &self.slots[h] {
            Slot::Connected { ctrl, .. } => {
                self.stats.joins_delegated += 1;
                out.push(Action::Send(*ctrl, Boot::Join(req).into()));
            }
            Slot::Pending { .. } => {
                self.stats.joins_queued += 1;
                self.queued[h].push_back(req);
            }
            Slot::Empty => {
                debug_assert!(false, "delegation to an empty slot of a full node");
            }
        }
    }

    /// Sends an answer towards the relay.
    fn send_up(&mut self, answer: JoinRequest, out: &mut Vec<Action>) {
        if self.root {
            match self.relay.filter(|_| self.relay_up) {
                Some(conn) => out.push(Action::Send(conn, Boot::Join(answer).into())),
                None => debug!("answer dropped: no relay connection"),
            }
        } else if let Stage::Member { ctrl, .. } = self.stage {
            out.push(Action::Send(ctrl, Boot::Join(answer).into()));
        }
    }

    // ---- losses ------------------------------------------------------------

    /// Empties slot `i`, closing its connections and re-lending whatever the
    /// child held. Queued requests for the slot are routed again.
    fn drop_slot(&mut self, now: Duration, i: usize, out: &mut Vec<Action>) {
        let old = std::mem::replace(&mut self.slots[i], Slot::Empty);
        let conns: Vec<ConnId> = match old {
            Slot::Empty => return,
            Slot::Pending { ctrl, .. } => {
                self.stats.slots_purged += 1;
                ctrl.into_iter().collect()
            }
            Slot::Connected {
                ctrl,
                data,
                lane,
                child,
                ..
            } => {
                self.stats.children_lost += 1;
                if let Some(lane) = self.lanes.remove(&lane) {
                    let relent = lane.sub.fail();
                    debug!(%child, relent, "child lost");
                }
                vec![ctrl, data]
            }
        };
        // Data connections of half-open handshakes are still inbound.
        self.conns.retain(|c, r| {
            let mine = matches!(r, ConnRole::ChildCtrl(s) | ConnRole::ChildData(s) if *s == i);
            if mine || conns.contains(c) {
                out.push(Action::Close(*c));
                false
            } else {
                true
            }
        });
        self.update_local_lane();
        let requeue = std::mem::take(&mut self.queued[i]);
        for req in requeue {
            self.route_join(now, req, out);
        }
    }

    fn parent_lost(&mut self, now: Duration, out: &mut Vec<Action>) {
        self.stats.parents_lost += 1;
        info!(id = ?self.id, "parent lost; resetting subtree and re-joining");
        if let Stage::Member { ctrl, data, .. } = self.stage {
            for c in [ctrl, data] {
                if self.conns.remove(&c).is_some() {
                    out.push(Action::Close(c));
                }
            }
        }
        self.reset_subtree(out);
        self.id = None;
        // Spread the subtree's re-joins over one retry period.
        let jitter = self.cfg.retry_base.mul_f64(self.rng.random::<f64>());
        self.stage = Stage::Waiting {
            until: now + jitter,
        };
    }

    /// Forgets all children and in-flight work; children notice their
    /// connections closing and re-join on their own.
    fn reset_subtree(&mut self, out: &mut Vec<Action>) {
        for i in 0..self.slots.len() {
            self.slots[i] = Slot::Empty;
            self.queued[i].clear();
        }
        for (c, r) in std::mem::take(&mut self.conns) {
            match r {
                ConnRole::Boot | ConnRole::ParentCtrl | ConnRole::ParentData => {
                    self.conns.insert(c, r);
                }
                _ => out.push(Action::Close(c)),
            }
        }
        for lane in std::mem::take(&mut self.lanes).into_values() {
            lane.sub.fail();
        }
        self.local_lane = None;
        self.jobs.clear();
        if let Some(flow) = self.flow.take() {
            let err = StreamError::new("ERESET", "node left the tree");
            if let Some(feed) = &flow.feed {
                feed.fail(err.clone());
            }
            flow.ledger.terminate(err);
        }
    }

    // ---- jobs and results --------------------------------------------------

    fn job_done(&mut self, job: u64, result: JobResult) {
        let Some((lane, seq)) = self.jobs.remove(&job) else {
            return;
        };
        self.stats.jobs_done += 1;
        self.lane_result(lane, seq, result);
    }

    fn lane_result(&mut self, lane_id: LaneId, seq: u64, result: JobResult) {
        let Some(lane) = self.lanes.get_mut(&lane_id) else {
            return;
        };
        if !lane.dispatched.remove(&seq) {
            return;
        }
        let (sub, gate_handle) = (lane.sub.clone(), lane.gate.clone());
        match result {
            Ok(r) => {
                self.attempts.remove(&seq);
                sub.settle(seq, Ok(r));
            }
            Err(e) if self.root => {
                let n = self.attempts.entry(seq).or_insert(0);
                *n += 1;
                if *n >= self.cfg.job_max_attempts {
                    warn!(seq, attempts = *n, error = %e, "input keeps failing; giving up");
                    let flow = self.flow.as_ref().expect("root flow");
                    flow.ledger.terminate(StreamError::new(
                        e.code.clone(),
                        format!("input {seq} failed {} times: {}", *n, e.message),
                    ));
                    sub.fail_ticket(seq);
                } else {
                    debug!(seq, error = %e, "job failed; lending again");
                    sub.fail_ticket(seq);
                }
            }
            // Below the root a failure travels up as a result so the root
            // alone counts attempts.
            Err(e) => {
                sub.settle(seq, Err(e));
            }
        }
        gate_handle.release();
    }

    fn process_mailbox(&mut self, out: &mut Vec<Action>) {
        while let Some(note) = self.mailbox.take() {
            match note {
                Note::Dispatch { lane, ticket } => self.dispatch(lane, ticket, out),
                Note::Result { epoch, result } => self.result_out(epoch, result, out),
                Note::ResultsEnded { epoch, outcome } => {
                    if self.root && self.flow.as_ref().is_some_and(|f| f.epoch == epoch) {
                        self.finished = true;
                        out.push(Action::Finished(outcome));
                    }
                }
            }
        }
    }

    fn dispatch(&mut self, lane_id: LaneId, ticket: Ticket<String>, out: &mut Vec<Action>) {
        let Some(lane) = self.lanes.get_mut(&lane_id) else {
            return;
        };
        lane.dispatched.insert(ticket.seq);
        match lane.target {
            LaneTarget::Local => {
                let job = self.next_job;
                self.next_job += 1;
                self.jobs.insert(job, (lane_id, ticket.seq));
                self.stats.jobs_started += 1;
                out.push(Action::StartJob {
                    job,
                    payload: ticket.value,
                });
            }
            LaneTarget::Child(i) => match &self.slots[i] {
                Slot::Connected { data, .. } => out.push(Action::Send(
                    *data,
                    Data::Value {
                        seq: ticket.seq,
                        payload: ticket.value,
                    }
                    .into(),
                )),
                _ => unreachable!("child lanes are removed with their slot"),
            },
        }
    }

    fn result_out(&mut self, epoch: u64, result: JobResult, out: &mut Vec<Action>) {
        let Some(flow) = self.flow.as_mut().filter(|f| f.epoch == epoch) else {
            return;
        };
        if self.root {
            match result {
                Ok(line) => out.push(Action::Emit(line)),
                Err(e) => flow.ledger.terminate(StreamError::new(e.code, e.message)),
            }
            return;
        }
        let seq = flow.origins.pop_front().expect("one origin per value");
        if let Stage::Member { data, .. } = self.stage {
            let (ok, payload) = match result {
                Ok(r) => (true, r),
                Err(e) => (false, format!("{} {}", e.code, e.message)),
            };
            out.push(Action::Send(data, Data::Result { seq, ok, payload }.into()));
        }
    }

    // ---- timers ------------------------------------------------------------

    fn timer(&mut self, now: Duration, out: &mut Vec<Action>) {
        self.scheduled = None;
        if self.relay_retry.is_some_and(|at| at <= now) && self.relay.is_none() {
            self.connect_relay(out);
        }
        match self.stage {
            Stage::Waiting { until } if until <= now => self.begin_join(out),
            Stage::Joining { deadline, .. } | Stage::Handshake { deadline, .. }
                if deadline <= now =>
            {
                debug!("candidate timed out");
                self.retry_join(now, out);
            }
            Stage::Member { last_heard, .. } if now > last_heard + self.cfg.heartbeat_timeout => {
                self.parent_lost(now, out);
            }
            _ => {}
        }

        for i in 0..self.slots.len() {
            let expired = match &self.slots[i] {
                Slot::Pending { since, .. } => now >= *since + self.cfg.candidate_timeout,
                Slot::Connected { last_heard, .. } => {
                    now > *last_heard + self.cfg.heartbeat_timeout
                }
                Slot::Empty => false,
            };
            if expired {
                self.drop_slot(now, i, out);
            }
        }
        let stale: Vec<ConnId> = self
            .conns
            .iter()
            .filter_map(|(c, r)| match r {
                ConnRole::Inbound(at) if now >= *at + self.cfg.candidate_timeout => Some(*c),
                _ => None,
            })
            .collect();
        for c in stale {
            self.conns.remove(&c);
            out.push(Action::Close(c));
        }

        if now >= self.next_heartbeat {
            self.next_heartbeat = now + self.cfg.heartbeat_interval;
            let beat = Frame::Ctrl(Ctrl::Heartbeat {
                ts: now.as_millis() as u64,
            });
            if let Stage::Member { ctrl, .. } = self.stage {
                out.push(Action::Send(ctrl, beat.clone()));
            }
            for s in &self.slots {
                if let Slot::Connected { ctrl, .. } = s {
                    out.push(Action::Send(*ctrl, beat.clone()));
                }
            }
        }
        if now >= self.next_status {
            self.next_status = now + self.cfg.status_interval;
            self.send_status(out);
        }
    }

    fn send_status(&mut self, out: &mut Vec<Action>) {
        if let Stage::Member { ctrl, .. } = self.stage {
            out.push(Action::Send(
                ctrl,
                Ctrl::Status {
                    leaves: self.subtree_leaves(),
                    nodes: Some(self.subtree_nodes()),
                }
                .into(),
            ));
        }
    }

    fn next_deadline(&self) -> Duration {
        let mut at = self.next_heartbeat.min(self.next_status);
        let mut consider = |t: Duration| at = at.min(t);
        if let (Some(t), None) = (self.relay_retry, self.relay) {
            consider(t);
        }
        match self.stage {
            Stage::Waiting { until } => consider(until),
            Stage::Joining { deadline, .. } | Stage::Handshake { deadline, .. } => {
                consider(deadline)
            }
            Stage::Member { last_heard, .. } => {
                consider(last_heard + self.cfg.heartbeat_timeout + Duration::from_millis(1))
            }
            _ => {}
        }
        for s in &self.slots {
            match s {
                Slot::Pending { since, .. } => consider(*since + self.cfg.candidate_timeout),
                Slot::Connected { last_heard, .. } => {
                    consider(*last_heard + self.cfg.heartbeat_timeout + Duration::from_millis(1))
                }
                Slot::Empty => {}
            }
        }
        for r in self.conns.values() {
            if let ConnRole::Inbound(t) = r {
                consider(*t + self.cfg.candidate_timeout);
            }
        }
        at
    }

    fn schedule(&mut self, now: Duration, out: &mut Vec<Action>) {
        if !self.started {
            return;
        }
        let at = self.next_deadline().max(now);
        if self.scheduled != Some(at) {
            self.scheduled = Some(at);
            out.push(Action::Schedule(at));
        }
    }
}
