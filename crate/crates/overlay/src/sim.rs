//! Discrete-event simulation of a whole run: one root, a relay and any
//! number of volunteers, all real [`TreeNode`]s, exchanging frames over
//! simulated links in virtual time.
//!
//! Everything random (identities, latencies, job costs, fault targets)
//! comes from one seeded generator and every collection iterates in a
//! fixed order, so a seed and a configuration determine the whole run.
//! [`Sim::event_hash`] fingerprints the event sequence to check that.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::time::Duration;

use pando_core::{DemandSource, StreamError};
use pando_worker::{Builtin, JobResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tracing::warn;

use crate::config::OverlayConfig;
use crate::fault::{Fault, Selector};
use crate::id::{fnv1a64, NodeId};
use crate::node::{Action, ConnId, Input, Peer, Role, TreeNode, INBOUND};
use crate::relay::{RelayAction, RelayCore};
use crate::wire::{Boot, Frame};

/// How long a job occupies its processor.
#[derive(Debug, Clone, PartialEq)]
pub enum JobCost {
    /// The function's own delay (one second for `sleep-square`).
    Intrinsic,
    Fixed(Duration),
    Uniform(Duration, Duration),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillMode {
    /// Connections close; peers notice at once.
    Crash,
    /// The node goes silent; peers notice through heartbeats.
    Silent,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub overlay: OverlayConfig,
    pub seed: u64,
    pub function: Builtin,
    pub cost: JobCost,
    /// One-way frame latency, drawn uniformly per frame (FIFO per link).
    pub latency: (Duration, Duration),
    pub connect_delay: Duration,
    pub kill_mode: KillMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            overlay: OverlayConfig::default(),
            seed: 0,
            function: Builtin::Square,
            cost: JobCost::Intrinsic,
            latency: (Duration::from_millis(1), Duration::from_millis(5)),
            connect_delay: Duration::from_millis(20),
            kill_mode: KillMode::Crash,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum End {
    Relay,
    Node(usize),
}

#[derive(Debug)]
enum Event {
    Start(usize),
    Connected(usize, ConnId),
    ConnectFailed(usize, ConnId),
    Accepted(usize, ConnId),
    Deliver(End, ConnId, Frame),
    Closed(End, ConnId),
    Timer(usize, u64),
    JobDone(usize, u64, JobResult),
    Fault(Fault),
}

struct Queued {
    at: Duration,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct SimNode {
    node: TreeNode,
    alive: bool,
    timer_gen: u64,
    busy_until: Duration,
    next_inbound: ConnId,
}

/// Node index of the root.
pub const ROOT: usize = 0;

pub struct Sim {
    cfg: SimConfig,
    now: Duration,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    rng: ChaCha8Rng,
    relay: RelayCore,
    next_relay_conn: u64,
    nodes: Vec<SimNode>,
    links: BTreeMap<(End, ConnId), (End, ConnId)>,
    /// Last scheduled arrival per directed link, for FIFO delivery.
    arrival: BTreeMap<(End, ConnId), Duration>,
    /// Relay connections that bound a token and await their partner; frames
    /// sent on them are held until the splice.
    held: BTreeMap<u64, Vec<Frame>>,
    output: Vec<(Duration, String)>,
    finished: Option<(Duration, Result<(), StreamError>)>,
    hash: u64,
    events: u64,
    kills: Vec<(Duration, NodeId)>,
}

impl Sim {
    pub fn new(cfg: SimConfig, input: DemandSource<String>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut id_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let relay = RelayCore::new(move || id_rng.random());
        let root = TreeNode::root(
            cfg.overlay.clone(),
            input,
            json!({ "addr": ROOT }),
            rng.random(),
            true,
        );
        let mut sim = Self {
            cfg,
            now: Duration::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            rng,
            relay,
            next_relay_conn: 1,
            nodes: Vec::new(),
            links: BTreeMap::new(),
            arrival: BTreeMap::new(),
            held: BTreeMap::new(),
            output: Vec::new(),
            finished: None,
            hash: fnv1a64(b""),
            events: 0,
            kills: Vec::new(),
        };
        sim.add(root, Duration::ZERO);
        sim
    }

    fn add(&mut self, node: TreeNode, at: Duration) -> usize {
        let i = self.nodes.len();
        self.nodes.push(SimNode {
            node,
            alive: true,
            timer_gen: 0,
            busy_until: Duration::ZERO,
            next_inbound: INBOUND,
        });
        self.push(at, Event::Start(i));
        i
    }

    /// Adds a volunteer that starts joining at `at`.
    pub fn add_volunteer(&mut self, at: Duration) -> usize {
        let seed = self.rng.random();
        let i = self.nodes.len();
        let node = TreeNode::volunteer(self.cfg.overlay.clone(), json!({ "addr": i }), seed);
        self.add(node, at)
    }

    /// Adds a volunteer that can only be reached through relay-spliced
    /// channels.
    pub fn add_relayed_volunteer(&mut self, at: Duration) -> usize {
        let seed = self.rng.random();
        let node = TreeNode::volunteer_behind_relay(self.cfg.overlay.clone(), seed);
        self.add(node, at)
    }

    /// Adds `n` volunteers with start times spread uniformly over `spread`.
    pub fn add_volunteers(&mut self, n: usize, start: Duration, spread: Duration) -> Vec<usize> {
        (0..n)
            .map(|_| {
                let at = start + spread.mul_f64(self.rng.random::<f64>());
                self.add_volunteer(at)
            })
            .collect()
    }

    pub fn schedule_fault(&mut self, fault: Fault) {
        self.push(fault.at(), Event::Fault(fault));
    }

    fn push(&mut self, at: Duration, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            at,
            seq: self.seq,
            event,
        }));
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn output(&self) -> impl Iterator<Item = &str> {
        self.output.iter().map(|(_, l)| l.as_str())
    }

    /// Arrival times of the output lines.
    pub fn output_times(&self) -> impl Iterator<Item = Duration> + '_ {
        self.output.iter().map(|(t, _)| *t)
    }

    pub fn finished(&self) -> Option<&(Duration, Result<(), StreamError>)> {
        self.finished.as_ref()
    }

    pub fn event_hash(&self) -> u64 {
        self.hash
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    /// Kills of nodes that had an identity at the time; a volunteer killed
    /// while re-registering has none and is not listed.
    pub fn kills(&self) -> &[(Duration, NodeId)] {
        &self.kills
    }

    pub fn node(&self, i: usize) -> &TreeNode {
        &self.nodes[i].node
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_alive(&self, i: usize) -> bool {
        self.nodes[i].alive
    }

    pub fn alive_volunteers(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.nodes.len()).filter(|&i| self.nodes[i].alive)
    }

    /// Runs until the root finishes, the queue empties or `limit` passes.
    pub fn run(&mut self, limit: Duration) -> bool {
        self.run_until(limit, |s| s.finished.is_some())
    }

    /// Runs until `done` holds (checked after every event), the queue
    /// empties or virtual time would pass `limit`. Returns whether `done`
    /// held.
    pub fn run_until(&mut self, limit: Duration, mut done: impl FnMut(&Sim) -> bool) -> bool {
        loop {
            if done(self) {
                return true;
            }
            let Some(Reverse(next)) = self.queue.peek() else {
                return false;
            };
            if next.at > limit {
                self.now = limit;
                return false;
            }
            let Reverse(q) = self.queue.pop().expect("peeked");
            self.now = q.at;
            self.handle(q.event);
        }
    }

    fn mix(&mut self, parts: &[u64]) {
        let mut bytes = Vec::with_capacity(8 * (parts.len() + 1));
        bytes.extend_from_slice(&self.hash.to_be_bytes());
        for p in parts {
            bytes.extend_from_slice(&p.to_be_bytes());
        }
        self.hash = fnv1a64(&bytes);
        self.events += 1;
    }

    fn handle(&mut self, event: Event) {
        let t = self.now.as_micros() as u64;
        match event {
            Event::Start(i) => {
                self.mix(&[t, 1, i as u64]);
                self.step(i, Input::Start);
            }
            Event::Connected(i, c) => {
                self.mix(&[t, 2, i as u64, c]);
                self.step(i, Input::Connected(c));
            }
            Event::ConnectFailed(i, c) => {
                self.mix(&[t, 3, i as u64, c]);
                self.step(i, Input::ConnectFailed(c));
            }
            Event::Accepted(i, c) => {
                self.mix(&[t, 4, i as u64, c]);
                self.step(i, Input::Accepted(c));
            }
            Event::Deliver(End::Relay, c, frame) => {
                self.mix(&[t, 5, u64::MAX, c]);
                let actions = self.relay.received(c, frame);
                self.relay_actions(actions);
            }
            Event::Deliver(End::Node(i), c, frame) => {
                self.mix(&[t, 5, i as u64, c, fnv1a64(frame.encode().as_bytes())]);
                self.step(i, Input::Frame(c, frame));
            }
            Event::Closed(End::Relay, c) => {
                self.mix(&[t, 6, u64::MAX, c]);
                self.held.remove(&c);
                self.relay.closed(c);
            }
            Event::Closed(End::Node(i), c) => {
                self.mix(&[t, 6, i as u64, c]);
                self.step(i, Input::Closed(c));
            }
            Event::Timer(i, generation) => {
                if self.nodes[i].timer_gen == generation {
                    self.mix(&[t, 7, i as u64]);
                    self.step(i, Input::Timer);
                }
            }
            Event::JobDone(i, job, result) => {
                self.mix(&[t, 8, i as u64, job]);
                self.step(i, Input::JobDone { job, result });
            }
            Event::Fault(f) => self.fault(f),
        }
    }

    fn step(&mut self, i: usize, input: Input) {
        if !self.nodes[i].alive {
            return;
        }
        let actions = self.nodes[i].node.step(self.now, input);
        for a in actions {
            self.node_action(i, a);
        }
    }

    fn latency(&mut self) -> Duration {
        let (lo, hi) = self.cfg.latency;
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo).mul_f64(self.rng.random::<f64>())
    }

    /// Schedules `event` over the directed link leaving `from`, after any
    /// earlier frame on the same link.
    fn transmit(&mut self, from: (End, ConnId), event: Event) {
        let at =
            (self.now + self.latency()).max(self.arrival.get(&from).copied().unwrap_or_default());
        self.arrival.insert(from, at);
        self.push(at, event);
    }

    fn link(&mut self, a: (End, ConnId), b: (End, ConnId)) {
        self.links.insert(a, b);
        self.links.insert(b, a);
    }

    fn unlink(&mut self, a: (End, ConnId)) -> Option<(End, ConnId)> {
        let b = self.links.remove(&a)?;
        self.links.remove(&b);
        Some(b)
    }

    fn node_action(&mut self, i: usize, action: Action) {
        let me = End::Node(i);
        let delay = self.cfg.connect_delay;
        match action {
            Action::Connect { conn, peer } => match peer {
                Peer::Relay => {
                    let r = self.relay_conn();
                    self.relay.opened(r);
                    self.link((me, conn), (End::Relay, r));
                    self.push(self.now + delay, Event::Connected(i, conn));
                }
                Peer::RelayBind(token) => {
                    let r = self.relay_conn();
                    self.relay.opened(r);
                    self.link((me, conn), (End::Relay, r));
                    self.held.insert(r, Vec::new());
                    self.transmit(
                        (me, conn),
                        Event::Deliver(End::Relay, r, Boot::Bind { token }.into()),
                    );
                    self.push(self.now + delay, Event::Connected(i, conn));
                }
                Peer::Signal(signal) => {
                    let target = signal["addr"].as_u64().map(|a| a as usize);
                    match target.filter(|&t| t < self.nodes.len() && self.nodes[t].alive) {
                        Some(t) => {
                            let inbound = self.nodes[t].next_inbound;
                            self.nodes[t].next_inbound += 1;
                            self.link((me, conn), (End::Node(t), inbound));
                            self.push(self.now + delay, Event::Accepted(t, inbound));
                            self.push(self.now + delay, Event::Connected(i, conn));
                        }
                        None => self.push(self.now + delay, Event::ConnectFailed(i, conn)),
                    }
                }
            },
            Action::Send(conn, frame) => match self.links.get(&(me, conn)).copied() {
                Some((End::Relay, r)) if self.held.contains_key(&r) => {
                    self.held.get_mut(&r).expect("held").push(frame);
                }
                Some((to, c)) => self.transmit((me, conn), Event::Deliver(to, c, frame)),
                None => {}
            },
            Action::Close(conn) => {
                if let Some((to, c)) = self.unlink((me, conn)) {
                    self.transmit((me, conn), Event::Closed(to, c));
                }
            }
            Action::Schedule(at) => {
                let n = &mut self.nodes[i];
                n.timer_gen += 1;
                let generation = n.timer_gen;
                self.push(at, Event::Timer(i, generation));
            }
            Action::StartJob { job, payload } => {
                let result = self.cfg.function.compute(&payload);
                let cost = match self.cfg.cost {
                    JobCost::Intrinsic => self.cfg.function.delay(),
                    JobCost::Fixed(d) => d,
                    JobCost::Uniform(lo, hi) => lo + (hi - lo).mul_f64(self.rng.random::<f64>()),
                };
                let n = &mut self.nodes[i];
                let done = n.busy_until.max(self.now) + cost;
                n.busy_until = done;
                self.push(done, Event::JobDone(i, job, result));
            }
            Action::Emit(line) => self.output.push((self.now, line)),
            Action::Finished(result) => {
                if self.finished.is_none() {
                    self.finished = Some((self.now, result));
                }
            }
        }
    }

    fn relay_conn(&mut self) -> u64 {
        let r = self.next_relay_conn;
        self.next_relay_conn += 1;
        r
    }

    fn relay_actions(&mut self, actions: Vec<RelayAction>) {
        for a in actions {
            match a {
                RelayAction::Send(r, frame) => {
                    if let Some((to, c)) = self.links.get(&(End::Relay, r)).copied() {
                        self.transmit((End::Relay, r), Event::Deliver(to, c, frame));
                    }
                }
                RelayAction::Close(r) => {
                    if let Some((to, c)) = self.unlink((End::Relay, r)) {
                        self.transmit((End::Relay, r), Event::Closed(to, c));
                    }
                }
                RelayAction::Splice(a, b) => {
                    let (Some(pa), Some(pb)) =
                        (self.unlink((End::Relay, a)), self.unlink((End::Relay, b)))
                    else {
                        warn!("splice of a closed connection");
                        continue;
                    };
                    self.link(pa, pb);
                    for (from, r) in [(pa, a), (pb, b)] {
                        let to = if from == pa { pb } else { pa };
                        for frame in self.held.remove(&r).unwrap_or_default() {
                            self.transmit(from, Event::Deliver(to.0, to.1, frame));
                        }
                    }
                }
            }
        }
    }

    fn fault(&mut self, f: Fault) {
        let mut candidates: Vec<usize> = self
            .alive_volunteers()
            .filter(|&i| {
                let n = &self.nodes[i].node;
                match f.select {
                    Selector::Leaf => n.role() == Role::Processor,
                    Selector::Coordinator => n.role() == Role::Coordinator,
                    Selector::Id(id) => n.id() == Some(id),
                }
            })
            .collect();
        if candidates.is_empty() {
            warn!(select = %f.select, "fault selector matched no volunteer");
            return;
        }
        for _ in 0..f.count.min(candidates.len()) {
            let k = self.rng.random_range(0..candidates.len());
            let victim = candidates.swap_remove(k);
            self.kill(victim);
        }
    }

    /// Stops volunteer `i` according to the configured kill mode.
    pub fn kill(&mut self, i: usize) {
        assert_ne!(i, ROOT, "the root cannot be killed");
        if !self.nodes[i].alive {
            return;
        }
        self.nodes[i].alive = false;
        let t = self.now.as_micros() as u64;
        self.mix(&[t, 9, i as u64]);
        if let Some(id) = self.nodes[i].node.id() {
            self.kills.push((self.now, id));
        }
        if self.cfg.kill_mode == KillMode::Crash {
            let mine: Vec<(End, ConnId)> = self
                .links
                .keys()
                .filter(|(e, _)| *e == End::Node(i))
                .copied()
                .collect();
            for from in mine {
                if let Some((to, c)) = self.unlink(from) {
                    self.transmit(from, Event::Closed(to, c));
                }
            }
        }
    }

    // ---- tree inspection ---------------------------------------------------

    /// Depth of every attached live volunteer (root children have depth 1),
    /// following parent links from the node up to the root. Volunteers not
    /// connected to the root through live members are left out.
    pub fn depths(&self) -> BTreeMap<usize, usize> {
        let by_id: BTreeMap<NodeId, usize> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].alive)
            .filter_map(|i| Some((self.nodes[i].node.id()?, i)))
            .collect();
        let mut out = BTreeMap::new();
        for i in self.alive_volunteers() {
            let mut depth = 0;
            let mut cur = i;
            let reached = loop {
                if cur == ROOT {
                    break true;
                }
                let Some(parent) = self.nodes[cur].node.parent() else {
                    break false;
                };
                let Some(&p) = by_id.get(&parent) else {
                    break false;
                };
                // The parent must also list us as its child.
                if !self.nodes[p]
                    .node
                    .children()
                    .contains(&self.nodes[cur].node.id().expect("member"))
                {
                    break false;
                }
                depth += 1;
                cur = p;
                if depth > self.nodes.len() {
                    break false;
                }
            };
            if reached {
                out.insert(i, depth);
            }
        }
        out
    }

    pub fn max_children(&self) -> usize {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].alive)
            .map(|i| self.nodes[i].node.child_count())
            .max()
            .unwrap_or(0)
    }

    /// Live volunteers currently processing jobs.
    pub fn processors(&self) -> usize {
        self.alive_volunteers()
            .filter(|&i| self.nodes[i].node.role() == Role::Processor)
            .count()
    }
}
