use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use pando_core::{
    compose, drain, from_iter, gate, map, open_substream, Borrow, Deliver, DemandSource,
    LendLedger, Outcome, Source, SubStream, SubStreamState, Ticket, Transform,
};
use parking_lot::Mutex;
use proptest::prelude::*;

#[derive(Default)]
struct Counters {
    requests: AtomicUsize,
    deliveries: AtomicUsize,
    aborts: AtomicUsize,
}

/// Infinite counting source that records how it is used.
struct Instrumented {
    next: u64,
    counters: Arc<Counters>,
}

impl Source<u64> for Instrumented {
    fn request(&mut self, abort: bool, deliver: Deliver<u64>) {
        self.counters.requests.fetch_add(1, Ordering::SeqCst);
        self.counters.deliveries.fetch_add(1, Ordering::SeqCst);
        if abort {
            self.counters.aborts.fetch_add(1, Ordering::SeqCst);
            return deliver(Outcome::End);
        }
        self.next += 1;
        deliver(Outcome::Value(self.next - 1))
    }
}

fn instrumented() -> (DemandSource<u64>, Arc<Counters>) {
    let c = Arc::new(Counters::default());
    (
        Box::new(Instrumented {
            next: 0,
            counters: Arc::clone(&c),
        }),
        c,
    )
}

fn pipeline(source: DemandSource<u64>, stages: usize) -> DemandSource<u64> {
    let ts: Vec<Transform<u64>> = (0..stages)
        .map(|i| Box::new(move |s| map(s, move |x: u64| x + i as u64)) as Transform<u64>)
        .collect();
    compose(source, ts)
}

fn pull(src: &mut DemandSource<u64>, abort: bool) -> Option<Outcome<u64>> {
    let got = Arc::new(Mutex::new(None));
    let g = Arc::clone(&got);
    src.request(abort, Box::new(move |o| *g.lock() = Some(o)));
    let out = got.lock().take();
    out
}

proptest! {
    #[test]
    fn pull_discipline_and_laziness(stages in 0usize..6, pulls in 0usize..40) {
        let (src, c) = instrumented();
        let mut p = pipeline(src, stages);
        prop_assert_eq!(c.requests.load(Ordering::SeqCst), 0, "no work before first request");
        let mut delivered = 0;
        for _ in 0..pulls {
            if pull(&mut p, false).is_some() {
                delivered += 1;
            }
            prop_assert!(c.deliveries.load(Ordering::SeqCst) <= c.requests.load(Ordering::SeqCst));
        }
        prop_assert_eq!(delivered, pulls);
        prop_assert_eq!(c.requests.load(Ordering::SeqCst), pulls);
    }

    #[test]
    fn abort_reaches_source_exactly_once(stages in 1usize..8, pulls in 0usize..10, extra in 0usize..4) {
        let (src, c) = instrumented();
        let mut p = pipeline(src, stages);
        for _ in 0..pulls {
            pull(&mut p, false);
        }
        prop_assert_eq!(pull(&mut p, true), Some(Outcome::End));
        for _ in 0..extra {
            prop_assert_eq!(pull(&mut p, true), Some(Outcome::End));
            prop_assert_eq!(pull(&mut p, false), Some(Outcome::End));
        }
        prop_assert_eq!(c.aborts.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn terminal_outcome_is_absorbed(n in 0u64..10, stages in 0usize..4, extra in 1usize..5) {
        let c = Arc::new(AtomicUsize::new(0));
        let c2 = Arc::clone(&c);
        let counted = from_iter((0..n).inspect(move |_| { c2.fetch_add(1, Ordering::SeqCst); }));
        let mut p = pipeline(counted, stages);
        for _ in 0..n {
            prop_assert!(matches!(pull(&mut p, false), Some(Outcome::Value(_))));
        }
        prop_assert_eq!(pull(&mut p, false), Some(Outcome::End));
        let reads = c.load(Ordering::SeqCst);
        for _ in 0..extra {
            prop_assert_eq!(pull(&mut p, false), Some(Outcome::End));
        }
        prop_assert_eq!(c.load(Ordering::SeqCst), reads);
    }
}

#[derive(Debug, Clone)]
enum Act {
    Borrow(usize),
    Settle(usize),
    Fail(usize),
}

fn act(borrowers: usize) -> impl Strategy<Value = Act> {
    prop_oneof![
        3 => (0..borrowers).prop_map(Act::Borrow),
        3 => (0..borrowers).prop_map(Act::Settle),
        1 => (0..borrowers).prop_map(Act::Fail),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Random fail/settle interleavings: every input emitted exactly once, in
    /// order, and at most `cap` values per borrower are retained.
    #[test]
    fn ledger_exactly_once_under_random_traces(
        n in 0u64..40,
        cap in 1usize..4,
        trace in proptest::collection::vec(act(3), 0..200),
    ) {
        let ledger: LendLedger<u64, u64> = LendLedger::new(from_iter(0..n));
        let out = Arc::new(Mutex::new(Vec::new()));
        let o = Arc::clone(&out);
        drain(ledger.result_source(), move |r| o.lock().push(r), |_| {});
        let mut held: Vec<Vec<Ticket<u64>>> = vec![Vec::new(); 3];
        let run = |a: &Act, held: &mut Vec<Vec<Ticket<u64>>>| match *a {
            Act::Borrow(b) if held[b].len() < cap => {
                if let Borrow::Ticket(t) = ledger.borrow(b as u64) {
                    held[b].push(t);
                }
            }
            Act::Settle(b) => {
                if let Some(t) = held[b].pop() {
                    ledger.settle(t.seq, t.value * 3);
                }
            }
            Act::Fail(b)
                if !held[b].is_empty() => {
                    let t = held[b].remove(0);
                    ledger.fail_borrow(b as u64, t.seq);
                }
            _ => {}
        };
        for a in &trace {
            run(a, &mut held);
            let snap = ledger.snapshot();
            prop_assert!(snap.borrowed.len() + snap.relendable.len() <= 3 * cap);
            let got = out.lock().clone();
            prop_assert!(got.iter().enumerate().all(|(i, &r)| r == i as u64 * 3));
        }
        // Drive to completion: keep borrowing and settling.
        let mut guard = 0;
        loop {
            for h in held.iter_mut() {
                for t in h.drain(..) {
                    ledger.settle(t.seq, t.value * 3);
                }
            }
            match ledger.borrow(0) {
                Borrow::Ticket(t) => held[0].push(t),
                Borrow::Exhausted => break,
                Borrow::Deferred => {}
            }
            guard += 1;
            prop_assert!(guard < 10_000);
        }
        prop_assert_eq!(out.lock().clone(), (0..n).map(|x| x * 3).collect::<Vec<_>>());
        let stats = ledger.stats();
        prop_assert_eq!(stats.read, n);
        prop_assert_eq!(stats.accepted, n);
        prop_assert_eq!(stats.emitted, n);
    }
}

#[derive(Debug, Clone)]
enum SubAct {
    Take(usize),
    Settle(usize),
    Crash(usize),
}

fn sub_act(k: usize) -> impl Strategy<Value = SubAct> {
    prop_oneof![
        4 => (0..k).prop_map(SubAct::Take),
        4 => (0..k).prop_map(SubAct::Settle),
        1 => (0..k).prop_map(SubAct::Crash),
    ]
}

struct Lane {
    sub: SubStream<u64, u64>,
    out: DemandSource<Ticket<u64>>,
    // Deliveries may arrive later, when a parked request is served.
    inbox: Arc<Mutex<Vec<Ticket<u64>>>>,
    waiting: Arc<Mutex<bool>>,
}

impl Lane {
    fn take(&mut self) {
        if *self.waiting.lock() {
            return;
        }
        *self.waiting.lock() = true;
        let (inbox, waiting) = (Arc::clone(&self.inbox), Arc::clone(&self.waiting));
        self.out.request(
            false,
            Box::new(move |o| {
                *waiting.lock() = false;
                if let Outcome::Value(t) = o {
                    inbox.lock().push(t);
                }
            }),
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Sub-streams never hold the same value at once, crashes never fail the
    /// main stream, and the counters balance at the end.
    #[test]
    fn substreams_partition_and_conserve(
        n in 1u64..60,
        trace in proptest::collection::vec(sub_act(4), 0..300),
    ) {
        let ledger: LendLedger<u64, u64> = LendLedger::new(from_iter(0..n));
        let out = Arc::new(Mutex::new(Vec::new()));
        let done = Arc::new(Mutex::new(None));
        let (o, d) = (Arc::clone(&out), Arc::clone(&done));
        drain(ledger.result_source(), move |r| o.lock().push(r), move |r| *d.lock() = Some(r));
        let mut next_id = 0u64;
        let mut lane = |ledger: &LendLedger<u64, u64>| {
            next_id += 1;
            let sub = open_substream(ledger, next_id);
            Lane {
                out: sub.outgoing(),
                sub,
                inbox: Arc::default(),
                waiting: Arc::default(),
            }
        };
        let mut lanes: Vec<Lane> = (0..4).map(|_| lane(&ledger)).collect();
        let mut relent = 0;
        for a in &trace {
            match *a {
                SubAct::Take(i) => lanes[i].take(),
                SubAct::Settle(i) => {
                    let t = lanes[i].inbox.lock().pop();
                    if let Some(t) = t {
                        prop_assert!(lanes[i].sub.settle(t.seq, t.value + 1));
                    }
                }
                SubAct::Crash(i) => {
                    relent += lanes[i].sub.fail();
                    prop_assert_eq!(lanes[i].sub.state(), SubStreamState::Failed);
                    lanes[i] = lane(&ledger);
                }
            }
            let mut seen = BTreeSet::new();
            for l in &lanes {
                for s in l.sub.outstanding() {
                    prop_assert!(seen.insert(s), "seq {} held by two sub-streams", s);
                }
            }
        }
        // Survivors keep working until every lane's requests end.
        let mut rounds = 0;
        loop {
            let mut idle = true;
            for l in lanes.iter_mut() {
                let held: Vec<_> = l.inbox.lock().drain(..).collect();
                for t in held {
                    idle = false;
                    l.sub.settle(t.seq, t.value + 1);
                }
                l.take();
            }
            if idle && lanes.iter().all(|l| !*l.waiting.lock() && l.inbox.lock().is_empty()) {
                break;
            }
            rounds += 1;
            prop_assert!(rounds < 10_000, "no progress");
        }
        prop_assert_eq!(out.lock().clone(), (1..=n).collect::<Vec<_>>());
        prop_assert_eq!(done.lock().clone(), Some(Ok(())));
        let s = ledger.stats();
        prop_assert_eq!(s.relends as usize, relent);
        prop_assert_eq!(s.lent, s.accepted + s.relends);
        prop_assert_eq!(s.read, n);
        prop_assert_eq!(s.emitted, n);
    }
    /// In-flight never exceeds the capacity under random request/release
    /// schedules, and parked requests are served in arrival order.
    #[test]
    fn gate_bound_and_fifo(cap in 1usize..6, ops in proptest::collection::vec(any::<bool>(), 0..200)) {
        let (mut src, g) = gate(from_iter(0u64..), cap);
        let order = Arc::new(Mutex::new(Vec::new()));
        let mut issued = 0u64;
        let mut delivered_before = 0usize;
        for want_more in ops {
            if want_more {
                let o = Arc::clone(&order);
                let ticket = issued;
                issued += 1;
                src.request(false, Box::new(move |v| o.lock().push((ticket, v))));
            } else if g.in_flight() > 0 {
                g.release();
            }
            prop_assert!(g.in_flight() <= cap);
            let got = order.lock();
            prop_assert!(got.len() >= delivered_before);
            delivered_before = got.len();
            // FIFO: the k-th request receives the k-th value.
            for (k, (t, v)) in got.iter().enumerate() {
                prop_assert_eq!(*t, k as u64);
                prop_assert_eq!(v, &Outcome::Value(k as u64));
            }
        }
    }
}
