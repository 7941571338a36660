//! Exhaustive small-trace checker for the lending ledger.
//!
//! Enumerates every interleaving of borrow / settle / fail (plus late
//! settlements from borrowers whose value was already taken back) for two
//! borrowers over up to four inputs, and replays each one against a fresh
//! ledger. The expected behaviour comes from a brute-force model that knows
//! nothing about the ledger's internals: it tracks who holds which input and
//! which inputs have a first result.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use pando_core::{drain, from_values, Borrow, LendLedger};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Borrow(u64),
    Settle(u64, u64),
    Fail(u64, u64),
    LateSettle(u64, u64),
}

#[derive(Debug, Clone, Default)]
struct Model {
    n: u64,
    next_unread: u64,
    owner: BTreeMap<u64, u64>,
    held: [BTreeSet<u64>; 2],
    stale: [BTreeSet<u64>; 2],
    relendable: BTreeSet<u64>,
    done: BTreeSet<u64>,
    failed_once: BTreeSet<u64>,
}

impl Model {
    fn new(n: u64) -> Self {
        Self {
            n,
            ..Self::default()
        }
    }

    fn next_ticket(&self) -> Option<u64> {
        self.relendable
            .iter()
            .next()
            .copied()
            .or((self.next_unread < self.n).then_some(self.next_unread))
    }

    fn steps(&self, limits: Limits) -> Vec<Step> {
        let mut out = Vec::new();
        for b in 0..2u64 {
            if self.next_ticket().is_some() && self.held[b as usize].len() < limits.max_held {
                out.push(Step::Borrow(b));
            }
            for &s in &self.held[b as usize] {
                out.push(Step::Settle(b, s));
                if !self.failed_once.contains(&s) && self.failed_once.len() < limits.fail_budget {
                    out.push(Step::Fail(b, s));
                }
            }
            for &s in &self.stale[b as usize] {
                out.push(Step::LateSettle(b, s));
            }
        }
        out
    }

    /// Applies a step; returns the ticket a borrow must produce.
    fn apply(&mut self, step: Step) -> Option<u64> {
        match step {
            Step::Borrow(b) => {
                let seq = self
                    .next_ticket()
                    .expect("borrow only offered when lendable");
                if !self.relendable.remove(&seq) {
                    self.next_unread += 1;
                }
                self.owner.insert(seq, b);
                self.held[b as usize].insert(seq);
                Some(seq)
            }
            Step::Settle(b, s) => {
                self.held[b as usize].remove(&s);
                self.first_result(s);
                None
            }
            Step::LateSettle(b, s) => {
                self.stale[b as usize].remove(&s);
                self.first_result(s);
                None
            }
            Step::Fail(b, s) => {
                self.held[b as usize].remove(&s);
                self.failed_once.insert(s);
                if !self.done.contains(&s) && self.owner.get(&s) == Some(&b) {
                    self.relendable.insert(s);
                    self.owner.remove(&s);
                }
                self.stale[b as usize].insert(s);
                None
            }
        }
    }

    fn first_result(&mut self, s: u64) {
        if self.done.insert(s) {
            self.relendable.remove(&s);
        }
    }

    fn emitted_prefix(&self) -> u64 {
        (0..).take_while(|i| self.done.contains(i)).count() as u64
    }
}

fn input(i: u64) -> i64 {
    10 + i as i64
}

fn result(v: i64) -> i64 {
    v * v
}

/// Replays `trace` against a fresh ledger over `n` inputs, checking every
/// step against the model. Returns a description of the first mismatch.
pub fn replay(n: u64, trace: &[Step]) -> Result<(), String> {
    let ledger: LendLedger<i64, i64> = LendLedger::new(from_values((0..n).map(input).collect()));
    let emitted = Arc::new(Mutex::new(Vec::new()));
    let finished = Arc::new(Mutex::new(None));
    let (e, f) = (Arc::clone(&emitted), Arc::clone(&finished));
    drain(
        ledger.result_source(),
        move |r| e.lock().unwrap().push(r),
        move |d| *f.lock().unwrap() = Some(d),
    );
    let mut model = Model::new(n);
    let mut values: BTreeMap<u64, i64> = BTreeMap::new();
    for (i, &step) in trace.iter().enumerate() {
        let expect = model.apply(step);
        match step {
            Step::Borrow(b) => match ledger.borrow(b) {
                Borrow::Ticket(t) => {
                    if Some(t.seq) != expect || t.value != input(t.seq) {
                        return Err(format!("step {i} {step:?}: got {t:?}, want seq {expect:?}"));
                    }
                    values.insert(t.seq, t.value);
                }
                other => return Err(format!("step {i} {step:?}: got {other:?}")),
            },
            Step::Settle(_, s) | Step::LateSettle(_, s) => {
                ledger.settle(s, result(values[&s]));
            }
            Step::Fail(b, s) => ledger.fail_borrow(b, s),
        }
        let want: Vec<i64> = (0..model.emitted_prefix())
            .map(|i| result(input(i)))
            .collect();
        if *emitted.lock().unwrap() != want {
            return Err(format!(
                "step {i} {step:?}: emitted {:?}, want {want:?}",
                emitted.lock().unwrap()
            ));
        }
    }
    Ok(())
}

/// Bounds that keep the enumeration finite and tractable.
#[derive(Debug, Clone, Copy)]
pub struct Limits {
    /// Tickets one borrower may hold at once.
    pub max_held: usize,
    /// Distinct inputs that may be failed (each at most once) per trace.
    pub fail_budget: usize,
}

/// Outcome of an exhaustive run.
#[derive(Debug, Default)]
pub struct Coverage {
    pub traces: u64,
    pub steps: u64,
    pub failures: Vec<String>,
}

/// Enumerates and replays every complete trace over `n` inputs.
pub fn check_all(n: u64, limits: Limits) -> Coverage {
    let mut cov = Coverage::default();
    let mut trace = Vec::new();
    walk(&Model::new(n), n, limits, &mut trace, &mut cov);
    cov
}

fn walk(model: &Model, n: u64, budget: Limits, trace: &mut Vec<Step>, cov: &mut Coverage) {
    let steps = model.steps(budget);
    if steps.is_empty() {
        cov.traces += 1;
        cov.steps += trace.len() as u64;
        // Complete: every input has exactly one result, in order.
        if model.emitted_prefix() != n {
            cov.failures.push(format!("model incomplete for {trace:?}"));
        }
        if let Err(e) = replay(n, trace).and_then(|_| check_end(n, trace)) {
            if cov.failures.len() < 10 {
                cov.failures.push(e);
            }
        }
        return;
    }
    for step in steps {
        let mut next = model.clone();
        next.apply(step);
        trace.push(step);
        walk(&next, n, budget, trace, cov);
        trace.pop();
    }
}

/// After a complete trace the ledger is exhausted and the result stream has
/// emitted every input once, then ended.
fn check_end(n: u64, trace: &[Step]) -> Result<(), String> {
    let ledger: LendLedger<i64, i64> = LendLedger::new(from_values((0..n).map(input).collect()));
    let emitted = Arc::new(Mutex::new(Vec::new()));
    let finished = Arc::new(Mutex::new(None));
    let (e, f) = (Arc::clone(&emitted), Arc::clone(&finished));
    drain(
        ledger.result_source(),
        move |r| e.lock().unwrap().push(r),
        move |d| *f.lock().unwrap() = Some(d),
    );
    let mut values = BTreeMap::new();
    for &step in trace {
        match step {
            Step::Borrow(b) => {
                if let Borrow::Ticket(t) = ledger.borrow(b) {
                    values.insert(t.seq, t.value);
                }
            }
            Step::Settle(_, s) | Step::LateSettle(_, s) => {
                ledger.settle(s, result(values[&s]));
            }
            Step::Fail(b, s) => ledger.fail_borrow(b, s),
        }
    }
    if ledger.borrow(0) != Borrow::Exhausted {
        return Err(format!("not exhausted after {trace:?}"));
    }
    let got = emitted.lock().unwrap().clone();
    let want: Vec<i64> = (0..n).map(|i| result(input(i))).collect();
    if got != want {
        return Err(format!("emitted {got:?}, want {want:?} after {trace:?}"));
    }
    if !matches!(*finished.lock().unwrap(), Some(Ok(()))) {
        return Err(format!("result stream did not end after {trace:?}"));
    }
    Ok(())
}
