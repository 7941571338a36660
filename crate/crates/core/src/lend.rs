//! Lending values to borrowers and reordering their results.
//!
//! A [`LendLedger`] reads values from a [`DemandSource`] one at a time and
//! lends each to a borrower as a [`Ticket`]. Borrowers return a result with
//! [`LendLedger::settle`] or give the value back with
//! [`LendLedger::fail_borrow`], after which it is lent again, oldest first.
//! Results are emitted on [`LendLedger::result_source`] strictly in input
//! order, exactly once per input.
//!
//! Every mutation goes through one mutex. Callbacks (ticket deliveries,
//! result deliveries) always run with the lock released, driven by a
//! re-entrant-safe pump loop: a nested or concurrent call that finds the
//! pump running just flags it to go around again.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;
use tracing::warn;

use crate::stream::{Deliver, DemandSource, Outcome, Source, StreamError};

/// Opaque tag naming a borrower, typically a child node id.
pub type BorrowerId = u64;

/// A value lent under its 0-based input sequence number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ticket<T> {
    pub seq: u64,
    pub value: T,
}

/// Immediate answer to [`LendLedger::borrow`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Borrow<T> {
    Ticket(Ticket<T>),
    /// Nothing to lend right now, but more may come: the source has not
    /// answered yet, or outstanding loans may still fail and be re-lent.
    Deferred,
    /// The source ended and every value has been settled, or the ledger
    /// failed.
    Exhausted,
}

/// Counters over the life of a ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerStats {
    /// Values read from the source and assigned a sequence number.
    pub read: u64,
    /// Tickets handed out, including re-lends.
    pub lent: u64,
    pub relends: u64,
    pub accepted: u64,
    pub duplicates: u64,
    pub emitted: u64,
}

/// Point-in-time view of the ledger's bookkeeping, for tests and diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerSnapshot {
    pub next_seq: u64,
    pub emit_cursor: u64,
    pub borrowed: Vec<(u64, BorrowerId)>,
    pub relendable: Vec<u64>,
    pub settled: Vec<u64>,
    /// Emitted results not yet taken by the result consumer.
    pub unread_results: usize,
    pub parked_borrowers: usize,
    pub source_ended: bool,
    pub failed: bool,
}

type TicketCallback<T> = Box<dyn FnOnce(Option<Ticket<T>>) + Send>;
type Task = Box<dyn FnOnce() + Send>;

struct Loan<T> {
    value: T,
    borrower: BorrowerId,
}

struct Waiter<T> {
    borrower: BorrowerId,
    callback: TicketCallback<T>,
}

struct State<T, R> {
    source: Option<DemandSource<T>>,
    pulling: bool,
    want_pull: bool,
    abort_source: bool,
    source_ended: bool,
    failure: Option<StreamError>,
    aborted: bool,

    next_seq: u64,
    prefetched: Option<T>,
    borrowed: BTreeMap<u64, Loan<T>>,
    relendable: BTreeMap<u64, T>,
    settled: BTreeMap<u64, R>,
    emit_cursor: u64,
    outbox: VecDeque<R>,

    waiters: VecDeque<Waiter<T>>,
    result_waiter: Option<Deliver<R>>,
    result_source_taken: bool,
    result_finished: bool,

    pumping: bool,
    repump: bool,
    stats: LedgerStats,
}

impl<T: Clone, R> State<T, R> {
    fn exhausted(&self) -> bool {
        self.failure.is_some()
            || self.aborted
            || (self.source_ended
                && self.relendable.is_empty()
                && self.prefetched.is_none()
                && self.borrowed.is_empty())
    }

    fn take_ticket(&mut self, borrower: BorrowerId) -> Option<Ticket<T>> {
        if self.failure.is_some() || self.aborted {
            return None;
        }
        let (seq, value) = if let Some((&seq, _)) = self.relendable.iter().next() {
            let value = self.relendable.remove(&seq).expect("present");
            (seq, value)
        } else {
            let value = self.prefetched.take()?;
            let seq = self.next_seq;
            self.next_seq += 1;
            self.stats.read += 1;
            (seq, value)
        };
        self.stats.lent += 1;
        self.borrowed.insert(
            seq,
            Loan {
                value: value.clone(),
                borrower,
            },
        );
        Some(Ticket { seq, value })
    }

    fn needs_pull(&self) -> bool {
        (self.want_pull || !self.waiters.is_empty())
            && self.prefetched.is_none()
            && !self.pulling
            && !self.source_ended
            && self.failure.is_none()
            && !self.aborted
            && self.source.is_some()
    }

    fn complete(&self) -> bool {
        self.source_ended
            && self.prefetched.is_none()
            && self.emit_cursor == self.next_seq
            && self.outbox.is_empty()
    }
}

/// Lends values from a source and reorders the settled results.
pub struct LendLedger<T, R> {
    shared: Arc<Mutex<State<T, R>>>,
}

impl<T, R> Clone for LendLedger<T, R> {
    fn clone(&self) -> Self {
        Self {
            shared: Arc::clone(&self.shared),
        }
    }
}

impl<T, R> LendLedger<T, R>
where
    T: Clone + Send + 'static,
    R: Send + 'static,
{
    pub fn new(source: DemandSource<T>) -> Self {
        Self {
            shared: Arc::new(Mutex::new(State {
                source: Some(source),
                pulling: false,
                want_pull: false,
                abort_source: false,
                source_ended: false,
                failure: None,
                aborted: false,
                next_seq: 0,
                prefetched: None,
                borrowed: BTreeMap::new(),
                relendable: BTreeMap::new(),
                settled: BTreeMap::new(),
                emit_cursor: 0,
                outbox: VecDeque::new(),
                waiters: VecDeque::new(),
                result_waiter: None,
                result_source_taken: false,
                result_finished: false,
                pumping: false,
                repump: false,
                stats: LedgerStats::default(),
            })),
        }
    }

    /// Lends the oldest re-lendable value, or reads a new one from the
    /// source. A source that answers synchronously yields a ticket right
    /// away; otherwise the value is fetched in the background and
    /// `Deferred` is returned.
    pub fn borrow(&self, borrower: BorrowerId) -> Borrow<T> {
        for attempt in 0..2 {
            let mut st = self.shared.lock();
            if let Some(t) = st.take_ticket(borrower) {
                return Borrow::Ticket(t);
            }
            if st.exhausted() {
                return Borrow::Exhausted;
            }
            if attempt == 1 || st.source_ended || st.pulling {
                return Borrow::Deferred;
            }
            st.want_pull = true;
            drop(st);
            self.pump();
        }
        Borrow::Deferred
    }

    /// Asynchronous form of [`borrow`](Self::borrow): the callback receives a
    /// ticket as soon as one is available, or `None` once the ledger is
    /// exhausted. Parked requests are served in FIFO order.
    pub fn request_ticket(
        &self,
        borrower: BorrowerId,
        callback: impl FnOnce(Option<Ticket<T>>) + Send + 'static,
    ) {
        self.shared.lock().waiters.push_back(Waiter {
            borrower,
            callback: Box::new(callback),
        });
        self.pump();
    }

    /// Withdraws the parked requests of `borrower`; each is answered `None`.
    /// Returns how many were withdrawn.
    pub fn cancel_requests(&self, borrower: BorrowerId) -> usize {
        let mut st = self.shared.lock();
        let (cancelled, kept): (VecDeque<_>, VecDeque<_>) = std::mem::take(&mut st.waiters)
            .into_iter()
            .partition(|w| w.borrower == borrower);
        st.waiters = kept;
        drop(st);
        let n = cancelled.len();
        for w in cancelled {
            (w.callback)(None);
        }
        n
    }

    /// Records the result for `seq`. The first settlement of a value wins;
    /// later ones (from a borrower presumed dead whose value was re-lent)
    /// are dropped. Returns whether the result was accepted.
    pub fn settle(&self, seq: u64, result: R) -> bool {
        let mut st = self.shared.lock();
        if seq < st.emit_cursor || st.settled.contains_key(&seq) {
            st.stats.duplicates += 1;
            drop(st);
            warn!(seq, "dropping duplicate settlement");
            return false;
        }
        let known = st.borrowed.remove(&seq).is_some() || st.relendable.remove(&seq).is_some();
        if !known {
            drop(st);
            warn!(seq, "ignoring settlement for a value never lent");
            return false;
        }
        st.stats.accepted += 1;
        st.settled.insert(seq, result);
        loop {
            let cursor = st.emit_cursor;
            let Some(r) = st.settled.remove(&cursor) else {
                break;
            };
            st.outbox.push_back(r);
            st.emit_cursor += 1;
            st.stats.emitted += 1;
        }
        drop(st);
        self.pump();
        true
    }

    /// Returns a borrowed value to the ledger so it is lent again. Ignored if
    /// the value was already settled or is currently held by a different
    /// borrower.
    ///
    /// # Panics
    ///
    /// If `seq` was never issued, which indicates protocol corruption.
    pub fn fail_borrow(&self, borrower: BorrowerId, seq: u64) {
        let mut st = self.shared.lock();
        assert!(
            seq < st.next_seq,
            "fail_borrow of never-issued seq {seq} (next is {})",
            st.next_seq
        );
        match st.borrowed.get(&seq) {
            Some(loan) if loan.borrower == borrower => {
                let loan = st.borrowed.remove(&seq).expect("present");
                st.relendable.insert(seq, loan.value);
                st.stats.relends += 1;
            }
            _ => return,
        }
        drop(st);
        self.pump();
    }

    /// Puts the ledger in terminal failure: the source is aborted, parked
    /// borrowers are released and the result stream delivers `Failure` once
    /// the already-ordered results are read.
    pub fn terminate(&self, error: StreamError) {
        let mut st = self.shared.lock();
        if st.failure.is_some() {
            return;
        }
        st.failure = Some(error);
        st.abort_source = !st.source_ended;
        drop(st);
        self.pump();
    }

    /// The ordered result stream. May be taken once.
    ///
    /// # Panics
    ///
    /// On a second call.
    pub fn result_source(&self) -> DemandSource<R> {
        let mut st = self.shared.lock();
        assert!(!st.result_source_taken, "result_source taken twice");
        st.result_source_taken = true;
        Box::new(ResultSource {
            ledger: self.clone(),
        })
    }

    pub fn stats(&self) -> LedgerStats {
        self.shared.lock().stats
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let st = self.shared.lock();
        LedgerSnapshot {
            next_seq: st.next_seq,
            emit_cursor: st.emit_cursor,
            borrowed: st.borrowed.iter().map(|(s, l)| (*s, l.borrower)).collect(),
            relendable: st.relendable.keys().copied().collect(),
            settled: st.settled.keys().copied().collect(),
            unread_results: st.outbox.len(),
            parked_borrowers: st.waiters.len(),
            source_ended: st.source_ended,
            failed: st.failure.is_some(),
        }
    }

    /// Number of values currently lent out or waiting to be re-lent.
    pub fn outstanding(&self) -> usize {
        let st = self.shared.lock();
        st.borrowed.len() + st.relendable.len()
    }

    fn on_source(&self, outcome: Outcome<T>) {
        let mut st = self.shared.lock();
        st.pulling = false;
        match outcome {
            Outcome::Value(v) => {
                if st.aborted || st.failure.is_some() {
                    // Read raced with an abort; the value is never lent.
                } else {
                    st.prefetched = Some(v);
                }
            }
            Outcome::End => st.source_ended = true,
            Outcome::Failure(e) => {
                st.source_ended = true;
                if st.failure.is_none() {
                    st.failure = Some(e);
                }
            }
        }
        drop(st);
        self.pump();
    }

    fn pump(&self) {
        let mut st = self.shared.lock();
        if st.pumping {
            st.repump = true;
            return;
        }
        st.pumping = true;
        loop {
            st.repump = false;
            let mut tasks: Vec<Task> = Vec::new();

            while let Some(borrower) = st.waiters.front().map(|w| w.borrower) {
                if let Some(ticket) = st.take_ticket(borrower) {
                    let w = st.waiters.pop_front().expect("front");
                    tasks.push(Box::new(move || (w.callback)(Some(ticket))));
                } else if st.exhausted() {
                    for w in st.waiters.drain(..) {
                        tasks.push(Box::new(move || (w.callback)(None)));
                    }
                } else {
                    break;
                }
            }

            if st.result_waiter.is_some() {
                let answer = if let Some(r) = st.outbox.pop_front() {
                    Some(Outcome::Value(r))
                } else if st.result_finished {
                    Some(Outcome::End)
                } else if let Some(e) = st.failure.clone() {
                    st.result_finished = true;
                    Some(Outcome::Failure(e))
                } else if st.aborted || st.complete() {
                    st.result_finished = true;
                    Some(Outcome::End)
                } else {
                    None
                };
                if let Some(answer) = answer {
                    let deliver = st.result_waiter.take().expect("checked");
                    tasks.push(Box::new(move || deliver(answer)));
                }
            }

            let mut source_call: Option<(DemandSource<T>, bool)> = None;
            if st.abort_source && !st.pulling {
                if let Some(s) = st.source.take() {
                    st.abort_source = false;
                    st.pulling = true;
                    source_call = Some((s, true));
                }
            } else if st.needs_pull() {
                st.want_pull = false;
                st.pulling = true;
                source_call = Some((st.source.take().expect("checked"), false));
            }

            drop(st);
            for task in tasks {
                task();
            }
            if let Some((mut source, abort)) = source_call {
                let ledger = self.clone();
                if abort {
                    source.request(
                        true,
                        Box::new(move |_| {
                            let mut st = ledger.shared.lock();
                            st.pulling = false;
                            st.source_ended = true;
                        }),
                    );
                    // Released sources are dropped.
                    st = self.shared.lock();
                } else {
                    source.request(false, Box::new(move |o| ledger.on_source(o)));
                    st = self.shared.lock();
                    st.source = Some(source);
                }
                st.repump = true;
            } else {
                st = self.shared.lock();
            }
            if !st.repump {
                st.pumping = false;
                return;
            }
        }
    }
}

struct ResultSource<T, R> {
    ledger: LendLedger<T, R>,
}

impl<T, R> Source<R> for ResultSource<T, R>
where
    T: Clone + Send + 'static,
    R: Send + 'static,
{
    fn request(&mut self, abort: bool, deliver: Deliver<R>) {
        let mut st = self.ledger.shared.lock();
        if abort {
            if !st.aborted {
                st.aborted = true;
                st.abort_source = !st.source_ended;
            }
            st.outbox.clear();
            st.result_finished = true;
            let pending = st.result_waiter.take();
            drop(st);
            if let Some(p) = pending {
                p(Outcome::End);
            }
            deliver(Outcome::End);
            self.ledger.pump();
            return;
        }
        debug_assert!(
            st.result_waiter.is_none(),
            "one outstanding request at a time"
        );
        st.result_waiter = Some(deliver);
        drop(st);
        self.ledger.pump();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{drain, from_iter, from_values, pushable};

    fn ticket(b: Borrow<i64>) -> Ticket<i64> {
        match b {
            Borrow::Ticket(t) => t,
            other => panic!("expected ticket, got {other:?}"),
        }
    }

    type Collected<R> = Arc<Mutex<(Vec<R>, Option<Result<(), StreamError>>)>>;

    fn collector<R: Send + Clone + 'static>(ledger: &LendLedger<i64, R>) -> Collected<R> {
        let out = Arc::new(Mutex::new((Vec::new(), None)));
        let (a, b) = (Arc::clone(&out), Arc::clone(&out));
        drain(
            ledger.result_source(),
            move |r| a.lock().0.push(r),
            move |d| b.lock().1 = Some(d),
        );
        out
    }

    #[test]
    fn borrows_assign_consecutive_sequence_numbers() {
        let ledger: LendLedger<i64, i64> = LendLedger::new(from_values(vec![10, 11, 12]));
        let got: Vec<_> = (0..3).map(|b| ticket(ledger.borrow(b))).collect();
        assert_eq!(
            got,
            vec![
                Ticket { seq: 0, value: 10 },
                Ticket { seq: 1, value: 11 },
                Ticket { seq: 2, value: 12 }
            ]
        );
        // Source ended but loans are outstanding.
        assert_eq!(ledger.borrow(9), Borrow::Deferred);
    }

    #[test]
    fn failed_value_is_relent_to_next_borrower() {
        let ledger: LendLedger<i64, i64> = LendLedger::new(from_values(vec![10, 11, 12]));
        let _t0 = ticket(ledger.borrow(1));
        let t1 = ticket(ledger.borrow(2));
        ledger.fail_borrow(2, t1.seq);
        assert_eq!(ticket(ledger.borrow(3)), Ticket { seq: 1, value: 11 });
    }

    #[test]
    fn exhausted_after_all_settled() {
        let ledger: LendLedger<i64, i64> = LendLedger::new(from_values(vec![1, 2]));
        let out = collector(&ledger);
        for b in 0..2 {
            let t = ticket(ledger.borrow(b));
            ledger.settle(t.seq, t.value * t.value);
        }
        assert_eq!(ledger.borrow(0), Borrow::Exhausted);
        assert_eq!(out.lock().0, vec![1, 4]);
        assert_eq!(out.lock().1, Some(Ok(())));
    }

    #[test]
    fn settle_out_of_order_emits_in_order() {
        let ledger: LendLedger<i64, i64> = LendLedger::new(from_values(vec![0, 1, 2]));
        let out = collector(&ledger);
        let ts: Vec<_> = (0..3).map(|b| ticket(ledger.borrow(b))).collect();
        ledger.settle(ts[2].seq, 102);
        assert!(out.lock().0.is_empty(), "gap at 0 and 1 blocks emission");
        ledger.settle(ts[0].seq, 100);
        assert_eq!(out.lock().0, vec![100]);
        ledger.settle(ts[1].seq, 101);
        assert_eq!(out.lock().0, vec![100, 101, 102]);
        // End is only known once a borrower asks past the last value.
        assert_eq!(out.lock().1, None);
        assert_eq!(ledger.borrow(0), Borrow::Exhausted);
        assert_eq!(out.lock().1, Some(Ok(())));
    }

    #[test]
    fn first_settlement_wins() {
        let ledger: LendLedger<i64, i64> = LendLedger::new(from_values(vec![5]));
        let out = collector(&ledger);
        let t = ticket(ledger.borrow(1));
        ledger.fail_borrow(1, t.seq);
        let again = ticket(ledger.borrow(2));
        assert_eq!(again.seq, t.seq);
        assert!(
            ledger.settle(t.seq, 25),
            "presumed-dead borrower answers first"
        );
        assert!(!ledger.settle(again.seq, 25));
        assert_eq!(out.lock().0, vec![25]);
        assert_eq!(ledger.stats().duplicates, 1);
        // Failing after settlement is ignored.
        ledger.fail_borrow(2, again.seq);
        assert!(ledger.snapshot().relendable.is_empty());
    }

    #[test]
    fn failing_all_outstanding_makes_them_relendable() {
        let ledger: LendLedger<i64, i64> = LendLedger::new(from_iter(0..));
        let ts: Vec<_> = (0..4).map(|_| ticket(ledger.borrow(7))).collect();
        for t in &ts {
            ledger.fail_borrow(7, t.seq);
        }
        assert_eq!(ledger.snapshot().relendable, vec![0, 1, 2, 3]);
    }

    #[test]
    #[should_panic(expected = "never-issued")]
    fn failing_unissued_seq_panics() {
        let ledger: LendLedger<i64, i64> = LendLedger::new(from_values(vec![1]));
        ledger.fail_borrow(0, 3);
    }

    #[test]
    fn source_failure_is_terminal() {
        let (src, push) = pushable::<i64>();
        let ledger: LendLedger<i64, i64> = LendLedger::new(src);
        let out = collector(&ledger);
        push.push(1);
        let t = ticket(ledger.borrow(0));
        ledger.settle(t.seq, 1);
        push.fail(StreamError::new("EINPUT", "bad read"));
        assert_eq!(ledger.borrow(0), Borrow::Exhausted);
        let g = out.lock();
        assert_eq!(g.0, vec![1]);
        assert_eq!(g.1.as_ref().unwrap().as_ref().unwrap_err().code, "EINPUT");
    }

    #[test]
    fn empty_input_ends_result_stream() {
        let ledger: LendLedger<i64, i64> = LendLedger::new(from_values(vec![]));
        let out = collector(&ledger);
        assert_eq!(out.lock().1, None, "nothing has pulled the source yet");
        assert_eq!(ledger.borrow(0), Borrow::Exhausted);
        assert_eq!(out.lock().1, Some(Ok(())));
    }

    #[test]
    fn parked_requests_are_served_when_values_arrive() {
        let (src, push) = pushable::<i64>();
        let ledger: LendLedger<i64, i64> = LendLedger::new(src);
        let got = Arc::new(Mutex::new(Vec::new()));
        for b in 0..2 {
            let g = Arc::clone(&got);
            ledger.request_ticket(b, move |t| g.lock().push((b, t)));
        }
        assert!(got.lock().is_empty());
        push.push(40);
        push.push(41);
        assert_eq!(
            *got.lock(),
            vec![
                (0, Some(Ticket { seq: 0, value: 40 })),
                (1, Some(Ticket { seq: 1, value: 41 }))
            ]
        );
    }

    #[test]
    fn parked_request_gets_relent_value_after_source_end() {
        let ledger: LendLedger<i64, i64> = LendLedger::new(from_values(vec![3]));
        let t = ticket(ledger.borrow(1));
        let got = Arc::new(Mutex::new(None));
        let g = Arc::clone(&got);
        ledger.request_ticket(2, move |t| *g.lock() = Some(t));
        assert!(got.lock().is_none(), "deferred while value 0 is out");
        ledger.fail_borrow(1, t.seq);
        assert_eq!(*got.lock(), Some(Some(Ticket { seq: 0, value: 3 })));
    }

    #[test]
    fn terminate_fails_result_stream_and_releases_waiters() {
        let (src, push) = pushable::<i64>();
        let ledger: LendLedger<i64, i64> = LendLedger::new(src);
        let out = collector(&ledger);
        push.push(0);
        let t = ticket(ledger.borrow(0));
        ledger.settle(t.seq, 0);
        let released = Arc::new(Mutex::new(None));
        let r = Arc::clone(&released);
        ledger.request_ticket(2, move |t| *r.lock() = Some(t.is_none()));
        assert_eq!(*released.lock(), None);
        ledger.terminate(StreamError::new("EPOISON", "too many failures"));
        assert_eq!(*released.lock(), Some(true));
        assert_eq!(out.lock().0, vec![0]);
        assert!(matches!(out.lock().1, Some(Err(ref e)) if e.code == "EPOISON"));
    }

    #[test]
    fn memory_is_proportional_to_outstanding_loans() {
        let ledger: LendLedger<i64, i64> = LendLedger::new(from_iter(0..));
        let _out = collector(&ledger);
        // Four borrowers, each holding one value at a time, settling in a
        // rotating order.
        let mut held: Vec<Ticket<i64>> = (0..4).map(|b| ticket(ledger.borrow(b))).collect();
        for round in 0..1000usize {
            let i = round % 4;
            let t = held[i].clone();
            ledger.settle(t.seq, t.value);
            held[i] = ticket(ledger.borrow(i as u64));
            let snap = ledger.snapshot();
            assert!(snap.borrowed.len() + snap.relendable.len() <= 4);
            assert!(snap.settled.len() <= 4);
        }
    }
}
