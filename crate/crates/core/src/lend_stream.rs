//! Per-borrower sub-streams over a shared [`LendLedger`].
//!
//! Each child (or the local processor) gets a [`SubStream`]: its outgoing
//! side borrows tickets from the ledger on demand, its incoming side settles
//! results. Failing a sub-stream hands every value it still holds back to
//! the ledger for re-lending; the main result stream never sees the failure.

use std::collections::BTreeSet;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::lend::{BorrowerId, LendLedger, Ticket};
use crate::stream::{Deliver, DemandSource, Outcome, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubStreamState {
    Open,
    /// No further borrowing; values already held may still be settled.
    Closing,
    Closed,
    Failed,
}

struct Inner {
    state: SubStreamState,
    outstanding: BTreeSet<u64>,
}

/// One borrower's bi-directional view of a ledger.
pub struct SubStream<T, R> {
    id: BorrowerId,
    ledger: LendLedger<T, R>,
    inner: Arc<Mutex<Inner>>,
}

impl<T, R> Clone for SubStream<T, R> {
    fn clone(&self) -> Self {
        Self {
            id: self.id,
            ledger: self.ledger.clone(),
            inner: Arc::clone(&self.inner),
        }
    }
}

/// Opens a sub-stream borrowing from `ledger` under `id`. Ids come from the
/// caller (the overlay uses child node ids) so diagnostics can name them.
pub fn open_substream<T, R>(ledger: &LendLedger<T, R>, id: BorrowerId) -> SubStream<T, R>
where
    T: Clone + Send + 'static,
    R: Send + 'static,
{
    SubStream {
        id,
        ledger: ledger.clone(),
        inner: Arc::new(Mutex::new(Inner {
            state: SubStreamState::Open,
            outstanding: BTreeSet::new(),
        })),
    }
}

impl<T, R> SubStream<T, R>
where
    T: Clone + Send + 'static,
    R: Send + 'static,
{
    pub fn id(&self) -> BorrowerId {
        self.id
    }

    pub fn state(&self) -> SubStreamState {
        self.inner.lock().state
    }

    /// Sequence numbers borrowed through this sub-stream and not yet settled.
    pub fn outstanding(&self) -> Vec<u64> {
        self.inner.lock().outstanding.iter().copied().collect()
    }

    /// The stream of tickets lent to this borrower. Requests park while the
    /// ledger has nothing to lend but may still get something (source
    /// pending, or loans elsewhere that could fail); `End` once the ledger is
    /// exhausted or this sub-stream stops borrowing.
    pub fn outgoing(&self) -> DemandSource<Ticket<T>> {
        Box::new(Outgoing { sub: self.clone() })
    }

    /// Settles one of this sub-stream's tickets. Rejected (returns `false`)
    /// when the ticket is not ours or the sub-stream has failed or closed.
    pub fn settle(&self, seq: u64, result: R) -> bool {
        let mut inner = self.inner.lock();
        if matches!(inner.state, SubStreamState::Closed | SubStreamState::Failed)
            || !inner.outstanding.remove(&seq)
        {
            return false;
        }
        if inner.state == SubStreamState::Closing && inner.outstanding.is_empty() {
            inner.state = SubStreamState::Closed;
        }
        drop(inner);
        self.ledger.settle(seq, result)
    }

    /// Gives a single ticket back for re-lending, leaving the sub-stream
    /// open. Used when the job itself failed on this borrower.
    pub fn fail_ticket(&self, seq: u64) -> bool {
        let mut inner = self.inner.lock();
        if !inner.outstanding.remove(&seq) {
            return false;
        }
        if inner.state == SubStreamState::Closing && inner.outstanding.is_empty() {
            inner.state = SubStreamState::Closed;
        }
        drop(inner);
        self.ledger.fail_borrow(self.id, seq);
        true
    }

    /// The borrower is gone: every unsettled ticket is re-lent. Idempotent.
    /// Returns the number of values handed back.
    pub fn fail(&self) -> usize {
        let mut inner = self.inner.lock();
        if matches!(inner.state, SubStreamState::Failed | SubStreamState::Closed) {
            return 0;
        }
        inner.state = SubStreamState::Failed;
        let held = std::mem::take(&mut inner.outstanding);
        drop(inner);
        self.ledger.cancel_requests(self.id);
        for &seq in &held {
            self.ledger.fail_borrow(self.id, seq);
        }
        held.len()
    }

    /// Graceful leave: stop borrowing, keep accepting results for values
    /// already held. Idempotent; a no-op on a failed sub-stream.
    pub fn close(&self) {
        let mut inner = self.inner.lock();
        if inner.state != SubStreamState::Open {
            return;
        }
        inner.state = if inner.outstanding.is_empty() {
            SubStreamState::Closed
        } else {
            SubStreamState::Closing
        };
        drop(inner);
        self.ledger.cancel_requests(self.id);
    }

    /// The owner of a closing sub-stream has shut down: whatever it still
    /// held is re-lent. Returns the number of values handed back.
    pub fn confirm_shutdown(&self) -> usize {
        let mut inner = self.inner.lock();
        if inner.state != SubStreamState::Closing {
            return 0;
        }
        inner.state = SubStreamState::Closed;
        let held = std::mem::take(&mut inner.outstanding);
        drop(inner);
        for &seq in &held {
            self.ledger.fail_borrow(self.id, seq);
        }
        held.len()
    }
}

struct Outgoing<T, R> {
    sub: SubStream<T, R>,
}

impl<T, R> Source<Ticket<T>> for Outgoing<T, R>
where
    T: Clone + Send + 'static,
    R: Send + 'static,
{
    fn request(&mut self, abort: bool, deliver: Deliver<Ticket<T>>) {
        if abort {
            self.sub.close();
            return deliver(Outcome::End);
        }
        if self.sub.state() != SubStreamState::Open {
            return deliver(Outcome::End);
        }
        let sub = self.sub.clone();
        self.sub.ledger.request_ticket(self.sub.id, move |ticket| {
            let Some(ticket) = ticket else {
                return deliver(Outcome::End);
            };
            let mut inner = sub.inner.lock();
            if inner.state == SubStreamState::Open {
                inner.outstanding.insert(ticket.seq);
                drop(inner);
                deliver(Outcome::Value(ticket));
            } else {
                // Lent while we were shutting down: hand it straight back.
                drop(inner);
                sub.ledger.fail_borrow(sub.id, ticket.seq);
                deliver(Outcome::End);
            }
        });
    }
}
