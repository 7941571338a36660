//! Demand-driven (pull) streams and the lending abstractions built on them.
//!
//! A [`DemandSource`] only produces a value when its consumer asks for one.
//! Everything in this crate composes around that contract:
//!
//! - [`stream`]: the contract itself plus a handful of combinators.
//! - [`lend`]: a ledger that lends values one at a time, re-lends values
//!   whose borrower failed and emits results in input order.
//! - [`lend_stream`]: per-borrower sub-streams over a shared ledger.
//! - [`limit`]: a gate bounding the number of values in flight on a source.

pub mod lend;
pub mod lend_stream;
pub mod limit;
pub mod stream;

pub use lend::{Borrow, BorrowerId, LedgerSnapshot, LedgerStats, LendLedger, Ticket};
pub use lend_stream::{open_substream, SubStream, SubStreamState};
pub use limit::{gate, LimitGate};
pub use stream::{
    compose, drain, from_iter, from_values, map, pushable, try_map, Deliver, DemandSource, Outcome,
    PushHandle, Source, StreamError, Transform,
};
