//! Bounding the number of values in flight on a source.
//!
//! Transports that push data as fast as they can (sockets, data channels)
//! would otherwise drain the whole main stream into one child. A gate
//! forwards requests upstream only while fewer than `capacity` delivered
//! values are unreleased; further requests park, FIFO, until a
//! [`LimitGate::release`].

use std::collections::VecDeque;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::stream::{call_upstream, Deliver, DemandSource, Outcome, Source, UpstreamSlot};

struct GateState<T> {
    capacity: usize,
    in_flight: usize,
    // Requests forwarded upstream and not answered yet; counted against the
    // capacity so a burst of deliveries cannot overshoot it.
    reserved: usize,
    waiters: VecDeque<Deliver<T>>,
}

/// Control handle of a gated source.
pub struct LimitGate<T> {
    state: Arc<Mutex<GateState<T>>>,
    upstream: Arc<Mutex<UpstreamSlot<T>>>,
}

impl<T> Clone for LimitGate<T> {
    fn clone(&self) -> Self {
        Self {
            state: Arc::clone(&self.state),
            upstream: Arc::clone(&self.upstream),
        }
    }
}

/// Wraps `source` so that at most `capacity` delivered values are
/// outstanding at once. Returns the gated source and its control handle.
///
/// # Panics
///
/// If `capacity` is zero.
pub fn gate<T: Send + 'static>(
    source: DemandSource<T>,
    capacity: usize,
) -> (DemandSource<T>, LimitGate<T>) {
    assert!(capacity >= 1, "gate capacity must be at least 1");
    let handle = LimitGate {
        state: Arc::new(Mutex::new(GateState {
            capacity,
            in_flight: 0,
            reserved: 0,
            waiters: VecDeque::new(),
        })),
        upstream: UpstreamSlot::new(source),
    };
    (
        Box::new(Gated {
            gate: handle.clone(),
        }),
        handle,
    )
}

impl<T: Send + 'static> LimitGate<T> {
    pub fn capacity(&self) -> usize {
        self.state.lock().capacity
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().in_flight
    }

    pub fn parked(&self) -> usize {
        self.state.lock().waiters.len()
    }

    /// One delivered value has been returned.
    ///
    /// # Panics
    ///
    /// When nothing is in flight.
    pub fn release(&self) {
        let mut st = self.state.lock();
        assert!(st.in_flight > 0, "gate released below zero");
        st.in_flight -= 1;
        drop(st);
        self.unpark();
    }

    /// Changes the bound. Raising it serves parked requests right away;
    /// lowering it revokes nothing, the in-flight count just drains below
    /// the new bound before more values flow.
    pub fn set_capacity(&self, capacity: usize) {
        assert!(capacity >= 1, "gate capacity must be at least 1");
        self.state.lock().capacity = capacity;
        self.unpark();
    }

    fn unpark(&self) {
        loop {
            let mut st = self.state.lock();
            if st.waiters.is_empty() || st.in_flight + st.reserved >= st.capacity {
                return;
            }
            let deliver = st.waiters.pop_front().expect("checked");
            st.reserved += 1;
            drop(st);
            self.forward(deliver);
        }
    }

    fn forward(&self, deliver: Deliver<T>) {
        let state = Arc::clone(&self.state);
        call_upstream(
            &self.upstream,
            false,
            Box::new(move |o| {
                let mut st = state.lock();
                st.reserved -= 1;
                if matches!(o, Outcome::Value(_)) {
                    st.in_flight += 1;
                }
                drop(st);
                deliver(o)
            }),
        );
    }
}

struct Gated<T> {
    gate: LimitGate<T>,
}

impl<T: Send + 'static> Source<T> for Gated<T> {
    fn request(&mut self, abort: bool, deliver: Deliver<T>) {
        if abort {
            let parked: Vec<_> = self.gate.state.lock().waiters.drain(..).collect();
            for p in parked {
                p(Outcome::End);
            }
            return call_upstream(&self.gate.upstream, true, deliver);
        }
        let mut st = self.gate.state.lock();
        if st.in_flight + st.reserved < st.capacity {
            st.reserved += 1;
            drop(st);
            self.gate.forward(deliver);
        } else {
            st.waiters.push_back(deliver);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{from_iter, from_values};

    fn request(src: &mut DemandSource<i32>) -> Arc<Mutex<Option<Outcome<i32>>>> {
        let got = Arc::new(Mutex::new(None));
        let g = Arc::clone(&got);
        src.request(false, Box::new(move |o| *g.lock() = Some(o)));
        got
    }

    #[test]
    fn parks_at_capacity_and_resumes_on_release() {
        let (mut src, gate) = gate(from_values(vec![1, 2, 3]), 2);
        assert_eq!(*request(&mut src).lock(), Some(Outcome::Value(1)));
        assert_eq!(*request(&mut src).lock(), Some(Outcome::Value(2)));
        let third = request(&mut src);
        assert_eq!(*third.lock(), None);
        assert_eq!(gate.parked(), 1);
        gate.release();
        assert_eq!(*third.lock(), Some(Outcome::Value(3)));
        assert_eq!(gate.in_flight(), 2);
    }

    #[test]
    fn capacity_one_alternates() {
        let (mut src, gate) = gate(from_iter(0..), 1);
        assert_eq!(*request(&mut src).lock(), Some(Outcome::Value(0)));
        for i in 1..6 {
            let blocked = request(&mut src);
            assert_eq!(*blocked.lock(), None);
            gate.release();
            assert_eq!(*blocked.lock(), Some(Outcome::Value(i)));
        }
    }

    #[test]
    fn large_capacity_is_identity() {
        let (mut src, _gate) = gate(from_values(vec![4, 5]), 10);
        let got: Vec<_> = (0..3)
            .map(|_| request(&mut src).lock().clone().unwrap())
            .collect();
        assert_eq!(
            got,
            vec![Outcome::Value(4), Outcome::Value(5), Outcome::End]
        );
    }

    #[test]
    fn raising_capacity_unparks() {
        let (mut src, gate) = gate(from_iter(0..), 2);
        request(&mut src);
        request(&mut src);
        let a = request(&mut src);
        let b = request(&mut src);
        assert_eq!(gate.parked(), 2);
        gate.set_capacity(4);
        assert_eq!(*a.lock(), Some(Outcome::Value(2)));
        assert_eq!(*b.lock(), Some(Outcome::Value(3)));
        assert_eq!(gate.in_flight(), 4);
    }

    #[test]
    fn lowering_capacity_drains_naturally() {
        let (mut src, gate) = gate(from_iter(0..), 4);
        for _ in 0..4 {
            request(&mut src);
        }
        gate.set_capacity(2);
        let parked = request(&mut src);
        gate.release();
        gate.release();
        assert_eq!(*parked.lock(), None, "in flight 2, bound 2");
        gate.release();
        assert_eq!(*parked.lock(), Some(Outcome::Value(4)));
        gate.set_capacity(2);
        assert_eq!(gate.capacity(), 2);
    }

    #[test]
    #[should_panic(expected = "below zero")]
    fn release_below_zero_panics() {
        let (_src, gate) = gate(from_values(vec![1]), 1);
        gate.release();
    }
}
