//! The demand-driven stream contract and basic combinators.
//!
//! A consumer asks its [`DemandSource`] for the next value by calling
//! [`Source::request`] with a `deliver` callback. The source answers exactly
//! once per request, either synchronously (inside the call) or later from
//! any thread. A consumer never has more than one request outstanding,
//! except for an abort, which may be issued while a read is pending and is
//! then applied once that read completes.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;

/// Structured error carried by [`Outcome::Failure`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct StreamError {
    pub code: String,
    pub message: String,
}

impl StreamError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
        }
    }
}

/// What a source delivers in answer to one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome<T> {
    Value(T),
    End,
    Failure(StreamError),
}

impl<T> Outcome<T> {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, Outcome::Value(_))
    }

    /// Re-types a terminal outcome. Returns `None` for `Value`.
    pub fn terminal<U>(&self) -> Option<Outcome<U>> {
        match self {
            Outcome::Value(_) => None,
            Outcome::End => Some(Outcome::End),
            Outcome::Failure(e) => Some(Outcome::Failure(e.clone())),
        }
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> Outcome<U> {
        match self {
            Outcome::Value(v) => Outcome::Value(f(v)),
            Outcome::End => Outcome::End,
            Outcome::Failure(e) => Outcome::Failure(e),
        }
    }

    pub fn into_value(self) -> Option<T> {
        match self {
            Outcome::Value(v) => Some(v),
            _ => None,
        }
    }
}

/// Callback answering a single request.
pub type Deliver<T> = Box<dyn FnOnce(Outcome<T>) + Send>;

/// The upstream end of a pull stream.
pub trait Source<T>: Send {
    /// Asks for the next value, or with `abort` set, tells the source to
    /// release its resources. An aborted source answers `End` (or `Failure`).
    fn request(&mut self, abort: bool, deliver: Deliver<T>);
}

pub type DemandSource<T> = Box<dyn Source<T>>;

/// A stream stage: takes a source, returns a source.
pub type Transform<T> = Box<dyn FnOnce(DemandSource<T>) -> DemandSource<T> + Send>;

impl<T> fmt::Debug for dyn Source<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DemandSource")
    }
}

struct IterSource<I> {
    iter: Option<I>,
}

impl<T, I> Source<T> for IterSource<I>
where
    I: Iterator<Item = T> + Send,
{
    fn request(&mut self, abort: bool, deliver: Deliver<T>) {
        if abort {
            self.iter = None;
            return deliver(Outcome::End);
        }
        match self.iter.as_mut().and_then(Iterator::next) {
            Some(v) => deliver(Outcome::Value(v)),
            None => {
                self.iter = None;
                deliver(Outcome::End)
            }
        }
    }
}

/// A source over a lazily evaluated, possibly infinite iterator.
pub fn from_iter<T, I>(iter: I) -> DemandSource<T>
where
    T: 'static,
    I: IntoIterator<Item = T>,
    I::IntoIter: Send + 'static,
{
    Box::new(IterSource {
        iter: Some(iter.into_iter()),
    })
}

/// A source delivering `values` in order, then `End` forever.
pub fn from_values<T: Send + 'static>(values: Vec<T>) -> DemandSource<T> {
    from_iter(values)
}

// ---------------------------------------------------------------------------
// Pushable source
// ---------------------------------------------------------------------------

struct PushState<T> {
    queue: VecDeque<T>,
    terminal: Option<Outcome<T>>,
    parked: Option<Deliver<T>>,
}

/// Producer side of a [`pushable`] source.
pub struct PushHandle<T> {
    state: Arc<Mutex<PushState<T>>>,
}

impl<T> Clone for PushHandle<T> {
    fn clone(&self) -> Self {
        Self {
            state: Arc::clone(&self.state),
        }
    }
}

impl<T: Send + 'static> PushHandle<T> {
    /// Queues a value, handing it straight to a parked request if any.
    /// Values pushed after `end`/`fail` are dropped.
    pub fn push(&self, value: T) {
        let mut st = self.state.lock();
        if st.terminal.is_some() {
            return;
        }
        match st.parked.take() {
            Some(deliver) => {
                drop(st);
                deliver(Outcome::Value(value));
            }
            None => st.queue.push_back(value),
        }
    }

    pub fn end(&self) {
        self.finish(Outcome::End);
    }

    pub fn fail(&self, error: StreamError) {
        self.finish(Outcome::Failure(error));
    }

    fn finish(&self, outcome: Outcome<T>) {
        let mut st = self.state.lock();
        if st.terminal.is_some() {
            return;
        }
        st.terminal = outcome.terminal();
        if st.queue.is_empty() {
            if let Some(deliver) = st.parked.take() {
                drop(st);
                deliver(outcome);
            }
        }
    }

    /// True while the consumer has a request parked on an empty queue.
    pub fn is_waiting(&self) -> bool {
        self.state.lock().parked.is_some()
    }

    pub fn queued(&self) -> usize {
        self.state.lock().queue.len()
    }
}

struct PushSource<T> {
    state: Arc<Mutex<PushState<T>>>,
}

impl<T: Send + 'static> Source<T> for PushSource<T> {
    fn request(&mut self, abort: bool, deliver: Deliver<T>) {
        let mut st = self.state.lock();
        if abort {
            st.queue.clear();
            if st.terminal.is_none() {
                st.terminal = Some(Outcome::End);
            }
            let parked = st.parked.take();
            let answer = st.terminal.as_ref().and_then(Outcome::terminal);
            drop(st);
            if let Some(p) = parked {
                p(Outcome::End);
            }
            return deliver(answer.unwrap_or(Outcome::End));
        }
        if let Some(v) = st.queue.pop_front() {
            drop(st);
            return deliver(Outcome::Value(v));
        }
        if let Some(t) = st.terminal.as_ref().and_then(Outcome::terminal) {
            drop(st);
            return deliver(t);
        }
        debug_assert!(st.parked.is_none(), "one outstanding request at a time");
        st.parked = Some(deliver);
    }
}

/// A source fed by a producer that pushes values as they arrive. Requests on
/// an empty queue park until the next push, so deliveries are asynchronous.
pub fn pushable<T: Send + 'static>() -> (DemandSource<T>, PushHandle<T>) {
    let state = Arc::new(Mutex::new(PushState {
        queue: VecDeque::new(),
        terminal: None,
        parked: None,
    }));
    (
        Box::new(PushSource {
            state: Arc::clone(&state),
        }),
        PushHandle { state },
    )
}

// ---------------------------------------------------------------------------
// Upstream slot: lets callbacks issue follow-up requests (aborts) on a source
// that may currently be busy inside a `request` call on another stack frame.
// ---------------------------------------------------------------------------

type Deferred<T> = (bool, Deliver<T>);

pub(crate) struct UpstreamSlot<T> {
    source: Option<DemandSource<T>>,
    deferred: VecDeque<Deferred<T>>,
}

impl<T> UpstreamSlot<T> {
    pub(crate) fn new(source: DemandSource<T>) -> Arc<Mutex<Self>> {
        Arc::new(Mutex::new(Self {
            source: Some(source),
            deferred: VecDeque::new(),
        }))
    }
}

pub(crate) fn call_upstream<T: Send + 'static>(
    slot: &Arc<Mutex<UpstreamSlot<T>>>,
    abort: bool,
    deliver: Deliver<T>,
) {
    let mut next = Some((abort, deliver));
    while let Some((abort, deliver)) = next.take() {
        let mut source = {
            let mut st = slot.lock();
            match st.source.take() {
                Some(s) => s,
                None => {
                    // Busy on another frame; it picks this up when it returns.
                    st.deferred.push_back((abort, deliver));
                    return;
                }
            }
        };
        source.request(abort, deliver);
        let mut st = slot.lock();
        st.source = Some(source);
        next = st.deferred.pop_front();
    }
}

// ---------------------------------------------------------------------------
// map / try_map
// ---------------------------------------------------------------------------

struct MapState<U, F> {
    f: F,
    terminal: Option<Outcome<U>>,
    pending: bool,
    queued_abort: Option<Deliver<U>>,
}

struct MapSource<T, U, F> {
    upstream: Arc<Mutex<UpstreamSlot<T>>>,
    state: Arc<Mutex<MapState<U, F>>>,
}

impl<T, U, F> Source<U> for MapSource<T, U, F>
where
    T: Send + 'static,
    U: Send + 'static,
    F: FnMut(T) -> Result<U, StreamError> + Send + 'static,
{
    fn request(&mut self, abort: bool, deliver: Deliver<U>) {
        let mut st = self.state.lock();
        if let Some(t) = st.terminal.as_ref().and_then(Outcome::terminal) {
            drop(st);
            return deliver(t);
        }
        if abort {
            if st.pending {
                st.queued_abort = Some(deliver);
                return;
            }
            st.terminal = Some(Outcome::End);
            drop(st);
            return call_upstream(
                &self.upstream,
                true,
                Box::new(move |o: Outcome<T>| deliver(o.terminal().unwrap_or(Outcome::End))),
            );
        }
        st.pending = true;
        drop(st);
        let state = Arc::clone(&self.state);
        let upstream = Arc::clone(&self.upstream);
        call_upstream(
            &self.upstream,
            false,
            Box::new(move |o| on_mapped(state, upstream, o, deliver)),
        );
    }
}

fn on_mapped<T, U, F>(
    state: Arc<Mutex<MapState<U, F>>>,
    upstream: Arc<Mutex<UpstreamSlot<T>>>,
    outcome: Outcome<T>,
    deliver: Deliver<U>,
) where
    T: Send + 'static,
    U: Send + 'static,
    F: FnMut(T) -> Result<U, StreamError> + Send + 'static,
{
    let mut st = state.lock();
    st.pending = false;
    let mut abort_upstream = false;
    let mapped = match outcome {
        Outcome::Value(v) => match (st.f)(v) {
            Ok(u) => Outcome::Value(u),
            Err(e) => {
                abort_upstream = true;
                Outcome::Failure(e)
            }
        },
        other => other.terminal().unwrap_or(Outcome::End),
    };
    if mapped.is_terminal() {
        st.terminal = mapped.terminal();
    }
    let queued = st.queued_abort.take();
    if queued.is_some() && st.terminal.is_none() {
        st.terminal = Some(Outcome::End);
        abort_upstream = true;
    }
    drop(st);
    deliver(mapped);
    match (abort_upstream, queued) {
        (true, Some(q)) => call_upstream(&upstream, true, Box::new(move |_| q(Outcome::End))),
        (true, None) => call_upstream(&upstream, true, Box::new(|_| {})),
        (false, Some(q)) => q(Outcome::End),
        (false, None) => {}
    }
}

/// Applies a fallible function to every value. An `Err` is delivered as
/// `Failure` and the upstream is aborted.
pub fn try_map<T, U, F>(source: DemandSource<T>, f: F) -> DemandSource<U>
where
    T: Send + 'static,
    U: Send + 'static,
    F: FnMut(T) -> Result<U, StreamError> + Send + 'static,
{
    Box::new(MapSource {
        upstream: UpstreamSlot::new(source),
        state: Arc::new(Mutex::new(MapState {
            f,
            terminal: None,
            pending: false,
            queued_abort: None,
        })),
    })
}

pub fn map<T, U, F>(source: DemandSource<T>, mut f: F) -> DemandSource<U>
where
    T: Send + 'static,
    U: Send + 'static,
    F: FnMut(T) -> U + Send + 'static,
{
    try_map(source, move |v| Ok(f(v)))
}

/// Applies `transforms` in order: `compose(s, [a, b])` is `b(a(s))`.
pub fn compose<T>(source: DemandSource<T>, transforms: Vec<Transform<T>>) -> DemandSource<T> {
    transforms.into_iter().fold(source, |s, t| t(s))
}

// ---------------------------------------------------------------------------
// drain
// ---------------------------------------------------------------------------

type OnEach<T> = Box<dyn FnMut(T) + Send>;
type OnDone = Box<dyn FnOnce(Result<(), StreamError>) + Send>;

struct DrainState<T> {
    source: Option<DemandSource<T>>,
    on_each: Option<OnEach<T>>,
    on_done: Option<OnDone>,
    // Set while a request call is on the stack; a delivery arriving then is
    // parked in `pending` and consumed by the loop instead of recursing.
    in_request: bool,
    pending: Option<Outcome<T>>,
}

/// Reads `source` to completion. `on_each` sees every value in order and
/// `on_done` is called exactly once with `Ok(())` for `End` or the failure.
///
/// Synchronous sources are consumed in a loop, so long streams do not grow
/// the call stack.
pub fn drain<T, E, D>(source: DemandSource<T>, on_each: E, on_done: D)
where
    T: Send + 'static,
    E: FnMut(T) + Send + 'static,
    D: FnOnce(Result<(), StreamError>) + Send + 'static,
{
    let state = Arc::new(Mutex::new(DrainState {
        source: Some(source),
        on_each: Some(Box::new(on_each)),
        on_done: Some(Box::new(on_done)),
        in_request: false,
        pending: None,
    }));
    drain_loop(state, None);
}

fn drain_loop<T: Send + 'static>(state: Arc<Mutex<DrainState<T>>>, mut ready: Option<Outcome<T>>) {
    loop {
        if let Some(outcome) = ready.take() {
            match outcome {
                Outcome::Value(v) => {
                    let mut each = state.lock().on_each.take().expect("on_each present");
                    each(v);
                    state.lock().on_each = Some(each);
                }
                terminal => {
                    let done = state.lock().on_done.take();
                    if let Some(done) = done {
                        done(match terminal {
                            Outcome::Failure(e) => Err(e),
                            _ => Ok(()),
                        });
                    }
                    return;
                }
            }
        }
        let mut source = {
            let mut st = state.lock();
            st.in_request = true;
            st.source.take().expect("drain source present")
        };
        let cb_state = Arc::clone(&state);
        source.request(
            false,
            Box::new(move |o| {
                let mut st = cb_state.lock();
                if st.in_request {
                    st.pending = Some(o);
                } else {
                    drop(st);
                    drain_loop(cb_state, Some(o));
                }
            }),
        );
        let mut st = state.lock();
        st.source = Some(source);
        st.in_request = false;
        match st.pending.take() {
            Some(o) => ready = Some(o),
            // Delivery will arrive asynchronously and resume the loop.
            None => return,
        }
    }
}
