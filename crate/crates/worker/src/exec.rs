//! External-process functions.
//!
//! One long-lived child per function instance. Each apply writes one line
//! to the child's stdin; the child answers each line, in order, with
//! `OK <result>` or `ERR <code> <message>` on stdout. If the child exits,
//! every unanswered apply fails with `EWORKER` and the next apply starts a
//! fresh child after an exponential backoff.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::function::{Done, JobError, JobFunction, JobResult};

const BACKOFF_BASE: Duration = Duration::from_millis(100);
const BACKOFF_CAP: Duration = Duration::from_secs(5);
const EXIT_POLL: Duration = Duration::from_millis(20);

pub struct ExecFunction {
    path: PathBuf,
    args: Vec<String>,
    running: Mutex<Option<Running>>,
    /// Consecutive child deaths without a reply in between.
    crashes: Arc<AtomicU32>,
    spawned_at: Mutex<Option<Instant>>,
    spawns: AtomicU32,
}

struct Running {
    child: Arc<Mutex<Child>>,
    stdin: ChildStdin,
    replies: Arc<Mutex<Replies>>,
}

#[derive(Default)]
struct Replies {
    waiting: VecDeque<Done>,
    dead: bool,
}

/// Marks the child dead once and fails whatever it still owed.
fn bury(replies: &Mutex<Replies>, crashes: &AtomicU32, name: &str) {
    let orphans = {
        let mut r = replies.lock();
        if r.dead {
            return;
        }
        r.dead = true;
        std::mem::take(&mut r.waiting)
    };
    crashes.fetch_add(1, Ordering::SeqCst);
    tracing::debug!(child = %name, orphans = orphans.len(), "exec child exited");
    for done in orphans {
        done(Err(JobError::worker(format!("{name} exited"))));
    }
}

impl ExecFunction {
    pub fn new(path: impl AsRef<Path>, args: Vec<String>) -> Self {
        Self {
            path: path.as_ref().to_owned(),
            args,
            running: Mutex::new(None),
            crashes: Arc::new(AtomicU32::new(0)),
            spawned_at: Mutex::new(None),
            spawns: AtomicU32::new(0),
        }
    }

    /// How many children have been started so far.
    pub fn spawn_count(&self) -> u32 {
        self.spawns.load(Ordering::SeqCst)
    }

    /// Pid of the live child, if any.
    pub fn child_id(&self) -> Option<u32> {
        let running = self.running.lock();
        running
            .as_ref()
            .filter(|r| !r.replies.lock().dead)
            .map(|r| r.child.lock().id())
    }

    fn backoff(&self) -> Duration {
        match self.crashes.load(Ordering::SeqCst) {
            0 => Duration::ZERO,
            k => BACKOFF_BASE
                .saturating_mul(1u32 << (k - 1).min(16))
                .min(BACKOFF_CAP),
        }
    }

    fn spawn(&self) -> std::io::Result<Running> {
        let wait = self.backoff();
        if let Some(at) = *self.spawned_at.lock() {
            let ready = at + wait;
            let now = Instant::now();
            if ready > now {
                thread::sleep(ready - now);
            }
        }
        *self.spawned_at.lock() = Some(Instant::now());
        self.spawns.fetch_add(1, Ordering::SeqCst);

        let mut child = Command::new(&self.path)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let replies = Arc::new(Mutex::new(Replies::default()));

        let reader_replies = replies.clone();
        let crashes = self.crashes.clone();
        let name = self.path.display().to_string();
        thread::Builder::new()
            .name("exec-reader".into())
            .spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    let Ok(line) = line else { break };
                    let done = reader_replies.lock().waiting.pop_front();
                    match done {
                        Some(done) => {
                            crashes.store(0, Ordering::SeqCst);
                            done(parse_reply(&line));
                        }
                        None => tracing::warn!(child = %name, %line, "unsolicited reply ignored"),
                    }
                }
                bury(&reader_replies, &crashes, &name);
            })?;
        // End of output alone misses a dead child whose descendants still
        // hold the pipe, so also watch the exit status.
        let child = Arc::new(Mutex::new(child));
        let (watched, watch_replies) = (child.clone(), replies.clone());
        let crashes = self.crashes.clone();
        let name = self.path.display().to_string();
        thread::Builder::new()
            .name("exec-monitor".into())
            .spawn(move || loop {
                if watch_replies.lock().dead {
                    return;
                }
                if !matches!(watched.lock().try_wait(), Ok(None)) {
                    return bury(&watch_replies, &crashes, &name);
                }
                thread::sleep(EXIT_POLL);
            })?;
        Ok(Running {
            child,
            stdin,
            replies,
        })
    }
}

fn parse_reply(line: &str) -> JobResult {
    if line == "OK" {
        return Ok(String::new());
    }
    if let Some(result) = line.strip_prefix("OK ") {
        return Ok(result.to_owned());
    }
    if let Some(rest) = line.strip_prefix("ERR ") {
        let (code, message) = rest.split_once(' ').unwrap_or((rest, ""));
        if !code.is_empty() {
            return Err(JobError::new(code, message));
        }
    }
    Err(JobError::worker(format!("malformed reply {line:?}")))
}

impl JobFunction for ExecFunction {
    fn apply(&self, input: &str, done: Done) {
        if input.contains('\n') {
            return done(Err(JobError::parse("input spans several lines")));
        }
        let mut running = self.running.lock();
        let alive = running.as_ref().is_some_and(|r| !r.replies.lock().dead);
        if !alive {
            if let Some(old) = running.take() {
                let mut child = old.child.lock();
                let _ = child.kill();
                let _ = child.wait();
            }
            match self.spawn() {
                Ok(r) => *running = Some(r),
                Err(e) => {
                    self.crashes.fetch_add(1, Ordering::SeqCst);
                    return done(Err(JobError::worker(format!(
                        "cannot start {}: {e}",
                        self.path.display()
                    ))));
                }
            }
        }
        let r = running.as_mut().expect("child running");
        {
            let mut replies = r.replies.lock();
            if replies.dead {
                drop(replies);
                return done(Err(JobError::worker("child exited")));
            }
            replies.waiting.push_back(done);
        }
        // A failed write means the child is gone; the reader fails the
        // queued callback when it sees end of output.
        let _ = writeln!(r.stdin, "{input}").and_then(|_| r.stdin.flush());
    }
}

impl Drop for ExecFunction {
    fn drop(&mut self) {
        if let Some(r) = self.running.lock().take() {
            r.replies.lock().dead = true;
            let mut child = r.child.lock();
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
