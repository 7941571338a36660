//! Small pipeline tools: a counter, a checker for the square series and a
//! line-rate meter.

use std::io::{self, BufRead, Write};
use std::time::Duration;

/// Writes `from`, `from + 1`, ... one per line, `to` lines at most. A closed
/// downstream pipe ends the count quietly.
pub fn count(out: &mut impl Write, from: u64, to: Option<u64>) -> io::Result<()> {
    let end = to.map_or(u64::MAX, |n| from.saturating_add(n));
    for i in from..end {
        if let Err(e) = writeln!(out, "{i}") {
            return quiet_pipe(e);
        }
    }
    quiet_pipe_result(out.flush())
}

/// Writes `start:size`, `start+size:size`, ... as inputs for `collatz-range`.
pub fn count_ranges(
    out: &mut impl Write,
    start: u64,
    size: u64,
    to: Option<u64>,
) -> io::Result<()> {
    let n = to.unwrap_or(u64::MAX);
    for k in 0..n {
        let Some(s) = k.checked_mul(size).and_then(|o| o.checked_add(start)) else {
            break;
        };
        if let Err(e) = writeln!(out, "{s}:{size}") {
            return quiet_pipe(e);
        }
    }
    quiet_pipe_result(out.flush())
}

fn quiet_pipe(e: io::Error) -> io::Result<()> {
    if e.kind() == io::ErrorKind::BrokenPipe {
        Ok(())
    } else {
        Err(e)
    }
}

fn quiet_pipe_result(r: io::Result<()>) -> io::Result<()> {
    r.or_else(quiet_pipe)
}

#[derive(Debug, thiserror::Error)]
pub enum ExpectError {
    #[error("line {line}: expected {expected}, got {got:?}")]
    Mismatch {
        line: u64,
        expected: String,
        got: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Passes lines through while they follow 0², 1², 2², ...; stops at the
/// first one that does not. Returns the number of lines checked.
pub fn expect_square(input: impl BufRead, out: &mut impl Write) -> Result<u64, ExpectError> {
    let mut n: u128 = 0;
    for line in input.lines() {
        let line = line?;
        let expected = (n * n).to_string();
        if line.trim() != expected {
            return Err(ExpectError::Mismatch {
                line: n as u64 + 1,
                expected,
                got: line,
            });
        }
        writeln!(out, "{line}").or_else(quiet_pipe)?;
        n += 1;
    }
    out.flush().or_else(quiet_pipe)?;
    Ok(n as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputSample {
    pub window: Duration,
    pub lines: u64,
    /// Lines per second over the window.
    pub rate: f64,
    /// Lines per second since the meter started.
    pub cumulative: f64,
}

/// Counts lines against a clock given as elapsed time since the start.
#[derive(Debug, Default)]
pub struct Meter {
    window_start: Duration,
    window_lines: u64,
    total: u64,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, lines: u64) {
        self.window_lines += lines;
        self.total += lines;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Closes the current window at `now`.
    pub fn sample(&mut self, now: Duration) -> ThroughputSample {
        let window = now.saturating_sub(self.window_start);
        let s = ThroughputSample {
            window,
            lines: self.window_lines,
            rate: per_second(self.window_lines, window),
            cumulative: per_second(self.total, now),
        };
        self.window_start = now;
        self.window_lines = 0;
        s
    }
}

fn per_second(lines: u64, over: Duration) -> f64 {
    if over.is_zero() {
        0.0
    } else {
        lines as f64 / over.as_secs_f64()
    }
}

impl std::fmt::Display for ThroughputSample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} lines in {:.3}s: {:.3} lines/s (overall {:.3} lines/s)",
            self.lines,
            self.window.as_secs_f64(),
            self.rate,
            self.cumulative
        )
    }
}
