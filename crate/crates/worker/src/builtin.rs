//! Functions shipped with the tool, selectable by name.

use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use num_bigint::{BigInt, BigUint};
use num_traits::{One, Zero};

use crate::function::{Done, JobError, JobFunction, JobResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Builtin {
    Square,
    /// Square, returned only after the given delay.
    SleepSquare(Duration),
    CollatzSteps,
    CollatzRange,
    Identity,
}

impl Builtin {
    pub const NAMES: [&'static str; 5] = [
        "square",
        "sleep-square",
        "collatz-steps",
        "collatz-range",
        "identity",
    ];

    pub const SLEEP_SQUARE_DELAY: Duration = Duration::from_secs(1);

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "square" => Builtin::Square,
            "sleep-square" => Builtin::SleepSquare(Self::SLEEP_SQUARE_DELAY),
            "collatz-steps" => Builtin::CollatzSteps,
            "collatz-range" => Builtin::CollatzRange,
            "identity" => Builtin::Identity,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Builtin::Square => "square",
            Builtin::SleepSquare(_) => "sleep-square",
            Builtin::CollatzSteps => "collatz-steps",
            Builtin::CollatzRange => "collatz-range",
            Builtin::Identity => "identity",
        }
    }

    /// Fixed wall-clock cost of one job, on top of the computation itself.
    pub fn delay(&self) -> Duration {
        match self {
            Builtin::SleepSquare(d) => *d,
            _ => Duration::ZERO,
        }
    }

    /// The pure part of the function, without any delay.
    pub fn compute(&self, input: &str) -> JobResult {
        match self {
            Builtin::Square | Builtin::SleepSquare(_) => square(input),
            Builtin::CollatzSteps => {
                let n = parse_positive(input)?;
                Ok(collatz_steps(&n).to_string())
            }
            Builtin::CollatzRange => collatz_range(input),
            Builtin::Identity => Ok(input.to_owned()),
        }
    }

    /// Runs the job on the calling thread, sleeping out the delay on a
    /// monotonic clock.
    pub fn run(&self, input: &str) -> JobResult {
        let deadline = Instant::now() + self.delay();
        let result = self.compute(input);
        let now = Instant::now();
        if deadline > now {
            thread::sleep(deadline - now);
        }
        result
    }
}

impl JobFunction for Builtin {
    fn apply(&self, input: &str, done: Done) {
        done(self.run(input))
    }
}

pub fn square(input: &str) -> JobResult {
    let x = BigInt::from_str(input.trim())
        .map_err(|_| JobError::parse(format!("not an integer: {input:?}")))?;
    Ok((&x * &x).to_string())
}

fn parse_positive(input: &str) -> Result<BigUint, JobError> {
    let n = BigInt::from_str(input.trim())
        .map_err(|_| JobError::parse(format!("not an integer: {input:?}")))?;
    n.to_biguint()
        .filter(|n| !n.is_zero())
        .ok_or_else(|| JobError::parse(format!("not a positive integer: {input:?}")))
}

/// Iterations of n -> n/2 (even), n -> 3n+1 (odd) until n reaches 1.
/// Runs on u128 while the values fit and falls back to big integers when
/// 3n+1 would overflow.
pub fn collatz_steps(n: &BigUint) -> u64 {
    assert!(!n.is_zero(), "collatz_steps is undefined for 0");
    let mut steps = 0u64;
    let mut big = n.clone();
    loop {
        if let Some(mut small) = to_u128(&big) {
            loop {
                if small == 1 {
                    return steps;
                }
                if small % 2 == 0 {
                    small /= 2;
                } else {
                    match small.checked_mul(3).and_then(|v| v.checked_add(1)) {
                        Some(v) => small = v,
                        None => break,
                    }
                }
                steps += 1;
            }
            big = BigUint::from(small);
        }
        // Big path: step until the value fits in u128 again.
        loop {
            if big.is_one() {
                return steps;
            }
            if big.bit(0) {
                big = big * 3u32 + 1u32;
            } else {
                big >>= 1;
            }
            steps += 1;
            if big.bits() < 127 {
                break;
            }
        }
    }
}

fn to_u128(n: &BigUint) -> Option<u128> {
    if n.bits() > 128 {
        return None;
    }
    let digits = n.to_u64_digits();
    Some(match digits.as_slice() {
        [] => 0,
        [lo] => *lo as u128,
        [lo, hi] => (*hi as u128) << 64 | *lo as u128,
        _ => return None,
    })
}

/// `"start:count"` to `"argmax:steps"` over `[start, start+count)`; the
/// smaller number wins a tie.
pub fn collatz_range(input: &str) -> JobResult {
    let malformed = || JobError::parse(format!("expected start:count, got {input:?}"));
    let (start, count) = input.trim().split_once(':').ok_or_else(malformed)?;
    let start = parse_positive(start)?;
    let count: u64 = count.trim().parse().map_err(|_| malformed())?;
    if count == 0 {
        return Err(malformed());
    }
    let mut best: Option<(BigUint, u64)> = None;
    let mut n = start;
    for _ in 0..count {
        let steps = collatz_steps(&n);
        if best.as_ref().is_none_or(|(_, s)| steps > *s) {
            best = Some((n.clone(), steps));
        }
        n += 1u32;
    }
    let (arg, steps) = best.expect("count >= 1");
    Ok(format!("{arg}:{steps}"))
}
