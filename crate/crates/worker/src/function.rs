use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use crate::builtin::Builtin;
use crate::exec::ExecFunction;

/// A failed job. `code` is a short machine-readable tag such as `EPARSE`.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code} {message}")]
pub struct JobError {
    pub code: String,
    pub message: String,
}

impl JobError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Self::new("EPARSE", message)
    }

    pub fn worker(message: impl Into<String>) -> Self {
        Self::new("EWORKER", message)
    }
}

pub type JobResult = Result<String, JobError>;

/// Completion callback; called exactly once per `apply`.
pub type Done = Box<dyn FnOnce(JobResult) + Send>;

/// The job-function contract: a value and a callback. Implementations may
/// call `done` before returning or later from another thread.
pub trait JobFunction: Send + Sync {
    fn apply(&self, input: &str, done: Done);
}

/// Which function a run applies, as named on the command line:
/// a builtin name, or `exec:<path> [args...]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FunctionSpec {
    Builtin(Builtin),
    Exec { path: PathBuf, args: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("unknown builtin function `{0}` (expected one of: {names})", names = Builtin::NAMES.join(", "))]
    UnknownBuiltin(String),
    #[error("empty exec path")]
    EmptyExec,
}

impl FromStr for FunctionSpec {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(rest) = s.strip_prefix("exec:") {
            let mut parts = rest.split_whitespace();
            let path = parts.next().ok_or(SpecError::EmptyExec)?;
            return Ok(FunctionSpec::Exec {
                path: PathBuf::from(path),
                args: parts.map(str::to_owned).collect(),
            });
        }
        Builtin::from_name(s)
            .map(FunctionSpec::Builtin)
            .ok_or_else(|| SpecError::UnknownBuiltin(s.to_owned()))
    }
}

impl fmt::Display for FunctionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FunctionSpec::Builtin(b) => f.write_str(b.name()),
            FunctionSpec::Exec { path, args } => {
                write!(f, "exec:{}", path.display())?;
                for a in args {
                    write!(f, " {a}")?;
                }
                Ok(())
            }
        }
    }
}

impl FunctionSpec {
    /// Builds a runnable function. Exec functions start their child lazily
    /// on the first job.
    pub fn instantiate(&self) -> Arc<dyn JobFunction> {
        match self {
            FunctionSpec::Builtin(b) => Arc::new(b.clone()),
            FunctionSpec::Exec { path, args } => Arc::new(ExecFunction::new(path, args.clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn parses_builtins_and_exec() {
        assert_eq!(
            "square".parse::<FunctionSpec>(),
            Ok(FunctionSpec::Builtin(Builtin::Square))
        );
        assert_eq!(
            "sleep-square".parse::<FunctionSpec>(),
            Ok(FunctionSpec::Builtin(Builtin::SleepSquare(
                Duration::from_secs(1)
            )))
        );
        let exec: FunctionSpec = "exec:/bin/cat -u".parse().unwrap();
        assert_eq!(
            exec,
            FunctionSpec::Exec {
                path: "/bin/cat".into(),
                args: vec!["-u".into()]
            }
        );
        assert_eq!(exec.to_string(), "exec:/bin/cat -u");
        assert!(matches!(
            "cube".parse::<FunctionSpec>(),
            Err(SpecError::UnknownBuiltin(_))
        ));
        assert_eq!("exec:".parse::<FunctionSpec>(), Err(SpecError::EmptyExec));
    }
}
