//! What a processor node runs.
//!
//! A job is one line of text in, one line of text (or an error) out. The
//! [`JobFunction`] trait is the callback-style contract every function
//! follows; [`builtin`] holds the functions shipped with the tool and
//! [`exec`] adapts any executable speaking a line protocol on its standard
//! streams.

pub mod builtin;
pub mod exec;
pub mod function;
pub mod processor;

pub use builtin::Builtin;
pub use exec::ExecFunction;
pub use function::{Done, FunctionSpec, JobError, JobFunction, JobResult};
pub use processor::Processor;
