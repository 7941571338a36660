//! The `pando` command-line tool: pipeline integration, volunteer and relay
//! launchers, and the measuring tools used by the experiments.

pub mod run;
pub mod source;
pub mod speedup;
pub mod tools;
