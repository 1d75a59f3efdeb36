//! File formats, parallel execution, benchmarking and reports on top of
//! [`stsparse_core`].

#![deny(missing_debug_implementations, rust_2018_idioms)]

pub mod bench;
pub mod config;
pub mod dump;
pub mod parallel;
pub mod pgm;
pub mod report;

pub use config::{RunConfig, UsageError};
pub use dump::{read_dump, write_dump, DumpError, HeadDump};
