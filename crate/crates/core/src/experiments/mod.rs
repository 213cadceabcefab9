//! Batch experiment harness: scenario files, the trial runner, and the
//! per-trial logs and summaries it writes.

mod records;
mod runner;
mod scenario;

pub use records::*;
pub use runner::*;
pub use scenario::*;
