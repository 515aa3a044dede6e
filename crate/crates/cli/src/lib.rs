//! File formats, synthetic data, transports, and executors for the
//! simulation binary. The algorithmic core lives in `fedlft-core`; this
//! crate adds everything that touches the operating system.

pub mod model_file;
pub mod parallel;
pub mod report;
pub mod socket;
pub mod synth;
pub mod triples;
