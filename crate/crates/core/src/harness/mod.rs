//! Attack scripts, the run pipeline and the benchmark driver.

pub mod attack;
pub mod bench;
pub mod runner;
