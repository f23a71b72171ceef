//! Layout-preserving control-flow integrity for a simulated ARMv8-M-like
//! microcontroller: a Thumb-subset toolchain, a TrustZone-M-style machine
//! model, a binary rewriter, and the branch monitor with its secure shadow
//! stack.

pub mod asm;
pub mod diag;
pub mod harness;
pub mod isa;
pub mod machine;
pub mod manifest;
pub mod memory;
pub mod monitor;
pub mod rewriter;
pub mod tables;
