//! Deterministic simulator of return-stack-buffer speculation.
//!
//! A small ISA and assembler, a machine with paged memory and privilege
//! modes, shared branch predictors, a set-associative cache, a speculative
//! pipeline, mitigations, and runnable attack scenarios with cache receivers.

pub mod cache;
pub mod defenses;
pub mod harness;
pub mod isa;
pub mod machine;
pub mod pipeline;
pub mod predictors;
pub mod scenarios;
