//! Stochastic optimization of straightline 64-bit arithmetic for x86-64.
//!
//! A function given as a JSON list of single-assignment operations is turned into a
//! [`model::Model`] (an operation order plus one instruction template per operation).
//! The optimizer repeatedly mutates the model, emits and encodes the candidate,
//! measures it against the incumbent and keeps it only if it is correct and faster.

pub mod batch;
pub mod catalog;
pub mod emit;
pub mod emulate;
pub mod encode;
pub mod exec;
pub mod external;
pub mod ir;
pub mod measure;
pub mod model;
pub mod optimizer;
pub mod oracle;
pub mod regalloc;
pub mod selftest;
pub mod testgen;
pub mod x86;
