//! Tree-of-Agents runtime for firmware filesystem analysis.

pub mod envelope;
pub mod llm;
pub mod model;
pub mod tools;
pub mod hub;
pub mod engine;
pub mod roles;
pub mod harness;
