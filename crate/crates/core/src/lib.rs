//! Declarative privacy-preserving inference queries.

pub mod catalog;
pub mod dp;
pub mod exec;
pub mod frontend;
pub mod ir;
pub mod learn;
pub mod optimizer;
pub mod persist;
pub mod rewrite;
pub mod scenario;
pub mod service;
pub mod taint;
pub mod types;
pub mod workflow;
