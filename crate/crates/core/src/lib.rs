//! Configuration search for multi-step analytic pipelines.
//!
//! The search runs in three phases over a pipeline DAG: greedy D-optimal path
//! selection to initialize a linear surrogate, expected-improvement-per-second
//! pruning down to a small subgraph, and density-ratio fine-tuning of paths and
//! hyperparameters inside that subgraph. Every pipeline run goes through a
//! prefix-level LRU cache so that shared leading steps execute once.

pub mod graph;
pub mod surrogate;
pub mod design;
pub mod executor;
pub mod cache;
pub mod finetune;
pub mod orchestrator;
