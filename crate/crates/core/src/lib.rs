//! Prefix-sharing LLM serving simulator.
//!
//! A radix-tree KV cache with cache-aware continuous batching, compressed
//! finite-state-machine constrained decoding, an LM program interpreter, a
//! data-parallel router and brute-force oracles, all driven by a
//! deterministic mock tokenizer and model.

pub mod dist_router;
pub mod experiment;
pub mod fsm;
pub mod golden;
pub mod model;
pub mod oracles;
pub mod pool_sched;
pub mod program;
pub mod radix_cache;
pub mod tokenizer;
pub mod workload;

pub use model::MockModel;
pub use radix_cache::{NodeId, RadixTree};
pub use tokenizer::{TokenId, TokenSequence, Vocabulary};
