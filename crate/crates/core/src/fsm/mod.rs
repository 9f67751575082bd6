//! Regex-constrained decoding with a compressed automaton.
//!
//! Patterns compile to a byte-level DFA, whose singular-transition chains are
//! merged into string edges. Decoding jumps over forced text in one step and
//! retokenizes so the token trace always matches the tokenizer's own
//! segmentation.

mod compressed;
mod decode;
mod dfa;
mod index;
pub mod regex;

use thiserror::Error;

pub use compressed::{CompressedEdge, CompressedFsm, CompressedState, Cursor};
pub use decode::{constrained_decode, DecodeMode, DecodeOutput, DecodeSession};
pub use dfa::{Dfa, DEFAULT_STATE_CAP};
pub use index::FsmIndex;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FsmError {
    #[error("regex parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("unsupported regex feature at byte {pos}: {feature}")]
    Unsupported { pos: usize, feature: String },
    #[error("automaton exceeds {0} states")]
    TooManyStates(usize),
    #[error("no token is allowed at the current state")]
    DeadEnd,
    #[error("output exceeds the budget of {0} tokens")]
    BudgetExceeded(usize),
}

/// Compilation options.
#[derive(Clone, Copy, Debug)]
pub struct FsmConfig {
    pub state_cap: usize,
    pub minimize: bool,
}

impl Default for FsmConfig {
    fn default() -> Self {
        Self { state_cap: DEFAULT_STATE_CAP, minimize: true }
    }
}

/// Compiles `pattern` with default options. The whole input must match.
pub fn compile_regex(pattern: &str) -> Result<Dfa, FsmError> {
    compile_regex_with(pattern, FsmConfig::default())
}

pub fn compile_regex_with(pattern: &str, cfg: FsmConfig) -> Result<Dfa, FsmError> {
    let ast = regex::parse(pattern)?;
    Dfa::from_ast(&ast, cfg.state_cap, cfg.minimize)
}
