//! Shared fixtures for the integration tests and the acceptance run.
#![allow(dead_code)]

use std::sync::Arc;

use radixflow::experiment::EngineConfig;
use radixflow::fsm::{constrained_decode, DecodeMode, FsmConfig, FsmIndex};
use radixflow::oracles::naive_constrained_decode;
use radixflow::workload::JSON_GRADE_PATTERN;
use radixflow::Vocabulary;

/// Constraint patterns exercised by the decoder checks.
pub const PATTERNS: [&str; 10] = [
    JSON_GRADE_PATTERN,
    r"[ABCD][+-]?",
    r"\d{3}-\d{4}",
    r"(yes|no|maybe)",
    r"[a-z]+@[a-z]+\.(com|org)",
    r#"\{"name": "[A-Za-z ]{1,12}", "age": \d{1,3}\}"#,
    r"The answer is [0-9]+\.",
    r"\[(\d+, ){0,3}\d+\]",
    r"(the|a) (cache|tree|batch) (is|was) (full|shared)",
    r"[ -~]{0,10}",
];

/// Result of decoding one (pattern, seed) pair both ways.
#[derive(Debug)]
pub struct PairOutcome {
    pub compressed_text: Vec<u8>,
    pub naive_text: Vec<u8>,
    pub compressed_passes: usize,
    pub naive_passes: usize,
    pub trace_matches_encoding: bool,
    pub matches_reference_regex: bool,
}

pub fn vocab() -> Arc<Vocabulary> {
    EngineConfig::default().vocabulary()
}

/// Anchored byte regex with the same ASCII class semantics as the compiler.
pub fn reference_regex(pattern: &str) -> regex::bytes::Regex {
    regex::bytes::Regex::new(&format!("(?-u)^(?:{pattern})$")).expect("reference regex compiles")
}

pub fn decode_pair(index: &FsmIndex, reference: &regex::bytes::Regex, seed: u64) -> Result<PairOutcome, String> {
    let model = EngineConfig::default().model().reseeded(seed);
    let c = constrained_decode(&model, index, 256, DecodeMode::Compressed).map_err(|e| e.to_string())?;
    let (naive_text, _, naive_passes) = naive_constrained_decode(&model, index.dfa(), index.vocab(), 256).map_err(|e| e.to_string())?;
    Ok(PairOutcome {
        trace_matches_encoding: index.vocab().encode(&c.text).as_ref() == c.tokens.as_slice(),
        matches_reference_regex: reference.is_match(&c.text),
        compressed_text: c.text,
        naive_text,
        compressed_passes: c.forward_passes,
        naive_passes,
    })
}

pub fn build_index(pattern: &str, vocab: Arc<Vocabulary>) -> Arc<FsmIndex> {
    FsmIndex::build(pattern, vocab, FsmConfig::default()).expect("pattern compiles")
}
