//! LM programs: primitives, parsing into fork blocks, and execution against
//! the simulated server or a priced completion endpoint.

mod endpoint;
mod interp;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsm::FsmError;
use crate::model::mix;
use crate::pool_sched::SchedError;
use crate::tokenizer::{TokenId, TokenizerError, Vocabulary};

pub use endpoint::{run_on_endpoint, CostLedger, EndpointConfig, EndpointModel, EndpointRun, FIELD_NAMES};
pub use interp::{run_programs, InterpRun, InterpreterConfig, ProgramResult};

/// Current program file format version.
pub const PROGRAM_VERSION: u32 = 1;

/// Pseudo-tokens contributed by one image.
pub const IMAGE_TOKENS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum ProgramError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("undefined variable {0:?}")]
    UndefinedVariable(String),
    #[error("unsupported on this runtime: {0}")]
    Unsupported(String),
    #[error("unsupported program version {0}")]
    Version(u32),
    #[error(transparent)]
    Regex(#[from] FsmError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// One primitive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Extend {
        text: String,
    },
    Gen {
        name: String,
        max_new_tokens: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        regex: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stop: Option<String>,
    },
    Select {
        name: String,
        choices: Vec<String>,
    },
    /// Starts `n` child streams. Each child appends its branch prompt (if
    /// any) and then runs the ops up to the matching join.
    Fork {
        n: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        branch_prompts: Vec<String>,
    },
    /// Appends each child's new tokens in `order` (default: child index
    /// order) and exports child variables as `"<child>.<name>"`.
    Join {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        order: Option<Vec<usize>>,
    },
    Image {
        hash: u64,
    },
    /// Appends the value of a variable.
    Fetch {
        name: String,
    },
}

impl Op {
    pub fn extend(text: impl Into<String>) -> Self {
        Op::Extend { text: text.into() }
    }

    pub fn gen(name: impl Into<String>, max_new_tokens: usize) -> Self {
        Op::Gen { name: name.into(), max_new_tokens, regex: None, stop: None }
    }

    pub fn gen_stop(name: impl Into<String>, max_new_tokens: usize, stop: impl Into<String>) -> Self {
        Op::Gen { name: name.into(), max_new_tokens, regex: None, stop: Some(stop.into()) }
    }

    pub fn gen_regex(name: impl Into<String>, max_new_tokens: usize, regex: impl Into<String>) -> Self {
        Op::Gen { name: name.into(), max_new_tokens, regex: Some(regex.into()), stop: None }
    }

    pub fn select<S: Into<String>>(name: impl Into<String>, choices: impl IntoIterator<Item = S>) -> Self {
        Op::Select { name: name.into(), choices: choices.into_iter().map(Into::into).collect() }
    }

    pub fn fork(n: usize) -> Self {
        Op::Fork { n, branch_prompts: Vec::new() }
    }

    pub fn fork_with<S: Into<String>>(prompts: impl IntoIterator<Item = S>) -> Self {
        let branch_prompts: Vec<String> = prompts.into_iter().map(Into::into).collect();
        Op::Fork { n: branch_prompts.len(), branch_prompts }
    }

    pub fn join() -> Self {
        Op::Join { order: None }
    }
}

/// A program as data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub version: u32,
    pub ops: Vec<Op>,
}

/// Parsed program body: leaf ops and fork blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum Node {
    Leaf(Op),
    Fork { n: usize, branch_prompts: Vec<String>, body: Arc<Vec<Node>>, order: Vec<usize> },
}

impl Program {
    pub fn new(ops: Vec<Op>) -> Self {
        Self { version: PROGRAM_VERSION, ops }
    }

    pub fn from_json(s: &str) -> Result<Self, ProgramError> {
        let p: Program = serde_json::from_str(s).map_err(|e| ProgramError::Malformed(e.to_string()))?;
        if p.version != PROGRAM_VERSION {
            return Err(ProgramError::Version(p.version));
        }
        p.parse()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    /// Number of `Gen` primitives executed, counting each fork child.
    pub fn gen_count(&self) -> Result<usize, ProgramError> {
        fn count(nodes: &[Node]) -> usize {
            nodes
                .iter()
                .map(|n| match n {
                    Node::Leaf(Op::Gen { .. }) => 1,
                    Node::Leaf(_) => 0,
                    Node::Fork { n, body, .. } => n * count(body),
                })
                .sum()
        }
        Ok(count(&self.parse()?))
    }

    /// Checks structure and builds the block tree.
    pub(crate) fn parse(&self) -> Result<Vec<Node>, ProgramError> {
        let mut pos = 0;
        let nodes = parse_block(&self.ops, &mut pos, false)?;
        let mut names = BTreeSet::new();
        check_names(&nodes, &mut names)?;
        Ok(nodes)
    }
}

fn parse_block(ops: &[Op], pos: &mut usize, nested: bool) -> Result<Vec<Node>, ProgramError> {
    let mut out = Vec::new();
    while *pos < ops.len() {
        let op = &ops[*pos];
        *pos += 1;
        match op {
            Op::Fork { n, branch_prompts } => {
                if *n == 0 {
                    return Err(ProgramError::Malformed("fork needs n >= 1".into()));
                }
                if !branch_prompts.is_empty() && branch_prompts.len() != *n {
                    return Err(ProgramError::Malformed(format!("fork has {} branch prompts for {n} branches", branch_prompts.len())));
                }
                let body = parse_block(ops, pos, true)?;
                let Some(Op::Join { order }) = ops.get(*pos - 1) else {
                    return Err(ProgramError::Malformed("fork without join".into()));
                };
                let order = order.clone().unwrap_or_else(|| (0..*n).collect());
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != (0..*n).collect::<Vec<_>>() {
                    return Err(ProgramError::Malformed(format!("join order {order:?} is not a permutation of 0..{n}")));
                }
                out.push(Node::Fork { n: *n, branch_prompts: branch_prompts.clone(), body: Arc::new(body), order });
            }
            Op::Join { .. } => {
                if !nested {
                    return Err(ProgramError::Malformed("join without fork".into()));
                }
                return Ok(out);
            }
            Op::Gen { max_new_tokens: 0, regex: None, .. } => {
                return Err(ProgramError::Malformed("gen needs max_new_tokens >= 1".into()));
            }
            Op::Select { choices, .. } if choices.is_empty() => {
                return Err(ProgramError::Malformed("select needs at least one choice".into()));
            }
            other => out.push(Node::Leaf(other.clone())),
        }
    }
    if nested {
        return Err(ProgramError::Malformed("fork without join".into()));
    }
    Ok(out)
}

fn check_names(nodes: &[Node], names: &mut BTreeSet<String>) -> Result<(), ProgramError> {
    for n in nodes {
        match n {
            Node::Leaf(Op::Gen { name, .. }) | Node::Leaf(Op::Select { name, .. }) => {
                if name.is_empty() || !names.insert(name.clone()) {
                    return Err(ProgramError::Malformed(format!("variable {name:?} defined twice or empty")));
                }
            }
            Node::Fork { body, .. } => {
                let mut inner = names.clone();
                check_names(body, &mut inner)?;
            }
            Node::Leaf(_) => {}
        }
    }
    Ok(())
}

/// Deterministic pseudo-token block standing in for an image.
pub fn image_tokens(vocab: &Vocabulary, hash: u64) -> Vec<TokenId> {
    (0..IMAGE_TOKENS as u64).map(|i| (mix(hash, i) % vocab.len() as u64) as TokenId).collect()
}
