//! Seeded generators for programs with typical prefix-sharing shapes.
//!
//! Prompt text is drawn from uppercase letters and digits, which the
//! default vocabulary keeps as single-byte tokens, so a segment of `n`
//! characters is exactly `n` tokens.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::{Op, Program, ProgramError};

/// JSON output schema used by the judge-and-grade example program.
pub const JSON_GRADE_PATTERN: &str = r#"\{"summary": "[a-z ]{1,8}", "grade": "[ABCD][+-]?"\}"#;

const SYMBOLS: &[u8; 36] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("reading trace {path}: {source}")]
    Trace { path: PathBuf, source: std::io::Error },
    #[error("parsing trace: {0}")]
    TraceFormat(String),
    #[error(transparent)]
    Program(#[from] ProgramError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatOutput {
    /// 4 to 8 tokens per reply.
    #[default]
    Short,
    /// 256 to 512 tokens per reply, before scaling.
    Long,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadKind {
    MultiTurnChat {
        sessions: usize,
        #[serde(default = "default_turns")]
        turns: usize,
        #[serde(default)]
        output: ChatOutput,
        /// Tokens of the system prompt shared by every session.
        #[serde(default)]
        system_prompt: usize,
    },
    FewShot {
        n: usize,
        k: usize,
        q: usize,
        #[serde(default = "default_answer")]
        max_new_tokens: usize,
    },
    TreeOfThought {
        trees: usize,
        branching: usize,
        depth: usize,
        #[serde(default)]
        system_prompt: usize,
    },
    SelfConsistency {
        #[serde(default = "one")]
        questions: usize,
        samples: usize,
        prompt_len: usize,
        #[serde(default = "default_answer")]
        max_new_tokens: usize,
    },
    JsonDecode {
        programs: usize,
        #[serde(default)]
        regex: Option<String>,
        #[serde(default = "default_doc")]
        doc_len: usize,
    },
    /// Programs and arrival times read from a JSON file of
    /// `[{"arrival": t, "program": {...}}]`.
    MixedReplay { trace: PathBuf },
}

fn default_turns() -> usize {
    4
}
fn default_answer() -> usize {
    8
}
fn one() -> usize {
    1
}
fn default_doc() -> usize {
    64
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(flatten)]
    pub kind: WorkloadKind,
    #[serde(default)]
    pub seed: u64,
    /// Multiplier on sampled length ranges.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Mean simulated steps between program arrivals; 0 means all at once.
    #[serde(default)]
    pub arrival_gap: f64,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind) -> Self {
        Self { kind, seed: 0, scale: 1.0, arrival_gap: 0.0 }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn arrival_gap(mut self, gap: f64) -> Self {
        self.arrival_gap = gap;
        self
    }

    pub fn from_json(s: &str) -> Result<Self, WorkloadError> {
        serde_json::from_str(s).map_err(|e| WorkloadError::Invalid(e.to_string()))
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            WorkloadKind::MultiTurnChat { output: ChatOutput::Short, .. } => "multi_turn_chat_short",
            WorkloadKind::MultiTurnChat { output: ChatOutput::Long, .. } => "multi_turn_chat_long",
            WorkloadKind::FewShot { .. } => "few_shot",
            WorkloadKind::TreeOfThought { .. } => "tree_of_thought",
            WorkloadKind::SelfConsistency { .. } => "self_consistency",
            WorkloadKind::JsonDecode { .. } => "json_decode",
            WorkloadKind::MixedReplay { .. } => "mixed_replay",
        }
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Invalid(m.into()));
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale must be positive");
        }
        if !(self.arrival_gap >= 0.0 && self.arrival_gap.is_finite()) {
            return bad("arrival_gap must be non-negative");
        }
        match &self.kind {
            WorkloadKind::MultiTurnChat { sessions, turns, .. } if *sessions == 0 || *turns == 0 => {
                bad("chat needs sessions and turns >= 1")
            }
            WorkloadKind::FewShot { n, k, q, max_new_tokens } if *n == 0 || *k == 0 || *q < 2 || *max_new_tokens == 0 => {
                bad("few-shot needs n, k, max_new_tokens >= 1 and q >= 2")
            }
            WorkloadKind::TreeOfThought { trees, branching, depth, .. } if *trees == 0 || *branching == 0 || *depth == 0 => {
                bad("tree-of-thought needs trees, branching, depth >= 1")
            }
            WorkloadKind::SelfConsistency { questions, samples, prompt_len, max_new_tokens }
                if *questions == 0 || *samples == 0 || *prompt_len < 2 || *max_new_tokens == 0 =>
            {
                bad("self-consistency needs questions, samples, max_new_tokens >= 1 and prompt_len >= 2")
            }
            WorkloadKind::JsonDecode { programs, doc_len, .. } if *programs == 0 || *doc_len < 2 => {
                bad("json decode needs programs >= 1 and doc_len >= 2")
            }
            _ => Ok(()),
        }
    }

    /// Builds the programs with their arrival times.
    pub fn generate(&self) -> Result<Vec<(Program, u64)>, WorkloadError> {
        self.validate()?;
        let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(self.seed), scale: self.scale };
        let programs = match &self.kind {
            WorkloadKind::MultiTurnChat { sessions, turns, output, system_prompt } => {
                let sys = g.text(*system_prompt);
                (0..*sessions)
                    .map(|s| {
                        let mut ops = Vec::new();
                        if !sys.is_empty() {
                            ops.push(Op::extend(sys.clone()));
                        }
                        for t in 0..*turns {
                            let n = g.scaled(256, 512);
                            let mut user = tagged(s * turns + t, n);
                            user.push_str(&g.text(n.saturating_sub(2)));
                            ops.push(Op::extend(user));
                            let out = match output {
                                ChatOutput::Short => g.rng.gen_range(4..=8),
                                ChatOutput::Long => g.scaled(256, 512),
                            };
                            ops.push(Op::gen(format!("reply{t}"), out));
                        }
                        Program::new(ops)
                    })
                    .collect::<Vec<_>>()
            }
            WorkloadKind::FewShot { n, k, q, max_new_tokens } => {
                let examples = g.text(*k);
                (0..*n)
                    .map(|i| {
                        let mut question = tagged(i, *q);
                        question.push_str(&g.text(q - 2));
                        Program::new(vec![Op::extend(examples.clone()), Op::extend(question), Op::gen("answer", *max_new_tokens)])
                    })
                    .collect()
            }
            WorkloadKind::TreeOfThought { trees, branching, depth, system_prompt } => {
                let sys = g.text(*system_prompt);
                (0..*trees)
                    .map(|i| {
                        let mut ops = Vec::new();
                        if !sys.is_empty() {
                            ops.push(Op::extend(sys.clone()));
                        }
                        let qn = g.scaled(128, 256);
                        let mut question = tagged(i, qn);
                        question.push_str(&g.text(qn.saturating_sub(2)));
                        ops.push(Op::extend(question));
                        g.thought_level(&mut ops, *branching, *depth, 0);
                        ops.push(Op::extend("\nANSWER "));
                        ops.push(Op::gen("answer", g.scaled(16, 32)));
                        Program::new(ops)
                    })
                    .collect()
            }
            WorkloadKind::SelfConsistency { questions, samples, prompt_len, max_new_tokens } => {
                let mut out = Vec::new();
                for i in 0..*questions {
                    let mut prompt = tagged(i, *prompt_len);
                    prompt.push_str(&g.text(prompt_len - 2));
                    for _ in 0..*samples {
                        out.push(Program::new(vec![Op::extend(prompt.clone()), Op::gen("answer", *max_new_tokens)]));
                    }
                }
                out
            }
            WorkloadKind::JsonDecode { programs, regex, doc_len } => {
                let pattern = regex.clone().unwrap_or_else(|| JSON_GRADE_PATTERN.to_owned());
                let n = ((*doc_len as f64 * self.scale).round() as usize).max(2);
                (0..*programs)
                    .map(|i| {
                        let mut doc = tagged(i, n);
                        doc.push_str(&g.text(n - 2));
                        Program::new(vec![Op::extend(doc), Op::extend("\n"), Op::gen_regex("json", 128, pattern.clone())])
                    })
                    .collect()
            }
            WorkloadKind::MixedReplay { trace } => return read_trace(trace),
        };
        let mut t = 0.0_f64;
        Ok(programs
            .into_iter()
            .map(|p| {
                let at = t.round() as u64;
                if self.arrival_gap > 0.0 {
                    let u: f64 = g.rng.gen_range(f64::EPSILON..1.0);
                    t += -u.ln() * self.arrival_gap;
                }
                (p, at)
            })
            .collect())
    }
}

#[derive(Serialize, Deserialize)]
struct TraceEntry {
    arrival: u64,
    program: Program,
}

fn read_trace(path: &PathBuf) -> Result<Vec<(Program, u64)>, WorkloadError> {
    let s = std::fs::read_to_string(path).map_err(|source| WorkloadError::Trace { path: path.clone(), source })?;
    let entries: Vec<TraceEntry> = serde_json::from_str(&s).map_err(|e| WorkloadError::TraceFormat(e.to_string()))?;
    entries
        .into_iter()
        .map(|e| {
            e.program.parse()?;
            Ok((e.program, e.arrival))
        })
        .collect()
}

/// Serializes programs and arrivals in the replay trace format.
pub fn write_trace(programs: &[(Program, u64)]) -> String {
    let entries: Vec<TraceEntry> = programs.iter().map(|(p, a)| TraceEntry { arrival: *a, program: p.clone() }).collect();
    serde_json::to_string_pretty(&entries).expect("trace serializes")
}

/// Two leading symbols derived from `i`, so that distinct indices never
/// share a first token.
fn tagged(i: usize, len: usize) -> String {
    let a = SYMBOLS[i % 36] as char;
    let b = SYMBOLS[(i / 36) % 36] as char;
    match len {
        0 => String::new(),
        1 => a.to_string(),
        _ => format!("{a}{b}"),
    }
}

struct Gen {
    rng: ChaCha8Rng,
    scale: f64,
}

impl Gen {
    fn text(&mut self, n: usize) -> String {
        (0..n).map(|_| SYMBOLS[self.rng.gen_range(0..36)] as char).collect()
    }

    fn scaled(&mut self, lo: usize, hi: usize) -> usize {
        let lo = ((lo as f64 * self.scale).round() as usize).max(1);
        let hi = ((hi as f64 * self.scale).round() as usize).max(lo);
        self.rng.gen_range(lo..=hi)
    }

    fn thought_level(&mut self, ops: &mut Vec<Op>, branching: usize, depth: usize, level: usize) {
        if level == depth {
            return;
        }
        let prompts: Vec<String> = (0..branching).map(|b| format!("\nSTEP{level} OPTION{b} ")).collect();
        ops.push(Op::fork_with(prompts));
        ops.push(Op::gen(format!("thought{level}"), self.scaled(32, 64)));
        self.thought_level(ops, branching, depth, level + 1);
        ops.push(Op::join());
    }
}
