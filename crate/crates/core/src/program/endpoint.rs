//! Priced completion endpoint and speculative multi-call execution.
//!
//! The endpoint is a black box that only sees prompt text. Its generator
//! knows one record per document (keyed by the prompt's first line): when a
//! prompt ends with a field key such as `job:` it continues with that
//! field's value followed by the remaining fields, one per line.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Op, Program, ProgramError};
use crate::model::mix;
use crate::tokenizer::Vocabulary;

/// Record fields in generation order.
pub const FIELD_NAMES: [&str; 5] = ["name", "job", "city", "hobby", "pet"];

const VALUES: [&[&str]; 5] = [
    &["alice", "bruno", "chen", "dara", "emeka", "farah", "goran", "hana"],
    &["engineer", "painter", "nurse", "pilot", "farmer", "teacher", "chef"],
    &["paris", "lagos", "lima", "osaka", "oslo", "quito", "pune"],
    &["chess", "rowing", "pottery", "hiking", "baking", "singing"],
    &["cat", "parrot", "dog", "tortoise", "goldfish", "rabbit"],
];

const FILLER: [&str; 12] = ["the", "model", "writes", "more", "text", "about", "a", "quiet", "river", "and", "its", "town"];

/// Endpoint pricing and behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Price per prompt token, charged on every call.
    pub input_price: f64,
    /// Price per generated token.
    pub output_price: f64,
    pub seed: u64,
    /// Extra tokens requested past the first stop when speculating.
    pub surplus_tokens: usize,
    /// Continue with filler instead of the next fields, so speculation
    /// never matches.
    pub force_mismatch: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self { input_price: 1.0, output_price: 2.0, seed: 0, surplus_tokens: 64, force_mismatch: false }
    }
}

/// Running totals of endpoint usage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub calls: usize,
    pub input_tokens: usize,
    pub output_tokens: usize,
    /// Prompt tokens of each call, in call order.
    pub per_call_input: Vec<usize>,
}

impl CostLedger {
    pub fn input_cost(&self, cfg: &EndpointConfig) -> f64 {
        self.input_tokens as f64 * cfg.input_price
    }

    pub fn total_cost(&self, cfg: &EndpointConfig) -> f64 {
        self.input_cost(cfg) + self.output_tokens as f64 * cfg.output_price
    }
}

/// Result of one endpoint call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    /// Generated text, cut before the stop string if it appeared.
    pub text: String,
    pub stopped: bool,
    /// Whether the generator ran out before the token limit.
    pub exhausted: bool,
}

#[derive(Clone, Debug)]
pub struct EndpointModel {
    vocab: Arc<Vocabulary>,
    cfg: EndpointConfig,
    ledger: CostLedger,
}

impl EndpointModel {
    pub fn new(vocab: Arc<Vocabulary>, cfg: EndpointConfig) -> Self {
        Self { vocab, cfg, ledger: CostLedger::default() }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn take_ledger(&mut self) -> CostLedger {
        std::mem::take(&mut self.ledger)
    }

    /// Value of field `field` in the record for `doc`.
    pub fn field_value(&self, doc: &str, field: usize) -> &'static str {
        let h = mix(mix(self.cfg.seed, text_hash(doc)), field as u64);
        let vals = VALUES[field];
        vals[(h % vals.len() as u64) as usize]
    }

    /// Untruncated continuation of `prompt`.
    pub fn continuation(&self, prompt: &str) -> String {
        let doc = prompt.split('\n').next().unwrap_or("");
        let field = FIELD_NAMES.iter().enumerate().find_map(|(i, k)| {
            if prompt.ends_with(&format!("{k}: ")) {
                Some((i, ""))
            } else if prompt.ends_with(&format!("{k}:")) {
                Some((i, " "))
            } else {
                None
            }
        });
        let mut out = String::new();
        match field {
            Some((i, lead)) => {
                out.push_str(lead);
                out.push_str(self.field_value(doc, i));
                out.push('\n');
                if self.cfg.force_mismatch {
                    self.filler(prompt, &mut out);
                } else {
                    for (j, k) in FIELD_NAMES.iter().enumerate().skip(i + 1) {
                        out.push_str(&format!("{k}: {}\n", self.field_value(doc, j)));
                    }
                }
            }
            None => self.filler(prompt, &mut out),
        }
        out
    }

    fn filler(&self, prompt: &str, out: &mut String) {
        let mut h = mix(self.cfg.seed, text_hash(prompt));
        for i in 0..40 {
            h = mix(h, i);
            out.push_str(FILLER[(h % FILLER.len() as u64) as usize]);
            out.push(if i % 10 == 9 { '\n' } else { ' ' });
        }
    }

    /// One priced call. Tokens are emitted one by one and generation stops
    /// after `max_tokens` or once the text contains `stop`.
    pub fn complete(&mut self, prompt: &str, max_tokens: usize, stop: Option<&str>) -> Completion {
        let full = self.continuation(prompt);
        let tokens = self.vocab.encode(full.as_bytes());
        let mut text = Vec::new();
        let mut emitted = 0;
        let mut cut = None;
        for &t in tokens.iter().take(max_tokens) {
            text.extend_from_slice(self.vocab.piece(t).expect("encoded token"));
            emitted += 1;
            if let Some(p) = stop.and_then(|s| find(&text, s.as_bytes())) {
                cut = Some(p);
                break;
            }
        }
        let input = self.vocab.token_count(prompt.as_bytes());
        self.ledger.calls += 1;
        self.ledger.input_tokens += input;
        self.ledger.per_call_input.push(input);
        self.ledger.output_tokens += emitted;
        if let Some(p) = cut {
            text.truncate(p);
        }
        Completion {
            text: String::from_utf8_lossy(&text).into_owned(),
            stopped: cut.is_some(),
            exhausted: cut.is_none() && emitted == tokens.len(),
        }
    }

    /// Offline replay of the stop rule on surplus text: returns the value a
    /// real call with `max_tokens` would produce, if the surplus determines
    /// it. Greedy tokenization of a prefix depends only on the next
    /// `max_piece_len` bytes, so the stop must sit that far from an
    /// incomplete end.
    fn value_from_surplus(&self, rest: &str, stop: &str, max_tokens: usize, complete: bool) -> Option<String> {
        let p = rest.find(stop)?;
        let end = p + stop.len();
        if !complete && end + self.vocab.max_piece_len() > rest.len() {
            return None;
        }
        let mut covered = 0;
        for (i, &t) in self.vocab.encode(rest.as_bytes()).iter().enumerate() {
            covered += self.vocab.piece(t).expect("encoded token").len();
            if covered >= end {
                return (i < max_tokens).then(|| rest[..p].to_owned());
            }
        }
        None
    }
}

fn text_hash(s: &str) -> u64 {
    s.bytes().fold(0x51ed, |h, b| mix(h, b as u64))
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.is_empty() {
        return Some(0);
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Outcome of a program run on the endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointRun {
    pub vars: BTreeMap<String, String>,
    pub ledger: CostLedger,
    /// Generations filled from surplus text without a call.
    pub speculated: usize,
    pub prompt: String,
}

struct Surplus {
    text: String,
    pos: usize,
    complete: bool,
    last_stop: String,
}

impl Surplus {
    fn rest(&self) -> &str {
        &self.text[self.pos..]
    }

    /// Anchored match of template text, optionally after the stop string the
    /// previous generation would have ended on.
    fn consume(&mut self, constant: &str) -> bool {
        let rest = self.rest();
        if rest.starts_with(constant) {
            self.pos += constant.len();
            return true;
        }
        let skip = self.last_stop.len();
        if rest.starts_with(self.last_stop.as_str()) && rest[skip..].starts_with(constant) {
            self.pos += skip + constant.len();
            return true;
        }
        false
    }
}

/// Runs a flat program of extends, fetches and stop-terminated generations
/// on the endpoint. With `speculative`, a generation that has a stop string
/// asks for `surplus_tokens` more tokens and ignores the stop; later
/// template text and generations are then served from the surplus while it
/// keeps matching.
pub fn run_on_endpoint(program: &Program, ep: &mut EndpointModel, speculative: bool) -> Result<EndpointRun, ProgramError> {
    let before = ep.take_ledger();
    let mut prompt = String::new();
    let mut vars = BTreeMap::new();
    let mut surplus: Option<Surplus> = None;
    let mut speculated = 0;
    for op in &program.ops {
        let constant = match op {
            Op::Extend { text } => Some(text.clone()),
            Op::Fetch { name } => Some(vars.get(name).cloned().ok_or_else(|| ProgramError::UndefinedVariable(name.clone()))?),
            Op::Gen { regex: Some(_), .. } => return Err(ProgramError::Unsupported("regex generation on an endpoint".into())),
            Op::Gen { .. } => None,
            Op::Select { .. } => return Err(ProgramError::Unsupported("select on an endpoint".into())),
            Op::Fork { .. } | Op::Join { .. } => return Err(ProgramError::Unsupported("fork on an endpoint".into())),
            Op::Image { .. } => return Err(ProgramError::Unsupported("image input on an endpoint".into())),
        };
        if let Some(c) = constant {
            if surplus.as_mut().is_some_and(|s| !s.consume(&c)) {
                surplus = None;
            }
            prompt.push_str(&c);
            continue;
        }
        let Op::Gen { name, max_new_tokens, stop, .. } = op else { unreachable!() };
        if let (Some(sp), Some(stop)) = (surplus.as_mut(), stop.as_deref()) {
            if let Some(v) = ep.value_from_surplus(sp.rest(), stop, *max_new_tokens, sp.complete) {
                sp.pos += v.len();
                sp.last_stop = stop.to_owned();
                prompt.push_str(&v);
                vars.insert(name.clone(), v);
                speculated += 1;
                continue;
            }
        }
        surplus = None;
        let value = match stop.as_deref() {
            Some(stop) if speculative => {
                let limit = max_new_tokens + ep.cfg.surplus_tokens;
                let c = ep.complete(&prompt, limit, None);
                // The same prompt and token stream as a plain call, so the
                // stop rule replays exactly on the call's own output.
                match ep.value_from_surplus(&c.text, stop, *max_new_tokens, true) {
                    Some(v) => {
                        surplus = Some(Surplus { pos: v.len(), text: c.text, complete: c.exhausted, last_stop: stop.to_owned() });
                        v
                    }
                    None => {
                        let toks = ep.vocab.encode(c.text.as_bytes());
                        let head = &toks[..toks.len().min(*max_new_tokens)];
                        String::from_utf8_lossy(&ep.vocab.decode(head)?).into_owned()
                    }
                }
            }
            _ => ep.complete(&prompt, *max_new_tokens, stop.as_deref()).text,
        };
        prompt.push_str(&value);
        vars.insert(name.clone(), value);
    }
    let ledger = std::mem::replace(&mut ep.ledger, before);
    Ok(EndpointRun { vars, ledger, speculated, prompt })
}
