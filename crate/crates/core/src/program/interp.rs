//! Round-robin stream executor over the batch scheduler.
//!
//! Every program starts as one stream. A stream runs its ops in order until
//! it needs the runtime, then parks on the submitted requests. Forks spawn
//! child streams; the parent resumes at the join once every child is done.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{image_tokens, Node, Op, Program, ProgramError};
use crate::fsm::{constrained_decode, DecodeMode, FsmConfig, FsmIndex};
use crate::pool_sched::{FinishedRequest, RequestId, RequestSpec, Scheduler};
use crate::tokenizer::TokenId;

/// Frontend switches, each one an ablation when turned off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpreterConfig {
    /// Send the shared prefix as a zero-output request before a fork.
    pub frontend_hint: bool,
    /// Run fork children concurrently instead of one after another.
    pub frontend_parallelism: bool,
    /// Decoding mode for regex-constrained generation.
    pub compression: bool,
}

impl Default for InterpreterConfig {
    fn default() -> Self {
        Self { frontend_hint: true, frontend_parallelism: true, compression: true }
    }
}

/// Outcome of one program.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProgramResult {
    /// Variables of the root stream, including exported child variables.
    pub vars: BTreeMap<String, String>,
    pub arrival: u64,
    pub finish_time: u64,
    /// Generation requests issued (hints and select scoring excluded).
    pub gen_calls: usize,
    /// Model passes spent on regex-constrained outputs.
    pub constrained_passes: usize,
    /// Tokens emitted under regex constraints.
    pub constrained_tokens: usize,
    /// Final token sequence of the root stream.
    pub tokens: Vec<TokenId>,
}

#[derive(Debug)]
enum Wait {
    Ready,
    Gen { name: String, stop: Option<String>, text: Option<String> },
    Select { pending: usize, name: String, choices: Vec<String> },
    Hint,
    Children { ids: Vec<usize>, next: usize, done: usize },
    Done,
}

#[derive(Debug)]
struct Frame {
    body: Arc<Vec<Node>>,
    pc: usize,
}

#[derive(Debug)]
struct Stream {
    program: usize,
    parent: Option<usize>,
    tokens: Vec<TokenId>,
    base_len: usize,
    vars: BTreeMap<String, String>,
    created: Vec<String>,
    frames: Vec<Frame>,
    wait: Wait,
}

struct Exec<'a> {
    sched: &'a mut Scheduler,
    cfg: InterpreterConfig,
    streams: Vec<Stream>,
    owner: HashMap<RequestId, usize>,
    results: Vec<ProgramResult>,
    indexes: HashMap<String, Arc<FsmIndex>>,
    live: usize,
    log: Vec<FinishedRequest>,
}

/// Program results plus every request the run issued, in completion order.
#[derive(Clone, Debug)]
pub struct InterpRun {
    pub programs: Vec<ProgramResult>,
    pub requests: Vec<FinishedRequest>,
}

/// Runs `programs` (each with an arrival time) to completion on `sched`.
pub fn run_programs(sched: &mut Scheduler, programs: &[(Program, u64)], cfg: InterpreterConfig) -> Result<InterpRun, ProgramError> {
    let mut ex = Exec {
        sched,
        cfg,
        streams: Vec::new(),
        owner: HashMap::new(),
        results: Vec::new(),
        indexes: HashMap::new(),
        live: programs.len(),
        log: Vec::new(),
    };
    for (i, (p, arrival)) in programs.iter().enumerate() {
        let body = Arc::new(p.parse()?);
        ex.results.push(ProgramResult { arrival: *arrival, ..Default::default() });
        ex.streams.push(Stream {
            program: i,
            parent: None,
            tokens: Vec::new(),
            base_len: 0,
            vars: BTreeMap::new(),
            created: Vec::new(),
            frames: vec![Frame { body, pc: 0 }],
            wait: Wait::Ready,
        });
    }
    while ex.live > 0 {
        let mut progress = true;
        while progress {
            progress = false;
            for s in 0..ex.streams.len() {
                if matches!(ex.streams[s].wait, Wait::Ready) {
                    ex.advance(s)?;
                    progress = true;
                }
            }
        }
        if ex.live == 0 {
            break;
        }
        for f in ex.sched.step()? {
            ex.deliver(f)?;
        }
    }
    Ok(InterpRun { programs: ex.results, requests: ex.log })
}

impl Exec<'_> {
    fn ready_time(&self, s: usize) -> u64 {
        self.results[self.streams[s].program].arrival.max(self.sched.clock())
    }

    fn submit(&mut self, s: usize, spec: RequestSpec) -> Result<RequestId, ProgramError> {
        let spec = spec.at(self.ready_time(s));
        let id = self.sched.submit(spec)?;
        self.owner.insert(id, s);
        Ok(id)
    }

    fn index(&mut self, pattern: &str) -> Result<Arc<FsmIndex>, ProgramError> {
        if let Some(ix) = self.indexes.get(pattern) {
            return Ok(ix.clone());
        }
        let ix = FsmIndex::build(pattern, self.sched.model().vocab().clone(), FsmConfig::default())?;
        self.indexes.insert(pattern.to_owned(), ix.clone());
        Ok(ix)
    }

    /// Runs ops of stream `s` until it parks or ends.
    fn advance(&mut self, s: usize) -> Result<(), ProgramError> {
        let vocab = self.sched.model().vocab().clone();
        loop {
            let st = &mut self.streams[s];
            let Some(frame) = st.frames.last_mut() else {
                return self.complete(s);
            };
            let Some(node) = frame.body.get(frame.pc).cloned() else {
                st.frames.pop();
                continue;
            };
            frame.pc += 1;
            match node {
                Node::Leaf(Op::Extend { text }) => st.tokens.extend_from_slice(&vocab.encode(text.as_bytes())),
                Node::Leaf(Op::Image { hash }) => st.tokens.extend(image_tokens(&vocab, hash)),
                Node::Leaf(Op::Fetch { name }) => {
                    let v = st.vars.get(&name).ok_or(ProgramError::UndefinedVariable(name))?;
                    let t = vocab.encode(v.as_bytes());
                    st.tokens.extend_from_slice(&t);
                }
                Node::Leaf(Op::Gen { name, max_new_tokens, regex, stop }) => {
                    let prog = st.program;
                    let input = st.tokens.clone();
                    let (spec, text) = match regex {
                        Some(pat) => {
                            let ix = self.index(&pat)?;
                            let model = self.sched.model().reseeded(self.sched.model().prefix_hash(&input));
                            let mode = if self.cfg.compression { DecodeMode::Compressed } else { DecodeMode::Off };
                            let out = constrained_decode(&model, &ix, max_new_tokens, mode)?;
                            let r = &mut self.results[prog];
                            r.constrained_passes += out.forward_passes;
                            r.constrained_tokens += out.tokens.len();
                            let text = String::from_utf8_lossy(&out.text).into_owned();
                            (RequestSpec::forced(input, out.tokens), Some(text))
                        }
                        None => (RequestSpec::new(input, max_new_tokens), None),
                    };
                    self.results[prog].gen_calls += 1;
                    self.submit(s, spec)?;
                    self.streams[s].wait = Wait::Gen { name, stop, text };
                    return Ok(());
                }
                Node::Leaf(Op::Select { name, choices }) => {
                    for c in &choices {
                        let mut input = self.streams[s].tokens.clone();
                        input.extend_from_slice(&vocab.encode(c.as_bytes()));
                        self.submit(s, RequestSpec::new(input, 0))?;
                    }
                    self.streams[s].wait = Wait::Select { pending: choices.len(), name, choices };
                    return Ok(());
                }
                Node::Leaf(Op::Fork { .. } | Op::Join { .. }) => unreachable!("forks are parsed into blocks"),
                Node::Fork { n, branch_prompts, body, .. } => {
                    // Step back so the join can read the fork block on resume.
                    st.frames.last_mut().unwrap().pc -= 1;
                    if self.cfg.frontend_hint && n > 1 {
                        let input = self.streams[s].tokens.clone();
                        self.submit(s, RequestSpec::new(input, 0))?;
                        self.streams[s].wait = Wait::Hint;
                    } else {
                        self.spawn_children(s, n, &branch_prompts, body);
                    }
                    return Ok(());
                }
            }
        }
    }

    fn current_fork(&self, s: usize) -> (usize, Vec<String>, Arc<Vec<Node>>, Vec<usize>) {
        let f = self.streams[s].frames.last().expect("fork frame");
        match &f.body[f.pc] {
            Node::Fork { n, branch_prompts, body, order } => (*n, branch_prompts.clone(), body.clone(), order.clone()),
            Node::Leaf(_) => unreachable!("parked on a fork"),
        }
    }

    fn spawn_children(&mut self, s: usize, n: usize, prompts: &[String], body: Arc<Vec<Node>>) {
        let vocab = self.sched.model().vocab().clone();
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            let parent = &self.streams[s];
            let mut tokens = parent.tokens.clone();
            let base_len = tokens.len();
            if let Some(p) = prompts.get(i) {
                tokens.extend_from_slice(&vocab.encode(p.as_bytes()));
            }
            let run_now = self.cfg.frontend_parallelism || i == 0;
            ids.push(self.streams.len());
            self.streams.push(Stream {
                program: parent.program,
                parent: Some(s),
                tokens,
                base_len,
                vars: parent.vars.clone(),
                created: Vec::new(),
                frames: vec![Frame { body: body.clone(), pc: 0 }],
                wait: if run_now { Wait::Ready } else { Wait::Done },
            });
        }
        let next = if self.cfg.frontend_parallelism { n } else { 1 };
        self.streams[s].wait = Wait::Children { ids, next, done: 0 };
    }

    fn set_var(&mut self, s: usize, name: String, value: String) {
        let st = &mut self.streams[s];
        st.created.push(name.clone());
        st.vars.insert(name, value);
    }

    fn deliver(&mut self, f: FinishedRequest) -> Result<(), ProgramError> {
        let s = self.owner.remove(&f.id).expect("finished request has an owner");
        let vocab = self.sched.model().vocab().clone();
        match std::mem::replace(&mut self.streams[s].wait, Wait::Ready) {
            Wait::Gen { name, stop, text, .. } => {
                let text = match text {
                    Some(t) => t,
                    None => String::from_utf8_lossy(&vocab.decode(&f.output)?).into_owned(),
                };
                let value = match stop.as_deref().and_then(|p| text.find(p).map(|i| (p, i))) {
                    Some((_, i)) => text[..i].to_owned(),
                    None => text,
                };
                self.streams[s].tokens.extend_from_slice(&f.output);
                self.set_var(s, name, value);
            }
            Wait::Select { pending, name, choices } => {
                if pending > 1 {
                    self.streams[s].wait = Wait::Select { pending: pending - 1, name, choices };
                    self.log.push(f);
                    return Ok(());
                }
                let prompt = &self.streams[s].tokens;
                let model = self.sched.model();
                let mut best = (f64::NEG_INFINITY, 0);
                for (i, c) in choices.iter().enumerate() {
                    let sc = model.score(prompt, &vocab.encode(c.as_bytes()));
                    if sc > best.0 {
                        best = (sc, i);
                    }
                }
                let chosen = choices[best.1].clone();
                let t = vocab.encode(chosen.as_bytes());
                self.streams[s].tokens.extend_from_slice(&t);
                self.set_var(s, name, chosen);
            }
            Wait::Hint => {
                let (n, prompts, body, _) = self.current_fork(s);
                self.spawn_children(s, n, &prompts, body);
            }
            w => unreachable!("request delivered to a stream in state {w:?}"),
        }
        self.log.push(f);
        Ok(())
    }

    /// Stream `s` ran out of ops.
    fn complete(&mut self, s: usize) -> Result<(), ProgramError> {
        self.streams[s].wait = Wait::Done;
        let Some(p) = self.streams[s].parent else {
            let st = &mut self.streams[s];
            let r = &mut self.results[st.program];
            r.vars = std::mem::take(&mut st.vars);
            r.tokens = std::mem::take(&mut st.tokens);
            r.finish_time = self.sched.clock();
            self.live -= 1;
            return Ok(());
        };
        let Wait::Children { ids, next, done } = &mut self.streams[p].wait else {
            unreachable!("parent waits on its children");
        };
        *done += 1;
        let start = (*next < ids.len()).then(|| ids[*next]);
        if start.is_some() {
            *next += 1;
        }
        let all_done = *done == ids.len();
        let ids = ids.clone();
        if let Some(c) = start {
            self.streams[c].wait = Wait::Ready;
        }
        if !all_done {
            return Ok(());
        }
        self.join(p, &ids)
    }

    fn join(&mut self, p: usize, children: &[usize]) -> Result<(), ProgramError> {
        let (_, _, _, order) = self.current_fork(p);
        for &i in &order {
            let c = &mut self.streams[children[i]];
            let delta = c.tokens.split_off(c.base_len);
            let created = std::mem::take(&mut c.created);
            let mut vars = std::mem::take(&mut c.vars);
            c.frames.clear();
            self.streams[p].tokens.extend_from_slice(&delta);
            for name in created {
                let v = vars.remove(&name).expect("created variable is stored");
                self.set_var(p, format!("{i}.{name}"), v);
            }
        }
        let st = &mut self.streams[p];
        st.frames.last_mut().unwrap().pc += 1;
        st.wait = Wait::Ready;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MockModel;
    use crate::pool_sched::SchedulerConfig;
    use crate::tokenizer::Vocabulary;

    fn sched() -> Scheduler {
        let v = Arc::new(Vocabulary::build(0, 64));
        Scheduler::new(SchedulerConfig::default(), MockModel::new(v, 3))
    }

    #[test]
    fn single_gen_is_deterministic() {
        let p = Program::new(vec![Op::extend("x"), Op::gen("a", 1)]);
        let a = run_programs(&mut sched(), &[(p.clone(), 0)], InterpreterConfig::default()).unwrap().programs;
        let b = run_programs(&mut sched(), &[(p, 0)], InterpreterConfig::default()).unwrap().programs;
        assert_eq!(a, b);
        let mut sc = sched();
        let x = sc.model().vocab().encode(b"x");
        let t = sc.model().next_token(sc.model().prefix_hash(&x));
        let expect = String::from_utf8_lossy(&sc.model().vocab().decode(&[t]).unwrap()).into_owned();
        assert_eq!(a[0].vars["a"], expect);
        assert_eq!(a[0].gen_calls, 1);
        let _ = run_programs(&mut sc, &[], InterpreterConfig::default()).unwrap();
    }

    #[test]
    fn undefined_fetch() {
        let p = Program::new(vec![Op::Fetch { name: "nope".into() }]);
        let err = run_programs(&mut sched(), &[(p, 0)], InterpreterConfig::default()).unwrap_err();
        assert_eq!(err, ProgramError::UndefinedVariable("nope".into()));
    }

    #[test]
    fn join_exports_child_vars_in_order() {
        let p = Program::new(vec![
            Op::extend("judge this essay. "),
            Op::fork_with(["clarity: ", "style: ", "depth: "]),
            Op::gen("j", 3),
            Op::Join { order: Some(vec![2, 0, 1]) },
            Op::gen("summary", 4),
        ]);
        assert_eq!(p.gen_count().unwrap(), 4);
        let r = &run_programs(&mut sched(), &[(p, 0)], InterpreterConfig::default()).unwrap().programs[0];
        assert_eq!(r.gen_calls, 4);
        for k in ["0.j", "1.j", "2.j", "summary"] {
            assert!(r.vars.contains_key(k), "{k} missing from {:?}", r.vars);
        }
    }

    #[test]
    fn regex_gen_matches_pattern() {
        let p = Program::new(vec![Op::extend("grade: "), Op::gen_regex("g", 8, "[ABCD][+-]?")]);
        let r = &run_programs(&mut sched(), &[(p, 0)], InterpreterConfig::default()).unwrap().programs[0];
        let g = r.vars["g"].as_bytes();
        assert!(matches!(g[0], b'A'..=b'D') && g.len() <= 2);
    }
}
