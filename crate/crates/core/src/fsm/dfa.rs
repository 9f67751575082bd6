//! Thompson NFA construction, subset construction and Moore minimization.

use std::collections::{HashMap, VecDeque};

use super::regex::{Ast, ByteSet};
use super::FsmError;
use crate::model::ByteConstraint;

/// Missing transition.
pub const DEAD: u32 = u32::MAX;

/// Default cap on NFA and DFA states.
pub const DEFAULT_STATE_CAP: usize = 20_000;

#[derive(Default)]
struct NState {
    eps: Vec<usize>,
    trans: Vec<(ByteSet, usize)>,
}

struct Nfa {
    states: Vec<NState>,
    cap: usize,
}

impl Nfa {
    fn add(&mut self) -> Result<usize, FsmError> {
        if self.states.len() >= self.cap {
            return Err(FsmError::TooManyStates(self.cap));
        }
        self.states.push(NState::default());
        Ok(self.states.len() - 1)
    }

    // Returns (entry, exit) of a fragment.
    fn build(&mut self, ast: &Ast) -> Result<(usize, usize), FsmError> {
        match ast {
            Ast::Empty => {
                let s = self.add()?;
                Ok((s, s))
            }
            Ast::Class(set) => {
                let a = self.add()?;
                let b = self.add()?;
                self.states[a].trans.push((*set, b));
                Ok((a, b))
            }
            Ast::Concat(items) => {
                let (entry, mut exit) = self.build(&items[0])?;
                for it in &items[1..] {
                    let (e, x) = self.build(it)?;
                    self.states[exit].eps.push(e);
                    exit = x;
                }
                Ok((entry, exit))
            }
            Ast::Alt(branches) => {
                let a = self.add()?;
                let b = self.add()?;
                for br in branches {
                    let (e, x) = self.build(br)?;
                    self.states[a].eps.push(e);
                    self.states[x].eps.push(b);
                }
                Ok((a, b))
            }
            Ast::Repeat { inner, min, max } => {
                let entry = self.add()?;
                let mut exit = entry;
                for _ in 0..*min {
                    let (e, x) = self.build(inner)?;
                    self.states[exit].eps.push(e);
                    exit = x;
                }
                match max {
                    None => {
                        let (e, x) = self.build(inner)?;
                        let end = self.add()?;
                        self.states[exit].eps.push(e);
                        self.states[exit].eps.push(end);
                        self.states[x].eps.push(exit);
                        exit = end;
                    }
                    Some(m) => {
                        let end = self.add()?;
                        for _ in *min..*m {
                            let (e, x) = self.build(inner)?;
                            self.states[exit].eps.push(e);
                            self.states[exit].eps.push(end);
                            exit = x;
                        }
                        self.states[exit].eps.push(end);
                        exit = end;
                    }
                }
                Ok((entry, exit))
            }
        }
    }

    fn closure(&self, set: &mut Vec<usize>) {
        let mut seen = vec![false; self.states.len()];
        let mut stack: Vec<usize> = set.clone();
        for &s in set.iter() {
            seen[s] = true;
        }
        while let Some(s) = stack.pop() {
            for &t in &self.states[s].eps {
                if !seen[t] {
                    seen[t] = true;
                    set.push(t);
                    stack.push(t);
                }
            }
        }
        set.sort_unstable();
    }
}

/// Deterministic byte automaton. Every state is reachable from the start
/// and can reach an accepting state, except the lone start state of an
/// empty language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dfa {
    trans: Vec<[u32; 256]>,
    accepting: Vec<bool>,
    start: u32,
}

impl Dfa {
    /// Compiles a parsed pattern with the given state cap.
    pub fn from_ast(ast: &Ast, state_cap: usize, minimize: bool) -> Result<Self, FsmError> {
        let mut nfa = Nfa { states: Vec::new(), cap: state_cap.saturating_mul(4) };
        let (entry, exit) = nfa.build(ast)?;
        let mut start = vec![entry];
        nfa.closure(&mut start);
        let mut ids: HashMap<Vec<usize>, u32> = HashMap::new();
        let mut sets: Vec<Vec<usize>> = vec![start.clone()];
        ids.insert(start, 0);
        let mut trans: Vec<[u32; 256]> = Vec::new();
        let mut accepting = Vec::new();
        let mut i = 0;
        while i < sets.len() {
            let set = sets[i].clone();
            accepting.push(set.contains(&exit));
            let mut row = [DEAD; 256];
            let mut targets: Vec<Vec<usize>> = vec![Vec::new(); 256];
            for &s in &set {
                for (bs, t) in &nfa.states[s].trans {
                    for b in bs.iter() {
                        targets[b as usize].push(*t);
                    }
                }
            }
            for (b, mut tset) in targets.into_iter().enumerate() {
                if tset.is_empty() {
                    continue;
                }
                tset.sort_unstable();
                tset.dedup();
                nfa.closure(&mut tset);
                let id = match ids.get(&tset) {
                    Some(&id) => id,
                    None => {
                        if sets.len() >= state_cap {
                            return Err(FsmError::TooManyStates(state_cap));
                        }
                        let id = sets.len() as u32;
                        ids.insert(tset.clone(), id);
                        sets.push(tset);
                        id
                    }
                };
                row[b] = id;
            }
            trans.push(row);
            i += 1;
        }
        let mut dfa = Dfa { trans, accepting, start: 0 };
        dfa.trim();
        if minimize {
            dfa.minimize();
        }
        Ok(dfa)
    }

    /// Removes states that cannot reach acceptance and renumbers the rest in
    /// breadth-first order from the start.
    fn trim(&mut self) {
        let n = self.trans.len();
        let mut rev: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (s, row) in self.trans.iter().enumerate() {
            for &t in row.iter() {
                if t != DEAD {
                    rev[t as usize].push(s as u32);
                }
            }
        }
        let mut live = self.accepting.clone();
        let mut stack: Vec<u32> = (0..n as u32).filter(|&s| live[s as usize]).collect();
        while let Some(s) = stack.pop() {
            for &p in &rev[s as usize] {
                if !live[p as usize] {
                    live[p as usize] = true;
                    stack.push(p);
                }
            }
        }
        for row in &mut self.trans {
            for t in row.iter_mut() {
                if *t != DEAD && !live[*t as usize] {
                    *t = DEAD;
                }
            }
        }
        if !live[self.start as usize] {
            self.trans = vec![[DEAD; 256]];
            self.accepting = vec![false];
            self.start = 0;
            return;
        }
        self.renumber();
    }

    fn renumber(&mut self) {
        let n = self.trans.len();
        let mut order = vec![DEAD; n];
        let mut queue = VecDeque::from([self.start]);
        order[self.start as usize] = 0;
        let mut seq = vec![self.start];
        while let Some(s) = queue.pop_front() {
            for &t in self.trans[s as usize].iter() {
                if t != DEAD && order[t as usize] == DEAD {
                    order[t as usize] = seq.len() as u32;
                    seq.push(t);
                    queue.push_back(t);
                }
            }
        }
        let trans = seq
            .iter()
            .map(|&s| {
                let mut row = self.trans[s as usize];
                for t in row.iter_mut() {
                    if *t != DEAD {
                        *t = order[*t as usize];
                    }
                }
                row
            })
            .collect();
        self.accepting = seq.iter().map(|&s| self.accepting[s as usize]).collect();
        self.trans = trans;
        self.start = 0;
    }

    /// Moore partition refinement.
    fn minimize(&mut self) {
        let n = self.trans.len();
        let mut class: Vec<u32> = self.accepting.iter().map(|&a| a as u32).collect();
        let mut count = 0;
        loop {
            let mut sigs: HashMap<(u32, Vec<u32>), u32> = HashMap::new();
            let mut next = vec![0u32; n];
            for s in 0..n {
                let row: Vec<u32> = self.trans[s].iter().map(|&t| if t == DEAD { DEAD } else { class[t as usize] }).collect();
                let k = sigs.len() as u32;
                next[s] = *sigs.entry((class[s], row)).or_insert(k);
            }
            let new_count = sigs.len();
            class = next;
            if new_count == count {
                break;
            }
            count = new_count;
        }
        let mut rep: Vec<Option<usize>> = vec![None; count];
        for s in 0..n {
            rep[class[s] as usize].get_or_insert(s);
        }
        self.trans = rep
            .iter()
            .map(|r| {
                let mut row = self.trans[r.unwrap()];
                for t in row.iter_mut() {
                    if *t != DEAD {
                        *t = class[*t as usize];
                    }
                }
                row
            })
            .collect();
        self.accepting = rep.iter().map(|r| self.accepting[r.unwrap()]).collect();
        self.start = class[self.start as usize];
        self.renumber();
    }

    pub fn start(&self) -> u32 {
        self.start
    }

    pub fn num_states(&self) -> usize {
        self.trans.len()
    }

    pub fn is_accepting(&self, s: u32) -> bool {
        self.accepting[s as usize]
    }

    pub fn next(&self, s: u32, b: u8) -> Option<u32> {
        let t = self.trans[s as usize][b as usize];
        (t != DEAD).then_some(t)
    }

    /// Outgoing `(byte, target)` pairs in byte order.
    pub fn transitions(&self, s: u32) -> impl Iterator<Item = (u8, u32)> + '_ {
        self.trans[s as usize].iter().enumerate().filter(|(_, &t)| t != DEAD).map(|(b, &t)| (b as u8, t))
    }

    pub fn num_transitions(&self) -> usize {
        self.trans.iter().map(|r| r.iter().filter(|&&t| t != DEAD).count()).sum()
    }

    /// State after reading `bytes` from `s`, if any.
    pub fn walk(&self, s: u32, bytes: &[u8]) -> Option<u32> {
        bytes.iter().try_fold(s, |s, &b| self.next(s, b))
    }

    pub fn accepts(&self, bytes: &[u8]) -> bool {
        self.walk(self.start, bytes).is_some_and(|s| self.is_accepting(s))
    }

    /// True if the language is empty.
    pub fn is_empty_language(&self) -> bool {
        !self.accepting.iter().any(|&a| a)
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph dfa {\n  rankdir=LR;\n");
        for s in 0..self.num_states() as u32 {
            let shape = if self.is_accepting(s) { "doublecircle" } else { "circle" };
            out.push_str(&format!("  s{s} [shape={shape}];\n"));
            let mut grouped: Vec<(u32, Vec<u8>)> = Vec::new();
            for (b, t) in self.transitions(s) {
                match grouped.iter_mut().find(|(gt, _)| *gt == t) {
                    Some((_, bs)) => bs.push(b),
                    None => grouped.push((t, vec![b])),
                }
            }
            for (t, bs) in grouped {
                out.push_str(&format!("  s{s} -> s{t} [label=\"{}\"];\n", dot_bytes(&bs)));
            }
        }
        out.push_str("}\n");
        out
    }
}

pub(crate) fn dot_bytes(bs: &[u8]) -> String {
    bs.iter().flat_map(|&b| std::ascii::escape_default(b)).map(|c| c as char).collect::<String>().replace('\\', "\\\\").replace('"', "\\\"")
}

impl ByteConstraint for Dfa {
    fn step(&self, state: u32, byte: u8) -> Option<u32> {
        self.next(state, byte)
    }

    fn accepting(&self, state: u32) -> bool {
        self.is_accepting(state)
    }

    fn out_bytes(&self, state: u32) -> Vec<u8> {
        self.transitions(state).map(|(b, _)| b).collect()
    }
}
