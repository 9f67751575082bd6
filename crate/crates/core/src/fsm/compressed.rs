//! Compressed automaton: chains of singular transitions merged into
//! string-labeled edges.
//!
//! A transition into a state that is non-accepting and has exactly one
//! outgoing transition is extended through that state. Accepting states and
//! the start state always remain states of the compressed graph.

use std::collections::{HashMap, VecDeque};

use serde::Serialize;

use super::dfa::{dot_bytes, Dfa};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CompressedEdge {
    pub label: Vec<u8>,
    pub target: u32,
    /// Source-automaton state after each byte of the label.
    pub path: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CompressedState {
    pub dfa_state: u32,
    pub accepting: bool,
    /// Edges sorted by first label byte.
    pub edges: Vec<CompressedEdge>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CompressedFsm {
    pub states: Vec<CompressedState>,
    pub start: u32,
}

/// Position in a compressed automaton.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cursor {
    State(u32),
    /// `offset` bytes into `edge` of `state`, with `0 < offset < label.len()`.
    Edge {
        state: u32,
        edge: u32,
        offset: u32,
    },
}

fn singular(dfa: &Dfa, s: u32) -> Option<(u8, u32)> {
    if dfa.is_accepting(s) {
        return None;
    }
    let mut it = dfa.transitions(s);
    match (it.next(), it.next()) {
        (Some(t), None) => Some(t),
        _ => None,
    }
}

impl CompressedFsm {
    pub fn compress(dfa: &Dfa) -> Self {
        let mut index: HashMap<u32, u32> = HashMap::new();
        let mut states: Vec<CompressedState> = Vec::new();
        let mut queue = VecDeque::new();
        let intern = |d: u32, index: &mut HashMap<u32, u32>, states: &mut Vec<CompressedState>, queue: &mut VecDeque<u32>| -> u32 {
            *index.entry(d).or_insert_with(|| {
                states.push(CompressedState { dfa_state: d, accepting: dfa.is_accepting(d), edges: Vec::new() });
                queue.push_back(d);
                (states.len() - 1) as u32
            })
        };
        let start = intern(dfa.start(), &mut index, &mut states, &mut queue);
        while let Some(d) = queue.pop_front() {
            let mut edges = Vec::new();
            for (b, t) in dfa.transitions(d) {
                let mut label = vec![b];
                let mut path = vec![t];
                let mut cur = t;
                while cur != d && cur != dfa.start() {
                    let Some((nb, nt)) = singular(dfa, cur) else { break };
                    if path.contains(&nt) {
                        break;
                    }
                    label.push(nb);
                    path.push(nt);
                    cur = nt;
                }
                let target = intern(cur, &mut index, &mut states, &mut queue);
                edges.push(CompressedEdge { label, target, path });
            }
            let src = index[&d] as usize;
            states[src].edges = edges;
        }
        Self { states, start }
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_edges(&self) -> usize {
        self.states.iter().map(|s| s.edges.len()).sum()
    }

    pub fn start_cursor(&self) -> Cursor {
        Cursor::State(self.start)
    }

    /// Source-automaton state at a cursor.
    pub fn dfa_state(&self, c: Cursor) -> u32 {
        match c {
            Cursor::State(s) => self.states[s as usize].dfa_state,
            Cursor::Edge { state, edge, offset } => self.states[state as usize].edges[edge as usize].path[offset as usize - 1],
        }
    }

    pub fn advance(&self, c: Cursor, b: u8) -> Option<Cursor> {
        let (state, edge, offset) = match c {
            Cursor::State(s) => {
                let edges = &self.states[s as usize].edges;
                let e = edges.binary_search_by_key(&b, |e| e.label[0]).ok()?;
                (s, e as u32, 0u32)
            }
            Cursor::Edge { state, edge, offset } => {
                let e = &self.states[state as usize].edges[edge as usize];
                if e.label[offset as usize] != b {
                    return None;
                }
                (state, edge, offset)
            }
        };
        let e = &self.states[state as usize].edges[edge as usize];
        let next = offset + 1;
        Some(if next as usize == e.label.len() { Cursor::State(e.target) } else { Cursor::Edge { state, edge, offset: next } })
    }

    pub fn walk(&self, c: Cursor, bytes: &[u8]) -> Option<Cursor> {
        bytes.iter().try_fold(c, |c, &b| self.advance(c, b))
    }

    pub fn is_accepting(&self, c: Cursor) -> bool {
        matches!(c, Cursor::State(s) if self.states[s as usize].accepting)
    }

    pub fn accepts(&self, bytes: &[u8]) -> bool {
        self.walk(self.start_cursor(), bytes).is_some_and(|c| self.is_accepting(c))
    }

    /// Text forced from `c` and the cursor after it. Follows the remainder of
    /// the current edge, then whole edges while the state is non-accepting
    /// and has exactly one edge.
    pub fn jump_forward(&self, c: Cursor) -> (Vec<u8>, Cursor) {
        let mut forced = Vec::new();
        let mut s = match c {
            Cursor::State(s) => s,
            Cursor::Edge { state, edge, offset } => {
                let e = &self.states[state as usize].edges[edge as usize];
                forced.extend_from_slice(&e.label[offset as usize..]);
                e.target
            }
        };
        let mut seen = vec![s];
        loop {
            let st = &self.states[s as usize];
            if st.accepting || st.edges.len() != 1 || seen.contains(&st.edges[0].target) {
                break;
            }
            forced.extend_from_slice(&st.edges[0].label);
            s = st.edges[0].target;
            seen.push(s);
        }
        (forced, Cursor::State(s))
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph compressed {\n  rankdir=LR;\n");
        for (i, s) in self.states.iter().enumerate() {
            let shape = if s.accepting { "doublecircle" } else { "circle" };
            out.push_str(&format!("  c{i} [shape={shape}];\n"));
            for e in &s.edges {
                out.push_str(&format!("  c{i} -> c{} [label=\"{}\"];\n", e.target, dot_bytes(&e.label)));
            }
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Edge {
            label: String,
            target: u32,
        }
        #[derive(Serialize)]
        struct State {
            id: usize,
            accepting: bool,
            edges: Vec<Edge>,
        }
        let states: Vec<State> = self
            .states
            .iter()
            .enumerate()
            .map(|(id, s)| State {
                id,
                accepting: s.accepting,
                edges: s.edges.iter().map(|e| Edge { label: String::from_utf8_lossy(&e.label).into_owned(), target: e.target }).collect(),
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "start": self.start, "states": states }))
            .expect("compressed automaton serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::super::compile_regex;
    use super::*;

    fn comp(p: &str) -> CompressedFsm {
        CompressedFsm::compress(&compile_regex(p).unwrap())
    }

    #[test]
    fn literal_is_one_edge() {
        let c = comp("abc");
        assert_eq!(c.num_edges(), 1);
        assert_eq!(c.states[0].edges[0].label, b"abc");
    }

    #[test]
    fn branch_blocks_merge() {
        let c = comp("ab|ac");
        assert_eq!(c.states[0].edges.len(), 1);
        assert_eq!(c.states[0].edges[0].label, b"a");
        let mid = c.states[0].edges[0].target as usize;
        let labels: Vec<_> = c.states[mid].edges.iter().map(|e| e.label.clone()).collect();
        assert_eq!(labels, vec![b"b".to_vec(), b"c".to_vec()]);
    }

    #[test]
    fn json_constant_is_one_edge() {
        let c = comp(r#"\{"summary": "[a-z]+"\}"#);
        assert_eq!(c.states[0].edges[0].label, br#"{"summary": ""#);
    }

    #[test]
    fn jump_forward_cases() {
        let c = comp("ab|ac");
        let (f, cur) = c.jump_forward(c.start_cursor());
        assert_eq!(f, b"a");
        assert_eq!(c.jump_forward(cur), (Vec::new(), cur));

        let c = comp(r#"\{"summary": "x"#);
        let mid = c.walk(c.start_cursor(), b"{\"su").unwrap();
        assert_eq!(c.jump_forward(mid).0, b"mmary\": \"x");

        let c = comp("colou?r");
        let at_u = c.walk(c.start_cursor(), b"colo").unwrap();
        assert_eq!(c.jump_forward(at_u).0, b"");
    }

    #[test]
    fn stops_at_accepting() {
        let c = comp("ab(cd)?");
        let (f, cur) = c.jump_forward(c.start_cursor());
        assert_eq!(f, b"ab");
        assert!(c.is_accepting(cur));
    }
}
