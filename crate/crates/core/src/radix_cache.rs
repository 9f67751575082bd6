//! Radix tree over token sequences with reference counting and LRU leaf
//! eviction.
//!
//! Nodes live in an arena and are addressed by generation-checked handles.
//! Every operation ticks a single logical clock, and every node on the path
//! it touches gets that stamp as its `last_access`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RadixError {
    #[error("reference count underflow on node {0:?}")]
    Underflow(NodeId),
    #[error("stale or invalid node handle {0:?}")]
    StaleHandle(NodeId),
}

/// Handle to a tree node. Handles to removed nodes are detected as stale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    idx: u32,
    gen: u32,
}

#[derive(Clone, Debug)]
struct Node {
    parent: u32,
    label: Vec<TokenId>,
    children: BTreeMap<TokenId, u32>,
    ref_count: u32,
    last_access: u64,
    serial: u64,
    terminal: bool,
    gen: u32,
    alive: bool,
}

/// Removed leaf reported by [`RadixTree::evict_with_paths`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvictedPath {
    /// Full token path from the root to the end of the removed edge.
    pub path: Vec<TokenId>,
    /// Offset in `path` where the removed edge starts.
    pub from: usize,
    /// Tree clock of the eviction.
    pub seq: u64,
}

/// Pre-order JSON dump of one node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDump {
    pub label: Vec<TokenId>,
    pub ref_count: u32,
    pub last_access: u64,
    pub children: Vec<NodeDump>,
}

const ROOT: u32 = 0;

#[derive(Clone, Debug)]
pub struct RadixTree {
    nodes: Vec<Node>,
    free: Vec<u32>,
    clock: u64,
    next_serial: u64,
    total_cached: usize,
    evictable: usize,
}

impl Default for RadixTree {
    fn default() -> Self {
        Self::new()
    }
}

fn lcp(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl RadixTree {
    pub fn new() -> Self {
        let root = Node {
            parent: ROOT,
            label: Vec::new(),
            children: BTreeMap::new(),
            ref_count: 0,
            last_access: 0,
            serial: 0,
            terminal: false,
            gen: 0,
            alive: true,
        };
        Self { nodes: vec![root], free: Vec::new(), clock: 0, next_serial: 1, total_cached: 0, evictable: 0 }
    }

    pub fn root(&self) -> NodeId {
        NodeId { idx: ROOT, gen: self.nodes[ROOT as usize].gen }
    }

    fn handle(&self, idx: u32) -> NodeId {
        NodeId { idx, gen: self.nodes[idx as usize].gen }
    }

    fn check(&self, h: NodeId) -> Result<u32, RadixError> {
        match self.nodes.get(h.idx as usize) {
            Some(n) if n.alive && n.gen == h.gen => Ok(h.idx),
            _ => Err(RadixError::StaleHandle(h)),
        }
    }

    pub fn is_valid(&self, h: NodeId) -> bool {
        self.check(h).is_ok()
    }

    /// Current value of the logical clock.
    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn total_cached(&self) -> usize {
        self.total_cached
    }

    /// Tokens held only by nodes with zero reference count.
    pub fn evictable_size(&self) -> usize {
        self.evictable
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len() - self.free.len()
    }

    pub fn ref_count(&self, h: NodeId) -> Result<u32, RadixError> {
        Ok(self.nodes[self.check(h)? as usize].ref_count)
    }

    pub fn label(&self, h: NodeId) -> Result<&[TokenId], RadixError> {
        Ok(&self.nodes[self.check(h)? as usize].label)
    }

    pub fn last_access(&self, h: NodeId) -> Result<u64, RadixError> {
        Ok(self.nodes[self.check(h)? as usize].last_access)
    }

    pub fn parent(&self, h: NodeId) -> Result<Option<NodeId>, RadixError> {
        let i = self.check(h)?;
        Ok((i != ROOT).then(|| self.handle(self.nodes[i as usize].parent)))
    }

    pub fn children(&self, h: NodeId) -> Result<Vec<NodeId>, RadixError> {
        let i = self.check(h)?;
        Ok(self.nodes[i as usize].children.values().map(|&c| self.handle(c)).collect())
    }

    /// Full token path from the root to the end of `h`'s edge.
    pub fn path(&self, h: NodeId) -> Result<Vec<TokenId>, RadixError> {
        Ok(self.path_to(self.check(h)?))
    }

    /// Token depth of the end of `h`'s edge.
    pub fn depth(&self, h: NodeId) -> Result<usize, RadixError> {
        let mut i = self.check(h)?;
        let mut d = 0;
        while i != ROOT {
            d += self.nodes[i as usize].label.len();
            i = self.nodes[i as usize].parent;
        }
        Ok(d)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn alloc(&mut self, node: Node) -> u32 {
        match self.free.pop() {
            Some(i) => {
                let gen = self.nodes[i as usize].gen;
                self.nodes[i as usize] = Node { gen, ..node };
                i
            }
            None => {
                self.nodes.push(node);
                (self.nodes.len() - 1) as u32
            }
        }
    }

    fn new_node(&mut self, parent: u32, label: Vec<TokenId>, stamp: u64) -> u32 {
        let serial = self.next_serial;
        self.next_serial += 1;
        self.alloc(Node {
            parent,
            label,
            children: BTreeMap::new(),
            ref_count: 0,
            last_access: stamp,
            serial,
            terminal: false,
            gen: 0,
            alive: true,
        })
    }

    /// Splits `child`'s edge after `at` tokens and returns the new upper node.
    fn split(&mut self, child: u32, at: usize) -> u32 {
        let (parent, upper_label, rc, la) = {
            let c = &self.nodes[child as usize];
            (c.parent, c.label[..at].to_vec(), c.ref_count, c.last_access)
        };
        let first = upper_label[0];
        let upper = self.new_node(parent, upper_label, la);
        self.nodes[upper as usize].ref_count = rc;
        let c = &mut self.nodes[child as usize];
        c.label.drain(..at);
        c.parent = upper;
        let cfirst = c.label[0];
        self.nodes[upper as usize].children.insert(cfirst, child);
        self.nodes[parent as usize].children.insert(first, upper);
        upper
    }

    /// Read-only longest cached prefix length. Does not touch timestamps.
    pub fn peek_prefix(&self, tokens: &[TokenId]) -> usize {
        let mut cur = ROOT;
        let mut pos = 0;
        while pos < tokens.len() {
            let Some(&c) = self.nodes[cur as usize].children.get(&tokens[pos]) else { break };
            let label = &self.nodes[c as usize].label;
            let k = lcp(label, &tokens[pos..]);
            pos += k;
            if k < label.len() {
                break;
            }
            cur = c;
        }
        pos
    }

    /// Read-only length of the longest inserted sequence that prefixes
    /// `tokens`. This is what a flat table of whole sequences would find.
    pub fn peek_terminal_prefix(&self, tokens: &[TokenId]) -> usize {
        let mut cur = ROOT;
        let mut pos = 0;
        let mut best = 0;
        while pos < tokens.len() {
            let Some(&c) = self.nodes[cur as usize].children.get(&tokens[pos]) else { break };
            let label = &self.nodes[c as usize].label;
            let k = lcp(label, &tokens[pos..]);
            if k < label.len() {
                break;
            }
            pos += k;
            cur = c;
            if self.nodes[c as usize].terminal {
                best = pos;
            }
        }
        best
    }

    /// Longest cached prefix of `tokens`. A match ending inside an edge
    /// splits that edge so the returned handle ends exactly at the match.
    pub fn match_prefix(&mut self, tokens: &[TokenId]) -> (NodeId, usize) {
        let now = self.tick();
        let mut cur = ROOT;
        let mut pos = 0;
        while pos < tokens.len() {
            let Some(&c) = self.nodes[cur as usize].children.get(&tokens[pos]) else { break };
            let k = lcp(&self.nodes[c as usize].label, &tokens[pos..]);
            let node = if k < self.nodes[c as usize].label.len() { self.split(c, k) } else { c };
            self.nodes[node as usize].last_access = now;
            pos += k;
            cur = node;
            if node != c {
                break;
            }
        }
        (self.handle(cur), pos)
    }

    /// Inserts `tokens` and returns the number of newly cached tokens.
    pub fn insert(&mut self, tokens: &[TokenId]) -> usize {
        self.insert_with_handle(tokens).0
    }

    /// Like [`insert`](Self::insert), also returning the node that ends the
    /// sequence.
    pub fn insert_with_handle(&mut self, tokens: &[TokenId]) -> (usize, NodeId) {
        let now = self.tick();
        let mut cur = ROOT;
        let mut pos = 0;
        let mut added = 0;
        while pos < tokens.len() {
            match self.nodes[cur as usize].children.get(&tokens[pos]) {
                Some(&c) => {
                    let k = lcp(&self.nodes[c as usize].label, &tokens[pos..]);
                    let node = if k < self.nodes[c as usize].label.len() { self.split(c, k) } else { c };
                    self.nodes[node as usize].last_access = now;
                    pos += k;
                    cur = node;
                }
                None => {
                    let rest = tokens[pos..].to_vec();
                    let n = rest.len();
                    let leaf = self.new_node(cur, rest, now);
                    self.nodes[cur as usize].children.insert(tokens[pos], leaf);
                    self.total_cached += n;
                    self.evictable += n;
                    cur = leaf;
                    pos += n;
                    added = n;
                }
            }
        }
        if cur != ROOT {
            self.nodes[cur as usize].terminal = true;
        }
        (added, self.handle(cur))
    }

    /// Pins the path from `h` to the root. Returns the change in evictable
    /// size, which is zero or negative.
    pub fn inc_ref(&mut self, h: NodeId) -> Result<isize, RadixError> {
        let mut i = self.check(h)?;
        let mut delta = 0isize;
        while i != ROOT {
            let n = &mut self.nodes[i as usize];
            if n.ref_count == 0 {
                delta -= n.label.len() as isize;
            }
            n.ref_count += 1;
            i = n.parent;
        }
        self.evictable = (self.evictable as isize + delta) as usize;
        Ok(delta)
    }

    /// Unpins the path from `h` to the root. Returns the change in evictable
    /// size, which is zero or positive.
    pub fn dec_ref(&mut self, h: NodeId) -> Result<isize, RadixError> {
        let start = self.check(h)?;
        let mut i = start;
        while i != ROOT {
            if self.nodes[i as usize].ref_count == 0 {
                return Err(RadixError::Underflow(self.handle(i)));
            }
            i = self.nodes[i as usize].parent;
        }
        let mut i = start;
        let mut delta = 0isize;
        while i != ROOT {
            let n = &mut self.nodes[i as usize];
            n.ref_count -= 1;
            if n.ref_count == 0 {
                delta += n.label.len() as isize;
            }
            i = n.parent;
        }
        self.evictable = (self.evictable as isize + delta) as usize;
        Ok(delta)
    }

    /// Evicts least recently used unpinned leaves until at least `needed`
    /// tokens are freed or nothing evictable remains. `on_evict` receives the
    /// size of each removed leaf.
    pub fn evict(&mut self, needed: usize, mut on_evict: impl FnMut(usize)) -> usize {
        self.evict_inner(needed, false, |p| on_evict(p.path.len() - p.from))
    }

    /// Like [`evict`](Self::evict) but reports the full path of each removed
    /// leaf.
    pub fn evict_with_paths(&mut self, needed: usize, on_evict: impl FnMut(EvictedPath)) -> usize {
        self.evict_inner(needed, true, on_evict)
    }

    fn evict_inner(&mut self, needed: usize, with_paths: bool, mut cb: impl FnMut(EvictedPath)) -> usize {
        if needed == 0 {
            return 0;
        }
        self.tick();
        let mut heap: BinaryHeap<Reverse<(u64, u64, u32)>> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| *i as u32 != ROOT && n.alive && n.ref_count == 0 && n.children.is_empty())
            .map(|(i, n)| Reverse((n.last_access, n.serial, i as u32)))
            .collect();
        let mut evicted = 0;
        while evicted < needed {
            let Some(Reverse((_, _, i))) = heap.pop() else { break };
            let (parent, len) = (self.nodes[i as usize].parent, self.nodes[i as usize].label.len());
            let report = if with_paths {
                let path = self.path_to(i);
                EvictedPath { from: path.len() - len, path, seq: self.clock }
            } else {
                EvictedPath { path: vec![0; len], from: 0, seq: self.clock }
            };
            let first = self.nodes[i as usize].label[0];
            self.nodes[parent as usize].children.remove(&first);
            let n = &mut self.nodes[i as usize];
            n.alive = false;
            n.gen = n.gen.wrapping_add(1);
            n.label = Vec::new();
            n.children.clear();
            self.free.push(i);
            self.total_cached -= len;
            self.evictable -= len;
            evicted += len;
            cb(report);
            let p = &self.nodes[parent as usize];
            if parent != ROOT && p.children.is_empty() && p.ref_count == 0 {
                heap.push(Reverse((p.last_access, p.serial, parent)));
            }
        }
        evicted
    }

    fn path_to(&self, mut i: u32) -> Vec<TokenId> {
        let mut parts = Vec::new();
        while i != ROOT {
            parts.push(&self.nodes[i as usize].label);
            i = self.nodes[i as usize].parent;
        }
        parts.into_iter().rev().flatten().copied().collect()
    }

    /// Full token paths of every leaf, sorted.
    pub fn leaf_paths(&self) -> Vec<Vec<TokenId>> {
        let mut out: Vec<Vec<TokenId>> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| *i as u32 != ROOT && n.alive && n.children.is_empty())
            .map(|(i, _)| self.path_to(i as u32))
            .collect();
        out.sort();
        out
    }

    pub fn dump(&self) -> NodeDump {
        self.dump_node(ROOT)
    }

    fn dump_node(&self, i: u32) -> NodeDump {
        let n = &self.nodes[i as usize];
        NodeDump {
            label: n.label.clone(),
            ref_count: n.ref_count,
            last_access: n.last_access,
            children: n.children.values().map(|&c| self.dump_node(c)).collect(),
        }
    }

    /// Deterministic pre-order JSON serialization of the whole tree.
    pub fn dump_json(&self) -> String {
        serde_json::to_string(&self.dump()).expect("dump serializes")
    }

    /// Full structural check: radix property, parent links, token totals,
    /// ref-count monotonicity toward the root and the evictable counter.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut total = 0;
        let mut evictable = 0;
        let mut stack = vec![ROOT];
        let mut seen = 0;
        while let Some(i) = stack.pop() {
            seen += 1;
            let n = &self.nodes[i as usize];
            if !n.alive {
                return Err(format!("dead node {i} reachable"));
            }
            if i != ROOT {
                if n.label.is_empty() {
                    return Err(format!("empty label on node {i}"));
                }
                total += n.label.len();
                if n.ref_count == 0 {
                    evictable += n.label.len();
                }
                let p = &self.nodes[n.parent as usize];
                if p.children.get(&n.label[0]) != Some(&i) {
                    return Err(format!("node {i} not linked from parent"));
                }
            }
            let mut child_refs = 0u64;
            for (&first, &c) in &n.children {
                let cn = &self.nodes[c as usize];
                if cn.label.first() != Some(&first) {
                    return Err(format!("child key mismatch under node {i}"));
                }
                if cn.parent != i {
                    return Err(format!("bad parent link on node {c}"));
                }
                child_refs = child_refs.max(cn.ref_count as u64);
                stack.push(c);
            }
            if i != ROOT && (n.ref_count as u64) < child_refs {
                return Err(format!("node {i} ref count below a child's"));
            }
        }
        if seen != self.node_count() {
            return Err(format!("{} live nodes but {seen} reachable", self.node_count()));
        }
        if total != self.total_cached {
            return Err(format!("total_cached {} != {total}", self.total_cached));
        }
        if evictable != self.evictable {
            return Err(format!("evictable {} != {evictable}", self.evictable));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_match() {
        let mut t = RadixTree::new();
        assert_eq!(t.match_prefix(&[5, 6, 7]), (t.root(), 0));
        assert_eq!(t.evictable_size(), 0);
    }

    #[test]
    fn match_splits_edge() {
        let mut t = RadixTree::new();
        t.insert(&[1, 2, 3, 4]);
        let (h, n) = t.match_prefix(&[1, 2, 9]);
        assert_eq!(n, 2);
        assert_eq!(t.label(h).unwrap(), &[1, 2]);
        assert_eq!(t.children(h).unwrap().len(), 1);
        t.check_invariants().unwrap();
    }

    #[test]
    fn insert_counts() {
        let mut t = RadixTree::new();
        assert_eq!(t.insert(&[1, 2, 3]), 3);
        assert_eq!(t.insert(&[1, 2, 3]), 0);
        assert_eq!(t.insert(&[1, 2, 4, 5]), 2);
        let root = t.root();
        let top = t.children(root).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(t.label(top[0]).unwrap(), &[1, 2]);
        let labels: Vec<_> = t.children(top[0]).unwrap().iter().map(|&c| t.label(c).unwrap().to_vec()).collect();
        assert_eq!(labels, vec![vec![3], vec![4, 5]]);
        t.check_invariants().unwrap();
    }

    #[test]
    fn ref_deltas() {
        let mut t = RadixTree::new();
        let (_, h) = t.insert_with_handle(&[1, 2, 3, 4]);
        assert_eq!(t.inc_ref(h), Ok(-4));
        assert_eq!(t.inc_ref(h), Ok(0));
        assert_eq!(t.dec_ref(h), Ok(0));
        assert_eq!(t.dec_ref(h), Ok(4));
        assert_eq!(t.dec_ref(h), Err(RadixError::Underflow(h)));
    }

    #[test]
    fn partial_pin() {
        let mut t = RadixTree::new();
        t.insert(&(0..10).collect::<Vec<_>>());
        assert_eq!(t.evictable_size(), 10);
        let (h, n) = t.match_prefix(&[0, 1, 2, 3, 4, 5]);
        assert_eq!(n, 6);
        t.inc_ref(h).unwrap();
        assert_eq!(t.evictable_size(), 4);
    }

    #[test]
    fn lru_leaf_first() {
        let mut t = RadixTree::new();
        t.insert(&[1, 1, 1, 1, 1]);
        t.insert(&[2, 2, 2, 2, 2]);
        t.match_prefix(&[2, 2]);
        let mut sizes = vec![];
        assert_eq!(t.evict(4, |n| sizes.push(n)), 5);
        assert_eq!(sizes, vec![5]);
        assert_eq!(t.peek_prefix(&[1, 1]), 0);
        assert_eq!(t.peek_prefix(&[2, 2, 2, 2, 2]), 5);
        assert_eq!(t.evict(0, |_| {}), 0);
    }

    #[test]
    fn parent_becomes_leaf() {
        let mut t = RadixTree::new();
        t.insert(&[1, 2, 3]);
        t.insert(&[1, 2, 4]);
        let mut paths = vec![];
        assert_eq!(t.evict_with_paths(100, |p| paths.push(p)), 4);
        assert_eq!(paths.last().unwrap(), &EvictedPath { path: vec![1, 2], from: 0, seq: t.clock() });
        assert_eq!(t.node_count(), 1);
        t.check_invariants().unwrap();
    }

    #[test]
    fn pinned_never_evicted() {
        let mut t = RadixTree::new();
        let (_, h) = t.insert_with_handle(&[1, 2, 3]);
        t.insert(&[1, 2, 4, 5]);
        t.inc_ref(h).unwrap();
        assert_eq!(t.evict(100, |_| {}), 2);
        assert!(t.is_valid(h));
        assert_eq!(t.peek_prefix(&[1, 2, 3]), 3);
    }

    #[test]
    fn terminal_prefix() {
        let mut t = RadixTree::new();
        t.insert(&[1, 2, 3, 4]);
        assert_eq!(t.peek_terminal_prefix(&[1, 2, 3, 4, 5]), 4);
        assert_eq!(t.peek_terminal_prefix(&[1, 2, 3]), 0);
        assert_eq!(t.peek_prefix(&[1, 2, 3]), 3);
    }

    #[test]
    fn dump_is_deterministic() {
        let mut a = RadixTree::new();
        let mut b = RadixTree::new();
        for t in [&mut a, &mut b] {
            t.insert(&[3, 1]);
            t.insert(&[1, 2]);
            t.insert(&[1, 3]);
        }
        assert_eq!(a.dump_json(), b.dump_json());
        assert_eq!(a.dump().children[0].label, vec![1]);
    }
}
