//! Byte trie over vocabulary pieces.

use super::TokenId;

/// Index of a trie node. The root is node 0.
pub type TrieNodeId = u32;

#[derive(Clone, Debug, Default)]
struct Node {
    children: Vec<(u8, TrieNodeId)>,
    token: Option<TokenId>,
}

/// Trie of all pieces, with children sorted by byte.
#[derive(Clone, Debug)]
pub struct PieceTrie {
    nodes: Vec<Node>,
}

impl PieceTrie {
    pub const ROOT: TrieNodeId = 0;

    pub fn build(pieces: &[Vec<u8>]) -> Self {
        let mut nodes = vec![Node::default()];
        for (id, p) in pieces.iter().enumerate() {
            let mut cur = 0usize;
            for &b in p {
                cur = match nodes[cur].children.binary_search_by_key(&b, |c| c.0) {
                    Ok(i) => nodes[cur].children[i].1 as usize,
                    Err(i) => {
                        let n = nodes.len() as TrieNodeId;
                        nodes[cur].children.insert(i, (b, n));
                        nodes.push(Node::default());
                        n as usize
                    }
                };
            }
            nodes[cur].token = Some(id as TokenId);
        }
        Self { nodes }
    }

    pub fn child(&self, node: TrieNodeId, b: u8) -> Option<TrieNodeId> {
        let c = &self.nodes[node as usize].children;
        c.binary_search_by_key(&b, |e| e.0).ok().map(|i| c[i].1)
    }

    pub fn children(&self, node: TrieNodeId) -> &[(u8, TrieNodeId)] {
        &self.nodes[node as usize].children
    }

    pub fn token(&self, node: TrieNodeId) -> Option<TokenId> {
        self.nodes[node as usize].token
    }

    /// Longest piece that prefixes `text`, as `(id, byte length)`.
    pub fn longest_match(&self, text: &[u8]) -> Option<(TokenId, usize)> {
        let mut best = None;
        let mut cur = Self::ROOT;
        for (i, &b) in text.iter().enumerate() {
            match self.child(cur, b) {
                Some(n) => {
                    cur = n;
                    if let Some(t) = self.token(n) {
                        best = Some((t, i + 1));
                    }
                }
                None => break,
            }
        }
        best
    }
}
