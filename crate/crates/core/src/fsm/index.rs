//! Per-state token masks, built once per pattern and shared.

use std::sync::Arc;

use fixedbitset::FixedBitSet;

use super::{compile_regex_with, CompressedFsm, Cursor, Dfa, FsmConfig, FsmError};
use crate::tokenizer::{PieceTrie, TokenId, Vocabulary};

/// Compiled automaton plus token masks for every automaton state.
///
/// Bit `t` of a mask is set when piece `t` spells a valid path from the
/// state; the end-of-sequence bit is set at accepting states.
#[derive(Debug)]
pub struct FsmIndex {
    vocab: Arc<Vocabulary>,
    dfa: Dfa,
    fsm: CompressedFsm,
    masks: Vec<FixedBitSet>,
    max_len: Vec<usize>,
}

impl FsmIndex {
    pub fn build(pattern: &str, vocab: Arc<Vocabulary>, cfg: FsmConfig) -> Result<Arc<Self>, FsmError> {
        let dfa = compile_regex_with(pattern, cfg)?;
        Ok(Arc::new(Self::from_dfa(dfa, vocab)))
    }

    pub fn from_dfa(dfa: Dfa, vocab: Arc<Vocabulary>) -> Self {
        let fsm = CompressedFsm::compress(&dfa);
        let trie = vocab.trie();
        let bits = vocab.len() + 1;
        let mut masks = Vec::with_capacity(dfa.num_states());
        let mut max_len = Vec::with_capacity(dfa.num_states());
        for s in 0..dfa.num_states() as u32 {
            let mut m = FixedBitSet::with_capacity(bits);
            let mut longest = 0;
            let mut stack = vec![(PieceTrie::ROOT, s, 0usize)];
            while let Some((node, d, depth)) = stack.pop() {
                for &(b, child) in trie.children(node) {
                    if let Some(d2) = dfa.next(d, b) {
                        if let Some(t) = trie.token(child) {
                            m.insert(t as usize);
                            longest = longest.max(depth + 1);
                        }
                        stack.push((child, d2, depth + 1));
                    }
                }
            }
            if dfa.is_accepting(s) {
                m.insert(vocab.eos() as usize);
            }
            masks.push(m);
            max_len.push(longest);
        }
        Self { vocab, dfa, fsm, masks, max_len }
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn dfa(&self) -> &Dfa {
        &self.dfa
    }

    pub fn fsm(&self) -> &CompressedFsm {
        &self.fsm
    }

    /// Mask at an automaton state.
    pub fn state_mask(&self, dfa_state: u32) -> &FixedBitSet {
        &self.masks[dfa_state as usize]
    }

    /// Mask at a compressed-automaton cursor.
    pub fn allowed_token_mask(&self, c: Cursor) -> &FixedBitSet {
        self.state_mask(self.fsm.dfa_state(c))
    }

    pub fn is_allowed(&self, dfa_state: u32, t: TokenId) -> bool {
        self.masks[dfa_state as usize].contains(t as usize)
    }

    /// Length of the longest allowed piece at a state.
    pub fn max_allowed_len(&self, dfa_state: u32) -> usize {
        self.max_len[dfa_state as usize]
    }

    /// True if only end-of-sequence is allowed.
    pub fn only_eos(&self, dfa_state: u32) -> bool {
        let m = &self.masks[dfa_state as usize];
        m.contains(self.vocab.eos() as usize) && m.count_ones(..) == 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(p: &str, extra: &[&str]) -> Arc<FsmIndex> {
        let v = Arc::new(Vocabulary::with_extra_pieces(extra.iter().copied()).unwrap());
        FsmIndex::build(p, v, FsmConfig::default()).unwrap()
    }

    #[test]
    fn accepting_leaf_only_eos() {
        let i = idx("a", &[]);
        let end = i.dfa().walk(0, b"a").unwrap();
        assert!(i.only_eos(end));
    }

    #[test]
    fn path_prefix_pieces() {
        let i = idx("summary", &["su", "sum"]);
        let v = i.vocab().clone();
        let m = i.state_mask(i.dfa().start());
        for p in ["s", "su", "sum"] {
            assert!(m.contains(v.id_of(p.as_bytes()).unwrap() as usize), "{p}");
        }
        assert!(!m.contains(v.id_of(b"x").unwrap() as usize));
        assert_eq!(i.max_allowed_len(0), 3);
    }

    #[test]
    fn overshooting_piece_disallowed() {
        let i = idx("ab[0-9]", &["abc", "ab"]);
        let v = i.vocab().clone();
        assert!(i.is_allowed(0, v.id_of(b"ab").unwrap()));
        assert!(!i.is_allowed(0, v.id_of(b"abc").unwrap()));
    }

    #[test]
    fn dead_state_mask_is_empty() {
        let i = idx("[^\\x00-\\xff]", &[]);
        assert_eq!(i.state_mask(0).count_ones(..), 0);
    }
}
