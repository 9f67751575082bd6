//! Deterministic mock language model.
//!
//! Logits are hash-derived: the unconstrained next token is the argmax of
//! `mix(h, t)` over all pieces `t`, where `h` is a rolling hash of the token
//! prefix. Under a byte constraint the model follows a text-level intention:
//! at each text position it picks one allowed byte (or termination) by hash,
//! and it scores a token by how far its piece follows that intended path.

use std::hint::black_box;
use std::sync::Arc;

use crate::tokenizer::{TokenId, Vocabulary};

/// splitmix64 finalizer applied to a combined pair.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Byte automaton view used for constrained generation.
pub trait ByteConstraint {
    fn step(&self, state: u32, byte: u8) -> Option<u32>;
    fn accepting(&self, state: u32) -> bool;
    /// Outgoing bytes of `state` in ascending order.
    fn out_bytes(&self, state: u32) -> Vec<u8>;
}

#[derive(Clone, Debug)]
pub struct MockModel {
    vocab: Arc<Vocabulary>,
    seed: u64,
    burn_iters: u32,
}

impl MockModel {
    pub fn new(vocab: Arc<Vocabulary>, seed: u64) -> Self {
        Self { vocab, seed, burn_iters: 0 }
    }

    /// Sets the per-token work done by [`burn`](Self::burn).
    pub fn with_burn(mut self, iters_per_token: u32) -> Self {
        self.burn_iters = iters_per_token;
        self
    }

    /// Same vocabulary and work setting, different seed.
    pub fn reseeded(&self, salt: u64) -> Self {
        Self { vocab: self.vocab.clone(), seed: mix(self.seed, salt), burn_iters: self.burn_iters }
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Hash of the empty prefix.
    pub fn initial_hash(&self) -> u64 {
        mix(self.seed, 0x5eed)
    }

    pub fn extend_hash(&self, h: u64, t: TokenId) -> u64 {
        mix(h, t as u64 + 1)
    }

    pub fn prefix_hash(&self, tokens: &[TokenId]) -> u64 {
        tokens.iter().fold(self.initial_hash(), |h, &t| self.extend_hash(h, t))
    }

    /// Logit in `[0, 1)` of token `t` after a prefix with hash `h`.
    pub fn logit(&self, h: u64, t: TokenId) -> f64 {
        (mix(h, t as u64) >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Unconstrained greedy next token. Never the end-of-sequence id.
    pub fn next_token(&self, h: u64) -> TokenId {
        let mut best = (0u64, 0 as TokenId);
        for t in 0..self.vocab.len() as TokenId {
            let s = mix(h, t as u64);
            if s > best.0 || t == 0 {
                best = (s, t);
            }
        }
        best.1
    }

    /// Mean logit of `choice` tokens following `prompt`.
    pub fn score(&self, prompt: &[TokenId], choice: &[TokenId]) -> f64 {
        if choice.is_empty() {
            return 0.0;
        }
        let mut h = self.prefix_hash(prompt);
        let mut sum = 0.0;
        for &t in choice {
            sum += self.logit(h, t);
            h = self.extend_hash(h, t);
        }
        sum / choice.len() as f64
    }

    /// Simulated forward-pass work proportional to `tokens`.
    pub fn burn(&self, tokens: usize) {
        let mut x = self.seed;
        for i in 0..tokens as u64 * self.burn_iters as u64 {
            x = mix(x, i);
        }
        black_box(x);
    }

    fn text_hash(&self, text: &[u8]) -> u64 {
        text.iter().fold(mix(self.seed, 0x7e47), |h, &b| mix(h, b as u64 + 1))
    }

    /// Byte chosen at the end of `text` from automaton state `state`, or
    /// `None` for termination.
    pub fn intended_byte<C: ByteConstraint + ?Sized>(&self, text: &[u8], c: &C, state: u32) -> Option<u8> {
        let out = c.out_bytes(state);
        let eos = c.accepting(state);
        if out.len() == 1 && !eos {
            return Some(out[0]);
        }
        let h = self.text_hash(text);
        if eos && mix(h, 0).is_multiple_of(out.len() as u64 + 1) {
            return None;
        }
        // Fluent text: continue the longest trailing piece prefix when the
        // constraint allows it.
        let fluent = self.fluent_bytes(text, &out);
        let pool = if fluent.is_empty() { &out } else { &fluent };
        pool.iter().copied().max_by_key(|&b| mix(h, b as u64 + 1))
    }

    // Bytes that continue an unfinished piece at the end of `text`. At a
    // piece boundary any allowed byte may follow, so this is empty.
    fn fluent_bytes(&self, text: &[u8], out: &[u8]) -> Vec<u8> {
        let trie = self.vocab.trie();
        let from = text.len().saturating_sub(self.vocab.max_piece_len());
        for start in from..text.len() {
            let mut node = crate::tokenizer::PieceTrie::ROOT;
            if text[start..].iter().all(|&b| trie.child(node, b).map(|n| node = n).is_some()) {
                let next: Vec<u8> = trie.children(node).iter().map(|&(b, _)| b).filter(|b| out.contains(b)).collect();
                // A finished piece may still grow into a longer one.
                let finished = trie.token(node).is_some() && start + 1 < text.len();
                if finished && (next.is_empty() || mix(self.text_hash(text), 2).is_multiple_of(3)) {
                    return Vec::new();
                }
                if !next.is_empty() {
                    return next;
                }
            }
        }
        Vec::new()
    }

    /// Up to `limit` bytes of the intended continuation of `text`.
    pub fn intention<C: ByteConstraint + ?Sized>(&self, text: &[u8], c: &C, state: u32, limit: usize) -> Vec<u8> {
        let mut buf = text.to_vec();
        let mut s = state;
        while buf.len() - text.len() < limit {
            match self.intended_byte(&buf, c, s) {
                Some(b) => {
                    buf.push(b);
                    s = c.step(s, b).expect("intended byte is allowed");
                }
                None => break,
            }
        }
        buf.split_off(text.len())
    }

    /// Constrained greedy next token: the longest allowed piece along the
    /// intended path, or the end-of-sequence id if the intention is to stop.
    ///
    /// `allowed` is the token mask; a token outside it has logit minus
    /// infinity.
    pub fn constrained_next<C: ByteConstraint + ?Sized>(
        &self,
        text: &[u8],
        c: &C,
        state: u32,
        allowed: impl Fn(TokenId) -> bool,
    ) -> Option<TokenId> {
        let intent = self.intention(text, c, state, self.vocab.max_piece_len());
        let trie = self.vocab.trie();
        let mut node = crate::tokenizer::PieceTrie::ROOT;
        let mut best = None;
        for &b in &intent {
            match trie.child(node, b) {
                Some(n) => {
                    node = n;
                    if let Some(t) = trie.token(n) {
                        if allowed(t) {
                            best = Some(t);
                        }
                    }
                }
                None => break,
            }
        }
        match best {
            Some(t) => Some(t),
            None if intent.is_empty() && allowed(self.vocab.eos()) => Some(self.vocab.eos()),
            None => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn next_token_is_deterministic() {
        let v = Arc::new(Vocabulary::build(0, 32));
        let m = MockModel::new(v.clone(), 7);
        let h = m.prefix_hash(&[1, 2, 3]);
        assert_eq!(m.next_token(h), m.next_token(h));
        assert!((m.next_token(h) as usize) < v.len());
        let best = (0..v.len() as TokenId).max_by_key(|&t| mix(h, t as u64)).unwrap();
        assert_eq!(m.next_token(h), best);
    }

    #[test]
    fn score_is_mean_logit() {
        let v = Arc::new(Vocabulary::build(0, 0));
        let m = MockModel::new(v, 1);
        let h0 = m.prefix_hash(&[9]);
        let expect = (m.logit(h0, 4) + m.logit(m.extend_hash(h0, 4), 5)) / 2.0;
        assert_eq!(m.score(&[9], &[4, 5]), expect);
    }
}
