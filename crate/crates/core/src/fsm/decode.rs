//! Constrained decoding loops.

use super::{Cursor, FsmError, FsmIndex};
use crate::model::MockModel;
use crate::tokenizer::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Jump over forced text and retokenize.
    Compressed,
    /// One token per model pass.
    Off,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeOutput {
    pub text: Vec<u8>,
    pub tokens: Vec<TokenId>,
    pub forward_passes: usize,
    /// Bytes appended by jump-forward.
    pub forced_bytes: usize,
}

/// Decoding state: emitted text, its token trace and the automaton position.
///
/// The first `committed` tokens of the trace are final and cover the first
/// `covered` bytes of the text. Tokens after them come from retokenization
/// and may still change when more text arrives.
#[derive(Clone, Debug)]
pub struct DecodeSession<'a> {
    index: &'a FsmIndex,
    text: Vec<u8>,
    trace: Vec<TokenId>,
    // states[i] is the automaton state after text[..i].
    states: Vec<u32>,
    cursor: Cursor,
    committed: usize,
    covered: usize,
    forward_passes: usize,
    forced_bytes: usize,
    replaced_tokens: usize,
}

impl<'a> DecodeSession<'a> {
    pub fn new(index: &'a FsmIndex) -> Self {
        let fsm = index.fsm();
        Self {
            index,
            text: Vec::new(),
            trace: Vec::new(),
            states: vec![index.dfa().start()],
            cursor: fsm.start_cursor(),
            committed: 0,
            covered: 0,
            forward_passes: 0,
            forced_bytes: 0,
            replaced_tokens: 0,
        }
    }

    /// Session that has already emitted `text` as the given `trace`.
    pub fn resume(index: &'a FsmIndex, text: &[u8], trace: Vec<TokenId>) -> Result<Self, FsmError> {
        let mut s = Self::new(index);
        s.push_text(text)?;
        s.committed = trace.len();
        s.covered = text.len();
        s.trace = trace;
        Ok(s)
    }

    pub fn text(&self) -> &[u8] {
        &self.text
    }

    pub fn trace(&self) -> &[TokenId] {
        &self.trace
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    /// Tokens dropped from the trace by retokenization so far.
    pub fn replaced_tokens(&self) -> usize {
        self.replaced_tokens
    }

    fn push_text(&mut self, bytes: &[u8]) -> Result<(), FsmError> {
        let dfa = self.index.dfa();
        let fsm = self.index.fsm();
        for &b in bytes {
            let s = *self.states.last().unwrap();
            let next = dfa.next(s, b).ok_or(FsmError::DeadEnd)?;
            self.cursor = fsm.advance(self.cursor, b).ok_or(FsmError::DeadEnd)?;
            self.states.push(next);
            self.text.push(b);
        }
        Ok(())
    }

    /// Appends forced text and replaces the trace with the tokenizer's
    /// segmentation of the whole text. Returns the new trace.
    pub fn retokenize_and_continue(&mut self, forced: &[u8]) -> Result<&[TokenId], FsmError> {
        if forced.is_empty() {
            return Ok(&self.trace);
        }
        self.push_text(forced)?;
        self.forced_bytes += forced.len();
        let fresh = self.index.vocab().encode(&self.text).into_vec();
        let keep = self.trace.iter().zip(&fresh).take_while(|(a, b)| a == b).count();
        self.replaced_tokens += self.trace.len() - keep;
        if keep < self.committed {
            self.committed = keep;
            self.covered = self.index.vocab().decode(&fresh[..keep]).map(|t| t.len()).unwrap_or(0);
        }
        self.trace.truncate(keep);
        self.trace.extend_from_slice(&fresh[keep..]);
        Ok(&self.trace)
    }

    // Commits trace tokens that no continuation of the text can change.
    fn commit_certain(&mut self) {
        let trie = self.index.vocab().trie();
        while self.covered < self.text.len() {
            let d = self.states[self.covered];
            if self.index.max_allowed_len(d) > self.text.len() - self.covered {
                break;
            }
            let (tok, len) = trie.longest_match(&self.text[self.covered..]).expect("byte coverage");
            // A model step may have dropped the retokenized tail; any token
            // still there must agree with the certain one.
            debug_assert!(self.trace.get(self.committed).is_none_or(|&t| t == tok));
            self.trace.truncate(self.committed);
            self.trace.push(tok);
            self.committed += 1;
            self.covered += len;
        }
    }

    // One model pass at the commit point. Returns false on end of sequence.
    fn model_step(&mut self, model: &MockModel) -> Result<bool, FsmError> {
        self.forward_passes += 1;
        let d = self.states[self.covered];
        let mask = self.index.state_mask(d);
        let tok = model
            .constrained_next(&self.text[..self.covered], self.index.dfa(), d, |t| mask.contains(t as usize))
            .ok_or(FsmError::DeadEnd)?;
        let vocab = self.index.vocab();
        if tok == vocab.eos() {
            return Ok(false);
        }
        let piece = vocab.piece(tok).expect("masked token has a piece");
        let end = self.covered + piece.len();
        if end > self.text.len() {
            debug_assert!(piece.starts_with(&self.text[self.covered..]));
            let tail = piece[self.text.len() - self.covered..].to_vec();
            self.push_text(&tail)?;
        }
        self.trace.truncate(self.committed);
        self.trace.push(tok);
        self.committed += 1;
        self.covered = end;
        Ok(true)
    }

    fn at_end_state(&self) -> u32 {
        *self.states.last().unwrap()
    }

    fn finish(self) -> DecodeOutput {
        debug_assert_eq!(self.committed, self.trace.len());
        DecodeOutput { text: self.text, tokens: self.trace, forward_passes: self.forward_passes, forced_bytes: self.forced_bytes }
    }
}

/// Decodes one output constrained by `index`'s pattern.
///
/// With jump-forward, a fully forced output needs no model pass at all: the
/// pattern `A` decodes to `A` with zero passes.
pub fn constrained_decode(model: &MockModel, index: &FsmIndex, max_tokens: usize, mode: DecodeMode) -> Result<DecodeOutput, FsmError> {
    if index.dfa().is_empty_language() {
        return Err(FsmError::DeadEnd);
    }
    let mut s = DecodeSession::new(index);
    loop {
        if mode == DecodeMode::Compressed {
            if s.covered == s.text.len() {
                let (forced, _) = index.fsm().jump_forward(s.cursor);
                s.retokenize_and_continue(&forced)?;
            }
            s.commit_certain();
        }
        if s.committed > max_tokens {
            return Err(FsmError::BudgetExceeded(max_tokens));
        }
        if s.covered == s.text.len() && index.only_eos(s.at_end_state()) {
            break;
        }
        if !s.model_step(model)? {
            break;
        }
        if s.committed > max_tokens {
            return Err(FsmError::BudgetExceeded(max_tokens));
        }
    }
    Ok(s.finish())
}
