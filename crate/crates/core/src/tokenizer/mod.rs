//! Deterministic byte-level tokenizer.
//!
//! The vocabulary holds every single byte plus a number of multi-byte pieces
//! obtained by repeatedly merging the most frequent adjacent pair over a small
//! embedded corpus. Encoding is greedy longest-match from left to right.

mod trie;

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use trie::{PieceTrie, TrieNodeId};

/// Token identifier.
pub type TokenId = u32;

const CORPUS: &str = include_str!("corpus.txt");

/// Default merge count used by the simulator and the CLI.
pub const DEFAULT_MERGES: usize = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("unknown token id {0}")]
    UnknownId(TokenId),
    #[error("vocabulary is missing the single-byte piece {0:#04x}")]
    MissingByte(u8),
    #[error("duplicate piece for token id {0}")]
    DuplicatePiece(TokenId),
    #[error("token ids are not dense: expected {expected}, found {found}")]
    NonDenseIds { expected: TokenId, found: TokenId },
    #[error("empty piece for token id {0}")]
    EmptyPiece(TokenId),
    #[error("invalid vocabulary file: {0}")]
    Format(String),
}

/// An ordered list of token ids.
#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn into_vec(self) -> Vec<TokenId> {
        self.0
    }

    pub fn push(&mut self, t: TokenId) {
        self.0.push(t);
    }

    pub fn extend_from_slice(&mut self, ts: &[TokenId]) {
        self.0.extend_from_slice(ts);
    }

    pub fn truncate(&mut self, len: usize) {
        self.0.truncate(len);
    }
}

impl Deref for TokenSequence {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl From<&[TokenId]> for TokenSequence {
    fn from(v: &[TokenId]) -> Self {
        Self(v.to_vec())
    }
}

impl FromIterator<TokenId> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Debug for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    id: TokenId,
    piece: String,
}

/// Immutable token vocabulary with a piece trie for longest-match lookups.
#[derive(Clone)]
pub struct Vocabulary {
    pieces: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, TokenId>,
    trie: PieceTrie,
    max_piece_len: usize,
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary").field("len", &self.pieces.len()).field("max_piece_len", &self.max_piece_len).finish()
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces
    }
}

impl Eq for Vocabulary {}

#[derive(PartialEq)]
enum ByteClass {
    Alnum,
    Space,
    Punct,
}

fn class_of(b: u8) -> ByteClass {
    if b.is_ascii_alphanumeric() || b >= 0x80 {
        ByteClass::Alnum
    } else if b.is_ascii_whitespace() {
        ByteClass::Space
    } else {
        ByteClass::Punct
    }
}

/// Splits a corpus line into merge chunks.
fn pre_split(line: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < line.len() {
        let mut j = i;
        if line[j] == b' ' && j + 1 < line.len() && class_of(line[j + 1]) != ByteClass::Space {
            j += 1;
        }
        let class = class_of(line[j]);
        j += 1;
        while j < line.len() && class_of(line[j]) == class {
            // A space before a word or punctuation run starts the next chunk.
            if class == ByteClass::Space && line[j] == b' ' && j + 1 < line.len() && class_of(line[j + 1]) != ByteClass::Space {
                break;
            }
            j += 1;
        }
        out.push(&line[start..j]);
        start = j;
        i = j;
    }
    out
}

impl Vocabulary {
    /// Builds the vocabulary for `(seed, merge_count)`.
    ///
    /// Lines are first split into words, punctuation runs and whitespace
    /// runs (a word or punctuation run keeps one leading space), and merges
    /// never cross those chunks. The seed selects a subsample of corpus
    /// lines; merges then proceed by
    /// pair frequency with ties broken by the lexicographically smallest
    /// `(left, right)` piece pair.
    pub fn build(seed: u64, merge_count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lines: Vec<&[u8]> = CORPUS.lines().filter(|_| rng.gen_ratio(7, 8)).map(str::as_bytes).collect();

        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut index: HashMap<Vec<u8>, TokenId> = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as TokenId)).collect();
        let mut seqs: Vec<Vec<TokenId>> =
            lines.iter().flat_map(|l| pre_split(l)).map(|c| c.iter().map(|&b| b as TokenId).collect()).collect();

        let mut added = 0;
        while added < merge_count {
            let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
            for s in &seqs {
                for w in s.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&pieces[pa.0 as usize], &pieces[pa.1 as usize]);
                    let kb = (&pieces[pb.0 as usize], &pieces[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
            let Some(((l, r), _)) = best else { break };
            let mut merged = pieces[l as usize].clone();
            merged.extend_from_slice(&pieces[r as usize]);
            let id = match index.get(&merged) {
                Some(&id) => id,
                None => {
                    let id = pieces.len() as TokenId;
                    index.insert(merged.clone(), id);
                    pieces.push(merged);
                    added += 1;
                    id
                }
            };
            for s in &mut seqs {
                let mut out = Vec::with_capacity(s.len());
                let mut i = 0;
                while i < s.len() {
                    if i + 1 < s.len() && s[i] == l && s[i + 1] == r {
                        out.push(id);
                        i += 2;
                    } else {
                        out.push(s[i]);
                        i += 1;
                    }
                }
                *s = out;
            }
        }
        Self::from_pieces_unchecked(pieces)
    }

    /// Builds a vocabulary from an explicit piece list; ids follow list order.
    pub fn from_pieces(pieces: Vec<Vec<u8>>) -> Result<Self, TokenizerError> {
        let mut seen: HashMap<&[u8], TokenId> = HashMap::new();
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(TokenizerError::EmptyPiece(i as TokenId));
            }
            if seen.insert(p.as_slice(), i as TokenId).is_some() {
                return Err(TokenizerError::DuplicatePiece(i as TokenId));
            }
        }
        for b in 0..=255u8 {
            if !seen.contains_key(&[b][..]) {
                return Err(TokenizerError::MissingByte(b));
            }
        }
        Ok(Self::from_pieces_unchecked(pieces))
    }

    /// The byte alphabet plus the given extra pieces, in that order.
    pub fn with_extra_pieces<I, P>(extra: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = P>,
        P: AsRef<[u8]>,
    {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.extend(extra.into_iter().map(|p| p.as_ref().to_vec()));
        Self::from_pieces(pieces)
    }

    fn from_pieces_unchecked(pieces: Vec<Vec<u8>>) -> Self {
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as TokenId)).collect();
        let trie = PieceTrie::build(&pieces);
        let max_piece_len = pieces.iter().map(Vec::len).max().unwrap_or(0);
        Self { pieces, index, trie, max_piece_len }
    }

    /// Number of pieces; the end-of-sequence id equals this value.
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Reserved end-of-sequence id. It has no piece and never appears in
    /// `encode` output.
    pub fn eos(&self) -> TokenId {
        self.pieces.len() as TokenId
    }

    pub fn piece(&self, id: TokenId) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, piece: &[u8]) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    pub fn pieces(&self) -> impl Iterator<Item = (TokenId, &[u8])> {
        self.pieces.iter().enumerate().map(|(i, p)| (i as TokenId, p.as_slice()))
    }

    pub fn max_piece_len(&self) -> usize {
        self.max_piece_len
    }

    pub fn trie(&self) -> &PieceTrie {
        &self.trie
    }

    /// Greedy longest-match segmentation.
    pub fn encode(&self, text: &[u8]) -> TokenSequence {
        let mut out = Vec::with_capacity(text.len() / 2 + 1);
        let mut pos = 0;
        while pos < text.len() {
            let (id, len) = self.trie.longest_match(&text[pos..]).expect("every byte is a piece");
            out.push(id);
            pos += len;
        }
        TokenSequence(out)
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        self.decode_into(tokens, &mut out)?;
        Ok(out)
    }

    pub fn decode_into(&self, tokens: &[TokenId], out: &mut Vec<u8>) -> Result<(), TokenizerError> {
        for &t in tokens {
            let p = self.piece(t).ok_or(TokenizerError::UnknownId(t))?;
            out.extend_from_slice(p);
        }
        Ok(())
    }

    /// Number of tokens `encode(text)` produces.
    pub fn token_count(&self, text: &[u8]) -> usize {
        self.encode(text).len()
    }

    /// JSON export: an array of `{id, piece}` with base64 pieces.
    pub fn to_json(&self) -> String {
        let entries: Vec<Entry> = self.pieces().map(|(id, p)| Entry { id, piece: BASE64.encode(p) }).collect();
        serde_json::to_string_pretty(&entries).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TokenizerError> {
        let entries: Vec<Entry> = serde_json::from_str(s).map_err(|e| TokenizerError::Format(e.to_string()))?;
        let mut pieces = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            if e.id as usize != i {
                return Err(TokenizerError::NonDenseIds { expected: i as TokenId, found: e.id });
            }
            let p = BASE64.decode(e.piece.as_bytes()).map_err(|err| TokenizerError::Format(err.to_string()))?;
            pieces.push(p);
        }
        Self::from_pieces(pieces)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Vocabulary {
        Vocabulary::with_extra_pieces(["ab"]).unwrap()
    }

    #[test]
    fn sizes() {
        assert_eq!(Vocabulary::build(0, 0).len(), 256);
        assert_eq!(Vocabulary::build(0, 64).len(), 320);
        assert_eq!(Vocabulary::build(0, 64), Vocabulary::build(0, 64));
    }

    #[test]
    fn greedy_examples() {
        let v = abc();
        let ab = v.id_of(b"ab").unwrap();
        assert_eq!(v.encode(b"").len(), 0);
        assert_eq!(&*v.encode(b"ab"), &[ab]);
        assert_eq!(&*v.encode(b"ba"), &[b'b' as TokenId, b'a' as TokenId]);
        assert_eq!(v.decode(&[ab, b'a' as TokenId]).unwrap(), b"aba");
    }

    #[test]
    fn unknown_id() {
        let v = abc();
        assert_eq!(v.decode(&[v.eos()]), Err(TokenizerError::UnknownId(v.eos())));
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::build(3, 40);
        let s = v.to_json();
        assert_eq!(Vocabulary::from_json(&s).unwrap(), v);
    }

    #[test]
    fn pre_split_chunks() {
        let chunks = pre_split(br#"{"summary": "the essay",  x"#);
        let want: Vec<&[u8]> = vec![b"{\"", b"summary", b"\":", b" \"", b"the", b" essay", b"\",", b" ", b" x"];
        assert_eq!(chunks, want);
    }

    #[test]
    fn uppercase_and_digits_are_isolated() {
        let v = Vocabulary::build(0, DEFAULT_MERGES);
        for (_, p) in v.pieces() {
            if p.len() > 1 {
                assert!(!p.iter().any(|b| b.is_ascii_uppercase() || b.is_ascii_digit()));
            }
        }
    }

    #[test]
    fn rejects_bad_piece_lists() {
        assert_eq!(Vocabulary::from_pieces(vec![b"a".to_vec()]).unwrap_err(), TokenizerError::MissingByte(0));
        assert!(matches!(Vocabulary::with_extra_pieces(["a"]), Err(TokenizerError::DuplicatePiece(256))));
    }
}
