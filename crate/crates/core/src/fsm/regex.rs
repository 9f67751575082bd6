//! Parser for the supported regular-expression subset.
//!
//! Literals, escapes, bracket classes, `.`, groups, alternation and the
//! quantifiers `* + ? {m} {m,} {m,n}`. Anchors, lookaround, backreferences
//! and lazy or possessive quantifiers are rejected.

use std::fmt;

use super::FsmError;

/// Set of bytes as a 256-bit mask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ByteSet([u64; 4]);

impl ByteSet {
    pub const EMPTY: ByteSet = ByteSet([0; 4]);
    pub const FULL: ByteSet = ByteSet([u64::MAX; 4]);

    pub fn single(b: u8) -> Self {
        let mut s = Self::EMPTY;
        s.insert(b);
        s
    }

    pub fn range(lo: u8, hi: u8) -> Self {
        let mut s = Self::EMPTY;
        for b in lo..=hi {
            s.insert(b);
        }
        s
    }

    pub fn insert(&mut self, b: u8) {
        self.0[(b >> 6) as usize] |= 1 << (b & 63);
    }

    pub fn contains(&self, b: u8) -> bool {
        self.0[(b >> 6) as usize] & (1 << (b & 63)) != 0
    }

    pub fn union(mut self, o: ByteSet) -> Self {
        for i in 0..4 {
            self.0[i] |= o.0[i];
        }
        self
    }

    pub fn complement(mut self) -> Self {
        for w in &mut self.0 {
            *w = !*w;
        }
        self
    }

    pub fn is_empty(&self) -> bool {
        self.0 == [0; 4]
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(move |&b| self.contains(b))
    }
}

impl fmt::Debug for ByteSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bytes: String = self.iter().map(|b| (b as char).escape_default().to_string()).collect();
        write!(f, "[{bytes}]")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Ast {
    Empty,
    Class(ByteSet),
    Concat(Vec<Ast>),
    Alt(Vec<Ast>),
    Repeat { inner: Box<Ast>, min: u32, max: Option<u32> },
}

/// Upper bound accepted for `{m,n}` counts.
pub const MAX_REPEAT: u32 = 1000;

pub fn parse(pattern: &str) -> Result<Ast, FsmError> {
    let mut p = Parser { src: pattern.as_bytes(), pos: 0 };
    let ast = p.alt()?;
    if p.pos < p.src.len() {
        return Err(p.err("unmatched ')'"));
    }
    Ok(ast)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

fn class_d() -> ByteSet {
    ByteSet::range(b'0', b'9')
}

fn class_w() -> ByteSet {
    ByteSet::range(b'0', b'9').union(ByteSet::range(b'a', b'z')).union(ByteSet::range(b'A', b'Z')).union(ByteSet::single(b'_'))
}

fn class_s() -> ByteSet {
    [b'\t', b'\n', 0x0b, 0x0c, b'\r', b' '].into_iter().fold(ByteSet::EMPTY, |s, b| s.union(ByteSet::single(b)))
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> FsmError {
        FsmError::Parse { pos: self.pos, msg: msg.to_string() }
    }

    fn unsupported(&self, feature: &str) -> FsmError {
        FsmError::Unsupported { pos: self.pos, feature: feature.to_string() }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn alt(&mut self) -> Result<Ast, FsmError> {
        let mut branches = vec![self.concat()?];
        while self.eat(b'|') {
            branches.push(self.concat()?);
        }
        Ok(if branches.len() == 1 { branches.pop().unwrap() } else { Ast::Alt(branches) })
    }

    fn concat(&mut self) -> Result<Ast, FsmError> {
        let mut items = Vec::new();
        while let Some(c) = self.peek() {
            if c == b'|' || c == b')' {
                break;
            }
            let atom = self.atom()?;
            items.push(self.quantifiers(atom)?);
        }
        Ok(match items.len() {
            0 => Ast::Empty,
            1 => items.pop().unwrap(),
            _ => Ast::Concat(items),
        })
    }

    fn quantifiers(&mut self, mut atom: Ast) -> Result<Ast, FsmError> {
        loop {
            let (min, max) = match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    (0, None)
                }
                Some(b'+') => {
                    self.pos += 1;
                    (1, None)
                }
                Some(b'?') => {
                    self.pos += 1;
                    (0, Some(1))
                }
                Some(b'{') => match self.counted()? {
                    Some(q) => q,
                    None => return Ok(atom),
                },
                _ => return Ok(atom),
            };
            if self.peek() == Some(b'?') {
                return Err(self.unsupported("lazy quantifier"));
            }
            if self.peek() == Some(b'+') {
                return Err(self.unsupported("possessive quantifier"));
            }
            atom = Ast::Repeat { inner: Box::new(atom), min, max };
        }
    }

    // Parses `{m}`, `{m,}` or `{m,n}` at the cursor. Returns `None` and leaves
    // the cursor alone when the brace does not start a quantifier.
    fn counted(&mut self) -> Result<Option<(u32, Option<u32>)>, FsmError> {
        let start = self.pos;
        self.pos += 1;
        let Some(min) = self.number()? else {
            self.pos = start;
            return Ok(None);
        };
        let max = if self.eat(b',') {
            if self.peek() == Some(b'}') {
                None
            } else {
                match self.number()? {
                    Some(n) => Some(n),
                    None => {
                        self.pos = start;
                        return Ok(None);
                    }
                }
            }
        } else {
            Some(min)
        };
        if !self.eat(b'}') {
            self.pos = start;
            return Ok(None);
        }
        if let Some(m) = max {
            if m < min {
                self.pos = start;
                return Err(self.err("repetition range is reversed"));
            }
        }
        Ok(Some((min, max)))
    }

    fn number(&mut self) -> Result<Option<u32>, FsmError> {
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if start == self.pos {
            return Ok(None);
        }
        let s = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        match s.parse::<u32>() {
            Ok(n) if n <= MAX_REPEAT => Ok(Some(n)),
            _ => Err(FsmError::Parse { pos: start, msg: format!("repetition count above {MAX_REPEAT}") }),
        }
    }

    fn atom(&mut self) -> Result<Ast, FsmError> {
        let c = self.peek().expect("atom called at end");
        match c {
            b'(' => {
                let open = self.pos;
                self.pos += 1;
                if self.eat(b'?') && !self.eat(b':') {
                    self.pos -= 1;
                    return Err(match self.src.get(self.pos + 1) {
                        Some(b'=' | b'!' | b'<') => self.unsupported("lookaround"),
                        _ => self.unsupported("group flags"),
                    });
                }
                let inner = self.alt()?;
                if !self.eat(b')') {
                    return Err(FsmError::Parse { pos: open, msg: "unclosed group".into() });
                }
                Ok(inner)
            }
            b'[' => self.class(),
            b'.' => {
                self.pos += 1;
                Ok(Ast::Class(ByteSet::single(b'\n').complement()))
            }
            b'^' | b'$' => Err(self.unsupported("anchor")),
            b'*' | b'+' | b'?' => Err(self.err("nothing to repeat")),
            b'{' if self.looks_like_quantifier() => Err(self.err("nothing to repeat")),
            b'\\' => {
                self.pos += 1;
                Ok(Ast::Class(self.escape(false)?))
            }
            _ => {
                self.pos += 1;
                Ok(Ast::Class(ByteSet::single(c)))
            }
        }
    }

    fn looks_like_quantifier(&mut self) -> bool {
        let save = self.pos;
        let ok = matches!(self.counted(), Ok(Some(_)));
        self.pos = save;
        ok
    }

    fn escape(&mut self, in_class: bool) -> Result<ByteSet, FsmError> {
        let Some(c) = self.peek() else {
            return Err(self.err("trailing backslash"));
        };
        self.pos += 1;
        let set = match c {
            b'd' => class_d(),
            b'D' => class_d().complement(),
            b'w' => class_w(),
            b'W' => class_w().complement(),
            b's' => class_s(),
            b'S' => class_s().complement(),
            b'n' => ByteSet::single(b'\n'),
            b't' => ByteSet::single(b'\t'),
            b'r' => ByteSet::single(b'\r'),
            b'f' => ByteSet::single(0x0c),
            b'v' => ByteSet::single(0x0b),
            b'x' => {
                let hex = self.src.get(self.pos..self.pos + 2).ok_or_else(|| self.err("short hex escape"))?;
                let s = std::str::from_utf8(hex).map_err(|_| self.err("bad hex escape"))?;
                let b = u8::from_str_radix(s, 16).map_err(|_| self.err("bad hex escape"))?;
                self.pos += 2;
                ByteSet::single(b)
            }
            b'1'..=b'9' => {
                self.pos -= 2;
                return Err(self.unsupported("backreference"));
            }
            b'b' | b'B' | b'A' | b'z' | b'Z' if !in_class => {
                self.pos -= 2;
                return Err(self.unsupported("anchor"));
            }
            c if c.is_ascii_alphanumeric() => {
                self.pos -= 2;
                return Err(self.unsupported("escape sequence"));
            }
            c => ByteSet::single(c),
        };
        Ok(set)
    }

    fn class(&mut self) -> Result<Ast, FsmError> {
        let open = self.pos;
        self.pos += 1;
        let negate = self.eat(b'^');
        let mut set = ByteSet::EMPTY;
        let mut first = true;
        loop {
            let Some(c) = self.peek() else {
                return Err(FsmError::Parse { pos: open, msg: "unclosed character class".into() });
            };
            if c == b']' && !first {
                self.pos += 1;
                break;
            }
            first = false;
            let lo = self.class_atom()?;
            if self.peek() == Some(b'-') && !matches!(self.src.get(self.pos + 1), Some(b']') | None) {
                self.pos += 1;
                let hi = self.class_atom()?;
                match (single(lo), single(hi)) {
                    (Some(l), Some(h)) if l <= h => set = set.union(ByteSet::range(l, h)),
                    (Some(_), Some(_)) => return Err(self.err("class range is reversed")),
                    _ => return Err(self.err("class range bound is a class")),
                }
            } else {
                set = set.union(lo);
            }
        }
        Ok(Ast::Class(if negate { set.complement() } else { set }))
    }

    fn class_atom(&mut self) -> Result<ByteSet, FsmError> {
        let c = self.peek().unwrap();
        self.pos += 1;
        if c == b'\\' {
            self.escape(true)
        } else if c == b'[' && self.peek() == Some(b':') {
            self.pos -= 1;
            Err(self.unsupported("POSIX class"))
        } else {
            Ok(ByteSet::single(c))
        }
    }
}

fn single(s: ByteSet) -> Option<u8> {
    let mut it = s.iter();
    match (it.next(), it.next()) {
        (Some(b), None) => Some(b),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_basic_forms() {
        assert_eq!(parse("a").unwrap(), Ast::Class(ByteSet::single(b'a')));
        assert!(matches!(parse("a|b").unwrap(), Ast::Alt(v) if v.len() == 2));
        assert!(matches!(parse("a{2,3}").unwrap(), Ast::Repeat { min: 2, max: Some(3), .. }));
        assert!(matches!(parse("[^a]").unwrap(), Ast::Class(s) if s.len() == 255));
        assert!(matches!(parse("[a-c-]").unwrap(), Ast::Class(s) if s.len() == 4));
        assert_eq!(parse("").unwrap(), Ast::Empty);
    }

    #[test]
    fn brace_without_count_is_literal() {
        assert_eq!(parse("{").unwrap(), Ast::Class(ByteSet::single(b'{')));
    }

    #[test]
    fn rejects_unsupported() {
        for (p, pos) in [("a\\1", 1), ("(?=a)", 1), ("^a", 0), ("a*?", 2), ("\\bx", 0)] {
            match parse(p) {
                Err(FsmError::Unsupported { pos: got, .. }) => assert_eq!(got, pos, "{p}"),
                other => panic!("{p}: {other:?}"),
            }
        }
    }

    #[test]
    fn reports_positions() {
        assert_eq!(parse("ab)").unwrap_err(), FsmError::Parse { pos: 2, msg: "unmatched ')'".into() });
        assert!(matches!(parse("(ab"), Err(FsmError::Parse { pos: 0, .. })));
        assert!(matches!(parse("x[ab"), Err(FsmError::Parse { pos: 1, .. })));
        assert!(matches!(parse("*"), Err(FsmError::Parse { pos: 0, .. })));
    }
}
