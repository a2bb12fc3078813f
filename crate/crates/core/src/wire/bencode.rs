//! Strict bencode. The decoder accepts only canonical input: no leading
//! zeros, no `-0`, dictionary keys strictly ascending, no trailing bytes.

use std::collections::BTreeMap;

use thiserror::Error;

/// Nesting limit for lists and dictionaries.
const MAX_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Bencode {
    Int(i64),
    Bytes(Vec<u8>),
    List(Vec<Bencode>),
    Dict(BTreeMap<Vec<u8>, Bencode>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeErrorKind {
    Empty,
    UnexpectedEnd,
    UnexpectedByte(u8),
    LeadingZero,
    NegativeZero,
    IntegerOverflow,
    UnsortedKey,
    DuplicateKey,
    KeyNotString,
    TooDeep,
    TrailingBytes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("bencode decode error at byte {offset}: {kind:?}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

impl Bencode {
    pub fn bytes(b: impl Into<Vec<u8>>) -> Bencode {
        Bencode::Bytes(b.into())
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Bencode::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Bencode::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_dict(&self) -> Option<&BTreeMap<Vec<u8>, Bencode>> {
        match self {
            Bencode::Dict(d) => Some(d),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Bencode]> {
        match self {
            Bencode::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Bencode::Int(i) => {
                out.push(b'i');
                out.extend_from_slice(i.to_string().as_bytes());
                out.push(b'e');
            }
            Bencode::Bytes(b) => encode_bytes(b, out),
            Bencode::List(items) => {
                out.push(b'l');
                for item in items {
                    item.encode_into(out);
                }
                out.push(b'e');
            }
            Bencode::Dict(map) => {
                out.push(b'd');
                // BTreeMap iterates in ascending byte order
                for (k, v) in map {
                    encode_bytes(k, out);
                    v.encode_into(out);
                }
                out.push(b'e');
            }
        }
    }

    pub fn decode(input: &[u8]) -> Result<Bencode, DecodeError> {
        if input.is_empty() {
            return Err(DecodeError {
                offset: 0,
                kind: DecodeErrorKind::Empty,
            });
        }
        let mut d = Decoder { input, pos: 0 };
        let value = d.value(0)?;
        if d.pos != input.len() {
            return Err(d.err(DecodeErrorKind::TrailingBytes));
        }
        Ok(value)
    }
}

fn encode_bytes(b: &[u8], out: &mut Vec<u8>) {
    out.extend_from_slice(b.len().to_string().as_bytes());
    out.push(b':');
    out.extend_from_slice(b);
}

struct Decoder<'a> {
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn err(&self, kind: DecodeErrorKind) -> DecodeError {
        DecodeError {
            offset: self.pos,
            kind,
        }
    }

    fn peek(&self) -> Result<u8, DecodeError> {
        self.input
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.err(DecodeErrorKind::UnexpectedEnd))
    }

    fn value(&mut self, depth: usize) -> Result<Bencode, DecodeError> {
        match self.peek()? {
            b'i' => {
                self.pos += 1;
                let v = self.integer(b'e')?;
                Ok(Bencode::Int(v))
            }
            b'0'..=b'9' => Ok(Bencode::Bytes(self.byte_string()?.to_vec())),
            b'l' => {
                if depth >= MAX_DEPTH {
                    return Err(self.err(DecodeErrorKind::TooDeep));
                }
                self.pos += 1;
                let mut items = Vec::new();
                while self.peek()? != b'e' {
                    items.push(self.value(depth + 1)?);
                }
                self.pos += 1;
                Ok(Bencode::List(items))
            }
            b'd' => {
                if depth >= MAX_DEPTH {
                    return Err(self.err(DecodeErrorKind::TooDeep));
                }
                self.pos += 1;
                let mut map = BTreeMap::new();
                let mut last: Option<&[u8]> = None;
                while self.peek()? != b'e' {
                    let key_at = self.pos;
                    if !self.peek()?.is_ascii_digit() {
                        return Err(self.err(DecodeErrorKind::KeyNotString));
                    }
                    let key = self.byte_string()?;
                    if let Some(prev) = last {
                        if key == prev {
                            return Err(DecodeError {
                                offset: key_at,
                                kind: DecodeErrorKind::DuplicateKey,
                            });
                        }
                        if key < prev {
                            return Err(DecodeError {
                                offset: key_at,
                                kind: DecodeErrorKind::UnsortedKey,
                            });
                        }
                    }
                    last = Some(key);
                    let v = self.value(depth + 1)?;
                    map.insert(key.to_vec(), v);
                }
                self.pos += 1;
                Ok(Bencode::Dict(map))
            }
            other => Err(self.err(DecodeErrorKind::UnexpectedByte(other))),
        }
    }

    /// Parses a decimal integer terminated by `terminator`.
    fn integer(&mut self, terminator: u8) -> Result<i64, DecodeError> {
        let start = self.pos;
        let negative = self.peek()? == b'-';
        if negative {
            self.pos += 1;
        }
        let digits_start = self.pos;
        let mut value: i64 = 0;
        loop {
            let b = self.peek()?;
            if b == terminator {
                break;
            }
            if !b.is_ascii_digit() {
                return Err(self.err(DecodeErrorKind::UnexpectedByte(b)));
            }
            if self.pos > digits_start && self.input[digits_start] == b'0' {
                return Err(DecodeError {
                    offset: digits_start,
                    kind: DecodeErrorKind::LeadingZero,
                });
            }
            let digit = (b - b'0') as i64;
            value = value
                .checked_mul(10)
                .and_then(|v| if negative { v.checked_sub(digit) } else { v.checked_add(digit) })
                .ok_or(DecodeError {
                    offset: start,
                    kind: DecodeErrorKind::IntegerOverflow,
                })?;
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(self.err(DecodeErrorKind::UnexpectedByte(terminator)));
        }
        if negative && value == 0 {
            return Err(DecodeError {
                offset: start,
                kind: DecodeErrorKind::NegativeZero,
            });
        }
        self.pos += 1;
        Ok(value)
    }

    fn byte_string(&mut self) -> Result<&'a [u8], DecodeError> {
        let len_at = self.pos;
        if self.peek()? == b'-' {
            return Err(self.err(DecodeErrorKind::UnexpectedByte(b'-')));
        }
        let len = self.integer(b':')?;
        let len = usize::try_from(len).map_err(|_| DecodeError {
            offset: len_at,
            kind: DecodeErrorKind::IntegerOverflow,
        })?;
        let end = self.pos.checked_add(len).filter(|&e| e <= self.input.len());
        match end {
            Some(end) => {
                let s = &self.input[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DecodeError {
                offset: len_at,
                kind: DecodeErrorKind::UnexpectedEnd,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dict(pairs: &[(&str, Bencode)]) -> Bencode {
        Bencode::Dict(
            pairs
                .iter()
                .map(|(k, v)| (k.as_bytes().to_vec(), v.clone()))
                .collect(),
        )
    }

    #[test]
    fn grammar_examples() {
        assert_eq!(Bencode::Int(42).encode(), b"i42e");
        assert_eq!(Bencode::Int(-1).encode(), b"i-1e");
        assert_eq!(Bencode::bytes("spam").encode(), b"4:spam");
        assert_eq!(dict(&[("cow", Bencode::bytes("moo"))]).encode(), b"d3:cow3:mooe");
        assert_eq!(
            Bencode::List(vec![Bencode::bytes("a"), Bencode::Int(0)]).encode(),
            b"l1:ai0ee"
        );
        assert_eq!(Bencode::decode(b"i0e").unwrap(), Bencode::Int(0));
        assert_eq!(Bencode::decode(b"0:").unwrap(), Bencode::bytes(""));
        assert_eq!(
            Bencode::decode(b"d1:ai1e1:bi2ee").unwrap(),
            dict(&[("a", Bencode::Int(1)), ("b", Bencode::Int(2))])
        );
    }

    #[test]
    fn rejects_non_canonical_input() {
        let kind = |b: &[u8]| Bencode::decode(b).unwrap_err().kind;
        assert_eq!(kind(b""), DecodeErrorKind::Empty);
        assert_eq!(kind(b"i03e"), DecodeErrorKind::LeadingZero);
        assert_eq!(kind(b"i-0e"), DecodeErrorKind::NegativeZero);
        assert_eq!(kind(b"ie"), DecodeErrorKind::UnexpectedByte(b'e'));
        assert_eq!(kind(b"i-e"), DecodeErrorKind::UnexpectedByte(b'e'));
        assert_eq!(kind(b"04:spam"), DecodeErrorKind::LeadingZero);
        assert_eq!(kind(b"4:spa"), DecodeErrorKind::UnexpectedEnd);
        assert_eq!(kind(b"i1ei2e"), DecodeErrorKind::TrailingBytes);
        assert_eq!(kind(b"d1:bi1e1:ai2ee"), DecodeErrorKind::UnsortedKey);
        assert_eq!(kind(b"d1:ai1e1:ai2ee"), DecodeErrorKind::DuplicateKey);
        assert_eq!(kind(b"di1ei2ee"), DecodeErrorKind::KeyNotString);
        assert_eq!(kind(b"l"), DecodeErrorKind::UnexpectedEnd);
        assert_eq!(kind(b"i99999999999999999999e"), DecodeErrorKind::IntegerOverflow);
        assert_eq!(kind(b"x"), DecodeErrorKind::UnexpectedByte(b'x'));
    }

    #[test]
    fn error_offsets_point_at_fault() {
        let e = Bencode::decode(b"d1:bi1e1:ai2ee").unwrap_err();
        assert_eq!(e.offset, 7);
        let e = Bencode::decode(b"i1ei2e").unwrap_err();
        assert_eq!(e.offset, 3);
    }

    #[test]
    fn deep_nesting_is_rejected_not_overflowed() {
        let mut input = vec![b'l'; 10_000];
        input.extend(vec![b'e'; 10_000]);
        assert_eq!(Bencode::decode(&input).unwrap_err().kind, DecodeErrorKind::TooDeep);
    }

    fn arb_bencode() -> impl Strategy<Value = Bencode> {
        let leaf = prop_oneof![
            any::<i64>().prop_map(Bencode::Int),
            proptest::collection::vec(any::<u8>(), 0..24).prop_map(Bencode::Bytes),
        ];
        leaf.prop_recursive(4, 64, 8, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..6).prop_map(Bencode::List),
                proptest::collection::btree_map(
                    proptest::collection::vec(any::<u8>(), 0..8),
                    inner,
                    0..6
                )
                .prop_map(Bencode::Dict),
            ]
        })
    }

    proptest! {
        #[test]
        fn round_trip(v in arb_bencode()) {
            let bytes = v.encode();
            let back = Bencode::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &v);
            prop_assert_eq!(back.encode(), bytes);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            if let Ok(v) = Bencode::decode(&bytes) {
                prop_assert_eq!(v.encode(), bytes);
            }
        }
    }
}
