//! Reversible word/digit tokenizer and the canonical number format.
//!
//! Text is segmented into words, single whitespace characters and single
//! numeric characters (`0-9`, `.`, `-`). A word directly followed by a space
//! and a number absorbs that space, so `"is 0.95"` becomes
//! `["is ", "0", ".", "9", "5"]` and the answer position sits on a token
//! boundary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PiernError, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<pad>"];
const NUMERIC_CHARS: &str = "0123456789.-";

/// Number of fractional digits in the canonical format.
pub const FRACTION_DIGITS: usize = 4;
/// Largest absolute error introduced by [`format_number`].
pub const QUANTIZATION_BOUND: f64 = 5e-5;
const FORMAT_LIMIT: f64 = 1e6;

pub fn is_numeric_char(c: char) -> bool {
    c.is_ascii_digit() || c == '.' || c == '-'
}

/// Splits text into token strings. Concatenating the pieces yields the input.
pub fn segment(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut iter = text.char_indices().peekable();
    while let Some((start, c)) = iter.next() {
        if is_numeric_char(c) || c.is_whitespace() {
            out.push(&text[start..start + c.len_utf8()]);
            continue;
        }
        let mut end = start + c.len_utf8();
        while let Some(&(i, n)) = iter.peek() {
            if is_numeric_char(n) || n.is_whitespace() {
                break;
            }
            end = i + n.len_utf8();
            iter.next();
        }
        let rest = &text[end..];
        let mut chars = rest.chars();
        if chars.next() == Some(' ') && chars.next().is_some_and(|n| n.is_ascii_digit() || n == '-') {
            end += 1;
            iter.next();
        }
        out.push(&text[start..end]);
    }
    out
}

fn is_word(tok: &str) -> bool {
    tok.chars().count() > 1 || tok.chars().all(|c| !is_numeric_char(c) && !c.is_whitespace())
}

/// The token ids that spell number literals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumberTokens {
    /// Digit value of each token id, `None` for non-digits.
    pub digits: Vec<Option<u8>>,
    pub point: Option<u32>,
}

impl NumberTokens {
    pub fn is_digit(&self, id: u32) -> bool {
        self.digit_value(id).is_some()
    }

    pub fn digit_value(&self, id: u32) -> Option<u8> {
        self.digits.get(id as usize).copied().flatten()
    }

    /// Positions holding the last digit of a number literal. A point joins
    /// two digit runs only when a digit follows it.
    pub fn number_ends(&self, ids: &[u32]) -> Vec<usize> {
        let digit = |i: usize| i < ids.len() && self.is_digit(ids[i]);
        let joins = |i: usize| self.point.is_some_and(|p| i < ids.len() && ids[i] == p) && digit(i + 1);
        (0..ids.len())
            .filter(|&t| digit(t) && !digit(t + 1) && !joins(t + 1))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus. Ids are assigned by first
    /// occurrence after the specials and the numeric characters; every
    /// character seen in the corpus also gets a single-character token.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(PiernError::Empty("vocabulary corpus"));
        }
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for s in SPECIALS {
            v.insert(s);
        }
        for c in NUMERIC_CHARS.chars() {
            v.insert(&c.to_string());
        }
        for text in corpus {
            for seg in segment(text.as_ref()) {
                v.insert(seg);
            }
        }
        for text in corpus {
            for c in text.as_ref().chars() {
                v.insert(&c.to_string());
            }
        }
        Ok(v)
    }

    fn insert(&mut self, tok: &str) {
        if !self.ids.contains_key(tok) {
            self.ids.insert(tok.to_string(), self.tokens.len() as u32);
            self.tokens.push(tok.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<u32> {
        self.ids.get(tok).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Count of multi-character or non-numeric word tokens (excludes specials).
    pub fn word_count(&self) -> usize {
        self.tokens[SPECIALS.len()..].iter().filter(|t| is_word(t)).count()
    }

    pub fn is_digit_token(&self, id: u32) -> bool {
        self.token(id).is_some_and(|t| t.len() == 1 && t.as_bytes()[0].is_ascii_digit())
    }

    pub fn number_tokens(&self) -> NumberTokens {
        NumberTokens {
            digits: (0..self.len() as u32)
                .map(|i| self.is_digit_token(i).then(|| self.tokens[i as usize].as_bytes()[0] - b'0'))
                .collect(),
            point: self.id("."),
        }
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for seg in segment(text) {
            if let Some(id) = self.id(seg) {
                out.push(id);
                continue;
            }
            for c in seg.chars() {
                let id = self
                    .id(c.encode_utf8(&mut [0; 4]))
                    .ok_or_else(|| PiernError::Tokenizer(format!("character {c:?} not in vocabulary")))?;
                out.push(id);
            }
        }
        Ok(out)
    }

    /// Leading tokens of `encode(text)` that spell exactly `text[..end]`, or
    /// `None` when `end` falls inside a token.
    pub fn encode_prefix(&self, text: &str, end: usize) -> Result<Option<Vec<u32>>> {
        let ids = self.encode(text)?;
        let mut len = 0;
        for (i, &id) in ids.iter().enumerate() {
            if len == end {
                return Ok(Some(ids[..i].to_vec()));
            }
            len += self.token(id).map_or(0, str::len);
            if len > end {
                return Ok(None);
            }
        }
        Ok((len == end).then_some(ids))
    }

    /// Concatenates token strings; special tokens render as nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| PiernError::Tokenizer(format!("id {id} out of range ({})", self.len())))?;
            if !Self::is_special(id) {
                s.push_str(tok);
            }
        }
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, u32> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(s)?;
        let mut tokens = vec![None; map.len()];
        for (t, &id) in &map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| PiernError::Tokenizer(format!("id {id} out of range")))?;
            if slot.is_some() {
                return Err(PiernError::Tokenizer(format!("duplicate id {id}")));
            }
            *slot = Some(t.clone());
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("ids are dense")).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(PiernError::Tokenizer(format!("special {s} must have id {i}")));
            }
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Self { tokens, ids })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let json = self.to_json()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| PiernError::io(dir, e))?;
        }
        fs::write(path, &json).map_err(|e| PiernError::io(path, e))?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| PiernError::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn hash(&self) -> String {
        let json = self.to_json().expect("vocabulary serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Renders `x` with exactly four fractional digits.
///
/// Rounding is half-to-even on the shortest decimal representation of `x`,
/// so `0.97365` renders as `"0.9736"`. Negative zero renders without a sign.
pub fn format_number(x: f64) -> Result<String> {
    if !x.is_finite() {
        return Err(PiernError::NonFinite("format_number"));
    }
    if x.abs() >= FORMAT_LIMIT {
        return Err(PiernError::OutOfRange(format!("|{x}| >= {FORMAT_LIMIT}")));
    }
    let shortest = format!("{}", x.abs());
    let (int_part, frac_part) = shortest.split_once('.').unwrap_or((&shortest, ""));
    let mut kept: u64 = int_part.parse::<u64>().expect("digits");
    let frac_bytes = frac_part.as_bytes();
    for i in 0..FRACTION_DIGITS {
        let d = frac_bytes.get(i).map_or(0, |b| (b - b'0') as u64);
        kept = kept * 10 + d;
    }
    let rest = frac_bytes.get(FRACTION_DIGITS..).unwrap_or(&[]);
    let round_up = match rest.first() {
        None => false,
        Some(&b) if b > b'5' => true,
        Some(&b) if b < b'5' => false,
        Some(_) => {
            let exact_tie = rest[1..].iter().all(|&b| b == b'0');
            !exact_tie || kept % 2 == 1
        }
    };
    if round_up {
        kept += 1;
    }
    let scale = 10u64.pow(FRACTION_DIGITS as u32);
    let sign = if x < 0.0 && kept != 0 { "-" } else { "" };
    Ok(format!(
        "{sign}{}.{:0width$}",
        kept / scale,
        kept % scale,
        width = FRACTION_DIGITS
    ))
}

/// True for strings matching `-?[0-9]+\.[0-9]{4}`.
pub fn is_canonical(s: &str) -> bool {
    let body = s.strip_prefix('-').unwrap_or(s);
    match body.split_once('.') {
        Some((i, f)) => {
            !i.is_empty()
                && i.bytes().all(|b| b.is_ascii_digit())
                && f.len() == FRACTION_DIGITS
                && f.bytes().all(|b| b.is_ascii_digit())
        }
        None => false,
    }
}

pub fn parse_number(s: &str) -> Result<f64> {
    if !is_canonical(s) {
        return Err(PiernError::Tokenizer(format!("not a canonical number: {s:?}")));
    }
    s.parse::<f64>().map_err(|e| PiernError::Tokenizer(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_and_word_count() {
        let v = Vocabulary::build(&["a b a"]).unwrap();
        assert_eq!((v.id("<bos>"), v.id("<eos>"), v.id("<pad>")), (Some(BOS), Some(EOS), Some(PAD)));
        assert_eq!(v.word_count(), 2);
        for c in NUMERIC_CHARS.chars() {
            assert!(v.id(&c.to_string()).is_some());
        }
    }

    #[test]
    fn deterministic_json() {
        let corpus = ["The battery health is 0.9500, which is good."];
        let a = Vocabulary::build(&corpus).unwrap().to_json().unwrap();
        let b = Vocabulary::build(&corpus).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let v = Vocabulary::from_json(&a).unwrap();
        assert_eq!(v, Vocabulary::build(&corpus).unwrap());
    }

    #[test]
    fn numbers_are_digit_level() {
        let v = Vocabulary::build(&["health is 0.9500"]).unwrap();
        let ids = v.encode("0.95").unwrap();
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, ["0", ".", "9", "5"]);
        assert_eq!(v.encode("").unwrap(), Vec::<u32>::new());
        let toks: Vec<&str> = segment("The battery health is 0.9500, which");
        assert_eq!(toks, ["The", " ", "battery", " ", "health", " ", "is ", "0", ".", "9", "5", "0", "0", ",", " ", "which"]);
    }

    #[test]
    fn number_ends_skip_inner_points() {
        let v = Vocabulary::build(&["a -0.5 and 12. b"]).unwrap();
        let ids = v.encode("a -0.5 and 12. b 7").unwrap();
        let ends: Vec<&str> = v
            .number_tokens()
            .number_ends(&ids)
            .iter()
            .map(|&p| v.token(ids[p]).unwrap())
            .collect();
        assert_eq!(ends, ["5", "2", "7"]);
    }

    #[test]
    fn decode_rejects_bad_ids() {
        let v = Vocabulary::build(&["x"]).unwrap();
        assert!(matches!(v.decode(&[999]), Err(PiernError::Tokenizer(_))));
        assert!(v.encode("€").is_err());
    }

    #[test]
    fn format_examples() {
        assert_eq!(format_number(0.95).unwrap(), "0.9500");
        assert_eq!(format_number(-6.0 + 10.0).unwrap(), "4.0000");
        assert_eq!(format_number(0.97365).unwrap(), "0.9736");
        assert_eq!(format_number(0.97375).unwrap(), "0.9738");
        assert_eq!(format_number(-6.0).unwrap(), "-6.0000");
        assert_eq!(format_number(-0.00001).unwrap(), "0.0000");
        assert_eq!(format_number(0.99996).unwrap(), "1.0000");
        assert_eq!(format_number(1e-7).unwrap(), "0.0000");
        assert!(format_number(f64::NAN).is_err());
        assert!(format_number(2e6).is_err());
    }

    #[test]
    fn canonical_parse() {
        assert_eq!(parse_number("-1.2345").unwrap(), -1.2345);
        assert!(parse_number("1.23").is_err());
        assert!(parse_number("1.23456").is_err());
        assert!(parse_number(".1234").is_err());
    }

    proptest! {
        #[test]
        fn format_is_idempotent_and_bounded(x in -999_999.0f64..999_999.0) {
            let s = format_number(x).unwrap();
            let back = parse_number(&s).unwrap();
            prop_assert_eq!(format_number(back).unwrap(), s);
            prop_assert!((back - x).abs() <= QUANTIZATION_BOUND * (1.0 + 1e-9));
        }

        #[test]
        fn round_trip_text(words in proptest::collection::vec("[a-z]{1,6}|-?[0-9]{1,3}\\.[0-9]{4}", 1..12)) {
            let text = words.join(" ");
            let v = Vocabulary::build(&[text.as_str()]).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&text).unwrap()).unwrap(), text);
        }
    }
}
