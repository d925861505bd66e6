//! Word-level tokenization, vocabulary and answer normalization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const INST_OPEN: &str = "<INST>";
pub const INST_CLOSE: &str = "</INST>";

/// Special tokens in id order. They always occupy ids `0..SPECIALS.len()`.
pub const SPECIALS: [&str; 5] = [PAD, BOS, EOS, INST_OPEN, INST_CLOSE];

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const INST_OPEN_ID: u32 = 3;
pub const INST_CLOSE_ID: u32 = 4;

/// Splits text into word-level tokens. Whitespace separates tokens and every
/// ASCII punctuation character becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = 0;
        for (i, ch) in word.char_indices() {
            if ch.is_ascii_punctuation() {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + ch.len_utf8()]);
                start = i + ch.len_utf8();
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

/// Canonical whitespace form of a text: its tokens joined by single spaces.
pub fn canonicalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrap {
    None,
    Instruction,
}

/// Encoded ids with per-position supervision and corruption flags.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub corruption_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        let n = ids.len();
        Self {
            ids,
            loss_mask: vec![0; n],
            corruption_mask: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocab {
    /// Builds a vocabulary over every surface token of `texts`.
    ///
    /// Content ids are assigned by descending frequency, ties broken
    /// lexicographically, after the fixed special tokens.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut content: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .collect();
        content.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(content.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("freshly built vocab is valid")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len()
            || tokens.iter().zip(SPECIALS.iter()).any(|(a, b)| a != b)
        {
            return Err(Error::Parse {
                location: "vocab[0..5]".into(),
                message: format!("special tokens must come first: {SPECIALS:?}"),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocab token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// First id usable as a content (non-special) token.
    pub fn first_content_id(&self) -> u32 {
        SPECIALS.len() as u32
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len() - SPECIALS.len()
    }

    /// Encodes words only, without any specials.
    pub fn encode_ids(&self, text: &str) -> Result<Vec<u32>> {
        tokenize(text)
            .into_iter()
            .map(|t| {
                self.id(t)
                    .filter(|&id| !Self::is_special(id))
                    .ok_or_else(|| Error::UnknownToken(t.to_string()))
            })
            .collect()
    }

    pub fn encode(&self, text: &str, wrap: Wrap) -> Result<TokenSequence> {
        let body = self.encode_ids(text)?;
        let ids = match wrap {
            Wrap::None => body,
            Wrap::Instruction => {
                let mut ids = Vec::with_capacity(body.len() + 2);
                ids.push(INST_OPEN_ID);
                ids.extend(body);
                ids.push(INST_CLOSE_ID);
                ids
            }
        };
        Ok(TokenSequence::new(ids))
    }

    /// Decodes ids to text, dropping special tokens and unknown ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.tokens)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
        Self::from_tokens(tokens)
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Self::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// SQuAD-style answer normalization: lowercase, drop ASCII punctuation,
/// drop the articles `a`, `an`, `the`, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();

    // Article removal honours word boundaries the way `\b(a|an|the)\b` does.
    let chars: Vec<char> = no_punct.chars().collect();
    let mut stripped = String::with_capacity(no_punct.len());
    let mut i = 0;
    while i < chars.len() {
        if !is_word_char(chars[i]) {
            stripped.push(chars[i]);
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && is_word_char(chars[i]) {
            i += 1;
        }
        let word: String = chars[start..i].iter().collect();
        if matches!(word.as_str(), "a" | "an" | "the") {
            stripped.push(' ');
        } else {
            stripped.push_str(&word);
        }
    }
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(tokenize("born in paris."), vec!["born", "in", "paris", "."]);
        assert_eq!(tokenize("  a,b  "), vec!["a", ",", "b"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tiny_vocab_has_specials_first() {
        let v = Vocab::build(["a b", "b"]);
        assert_eq!(v.len(), 2 + 5);
        assert_eq!(v.token(5), Some("b"));
        assert_eq!(v.token(6), Some("a"));
        assert_eq!(v.id(INST_OPEN), Some(INST_OPEN_ID));
    }

    #[test]
    fn build_is_deterministic() {
        let texts = ["alice was born on may 1", "bob was born in paris .", "may"];
        assert_eq!(Vocab::build(texts), Vocab::build(texts));
    }

    #[test]
    fn round_trip_modulo_whitespace() {
        let text = "alice  was born on   may 1";
        let v = Vocab::build([text]);
        let seq = v.encode(text, Wrap::None).unwrap();
        assert_eq!(v.decode(&seq.ids), "alice was born on may 1");
        for id in v.first_content_id()..v.len() as u32 {
            let s = v.decode(&[id]);
            assert_eq!(v.encode_ids(&s).unwrap(), vec![id]);
        }
    }

    #[test]
    fn instruction_wrap() {
        let v = Vocab::build(["when was alice born ?"]);
        let seq = v.encode("when was alice born ?", Wrap::Instruction).unwrap();
        assert_eq!(seq.ids[0], INST_OPEN_ID);
        assert_eq!(*seq.ids.last().unwrap(), INST_CLOSE_ID);
        assert_eq!(seq.loss_mask.len(), seq.ids.len());
        assert_eq!(v.decode(&seq.ids), "when was alice born ?");
    }

    #[test]
    fn unknown_token_is_named() {
        let v = Vocab::build(["alice"]);
        match v.encode("alice zzz", Wrap::None) {
            Err(Error::UnknownToken(t)) => assert_eq!(t, "zzz"),
            other => panic!("unexpected {other:?}"),
        }
        // special spellings are not content tokens
        assert!(v.encode_ids("<eos>").is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_answer("The Beatles."), "beatles");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  An  apple a day "), "apple day");
        assert_eq!(normalize_answer("theatre"), "theatre");
    }

    #[test]
    fn vocab_file_rejects_missing_specials() {
        let err = Vocab::from_tokens(vec!["x".into()]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }
}
