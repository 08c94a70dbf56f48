//! Symbol-level tokenizer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered set of atomic symbols plus the three control tokens. Token ids
/// are indices into the symbol table; `detokenize(tokenize(s)) == s` for any
/// string over the symbol set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<char>,
    bos_id: u32,
    eos_id: u32,
    pad_id: u32,
    #[serde(skip)]
    lookup: HashMap<char, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary over a small character set. Control tokens occupy
    /// ids 0..3 and carry no characters; symbols start at id 3.
    pub fn from_symbols(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut seen = Vec::new();
        for s in symbols {
            if seen.contains(&s) {
                return Err(Error::Config(format!("duplicate vocabulary symbol {s:?}")));
            }
            seen.push(s);
        }
        if seen.is_empty() {
            return Err(Error::Config("vocabulary needs at least one symbol".into()));
        }
        let mut v = Self {
            symbols: seen,
            bos_id: 0,
            eos_id: 1,
            pad_id: 2,
            lookup: HashMap::new(),
        };
        v.rebuild_lookup();
        Ok(v)
    }

    /// Byte-level vocabulary: ids 0..=255 are the byte values, control tokens
    /// sit above them.
    pub fn byte_level() -> Self {
        let mut v = Self {
            symbols: (0u8..=255).map(char::from).collect(),
            bos_id: 256,
            eos_id: 257,
            pad_id: 258,
            lookup: HashMap::new(),
        };
        v.rebuild_lookup();
        v
    }

    fn rebuild_lookup(&mut self) {
        let base = self.symbol_base();
        self.lookup = self
            .symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + base) as u32))
            .collect();
    }

    /// Id of the first symbol token.
    fn symbol_base(&self) -> usize {
        if self.bos_id == 0 {
            3
        } else {
            0
        }
    }

    pub fn size(&self) -> usize {
        self.symbols.len() + 3
    }

    pub fn bos(&self) -> u32 {
        self.bos_id
    }

    pub fn eos(&self) -> u32 {
        self.eos_id
    }

    pub fn pad(&self) -> u32 {
        self.pad_id
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .enumerate()
            .map(|(position, c)| {
                self.lookup
                    .get(&c)
                    .copied()
                    .ok_or(Error::UnknownSymbol { symbol: c, position })
            })
            .collect()
    }

    pub fn detokenize(&self, tokens: &[u32]) -> Result<String> {
        let base = self.symbol_base() as u32;
        tokens
            .iter()
            .map(|&id| {
                if id == self.bos_id || id == self.eos_id || id == self.pad_id {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab_size: self.size(),
                    });
                }
                self.symbols
                    .get((id.checked_sub(base).ok_or(Error::TokenOutOfRange {
                        id,
                        vocab_size: self.size(),
                    })?) as usize)
                    .copied()
                    .ok_or(Error::TokenOutOfRange {
                        id,
                        vocab_size: self.size(),
                    })
            })
            .collect()
    }

    /// Prompt tokens as fed to the model: BOS, the text symbols, then EOS as
    /// the respond-now cue separating prompt from response.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<u32>> {
        let mut toks = vec![self.bos_id];
        toks.extend(self.tokenize(text)?);
        toks.push(self.eos_id);
        Ok(toks)
    }

    /// Response tokens as fed to the model: the text symbols plus EOS, so
    /// every response scores at least one token.
    pub fn encode_response(&self, text: &str) -> Result<Vec<u32>> {
        let mut toks = self.tokenize(text)?;
        toks.push(self.eos_id);
        Ok(toks)
    }
}

// Deserialized vocabularies need their lookup table rebuilt.
impl Vocabulary {
    pub fn after_deserialize(mut self) -> Self {
        self.rebuild_lookup();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_level_identity() {
        let v = Vocabulary::byte_level();
        let toks = v.tokenize("ab").unwrap();
        assert_eq!(toks, vec![97, 98]);
        assert_eq!(v.detokenize(&toks).unwrap(), "ab");
    }

    #[test]
    fn empty_string_empty_tokens() {
        let v = Vocabulary::from_symbols("abc".chars()).unwrap();
        assert!(v.tokenize("").unwrap().is_empty());
        assert_eq!(v.detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn unknown_symbol_names_position() {
        let v = Vocabulary::from_symbols("abc".chars()).unwrap();
        match v.tokenize("abxc") {
            Err(Error::UnknownSymbol { symbol, position }) => {
                assert_eq!(symbol, 'x');
                assert_eq!(position, 2);
            }
            other => panic!("expected unknown-symbol error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_over_symbol_set() {
        let v = Vocabulary::from_symbols("xyz=".chars()).unwrap();
        for s in ["", "x", "zzz=xy", "====", "yxz"] {
            assert_eq!(v.detokenize(&v.tokenize(s).unwrap()).unwrap(), s);
        }
    }

    #[test]
    fn control_ids_distinct_and_reserved() {
        let v = Vocabulary::from_symbols("ab".chars()).unwrap();
        assert_eq!(
            3,
            [v.bos(), v.eos(), v.pad()]
                .iter()
                .collect::<std::collections::HashSet<_>>()
                .len()
        );
        assert!(v.detokenize(&[v.bos()]).is_err());
        assert_eq!(v.size(), 5);
    }

    #[test]
    fn prompt_and_response_encoding() {
        let v = Vocabulary::from_symbols("ab".chars()).unwrap();
        assert_eq!(v.encode_prompt("ab").unwrap(), vec![v.bos(), 3, 4, v.eos()]);
        assert_eq!(v.encode_response("a").unwrap(), vec![3, v.eos()]);
        assert_eq!(v.encode_response("").unwrap(), vec![v.eos()]);
    }
}
