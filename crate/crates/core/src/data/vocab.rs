use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NULL: usize = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<null>"];

/// Token ↔ id bijection; ids are contiguous and the specials occupy 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("specials are unique")
    }
}

impl Vocab {
    /// Specials followed by `extra` in the given order.
    pub fn from_tokens<S: Into<String>>(extra: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(extra.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Frequency-ordered (descending, ties broken lexicographically) ids after
    /// the specials.
    pub fn build<'a, I, S>(sentences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s.as_ref() {
                if !SPECIALS.contains(&t.as_str()) {
                    *freq.entry(t.as_str()).or_insert(0) += 1;
                }
            }
        }
        if freq.is_empty() {
            return Err(Error::contract("cannot build a vocabulary from empty input"));
        }
        let mut entries: Vec<(&str, usize)> = freq.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Maps unknown tokens to UNK.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect()
    }

    /// Rejects unknown tokens.
    pub fn encode_strict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::Vocab(format!("unknown token {:?}", t.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&i| self.token(i).ok_or_else(|| Error::Vocab(format!("id {i} outside vocabulary of {}", self.len()))))
            .collect()
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::Vocab(format!("id {id} outside vocabulary of {}", self.len())))
        }
    }

    /// One token per line, in id order (specials included).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        super::corpus::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Vocab(format!("{}: missing reserved tokens", path.display())));
        }
        Self::from_tokens(lines[SPECIALS.len()..].iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn specials_are_fixed() {
        let v = Vocab::default();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<s>"), Some(BOS));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<null>"), Some(NULL));
    }

    #[test]
    fn build_orders_by_frequency() {
        let corpus = vec![toks("b a"), toks("a c")];
        let v = Vocab::build(&corpus).unwrap();
        assert_eq!(v.decode(&[5, 6, 7]).unwrap(), vec!["a", "b", "c"]);
        assert_eq!(v, Vocab::build(&corpus).unwrap());
    }

    #[test]
    fn two_token_corpus() {
        let v = Vocab::build(&[toks("x y")]).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.encode(&["x", "zzz"]), vec![v.id("x").unwrap(), UNK]);
        assert!(v.encode_strict(&["zzz"]).is_err());
    }

    #[test]
    fn empty_input_is_rejected() {
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert!(matches!(Vocab::build(&empty), Err(Error::Contract(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(&[toks("p q r q")]).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }
}
