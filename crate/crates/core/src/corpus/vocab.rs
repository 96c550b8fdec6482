use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::text::normalize;
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Bijection between token ids `[0, len)` and canonical surface forms.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, surface: &str) -> Option<TokenId> {
        self.lookup.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, s)| (i as TokenId, s.as_str()))
    }

    /// Id for `surface`, assigning the next free id if it is new.
    pub(crate) fn intern(&mut self, surface: &str) -> TokenId {
        if let Some(id) = self.lookup.get(surface) {
            return *id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(surface.to_string());
        self.lookup.insert(surface.to_string(), id);
        id
    }

    pub fn from_surfaces<I, S>(surfaces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary::new();
        for (line, surface) in surfaces.into_iter().enumerate() {
            let surface = surface.as_ref();
            if surface.is_empty()
                || surface.contains(char::is_whitespace)
                || normalize(surface) != surface
            {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary entry {line} ({surface:?}) is not a canonical token"
                )));
            }
            if vocab.get(surface).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary entry {line} ({surface:?}) is a duplicate"
                )));
            }
            vocab.intern(surface);
        }
        Ok(vocab)
    }

    /// One surface form per line, line number = token id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for token in &self.tokens {
            out.push_str(token);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_surfaces(text.lines())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intern_is_stable() {
        let mut v = Vocabulary::new();
        assert_eq!(v.intern("a"), 0);
        assert_eq!(v.intern("b"), 1);
        assert_eq!(v.intern("a"), 0);
        assert_eq!(v.surface(1), Some("b"));
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn rejects_non_canonical_entries() {
        assert!(Vocabulary::from_surfaces(["Upper"]).is_err());
        assert!(Vocabulary::from_surfaces(["two words"]).is_err());
        assert!(Vocabulary::from_surfaces(["a", "a"]).is_err());
        assert!(Vocabulary::from_surfaces([""]).is_err());
    }

    #[test]
    fn text_round_trip_is_byte_identical() {
        let v = Vocabulary::from_surfaces(["ivo", "tarsen", ".", "stockholm"]).unwrap();
        let text = v.to_text();
        let back = Vocabulary::from_surfaces(text.lines()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
    }
}
