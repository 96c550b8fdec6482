use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, tokenize, MASK_TOKEN};
use crate::error::{Error, Result};

/// A cloze question with exactly one mask token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeQuery {
    pub id: String,
    /// Normalized tokens; exactly one equals [`MASK_TOKEN`].
    pub tokens: Vec<String>,
    pub subject: Option<String>,
    pub relation: Option<String>,
    /// Normalized gold answer.
    pub gold: Option<String>,
}

impl ClozeQuery {
    /// Normalize and tokenize `text`; `[MASK]` in any case marks the blank.
    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self> {
        let tokens = tokenize(&normalize(text));
        let masks = tokens.iter().filter(|t| *t == MASK_TOKEN).count();
        if masks != 1 {
            return Err(Error::InvalidQuery(format!(
                "expected exactly one [MASK] in {text:?}, found {masks}"
            )));
        }
        Ok(Self {
            id: id.into(),
            tokens,
            subject: None,
            relation: None,
            gold: None,
        })
    }

    pub fn with_subject(mut self, subject: &str) -> Self {
        let subject = normalize(subject);
        self.subject = (!subject.is_empty()).then_some(subject);
        self
    }

    pub fn with_relation(mut self, relation: impl Into<String>) -> Self {
        self.relation = Some(relation.into());
        self
    }

    pub fn with_gold(mut self, gold: &str) -> Self {
        self.gold = Some(normalize(gold));
        self
    }

    pub fn mask_position(&self) -> usize {
        self.tokens
            .iter()
            .position(|t| t == MASK_TOKEN)
            .expect("constructed with exactly one mask")
    }

    pub fn token_refs(&self) -> Vec<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_finds_single_mask() {
        let q = ClozeQuery::parse("q", "[MASK] wrote 'Ulysses'.").unwrap();
        assert_eq!(q.mask_position(), 0);
        assert_eq!(q.tokens[1], "wrote");
        assert!(ClozeQuery::parse("q", "no mask here").is_err());
        assert!(ClozeQuery::parse("q", "[MASK] and [MASK]").is_err());
    }

    #[test]
    fn subject_and_gold_are_normalized() {
        let q = ClozeQuery::parse("q", "Ivo Tarsen was born in [MASK].")
            .unwrap()
            .with_subject("Ivo  Tarsen")
            .with_gold("Stockholm");
        assert_eq!(q.subject.as_deref(), Some("ivo tarsen"));
        assert_eq!(q.gold.as_deref(), Some("stockholm"));
        assert_eq!(q.text(), "ivo tarsen was born in [mask] .");
    }
}
