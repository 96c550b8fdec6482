use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Normalized probability map over token ids. An empty map means "no evidence".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    probs: BTreeMap<TokenId, f64>,
}

impl TokenDistribution {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Sum weights per token and normalize. Zero total mass yields the empty distribution.
    pub fn from_weights<I>(weights: I) -> Result<Self>
    where
        I: IntoIterator<Item = (TokenId, f64)>,
    {
        let mut probs: BTreeMap<TokenId, f64> = BTreeMap::new();
        for (token, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "weight {w} for token {token} is not a finite non-negative number"
                )));
            }
            *probs.entry(token).or_default() += w;
        }
        let total: f64 = probs.values().sum();
        if total <= 0.0 {
            return Ok(Self::empty());
        }
        probs.retain(|_, p| *p > 0.0);
        probs.values_mut().for_each(|p| *p /= total);
        Ok(Self { probs })
    }

    /// Uniform distribution over `tokens`.
    pub fn uniform(tokens: &[TokenId]) -> Self {
        let p = 1.0 / tokens.len() as f64;
        Self {
            probs: tokens.iter().map(|t| (*t, p)).collect(),
        }
    }

    pub(crate) fn from_raw(probs: BTreeMap<TokenId, f64>) -> Self {
        Self { probs }
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn get(&self, token: TokenId) -> f64 {
        self.probs.get(&token).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.probs.iter().map(|(t, p)| (*t, *p))
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    /// Keep only `allowed` tokens and renormalize.
    pub fn restrict(&self, allowed: &BTreeSet<TokenId>) -> Self {
        Self::from_weights(self.iter().filter(|(t, _)| allowed.contains(t)))
            .expect("probabilities are finite and non-negative")
    }

    /// Tokens by descending probability, ties by ascending token id.
    pub fn ranked(&self) -> Vec<(TokenId, f64)> {
        let mut out: Vec<(TokenId, f64)> = self.iter().collect();
        sort_ranking(&mut out);
        out
    }
}

pub(crate) fn sort_ranking(entries: &mut [(TokenId, f64)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_duplicate_tokens() {
        let d = TokenDistribution::from_weights([(1, 1.0), (2, 1.0), (1, 2.0)]).unwrap();
        assert_eq!(d.get(1), 0.75);
        assert_eq!(d.get(2), 0.25);
        assert_eq!(d.get(3), 0.0);
    }

    #[test]
    fn zero_mass_is_empty() {
        assert!(TokenDistribution::from_weights([(1, 0.0)])
            .unwrap()
            .is_empty());
        assert!(TokenDistribution::from_weights([(1, f64::NAN)]).is_err());
        assert!(TokenDistribution::from_weights([(1, -1.0)]).is_err());
    }

    #[test]
    fn restrict_renormalizes() {
        let d = TokenDistribution::from_weights([(1, 0.5), (2, 0.25), (3, 0.25)]).unwrap();
        let r = d.restrict(&[2, 3].into_iter().collect());
        assert_eq!(r.get(2), 0.5);
        assert_eq!(r.get(1), 0.0);
        assert!(d.restrict(&[9].into_iter().collect()).is_empty());
    }

    #[test]
    fn ranking_breaks_ties_by_token_id() {
        let d = TokenDistribution::uniform(&[5, 2, 9]);
        let ids: Vec<TokenId> = d.ranked().into_iter().map(|(t, _)| t).collect();
        assert_eq!(ids, vec![2, 5, 9]);
    }
}
