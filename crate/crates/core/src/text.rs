//! Bag-of-tokens instruction matching.

use std::collections::BTreeMap;

/// Lowercase, alphanumeric tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokens(text).collect::<Vec<_>>().join(" ")
}

pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BagOfTokens {
    counts: BTreeMap<String, f64>,
    norm: f64,
}

impl BagOfTokens {
    pub fn new(text: &str) -> Self {
        let mut counts = BTreeMap::new();
        for t in tokens(text) {
            *counts.entry(t).or_insert(0.0) += 1.0;
        }
        let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
        Self { counts, norm }
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let (small, large) = if self.counts.len() <= other.counts.len() {
            (self, other)
        } else {
            (other, self)
        };
        let dot: f64 = small
            .counts
            .iter()
            .filter_map(|(t, c)| large.counts.get(t).map(|d| c * d))
            .sum();
        dot / (self.norm * other.norm)
    }
}
