//! Fuzzy-k probability features: the probabilities of the k tokens most
//! similar to each verbalized label.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Backend, TokenId, VocabDistribution};
use crate::data::{FeatureKind, FeatureVector};
use crate::error::{Error, Result};

/// How the per-label neighborhoods were ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectorSource {
    /// Cosine similarity of output-embedding rows.
    Cosine,
    /// Mean probability at the answer cue over residual samples of the label.
    MeanProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyKSelector {
    pub k: usize,
    pub source: SelectorSource,
    /// Ranked token ids per label; each list starts with the label's own token.
    pub per_label: Vec<Vec<TokenId>>,
    /// Deduplicated union in label order; this is the feature layout.
    pub tokens: Vec<TokenId>,
}

impl FuzzyKSelector {
    fn assemble(k: usize, source: SelectorSource, per_label: Vec<Vec<TokenId>>) -> Self {
        let mut seen = HashSet::new();
        let tokens = per_label
            .iter()
            .flatten()
            .copied()
            .filter(|t| seen.insert(*t))
            .collect();
        FuzzyKSelector {
            k,
            source,
            per_label,
            tokens,
        }
    }

    pub fn dim(&self) -> usize {
        self.tokens.len()
    }

    /// Ranks every embedding row by cosine similarity to each label's row.
    /// Ties go to the smaller token id; the label token itself is always first.
    pub fn from_embeddings(table: &[(TokenId, Vec<f32>)], labels: &[TokenId], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("fuzzy k must be positive".into()));
        }
        let norms: Vec<f64> = table
            .iter()
            .map(|(_, row)| row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .collect();
        let mut per_label = Vec::with_capacity(labels.len());
        for &label in labels {
            let li = table
                .iter()
                .position(|(id, _)| *id == label)
                .ok_or_else(|| Error::InvalidData(format!("label token {label:?} has no embedding row")))?;
            let lrow = &table[li].1;
            let mut scored: Vec<(TokenId, f64)> = table
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != li)
                .map(|(i, (id, row))| {
                    let dot: f64 = row.iter().zip(lrow).map(|(&a, &b)| a as f64 * b as f64).sum();
                    let denom = norms[i] * norms[li];
                    (*id, if denom > 0.0 { dot / denom } else { 0.0 })
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            let mut ranked = vec![label];
            ranked.extend(scored.into_iter().take(k - 1).map(|(id, _)| id));
            per_label.push(ranked);
        }
        Ok(Self::assemble(k, SelectorSource::Cosine, per_label))
    }

    /// Black-box fallback: ranks tokens by their mean probability over the
    /// residual samples carrying each label.
    pub fn from_mean_probability(residual: &[(&VocabDistribution, usize)], labels: &[TokenId], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("fuzzy k must be positive".into()));
        }
        let mut per_label = Vec::with_capacity(labels.len());
        for (class, &label) in labels.iter().enumerate() {
            let mut members: Vec<&VocabDistribution> =
                residual.iter().filter(|(_, y)| *y == class).map(|(d, _)| *d).collect();
            if members.is_empty() {
                members = residual.iter().map(|(d, _)| *d).collect();
            }
            let mut mass: BTreeMap<TokenId, f64> = BTreeMap::new();
            for d in &members {
                for e in d.entries() {
                    *mass.entry(e.id).or_default() += e.prob;
                }
            }
            let n = members.len().max(1) as f64;
            let mut scored: Vec<(TokenId, f64)> = mass
                .into_iter()
                .filter(|(id, _)| *id != label)
                .map(|(id, m)| (id, m / n))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            let mut ranked = vec![label];
            ranked.extend(scored.into_iter().take(k - 1).map(|(id, _)| id));
            per_label.push(ranked);
        }
        Ok(Self::assemble(k, SelectorSource::MeanProbability, per_label))
    }
}

/// Builds a selector from the backend's output embeddings.
pub fn build_fuzzy_selector(backend: &dyn Backend, labels: &[TokenId], k: usize) -> Result<FuzzyKSelector> {
    let table = backend.token_embeddings()?;
    FuzzyKSelector::from_embeddings(&table, labels, k)
}

/// Projects a distribution onto the selector's tokens; absent tokens give 0.
pub fn featurize(selector: &FuzzyKSelector, dist: &VocabDistribution) -> FeatureVector {
    let values = selector
        .tokens
        .iter()
        .map(|&t| (dist.prob(t) as f32).clamp(0.0, 1.0))
        .collect();
    FeatureVector::new(values, FeatureKind::FuzzyK(selector.k)).expect("probabilities are finite and in [0, 1]")
}
