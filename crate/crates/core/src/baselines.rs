//! Baselines scored from next-token distributions: direct verbalizer
//! scoring, KL-nearest-neighbour voting, and interpolation of the two.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{TokenId, VocabDistribution};

/// Smoothing mass added to every token of the union support before KL.
pub const KL_EPSILON: f64 = 1e-12;

/// Label probabilities read off the verbalizer tokens and renormalized.
/// Absent tokens count as zero.
pub fn icl_predict(dist: &VocabDistribution, label_tokens: &[TokenId]) -> Result<Vec<f64>> {
    let raw: Vec<f64> = label_tokens.iter().map(|&t| dist.prob(t)).collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllLabelsUnsupported);
    }
    Ok(raw.into_iter().map(|p| p / total).collect())
}

/// `D(p‖q)` over two dense vectors after ε-smoothing and renormalization.
pub fn kl_dense(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "kl_dense needs equal lengths");
    let n = p.len() as f64;
    let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
    let zp = sp + n * KL_EPSILON;
    let zq = sq + n * KL_EPSILON;
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = (a + KL_EPSILON) / zp;
            let b = (b + KL_EPSILON) / zq;
            a * (a / b).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// `D(p‖q)` over the union of both supports, after adding ε to every entry
/// and renormalizing.
pub fn kl_divergence(p: &VocabDistribution, q: &VocabDistribution) -> f64 {
    let (a, b) = (p.entries(), q.entries());
    let (mut i, mut j) = (0, 0);
    let mut pairs = Vec::with_capacity(a.len().max(b.len()));
    while i < a.len() || j < b.len() {
        let ka = a.get(i).map(|e| e.id);
        let kb = b.get(j).map(|e| e.id);
        match (ka, kb) {
            (Some(x), Some(y)) if x == y => {
                pairs.push((a[i].prob, b[j].prob));
                i += 1;
                j += 1;
            }
            (Some(x), Some(y)) if x < y => {
                pairs.push((a[i].prob, 0.0));
                i += 1;
            }
            (Some(_), None) => {
                pairs.push((a[i].prob, 0.0));
                i += 1;
            }
            _ => {
                pairs.push((0.0, b[j].prob));
                j += 1;
            }
        }
    }
    let (p, q): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    kl_dense(&p, &q)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    #[default]
    Kl,
    /// `½(D(p‖q) + D(q‖p))`.
    SymmetricKl,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `D(test‖residual)`.
    #[default]
    TestToResidual,
    /// `D(residual‖test)`.
    ResidualToTest,
}

/// Neighbour count: a fixed number or `⌈√|R|⌉`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum NeighborK {
    #[default]
    Auto,
    Fixed(usize),
}

impl NeighborK {
    pub fn resolve(self, residual: usize) -> Result<usize> {
        let k = match self {
            NeighborK::Fixed(k) => k,
            NeighborK::Auto => (residual as f64).sqrt().ceil() as usize,
        };
        if k == 0 || residual < k {
            return Err(Error::InsufficientResidual {
                needed: k.max(1),
                have: residual,
            });
        }
        Ok(k)
    }
}

impl fmt::Display for NeighborK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeighborK::Auto => f.write_str("auto"),
            NeighborK::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for NeighborK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(NeighborK::Auto),
            k => match k.parse() {
                Ok(0) | Err(_) => Err(Error::Config(format!("bad neighbour count {k:?}"))),
                Ok(k) => Ok(NeighborK::Fixed(k)),
            },
        }
    }
}

impl Serialize for NeighborK {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NeighborK::Auto => s.serialize_str("auto"),
            NeighborK::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for NeighborK {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => match n.as_u64() {
                Some(k) if k > 0 => Ok(NeighborK::Fixed(k as usize)),
                _ => Err(serde::de::Error::custom("k must be a positive integer")),
            },
            serde_json::Value::String(s) => s.parse().map_err(serde::de::Error::custom),
            _ => Err(serde::de::Error::custom("k must be a positive integer or \"auto\"")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborVoteConfig {
    pub k: NeighborK,
    pub divergence: Divergence,
    pub direction: KlDirection,
    /// Temperature for the neighbour weights of the interpolated baseline.
    pub temperature: f64,
}

impl Default for NeighborVoteConfig {
    fn default() -> Self {
        NeighborVoteConfig {
            k: NeighborK::Auto,
            divergence: Divergence::Kl,
            direction: KlDirection::TestToResidual,
            temperature: 1.0,
        }
    }
}

impl NeighborVoteConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("neighbour temperature must be positive".into()));
        }
        Ok(())
    }

    /// Distance from a test distribution to one residual distribution.
    pub fn distance(&self, test: &VocabDistribution, residual: &VocabDistribution) -> f64 {
        match (self.divergence, self.direction) {
            (Divergence::SymmetricKl, _) => 0.5 * (kl_divergence(test, residual) + kl_divergence(residual, test)),
            (Divergence::Kl, KlDirection::TestToResidual) => kl_divergence(test, residual),
            (Divergence::Kl, KlDirection::ResidualToTest) => kl_divergence(residual, test),
        }
    }
}

/// The `k` smallest distances as `(index, distance)`, nearest first. Equal
/// distances keep index order.
pub fn nearest(distances: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<(usize, f64)> = distances.iter().copied().enumerate().collect();
    idx.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx
}

/// Majority vote over the `k` nearest. Ties go to the smaller summed
/// distance among the tied labels, then to the smaller label id.
pub fn neighbor_vote(distances: &[f64], labels: &[usize], k: usize, classes: usize) -> Result<usize> {
    if distances.len() != labels.len() {
        return Err(Error::InvalidData(format!(
            "{} distances but {} labels",
            distances.len(),
            labels.len()
        )));
    }
    if k == 0 || distances.len() < k {
        return Err(Error::InsufficientResidual {
            needed: k.max(1),
            have: distances.len(),
        });
    }
    let mut count = vec![0usize; classes];
    let mut dsum = vec![0.0f64; classes];
    for (i, d) in nearest(distances, k) {
        let l = labels[i];
        if l >= classes {
            return Err(Error::InvalidData(format!("label {l} out of range for {classes} classes")));
        }
        count[l] += 1;
        dsum[l] += d;
    }
    let mut best = 0;
    for l in 1..classes {
        if count[l] > count[best] || (count[l] == count[best] && count[l] > 0 && dsum[l] < dsum[best]) {
            best = l;
        }
    }
    Ok(best)
}

fn distances(test: &VocabDistribution, residual: &[VocabDistribution], cfg: &NeighborVoteConfig) -> Vec<f64> {
    residual.iter().map(|r| cfg.distance(test, r)).collect()
}

/// Votes the test label from the residual samples nearest in divergence.
pub fn knn_prompting_predict(
    test: &VocabDistribution,
    residual: &[VocabDistribution],
    residual_labels: &[usize],
    classes: usize,
    cfg: &NeighborVoteConfig,
) -> Result<usize> {
    cfg.validate()?;
    let k = cfg.k.resolve(residual.len())?;
    neighbor_vote(&distances(test, residual, cfg), residual_labels, k, classes)
}

/// `λ · p_icl + (1 − λ) · p_knn`, where `p_knn(y)` sums
/// `exp(−D/τ)` over the nearest residuals labelled `y`.
pub fn knn_prompt_predict(
    test: &VocabDistribution,
    residual: &[VocabDistribution],
    residual_labels: &[usize],
    label_tokens: &[TokenId],
    lambda: f64,
    cfg: &NeighborVoteConfig,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("interpolation weight {lambda} is outside [0, 1]")));
    }
    cfg.validate()?;
    let classes = label_tokens.len();
    let p_icl = icl_predict(test, label_tokens)?;
    let k = cfg.k.resolve(residual.len())?;
    if residual_labels.len() != residual.len() {
        return Err(Error::InvalidData("residual labels and distributions differ in length".into()));
    }
    let near = nearest(&distances(test, residual, cfg), k);
    // shift by the nearest distance so the weights cannot all underflow
    let d0 = near[0].1;
    let mut p_knn = vec![0.0; classes];
    for &(i, d) in &near {
        let l = residual_labels[i];
        if l >= classes {
            return Err(Error::InvalidData(format!("label {l} out of range for {classes} classes")));
        }
        p_knn[l] += (-(d - d0) / cfg.temperature).exp();
    }
    let z: f64 = p_knn.iter().sum();
    Ok(p_icl
        .iter()
        .zip(&p_knn)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b / z)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::TokenProb;

    fn dist(probs: &[(u64, f64)]) -> VocabDistribution {
        VocabDistribution::from_raw(probs.iter().map(|&(id, prob)| TokenProb {
            id: TokenId(id),
            token: format!("t{id}"),
            prob,
        }))
        .unwrap()
    }

    #[test]
    fn icl_renormalizes_over_labels() {
        let d = dist(&[(0, 0.3), (1, 0.1), (2, 0.6)]);
        let p = icl_predict(&d, &[TokenId(0), TokenId(1)]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        assert!(matches!(icl_predict(&d, &[TokenId(7), TokenId(8)]), Err(Error::AllLabelsUnsupported)));
    }

    #[test]
    fn kl_identity_and_value() {
        let p = dist(&[(0, 0.5), (1, 0.5)]);
        let q = dist(&[(0, 0.25), (1, 0.75)]);
        assert!(kl_divergence(&p, &p).abs() < 1e-12);
        let oracle = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&p, &q) - oracle).abs() < 1e-9);
        assert!((kl_divergence(&p, &q) - kl_divergence(&q, &p)).abs() > 1e-3);
    }

    #[test]
    fn disjoint_supports_stay_finite() {
        let p = dist(&[(0, 1.0)]);
        let q = dist(&[(1, 1.0)]);
        let d = kl_divergence(&p, &q);
        assert!(d.is_finite() && d > 20.0);
    }

    #[test]
    fn auto_k() {
        assert_eq!(NeighborK::Auto.resolve(62).unwrap(), 8);
        assert_eq!(NeighborK::Auto.resolve(64).unwrap(), 8);
        assert!(matches!(
            NeighborK::Fixed(5).resolve(3),
            Err(Error::InsufficientResidual { needed: 5, have: 3 })
        ));
    }

    #[test]
    fn vote_rules() {
        assert_eq!(neighbor_vote(&[0.3, 0.1, 0.2], &[0, 1, 0], 1, 2).unwrap(), 1);
        assert_eq!(neighbor_vote(&[0.1, 0.2, 0.3, 0.0], &[0, 0, 1, 1], 3, 2).unwrap(), 0);
        // one vote each, the closer label wins
        assert_eq!(neighbor_vote(&[0.5, 0.2], &[0, 1], 2, 2).unwrap(), 1);
        // equal counts and sums, smaller label
        assert_eq!(neighbor_vote(&[0.2, 0.2], &[1, 0], 2, 2).unwrap(), 0);
    }

    #[test]
    fn interpolation_extremes() {
        let labels = [TokenId(0), TokenId(1)];
        let test = dist(&[(0, 0.8), (1, 0.2)]);
        let r = vec![dist(&[(0, 0.1), (1, 0.9)]), dist(&[(0, 0.85), (1, 0.15)])];
        let cfg = NeighborVoteConfig {
            k: NeighborK::Fixed(1),
            ..Default::default()
        };
        let p1 = knn_prompt_predict(&test, &r, &[1, 0], &labels, 1.0, &cfg).unwrap();
        assert_eq!(p1, icl_predict(&test, &labels).unwrap());
        let p0 = knn_prompt_predict(&test, &r, &[1, 0], &labels, 0.0, &cfg).unwrap();
        assert_eq!(p0, vec![1.0, 0.0]);
    }

    #[test]
    fn k_serde() {
        let c: NeighborVoteConfig = serde_json::from_str(r#"{"k": 3, "divergence": "symmetric-kl"}"#).unwrap();
        assert_eq!(c.k, NeighborK::Fixed(3));
        let c: NeighborVoteConfig = serde_json::from_str(r#"{"k": "auto"}"#).unwrap();
        assert_eq!(c.k, NeighborK::Auto);
        assert!(serde_json::from_str::<NeighborVoteConfig>(r#"{"k": 0}"#).is_err());
    }
}
