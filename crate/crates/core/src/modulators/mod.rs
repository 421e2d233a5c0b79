//! Lightweight task-specific classifiers fitted on residual-set features.
//!
//! All five share one contract: `fit` on an `n × dim` matrix with labels in
//! `0..classes`, then `predict_proba` returns a probability vector over all
//! classes and `predict` its argmax (smallest label on ties). Fitted
//! parameters are rounded to f32 and persisted as f32 blocks.

pub mod knn;
pub mod logistic;
pub mod mlp;
mod persist;
pub mod svm;
pub mod tree;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use knn::{KnnModel, KnnParams};
pub use logistic::{LogisticModel, LogisticParams};
pub use mlp::{MlpModel, MlpParams};
pub use persist::MODEL_FORMAT_VERSION;
pub use svm::{SvmModel, SvmParams};
pub use tree::{TreeModel, TreeParams};

/// Deserializes from the tagged form (`{"type": "mlp", "hidden": 64}`) or
/// from a short name (`"mlp"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", try_from = "KindRepr")]
pub enum ModulatorKind {
    LogisticRegression(LogisticParams),
    LinearSvm(SvmParams),
    Mlp(MlpParams),
    NearestNeighbors(KnnParams),
    DecisionTree(TreeParams),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum KindRepr {
    Short(String),
    Tagged(TaggedKind),
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum TaggedKind {
    LogisticRegression(LogisticParams),
    LinearSvm(SvmParams),
    Mlp(MlpParams),
    NearestNeighbors(KnnParams),
    DecisionTree(TreeParams),
}

impl TryFrom<KindRepr> for ModulatorKind {
    type Error = Error;

    fn try_from(r: KindRepr) -> Result<Self> {
        Ok(match r {
            KindRepr::Short(s) => s.parse()?,
            KindRepr::Tagged(TaggedKind::LogisticRegression(p)) => ModulatorKind::LogisticRegression(p),
            KindRepr::Tagged(TaggedKind::LinearSvm(p)) => ModulatorKind::LinearSvm(p),
            KindRepr::Tagged(TaggedKind::Mlp(p)) => ModulatorKind::Mlp(p),
            KindRepr::Tagged(TaggedKind::NearestNeighbors(p)) => ModulatorKind::NearestNeighbors(p),
            KindRepr::Tagged(TaggedKind::DecisionTree(p)) => ModulatorKind::DecisionTree(p),
        })
    }
}

impl Default for ModulatorKind {
    fn default() -> Self {
        ModulatorKind::LogisticRegression(LogisticParams::default())
    }
}

impl ModulatorKind {
    pub fn short_name(&self) -> &'static str {
        match self {
            ModulatorKind::LogisticRegression(_) => "lr",
            ModulatorKind::LinearSvm(_) => "svm",
            ModulatorKind::Mlp(_) => "mlp",
            ModulatorKind::NearestNeighbors(_) => "knn",
            ModulatorKind::DecisionTree(_) => "tree",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            ModulatorKind::LogisticRegression(_) | ModulatorKind::LinearSvm(_) | ModulatorKind::Mlp(_)
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        match self {
            ModulatorKind::LogisticRegression(p) if !(p.l2 > 0.0) => bad("logistic l2 must be positive"),
            ModulatorKind::LogisticRegression(p) if p.max_iter == 0 => bad("logistic max_iter must be positive"),
            ModulatorKind::LinearSvm(p) if !(p.c > 0.0) => bad("svm C must be positive"),
            ModulatorKind::LinearSvm(p) if p.max_iter == 0 => bad("svm max_iter must be positive"),
            ModulatorKind::Mlp(p) if p.hidden == 0 || p.max_epochs == 0 || !(p.learning_rate > 0.0) => {
                bad("mlp hidden width, epochs and learning rate must be positive")
            }
            ModulatorKind::Mlp(p) if p.alpha < 0.0 => bad("mlp alpha must be non-negative"),
            ModulatorKind::NearestNeighbors(p) if p.k == 0 => bad("knn k must be at least 1"),
            ModulatorKind::DecisionTree(p) if p.min_samples_split < 2 => bad("tree min_samples_split must be at least 2"),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ModulatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for ModulatorKind {
    type Err = Error;

    /// Parses `lr|svm|mlp|knn|tree` into the variant with default settings.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "lr" | "logistic" => ModulatorKind::LogisticRegression(Default::default()),
            "svm" => ModulatorKind::LinearSvm(Default::default()),
            "mlp" => ModulatorKind::Mlp(Default::default()),
            "knn" => ModulatorKind::NearestNeighbors(Default::default()),
            "tree" => ModulatorKind::DecisionTree(Default::default()),
            other => return Err(Error::Config(format!("unknown modulator {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModulator {
    Logistic(LogisticModel),
    Svm(SvmModel),
    Mlp(MlpModel),
    Knn(KnnModel),
    Tree(TreeModel),
}

/// Checks shapes and labels shared by every variant. Returns the input width.
pub(crate) fn validate_training(x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::InsufficientData("no training rows".into()));
    }
    if x.len() != y.len() {
        return Err(Error::InvalidData(format!("{} rows but {} labels", x.len(), y.len())));
    }
    let dim = x[0].len();
    if dim == 0 {
        return Err(Error::InvalidData("zero-width features".into()));
    }
    if let Some(row) = x.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: row.len() });
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite feature value".into()));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidData(format!("label {bad} out of range for {classes} classes")));
    }
    if y.iter().all(|&l| l == y[0]) {
        return Err(Error::SingleClassResidual);
    }
    Ok(dim)
}

/// Fits a modulator. `seed` drives initialization and batch order where the
/// variant has any.
pub fn fit(kind: &ModulatorKind, x: &[Vec<f64>], y: &[usize], classes: usize, seed: u64) -> Result<FittedModulator> {
    kind.validate()?;
    validate_training(x, y, classes)?;
    Ok(match kind {
        ModulatorKind::LogisticRegression(p) => FittedModulator::Logistic(logistic::fit(p, x, y, classes)?),
        ModulatorKind::LinearSvm(p) => FittedModulator::Svm(svm::fit(p, x, y, classes)?),
        ModulatorKind::Mlp(p) => FittedModulator::Mlp(mlp::fit(p, x, y, classes, seed)?),
        ModulatorKind::NearestNeighbors(p) => FittedModulator::Knn(knn::fit(p, x, y, classes)?),
        ModulatorKind::DecisionTree(p) => FittedModulator::Tree(tree::fit(p, x, y, classes)?),
    })
}

impl FittedModulator {
    pub fn kind(&self) -> ModulatorKind {
        match self {
            FittedModulator::Logistic(m) => ModulatorKind::LogisticRegression(m.params.clone()),
            FittedModulator::Svm(m) => ModulatorKind::LinearSvm(m.params.clone()),
            FittedModulator::Mlp(m) => ModulatorKind::Mlp(m.params.clone()),
            FittedModulator::Knn(m) => ModulatorKind::NearestNeighbors(m.params.clone()),
            FittedModulator::Tree(m) => ModulatorKind::DecisionTree(m.params.clone()),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            FittedModulator::Logistic(m) => m.classes,
            FittedModulator::Svm(m) => m.classes,
            FittedModulator::Mlp(m) => m.classes,
            FittedModulator::Knn(m) => m.classes,
            FittedModulator::Tree(m) => m.classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FittedModulator::Logistic(m) => m.dim,
            FittedModulator::Svm(m) => m.dim,
            FittedModulator::Mlp(m) => m.dim,
            FittedModulator::Knn(m) => m.dim,
            FittedModulator::Tree(m) => m.dim,
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(match self {
            FittedModulator::Logistic(m) => m.proba(x),
            FittedModulator::Svm(m) => m.proba(x),
            FittedModulator::Mlp(m) => m.proba(x),
            FittedModulator::Knn(m) => m.proba(x),
            FittedModulator::Tree(m) => m.proba(x),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_json(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        persist::from_json(s)
    }
}

/// Index of the largest entry; the smallest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}
