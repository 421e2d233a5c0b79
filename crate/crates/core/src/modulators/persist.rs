//! Versioned JSON form of a fitted modulator. Float arrays are stored as
//! base64 of little-endian f32. Fitted parameters are f32-representable, so a
//! reload predicts bit-identically.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::tree::TreeNode;
use super::{FittedModulator, KnnModel, LogisticModel, MlpModel, ModulatorKind, SvmModel, TreeModel};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    modulator: ModulatorKind,
    classes: usize,
    dim: usize,
    #[serde(default)]
    floats: BTreeMap<String, String>,
    #[serde(default)]
    ints: BTreeMap<String, Vec<i64>>,
}

fn encode(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::ModelFormat(format!("bad base64 block: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::ModelFormat("float block length is not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect())
}

impl Envelope {
    fn put(&mut self, name: &str, v: &[f64]) {
        self.floats.insert(name.to_string(), encode(v));
    }

    fn put_ints(&mut self, name: &str, v: impl IntoIterator<Item = i64>) {
        self.ints.insert(name.to_string(), v.into_iter().collect());
    }

    fn get(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let v = decode(
            self.floats
                .get(name)
                .ok_or_else(|| Error::ModelFormat(format!("missing array {name}")))?,
        )?;
        if v.len() != len {
            return Err(Error::ModelFormat(format!("array {name} has {} values, expected {len}", v.len())));
        }
        Ok(v)
    }

    fn get_ints(&self, name: &str) -> Result<&[i64]> {
        self.ints
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::ModelFormat(format!("missing array {name}")))
    }

    fn get_usizes(&self, name: &str, bound: usize) -> Result<Vec<usize>> {
        self.get_ints(name)?
            .iter()
            .map(|&v| {
                usize::try_from(v)
                    .ok()
                    .filter(|&u| u < bound)
                    .ok_or_else(|| Error::ModelFormat(format!("{name} entry {v} out of range")))
            })
            .collect()
    }

    fn scalar(&self, name: &str) -> Result<usize> {
        match self.get_ints(name)? {
            [v] if *v >= 0 => Ok(*v as usize),
            _ => Err(Error::ModelFormat(format!("{name} must be one non-negative integer"))),
        }
    }
}

pub(crate) fn to_json(m: &FittedModulator) -> Result<String> {
    let mut e = Envelope {
        format_version: MODEL_FORMAT_VERSION,
        modulator: m.kind(),
        classes: m.num_classes(),
        dim: m.input_dim(),
        floats: BTreeMap::new(),
        ints: BTreeMap::new(),
    };
    match m {
        FittedModulator::Logistic(m) => {
            e.put("weights", &m.weights);
            e.put("bias", &m.bias);
            e.put_ints("iterations", [m.iterations as i64]);
        }
        FittedModulator::Svm(m) => {
            e.put("weights", &m.weights);
            e.put("bias", &m.bias);
        }
        FittedModulator::Mlp(m) => {
            e.put("theta", &m.theta);
            e.put_ints("epochs", [m.epochs as i64]);
        }
        FittedModulator::Knn(m) => {
            let flat: Vec<f64> = m.points.iter().flatten().copied().collect();
            e.put("points", &flat);
            e.put_ints("labels", m.labels.iter().map(|&l| l as i64));
        }
        FittedModulator::Tree(m) => {
            let mut feature = Vec::new();
            let mut threshold = Vec::new();
            let mut left = Vec::new();
            let mut right = Vec::new();
            let mut counts = Vec::new();
            for node in &m.nodes {
                match node {
                    TreeNode::Split {
                        feature: f,
                        threshold: t,
                        left: l,
                        right: r,
                    } => {
                        feature.push(*f as i64);
                        threshold.push(*t);
                        left.push(*l as i64);
                        right.push(*r as i64);
                        counts.extend(std::iter::repeat_n(0.0, m.classes));
                    }
                    TreeNode::Leaf { counts: c } => {
                        feature.push(-1);
                        threshold.push(0.0);
                        left.push(-1);
                        right.push(-1);
                        counts.extend(c);
                    }
                }
            }
            e.put("threshold", &threshold);
            e.put("counts", &counts);
            e.put_ints("feature", feature);
            e.put_ints("left", left);
            e.put_ints("right", right);
        }
    }
    Ok(serde_json::to_string_pretty(&e)?)
}

pub(crate) fn from_json(s: &str) -> Result<FittedModulator> {
    let e: Envelope = serde_json::from_str(s).map_err(|err| Error::ModelFormat(err.to_string()))?;
    if e.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
            e.format_version
        )));
    }
    e.modulator.validate()?;
    let (c, d) = (e.classes, e.dim);
    if c < 2 || d == 0 {
        return Err(Error::ModelFormat(format!("invalid shape {c} classes × {d} dims")));
    }
    Ok(match e.modulator.clone() {
        ModulatorKind::LogisticRegression(params) => FittedModulator::Logistic(LogisticModel {
            params,
            classes: c,
            dim: d,
            weights: e.get("weights", c * d)?,
            bias: e.get("bias", c)?,
            iterations: e.scalar("iterations")?,
        }),
        ModulatorKind::LinearSvm(params) => FittedModulator::Svm(SvmModel {
            params,
            classes: c,
            dim: d,
            weights: e.get("weights", c * d)?,
            bias: e.get("bias", c)?,
        }),
        ModulatorKind::Mlp(params) => {
            let len = params.hidden * d + params.hidden + c * params.hidden + c;
            FittedModulator::Mlp(MlpModel {
                params,
                classes: c,
                dim: d,
                theta: e.get("theta", len)?,
                epochs: e.scalar("epochs")?,
            })
        }
        ModulatorKind::NearestNeighbors(params) => {
            let labels = e.get_usizes("labels", c)?;
            if labels.is_empty() {
                return Err(Error::ModelFormat("knn model has no points".into()));
            }
            let flat = e.get("points", labels.len() * d)?;
            FittedModulator::Knn(KnnModel {
                params,
                classes: c,
                dim: d,
                points: flat.chunks(d).map(<[f64]>::to_vec).collect(),
                labels,
            })
        }
        ModulatorKind::DecisionTree(params) => {
            let feature = e.get_ints("feature")?;
            let n = feature.len();
            if n == 0 {
                return Err(Error::ModelFormat("tree has no nodes".into()));
            }
            let threshold = e.get("threshold", n)?;
            let counts = e.get("counts", n * c)?;
            let left = e.get_ints("left")?;
            let right = e.get_ints("right")?;
            if left.len() != n || right.len() != n {
                return Err(Error::ModelFormat("tree arrays disagree in length".into()));
            }
            let child = |v: i64, i: usize| -> Result<usize> {
                usize::try_from(v)
                    .ok()
                    .filter(|&u| u > i && u < n)
                    .ok_or_else(|| Error::ModelFormat(format!("node {i} has invalid child {v}")))
            };
            let mut nodes = Vec::with_capacity(n);
            for i in 0..n {
                nodes.push(if feature[i] < 0 {
                    TreeNode::Leaf {
                        counts: counts[i * c..(i + 1) * c].to_vec(),
                    }
                } else {
                    let f = feature[i] as usize;
                    if f >= d {
                        return Err(Error::ModelFormat(format!("node {i} splits on feature {f} of {d}")));
                    }
                    TreeNode::Split {
                        feature: f,
                        threshold: threshold[i],
                        left: child(left[i], i)?,
                        right: child(right[i], i)?,
                    }
                });
            }
            FittedModulator::Tree(TreeModel {
                params,
                classes: c,
                dim: d,
                nodes,
            })
        }
    })
}
