//! Datasets, labels, verbalizers and feature vectors.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::template::{preset, PromptTemplate};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        LabeledExample {
            text: text.into(),
            label,
        }
    }
}

/// Label id → verbalizer token.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
#[serde(transparent)]
pub struct Verbalizer(Vec<String>);

impl Verbalizer {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for t in &tokens {
            if t.trim().is_empty() {
                return Err(Error::InvalidData("verbalizer token is empty".into()));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::InvalidData(format!("duplicate verbalizer token {t:?}")));
            }
        }
        Ok(Verbalizer(tokens))
    }

    /// An empty verbalizer. Rendering any demonstration with it fails.
    pub fn empty() -> Self {
        Verbalizer(Vec::new())
    }

    pub fn get(&self, label: usize) -> Result<&str> {
        self.0
            .get(label)
            .map(String::as_str)
            .ok_or(Error::MissingVerbalizer(label))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }
}

impl<'de> Deserialize<'de> for Verbalizer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            List(Vec<String>),
            Map(BTreeMap<String, String>),
        }
        let tokens = match Repr::deserialize(d)? {
            Repr::List(v) => v,
            Repr::Map(m) => {
                let mut by_id: BTreeMap<usize, String> = BTreeMap::new();
                for (k, v) in m {
                    let id: usize = k.parse().map_err(serde::de::Error::custom)?;
                    by_id.insert(id, v);
                }
                if by_id.keys().copied().ne(0..by_id.len()) {
                    return Err(serde::de::Error::custom("verbalizer ids must be 0..C"));
                }
                by_id.into_values().collect()
            }
        };
        Verbalizer::new(tokens).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub classes: Vec<String>,
    pub verbalizer: Verbalizer,
    pub template: PromptTemplate,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl TaskDataset {
    pub fn new(
        name: impl Into<String>,
        classes: Vec<String>,
        verbalizer: Verbalizer,
        template: PromptTemplate,
        train: Vec<LabeledExample>,
        test: Vec<LabeledExample>,
    ) -> Result<Self> {
        let ds = TaskDataset {
            name: name.into(),
            classes,
            verbalizer,
            template,
            train,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        if c < 2 {
            return Err(Error::InvalidData(format!("need at least 2 classes, got {c}")));
        }
        if self.verbalizer.len() != c {
            return Err(Error::InvalidData(format!(
                "verbalizer covers {} labels, dataset has {c}",
                self.verbalizer.len()
            )));
        }
        for (split, rows) in [("train", &self.train), ("test", &self.test)] {
            for (i, ex) in rows.iter().enumerate() {
                if ex.text.trim().is_empty() {
                    return Err(Error::InvalidData(format!("{split}[{i}]: empty text")));
                }
                if ex.label >= c {
                    return Err(Error::InvalidData(format!(
                        "{split}[{i}]: label {} out of range for {c} classes",
                        ex.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let raw: Manifest = serde_json::from_str(&fs::read_to_string(manifest)?)?;
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        raw.resolve(base)
    }
}

#[derive(Debug, Deserialize)]
struct Manifest {
    name: String,
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    classes: Option<Vec<String>>,
    #[serde(default)]
    verbalizer: Option<Verbalizer>,
    #[serde(default)]
    template: Option<PromptTemplate>,
    #[serde(default = "default_train")]
    train: PathBuf,
    #[serde(default = "default_test")]
    test: PathBuf,
    /// Generate the examples instead of reading `train` and `test`.
    #[serde(default)]
    synthetic: Option<SyntheticSpec>,
}

fn default_train() -> PathBuf {
    "train.jsonl".into()
}

fn default_test() -> PathBuf {
    "test.jsonl".into()
}

impl Manifest {
    fn resolve(self, base: &Path) -> Result<TaskDataset> {
        if let Some(spec) = &self.synthetic {
            let mut ds = synthetic_task(&self.name, spec)?;
            if let Some(t) = self.template {
                ds.template = t;
            }
            if let Some(c) = self.classes {
                ds.classes = c;
            }
            ds.validate()?;
            return Ok(ds);
        }
        let preset = match &self.preset {
            Some(p) => Some(preset(p).ok_or_else(|| Error::Config(format!("unknown preset {p:?}")))?),
            None => None,
        };
        let template = match (self.template, &preset) {
            (Some(t), _) => t,
            (None, Some(p)) => p.template.clone(),
            (None, None) => return Err(Error::Config("manifest has neither template nor preset".into())),
        };
        let verbalizer = match (self.verbalizer, &preset) {
            (Some(v), _) => v,
            (None, Some(p)) => Verbalizer::new(p.labels.iter().copied())?,
            (None, None) => return Err(Error::Config("manifest has neither verbalizer nor preset".into())),
        };
        let classes = self
            .classes
            .unwrap_or_else(|| verbalizer.tokens().to_vec());
        let train = read_jsonl(&base.join(&self.train), &template)?;
        let test = read_jsonl(&base.join(&self.test), &template)?;
        TaskDataset::new(self.name, classes, verbalizer, template, train, test)
    }
}

/// Shape of a generated task with opaque, unique texts and one-token
/// labels `class0`, `class1`, ...
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            train_per_class: 200,
            test_per_class: 100,
            seed: 0,
        }
    }
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "tu", "vo", "ze", "bi", "do", "fa", "gu", "he", "jo",
];

/// Builds a task whose labels are carried only by the record, not the
/// text. Meant for the mock backend, which looks labels up by text.
pub fn synthetic_task(name: &str, spec: &SyntheticSpec) -> Result<TaskDataset> {
    use rand::Rng;
    if spec.classes < 2 || spec.train_per_class == 0 {
        return Err(Error::Config("synthetic task needs at least 2 classes and 1 train example per class".into()));
    }
    let mut rng = crate::rng::stream(spec.seed, crate::rng::Substream::Synthetic);
    let mut make = |split: &str, per_class: usize| -> Vec<LabeledExample> {
        let mut rows = Vec::with_capacity(per_class * spec.classes);
        for i in 0..per_class * spec.classes {
            let words: Vec<String> = (0..rng.random_range(2..=5))
                .map(|_| {
                    (0..rng.random_range(1..=3))
                        .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
                        .collect()
                })
                .collect();
            rows.push(LabeledExample::new(
                format!("{split}{i} {}", words.join(" ")),
                i % spec.classes,
            ));
        }
        rows
    };
    let train = make("a", spec.train_per_class);
    let test = make("b", spec.test_per_class);
    let tokens: Vec<String> = (0..spec.classes).map(|k| format!("class{k}")).collect();
    TaskDataset::new(
        name,
        tokens.clone(),
        Verbalizer::new(tokens)?,
        PromptTemplate::new("Input: {input}\nLabel: {output}", "\n\n", "Input: {input}\nLabel:")?,
        train,
        test,
    )
}

#[derive(Deserialize)]
struct Record {
    text: String,
    label: usize,
    #[serde(default)]
    text_b: Option<String>,
}

/// Reads `{"text", "label"[, "text_b"]}` lines. A second segment is joined
/// onto the first with the template's pair joiner.
pub fn read_jsonl(path: &Path, template: &PromptTemplate) -> Result<Vec<LabeledExample>> {
    let body = fs::read_to_string(path)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line)
            .map_err(|e| Error::InvalidData(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let text = match (r.text_b, template.pair_joiner()) {
            (None, _) => r.text,
            (Some(b), Some(j)) => format!("{}{j}{b}", r.text),
            (Some(_), None) => {
                return Err(Error::InvalidData(format!(
                    "{}:{}: text_b given but the template has no pair joiner",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        out.push(LabeledExample::new(text, r.label));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    HiddenState,
    FuzzyK(usize),
}

impl FeatureKind {
    pub fn tag(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKind::HiddenState => f.write_str("hidden"),
            FeatureKind::FuzzyK(k) => write!(f, "fuzzy:{k}"),
        }
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hidden" => Ok(FeatureKind::HiddenState),
            other => {
                let k = other
                    .strip_prefix("fuzzy:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| Error::Config(format!("bad feature kind {other:?}; expected hidden or fuzzy:<k>")))?;
                Ok(FeatureKind::FuzzyK(k))
            }
        }
    }
}

impl Serialize for FeatureKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A general feature of one wrapped sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f32>,
    kind: FeatureKind,
}

impl FeatureVector {
    pub fn new(values: Vec<f32>, kind: FeatureKind) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidData("feature vector is empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("feature coordinate {i} is not finite")));
        }
        if matches!(kind, FeatureKind::FuzzyK(_)) && values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("fuzzy-k feature outside [0, 1]".into()));
        }
        Ok(FeatureVector { values, kind })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}
