//! Shot sampling and the demonstration / residual split.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledExample, TaskDataset, Verbalizer};
use crate::error::{Error, Result};
use crate::prompting::{PromptPrefix, TokenCounter};
use crate::rng::{stream, Substream};
use crate::template::PromptTemplate;

/// Draws exactly `m` training examples per class, uniformly without
/// replacement. Output is grouped by class in label order.
pub fn sample_shots(dataset: &TaskDataset, m: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    if m == 0 {
        return Err(Error::Config("shots per class must be positive".into()));
    }
    let mut rng = stream(seed, Substream::Sampling);
    let mut out = Vec::with_capacity(m * dataset.num_classes());
    for class in 0..dataset.num_classes() {
        let mut pool: Vec<&LabeledExample> = dataset.train.iter().filter(|e| e.label == class).collect();
        if pool.len() < m {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} training examples, need {m}",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        out.extend(pool.into_iter().take(m).cloned());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DemoRegime {
    /// No demonstrations.
    None,
    /// `d` demonstrations per class.
    Fixed(usize),
    /// As many as the context budget admits.
    Most,
}

impl fmt::Display for DemoRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DemoRegime::None => f.write_str("none"),
            DemoRegime::Fixed(d) => write!(f, "{d}"),
            DemoRegime::Most => f.write_str("most"),
        }
    }
}

impl FromStr for DemoRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" | "0" => Ok(DemoRegime::None),
            "most" => Ok(DemoRegime::Most),
            d => d
                .parse()
                .map(DemoRegime::Fixed)
                .map_err(|_| Error::Config(format!("bad demo regime {d:?}; expected a count, most or none"))),
        }
    }
}

impl Serialize for DemoRegime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DemoRegime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Token budget for the demonstration block.
pub struct ContextBudget<'a> {
    pub max_tokens: usize,
    pub counter: &'a dyn TokenCounter,
    pub template: &'a PromptTemplate,
    pub verbalizer: &'a Verbalizer,
}

impl ContextBudget<'_> {
    pub fn block_tokens(&self, demos: &[LabeledExample]) -> Result<usize> {
        let prefix = PromptPrefix::new(self.template, demos, self.verbalizer)?;
        Ok(self.counter.count(prefix.text()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSplit {
    /// Demonstrations, in prompt order.
    pub demonstrations: Vec<LabeledExample>,
    pub residual: Vec<LabeledExample>,
    pub seed: u64,
}

/// Splits shots into demonstrations and residual.
///
/// `Fixed(d)` takes `d` per class and requires `2d` shots per class.
/// `Most` fills round-robin over a shuffled class order until the next
/// demonstration would overflow the budget. The demonstration order is then
/// shuffled once; the residual keeps input order.
pub fn split_train(
    shots: &[LabeledExample],
    regime: DemoRegime,
    seed: u64,
    budget: Option<&ContextBudget<'_>>,
) -> Result<TrainSplit> {
    let mut rng = stream(seed, Substream::DemoOrder);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in shots.iter().enumerate() {
        by_class.entry(ex.label).or_default().push(i);
    }
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
    }

    let mut chosen: Vec<usize> = match regime {
        DemoRegime::None | DemoRegime::Fixed(0) => Vec::new(),
        DemoRegime::Fixed(d) => {
            let mut chosen = Vec::new();
            for (class, idx) in &by_class {
                if idx.len() < 2 * d {
                    return Err(Error::InsufficientData(format!(
                        "class {class} has {} shots; {d} demonstrations per class need at least {}",
                        idx.len(),
                        2 * d
                    )));
                }
                chosen.extend(&idx[..d]);
            }
            chosen
        }
        DemoRegime::Most => {
            let budget = budget.ok_or_else(|| Error::Config("the most-demonstrations regime needs a context budget".into()))?;
            let mut classes: Vec<usize> = by_class.keys().copied().collect();
            classes.shuffle(&mut rng);
            let mut queues: Vec<VecDeque<usize>> = classes
                .iter()
                .map(|c| by_class[c].iter().copied().collect())
                .collect();
            let mut chosen = Vec::new();
            let mut picked: Vec<LabeledExample> = Vec::new();
            'fill: loop {
                let mut progressed = false;
                for q in queues.iter_mut() {
                    let Some(i) = q.pop_front() else { continue };
                    picked.push(shots[i].clone());
                    if budget.block_tokens(&picked)? > budget.max_tokens {
                        break 'fill;
                    }
                    chosen.push(i);
                    progressed = true;
                }
                if !progressed {
                    break;
                }
            }
            chosen
        }
    };
    chosen.shuffle(&mut rng);

    let mut is_demo = vec![false; shots.len()];
    for &i in &chosen {
        is_demo[i] = true;
    }
    Ok(TrainSplit {
        demonstrations: chosen.iter().map(|&i| shots[i].clone()).collect(),
        residual: shots
            .iter()
            .zip(&is_demo)
            .filter(|(_, &d)| !d)
            .map(|(e, _)| e.clone())
            .collect(),
        seed,
    })
}
