//! End-to-end runs: sample shots, split, render, extract, fit, predict.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{icl_predict, knn_prompt_predict, knn_prompting_predict, nearest, NeighborVoteConfig};
use crate::data::{FeatureKind, LabeledExample, TaskDataset};
use crate::error::{Error, Result, Stage, StageExt};
use crate::extraction::{
    cache_meta, extract_all, extract_hidden, featurize, kind_tag, parallel_map, verbalizer_token_ids, Backend,
    CacheDir, ExtractedFeatures, ExtractionTask, FeatureCache, FuzzyKSelector, VocabDistribution, WidthGuard,
};
use crate::modulators::{self, argmax, FittedModulator, ModulatorKind};
use crate::prompting::{ApproxTokenCounter, PromptPrefix, TokenCounter};
use crate::rng::keyed_stream;
use crate::sampling::{sample_shots, split_train, ContextBudget, DemoRegime, TrainSplit};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    VanillaIcl,
    KnnPrompt,
    KnnPrompting,
    #[default]
    Fads,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::VanillaIcl => "icl",
            Method::KnnPrompt => "knn-prompt",
            Method::KnnPrompting => "knn-prompting",
            Method::Fads => "fads",
        }
    }

    pub fn is_baseline(self) -> bool {
        self != Method::Fads
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fads" => Ok(Method::Fads),
            "icl" | "vanilla-icl" => Ok(Method::VanillaIcl),
            "knn-prompting" => Ok(Method::KnnPrompting),
            "knn-prompt" => Ok(Method::KnnPrompt),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected fads, icl, knn-prompting or knn-prompt"
            ))),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// One experiment cell, minus the dataset and backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Shots per class, `m`.
    pub shots: usize,
    /// Demonstration regime. Unset means `most` for vanilla ICL and one per
    /// class otherwise.
    pub demos: Option<DemoRegime>,
    pub features: FeatureKind,
    pub modulator: ModulatorKind,
    pub seed: u64,
    pub neighbors: NeighborVoteConfig,
    /// Weight on the ICL distribution in the interpolated baseline.
    pub lambda: f64,
    /// Evaluate on at most this many test samples.
    pub max_test: Option<usize>,
    /// Context budget in tokens; defaults to the backend's context length.
    pub context_budget: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Fads,
            shots: 32,
            demos: None,
            features: FeatureKind::HiddenState,
            modulator: ModulatorKind::default(),
            seed: 0,
            neighbors: NeighborVoteConfig::default(),
            lambda: 0.5,
            max_test: None,
            context_budget: None,
        }
    }
}

impl ExperimentConfig {
    pub fn demo_regime(&self) -> DemoRegime {
        self.demos.unwrap_or(match self.method {
            Method::VanillaIcl => DemoRegime::Most,
            _ => DemoRegime::Fixed(1),
        })
    }

    /// Checks everything that can be checked without a backend.
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("shots per class must be positive".into()));
        }
        if let DemoRegime::Fixed(d) = self.demo_regime() {
            if self.shots < 2 * d {
                return Err(Error::Config(format!(
                    "{d} demonstrations per class need at least {} shots per class, got {}",
                    2 * d,
                    self.shots
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} is outside [0, 1]", self.lambda)));
        }
        if self.max_test == Some(0) {
            return Err(Error::Config("max_test must be positive".into()));
        }
        if self.context_budget == Some(0) {
            return Err(Error::Config("context budget must be positive".into()));
        }
        self.modulator.validate()?;
        self.neighbors.validate()
    }

    /// Identity of the configuration without its seed.
    pub fn fingerprint(&self) -> String {
        let mut s = format!("{}/m={}/d={}", self.method, self.shots, self.demo_regime());
        match self.method {
            Method::Fads => s += &format!("/{}/{}", self.features, self.modulator),
            Method::KnnPrompting => s += &format!("/k={}", self.neighbors.k),
            Method::KnnPrompt => s += &format!("/k={}/lambda={}", self.neighbors.k, self.lambda),
            Method::VanillaIcl => {}
        }
        if let Some(n) = self.max_test {
            s += &format!("/test<={n}");
        }
        s
    }

    /// Copy used by one seed of a multi-seed run.
    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub method: Method,
    pub config: String,
    pub backend_id: String,
    pub model_id: String,
    pub feature_kind: Option<String>,
    pub modulator: Option<String>,
    pub shots: usize,
    pub demo_regime: String,
    pub demonstrations: usize,
    pub residual: usize,
    pub test: usize,
    pub context_budget: usize,
    /// Neighbour count actually used by the voting baselines.
    pub k: Option<usize>,
    pub backend_calls: usize,
    pub timings: Vec<StageTiming>,
}

/// One scored test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub gold: usize,
    pub predicted: usize,
    /// Class probabilities. For the voting baseline, neighbour vote shares.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub predictions: Vec<PredictionRecord>,
    pub modulator: Option<FittedModulator>,
    /// The frozen demonstrations, in prompt order.
    pub demonstrations: Vec<LabeledExample>,
    /// Token selector of a fuzzy-k run.
    pub selector: Option<FuzzyKSelector>,
    pub metadata: RunMetadata,
}

impl RunOutput {
    pub fn accuracy(&self) -> f64 {
        accuracy(&self.predictions)
    }

    /// Metadata line followed by one line per prediction.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &serde_json::json!({ "metadata": self.metadata, "accuracy": self.accuracy() }))?;
        writeln!(w)?;
        for p in &self.predictions {
            serde_json::to_writer(&mut w, p)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

pub fn accuracy(predictions: &[PredictionRecord]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions.iter().filter(|p| p.gold == p.predicted).count() as f64 / predictions.len() as f64
}

struct Timer {
    timings: Vec<StageTiming>,
    start: Instant,
}

impl Timer {
    fn new() -> Self {
        Timer {
            timings: Vec::new(),
            start: Instant::now(),
        }
    }

    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: (now - self.start).as_secs_f64(),
        });
        self.start = now;
    }
}

/// The evaluated test samples, capped at `max_test` by a seed-independent
/// subsample so every seed and method sees the same set.
pub fn test_subset(dataset: &TaskDataset, max_test: Option<usize>) -> Vec<LabeledExample> {
    match max_test {
        Some(n) if n < dataset.test.len() => {
            let mut idx: Vec<usize> = (0..dataset.test.len()).collect();
            idx.shuffle(&mut keyed_stream(0, b"test-subset"));
            idx.truncate(n);
            idx.sort_unstable();
            idx.into_iter().map(|i| dataset.test[i].clone()).collect()
        }
        _ => dataset.test.clone(),
    }
}

struct Prepared {
    test: Vec<LabeledExample>,
    split: TrainSplit,
    budget: usize,
}

/// Samples, splits under the context budget and checks every prompt fits.
fn prepare(dataset: &TaskDataset, cfg: &ExperimentConfig, backend: &dyn Backend, timer: &mut Timer) -> Result<Prepared> {
    let test = test_subset(dataset, cfg.max_test);
    if test.is_empty() {
        return Err(Error::InsufficientData("no test samples".into())).stage(Stage::Sample);
    }
    let shots = sample_shots(dataset, cfg.shots, cfg.seed).stage(Stage::Sample)?;
    timer.lap(Stage::Sample);

    let approx = ApproxTokenCounter;
    let counter: &dyn TokenCounter = backend.token_counter().unwrap_or(&approx);
    let budget = cfg.context_budget.unwrap_or_else(|| backend.context_tokens());
    let t = &dataset.template;
    let longest_query = shots
        .iter()
        .chain(&test)
        .map(|e| counter.count(&t.fill_query(&e.text)))
        .max()
        .unwrap_or(0);
    if longest_query > budget {
        return Err(Error::PromptOverBudget {
            tokens: longest_query,
            budget,
        })
        .stage(Stage::Split);
    }
    let demo_budget = ContextBudget {
        max_tokens: budget - longest_query,
        counter,
        template: t,
        verbalizer: &dataset.verbalizer,
    };
    let split = split_train(&shots, cfg.demo_regime(), cfg.seed, Some(&demo_budget)).stage(Stage::Split)?;
    timer.lap(Stage::Split);

    let prefix = PromptPrefix::new(t, &split.demonstrations, &dataset.verbalizer).stage(Stage::Render)?;
    for (i, ex) in split.residual.iter().chain(&test).enumerate() {
        let tokens = counter.count(&prefix.wrap(&ex.text).text);
        if tokens > budget {
            return Err(Error::PromptOverBudget { tokens, budget }.at_sample(i)).stage(Stage::Render);
        }
    }
    timer.lap(Stage::Render);
    Ok(Prepared { test, split, budget })
}

fn metadata(cfg: &ExperimentConfig, backend: &dyn Backend, p: &Prepared, timer: Timer) -> RunMetadata {
    RunMetadata {
        seed: cfg.seed,
        method: cfg.method,
        config: cfg.fingerprint(),
        backend_id: backend.id(),
        model_id: backend.model_id(),
        feature_kind: None,
        modulator: None,
        shots: cfg.shots,
        demo_regime: cfg.demo_regime().to_string(),
        demonstrations: p.split.demonstrations.len(),
        residual: p.split.residual.len(),
        test: p.test.len(),
        context_budget: p.budget,
        k: None,
        backend_calls: 0,
        timings: timer.timings,
    }
}

fn open_cache(
    cache: Option<&CacheDir>,
    backend: &dyn Backend,
    dataset: &TaskDataset,
    kind: FeatureKind,
    split: &TrainSplit,
) -> Result<Option<Arc<FeatureCache>>> {
    cache
        .map(|dir| dir.open(cache_meta(backend, &dataset.template, &kind_tag(backend, kind, split))))
        .transpose()
}

/// Runs the full method: features of residual and test samples under one
/// frozen demonstration prefix, a modulator fitted on the residual, and its
/// predictions on the test samples.
pub fn run_fads(
    dataset: &TaskDataset,
    cfg: &ExperimentConfig,
    backend: &dyn Backend,
    cache: Option<&CacheDir>,
) -> Result<RunOutput> {
    if cfg.method != Method::Fads {
        return Err(Error::Config(format!("run_fads called with method {}", cfg.method)));
    }
    cfg.validate()?;
    let mut timer = Timer::new();
    let prepared = prepare(dataset, cfg, backend, &mut timer)?;
    let split = &prepared.split;
    if split.residual.is_empty() {
        return Err(Error::InsufficientResidual { needed: 1, have: 0 }).stage(Stage::Split);
    }

    let fc = open_cache(cache, backend, dataset, cfg.features, split).stage(Stage::Extract)?;
    let task = ExtractionTask {
        template: &dataset.template,
        verbalizer: &dataset.verbalizer,
        split,
        test: &prepared.test,
        kind: cfg.features,
    };
    let features = extract_all(backend, &task, fc.as_deref()).stage(Stage::Extract)?;
    timer.lap(Stage::Extract);

    let model = modulators::fit(
        &cfg.modulator,
        &features.train_matrix(),
        &features.train_labels,
        dataset.num_classes(),
        cfg.seed,
    )
    .stage(Stage::Fit)?;
    timer.lap(Stage::Fit);

    let predictions = features
        .test_matrix()
        .iter()
        .zip(&features.test_labels)
        .enumerate()
        .map(|(index, (x, &gold))| {
            let probs = model.predict_proba(x).map_err(|e| e.at_sample(index))?;
            Ok(PredictionRecord {
                index,
                gold,
                predicted: argmax(&probs),
                probs,
            })
        })
        .collect::<Result<Vec<_>>>()
        .stage(Stage::Predict)?;
    timer.lap(Stage::Predict);

    let mut meta = metadata(cfg, backend, &prepared, timer);
    meta.feature_kind = Some(cfg.features.to_string());
    meta.modulator = Some(cfg.modulator.to_string());
    meta.backend_calls = features.backend_calls;
    Ok(RunOutput {
        predictions,
        modulator: Some(model),
        demonstrations: prepared.split.demonstrations.clone(),
        selector: features.selector,
        metadata: meta,
    })
}

/// Samples, splits and extracts features without fitting, filling the cache
/// when one is given.
pub fn extract_features(
    dataset: &TaskDataset,
    cfg: &ExperimentConfig,
    backend: &dyn Backend,
    cache: Option<&CacheDir>,
) -> Result<(TrainSplit, ExtractedFeatures)> {
    cfg.validate()?;
    let mut timer = Timer::new();
    let prepared = prepare(dataset, cfg, backend, &mut timer)?;
    let fc = open_cache(cache, backend, dataset, cfg.features, &prepared.split).stage(Stage::Extract)?;
    let task = ExtractionTask {
        template: &dataset.template,
        verbalizer: &dataset.verbalizer,
        split: &prepared.split,
        test: &prepared.test,
        kind: cfg.features,
    };
    let features = extract_all(backend, &task, fc.as_deref()).stage(Stage::Extract)?;
    Ok((prepared.split, features))
}

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Everything needed to score new texts: the frozen demonstrations, the
/// feature kind and selector, and the fitted modulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub dataset: String,
    pub classes: Vec<String>,
    pub template_fingerprint: String,
    pub backend_id: String,
    pub features: FeatureKind,
    pub demonstrations: Vec<LabeledExample>,
    pub selector: Option<FuzzyKSelector>,
    /// Persisted modulator, as written by `FittedModulator::to_json`.
    pub modulator: serde_json::Value,
}

impl ModelBundle {
    /// Fits on one seed and packages the result.
    pub fn fit(dataset: &TaskDataset, cfg: &ExperimentConfig, backend: &dyn Backend, cache: Option<&CacheDir>) -> Result<(Self, RunOutput)> {
        if cfg.method != Method::Fads {
            return Err(Error::Config(format!("only fads runs produce a model, not {}", cfg.method)));
        }
        let out = run_fads(dataset, cfg, backend, cache)?;
        let model = out.modulator.as_ref().expect("fads runs return a modulator");
        let bundle = ModelBundle {
            format_version: BUNDLE_FORMAT_VERSION,
            dataset: dataset.name.clone(),
            classes: dataset.classes.clone(),
            template_fingerprint: dataset.template.fingerprint(),
            backend_id: backend.id(),
            features: cfg.features,
            demonstrations: out.demonstrations.clone(),
            selector: out.selector.clone(),
            modulator: serde_json::from_str(&model.to_json()?)?,
        };
        Ok((bundle, out))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let b: ModelBundle = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        if b.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("bundle format version {} is not supported", b.format_version)));
        }
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn modulator(&self) -> Result<FittedModulator> {
        FittedModulator::from_json(&self.modulator.to_string())
    }

    /// Scores raw texts with the bundled prefix and modulator.
    pub fn predict_texts(&self, dataset: &TaskDataset, backend: &dyn Backend, texts: &[String]) -> Result<Vec<(usize, Vec<f64>)>> {
        if dataset.template.fingerprint() != self.template_fingerprint {
            return Err(Error::Config("the dataset template differs from the one the model was fitted with".into()));
        }
        let model = self.modulator()?;
        let prefix = PromptPrefix::new(&dataset.template, &self.demonstrations, &dataset.verbalizer).stage(Stage::Render)?;
        let guard = WidthGuard::default();
        let rows = parallel_map(texts.len(), backend.max_parallel(), |i| {
            let prompt = prefix.wrap(&texts[i]);
            let fv = match (self.features, &self.selector) {
                (FeatureKind::HiddenState, _) => extract_hidden(backend, &prompt, &guard)?,
                (FeatureKind::FuzzyK(_), Some(sel)) => featurize(sel, &backend.distribution(&prompt)?),
                (FeatureKind::FuzzyK(_), None) => {
                    return Err(Error::ModelFormat("fuzzy-k bundle has no token selector".into()));
                }
            };
            let p = model.predict_proba(&fv.to_f64())?;
            Ok((argmax(&p), p))
        });
        rows.into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| e.at_sample(i)))
            .collect::<Result<Vec<_>>>()
            .stage(Stage::Predict)
    }
}

fn distributions(backend: &dyn Backend, prefix: &PromptPrefix, samples: &[LabeledExample]) -> Result<Vec<VocabDistribution>> {
    parallel_map(samples.len(), backend.max_parallel(), |i| {
        backend.distribution(&prefix.wrap(&samples[i].text)).map_err(|e| e.at_sample(i))
    })
    .into_iter()
    .collect()
}

/// Runs one of the baselines. Next-token distributions are not cached: their
/// supports vary in size and the feature cache stores fixed-width rows.
pub fn run_baseline(
    dataset: &TaskDataset,
    cfg: &ExperimentConfig,
    backend: &dyn Backend,
    cache: Option<&CacheDir>,
) -> Result<RunOutput> {
    if !cfg.method.is_baseline() {
        return Err(Error::Config(format!("run_baseline called with method {}", cfg.method)));
    }
    let _ = cache;
    cfg.validate()?;
    let mut timer = Timer::new();
    let prepared = prepare(dataset, cfg, backend, &mut timer)?;
    let split = &prepared.split;
    let classes = dataset.num_classes();
    let labels = verbalizer_token_ids(backend, &dataset.verbalizer).stage(Stage::Extract)?;
    let prefix = PromptPrefix::new(&dataset.template, &split.demonstrations, &dataset.verbalizer).stage(Stage::Render)?;

    let needs_residual = cfg.method != Method::VanillaIcl;
    let k = if needs_residual {
        Some(cfg.neighbors.k.resolve(split.residual.len()).stage(Stage::Split)?)
    } else {
        None
    };
    let residual = if needs_residual {
        distributions(backend, &prefix, &split.residual).stage(Stage::Extract)?
    } else {
        Vec::new()
    };
    let test = distributions(backend, &prefix, &prepared.test).stage(Stage::Extract)?;
    let backend_calls = residual.len() + test.len();
    timer.lap(Stage::Extract);

    let residual_labels: Vec<usize> = split.residual.iter().map(|e| e.label).collect();
    let predictions = test
        .iter()
        .zip(&prepared.test)
        .enumerate()
        .map(|(index, (d, ex))| {
            let (predicted, probs) = match cfg.method {
                Method::VanillaIcl => {
                    let p = icl_predict(d, &labels)?;
                    (argmax(&p), p)
                }
                Method::KnnPrompt => {
                    let p = knn_prompt_predict(d, &residual, &residual_labels, &labels, cfg.lambda, &cfg.neighbors)?;
                    (argmax(&p), p)
                }
                Method::KnnPrompting => {
                    let y = knn_prompting_predict(d, &residual, &residual_labels, classes, &cfg.neighbors)?;
                    let dists: Vec<f64> = residual.iter().map(|r| cfg.neighbors.distance(d, r)).collect();
                    let kk = k.expect("resolved for voting");
                    let mut shares = vec![0.0; classes];
                    for (i, _) in nearest(&dists, kk) {
                        shares[residual_labels[i]] += 1.0 / kk as f64;
                    }
                    (y, shares)
                }
                Method::Fads => unreachable!("checked above"),
            };
            Ok(PredictionRecord {
                index,
                gold: ex.label,
                predicted,
                probs,
            })
        })
        .collect::<Result<Vec<_>>>()
        .stage(Stage::Predict)?;
    timer.lap(Stage::Predict);

    let mut meta = metadata(cfg, backend, &prepared, timer);
    meta.k = k;
    meta.backend_calls = backend_calls;
    Ok(RunOutput {
        predictions,
        modulator: None,
        demonstrations: prepared.split.demonstrations.clone(),
        selector: None,
        metadata: meta,
    })
}

/// Dispatches on `cfg.method`.
pub fn run(dataset: &TaskDataset, cfg: &ExperimentConfig, backend: &dyn Backend, cache: Option<&CacheDir>) -> Result<RunOutput> {
    match cfg.method {
        Method::Fads => run_fads(dataset, cfg, backend, cache),
        _ => run_baseline(dataset, cfg, backend, cache),
    }
}
