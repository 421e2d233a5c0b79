//! General-feature extraction through a pluggable LLM backend.

mod cache;
mod fuzzy;
mod mock;
mod remote;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, read_records, sidecar_path, write_records, CacheDir, CacheMeta, FeatureCache};
pub use fuzzy::{build_fuzzy_selector, featurize, FuzzyKSelector, SelectorSource};
pub use mock::{MockBackend, MockConfig};
pub use remote::{token_id_for, LogprobsApi, RemoteBackend, RemoteMode};

use crate::data::{FeatureKind, FeatureVector, LabeledExample, TaskDataset, Verbalizer};
use crate::error::{Error, Result};
use crate::prompting::{PromptPrefix, RenderedPrompt, TokenCounter};
use crate::sampling::TrainSplit;
use crate::template::PromptTemplate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub id: TokenId,
    pub token: String,
    pub prob: f64,
}

/// Next-token distribution at the answer cue, renormalized over the
/// returned support. Entries are sorted by token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabDistribution {
    entries: Vec<TokenProb>,
    raw_mass: f64,
}

impl VocabDistribution {
    /// Builds a distribution from raw (possibly truncated) probabilities.
    /// Duplicate ids are merged by summing.
    pub fn from_raw(raw: impl IntoIterator<Item = TokenProb>) -> Result<Self> {
        let mut entries: Vec<TokenProb> = Vec::new();
        for e in raw {
            if !(e.prob.is_finite() && e.prob >= 0.0) {
                return Err(Error::InvalidData(format!("bad probability {} for {:?}", e.prob, e.token)));
            }
            entries.push(e);
        }
        entries.sort_by_key(|e| e.id);
        entries.dedup_by(|later, earlier| {
            if later.id == earlier.id {
                earlier.prob += later.prob;
                true
            } else {
                false
            }
        });
        let mass: f64 = entries.iter().map(|e| e.prob).sum();
        if entries.is_empty() || mass <= 0.0 {
            return Err(Error::EmptySupport);
        }
        if mass > 1.0 + 1e-6 {
            return Err(Error::InvalidData(format!("probabilities sum to {mass} > 1")));
        }
        for e in &mut entries {
            e.prob /= mass;
        }
        Ok(VocabDistribution { entries, raw_mass: mass })
    }

    pub fn entries(&self) -> &[TokenProb] {
        &self.entries
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.entries
            .binary_search_by_key(&id, |e| e.id)
            .map(|i| self.entries[i].prob)
            .unwrap_or(0.0)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.entries.binary_search_by_key(&id, |e| e.id).is_ok()
    }

    /// Total probability the backend returned before renormalization.
    pub fn raw_mass(&self) -> f64 {
        self.raw_mass
    }

    /// True when the backend returned a truncated support.
    pub fn is_partial(&self) -> bool {
        self.raw_mass < 1.0 - 1e-6
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// An LLM behind some transport. Implementations must be deterministic for
/// identical prompts.
pub trait Backend: Send + Sync {
    /// Stable identity used in cache keys.
    fn id(&self) -> String;

    fn model_id(&self) -> String {
        self.id()
    }

    /// Final-position representation of the full prompt.
    fn hidden(&self, prompt: &RenderedPrompt) -> Result<Vec<f32>> {
        let _ = prompt;
        Err(Error::Config(format!("backend {} does not expose hidden states", self.id())))
    }

    /// Next-token distribution at the answer cue.
    fn distribution(&self, prompt: &RenderedPrompt) -> Result<VocabDistribution> {
        let _ = prompt;
        Err(Error::Config(format!("backend {} does not expose token probabilities", self.id())))
    }

    /// Resolves a verbalizer string to a single token id.
    fn token_id(&self, text: &str) -> Result<TokenId>;

    /// Output-embedding rows for every token, when the backend exposes them.
    fn token_embeddings(&self) -> Result<Vec<(TokenId, Vec<f32>)>> {
        Err(Error::SimilarityUnavailable)
    }

    fn supports_similarity(&self) -> bool {
        false
    }

    fn token_counter(&self) -> Option<&dyn TokenCounter> {
        None
    }

    fn max_parallel(&self) -> usize {
        1
    }

    /// Context length in tokens.
    fn context_tokens(&self) -> usize {
        1024
    }
}

pub fn verbalizer_token_ids(backend: &dyn Backend, v: &Verbalizer) -> Result<Vec<TokenId>> {
    v.tokens().iter().map(|t| backend.token_id(t)).collect()
}

/// Guards a run against a backend changing its output width.
#[derive(Debug, Default)]
pub struct WidthGuard(OnceLock<usize>);

impl WidthGuard {
    pub fn check(&self, dim: usize) -> Result<()> {
        let expected = *self.0.get_or_init(|| dim);
        if expected != dim {
            return Err(Error::DimensionMismatch { expected, got: dim });
        }
        Ok(())
    }
}

pub fn extract_hidden(backend: &dyn Backend, prompt: &RenderedPrompt, guard: &WidthGuard) -> Result<FeatureVector> {
    let values = backend.hidden(prompt)?;
    guard.check(values.len())?;
    FeatureVector::new(values, FeatureKind::HiddenState)
}

pub fn extract_distribution(backend: &dyn Backend, prompt: &RenderedPrompt) -> Result<VocabDistribution> {
    backend.distribution(prompt)
}

/// Runs `f` over `0..n` with at most `workers` in flight. Results come back in
/// index order regardless of completion order.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

/// Features for the residual and test samples of one split.
#[derive(Debug, Clone)]
pub struct ExtractedFeatures {
    pub train: Vec<FeatureVector>,
    pub train_labels: Vec<usize>,
    pub test: Vec<FeatureVector>,
    pub test_labels: Vec<usize>,
    /// Forward passes issued to the backend (cache misses).
    pub backend_calls: usize,
    pub selector: Option<FuzzyKSelector>,
    pub prefix: String,
}

impl ExtractedFeatures {
    pub fn train_matrix(&self) -> Vec<Vec<f64>> {
        self.train.iter().map(FeatureVector::to_f64).collect()
    }

    pub fn test_matrix(&self) -> Vec<Vec<f64>> {
        self.test.iter().map(FeatureVector::to_f64).collect()
    }
}

/// Inputs shared by every extraction of one run.
pub struct ExtractionTask<'a> {
    pub template: &'a PromptTemplate,
    pub verbalizer: &'a Verbalizer,
    pub split: &'a TrainSplit,
    pub test: &'a [LabeledExample],
    pub kind: FeatureKind,
}

fn residual_fingerprint(split: &TrainSplit) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for ex in &split.residual {
        h.update((ex.label as u64).to_le_bytes());
        h.update((ex.text.len() as u64).to_le_bytes());
        h.update(ex.text.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// The cache identity tag for a feature kind on a given backend.
pub fn kind_tag(backend: &dyn Backend, kind: FeatureKind, split: &TrainSplit) -> String {
    match kind {
        FeatureKind::HiddenState => kind.tag(),
        FeatureKind::FuzzyK(_) if backend.supports_similarity() => format!("{}:cosine", kind.tag()),
        FeatureKind::FuzzyK(_) => format!("{}:mean-prob:{}", kind.tag(), residual_fingerprint(split)),
    }
}

pub fn cache_meta(backend: &dyn Backend, template: &PromptTemplate, kind_tag: &str) -> CacheMeta {
    CacheMeta {
        backend_id: backend.id(),
        model_id: backend.model_id(),
        template_fingerprint: template.fingerprint(),
        kind_tag: kind_tag.to_string(),
        extra: Default::default(),
    }
}

/// Extracts one feature vector per residual and test sample, wrapping each
/// with the identical demonstration prefix. Cache hits skip the backend; a
/// cold run issues exactly `|R| + |test|` forward passes.
pub fn extract_all(backend: &dyn Backend, task: &ExtractionTask<'_>, cache: Option<&FeatureCache>) -> Result<ExtractedFeatures> {
    let prefix = PromptPrefix::new(task.template, &task.split.demonstrations, task.verbalizer)?;
    let samples: Vec<&LabeledExample> = task.split.residual.iter().chain(task.test.iter()).collect();
    let prompts: Vec<RenderedPrompt> = samples.iter().map(|s| prefix.wrap(&s.text)).collect();
    let n_train = task.split.residual.len();

    let tag = kind_tag(backend, task.kind, task.split);
    let backend_id = backend.id();
    let tfp = task.template.fingerprint();
    let keys: Vec<String> = prompts.iter().map(|p| cache_key(&backend_id, &tfp, &p.text, &tag)).collect();

    let mut values: Vec<Option<Vec<f32>>> = keys.iter().map(|k| cache.and_then(|c| c.get(k))).collect();
    let misses: Vec<usize> = (0..samples.len()).filter(|&i| values[i].is_none()).collect();
    let mut backend_calls = 0;
    let mut selector = None;

    match task.kind {
        FeatureKind::HiddenState => {
            let guard = WidthGuard::default();
            if let Some(c) = cache.filter(|c| c.dim() > 0) {
                guard.check(c.dim())?;
            }
            let fetched = parallel_map(misses.len(), backend.max_parallel(), |j| {
                let i = misses[j];
                extract_hidden(backend, &prompts[i], &guard)
                    .map(FeatureVector::into_values)
                    .map_err(|e| e.at_sample(i))
            });
            backend_calls += misses.len();
            for (j, r) in fetched.into_iter().enumerate() {
                values[misses[j]] = Some(r?);
            }
        }
        FeatureKind::FuzzyK(k) => {
            let labels = verbalizer_token_ids(backend, task.verbalizer)?;
            let stored = cache
                .and_then(|c| c.extra(&format!("selector:{tag}")))
                .and_then(|v| serde_json::from_value::<FuzzyKSelector>(v).ok());
            let mut dists: Vec<Option<VocabDistribution>> = vec![None; samples.len()];
            let sel = if backend.supports_similarity() {
                build_fuzzy_selector(backend, &labels, k)?
            } else if let (Some(s), true) = (stored.clone(), misses.is_empty()) {
                s
            } else {
                // Fallback ranking needs every residual distribution.
                let need: Vec<usize> = (0..n_train).collect();
                let fetched = parallel_map(need.len(), backend.max_parallel(), |j| {
                    extract_distribution(backend, &prompts[need[j]]).map_err(|e| e.at_sample(need[j]))
                });
                backend_calls += need.len();
                for (j, r) in fetched.into_iter().enumerate() {
                    dists[need[j]] = Some(r?);
                }
                let residual: Vec<(&VocabDistribution, usize)> = (0..n_train)
                    .map(|i| (dists[i].as_ref().unwrap(), samples[i].label))
                    .collect();
                FuzzyKSelector::from_mean_probability(&residual, &labels, k)?
            };
            let need: Vec<usize> = misses.iter().copied().filter(|&i| dists[i].is_none()).collect();
            let fetched = parallel_map(need.len(), backend.max_parallel(), |j| {
                extract_distribution(backend, &prompts[need[j]]).map_err(|e| e.at_sample(need[j]))
            });
            backend_calls += need.len();
            for (j, r) in fetched.into_iter().enumerate() {
                dists[need[j]] = Some(r?);
            }
            for &i in &misses {
                let d = dists[i].as_ref().expect("fetched above");
                values[i] = Some(featurize(&sel, d).into_values());
            }
            if let Some(c) = cache {
                c.set_extra(&format!("selector:{tag}"), serde_json::to_value(&sel)?);
            }
            selector = Some(sel);
        }
    }

    if let Some(c) = cache {
        for &i in &misses {
            c.insert(keys[i].clone(), values[i].clone().expect("filled"))?;
        }
        c.flush()?;
    }

    let mut features = values
        .into_iter()
        .enumerate()
        .map(|(i, v)| FeatureVector::new(v.expect("filled"), task.kind).map_err(|e| e.at_sample(i)))
        .collect::<Result<Vec<_>>>()?;
    let dim = features.first().map(FeatureVector::dim).unwrap_or(0);
    if let Some(bad) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: bad.dim() });
    }
    let test = features.split_off(n_train);
    Ok(ExtractedFeatures {
        train: features,
        train_labels: task.split.residual.iter().map(|e| e.label).collect(),
        test,
        test_labels: task.test.iter().map(|e| e.label).collect(),
        backend_calls,
        selector,
        prefix: prefix.text().to_string(),
    })
}

/// Serialized backend configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BackendDescriptor {
    RemoteHidden(RemoteConfig),
    RemoteLogprobs(RemoteConfig),
    RemoteEmbedding(RemoteConfig),
    Mock(MockConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model_id: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_context")]
    pub context_tokens: usize,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: usize,
    #[serde(default)]
    pub logprobs_api: LogprobsApi,
    #[serde(default = "default_embeddings_path")]
    pub embeddings_path: String,
    #[serde(default = "default_hidden_path")]
    pub hidden_path: String,
    #[serde(default = "default_completions_path")]
    pub completions_path: String,
    #[serde(default = "default_chat_path")]
    pub chat_path: String,
    /// First retry delay; later retries double it.
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: usize,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_parallel() -> usize {
    4
}
fn default_context() -> usize {
    1024
}
fn default_top_logprobs() -> usize {
    20
}
fn default_embeddings_path() -> String {
    "/v1/embeddings".into()
}
fn default_hidden_path() -> String {
    "/v1/embeddings".into()
}
fn default_completions_path() -> String {
    "/v1/completions".into()
}
fn default_chat_path() -> String {
    "/v1/chat/completions".into()
}
fn default_retry_base_ms() -> u64 {
    500
}
fn default_retries() -> usize {
    3
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        serde_json::from_value(serde_json::json!({
            "endpoint": endpoint.into(),
            "model_id": model_id.into(),
        }))
        .expect("defaults deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_parallel == 0 {
            return Err(Error::Config("max_parallel must be at least 1".into()));
        }
        if !(self.request_timeout_secs > 0.0) {
            return Err(Error::Config("request timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_secs)
    }
}

impl BackendDescriptor {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Instantiates the backend. The mock reads labels from `dataset`.
    pub fn build(&self, dataset: &TaskDataset) -> Result<Box<dyn Backend>> {
        Ok(match self {
            BackendDescriptor::Mock(cfg) => Box::new(MockBackend::new(cfg.clone(), dataset)?),
            BackendDescriptor::RemoteHidden(cfg) => Box::new(RemoteBackend::new(remote::RemoteMode::Hidden, cfg.clone())?),
            BackendDescriptor::RemoteLogprobs(cfg) => Box::new(RemoteBackend::new(remote::RemoteMode::Logprobs, cfg.clone())?),
            BackendDescriptor::RemoteEmbedding(cfg) => Box::new(RemoteBackend::new(remote::RemoteMode::Embedding, cfg.clone())?),
        })
    }
}
