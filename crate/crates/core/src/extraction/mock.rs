//! Deterministic stand-in for an LLM.
//!
//! Hidden states are class-conditioned Gaussians: each class gets a mean on
//! the unit sphere of the first `signal_dims` coordinates, scaled by
//! `separation`, plus independent noise (`noise` on signal coordinates,
//! `nuisance_noise` elsewhere). Next-token distributions are softmaxes over a
//! small vocabulary whose logits favour tokens whose embedding lies close to
//! the true label's token.
//!
//! The true label is looked up from the dataset record of the query text,
//! never parsed from the prompt. Noise is keyed by the full prompt, so a
//! given prompt always yields the same output.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Backend, TokenId, TokenProb, VocabDistribution};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::prompting::RenderedPrompt;
use crate::rng::{keyed_stream, stream, Substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    pub dim: usize,
    /// Coordinates carrying the class signal; `None` means all of them.
    pub signal_dims: Option<usize>,
    pub separation: f64,
    pub noise: f64,
    /// Noise on non-signal coordinates; defaults to `noise`.
    pub nuisance_noise: Option<f64>,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Logit bonus for tokens aligned with the true label.
    pub logit_signal: f64,
    /// Logit bonus for tokens aligned with any label.
    pub logit_prior: f64,
    pub logit_noise: f64,
    pub context_tokens: usize,
    pub max_parallel: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            seed: 0,
            dim: 64,
            signal_dims: None,
            separation: 6.0,
            noise: 1.0,
            nuisance_noise: None,
            vocab_size: 512,
            embed_dim: 16,
            logit_signal: 1.0,
            logit_prior: 4.0,
            logit_noise: 1.0,
            context_tokens: 1024,
            max_parallel: 1,
        }
    }
}

pub struct MockBackend {
    cfg: MockConfig,
    id: String,
    labels: HashMap<String, usize>,
    means: Vec<Vec<f64>>,
    vocab: Vec<String>,
    vocab_index: HashMap<String, TokenId>,
    embeddings: Vec<Vec<f32>>,
    /// Per class, per token: squared positive cosine to the class token.
    affinity: Vec<Vec<f64>>,
    prior: Vec<f64>,
    calls: AtomicUsize,
}

fn unit_gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl MockBackend {
    pub fn new(cfg: MockConfig, dataset: &TaskDataset) -> Result<Self> {
        let c = dataset.num_classes();
        let signal_dims = cfg.signal_dims.unwrap_or(cfg.dim);
        if cfg.dim == 0 || signal_dims == 0 || signal_dims > cfg.dim {
            return Err(Error::Config(format!("mock dims invalid: dim {} signal {signal_dims}", cfg.dim)));
        }
        if cfg.vocab_size < c || cfg.embed_dim == 0 || cfg.max_parallel == 0 {
            return Err(Error::Config("mock vocabulary, embedding width and parallelism must be positive".into()));
        }
        let mut rng = stream(cfg.seed, Substream::Mock);
        let means = (0..c)
            .map(|_| {
                let mut m: Vec<f64> = unit_gaussian(&mut rng, signal_dims)
                    .into_iter()
                    .map(|x| x * cfg.separation)
                    .collect();
                m.resize(cfg.dim, 0.0);
                m
            })
            .collect();

        let mut vocab: Vec<String> = dataset.verbalizer.tokens().to_vec();
        vocab.extend((c..cfg.vocab_size).map(|i| format!("tok{i}")));
        let vocab_index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u64)))
            .collect();

        let label_rows: Vec<Vec<f64>> = (0..c).map(|_| unit_gaussian(&mut rng, cfg.embed_dim)).collect();
        let mut embeddings = Vec::with_capacity(cfg.vocab_size);
        for t in 0..cfg.vocab_size {
            let row: Vec<f64> = if t < c {
                label_rows[t].clone()
            } else {
                let home = &label_rows[(t - c) % c];
                let a: f64 = rng.random();
                let r = unit_gaussian(&mut rng, cfg.embed_dim);
                home.iter().zip(&r).map(|(h, z)| a * h + (1.0 - a) * z).collect()
            };
            embeddings.push(row.into_iter().map(|x| x as f32).collect::<Vec<f32>>());
        }
        let cos = |a: &[f32], b: &[f32]| {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if na * nb > 0.0 {
                dot / (na * nb)
            } else {
                0.0
            }
        };
        let affinity: Vec<Vec<f64>> = (0..c)
            .map(|k| {
                embeddings
                    .iter()
                    .map(|e| cos(e, &embeddings[k]).max(0.0).powi(2))
                    .collect()
            })
            .collect();
        let prior = (0..cfg.vocab_size)
            .map(|t| affinity.iter().map(|a| a[t]).fold(0.0, f64::max))
            .collect();

        let mut labels = HashMap::new();
        for ex in dataset.train.iter().chain(&dataset.test) {
            labels.entry(ex.text.clone()).or_insert(ex.label);
        }

        let id = {
            use sha2::{Digest, Sha256};
            let json = serde_json::to_string(&cfg)?;
            let digest = Sha256::digest(json.as_bytes());
            format!("mock:{}", hex::encode(&digest[..6]))
        };

        Ok(MockBackend {
            cfg,
            id,
            labels,
            means,
            vocab,
            vocab_index,
            embeddings,
            affinity,
            prior,
            calls: AtomicUsize::new(0),
        })
    }

    /// Forward passes served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn config(&self) -> &MockConfig {
        &self.cfg
    }

    /// Per-class means of the hidden-state generator.
    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Per-coordinate noise standard deviation of the hidden-state generator.
    pub fn noise_scales(&self) -> Vec<f64> {
        let signal = self.cfg.signal_dims.unwrap_or(self.cfg.dim);
        let nuisance = self.cfg.nuisance_noise.unwrap_or(self.cfg.noise);
        (0..self.cfg.dim)
            .map(|i| if i < signal { self.cfg.noise } else { nuisance })
            .collect()
    }
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn hidden(&self, prompt: &RenderedPrompt) -> Result<Vec<f32>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let label = self.labels.get(&prompt.query).copied();
        let mut rng = keyed_stream(self.cfg.seed, prompt.text.as_bytes());
        let scales = self.noise_scales();
        Ok((0..self.cfg.dim)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                let mean = label.map(|y| self.means[y][i]).unwrap_or(0.0);
                (mean + scales[i] * z) as f32
            })
            .collect())
    }

    fn distribution(&self, prompt: &RenderedPrompt) -> Result<VocabDistribution> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let label = self.labels.get(&prompt.query).copied();
        let mut rng = keyed_stream(self.cfg.seed ^ 0x5eed, prompt.text.as_bytes());
        let logits: Vec<f64> = (0..self.cfg.vocab_size)
            .map(|t| {
                let z: f64 = rng.sample(StandardNormal);
                let signal = label.map(|y| self.affinity[y][t]).unwrap_or(0.0);
                self.cfg.logit_prior * self.prior[t] + self.cfg.logit_signal * signal + self.cfg.logit_noise * z
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        VocabDistribution::from_raw(exp.into_iter().enumerate().map(|(t, e)| TokenProb {
            id: TokenId(t as u64),
            token: self.vocab[t].clone(),
            prob: e / total,
        }))
    }

    fn token_id(&self, text: &str) -> Result<TokenId> {
        let t = text.trim();
        if t.is_empty() || t.contains(char::is_whitespace) {
            return Err(Error::MultiTokenVerbalizer(text.to_string()));
        }
        self.vocab_index
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidData(format!("token {t:?} is not in the mock vocabulary")))
    }

    fn token_embeddings(&self) -> Result<Vec<(TokenId, Vec<f32>)>> {
        Ok(self
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| (TokenId(i as u64), e.clone()))
            .collect())
    }

    fn supports_similarity(&self) -> bool {
        true
    }

    fn max_parallel(&self) -> usize {
        self.cfg.max_parallel
    }

    fn context_tokens(&self) -> usize {
        self.cfg.context_tokens
    }
}
