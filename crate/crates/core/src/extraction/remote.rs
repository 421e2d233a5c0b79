//! OpenAI-compatible HTTP backend.
//!
//! Hidden states and embeddings use the `/v1/embeddings` schema. Token
//! distributions use `/v1/completions` with `max_tokens = 1` and
//! `logprobs = n`, or the chat form with `top_logprobs`. Remote token strings
//! are trimmed, whitespace variants are merged, and ids are FNV-1a 64 hashes
//! of the trimmed text.

use std::thread::sleep;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, RemoteConfig, TokenId, TokenProb, VocabDistribution};
use crate::error::{Error, Result};
use crate::prompting::RenderedPrompt;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogprobsApi {
    #[default]
    Completions,
    Chat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteMode {
    Hidden,
    Logprobs,
    Embedding,
}

impl RemoteMode {
    fn tag(self) -> &'static str {
        match self {
            RemoteMode::Hidden => "remote-hidden",
            RemoteMode::Logprobs => "remote-logprobs",
            RemoteMode::Embedding => "remote-embedding",
        }
    }
}

/// FNV-1a 64 over the trimmed token text.
pub fn token_id_for(text: &str) -> TokenId {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.trim().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    TokenId(h)
}

pub struct RemoteBackend {
    mode: RemoteMode,
    cfg: RemoteConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl RemoteBackend {
    pub fn new(mode: RemoteMode, cfg: RemoteConfig) -> Result<Self> {
        cfg.validate()?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteBackend {
            mode,
            cfg,
            agent,
            api_key,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.endpoint.trim_end_matches('/'), path)
    }

    fn attempt(&self, url: &str, body: &Value) -> std::result::Result<Value, Attempt> {
        let mut req = self.agent.post(url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| Attempt::Fatal(format!("malformed response: {e}")))
    }

    /// POSTs with up to `retries` retries, backing off `retry_base_ms`,
    /// doubling each time.
    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = self.url(path);
        let mut delay = Duration::from_millis(self.cfg.retry_base_ms);
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                warn!("{url}: {last}; retrying in {delay:?}");
                sleep(delay);
                delay *= 2;
            }
            match self.attempt(&url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(Error::BackendUnavailable(format!("{url}: {e}"))),
                Err(Attempt::Retry(e)) => last = e,
            }
        }
        Err(Error::BackendUnavailable(format!(
            "{url}: {last} after {} attempts",
            self.cfg.retries + 1
        )))
    }

    fn parse_top_logprobs(&self, v: &Value) -> Result<Vec<(String, f64)>> {
        let choice = v.pointer("/choices/0/logprobs").ok_or(Error::EmptySupport)?;
        let pairs: Vec<(String, f64)> = match self.cfg.logprobs_api {
            LogprobsApi::Completions => match choice.pointer("/top_logprobs/0") {
                Some(Value::Object(map)) => map
                    .iter()
                    .filter_map(|(k, lp)| lp.as_f64().map(|lp| (k.clone(), lp)))
                    .collect(),
                _ => Vec::new(),
            },
            LogprobsApi::Chat => choice
                .pointer("/content/0/top_logprobs")
                .and_then(Value::as_array)
                .map(|arr| {
                    arr.iter()
                        .filter_map(|e| Some((e.get("token")?.as_str()?.to_string(), e.get("logprob")?.as_f64()?)))
                        .collect()
                })
                .unwrap_or_default(),
        };
        if pairs.is_empty() {
            return Err(Error::EmptySupport);
        }
        Ok(pairs)
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> String {
        format!("{}:{}@{}", self.mode.tag(), self.cfg.model_id, self.cfg.endpoint)
    }

    fn model_id(&self) -> String {
        self.cfg.model_id.clone()
    }

    fn hidden(&self, prompt: &RenderedPrompt) -> Result<Vec<f32>> {
        let path = match self.mode {
            RemoteMode::Hidden => &self.cfg.hidden_path,
            RemoteMode::Embedding => &self.cfg.embeddings_path,
            RemoteMode::Logprobs => {
                return Err(Error::Config("a logprobs backend cannot produce hidden states".into()));
            }
        };
        let v = self.post(path, &json!({ "model": self.cfg.model_id, "input": prompt.text }))?;
        let arr = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::BackendUnavailable("response has no data[0].embedding".into()))?;
        arr.iter()
            .map(|x| {
                x.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| Error::BackendUnavailable("non-numeric embedding entry".into()))
            })
            .collect()
    }

    fn distribution(&self, prompt: &RenderedPrompt) -> Result<VocabDistribution> {
        if self.mode != RemoteMode::Logprobs {
            return Err(Error::Config(format!("{} backend cannot produce token distributions", self.mode.tag())));
        }
        let n = self.cfg.top_logprobs;
        let (path, body) = match self.cfg.logprobs_api {
            LogprobsApi::Completions => (
                &self.cfg.completions_path,
                json!({ "model": self.cfg.model_id, "prompt": prompt.text, "max_tokens": 1, "temperature": 0, "logprobs": n }),
            ),
            LogprobsApi::Chat => (
                &self.cfg.chat_path,
                json!({
                    "model": self.cfg.model_id,
                    "messages": [{ "role": "user", "content": prompt.text }],
                    "max_tokens": 1, "temperature": 0, "logprobs": true, "top_logprobs": n,
                }),
            ),
        };
        let v = self.post(path, &body)?;
        let pairs = self.parse_top_logprobs(&v)?;
        VocabDistribution::from_raw(pairs.into_iter().map(|(tok, lp)| TokenProb {
            id: token_id_for(&tok),
            token: tok.trim().to_string(),
            prob: lp.exp(),
        }))
    }

    fn token_id(&self, text: &str) -> Result<TokenId> {
        let t = text.trim();
        if t.is_empty() || t.contains(char::is_whitespace) {
            return Err(Error::MultiTokenVerbalizer(text.to_string()));
        }
        Ok(token_id_for(t))
    }

    fn max_parallel(&self) -> usize {
        self.cfg.max_parallel
    }

    fn context_tokens(&self) -> usize {
        self.cfg.context_tokens
    }
}
