//! HTTP scorer for servers that echo prompt log-probabilities.
//!
//! Request: `POST {"model", "prompt_token_ids", "echo_logprobs": true}`.
//! Response: `{"token_logprobs": [...]}` with one entry per prompt token; the
//! first entry may be `null`.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ScoreError, Scorer};

/// Environment variable holding the bearer token for the remote scorer.
pub const API_KEY_ENV: &str = "LONGPPL_API_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "RemoteConfig::default_retries")]
    pub max_retries: u32,
    #[serde(default = "RemoteConfig::default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "RemoteConfig::default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "RemoteConfig::default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            max_retries: Self::default_retries(),
            initial_backoff_ms: Self::default_backoff_ms(),
            timeout_ms: Self::default_timeout_ms(),
            max_in_flight: Self::default_in_flight(),
            vocab_size: None,
        }
    }

    fn default_retries() -> u32 {
        3
    }

    fn default_backoff_ms() -> u64 {
        200
    }

    fn default_timeout_ms() -> u64 {
        120_000
    }

    fn default_in_flight() -> usize {
        4
    }
}

#[derive(Serialize)]
struct EchoRequest<'a> {
    model: &'a str,
    prompt_token_ids: &'a [u32],
    echo_logprobs: bool,
}

#[derive(Deserialize)]
struct EchoResponse {
    token_logprobs: Vec<Option<f64>>,
}

struct Permits {
    used: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut used = self.used.lock().expect("permit lock poisoned");
        while *used >= self.max {
            used = self.freed.wait(used).expect("permit lock poisoned");
        }
        *used += 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("permit lock poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteScorer {
    cfg: RemoteConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    permits: Permits,
}

enum Attempt {
    Retry(ScoreError),
    Fail(ScoreError),
}

impl RemoteScorer {
    pub fn new(cfg: RemoteConfig, api_key: Option<String>) -> Result<Self, ScoreError> {
        if cfg.max_in_flight == 0 {
            return Err(ScoreError::Config("max_in_flight must be at least 1".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let permits = Permits {
            used: Mutex::new(0),
            freed: Condvar::new(),
            max: cfg.max_in_flight,
        };
        Ok(RemoteScorer {
            cfg,
            api_key,
            agent,
            permits,
        })
    }

    /// Reads the bearer token from [`API_KEY_ENV`] when it is set.
    pub fn from_env(cfg: RemoteConfig) -> Result<Self, ScoreError> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(cfg, key)
    }

    fn attempt(&self, tokens: &[u32]) -> Result<Vec<Option<f64>>, Attempt> {
        let body = EchoRequest {
            model: &self.cfg.model,
            prompt_token_ids: tokens,
            echo_logprobs: true,
        };
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Attempt::Retry(ScoreError::Transport(e.to_string())))?;
        let status = resp.status().as_u16();
        if status >= 500 || status == 429 {
            return Err(Attempt::Retry(ScoreError::Transport(format!("HTTP {status}"))));
        }
        if status >= 400 {
            let detail = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fail(ScoreError::Transport(format!("HTTP {status}: {detail}"))));
        }
        let parsed: EchoResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Attempt::Fail(ScoreError::Protocol(format!("bad response body: {e}"))))?;
        Ok(parsed.token_logprobs)
    }

    fn request(&self, tokens: &[u32]) -> Result<Vec<Option<f64>>, ScoreError> {
        let _permit = self.permits.acquire();
        let mut backoff = Duration::from_millis(self.cfg.initial_backoff_ms);
        let mut attempt = 0;
        loop {
            match self.attempt(tokens) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= self.cfg.max_retries => {
                    return Err(ScoreError::Transport(format!(
                        "giving up after {} attempts: {e}",
                        attempt + 1
                    )))
                }
                Err(Attempt::Retry(_)) => {
                    thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

impl Scorer for RemoteScorer {
    fn logprob(&self, context: &[u32], target: u32) -> Result<f64, ScoreError> {
        let mut tokens = context.to_vec();
        tokens.push(target);
        Ok(self.score_suffix(&tokens, context.len())?[0])
    }

    /// One request per call; the server scores the whole prompt.
    fn score_suffix(&self, tokens: &[u32], from: usize) -> Result<Vec<f64>, ScoreError> {
        let values = self.request(tokens)?;
        if values.len() != tokens.len() {
            return Err(ScoreError::Protocol(format!(
                "server returned {} log-probabilities for {} prompt tokens",
                values.len(),
                tokens.len()
            )));
        }
        values[from..]
            .iter()
            .enumerate()
            .map(|(off, v)| {
                v.ok_or_else(|| ScoreError::AtToken {
                    token_index: from + off,
                    source: Box::new(ScoreError::Protocol("null log-probability".into())),
                })
            })
            .collect()
    }

    fn vocab_size(&self) -> Option<usize> {
        self.cfg.vocab_size
    }
}
