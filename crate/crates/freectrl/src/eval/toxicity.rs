//! Client for a remote comment-analysis toxicity scorer. Disabled unless an
//! API key is configured; scores are cached on disk keyed by text hash so
//! repeated evaluations stay offline.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable holding the API key.
pub const API_KEY_ENV: &str = "PERSPECTIVE_API_KEY";

/// Public endpoint of the comment-analysis service.
pub const DEFAULT_ENDPOINT: &str =
    "https://commentanalyzer.googleapis.com/v1alpha1/comments:analyze";

#[derive(Debug)]
pub struct ToxicityClient {
    endpoint: String,
    api_key: String,
    cache_dir: Option<PathBuf>,
    min_interval: Duration,
    max_retries: u32,
    http: reqwest::blocking::Client,
    last_request: Mutex<Option<Instant>>,
}

impl ToxicityClient {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            cache_dir: None,
            min_interval: Duration::from_millis(1100),
            max_retries: 3,
            http: reqwest::blocking::Client::new(),
            last_request: Mutex::new(None),
        }
    }

    /// Builds a client from the environment; a clear disabled-feature error
    /// when the key is unset so other metrics can proceed without it.
    pub fn from_env() -> Result<Self> {
        match std::env::var(API_KEY_ENV) {
            Ok(key) if !key.trim().is_empty() => Ok(Self::new(DEFAULT_ENDPOINT, key)),
            _ => Err(Error::ToxicityDisabled(format!(
                "set {API_KEY_ENV} to enable remote toxicity scoring"
            ))),
        }
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn with_min_interval(mut self, interval: Duration) -> Self {
        self.min_interval = interval;
        self
    }

    fn cache_path(&self, text: &str) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let digest = Sha256::digest(text.as_bytes());
        let name: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        Some(dir.join(format!("{name}.json")))
    }

    fn read_cache(&self, text: &str) -> Option<f64> {
        let path = self.cache_path(text)?;
        let raw = std::fs::read_to_string(path).ok()?;
        serde_json::from_str::<serde_json::Value>(&raw)
            .ok()?
            .get("toxicity")?
            .as_f64()
    }

    fn write_cache(&self, text: &str, score: f64) -> Result<()> {
        let Some(path) = self.cache_path(text) else {
            return Ok(());
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string(&json!({ "toxicity": score }))?)?;
        Ok(())
    }

    fn throttle(&self) {
        let mut last = self.last_request.lock().expect("rate limit lock");
        if let Some(at) = *last {
            let elapsed = at.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn request_score(&self, text: &str) -> Result<f64> {
        let url = format!("{}?key={}", self.endpoint, self.api_key);
        let body = json!({
            "comment": { "text": text },
            "languages": ["en"],
            "requestedAttributes": { "TOXICITY": {} },
        });
        let response = self
            .http
            .post(&url)
            .json(&body)
            .send()
            .map_err(|e| Error::ToxicityService(e.to_string()))?;
        if !response.status().is_success() {
            return Err(Error::ToxicityService(format!(
                "HTTP {}",
                response.status()
            )));
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| Error::ToxicityService(e.to_string()))?;
        value
            .pointer("/attributeScores/TOXICITY/summaryScore/value")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::ToxicityService("response lacks a toxicity score".to_string()))
    }

    /// Scores one text, serving from cache when possible.
    pub fn score(&self, text: &str) -> Result<f64> {
        if let Some(hit) = self.read_cache(text) {
            return Ok(hit);
        }
        let mut last_err = None;
        for attempt in 0..self.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(500 << attempt));
            }
            self.throttle();
            match self.request_score(text) {
                Ok(score) => {
                    self.write_cache(text, score)?;
                    return Ok(score);
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    /// Scores many texts, serialized under the rate limit.
    pub fn score_batch(&self, texts: &[impl AsRef<str>]) -> Result<Vec<f64>> {
        texts.iter().map(|t| self.score(t.as_ref())).collect()
    }
}
