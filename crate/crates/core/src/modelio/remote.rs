//! Black-box captioning through a chat-completions style HTTP endpoint.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::DecodeConfig;
use crate::hashing::json_hash;
use crate::{GlabError, Result};

pub const ENV_API_KEY: &str = "GLAB_API_KEY";
pub const ENV_API_BASE: &str = "GLAB_API_BASE";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout(String),
    Network(String),
}

/// Minimal HTTP seam so retries can be exercised without a network.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value, timeout: Duration) -> std::result::Result<HttpResponse, TransportError>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value, timeout: Duration) -> std::result::Result<HttpResponse, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        match req.send_json(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let body = resp.body_mut().read_to_string().map_err(|e| TransportError::Network(e.to_string()))?;
                Ok(HttpResponse { status, body })
            }
            Err(ureq::Error::Timeout(t)) => Err(TransportError::Timeout(t.to_string())),
            Err(e) => Err(TransportError::Network(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    pub model: String,
    /// Overrides the base URL from the environment.
    pub api_base: Option<String>,
    /// Name of the variable holding the API key.
    pub api_key_env: String,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_s: u64,
    pub max_concurrent: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            api_base: None,
            api_key_env: ENV_API_KEY.into(),
            max_retries: 5,
            initial_backoff_ms: 500,
            timeout_s: 60,
            max_concurrent: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryRecord {
    pub attempt: u32,
    pub reason: String,
    pub backoff_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub text: String,
    pub request_hash: String,
    pub retries: Vec<RetryRecord>,
    /// The request with the image payload elided.
    pub request: Value,
    pub raw_response: String,
}

struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl Gate {
    fn enter(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().expect("gate lock");
        while *n >= self.cap {
            n = self.freed.wait(n).expect("gate lock");
        }
        *n += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("gate lock") -= 1;
        self.0.freed.notify_one();
    }
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

pub struct RemoteClient {
    cfg: RemoteConfig,
    api_key: String,
    api_base: String,
    transport: Box<dyn Transport>,
    sleep: Sleeper,
    gate: Gate,
}

impl RemoteClient {
    /// Reads credentials from the environment; fails before any network use
    /// when they are missing.
    pub fn from_env(cfg: RemoteConfig, transport: Box<dyn Transport>) -> Result<Self> {
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GlabError::Config(format!("environment variable {} is not set", cfg.api_key_env)))?;
        let api_base = match &cfg.api_base {
            Some(b) => b.clone(),
            None => std::env::var(ENV_API_BASE)
                .ok()
                .filter(|b| !b.is_empty())
                .ok_or_else(|| GlabError::Config(format!("environment variable {ENV_API_BASE} is not set")))?,
        };
        Ok(Self::new(cfg, api_key, api_base, transport))
    }

    pub fn new(cfg: RemoteConfig, api_key: String, api_base: String, transport: Box<dyn Transport>) -> Self {
        let cap = cfg.max_concurrent.max(1);
        Self {
            cfg,
            api_key,
            api_base,
            transport,
            sleep: Box::new(std::thread::sleep),
            gate: Gate { in_flight: Mutex::new(0), freed: Condvar::new(), cap },
        }
    }

    /// Replaces the backoff sleep (tests use a no-op).
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    fn request_body(&self, image_png: &[u8], prompt: &str, decode: &DecodeConfig) -> Value {
        let b64 = base64::engine::general_purpose::STANDARD.encode(image_png);
        json!({
            "model": self.cfg.model,
            "temperature": decode.temperature,
            "max_tokens": decode.max_new_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}
                ]
            }]
        })
    }

    pub fn caption(&self, image_png: &[u8], prompt: &str, decode: &DecodeConfig) -> Result<RemoteResponse> {
        let body = self.request_body(image_png, prompt, decode);
        let request_hash = json_hash(&body);
        let mut archived = body.clone();
        archived["messages"][0]["content"][1]["image_url"]["url"] = Value::String(format!("<png sha256 {}>", crate::hashing::sha256_hex(image_png)));
        let url = format!("{}/chat/completions", self.api_base.trim_end_matches('/'));
        let headers = vec![
            ("Authorization".to_string(), format!("Bearer {}", self.api_key)),
            ("Content-Type".to_string(), "application/json".to_string()),
        ];
        let timeout = Duration::from_secs(self.cfg.timeout_s);
        let _slot = self.gate.enter();
        let mut retries = Vec::new();
        let mut attempt = 0u32;
        loop {
            let outcome = self.transport.post_json(&url, &headers, &body, timeout);
            let (reason, terminal) = match outcome {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    let text = extract_text(&resp.body)?;
                    return Ok(RemoteResponse { text, request_hash, retries, request: archived, raw_response: resp.body });
                }
                Ok(resp) if resp.status == 401 || resp.status == 403 => {
                    return Err(GlabError::Auth(format!("status {}: {}", resp.status, resp.body)));
                }
                Ok(resp) if resp.status == 429 => (format!("status 429: {}", resp.body), GlabError::Quota(resp.body)),
                Ok(resp) if resp.status >= 500 => {
                    (format!("status {}", resp.status), GlabError::Remote(format!("status {}: {}", resp.status, resp.body)))
                }
                Ok(resp) => return Err(GlabError::Remote(format!("status {}: {}", resp.status, resp.body))),
                Err(TransportError::Timeout(m)) => (format!("timeout: {m}"), GlabError::Timeout(m)),
                Err(TransportError::Network(m)) => (format!("network: {m}"), GlabError::Remote(m)),
            };
            if attempt >= self.cfg.max_retries {
                return Err(terminal);
            }
            let backoff_ms = self.cfg.initial_backoff_ms.saturating_mul(1u64 << attempt.min(20));
            attempt += 1;
            retries.push(RetryRecord { attempt, reason, backoff_ms });
            (self.sleep)(Duration::from_millis(backoff_ms));
        }
    }
}

fn extract_text(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| GlabError::Remote(format!("response is not JSON: {e}")))?;
    let content = &v["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join(""),
        _ => return Err(GlabError::Remote("response has no message content".into())),
    };
    if text.trim().is_empty() {
        return Err(GlabError::Remote("response text is empty".into()));
    }
    Ok(text)
}

/// Captions `image_png` with a remote model.
pub fn remote_caption(client: &RemoteClient, image_png: &[u8], prompt: &str, decode: &DecodeConfig) -> Result<RemoteResponse> {
    client.caption(image_png, prompt, decode)
}
