//! Chat-completion HTTP backend.
//!
//! Request body:
//!
//! ```text
//! { "model": <model>, "temperature": 0,
//!   "messages": [ {"role": "system", "content": <system prompt>},
//!                 {"role": "user", "content": [ {"type": "text", "text": <prompt>},
//!                                               <one part per image>... ]} ] }
//! ```
//!
//! `Uri` payloads become `image_url` parts (local files are inlined as base64
//! data URLs); feature and simulator payloads become text parts. The reply
//! text is read from `choices[0].message.content`.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompt::{descriptions_block, render_prompt, SYSTEM_TEMPLATE};
use super::{AnnotationKind, Annotator, AnnotatorRequest};
use crate::error::{Error, Result};
use crate::model::{Observation, Payload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    /// Environment variable holding the bearer token. Empty disables auth.
    pub auth_env: String,
    pub model: String,
    pub max_retries: u32,
    pub requests_per_minute: u32,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub backoff_base_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            auth_env: "CFNAV_API_KEY".into(),
            model: "gpt-4o".into(),
            max_retries: 3,
            requests_per_minute: 60,
            timeout_secs: 60,
            max_in_flight: 4,
            backoff_base_ms: 500,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.requests_per_minute == 0 {
            return Err(Error::Config("requests_per_minute must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be > 0".into()));
        }
        if self.endpoint.is_empty() {
            return Err(Error::Config("endpoint must be set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportError {
    pub retryable: bool,
    pub message: String,
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> std::result::Result<Value, TransportError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> std::result::Result<Value, TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| TransportError {
            retryable: true,
            message: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(TransportError {
                retryable: status.as_u16() == 429 || status.is_server_error(),
                message: format!("HTTP {status}: {text}"),
            });
        }
        resp.json().map_err(|e| TransportError {
            retryable: false,
            message: format!("invalid JSON body: {e}"),
        })
    }
}

/// Sliding-window limiter: at most `budget` acquisitions in any `window`.
pub struct RateLimiter {
    budget: usize,
    window: Duration,
    stamps: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(budget: u32, window: Duration) -> Self {
        Self {
            budget: budget.max(1) as usize,
            window,
            stamps: Mutex::new(VecDeque::new()),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut stamps = self.stamps.lock().unwrap();
                let now = Instant::now();
                while stamps.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
                    stamps.pop_front();
                }
                if stamps.len() < self.budget {
                    stamps.push_back(now);
                    return;
                }
                self.window - now.duration_since(stamps[0])
            };
            thread::sleep(wait);
        }
    }
}

/// Counting semaphore bounding in-flight requests.
pub struct Semaphore {
    free: Mutex<usize>,
    cond: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cond: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cond.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cond.notify_one();
    }
}

pub struct RemoteAnnotator<T> {
    cfg: BackendConfig,
    transport: T,
    token: Option<String>,
    limiter: RateLimiter,
    slots: Semaphore,
}

impl RemoteAnnotator<HttpTransport> {
    pub fn http(cfg: BackendConfig) -> Result<Self> {
        Self::new(cfg, HttpTransport::new()?)
    }
}

impl<T: Transport> RemoteAnnotator<T> {
    /// Fails immediately when the auth variable is configured but unset.
    pub fn new(cfg: BackendConfig, transport: T) -> Result<Self> {
        cfg.validate()?;
        let token = if cfg.auth_env.is_empty() {
            None
        } else {
            Some(std::env::var(&cfg.auth_env).map_err(|_| {
                Error::Config(format!("environment variable {} is not set", cfg.auth_env))
            })?)
        };
        Ok(Self {
            limiter: RateLimiter::new(cfg.requests_per_minute, Duration::from_secs(60)),
            slots: Semaphore::new(cfg.max_in_flight),
            cfg,
            transport,
            token,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn request_body(&self, req: &AnnotatorRequest) -> Result<Value> {
        let prompt = render_prompt(req)?;
        let mut parts = vec![json!({"type": "text", "text": prompt})];
        if req.kind == AnnotationKind::Summarize {
            if let Some(d) = &req.context.descriptions {
                parts.push(json!({"type": "text", "text": descriptions_block(d)}));
            }
        }
        let images: &[Observation] = match req.kind {
            AnnotationKind::Summarize => &[],
            AnnotationKind::Filter => &req.images[..req.images.len().min(1)],
            _ => &req.images,
        };
        parts.extend(images.iter().map(image_part));
        Ok(json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": SYSTEM_TEMPLATE},
                {"role": "user", "content": parts},
            ],
        }))
    }
}

fn image_part(obs: &Observation) -> Value {
    match &obs.payload {
        Payload::Uri { uri } => {
            let url = if uri.contains("://") || uri.starts_with("data:") {
                uri.clone()
            } else {
                inline_file(uri).unwrap_or_else(|| uri.clone())
            };
            json!({"type": "image_url", "image_url": {"url": url}})
        }
        Payload::Features { values } => json!({
            "type": "text",
            "text": format!("observation {} features: {:?}", obs.timestep, values),
        }),
        Payload::Sim { scene, pose, features } => json!({
            "type": "text",
            "text": format!(
                "observation {} in scene {scene} at ({:.3}, {:.3}, {:.3}) features: {:?}",
                obs.timestep, pose.x, pose.y, pose.yaw, features
            ),
        }),
    }
}

fn inline_file(path: &str) -> Option<String> {
    let bytes = std::fs::read(path).ok()?;
    let mime = match Path::new(path).extension()?.to_str()?.to_ascii_lowercase().as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "webp" => "image/webp",
        _ => "application/octet-stream",
    };
    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
    Some(format!("data:{mime};base64,{data}"))
}

/// Reads the reply text from a chat-completion response.
pub fn response_text(body: &Value) -> Option<String> {
    let content = body.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

impl<T: Transport> Annotator for RemoteAnnotator<T> {
    fn id(&self) -> String {
        format!("remote:{}:{}", self.cfg.endpoint, self.cfg.model)
    }

    fn complete(&self, req: &AnnotatorRequest) -> Result<String> {
        let body = self.request_body(req)?;
        let timeout = Duration::from_secs(self.cfg.timeout_secs);
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.cfg.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                debug!("retry {attempt} after {backoff} ms");
                thread::sleep(Duration::from_millis(backoff));
            }
            self.limiter.acquire();
            let result = {
                let _permit = self.slots.acquire();
                self.transport
                    .post_json(&self.cfg.endpoint, self.token.as_deref(), &body, timeout)
            };
            match result {
                Ok(v) => {
                    return response_text(&v).ok_or_else(|| Error::Transport {
                        attempts: attempt + 1,
                        message: "response has no choices[0].message.content".into(),
                    })
                }
                Err(e) if e.retryable => {
                    warn!("{} request failed (attempt {}): {e}", req.kind, attempt + 1);
                    last = e.message;
                }
                Err(e) => {
                    return Err(Error::Transport {
                        attempts: attempt + 1,
                        message: e.message,
                    })
                }
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }
}
