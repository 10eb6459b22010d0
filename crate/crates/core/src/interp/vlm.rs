use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use image::RgbaImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::mask::encode_png;
use crate::error::{Error, Result};

pub const DEFAULT_PROMPT: &str = "Transparent regions of this image are irrelevant. \
Describe the dominant visual concept in the visible region. Provide only the description, in a few words.";
pub const DEFAULT_KEY_ENV: &str = "OPENAI_API_KEY";
const EXCERPT_CHARS: usize = 200;
const REDACTED: &str = "[redacted]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VlmConfig {
    /// Full URL of a chat-completions style endpoint.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; `None` sends no token.
    pub api_key_env: Option<String>,
    pub prompt: String,
    pub max_retries: usize,
    /// First backoff delay; doubles on each retry.
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub concurrency: usize,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: Some(DEFAULT_KEY_ENV.into()),
            prompt: DEFAULT_PROMPT.into(),
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 60,
            concurrency: 4,
        }
    }
}

/// One image question as it goes over the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmRequest {
    pub prompt: String,
    pub image_base64: String,
    pub media_type: String,
    pub endpoint: String,
    pub api_key_env: Option<String>,
}

impl VlmRequest {
    pub fn png(config: &VlmConfig, png: &[u8]) -> Result<Self> {
        if config.prompt.trim().is_empty() {
            return Err(Error::Argument("VLM prompt is empty".into()));
        }
        Ok(Self {
            prompt: config.prompt.clone(),
            image_base64: base64::engine::general_purpose::STANDARD.encode(png),
            media_type: "image/png".into(),
            endpoint: config.endpoint.clone(),
            api_key_env: config.api_key_env.clone(),
        })
    }

    pub fn body(&self, model: &str) -> Value {
        json!({
            "model": model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": self.prompt},
                    {"type": "image_url", "image_url": {
                        "url": format!("data:{};base64,{}", self.media_type, self.image_base64)
                    }}
                ]
            }]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub text: String,
    pub retries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    /// Consolidated description.
    pub text: String,
    pub replies: Vec<String>,
    pub retries: usize,
}

pub struct VlmClient {
    config: VlmConfig,
    agent: ureq::Agent,
    token: Option<String>,
    log: Mutex<Vec<String>>,
}

impl VlmClient {
    /// Builds a client, reading the token from the configured variable.
    pub fn new(config: VlmConfig) -> Result<Self> {
        let token = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Credential(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        Self::with_token(config, token)
    }

    pub fn with_token(config: VlmConfig, token: Option<String>) -> Result<Self> {
        if config.concurrency == 0 {
            return Err(Error::Argument("VLM concurrency must be at least 1".into()));
        }
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            config,
            agent,
            token: token.filter(|t| !t.is_empty()),
            log: Mutex::new(Vec::new()),
        })
    }

    /// Every line this client has logged, already redacted.
    pub fn log_lines(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }

    fn note(&self, line: String) {
        let line = match &self.token {
            Some(t) => line.replace(t.as_str(), REDACTED),
            None => line,
        };
        log::info!("{line}");
        self.log.lock().unwrap().push(line);
    }

    fn redact(&self, text: &str) -> String {
        match &self.token {
            Some(t) => text.replace(t.as_str(), REDACTED),
            None => text.to_string(),
        }
    }

    pub fn describe_png(&self, png: &[u8]) -> Result<Reply> {
        let req = VlmRequest::png(&self.config, png)?;
        let body = req.body(&self.config.model).to_string();
        let mut retries = 0;
        loop {
            self.note(format!(
                "vlm request: POST {} model={} image={} bytes attempt={}",
                req.endpoint,
                self.config.model,
                png.len(),
                retries + 1
            ));
            let mut call = self.agent.post(&req.endpoint).header("Content-Type", "application/json");
            if let Some(t) = &self.token {
                call = call.header("Authorization", &format!("Bearer {t}"));
            }
            let failure = match call.send(&body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    let excerpt = self.redact(&excerpt(&text));
                    self.note(format!("vlm response: status={status} body={excerpt:?}"));
                    match status {
                        200..=299 => {
                            let text = parse_reply(&text).map_err(|message| Error::Protocol { message, excerpt })?;
                            if retries > 0 {
                                self.note(format!("vlm request succeeded after {retries} retries"));
                            }
                            return Ok(Reply { text, retries });
                        }
                        401 | 403 => {
                            return Err(Error::Credential(format!("endpoint rejected the token with status {status}")))
                        }
                        500..=599 => format!("status {status}"),
                        _ => {
                            return Err(Error::Protocol {
                                message: format!("unexpected status {status}"),
                                excerpt,
                            })
                        }
                    }
                }
                Err(e) => self.redact(&e.to_string()),
            };
            if retries >= self.config.max_retries {
                return Err(Error::Transport(format!(
                    "{} failed after {retries} retries: {failure}",
                    req.endpoint
                )));
            }
            let wait = self.config.backoff_ms.saturating_mul(1 << retries.min(16));
            retries += 1;
            self.note(format!("vlm retry {retries} in {wait} ms after {failure}"));
            std::thread::sleep(Duration::from_millis(wait));
        }
    }

    /// Asks about every exemplar, at most `concurrency` at a time, and merges
    /// the answers.
    pub fn describe_concept(&self, exemplars: &[RgbaImage]) -> Result<Description> {
        if exemplars.is_empty() {
            return Err(Error::Argument("no exemplars to describe".into()));
        }
        let pngs = exemplars.iter().map(encode_png).collect::<Result<Vec<_>>>()?;
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Reply>>>> = pngs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..self.config.concurrency.min(pngs.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= pngs.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(self.describe_png(&pngs[i]));
                });
            }
        });
        let mut replies = Vec::new();
        let mut retries = 0;
        for slot in slots {
            let r = slot.into_inner().unwrap().expect("every exemplar is visited")?;
            retries += r.retries;
            replies.push(r.text);
        }
        let text = consolidate(&replies).expect("at least one reply");
        Ok(Description { text, replies, retries })
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(EXCERPT_CHARS).collect()
}

fn parse_reply(body: &str) -> std::result::Result<String, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    let content = &v["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(" "),
        _ => return Err("response has no choices[0].message.content".into()),
    };
    let text = text.trim().to_string();
    if text.is_empty() {
        return Err("response content is empty".into());
    }
    Ok(text)
}

fn tokens(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Picks the reply sharing the most words with the others (summed Jaccard
/// overlap); earliest wins ties.
pub fn consolidate(replies: &[String]) -> Option<String> {
    let sets: Vec<BTreeSet<String>> = replies.iter().map(|r| tokens(r)).collect();
    let score = |i: usize| -> f64 {
        (0..sets.len())
            .filter(|&j| j != i)
            .map(|j| {
                let inter = sets[i].intersection(&sets[j]).count() as f64;
                let union = sets[i].union(&sets[j]).count() as f64;
                if union > 0.0 {
                    inter / union
                } else {
                    0.0
                }
            })
            .sum()
    };
    let mut best: Option<(usize, f64)> = None;
    for i in 0..replies.len() {
        let s = score(i);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| replies[i].trim().to_string())
}
