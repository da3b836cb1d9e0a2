//! Clients for the multimodal reasoning agent.
//!
//! [`Agent`] is the seam between curation and whatever model produces
//! captions and modification text. [`MockAgent`] is a deterministic stand-in
//! for tests and offline runs; [`HttpAgent`] talks to any chat-completion
//! endpoint that accepts `image_url` content parts.

use std::fs;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::prompts::{PromptKind, PromptTemplate};
use crate::error::{Error, Result};
use crate::tokens::hex_digest;

/// Where the bytes of an image come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    /// Only the id is known. Enough for the mock agent.
    None,
    File(PathBuf),
    /// Already-encoded base64 data with its MIME type.
    Base64 {
        mime: String,
        data: String,
    },
    Url(String),
}

/// An image handed to the agent: its corpus id plus an opaque payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRef {
    pub id: String,
    pub source: ImageSource,
}

impl ImageRef {
    pub fn id_only(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source: ImageSource::None,
        }
    }

    /// URL form accepted by chat-completion image parts.
    fn to_url(&self) -> Result<String> {
        match &self.source {
            ImageSource::None => Err(Error::InvalidConfig(format!(
                "image {:?} has no payload to send to a live agent",
                self.id
            ))),
            ImageSource::Url(u) => Ok(u.clone()),
            ImageSource::Base64 { mime, data } => Ok(format!("data:{mime};base64,{data}")),
            ImageSource::File(path) => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
                    Some(ext) if ext == "png" => "image/png",
                    Some(ext) if ext == "webp" => "image/webp",
                    Some(ext) if ext == "gif" => "image/gif",
                    _ => "image/jpeg",
                };
                let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                Ok(format!("data:{mime};base64,{data}"))
            }
        }
    }
}

/// One agent call: a rendered prompt plus the images it refers to, in order.
#[derive(Debug, Clone, Copy)]
pub struct AgentRequest<'a> {
    pub kind: PromptKind,
    pub prompt: &'a str,
    pub images: &'a [ImageRef],
}

pub trait Agent: Send + Sync {
    /// Model name recorded in every triplet.
    fn model(&self) -> &str;

    /// Raw completion text; callers trim and validate it.
    fn complete(&self, request: &AgentRequest<'_>) -> Result<String>;
}

/// First 16 hex characters of the SHA-256 of `prompt`.
pub fn prompt_digest(prompt: &str) -> String {
    let mut full = hex_digest(&Sha256::digest(prompt.as_bytes()));
    full.truncate(16);
    full
}

/// Deterministic agent whose output depends only on the image ids and the
/// rendered prompt.
///
/// Captions are `mock caption for <id>`. Modification texts name both ids
/// in order and embed [`prompt_digest`] of the rendered prompt, so a change
/// in template text or caption substitution changes the output.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockAgent;

impl Agent for MockAgent {
    fn model(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &AgentRequest<'_>) -> Result<String> {
        let id = |i: usize| request.images.get(i).map_or("?", |img| img.id.as_str());
        Ok(match request.kind {
            PromptKind::Caption => format!("mock caption for {}", id(0)),
            PromptKind::Modify => format!(
                "make {} look like {} [prompt {}]",
                id(0),
                id(1),
                prompt_digest(request.prompt)
            ),
            PromptKind::ModifyDirect => format!(
                "directly make {} look like {} [prompt {}]",
                id(0),
                id(1),
                prompt_digest(request.prompt)
            ),
        })
    }
}

/// Connection settings for a chat-completion endpoint.
#[derive(Clone)]
pub struct AgentEndpoint {
    /// Base URL up to and excluding `/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub temperature: f64,
    /// Delay before the first retry; doubled after each failed attempt.
    pub backoff: Duration,
}

impl std::fmt::Debug for AgentEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentEndpoint")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .field("temperature", &self.temperature)
            .field("backoff", &self.backoff)
            .finish()
    }
}

impl AgentEndpoint {
    pub fn validate(&self) -> Result<()> {
        if self.timeout.is_zero() {
            return Err(Error::InvalidConfig("agent timeout must be positive".into()));
        }
        if self.base_url.is_empty() || self.model.is_empty() {
            return Err(Error::InvalidConfig("agent base_url and model are required".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "agent temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Request body for a chat-completion call: one user message whose content
/// is the prompt text followed by one `image_url` part per image.
pub fn chat_request_body(model: &str, temperature: f64, request: &AgentRequest<'_>) -> Result<Value> {
    let mut content = vec![json!({"type": "text", "text": request.prompt})];
    for image in request.images {
        content.push(json!({"type": "image_url", "image_url": {"url": image.to_url()?}}));
    }
    Ok(json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
        "temperature": temperature,
    }))
}

/// Text of the first choice. Accepts both string content and an array of
/// text parts.
pub fn extract_reply(body: &Value) -> Option<String> {
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

/// Blocking chat-completion client with bounded retries.
pub struct HttpAgent {
    endpoint: AgentEndpoint,
    client: ureq::Agent,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpAgent {
    pub fn new(endpoint: AgentEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let client = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { endpoint, client })
    }

    pub fn endpoint(&self) -> &AgentEndpoint {
        &self.endpoint
    }

    fn attempt(&self, url: &str, body: &Value) -> std::result::Result<String, Attempt> {
        let mut req = self.client.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.endpoint.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let resp = req
            .send_json(body)
            .map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        match status {
            200..=299 => {}
            408 | 429 | 500..=599 => return Err(Attempt::Retry(format!("status {status}"))),
            _ => return Err(Attempt::Fatal(format!("status {status}: {}", text.trim()))),
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Attempt::Fatal(format!("invalid JSON reply: {e}")))?;
        extract_reply(&value).ok_or_else(|| Attempt::Fatal("reply has no choices[0].message.content".into()))
    }
}

impl Agent for HttpAgent {
    fn model(&self) -> &str {
        &self.endpoint.model
    }

    fn complete(&self, request: &AgentRequest<'_>) -> Result<String> {
        let body = chat_request_body(&self.endpoint.model, self.endpoint.temperature, request)?;
        let url = self.endpoint.completions_url();
        let attempts = self.endpoint.max_retries + 1;
        let mut delay = self.endpoint.backoff;
        let mut last = String::new();
        for n in 1..=attempts {
            match self.attempt(&url, &body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(reason)) => return Err(Error::AgentUnavailable { attempts: n, reason }),
                Err(Attempt::Retry(reason)) => {
                    log::warn!("agent attempt {n}/{attempts} failed: {reason}");
                    last = reason;
                }
            }
            if n < attempts {
                thread::sleep(delay);
                delay = delay.saturating_mul(2);
            }
        }
        Err(Error::AgentUnavailable { attempts, reason: last })
    }
}

fn clean(reply: String) -> Result<String> {
    let trimmed = reply.trim();
    if trimmed.is_empty() {
        return Err(Error::EmptyResponse);
    }
    Ok(trimmed.to_owned())
}

fn require(template: &PromptTemplate, kind: PromptKind) -> Result<()> {
    if template.kind != kind {
        return Err(Error::Template {
            name: template.kind.name().to_owned(),
            reason: format!("used where {kind} is required"),
        });
    }
    Ok(())
}

/// Captions one image with the `P_c` template.
pub fn generate_caption(agent: &dyn Agent, image: &ImageRef, template: &PromptTemplate) -> Result<String> {
    require(template, PromptKind::Caption)?;
    let prompt = template.render_plain()?;
    let images = std::slice::from_ref(image);
    clean(agent.complete(&AgentRequest {
        kind: PromptKind::Caption,
        prompt: &prompt,
        images,
    })?)
}

/// Modification text from both images and their captions (`P_m`).
pub fn generate_modification(
    agent: &dyn Agent,
    reference: &ImageRef,
    cap_ref: &str,
    target: &ImageRef,
    cap_target: &str,
    template: &PromptTemplate,
) -> Result<String> {
    require(template, PromptKind::Modify)?;
    if cap_ref.trim().is_empty() || cap_target.trim().is_empty() {
        return Err(Error::Template {
            name: template.kind.name().to_owned(),
            reason: "captions must be non-empty".into(),
        });
    }
    let prompt = template.render_with_captions(cap_ref, cap_target)?;
    let images = [reference.clone(), target.clone()];
    clean(agent.complete(&AgentRequest {
        kind: PromptKind::Modify,
        prompt: &prompt,
        images: &images,
    })?)
}

/// Modification text from the two images alone (`P_m′`).
pub fn generate_modification_direct(
    agent: &dyn Agent,
    reference: &ImageRef,
    target: &ImageRef,
    template: &PromptTemplate,
) -> Result<String> {
    require(template, PromptKind::ModifyDirect)?;
    let prompt = template.render_plain()?;
    let images = [reference.clone(), target.clone()];
    clean(agent.complete(&AgentRequest {
        kind: PromptKind::ModifyDirect,
        prompt: &prompt,
        images: &images,
    })?)
}
