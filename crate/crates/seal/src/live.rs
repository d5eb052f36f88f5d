//! OpenAI-compatible chat-completions client.

use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use seal_core::prompt::RequestSettings;
use seal_core::provider::{
    ChatProvider, ChatRequest, ChatResponse, FinishReason, ProviderError, Usage, DEFAULT_MAX_TOKENS,
    DEFAULT_TEMPERATURE,
};

pub const ENV_URL: &str = "SEAL_LLM_URL";
pub const ENV_MODEL: &str = "SEAL_LLM_MODEL";
pub const ENV_KEY: &str = "SEAL_LLM_KEY";

/// Endpoint and decoding settings for the live provider.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveConfig {
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub key: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0} is not set")]
    Missing(&'static str),
    #[error("cannot read {path}: {detail}")]
    Unreadable { path: String, detail: String },
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        "ProviderNotConfigured"
    }
}

impl LiveConfig {
    /// Reads an optional TOML file, then lets `SEAL_LLM_*` variables override it.
    pub fn resolve(file: Option<&Path>) -> Result<LiveConfig, ConfigError> {
        Self::resolve_with(file, |k| std::env::var(k).ok().filter(|v| !v.is_empty()))
    }

    pub fn resolve_with(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<LiveConfig, ConfigError> {
        let mut table = match file {
            Some(path) => {
                let unreadable = |detail: String| ConfigError::Unreadable {
                    path: path.display().to_string(),
                    detail,
                };
                let text = std::fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| unreadable(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for (var, key) in [(ENV_URL, "url"), (ENV_MODEL, "model"), (ENV_KEY, "key")] {
            if let Some(v) = env(var) {
                table.insert(key.into(), toml::Value::String(v));
            }
        }
        if !table.contains_key("url") {
            return Err(ConfigError::Missing(ENV_URL));
        }
        if !table.contains_key("model") {
            return Err(ConfigError::Missing(ENV_MODEL));
        }
        let origin = file.map_or_else(|| "environment".to_string(), |p| p.display().to_string());
        table.try_into().map_err(|e: toml::de::Error| ConfigError::Unreadable {
            path: origin,
            detail: e.to_string(),
        })
    }

    pub fn settings(&self) -> RequestSettings {
        RequestSettings {
            model_id: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    fn endpoint(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// Blocking client. Transport failures are retried twice, after 1s and 4s.
pub struct LiveProvider {
    config: LiveConfig,
    agent: ureq::Agent,
    backoff: Vec<Duration>,
}

impl LiveProvider {
    pub fn new(config: LiveConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        LiveProvider {
            config,
            agent,
            backoff: vec![Duration::from_secs(1), Duration::from_secs(4)],
        }
    }

    /// Replaces the retry delays; the number of delays is the retry count.
    pub fn with_backoff(mut self, backoff: Vec<Duration>) -> Self {
        self.backoff = backoff;
        self
    }

    fn attempt(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut call = self.agent.post(self.config.endpoint());
        if let Some(key) = &self.config.key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let transport = |detail: String| ProviderError::Transport { detail };
        let mut response = call.send_json(&body).map_err(|e| transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| transport(e.to_string()))?;
        match status {
            200..=299 => parse_completion(&text),
            401 | 403 => Err(ProviderError::Auth {
                detail: format!("HTTP {status}: {}", snippet(&text)),
            }),
            408 | 429 | 500..=599 => Err(transport(format!("HTTP {status}: {}", snippet(&text)))),
            _ => Err(ProviderError::InvalidRequest {
                detail: format!("HTTP {status}: {}", snippet(&text)),
            }),
        }
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<CompletionUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct CompletionUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn parse_completion(text: &str) -> Result<ChatResponse, ProviderError> {
    let transport = |detail: String| ProviderError::Transport { detail };
    let completion: Completion =
        serde_json::from_str(text).map_err(|e| transport(format!("unreadable completion: {e}")))?;
    let choice = completion
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| transport("completion has no choices".into()))?;
    let finish = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Truncated,
        _ => FinishReason::Complete,
    };
    let content = choice.message.content.unwrap_or_default();
    if content.is_empty() && finish == FinishReason::Complete {
        return Err(transport("completion has empty content".into()));
    }
    let usage = completion.usage.map_or(Usage::default(), |u| Usage {
        prompt_tokens: u.prompt_tokens,
        completion_tokens: u.completion_tokens,
    });
    Ok(ChatResponse {
        content,
        finish,
        usage,
    })
}

impl ChatProvider for LiveProvider {
    fn identity(&self) -> String {
        format!("live:{}", self.config.model)
    }

    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let mut delays = self.backoff.iter();
        loop {
            match self.attempt(request) {
                Err(e) if e.is_retryable() => match delays.next() {
                    Some(d) => thread::sleep(*d),
                    None => return Err(e),
                },
                other => return other,
            }
        }
    }
}
