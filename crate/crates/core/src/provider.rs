//! Chat-completion interface and the deterministic replay implementation.
//!
//! Replay matches on `(stage_tag, ordinal)` where the ordinal counts calls
//! per stage starting at 1, so prompt wording can change without breaking
//! recorded fixtures. The live HTTP provider lives in the `seal` crate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::json;

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

/// Which pipeline stage issued a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageTag {
    P1,
    P2,
    #[serde(rename = "P3_digest_unused")]
    P3DigestUnused,
    P4,
    #[serde(rename = "CRITIQUE")]
    Critique,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::P1 => "P1",
            StageTag::P2 => "P2",
            StageTag::P3DigestUnused => "P3_digest_unused",
            StageTag::P4 => "P4",
            StageTag::Critique => "CRITIQUE",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_id: String,
    pub stage_tag: StageTag,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), ProviderError> {
        let invalid = |detail: &str| {
            Err(ProviderError::InvalidRequest {
                detail: detail.to_string(),
            })
        };
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return invalid("request has no user message");
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return invalid("request contains an empty message");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return invalid("temperature outside [0, 2]");
        }
        if self.max_tokens == 0 {
            return invalid("max_tokens must be positive");
        }
        Ok(())
    }

    /// Concatenated message contents, for assertions and logging.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&m.content);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Complete,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish: FinishReason,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "code")]
pub enum ProviderError {
    #[error("transport failure: {detail}")]
    #[serde(rename = "TransportFailure")]
    Transport { detail: String },
    #[error("authentication failure: {detail}")]
    #[serde(rename = "AuthFailure")]
    Auth { detail: String },
    #[error("replay fixture has no entry for ({stage}, {ordinal})")]
    FixtureMiss { stage: StageTag, ordinal: u32 },
    #[error("invalid chat request: {detail}")]
    InvalidRequest { detail: String },
}

impl ProviderError {
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::Transport { .. } => "TransportFailure",
            ProviderError::Auth { .. } => "AuthFailure",
            ProviderError::FixtureMiss { .. } => "FixtureMiss",
            ProviderError::InvalidRequest { .. } => "InvalidRequest",
        }
    }

    /// Whether a later attempt can succeed without changing the request.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport { .. })
    }
}

pub trait ChatProvider {
    /// Stable identity recorded in reports (e.g. `replay:<hash>` or `live:<model>`).
    fn identity(&self) -> String;

    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for &mut P {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(request)
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for alloc::boxed::Box<P> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub stage: StageTag,
    pub ordinal: u32,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReplayFixture {
    pub entries: Vec<FixtureEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FixtureError {
    #[error("malformed fixture: {0}")]
    MalformedFixture(String),
    #[error("duplicate fixture entry ({stage}, {ordinal})")]
    DuplicateEntry { stage: StageTag, ordinal: u32 },
}

impl FixtureError {
    pub fn code(&self) -> &'static str {
        match self {
            FixtureError::MalformedFixture(_) => "MalformedFixture",
            FixtureError::DuplicateEntry { .. } => "DuplicateEntry",
        }
    }
}

/// Parses a fixture document `{"entries":[{"stage","ordinal","content"}]}`.
pub fn load_replay_fixture(text: &str) -> Result<ReplayFixture, FixtureError> {
    let fixture: ReplayFixture = serde_json::from_str(text)
        .map_err(|e| FixtureError::MalformedFixture(e.to_string()))?;
    fixture.validate()?;
    Ok(fixture)
}

impl ReplayFixture {
    pub fn validate(&self) -> Result<(), FixtureError> {
        let mut seen = Vec::<(StageTag, u32)>::new();
        for e in &self.entries {
            if e.ordinal == 0 {
                return Err(FixtureError::MalformedFixture(format!(
                    "entry for {} has ordinal 0; ordinals start at 1",
                    e.stage
                )));
            }
            if seen.contains(&(e.stage, e.ordinal)) {
                return Err(FixtureError::DuplicateEntry {
                    stage: e.stage,
                    ordinal: e.ordinal,
                });
            }
            seen.push((e.stage, e.ordinal));
        }
        Ok(())
    }

    pub fn entry(&self, stage: StageTag, ordinal: u32) -> Option<&FixtureEntry> {
        self.entries
            .iter()
            .find(|e| e.stage == stage && e.ordinal == ordinal)
    }

    pub fn fingerprint(&self) -> String {
        let canonical = json::to_canonical_string(self).unwrap_or_default();
        json::sha256_hex(canonical.as_bytes())
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).unwrap_or_default();
        out.push('\n');
        out
    }
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

/// Returns fixture-scripted responses in per-stage call order.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    fixture: ReplayFixture,
    calls: BTreeMap<StageTag, u32>,
}

impl ReplayProvider {
    pub fn new(fixture: ReplayFixture) -> Self {
        ReplayProvider {
            fixture,
            calls: BTreeMap::new(),
        }
    }

    /// Continues a session: the next call for each stage uses the ordinal
    /// after the ones already consumed.
    pub fn with_consumed(mut self, consumed: &BTreeMap<StageTag, u32>) -> Self {
        self.calls = consumed.clone();
        self
    }

    pub fn calls(&self, stage: StageTag) -> u32 {
        self.calls.get(&stage).copied().unwrap_or(0)
    }
}

impl ChatProvider for ReplayProvider {
    fn identity(&self) -> String {
        format!("replay:{}", &self.fixture.fingerprint()[..16])
    }

    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let counter = self.calls.entry(request.stage_tag).or_insert(0);
        *counter += 1;
        let ordinal = *counter;
        let entry = self
            .fixture
            .entry(request.stage_tag, ordinal)
            .ok_or(ProviderError::FixtureMiss {
                stage: request.stage_tag,
                ordinal,
            })?;
        Ok(ChatResponse {
            content: entry.content.clone(),
            finish: FinishReason::Complete,
            usage: Usage {
                prompt_tokens: request.messages.iter().map(|m| word_count(&m.content)).sum(),
                completion_tokens: word_count(&entry.content),
            },
        })
    }
}

/// Wraps another provider and records every successful exchange as a
/// fixture entry, turning a live run into a regression fixture.
pub struct RecordingProvider<P> {
    inner: P,
    calls: BTreeMap<StageTag, u32>,
    recorded: ReplayFixture,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        RecordingProvider {
            inner,
            calls: BTreeMap::new(),
            recorded: ReplayFixture::default(),
        }
    }

    pub fn fixture(&self) -> &ReplayFixture {
        &self.recorded
    }

    pub fn into_fixture(self) -> ReplayFixture {
        self.recorded
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let counter = self.calls.entry(request.stage_tag).or_insert(0);
        *counter += 1;
        let ordinal = *counter;
        let response = self.inner.complete(request)?;
        self.recorded.entries.push(FixtureEntry {
            stage: request.stage_tag,
            ordinal,
            content: response.content.clone(),
        });
        Ok(response)
    }
}
