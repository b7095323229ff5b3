//! Chat-completion access for the annotation stages.
//!
//! [`LlmGateway`] owns a [`ChatBackend`], renders prompts, validates replies,
//! retries, bounds concurrency and counts every physical request in an
//! [`LlmCallLedger`].

mod gateway;
pub mod mock;
pub mod openai;
pub mod prompt;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gateway::{LlmGateway, LlmRequest, ReplyFormat};
pub use mock::{FnBackend, MockFixture};
pub use openai::OpenAiBackend;

pub const DEFAULT_API_KEY_ENV: &str = "GST_LLM_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("reply has no {marker:?} line: {raw:?}")]
    ParseFailure { marker: String, raw: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no fixture response for {kind}/{key}")]
    MissingFixture { kind: CallKind, key: String },
    #[error("invalid fixture: {0}")]
    Fixture(String),
    #[error("invalid provider configuration: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    /// Whether another attempt may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::ParseFailure { .. } | Self::Transport(_) => true,
            Self::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Summarize,
    GenerateLabel,
    Classify,
}

impl std::fmt::Display for CallKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Summarize => "summarize",
            Self::GenerateLabel => "generate_label",
            Self::Classify => "classify",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteOpenaiCompatible,
    MockFixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmProviderConfig {
    pub provider: ProviderKind,
    pub endpoint_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub request_timeout_secs: u64,
    pub temperature: f64,
    /// First retry delay; doubles on each further attempt.
    pub backoff_base_ms: u64,
    /// JSONL fixture for the mock provider.
    pub fixture_path: Option<PathBuf>,
}

impl Default for LlmProviderConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::RemoteOpenaiCompatible,
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4o-mini".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            max_in_flight: 8,
            max_retries: 3,
            request_timeout_secs: 60,
            temperature: 0.0,
            backoff_base_ms: 1000,
            fixture_path: None,
        }
    }
}

impl LlmProviderConfig {
    pub fn mock() -> Self {
        Self {
            provider: ProviderKind::MockFixture,
            backoff_base_ms: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_in_flight == 0 {
            return Err(LlmError::Config("max_in_flight must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::Config("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

/// Exact per-kind request counters. `retry` counts attempts beyond the first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmCallLedger {
    pub summarize: u64,
    pub generate_label: u64,
    pub classify: u64,
    pub retry: u64,
}

impl LlmCallLedger {
    pub fn total(&self) -> u64 {
        self.summarize + self.generate_label + self.classify
    }

    pub fn record(&mut self, kind: CallKind, attempt: u32) {
        match kind {
            CallKind::Summarize => self.summarize += 1,
            CallKind::GenerateLabel => self.generate_label += 1,
            CallKind::Classify => self.classify += 1,
        }
        if attempt > 0 {
            self.retry += 1;
        }
    }

    /// Counter-wise difference `self - earlier`.
    pub fn since(&self, earlier: &Self) -> Self {
        Self {
            summarize: self.summarize - earlier.summarize,
            generate_label: self.generate_label - earlier.generate_label,
            classify: self.classify - earlier.classify,
            retry: self.retry - earlier.retry,
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.summarize += other.summarize;
        self.generate_label += other.generate_label;
        self.classify += other.classify;
        self.retry += other.retry;
    }
}

impl std::fmt::Display for LlmCallLedger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "summarize={} generate_label={} classify={} retry={}",
            self.summarize, self.generate_label, self.classify, self.retry
        )
    }
}

/// One physical chat-completion exchange.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;
}

/// Builds the backend named by `config`.
pub fn backend_from_config(config: &LlmProviderConfig) -> Result<Box<dyn ChatBackend>, LlmError> {
    config.validate()?;
    match config.provider {
        ProviderKind::MockFixture => {
            let path = config
                .fixture_path
                .as_ref()
                .ok_or_else(|| LlmError::Config("mock_fixture provider needs fixture_path".into()))?;
            Ok(Box::new(MockFixture::load(path)?))
        }
        ProviderKind::RemoteOpenaiCompatible => Ok(Box::new(OpenAiBackend::from_config(config)?)),
    }
}
