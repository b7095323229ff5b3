//! OpenAI-compatible chat-completion backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, LlmError, LlmProviderConfig, LlmRequest};
use crate::http::{self, HttpFailure};

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct OpenAiBackend {
    agent: ureq::Agent,
    endpoint_url: String,
    model_name: String,
    api_key: Option<String>,
    temperature: f64,
}

impl std::fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("endpoint_url", &self.endpoint_url)
            .field("model_name", &self.model_name)
            .finish_non_exhaustive()
    }
}

impl OpenAiBackend {
    /// Reads the API key from the environment variable named in the config.
    /// A missing variable is allowed for endpoints without auth.
    pub fn from_config(config: &LlmProviderConfig) -> Result<Self, LlmError> {
        if config.endpoint_url.is_empty() {
            return Err(LlmError::Config("endpoint_url is empty".into()));
        }
        Ok(Self {
            agent: http::agent(Duration::from_secs(config.request_timeout_secs)),
            endpoint_url: config.endpoint_url.clone(),
            model_name: config.model_name.clone(),
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
            temperature: config.temperature,
        })
    }
}

impl ChatBackend for OpenAiBackend {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let body = ChatRequest {
            model: &self.model_name,
            messages: [ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: self.temperature,
        };
        let resp: ChatResponse =
            http::post_json(&self.agent, &self.endpoint_url, self.api_key.as_deref(), &body)
                .map_err(|e| match e {
                    HttpFailure::Transport(m) | HttpFailure::Decode(m) => LlmError::Transport(m),
                    HttpFailure::Status { status, body } => LlmError::Http { status, body },
                })?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Transport("response has no message content".into()))
    }
}
