//! OpenAI-compatible chat-completions backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendError, BackendKind, Completion, CompletionBackend, CompletionRequest};
use crate::model::Role;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    /// Send the run seed in the request body.
    pub forward_seed: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 120,
            forward_seed: true,
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let api_key = config.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(RemoteBackend { config, api_key, client })
    }

    /// Request body for the given query. Tool and error entries travel as
    /// user messages with a prefix, since the envelope contract carries tool
    /// calls in text.
    pub fn request_body(&self, req: &CompletionRequest<'_>) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = req
            .memory
            .iter()
            .map(|m| {
                let (role, content) = match m.role {
                    Role::System => ("system", m.content.clone()),
                    Role::User => ("user", m.content.clone()),
                    Role::Assistant => ("assistant", m.content.clone()),
                    Role::Tool => ("user", format!("[tool result]\n{}", m.content)),
                    Role::Error => ("user", format!("[error]\n{}", m.content)),
                };
                json!({"role": role, "content": content})
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.temperature,
        });
        if self.config.forward_seed {
            body["seed"] = json!(req.seed);
        }
        body
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl CompletionBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::HttpRemote
    }

    fn complete_once(&self, req: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        let mut http = self.client.post(&self.config.endpoint).json(&self.request_body(req));
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let resp = http.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {}", text.chars().take(300).collect::<String>())));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| BackendError::Transient(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Transient("response without content".into()))?;
        Ok(Completion {
            text,
            prompt_tokens: parsed.usage.as_ref().map(|u| u.prompt_tokens),
            completion_tokens: parsed.usage.as_ref().map(|u| u.completion_tokens),
        })
    }

    fn describe(&self) -> String {
        format!("remote:{}@{}", self.config.model, self.config.endpoint)
    }
}
