//! Live HTTP provider speaking the OpenAI-compatible chat-completions shape.
//!
//! Images travel as base64 data URLs. The optional thinking-budget knob is
//! injected as a provider-specific top-level field named in the config.

use super::{ChatRequest, Part, Provider, ProviderError, Role};
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::time::Duration;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub rate_per_minute: Option<f64>,
    #[serde(default = "default_true")]
    pub supports_images: bool,
    /// JSON field that carries the reasoning-token budget, when the provider
    /// has one (e.g. "max_reasoning_tokens"). Absent means no knob.
    #[serde(default)]
    pub thinking_budget_param: Option<String>,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_max_in_flight() -> usize {
    4
}

fn default_true() -> bool {
    true
}

pub struct HttpProvider {
    id: String,
    endpoint: String,
    api_key: Option<String>,
    thinking_budget_param: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(config: &HttpProviderConfig, api_key: Option<String>) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(HttpProvider {
            id: format!("http:{}", config.endpoint),
            endpoint: config.endpoint.clone(),
            api_key,
            thinking_budget_param: config.thinking_budget_param.clone(),
            client,
        })
    }

    fn body_for(&self, req: &ChatRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = req
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                // Text-only messages use the plain string form for maximum
                // endpoint compatibility.
                let only_text = m.parts.iter().all(|p| matches!(p, Part::Text(_)));
                let content = if only_text {
                    let text: String = m
                        .parts
                        .iter()
                        .map(|p| match p {
                            Part::Text(t) => t.as_str(),
                            Part::Image { .. } => unreachable!(),
                        })
                        .collect();
                    serde_json::Value::String(text)
                } else {
                    serde_json::Value::Array(
                        m.parts
                            .iter()
                            .map(|p| match p {
                                Part::Text(t) => serde_json::json!({"type": "text", "text": t}),
                                Part::Image { bytes, media_type } => {
                                    let b64 = base64::engine::general_purpose::STANDARD.encode(bytes.as_slice());
                                    serde_json::json!({
                                        "type": "image_url",
                                        "image_url": {"url": format!("data:{media_type};base64,{b64}")},
                                    })
                                }
                            })
                            .collect(),
                    )
                };
                serde_json::json!({"role": role, "content": content})
            })
            .collect();

        let mut body = serde_json::json!({
            "model": req.model,
            "messages": messages,
            "temperature": req.temperature,
            "n": 1,
        });
        if let Some(max) = req.max_output_tokens {
            body["max_tokens"] = serde_json::json!(max);
        }
        if let (Some(param), Some(budget)) = (&self.thinking_budget_param, req.thinking_budget_tokens) {
            body[param.as_str()] = serde_json::json!(budget);
        }
        body
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<serde_json::Value>,
}

fn content_to_text(content: serde_json::Value) -> String {
    match content {
        serde_json::Value::String(s) => s,
        serde_json::Value::Array(parts) => parts
            .into_iter()
            .filter_map(|p| p.get("text").and_then(|t| t.as_str()).map(str::to_string))
            .collect::<Vec<_>>()
            .join(""),
        _ => String::new(),
    }
}

impl Provider for HttpProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete_once(&self, req: &ChatRequest, _sample_index: u32) -> Result<String, ProviderError> {
        let mut request = self.client.post(&self.endpoint).json(&self.body_for(req));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Api {
                status: status.as_u16(),
                message: text.chars().take(500).collect(),
            });
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&text).map_err(|e| ProviderError::Transport(format!("bad response body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .map(content_to_text)
            .unwrap_or_default();
        if content.is_empty() {
            return Err(ProviderError::EmptyResponse);
        }
        Ok(content)
    }

    fn supports_thinking_budget(&self) -> bool {
        self.thinking_budget_param.is_some()
    }
}
