//! OpenAI-compatible HTTP transport: `POST {endpoint}/chat/completions` and
//! `POST {endpoint}/embeddings`. Retries per the provider's policy on 429,
//! 5xx, and transport failures; other statuses fail immediately.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenCounter, WhitespacePunctCounter};
use crate::provider::{
    check_context, with_retry, ChatMessage, ChatProvider, CompletionResult, EmbeddingProvider,
    ProviderConfig, ProviderError, Role,
};

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<WireMessage<'a>>,
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
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct Usage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

fn role_str(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

fn is_transient(err: &ProviderError) -> bool {
    match err {
        ProviderError::RateLimited { .. } => true,
        ProviderError::Transport { .. } => true,
        ProviderError::Api { status, .. } => *status >= 500,
        _ => false,
    }
}

pub struct HttpChatProvider {
    config: ProviderConfig,
    counter: Arc<dyn TokenCounter>,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpChatProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        Self::with_counter(config, Arc::new(WhitespacePunctCounter))
    }

    pub fn with_counter(
        config: ProviderConfig,
        counter: Arc<dyn TokenCounter>,
    ) -> Result<Self, ProviderError> {
        config.validate()?;
        if config.endpoint.is_empty() {
            return Err(ProviderError::BadConfig(
                config.name.clone(),
                "http provider needs an endpoint".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::BadConfig(config.name.clone(), e.to_string()))?;
        let api_key = std::env::var(config.api_key_env_name()).ok();
        Ok(HttpChatProvider {
            config,
            counter,
            client,
            api_key,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, ProviderError> {
        let name = &self.config.name;
        with_retry(
            &self.config.retry,
            |attempt| {
                let mut req = self.client.post(self.url(path)).json(body);
                if let Some(key) = &self.api_key {
                    req = req.bearer_auth(key);
                }
                let resp = req.send().map_err(|e| ProviderError::Transport {
                    provider: name.clone(),
                    attempts: attempt + 1,
                    message: e.to_string(),
                })?;
                let status = resp.status();
                if status.as_u16() == 429 {
                    return Err(ProviderError::RateLimited {
                        provider: name.clone(),
                        attempts: attempt + 1,
                    });
                }
                if !status.is_success() {
                    let message = resp.text().unwrap_or_default();
                    return Err(ProviderError::Api {
                        provider: name.clone(),
                        status: status.as_u16(),
                        message,
                    });
                }
                resp.json::<R>().map_err(|e| ProviderError::Transport {
                    provider: name.clone(),
                    attempts: attempt + 1,
                    message: format!("bad response body: {e}"),
                })
            },
            is_transient,
        )
    }
}

impl ChatProvider for HttpChatProvider {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResult, ProviderError> {
        // Decided locally; nothing leaves the process when this fires.
        let local_prompt_tokens = check_context(&self.config, self.counter.as_ref(), messages)?;
        let body = ChatRequest {
            model: &self.config.model,
            temperature: self.config.temperature,
            messages: messages
                .iter()
                .map(|m| WireMessage {
                    role: role_str(m.role),
                    content: &m.content,
                })
                .collect(),
        };
        let started = Instant::now();
        let resp: ChatResponse = self.post_json("chat/completions", &body)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let text = resp
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .ok_or_else(|| ProviderError::Api {
                provider: self.config.name.clone(),
                status: 200,
                message: "response had no choices".into(),
            })?;
        let usage = resp.usage.unwrap_or_default();
        Ok(CompletionResult {
            prompt_tokens: if usage.prompt_tokens > 0 {
                usage.prompt_tokens
            } else {
                local_prompt_tokens
            },
            completion_tokens: if usage.completion_tokens > 0 {
                usage.completion_tokens
            } else {
                self.counter.count(&text)
            },
            text,
            latency_ms,
            provider: self.config.name.clone(),
            cached: false,
        })
    }
}

pub struct HttpEmbeddingProvider {
    config: ProviderConfig,
    dim: usize,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpEmbeddingProvider {
    pub fn new(config: ProviderConfig, dim: usize) -> Result<Self, ProviderError> {
        config.validate()?;
        if config.endpoint.is_empty() {
            return Err(ProviderError::BadConfig(
                config.name.clone(),
                "http embedder needs an endpoint".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::BadConfig(config.name.clone(), e.to_string()))?;
        let api_key = std::env::var(config.api_key_env_name()).ok();
        Ok(HttpEmbeddingProvider {
            config,
            dim,
            client,
            api_key,
        })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyEmbedInput);
        }
        let name = &self.config.name;
        let body = EmbedRequest {
            model: &self.config.model,
            input: texts,
        };
        let resp: EmbedResponse = with_retry(
            &self.config.retry,
            |attempt| {
                let url = format!("{}/embeddings", self.config.endpoint.trim_end_matches('/'));
                let mut req = self.client.post(url).json(&body);
                if let Some(key) = &self.api_key {
                    req = req.bearer_auth(key);
                }
                let resp = req.send().map_err(|e| ProviderError::Transport {
                    provider: name.clone(),
                    attempts: attempt + 1,
                    message: e.to_string(),
                })?;
                let status = resp.status();
                if status.as_u16() == 429 {
                    return Err(ProviderError::RateLimited {
                        provider: name.clone(),
                        attempts: attempt + 1,
                    });
                }
                if !status.is_success() {
                    return Err(ProviderError::Api {
                        provider: name.clone(),
                        status: status.as_u16(),
                        message: resp.text().unwrap_or_default(),
                    });
                }
                resp.json::<EmbedResponse>()
                    .map_err(|e| ProviderError::Transport {
                        provider: name.clone(),
                        attempts: attempt + 1,
                        message: format!("bad response body: {e}"),
                    })
            },
            is_transient,
        )?;
        Ok(resp.data.into_iter().map(|d| d.embedding).collect())
    }
}
