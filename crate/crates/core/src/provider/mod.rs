//! Chat-completion and embedding provider interface.
//!
//! Everything downstream (evaluation runs, memory extraction, retrieval,
//! data synthesis) talks to providers through [`ChatProvider`] and
//! [`EmbeddingProvider`]. Deterministic mock implementations live in
//! [`mock`]; an OpenAI-compatible HTTP transport is behind the `http`
//! feature.

pub mod mock;

#[cfg(feature = "http")]
pub mod http;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::TokenCounter;

/// System prompt used for every haystack question.
pub const NIAH_SYSTEM_PROMPT: &str =
    "You are a helpful AI bot that answers questions for a user. Keep your response short and direct";

/// Suffix appended (after a single space) to every haystack question.
pub const NIAH_QUESTION_SUFFIX: &str =
    "Don't give information outside the document or repeat your findings";

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("prompt needs {prompt_tokens} tokens but `{provider}` accepts at most {max_context_tokens}")]
    ContextOverflow {
        provider: String,
        prompt_tokens: usize,
        max_context_tokens: usize,
    },
    #[error("transport failure talking to `{provider}` after {attempts} attempt(s): {message}")]
    Transport {
        provider: String,
        attempts: u32,
        message: String,
    },
    #[error("`{provider}` rate limited after {attempts} attempt(s)")]
    RateLimited { provider: String, attempts: u32 },
    #[error("`{provider}` returned an API error (status {status}): {message}")]
    Api {
        provider: String,
        status: u16,
        message: String,
    },
    #[error("context must not be empty")]
    EmptyContext,
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error("no texts to embed")]
    EmptyEmbedInput,
    #[error("provider `{0}` cannot be constructed: {1}")]
    BadConfig(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Joined message contents, used by mock matchers and request summaries.
pub fn prompt_text(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub backoff_multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        // Exponential, three attempts.
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 500,
            backoff_multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn backoff_before_attempt(&self, attempt: u32) -> Duration {
        if attempt == 0 {
            return Duration::ZERO;
        }
        let ms = self.initial_backoff_ms as f64 * self.backoff_multiplier.powi(attempt as i32 - 1);
        Duration::from_millis(ms as u64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub name: String,
    pub model: String,
    #[serde(default)]
    pub endpoint: String,
    pub max_context_tokens: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Environment variable holding the credential; defaults to
    /// `<NAME>_API_KEY` with the provider name uppercased.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_max_parallel() -> usize {
    1
}

fn default_timeout_secs() -> u64 {
    60
}

impl ProviderConfig {
    pub fn mock(name: &str, max_context_tokens: usize) -> Self {
        ProviderConfig {
            name: name.into(),
            model: format!("{name}-model"),
            endpoint: String::new(),
            max_context_tokens,
            temperature: 0.0,
            max_parallel: 1,
            retry: RetryPolicy::default(),
            timeout_secs: 60,
            api_key_env: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.max_context_tokens == 0 {
            return Err(ProviderError::BadConfig(
                self.name.clone(),
                "max_context_tokens must be positive".into(),
            ));
        }
        if self.max_parallel == 0 {
            return Err(ProviderError::BadConfig(
                self.name.clone(),
                "max_parallel must be at least 1".into(),
            ));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ProviderError::BadConfig(
                self.name.clone(),
                format!("temperature {} outside [0, 2]", self.temperature),
            ));
        }
        Ok(())
    }

    pub fn api_key_env_name(&self) -> String {
        self.api_key_env.clone().unwrap_or_else(|| {
            let mut base: String = self
                .name
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() {
                        c.to_ascii_uppercase()
                    } else {
                        '_'
                    }
                })
                .collect();
            base.push_str("_API_KEY");
            base
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    #[serde(default)]
    pub latency_ms: u64,
    pub provider: String,
    /// True when the result was replayed from a run log instead of issued.
    #[serde(default)]
    pub cached: bool,
}

/// A chat-completion backend. Implementations check the context budget
/// locally before doing anything else: a [`ProviderError::ContextOverflow`]
/// never reaches the network.
pub trait ChatProvider: Send + Sync {
    fn config(&self) -> &ProviderConfig;
    fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResult, ProviderError>;
}

/// A text-embedding backend. One vector per input text, all the same length.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

/// Builds the three-message haystack prompt: the fixed system string, a user
/// message carrying the context, and a user message carrying the question
/// plus the fixed suffix.
pub fn build_niah_messages(
    context: &str,
    question: &str,
) -> Result<Vec<ChatMessage>, ProviderError> {
    if context.trim().is_empty() {
        return Err(ProviderError::EmptyContext);
    }
    if question.trim().is_empty() {
        return Err(ProviderError::EmptyQuestion);
    }
    Ok(vec![
        ChatMessage::system(NIAH_SYSTEM_PROMPT),
        ChatMessage::user(context),
        ChatMessage::user(format!("{question} {NIAH_QUESTION_SUFFIX}")),
    ])
}

/// Content hash identifying a chat request: provider name, model,
/// temperature, and the serialized messages. Identical requests always get
/// identical fingerprints, which is what makes resume idempotent.
pub fn chat_fingerprint(config: &ProviderConfig, messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"chat\x1f");
    hasher.update(config.name.as_bytes());
    hasher.update(b"\x1f");
    hasher.update(config.model.as_bytes());
    hasher.update(b"\x1f");
    hasher.update(format!("{}", config.temperature).as_bytes());
    for m in messages {
        hasher.update(b"\x1e");
        hasher.update(match m.role {
            Role::System => b"s",
            Role::User => b"u",
            Role::Assistant => b"a",
        });
        hasher.update(b"\x1f");
        hasher.update(m.content.as_bytes());
    }
    hex_digest(hasher)
}

/// Content hash identifying an embedding request.
pub fn embed_fingerprint(provider_name: &str, dim: usize, texts: &[String]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"embed\x1f");
    hasher.update(provider_name.as_bytes());
    hasher.update(b"\x1f");
    hasher.update(dim.to_le_bytes());
    for t in texts {
        hasher.update(b"\x1e");
        hasher.update(t.as_bytes());
    }
    hex_digest(hasher)
}

fn hex_digest(hasher: Sha256) -> String {
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Local context-budget check shared by provider implementations.
pub fn check_context(
    config: &ProviderConfig,
    counter: &dyn TokenCounter,
    messages: &[ChatMessage],
) -> Result<usize, ProviderError> {
    let prompt_tokens: usize = messages.iter().map(|m| counter.count(&m.content)).sum();
    if prompt_tokens > config.max_context_tokens {
        return Err(ProviderError::ContextOverflow {
            provider: config.name.clone(),
            prompt_tokens,
            max_context_tokens: config.max_context_tokens,
        });
    }
    Ok(prompt_tokens)
}

/// Runs `op` up to `policy.max_attempts` times, sleeping the policy's
/// backoff between attempts. Only errors classified transient by
/// `is_transient` are retried.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Result<T, ProviderError>,
    is_transient: impl Fn(&ProviderError) -> bool,
) -> Result<T, ProviderError> {
    let attempts = policy.max_attempts.max(1);
    let mut last_err = None;
    for attempt in 0..attempts {
        let backoff = policy.backoff_before_attempt(attempt);
        if !backoff.is_zero() {
            std::thread::sleep(backoff);
        }
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(e) => {
                if !is_transient(&e) || attempt + 1 == attempts {
                    return Err(e);
                }
                log::warn!("attempt {} failed, retrying: {e}", attempt + 1);
                last_err = Some(e);
            }
        }
    }
    Err(last_err.expect("loop returns before exhausting"))
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn niah_messages_are_exact() {
        let msgs = build_niah_messages("CTX", "Q").unwrap();
        assert_eq!(msgs.len(), 3);
        assert_eq!(msgs[0].role, Role::System);
        assert_eq!(
            msgs[0].content,
            "You are a helpful AI bot that answers questions for a user. Keep your response short and direct"
        );
        assert_eq!(msgs[1].role, Role::User);
        assert_eq!(msgs[1].content, "CTX");
        assert_eq!(msgs[2].role, Role::User);
        assert_eq!(
            msgs[2].content,
            "Q Don't give information outside the document or repeat your findings"
        );
        assert_eq!(msgs, build_niah_messages("CTX", "Q").unwrap());
    }

    #[test]
    fn niah_messages_reject_empty_inputs() {
        assert!(matches!(
            build_niah_messages("CTX", ""),
            Err(ProviderError::EmptyQuestion)
        ));
        assert!(matches!(
            build_niah_messages("  ", "Q"),
            Err(ProviderError::EmptyContext)
        ));
    }

    #[test]
    fn fingerprints_differ_by_any_component() {
        let cfg = ProviderConfig::mock("p", 100);
        let msgs = vec![ChatMessage::user("hello")];
        let base = chat_fingerprint(&cfg, &msgs);
        assert_eq!(base, chat_fingerprint(&cfg, &msgs));

        let mut cfg2 = cfg.clone();
        cfg2.model = "other".into();
        assert_ne!(base, chat_fingerprint(&cfg2, &msgs));

        let msgs2 = vec![ChatMessage::system("hello")];
        assert_ne!(base, chat_fingerprint(&cfg, &msgs2));
    }

    #[test]
    fn retry_retries_transient_and_stops_on_fatal() {
        let policy = RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 0,
            backoff_multiplier: 2.0,
        };
        let mut calls = 0;
        let out = with_retry(
            &policy,
            |_| {
                calls += 1;
                if calls < 3 {
                    Err(ProviderError::Transport {
                        provider: "p".into(),
                        attempts: 1,
                        message: "flaky".into(),
                    })
                } else {
                    Ok(42)
                }
            },
            |e| matches!(e, ProviderError::Transport { .. }),
        );
        assert_eq!(out.unwrap(), 42);
        assert_eq!(calls, 3);

        let mut calls = 0;
        let out: Result<i32, _> = with_retry(
            &policy,
            |_| {
                calls += 1;
                Err(ProviderError::EmptyQuestion)
            },
            |e| matches!(e, ProviderError::Transport { .. }),
        );
        assert!(out.is_err());
        assert_eq!(calls, 1);
    }

    #[test]
    fn api_key_env_defaults_from_name() {
        let cfg = ProviderConfig::mock("gpt-4o mini", 10);
        assert_eq!(cfg.api_key_env_name(), "GPT_4O_MINI_API_KEY");
    }
}
