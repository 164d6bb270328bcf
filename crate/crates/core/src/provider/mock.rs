//! Deterministic offline providers.
//!
//! [`MockChatProvider`] answers from a scripted matcher table,
//! [`ClosureChatProvider`] from an arbitrary pure function,
//! [`SequenceChatProvider`] replays a fixed response sequence, and
//! [`HashEmbedder`] maps texts onto the unit sphere by hashing. Together
//! they make every pipeline in this crate runnable with zero network access.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{TokenCounter, WhitespacePunctCounter};
use crate::provider::{
    chat_fingerprint, check_context, prompt_text, ChatMessage, ChatProvider, CompletionResult,
    EmbeddingProvider, ProviderConfig, ProviderError,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Substring of the prompt text, or the full request fingerprint.
    pub matcher: String,
    pub response: String,
}

/// Ordered matcher table; the first matching rule wins, otherwise the
/// default response is returned.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default_response: String,
}

impl MockScript {
    pub fn new(default_response: impl Into<String>) -> Self {
        MockScript {
            rules: Vec::new(),
            default_response: default_response.into(),
        }
    }

    pub fn rule(mut self, matcher: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(MockRule {
            matcher: matcher.into(),
            response: response.into(),
        });
        self
    }

    pub fn respond(&self, prompt: &str, fingerprint: &str) -> &str {
        for rule in &self.rules {
            if prompt.contains(&rule.matcher) || rule.matcher == fingerprint {
                return &rule.response;
            }
        }
        &self.default_response
    }
}

/// Script-driven chat provider.
pub struct MockChatProvider {
    config: ProviderConfig,
    script: MockScript,
    counter: Arc<dyn TokenCounter>,
    calls: AtomicUsize,
}

impl MockChatProvider {
    pub fn new(config: ProviderConfig, script: MockScript) -> Self {
        MockChatProvider {
            config,
            script,
            counter: Arc::new(WhitespacePunctCounter),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for MockChatProvider {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResult, ProviderError> {
        let prompt_tokens = check_context(&self.config, self.counter.as_ref(), messages)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = prompt_text(messages);
        let fp = chat_fingerprint(&self.config, messages);
        let text = self.script.respond(&prompt, &fp).to_string();
        let completion_tokens = self.counter.count(&text);
        Ok(CompletionResult {
            text,
            prompt_tokens,
            completion_tokens,
            latency_ms: 0,
            provider: self.config.name.clone(),
            cached: false,
        })
    }
}

/// Chat provider backed by a pure function over the messages.
pub struct ClosureChatProvider {
    config: ProviderConfig,
    counter: Arc<dyn TokenCounter>,
    f: Box<dyn Fn(&[ChatMessage]) -> String + Send + Sync>,
}

impl ClosureChatProvider {
    pub fn new(
        config: ProviderConfig,
        f: impl Fn(&[ChatMessage]) -> String + Send + Sync + 'static,
    ) -> Self {
        ClosureChatProvider {
            config,
            counter: Arc::new(WhitespacePunctCounter),
            f: Box::new(f),
        }
    }
}

impl ChatProvider for ClosureChatProvider {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResult, ProviderError> {
        let prompt_tokens = check_context(&self.config, self.counter.as_ref(), messages)?;
        let text = (self.f)(messages);
        let completion_tokens = self.counter.count(&text);
        Ok(CompletionResult {
            text,
            prompt_tokens,
            completion_tokens,
            latency_ms: 0,
            provider: self.config.name.clone(),
            cached: false,
        })
    }
}

/// Replays responses in order regardless of the prompt; the last response
/// repeats once the sequence is exhausted. Useful for retry contracts.
pub struct SequenceChatProvider {
    config: ProviderConfig,
    counter: Arc<dyn TokenCounter>,
    responses: Mutex<VecDeque<String>>,
    last: Mutex<String>,
    calls: AtomicUsize,
}

impl SequenceChatProvider {
    pub fn new(config: ProviderConfig, responses: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let responses: VecDeque<String> = responses.into_iter().map(Into::into).collect();
        let last = responses.back().cloned().unwrap_or_default();
        SequenceChatProvider {
            config,
            counter: Arc::new(WhitespacePunctCounter),
            responses: Mutex::new(responses),
            last: Mutex::new(last),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for SequenceChatProvider {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResult, ProviderError> {
        let prompt_tokens = check_context(&self.config, self.counter.as_ref(), messages)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = {
            let mut q = self.responses.lock().expect("sequence lock");
            match q.pop_front() {
                Some(t) => t,
                None => self.last.lock().expect("last lock").clone(),
            }
        };
        let completion_tokens = self.counter.count(&text);
        Ok(CompletionResult {
            text,
            prompt_tokens,
            completion_tokens,
            latency_ms: 0,
            provider: self.config.name.clone(),
            cached: false,
        })
    }
}

/// Fails with a transport error for the first `failures` calls, then
/// answers every call with a fixed response.
pub struct FlakyChatProvider {
    config: ProviderConfig,
    counter: Arc<dyn TokenCounter>,
    remaining_failures: Mutex<u32>,
    response: String,
}

impl FlakyChatProvider {
    pub fn new(config: ProviderConfig, failures: u32, response: impl Into<String>) -> Self {
        FlakyChatProvider {
            config,
            counter: Arc::new(WhitespacePunctCounter),
            remaining_failures: Mutex::new(failures),
            response: response.into(),
        }
    }
}

impl ChatProvider for FlakyChatProvider {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResult, ProviderError> {
        let prompt_tokens = check_context(&self.config, self.counter.as_ref(), messages)?;
        {
            let mut remaining = self.remaining_failures.lock().expect("flaky lock");
            if *remaining > 0 {
                *remaining -= 1;
                return Err(ProviderError::Transport {
                    provider: self.config.name.clone(),
                    attempts: 1,
                    message: "simulated transport failure".into(),
                });
            }
        }
        Ok(CompletionResult {
            text: self.response.clone(),
            prompt_tokens,
            completion_tokens: self.counter.count(&self.response),
            latency_ms: 0,
            provider: self.config.name.clone(),
            cached: false,
        })
    }
}

/// Deterministic hashing-to-sphere embedder.
///
/// Component `i` of the vector for `text` is derived from the first eight
/// bytes of `SHA-256(text || i_le)` mapped linearly into `[-1, 1)`; the
/// vector is then L2-normalized. Identical texts always get identical unit
/// vectors, so `cosine(v, v) = 1`.
pub struct HashEmbedder {
    name: String,
    dim: usize,
}

impl HashEmbedder {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        HashEmbedder {
            name: name.into(),
            dim: dim.max(1),
        }
    }

    fn vector(&self, text: &str) -> Vec<f64> {
        let mut v: Vec<f64> = (0..self.dim)
            .map(|i| {
                let mut hasher = Sha256::new();
                hasher.update(text.as_bytes());
                hasher.update((i as u64).to_le_bytes());
                let digest = hasher.finalize();
                let mut bytes = [0u8; 8];
                bytes.copy_from_slice(&digest[..8]);
                let raw = u64::from_le_bytes(bytes);
                (raw as f64 / u64::MAX as f64) * 2.0 - 1.0
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyEmbedInput);
        }
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Embedding provider that always fails; used to exercise fallbacks.
pub struct FailingEmbedder;

impl EmbeddingProvider for FailingEmbedder {
    fn name(&self) -> &str {
        "failing-embedder"
    }

    fn dim(&self) -> usize {
        1
    }

    fn embed(&self, _texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Err(ProviderError::Transport {
            provider: "failing-embedder".into(),
            attempts: 1,
            message: "simulated embedding failure".into(),
        })
    }
}

/// Chat provider that always fails; used to exercise fallbacks.
pub struct FailingChatProvider {
    config: ProviderConfig,
}

impl FailingChatProvider {
    pub fn new(config: ProviderConfig) -> Self {
        FailingChatProvider { config }
    }
}

impl ChatProvider for FailingChatProvider {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn complete(&self, _messages: &[ChatMessage]) -> Result<CompletionResult, ProviderError> {
        Err(ProviderError::Transport {
            provider: self.config.name.clone(),
            attempts: 1,
            message: "simulated chat failure".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::cosine;

    #[test]
    fn scripted_first_match_wins() {
        let script = MockScript::new("fallback")
            .rule("butter", "crispy bacon")
            .rule("butt", "never reached");
        let provider = MockChatProvider::new(ProviderConfig::mock("m", 1000), script);
        let msgs = vec![ChatMessage::user("tell me about butter please")];
        let out = provider.complete(&msgs).unwrap();
        assert_eq!(out.text, "crispy bacon");
        // Determinism: identical messages, identical result.
        assert_eq!(provider.complete(&msgs).unwrap().text, "crispy bacon");

        let other = provider.complete(&[ChatMessage::user("unrelated")]).unwrap();
        assert_eq!(other.text, "fallback");
    }

    #[test]
    fn overflow_is_local_and_counts_no_call() {
        let provider = MockChatProvider::new(ProviderConfig::mock("m", 3), MockScript::new("x"));
        let msgs = vec![ChatMessage::user("one two three four five")];
        let err = provider.complete(&msgs).unwrap_err();
        assert!(matches!(err, ProviderError::ContextOverflow { prompt_tokens: 5, .. }));
        assert_eq!(provider.call_count(), 0);
    }

    #[test]
    fn sequence_pops_then_repeats() {
        let provider = SequenceChatProvider::new(
            ProviderConfig::mock("seq", 1000),
            ["great", "great", "5"],
        );
        let msgs = vec![ChatMessage::user("q")];
        assert_eq!(provider.complete(&msgs).unwrap().text, "great");
        assert_eq!(provider.complete(&msgs).unwrap().text, "great");
        assert_eq!(provider.complete(&msgs).unwrap().text, "5");
        assert_eq!(provider.complete(&msgs).unwrap().text, "5");
    }

    #[test]
    fn hash_embedder_is_deterministic_unit_sphere() {
        let e = HashEmbedder::new("h", 8);
        let vs = e
            .embed(&["alpha".to_string(), "alpha".to_string(), "beta".to_string()])
            .unwrap();
        assert_eq!(vs[0], vs[1]);
        assert_ne!(vs[0], vs[2]);
        for v in &vs {
            assert_eq!(v.len(), 8);
            assert!((cosine(v, v) - 1.0).abs() < 1e-12);
        }
    }
}
