//! Append-only run store: the per-call log that makes runs resumable, the
//! logging provider wrappers, and the deterministic output manifest.
//!
//! One writer per run directory. Every logged entry carries a content hash;
//! a log line that fails to parse or verify refuses to resume.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::provider::{
    chat_fingerprint, embed_fingerprint, prompt_text, ChatMessage, ChatProvider, CompletionResult,
    EmbeddingProvider, ProviderConfig, ProviderError,
};

pub const CALL_LOG_FILE: &str = "calls.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corrupt call log line {line} in {path}: {message}")]
    CorruptLog {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Chat,
    Embed,
}

/// A single logged provider call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallEntry {
    pub seq: u64,
    pub fingerprint: String,
    pub kind: CallKind,
    pub provider: String,
    pub request_summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_vectors: Option<Vec<Vec<f64>>>,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub latency_ms: u64,
    /// Token-based cost proxy: prompt plus completion tokens.
    pub cost_estimate: f64,
    /// SHA-256 of the entry serialized with this field empty.
    #[serde(default)]
    pub entry_hash: String,
}

impl CallEntry {
    fn compute_hash(&self) -> String {
        let mut clone = self.clone();
        clone.entry_hash = String::new();
        let bytes = serde_json::to_vec(&clone).expect("call entry serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

struct RunLogInner {
    file: Option<File>,
    by_fingerprint: HashMap<String, CallEntry>,
    next_seq: u64,
}

/// Append-only provider call log. Lookup by fingerprint is what `--resume`
/// uses to skip already-issued calls.
pub struct RunLog {
    path: Option<PathBuf>,
    inner: Mutex<RunLogInner>,
}

impl RunLog {
    /// Purely in-memory log (tests, browser demo).
    pub fn in_memory() -> Self {
        RunLog {
            path: None,
            inner: Mutex::new(RunLogInner {
                file: None,
                by_fingerprint: HashMap::new(),
                next_seq: 0,
            }),
        }
    }

    /// Creates (or truncates) the call log inside `dir`.
    pub fn create(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| StoreError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let path = dir.join(CALL_LOG_FILE);
        let file = File::create(&path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(RunLog {
            path: Some(path),
            inner: Mutex::new(RunLogInner {
                file: Some(file),
                by_fingerprint: HashMap::new(),
                next_seq: 0,
            }),
        })
    }

    /// Opens an existing log for resumption, verifying every line. A line
    /// that fails to parse or whose hash does not match refuses the resume.
    pub fn open_resume(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        let path = dir.join(CALL_LOG_FILE);
        let file = File::open(&path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut by_fingerprint = HashMap::new();
        let mut next_seq = 0u64;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|source| StoreError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CallEntry =
                serde_json::from_str(&line).map_err(|e| StoreError::CorruptLog {
                    path: path.display().to_string(),
                    line: line_no,
                    message: e.to_string(),
                })?;
            if entry.compute_hash() != entry.entry_hash {
                return Err(StoreError::CorruptLog {
                    path: path.display().to_string(),
                    line: line_no,
                    message: "entry hash mismatch".into(),
                });
            }
            next_seq = next_seq.max(entry.seq + 1);
            by_fingerprint.insert(entry.fingerprint.clone(), entry);
        }
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|source| StoreError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(RunLog {
            path: Some(path),
            inner: Mutex::new(RunLogInner {
                file: Some(file),
                by_fingerprint,
                next_seq,
            }),
        })
    }

    pub fn lookup(&self, fingerprint: &str) -> Option<CallEntry> {
        self.inner
            .lock()
            .expect("run log lock")
            .by_fingerprint
            .get(fingerprint)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("run log lock").by_fingerprint.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends an entry, assigning its sequence number and hash. Writes are
    /// serialized through the single internal writer.
    pub fn record(&self, mut entry: CallEntry) -> Result<CallEntry, StoreError> {
        let mut inner = self.inner.lock().expect("run log lock");
        entry.seq = inner.next_seq;
        inner.next_seq += 1;
        entry.entry_hash = entry.compute_hash();
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&entry).expect("call entry serializes");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|source| StoreError::Io {
                path: self
                    .path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                source,
            })?;
            file.flush().map_err(|source| StoreError::Io {
                path: self
                    .path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                source,
            })?;
        }
        inner
            .by_fingerprint
            .insert(entry.fingerprint.clone(), entry.clone());
        Ok(entry)
    }
}

fn summarize(text: &str) -> String {
    const LIMIT: usize = 120;
    if text.chars().count() <= LIMIT {
        text.to_string()
    } else {
        let cut: String = text.chars().take(LIMIT).collect();
        format!("{cut}…")
    }
}

/// Wraps a chat provider with fingerprint-keyed replay through a [`RunLog`].
/// A fingerprint already in the log is answered from the log; zero provider
/// calls are issued for it.
pub struct LoggingChatProvider {
    inner: Arc<dyn ChatProvider>,
    log: Arc<RunLog>,
}

impl LoggingChatProvider {
    pub fn new(inner: Arc<dyn ChatProvider>, log: Arc<RunLog>) -> Self {
        LoggingChatProvider { inner, log }
    }
}

impl ChatProvider for LoggingChatProvider {
    fn config(&self) -> &ProviderConfig {
        self.inner.config()
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResult, ProviderError> {
        let fingerprint = chat_fingerprint(self.inner.config(), messages);
        if let Some(entry) = self.log.lookup(&fingerprint) {
            if let Some(text) = entry.response_text {
                return Ok(CompletionResult {
                    text,
                    prompt_tokens: entry.prompt_tokens,
                    completion_tokens: entry.completion_tokens,
                    latency_ms: 0,
                    provider: entry.provider,
                    cached: true,
                });
            }
        }
        let started = Instant::now();
        let result = self.inner.complete(messages)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let entry = CallEntry {
            seq: 0,
            fingerprint,
            kind: CallKind::Chat,
            provider: result.provider.clone(),
            request_summary: summarize(&prompt_text(messages)),
            response_text: Some(result.text.clone()),
            response_vectors: None,
            prompt_tokens: result.prompt_tokens,
            completion_tokens: result.completion_tokens,
            latency_ms,
            cost_estimate: (result.prompt_tokens + result.completion_tokens) as f64,
            entry_hash: String::new(),
        };
        self.log.record(entry).map_err(|e| ProviderError::Transport {
            provider: result.provider.clone(),
            attempts: 1,
            message: format!("run log write failed: {e}"),
        })?;
        Ok(result)
    }
}

/// Embedding counterpart of [`LoggingChatProvider`].
pub struct LoggingEmbeddingProvider {
    inner: Arc<dyn EmbeddingProvider>,
    log: Arc<RunLog>,
}

impl LoggingEmbeddingProvider {
    pub fn new(inner: Arc<dyn EmbeddingProvider>, log: Arc<RunLog>) -> Self {
        LoggingEmbeddingProvider { inner, log }
    }
}

impl EmbeddingProvider for LoggingEmbeddingProvider {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let fingerprint = embed_fingerprint(self.inner.name(), self.inner.dim(), texts);
        if let Some(entry) = self.log.lookup(&fingerprint) {
            if let Some(vectors) = entry.response_vectors {
                return Ok(vectors);
            }
        }
        let started = Instant::now();
        let vectors = self.inner.embed(texts)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let entry = CallEntry {
            seq: 0,
            fingerprint,
            kind: CallKind::Embed,
            provider: self.inner.name().to_string(),
            request_summary: summarize(&texts.join(" | ")),
            response_text: None,
            response_vectors: Some(vectors.clone()),
            prompt_tokens: 0,
            completion_tokens: 0,
            latency_ms,
            cost_estimate: texts.len() as f64,
            entry_hash: String::new(),
        };
        self.log.record(entry).map_err(|e| ProviderError::Transport {
            provider: self.inner.name().to_string(),
            attempts: 1,
            message: format!("run log write failed: {e}"),
        })?;
        Ok(vectors)
    }
}

/// One product file of a run, hashed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Deterministic record of what a run produced. Contains no timestamps or
/// latencies: a pipeline rerun with identical inputs and mocks must write a
/// byte-identical manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct OutputManifest {
    pub command: String,
    pub config_hash: String,
    pub outputs: Vec<OutputFile>,
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<String, StoreError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(hash_bytes(&bytes))
}

/// Hashes `files` (paths relative to `dir`, in the given order) and writes
/// `manifest.json` into `dir`.
pub fn write_manifest(
    dir: impl AsRef<Path>,
    command: &str,
    config_hash: &str,
    files: &[&str],
) -> Result<OutputManifest, StoreError> {
    let dir = dir.as_ref();
    let mut outputs = Vec::with_capacity(files.len());
    for rel in files {
        let full = dir.join(rel);
        let bytes = std::fs::read(&full).map_err(|source| StoreError::Io {
            path: full.display().to_string(),
            source,
        })?;
        outputs.push(OutputFile {
            path: (*rel).to_string(),
            sha256: hash_bytes(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = OutputManifest {
        command: command.to_string(),
        config_hash: config_hash.to_string(),
        outputs,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::mock::{MockChatProvider, MockScript};
    use crate::provider::ProviderConfig;

    fn mock(name: &str) -> Arc<dyn ChatProvider> {
        Arc::new(MockChatProvider::new(
            ProviderConfig::mock(name, 10_000),
            MockScript::new("hello from mock"),
        ))
    }

    #[test]
    fn resume_replays_without_new_calls() {
        let dir = tempfile::tempdir().unwrap();
        let msgs = vec![ChatMessage::user("what's up")];
        {
            let log = Arc::new(RunLog::create(dir.path()).unwrap());
            let provider = LoggingChatProvider::new(mock("p"), log);
            let first = provider.complete(&msgs).unwrap();
            assert!(!first.cached);
        }
        // Reopen: identical fingerprint must be served from the log.
        let log = Arc::new(RunLog::open_resume(dir.path()).unwrap());
        assert_eq!(log.len(), 1);
        let inner = Arc::new(MockChatProvider::new(
            ProviderConfig::mock("p", 10_000),
            MockScript::new("hello from mock"),
        ));
        let counting = Arc::clone(&inner);
        let provider = LoggingChatProvider::new(inner, log);
        let replay = provider.complete(&msgs).unwrap();
        assert!(replay.cached);
        assert_eq!(replay.text, "hello from mock");
        assert_eq!(counting.call_count(), 0);
    }

    #[test]
    fn tampered_log_refuses_resume() {
        let dir = tempfile::tempdir().unwrap();
        {
            let log = Arc::new(RunLog::create(dir.path()).unwrap());
            let provider = LoggingChatProvider::new(mock("p"), log);
            provider.complete(&[ChatMessage::user("hi")]).unwrap();
        }
        let path = dir.path().join(CALL_LOG_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("hello from mock", "hello from rock")).unwrap();
        let err = RunLog::open_resume(dir.path()).unwrap_err();
        match err {
            StoreError::CorruptLog { line, message, .. } => {
                assert_eq!(line, 1);
                assert!(message.contains("hash"), "message: {message}");
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn corrupt_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path()).unwrap();
        std::fs::write(dir.path().join(CALL_LOG_FILE), "{not json}\n").unwrap();
        let err = RunLog::open_resume(dir.path()).unwrap_err();
        assert!(matches!(err, StoreError::CorruptLog { line: 1, .. }));
    }

    #[test]
    fn manifest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "alpha").unwrap();
        std::fs::write(dir.path().join("b.txt"), "beta").unwrap();
        let m1 = write_manifest(dir.path(), "test run", "cfg", &["a.txt", "b.txt"]).unwrap();
        let bytes1 = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let m2 = write_manifest(dir.path(), "test run", "cfg", &["a.txt", "b.txt"]).unwrap();
        let bytes2 = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(bytes1, bytes2);
    }
}
