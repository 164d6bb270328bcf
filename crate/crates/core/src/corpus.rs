//! Corpus ingestion, item rendering, and token-budgeted haystack assembly.
//!
//! A corpus is one user's notes and chat sessions in chronological order. A
//! haystack is the newest suffix of that corpus whose rendered token count
//! fits a target budget, rendered to a single text with tracked per-item
//! token boundaries.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

/// Separator placed between rendered items in a haystack. Counts as zero
/// tokens under the default counter, which keeps boundary arithmetic exact.
pub const ITEM_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("duplicate item id `{id}` at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("mixed user ids in corpus file: `{first}` then `{other}` at line {line}")]
    MixedUsers {
        first: String,
        other: String,
        line: usize,
    },
    #[error("invalid item `{id}`: {message}")]
    InvalidItem { id: String, message: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("newest item needs {needed} tokens but the budget is {target}")]
    InsufficientBudget { needed: usize, target: usize },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnRole {
    User,
    Assistant,
}

impl fmt::Display for TurnRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TurnRole::User => write!(f, "USER"),
            TurnRole::Assistant => write!(f, "ASSISTANT"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Turn {
    pub role: TurnRole,
    pub text: String,
    pub at: DateTime<Utc>,
}

/// One raw corpus item: a note or a chat session.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RawItem {
    Note {
        id: String,
        user_id: String,
        created_at: DateTime<Utc>,
        title: String,
        summary: String,
        content: String,
    },
    Chat {
        id: String,
        user_id: String,
        started_at: DateTime<Utc>,
        turns: Vec<Turn>,
    },
}

impl RawItem {
    pub fn id(&self) -> &str {
        match self {
            RawItem::Note { id, .. } | RawItem::Chat { id, .. } => id,
        }
    }

    pub fn user_id(&self) -> &str {
        match self {
            RawItem::Note { user_id, .. } | RawItem::Chat { user_id, .. } => user_id,
        }
    }

    pub fn timestamp(&self) -> DateTime<Utc> {
        match self {
            RawItem::Note { created_at, .. } => *created_at,
            RawItem::Chat { started_at, .. } => *started_at,
        }
    }

    /// Kind-specific validity: notes carry content, chats carry at least one
    /// turn with non-decreasing timestamps.
    pub fn validate(&self) -> Result<(), CorpusError> {
        match self {
            RawItem::Note { id, content, .. } => {
                if content.is_empty() {
                    return Err(CorpusError::InvalidItem {
                        id: id.clone(),
                        message: "note content is empty".into(),
                    });
                }
            }
            RawItem::Chat { id, turns, .. } => {
                if turns.is_empty() {
                    return Err(CorpusError::InvalidItem {
                        id: id.clone(),
                        message: "chat session has no turns".into(),
                    });
                }
                for pair in turns.windows(2) {
                    if pair[1].at < pair[0].at {
                        return Err(CorpusError::InvalidItem {
                            id: id.clone(),
                            message: "turn timestamps decrease".into(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Renders an item to its deterministic text form.
///
/// Notes: `[date] title`, then the summary line, then the content.
/// Chats: `[date] Chat`, then one `USER:`/`ASSISTANT:` line per turn.
pub fn render_item(item: &RawItem) -> String {
    match item {
        RawItem::Note {
            created_at,
            title,
            summary,
            content,
            ..
        } => format!(
            "[{}] {}\n{}\n{}",
            created_at.format("%Y-%m-%d"),
            title,
            summary,
            content
        ),
        RawItem::Chat {
            started_at, turns, ..
        } => {
            let mut out = format!("[{}] Chat", started_at.format("%Y-%m-%d"));
            for turn in turns {
                out.push('\n');
                out.push_str(&format!("{}: {}", turn.role, turn.text));
            }
            out
        }
    }
}

/// A user's chronologically sorted items. Ties on the timestamp are broken
/// by id ascending, so the order is total and deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub user_id: String,
    items: Vec<RawItem>,
}

impl Corpus {
    pub fn from_items(user_id: impl Into<String>, mut items: Vec<RawItem>) -> Result<Self, CorpusError> {
        let user_id = user_id.into();
        let mut seen = HashSet::new();
        for item in &items {
            item.validate()?;
            if !seen.insert(item.id().to_string()) {
                return Err(CorpusError::DuplicateId {
                    id: item.id().to_string(),
                    line: 0,
                });
            }
        }
        items.sort_by(|a, b| {
            a.timestamp()
                .cmp(&b.timestamp())
                .then_with(|| a.id().cmp(b.id()))
        });
        Ok(Corpus { user_id, items })
    }

    pub fn empty() -> Self {
        Corpus {
            user_id: String::new(),
            items: Vec::new(),
        }
    }

    pub fn items(&self) -> &[RawItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&RawItem> {
        self.items.iter().find(|i| i.id() == id)
    }

    /// Total token count of all rendered items (separators excluded).
    pub fn rendered_tokens(&self, counter: &dyn TokenCounter) -> usize {
        self.items
            .iter()
            .map(|i| counter.count(&render_item(i)))
            .sum()
    }
}

/// Reads a line-delimited corpus file: one JSON record per line with a
/// `kind` field of `note` or `chat`. Blank lines are ignored. All records
/// must belong to one user.
pub fn ingest(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut items = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut user_id: Option<String> = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item: RawItem =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        item.validate().map_err(|e| CorpusError::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(item.id().to_string()) {
            return Err(CorpusError::DuplicateId {
                id: item.id().to_string(),
                line: line_no,
            });
        }
        match &user_id {
            None => user_id = Some(item.user_id().to_string()),
            Some(u) if u != item.user_id() => {
                return Err(CorpusError::MixedUsers {
                    first: u.clone(),
                    other: item.user_id().to_string(),
                    line: line_no,
                })
            }
            _ => {}
        }
        items.push(item);
    }
    Corpus::from_items(user_id.unwrap_or_default(), items)
}

/// Writes a corpus back out as line-delimited records.
pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut out = String::new();
    for item in corpus.items() {
        out.push_str(&serde_json::to_string(item).expect("corpus items serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A named deterministic text -> token-count rule.
pub trait TokenCounter: Send + Sync {
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// The default counter: Unicode whitespace separates tokens, every ASCII
/// punctuation character is a token of its own, remaining runs are one token
/// each. See [`crate::text::token_spans`] for the exact rule.
#[derive(Debug, Default, Clone, Copy)]
pub struct WhitespacePunctCounter;

impl TokenCounter for WhitespacePunctCounter {
    fn name(&self) -> &str {
        "whitespace-punct"
    }

    fn count(&self, text: &str) -> usize {
        text::count_tokens(text)
    }
}

/// One rendered item inside a haystack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HaystackEntry {
    pub item_id: String,
    pub timestamp: DateTime<Utc>,
    pub text: String,
    pub tokens: usize,
}

/// The newest suffix of a corpus rendered into one text, with per-item token
/// counts. `token_length <= target_length` always holds, and dropping the
/// constraint on the next-older item would exceed the target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Haystack {
    pub user_id: String,
    pub entries: Vec<HaystackEntry>,
    pub rendered_text: String,
    pub token_length: usize,
    pub target_length: usize,
    pub separator_tokens: usize,
}

impl Haystack {
    /// Token offsets of the item boundaries: `n + 1` strictly increasing
    /// values, starting at 0 and ending at `token_length`. Boundary `i` is
    /// the insertion point immediately before entry `i`.
    pub fn boundaries(&self) -> Vec<usize> {
        let n = self.entries.len();
        let mut out = Vec::with_capacity(n + 1);
        let mut acc = 0usize;
        out.push(0);
        for (i, entry) in self.entries.iter().enumerate() {
            acc += entry.tokens;
            if i + 1 < n {
                acc += self.separator_tokens;
            }
            out.push(acc);
        }
        out
    }

    pub fn max_entry_tokens(&self) -> usize {
        self.entries.iter().map(|e| e.tokens).max().unwrap_or(0)
    }
}

/// Builds the rendered text for a list of entries.
pub(crate) fn join_entries(entries: &[HaystackEntry]) -> String {
    entries
        .iter()
        .map(|e| e.text.as_str())
        .collect::<Vec<_>>()
        .join(ITEM_SEPARATOR)
}

/// Selects the maximal chronological suffix of `corpus` whose rendered token
/// count (items plus separators) fits `target_tokens`.
pub fn assemble_haystack(
    corpus: &Corpus,
    target_tokens: usize,
    counter: &dyn TokenCounter,
) -> Result<Haystack, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let sep_tokens = counter.count(ITEM_SEPARATOR);
    let rendered: Vec<(usize, String, usize)> = corpus
        .items()
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let text = render_item(item);
            let tokens = counter.count(&text);
            (i, text, tokens)
        })
        .collect();

    let newest = rendered.last().expect("non-empty");
    if newest.2 > target_tokens {
        return Err(CorpusError::InsufficientBudget {
            needed: newest.2,
            target: target_tokens,
        });
    }

    // Walk newest -> oldest, keeping items while the running total fits.
    let mut total = 0usize;
    let mut start = rendered.len();
    for (i, _, tokens) in rendered.iter().rev() {
        let added = if start == rendered.len() {
            *tokens
        } else {
            *tokens + sep_tokens
        };
        if total + added > target_tokens {
            break;
        }
        total += added;
        start = *i;
    }

    let entries: Vec<HaystackEntry> = rendered[start..]
        .iter()
        .map(|(i, text, tokens)| {
            let item = &corpus.items()[*i];
            HaystackEntry {
                item_id: item.id().to_string(),
                timestamp: item.timestamp(),
                text: text.clone(),
                tokens: *tokens,
            }
        })
        .collect();
    let rendered_text = join_entries(&entries);
    Ok(Haystack {
        user_id: corpus.user_id.clone(),
        entries,
        rendered_text,
        token_length: total,
        target_length: target_tokens,
        separator_tokens: sep_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    pub(crate) fn note(id: &str, user: &str, at: &str, title: &str, summary: &str, content: &str) -> RawItem {
        RawItem::Note {
            id: id.into(),
            user_id: user.into(),
            created_at: ts(at),
            title: title.into(),
            summary: summary.into(),
            content: content.into(),
        }
    }

    fn chat(id: &str, user: &str, at: &str, turns: &[(TurnRole, &str)]) -> RawItem {
        let at = ts(at);
        RawItem::Chat {
            id: id.into(),
            user_id: user.into(),
            started_at: at,
            turns: turns
                .iter()
                .map(|(role, text)| Turn {
                    role: *role,
                    text: (*text).into(),
                    at,
                })
                .collect(),
        }
    }

    #[test]
    fn ingest_sorts_chronologically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let a = note("n2", "u1", "2024-05-02T00:00:00Z", "second", "s", "c");
        let b = note("n1", "u1", "2024-05-01T00:00:00Z", "first", "s", "c");
        let mut text = serde_json::to_string(&a).unwrap();
        text.push('\n');
        text.push_str(&serde_json::to_string(&b).unwrap());
        text.push('\n');
        std::fs::write(&path, text).unwrap();

        let corpus = ingest(&path).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.items()[0].id(), "n1");
        assert_eq!(corpus.items()[1].id(), "n2");
    }

    #[test]
    fn ingest_empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let corpus = ingest(&path).unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn ingest_missing_field_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"kind":"note","id":"n1","user_id":"u1","created_at":"2024-05-01T00:00:00Z","title":"t","summary":"s"}"#,
        )
        .unwrap();
        let err = ingest(&path).unwrap_err();
        match err {
            CorpusError::MalformedRecord { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("content"), "message was: {message}");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn ingest_rejects_duplicate_ids_and_bad_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let a = note("n1", "u1", "2024-05-01T00:00:00Z", "t", "s", "c");
        let mut text = serde_json::to_string(&a).unwrap();
        text.push('\n');
        text.push_str(&serde_json::to_string(&a).unwrap());
        std::fs::write(&path, text).unwrap();
        assert!(matches!(ingest(&path), Err(CorpusError::DuplicateId { .. })));

        let path2 = dir.path().join("ts.jsonl");
        std::fs::write(
            &path2,
            r#"{"kind":"note","id":"n1","user_id":"u1","created_at":"yesterday","title":"t","summary":"s","content":"c"}"#,
        )
        .unwrap();
        assert!(matches!(
            ingest(&path2),
            Err(CorpusError::MalformedRecord { line: 1, .. })
        ));
    }

    #[test]
    fn render_note_has_fields_in_order() {
        let item = note("n1", "u1", "2024-05-01T10:00:00Z", "T", "S", "C");
        let text = render_item(&item);
        let pos = |needle: &str| text.find(needle).unwrap();
        assert!(pos("2024-05-01") < pos("T"));
        assert!(pos("T") < pos("S"));
        assert!(pos("S") < pos("C"));
        assert_eq!(text, render_item(&item)); // byte-identical rerender
    }

    #[test]
    fn render_chat_prefixes_roles() {
        let item = chat(
            "c1",
            "u1",
            "2024-05-02T09:00:00Z",
            &[(TurnRole::User, "hi"), (TurnRole::Assistant, "hello")],
        );
        let text = render_item(&item);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "USER: hi");
        assert_eq!(lines[2], "ASSISTANT: hello");
    }

    fn sized_note(id: &str, at: &str, body_tokens: usize) -> RawItem {
        // Header "[date] t" = 8 tokens, summary "s" = 1; content fills the rest.
        assert!(body_tokens > 9);
        let content = vec!["w"; body_tokens - 9].join(" ");
        note(id, "u1", at, "t", "s", &content)
    }

    #[test]
    fn assemble_keeps_newest_suffix() {
        let counter = WhitespacePunctCounter;
        let items = vec![
            sized_note("n1", "2024-01-01T00:00:00Z", 100),
            sized_note("n2", "2024-01-02T00:00:00Z", 200),
            sized_note("n3", "2024-01-03T00:00:00Z", 300),
        ];
        let corpus = Corpus::from_items("u1", items).unwrap();

        let hs = assemble_haystack(&corpus, 450, &counter).unwrap();
        assert_eq!(hs.entries.len(), 1);
        assert_eq!(hs.entries[0].item_id, "n3");
        assert_eq!(hs.token_length, 300);

        let all = assemble_haystack(&corpus, 600, &counter).unwrap();
        assert_eq!(all.entries.len(), 3);
        assert_eq!(all.token_length, 600);
        assert_eq!(all.boundaries(), vec![0, 100, 300, 600]);

        let err = assemble_haystack(&corpus, 250, &counter).unwrap_err();
        assert!(matches!(err, CorpusError::InsufficientBudget { needed: 300, target: 250 }));
    }

    #[test]
    fn assemble_is_maximal_and_deterministic() {
        let counter = WhitespacePunctCounter;
        let items = vec![
            sized_note("n1", "2024-01-01T00:00:00Z", 50),
            sized_note("n2", "2024-01-02T00:00:00Z", 60),
            sized_note("n3", "2024-01-03T00:00:00Z", 70),
            sized_note("n4", "2024-01-04T00:00:00Z", 80),
        ];
        let corpus = Corpus::from_items("u1", items).unwrap();
        for target in [80usize, 150, 210, 260, 1000] {
            let hs = assemble_haystack(&corpus, target, &counter).unwrap();
            assert!(hs.token_length <= target);
            // Maximality: the next-older item would not fit.
            if hs.entries.len() < corpus.len() {
                let older_idx = corpus.len() - hs.entries.len() - 1;
                let older_tokens = counter.count(&render_item(&corpus.items()[older_idx]));
                assert!(hs.token_length + older_tokens > target);
            }
            let again = assemble_haystack(&corpus, target, &counter).unwrap();
            assert_eq!(hs.rendered_text, again.rendered_text);
        }
    }

    #[test]
    fn ties_break_by_id() {
        let a = note("b", "u1", "2024-01-01T00:00:00Z", "t", "s", "c");
        let b = note("a", "u1", "2024-01-01T00:00:00Z", "t", "s", "c");
        let corpus = Corpus::from_items("u1", vec![a, b]).unwrap();
        assert_eq!(corpus.items()[0].id(), "a");
    }

    #[test]
    fn boundaries_are_prefix_sums() {
        let counter = WhitespacePunctCounter;
        let items = vec![
            sized_note("n1", "2024-01-01T00:00:00Z", 20),
            sized_note("n2", "2024-01-02T00:00:00Z", 30),
        ];
        let corpus = Corpus::from_items("u1", items).unwrap();
        let hs = assemble_haystack(&corpus, 100, &counter).unwrap();
        assert_eq!(hs.boundaries(), vec![0, 20, 50]);
        assert_eq!(counter.count(&hs.rendered_text), 50);
    }
}
