//! Natural-language memory: summarized sentences, tags at several
//! granularities, bio / preferences / social connections, and cross-session
//! trend mining. Every non-global item keeps provenance back to the raw
//! items it came from.

pub mod taxonomy;

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{render_item, Corpus, RawItem};
use crate::needle::lexical_conflict;
use crate::provider::{ChatMessage, ChatProvider, ProviderError};
pub use taxonomy::{normalize_tag, TagNode, Taxonomy};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("linking `{tag}` under `{parent}` would create a cycle")]
    CycleRejected { tag: String, parent: String },
    #[error("taxonomy invariant broken: {0}")]
    BrokenTaxonomy(String),
    #[error("no memory items to summarize")]
    EmptyMemory,
    #[error("no evidence for tag `{tag}` in the window: {detail}")]
    EmptyEvidence { tag: String, detail: String },
    #[error("invalid memory item: {0}")]
    InvalidItem(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed store record at line {line}: {message}")]
    MalformedStore { line: usize, message: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Bio,
    Topic,
    Preference,
    SocialConnection,
    SummarizedSentence,
    Trend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Sentence,
    FineTag,
    CoarseTag,
    Global,
}

/// One unit of extracted memory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryItem {
    pub id: String,
    pub user_id: String,
    pub kind: MemoryKind,
    pub granularity: Granularity,
    pub text: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub source_refs: Vec<String>,
    pub created_at: DateTime<Utc>,
}

fn derived_id(user_id: &str, kind: MemoryKind, text: &str, refs: &[String]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(user_id.as_bytes());
    hasher.update([0x1f]);
    hasher.update(format!("{kind:?}").as_bytes());
    hasher.update([0x1f]);
    hasher.update(text.as_bytes());
    for r in refs {
        hasher.update([0x1e]);
        hasher.update(r.as_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::from("m-");
    for b in &digest[..6] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl MemoryItem {
    /// Validates and builds an item; the id is derived from the content so
    /// identical extractions get identical ids.
    pub fn new(
        user_id: impl Into<String>,
        kind: MemoryKind,
        granularity: Granularity,
        text: impl Into<String>,
        tags: Vec<String>,
        source_refs: Vec<String>,
        created_at: DateTime<Utc>,
    ) -> Result<Self, MemoryError> {
        let user_id = user_id.into();
        let text = text.into();
        if text.trim().is_empty() {
            return Err(MemoryError::InvalidItem("text is empty".into()));
        }
        match (kind, granularity) {
            (MemoryKind::Bio, g) if g != Granularity::Global => {
                return Err(MemoryError::InvalidItem(
                    "bio items must be global".into(),
                ))
            }
            (MemoryKind::SummarizedSentence, g) if g != Granularity::Sentence => {
                return Err(MemoryError::InvalidItem(
                    "summarized sentences must have sentence granularity".into(),
                ))
            }
            _ => {}
        }
        if granularity != Granularity::Global && source_refs.is_empty() {
            return Err(MemoryError::InvalidItem(
                "non-global items need at least one source ref".into(),
            ));
        }
        let id = derived_id(&user_id, kind, &text, &source_refs);
        Ok(MemoryItem {
            id,
            user_id,
            kind,
            granularity,
            text,
            tags,
            source_refs,
            created_at,
        })
    }
}

/// Single-user memory store with its taxonomy. One writer at a time;
/// readers may share it freely.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MemoryStore {
    pub user_id: String,
    items: Vec<MemoryItem>,
    pub taxonomy: Taxonomy,
}

pub const STORE_ITEMS_FILE: &str = "items.jsonl";
pub const STORE_TAXONOMY_FILE: &str = "taxonomy.json";

impl MemoryStore {
    pub fn new(user_id: impl Into<String>) -> Self {
        MemoryStore {
            user_id: user_id.into(),
            items: Vec::new(),
            taxonomy: Taxonomy::new(),
        }
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Adds an item. Social connections dedup by normalized text: a repeat
    /// mention merges its source refs into the existing connection.
    pub fn add(&mut self, item: MemoryItem) -> &MemoryItem {
        if item.kind == MemoryKind::SocialConnection {
            let norm = normalize_tag(&item.text);
            if let Some(pos) = self
                .items
                .iter()
                .position(|i| i.kind == MemoryKind::SocialConnection && normalize_tag(&i.text) == norm)
            {
                let existing = &mut self.items[pos];
                for r in item.source_refs {
                    if !existing.source_refs.contains(&r) {
                        existing.source_refs.push(r);
                    }
                }
                return &self.items[pos];
            }
        }
        if let Some(pos) = self.items.iter().position(|i| i.id == item.id) {
            return &self.items[pos];
        }
        self.items.push(item);
        self.items.last().expect("just pushed")
    }

    pub fn by_tag(&self, tag: &str) -> Vec<&MemoryItem> {
        let norm = normalize_tag(tag);
        self.items
            .iter()
            .filter(|i| i.tags.iter().any(|t| normalize_tag(t) == norm))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), MemoryError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| MemoryError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut lines = String::new();
        for item in &self.items {
            lines.push_str(&serde_json::to_string(item).expect("memory item serializes"));
            lines.push('\n');
        }
        let items_path = dir.join(STORE_ITEMS_FILE);
        std::fs::write(&items_path, lines).map_err(|source| MemoryError::Io {
            path: items_path.display().to_string(),
            source,
        })?;
        let tax_path = dir.join(STORE_TAXONOMY_FILE);
        let mut tax = serde_json::to_string_pretty(&self.taxonomy).expect("taxonomy serializes");
        tax.push('\n');
        std::fs::write(&tax_path, tax).map_err(|source| MemoryError::Io {
            path: tax_path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn load(user_id: impl Into<String>, dir: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let dir = dir.as_ref();
        let items_path = dir.join(STORE_ITEMS_FILE);
        let mut items = Vec::new();
        if items_path.exists() {
            let text = std::fs::read_to_string(&items_path).map_err(|source| MemoryError::Io {
                path: items_path.display().to_string(),
                source,
            })?;
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let item: MemoryItem =
                    serde_json::from_str(line).map_err(|e| MemoryError::MalformedStore {
                        line: idx + 1,
                        message: e.to_string(),
                    })?;
                items.push(item);
            }
        }
        let tax_path = dir.join(STORE_TAXONOMY_FILE);
        let taxonomy = if tax_path.exists() {
            let text = std::fs::read_to_string(&tax_path).map_err(|source| MemoryError::Io {
                path: tax_path.display().to_string(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|e| MemoryError::MalformedStore {
                line: 0,
                message: e.to_string(),
            })?
        } else {
            Taxonomy::new()
        };
        Ok(MemoryStore {
            user_id: user_id.into(),
            items,
            taxonomy,
        })
    }

    /// Checks that every source ref of every item resolves in `corpus`.
    pub fn check_provenance(&self, corpus: &Corpus) -> Result<(), MemoryError> {
        for item in &self.items {
            for r in &item.source_refs {
                if corpus.get(r).is_none() {
                    return Err(MemoryError::InvalidItem(format!(
                        "item {} references missing raw item `{r}`",
                        item.id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn item_body(item: &RawItem) -> String {
    match item {
        RawItem::Note { content, .. } => content.clone(),
        RawItem::Chat { turns, .. } => turns
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join("\n"),
    }
}

fn call(provider: &dyn ChatProvider, system: &str, user: String) -> Result<String, MemoryError> {
    let messages = vec![ChatMessage::system(system), ChatMessage::user(user)];
    Ok(provider.complete(&messages)?.text)
}

const SUMMARIZE_PROMPT: &str =
    "List the key facts about the user from this interaction, one standalone sentence per line.";

/// Summarizes one interaction into sentence-level memory items, each
/// carrying the interaction's id as provenance. An effectively empty item
/// produces no items and no provider call.
pub fn summarize_interaction(
    item: &RawItem,
    provider: &dyn ChatProvider,
) -> Result<Vec<MemoryItem>, MemoryError> {
    if item_body(item).trim().is_empty() {
        return Ok(Vec::new());
    }
    let reply = call(provider, SUMMARIZE_PROMPT, render_item(item))?;
    reply
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|line| {
            MemoryItem::new(
                item.user_id(),
                MemoryKind::SummarizedSentence,
                Granularity::Sentence,
                line,
                Vec::new(),
                vec![item.id().to_string()],
                item.timestamp(),
            )
        })
        .collect()
}

const FINE_TAGS_PROMPT: &str =
    "List up to 8 precise topic tags for this interaction, comma-separated.";

/// Extracts normalized fine-grained tags from one interaction and registers
/// each as a taxonomy node if absent.
pub fn extract_fine_tags(
    item: &RawItem,
    provider: &dyn ChatProvider,
    taxonomy: &mut Taxonomy,
) -> Result<Vec<String>, MemoryError> {
    let reply = call(provider, FINE_TAGS_PROMPT, render_item(item))?;
    let mut seen = BTreeSet::new();
    let mut tags = Vec::new();
    for raw in reply.split(|c| c == ',' || c == '\n') {
        let tag = normalize_tag(raw);
        if tag.is_empty() || !seen.insert(tag.clone()) {
            continue;
        }
        taxonomy.insert(&tag);
        tags.push(tag);
    }
    Ok(tags)
}

/// Ancestors of `tag`, nearest first, capped at `max_levels` so coarse tags
/// stay close to the fine tag they came from.
pub fn rollup_tag(
    tag: &str,
    taxonomy: &Taxonomy,
    max_levels: usize,
) -> Result<Vec<String>, MemoryError> {
    if !taxonomy.contains(tag) {
        return Err(MemoryError::UnknownTag(normalize_tag(tag)));
    }
    let mut ancestors = taxonomy.ancestors(tag);
    ancestors.truncate(max_levels);
    Ok(ancestors)
}

const PARENT_PROMPT: &str =
    "Give one broader category for the given tag. Reply with the category only.";

/// Asks the provider for a broader parent of `tag` and links it. The
/// taxonomy itself is the cache: a tag that already has a parent returns it
/// with zero provider calls. Proposals that would close a cycle are
/// rejected.
pub fn propose_parent(
    tag: &str,
    taxonomy: &mut Taxonomy,
    provider: &dyn ChatProvider,
) -> Result<Option<String>, MemoryError> {
    let norm = normalize_tag(tag);
    if !taxonomy.contains(&norm) {
        return Err(MemoryError::UnknownTag(norm));
    }
    if let Some(parent) = taxonomy.parent_of(&norm) {
        return Ok(Some(parent.to_string()));
    }
    let reply = call(provider, PARENT_PROMPT, format!("Tag: {norm}"))?;
    let proposal = normalize_tag(reply.lines().next().unwrap_or(""));
    if proposal.is_empty() {
        return Ok(None);
    }
    taxonomy.set_parent(&norm, &proposal)?;
    Ok(Some(proposal))
}

const BIO_PROMPT: &str =
    "Write a short bio of the user (at most 5 sentences) based on these memories.";

/// Builds the single global bio item from existing memory. The 5-sentence
/// target is soft: longer bios are logged, not rejected.
pub fn build_global(
    items: &[MemoryItem],
    user_id: &str,
    provider: &dyn ChatProvider,
) -> Result<MemoryItem, MemoryError> {
    if items.is_empty() {
        return Err(MemoryError::EmptyMemory);
    }
    let evidence = items
        .iter()
        .map(|i| format!("- {}", i.text))
        .collect::<Vec<_>>()
        .join("\n");
    let reply = call(provider, BIO_PROMPT, evidence)?;
    let sentences = reply.matches(['.', '!', '?']).count();
    if sentences > 5 {
        log::warn!("bio has {sentences} sentence terminators, target is 5");
    }
    let created_at = items
        .iter()
        .map(|i| i.created_at)
        .max()
        .expect("non-empty");
    MemoryItem::new(
        user_id,
        MemoryKind::Bio,
        Granularity::Global,
        reply.trim(),
        Vec::new(),
        Vec::new(),
        created_at,
    )
}

const PREFERENCES_PROMPT: &str = "Extract stated preferences from this interaction. Reply one per line as `subject | polarity | object` where subject is `user` or a person's name and polarity is `likes`, `dislikes`, or `prefers`.";

/// Extracts preference items. Each carries its polarity and subject both in
/// the text (`<subject> <polarity> <object>`) and as structured tags
/// (`subject:<name>`, `polarity:<p>`), so a preference voiced by someone
/// other than the user stays attributed to them.
pub fn extract_preferences(
    item: &RawItem,
    provider: &dyn ChatProvider,
) -> Result<Vec<MemoryItem>, MemoryError> {
    let reply = call(provider, PREFERENCES_PROMPT, render_item(item))?;
    let mut out = Vec::new();
    for line in reply.lines() {
        let parts: Vec<&str> = line.split('|').map(str::trim).collect();
        if parts.len() != 3 {
            continue;
        }
        let (subject, polarity, object) = (parts[0], parts[1], parts[2]);
        let polarity = polarity.to_lowercase();
        if !matches!(polarity.as_str(), "likes" | "dislikes" | "prefers") {
            continue;
        }
        if subject.is_empty() || object.is_empty() {
            continue;
        }
        out.push(MemoryItem::new(
            item.user_id(),
            MemoryKind::Preference,
            Granularity::Sentence,
            format!("{subject} {polarity} {object}"),
            vec![
                format!("subject:{}", normalize_tag(subject)),
                format!("polarity:{polarity}"),
            ],
            vec![item.id().to_string()],
            item.timestamp(),
        )?);
    }
    Ok(out)
}

const SOCIAL_PROMPT: &str =
    "List the people or organizations mentioned in this interaction, one name per line.";

/// Extracts mentioned people and organizations as social-connection items.
/// Duplicate mentions inside one interaction collapse to one item.
pub fn extract_social(
    item: &RawItem,
    provider: &dyn ChatProvider,
) -> Result<Vec<MemoryItem>, MemoryError> {
    let reply = call(provider, SOCIAL_PROMPT, render_item(item))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in reply.lines() {
        let name = line.trim().trim_matches(|c: char| c == '-' || c == '*').trim();
        if name.is_empty() || !seen.insert(normalize_tag(name)) {
            continue;
        }
        out.push(MemoryItem::new(
            item.user_id(),
            MemoryKind::SocialConnection,
            Granularity::FineTag,
            name,
            vec![normalize_tag(name)],
            vec![item.id().to_string()],
            item.timestamp(),
        )?);
    }
    Ok(out)
}

const TREND_PROMPT: &str =
    "These are memories about one tag over a time window, oldest first. Describe the trend in one or two sentences.";

/// Mines a cross-session trend: gathers the store's items matching `tag`
/// inside the window chronologically, issues one provider call, and returns
/// a trend item whose provenance is the union of the evidence provenance.
pub fn mine_trend(
    tag: &str,
    window: (DateTime<Utc>, DateTime<Utc>),
    store: &MemoryStore,
    provider: &dyn ChatProvider,
) -> Result<MemoryItem, MemoryError> {
    let norm = normalize_tag(tag);
    let mut evidence: Vec<&MemoryItem> = store
        .by_tag(&norm)
        .into_iter()
        .filter(|i| i.created_at >= window.0 && i.created_at <= window.1)
        .collect();
    if evidence.is_empty() {
        return Err(MemoryError::EmptyEvidence {
            tag: norm,
            detail: "no memory items match the tag in the window".into(),
        });
    }
    evidence.sort_by_key(|i| (i.created_at, i.id.clone()));
    let refs: BTreeSet<String> = evidence
        .iter()
        .flat_map(|i| i.source_refs.iter().cloned())
        .collect();
    if refs.is_empty() {
        return Err(MemoryError::EmptyEvidence {
            tag: norm,
            detail: "matching items carry no raw-data provenance".into(),
        });
    }
    let body = evidence
        .iter()
        .map(|i| format!("[{}] {}", i.created_at.format("%Y-%m-%d"), i.text))
        .collect::<Vec<_>>()
        .join("\n");
    let reply = call(provider, TREND_PROMPT, format!("Tag: {norm}\n{body}"))?;
    MemoryItem::new(
        &store.user_id,
        MemoryKind::Trend,
        Granularity::CoarseTag,
        reply.trim(),
        vec![norm],
        refs.into_iter().collect(),
        window.1,
    )
}

/// A pair of memory items that lexically look contradictory, per the same
/// rule the haystack screen uses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryConflict {
    pub first_id: String,
    pub second_id: String,
    pub reason: String,
}

/// Flags contradictory-looking sentence pairs in the store. Flag-only:
/// nothing is deleted or rewritten.
pub fn screen_store_conflicts(store: &MemoryStore) -> Vec<MemoryConflict> {
    let sentences: Vec<&MemoryItem> = store
        .items()
        .iter()
        .filter(|i| i.granularity == Granularity::Sentence)
        .collect();
    let mut out = Vec::new();
    for (a_idx, a) in sentences.iter().enumerate() {
        for b in sentences.iter().skip(a_idx + 1) {
            if let Some(reason) = lexical_conflict(&a.text, &b.text) {
                out.push(MemoryConflict {
                    first_id: a.id.clone(),
                    second_id: b.id.clone(),
                    reason,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::mock::{MockChatProvider, MockScript};
    use crate::provider::ProviderConfig;
    use chrono::TimeZone;

    fn note(id: &str, content: &str) -> RawItem {
        RawItem::Note {
            id: id.into(),
            user_id: "u1".into(),
            created_at: Utc.with_ymd_and_hms(2024, 5, 1, 8, 0, 0).unwrap(),
            title: "t".into(),
            summary: "s".into(),
            content: content.into(),
        }
    }

    fn mock(reply: &str) -> MockChatProvider {
        MockChatProvider::new(ProviderConfig::mock("mem", 100_000), MockScript::new(reply))
    }

    #[test]
    fn summarize_carries_provenance() {
        let item = note("n1", "I'd like to cook a medium-rare steak at home, how can I do that?");
        let provider = mock("User wants to cook a medium-rare steak at home.");
        let items = summarize_interaction(&item, &provider).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].text, "User wants to cook a medium-rare steak at home.");
        assert_eq!(items[0].source_refs, vec!["n1".to_string()]);
        assert_eq!(items[0].kind, MemoryKind::SummarizedSentence);
    }

    #[test]
    fn summarize_blank_note_is_empty_and_free() {
        let item = note("n1", "   ");
        let provider = mock("should never be called");
        let items = summarize_interaction(&item, &provider).unwrap();
        assert!(items.is_empty());
        assert_eq!(provider.call_count(), 0);
    }

    #[test]
    fn fine_tags_normalize_and_dedup() {
        let mut taxonomy = Taxonomy::new();
        let provider = mock("Michael Jordan, NBA");
        let tags = extract_fine_tags(&note("n1", "x"), &provider, &mut taxonomy).unwrap();
        assert_eq!(tags, vec!["michael jordan".to_string(), "nba".to_string()]);
        assert!(taxonomy.contains("michael jordan"));

        let provider = mock("nba, NBA,  nba ");
        let tags = extract_fine_tags(&note("n2", "x"), &provider, &mut taxonomy).unwrap();
        assert_eq!(tags, vec!["nba".to_string()]);

        let provider = mock("");
        let tags = extract_fine_tags(&note("n3", "x"), &provider, &mut taxonomy).unwrap();
        assert!(tags.is_empty());
    }

    #[test]
    fn rollup_follows_the_chain_and_caps() {
        let mut t = Taxonomy::new();
        t.insert("michael jordan");
        t.set_parent("michael jordan", "nba").unwrap();
        t.set_parent("nba", "basketball").unwrap();
        assert_eq!(
            rollup_tag("michael jordan", &t, 2).unwrap(),
            vec!["nba".to_string(), "basketball".to_string()]
        );
        assert_eq!(rollup_tag("michael jordan", &t, 1).unwrap(), vec!["nba".to_string()]);
        assert!(rollup_tag("basketball", &t, 2).unwrap().is_empty());
        assert!(rollup_tag("michael jordan", &t, 0).unwrap().is_empty());
        assert!(matches!(
            rollup_tag("golf", &t, 2),
            Err(MemoryError::UnknownTag(_))
        ));
    }

    #[test]
    fn propose_parent_caches_and_rejects_cycles() {
        let mut t = Taxonomy::new();
        t.insert("nba");
        let provider = mock("Basketball");
        assert_eq!(
            propose_parent("nba", &mut t, &provider).unwrap(),
            Some("basketball".to_string())
        );
        assert_eq!(provider.call_count(), 1);
        // Cached: no further provider calls.
        assert_eq!(
            propose_parent("nba", &mut t, &provider).unwrap(),
            Some("basketball".to_string())
        );
        assert_eq!(provider.call_count(), 1);

        // basketball -> nba closes a cycle.
        let provider = mock("NBA");
        assert!(matches!(
            propose_parent("basketball", &mut t, &provider),
            Err(MemoryError::CycleRejected { .. })
        ));
        // Self-proposal.
        t.insert("tennis");
        let provider = mock("tennis");
        assert!(matches!(
            propose_parent("tennis", &mut t, &provider),
            Err(MemoryError::CycleRejected { .. })
        ));
    }

    #[test]
    fn global_bio_from_items() {
        let item = MemoryItem::new(
            "u1",
            MemoryKind::SummarizedSentence,
            Granularity::Sentence,
            "User runs marathons.",
            vec![],
            vec!["n1".into()],
            Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap(),
        )
        .unwrap();
        let provider = mock("Runs marathons. Lives for breakfast food.");
        let bio = build_global(&[item], "u1", &provider).unwrap();
        assert_eq!(bio.kind, MemoryKind::Bio);
        assert_eq!(bio.granularity, Granularity::Global);
        let again = build_global(
            &[MemoryItem::new(
                "u1",
                MemoryKind::SummarizedSentence,
                Granularity::Sentence,
                "User runs marathons.",
                vec![],
                vec!["n1".into()],
                Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap(),
            )
            .unwrap()],
            "u1",
            &provider,
        )
        .unwrap();
        assert_eq!(bio.text, again.text);
        assert_eq!(bio.id, again.id);

        assert!(matches!(
            build_global(&[], "u1", &provider),
            Err(MemoryError::EmptyMemory)
        ));
    }

    #[test]
    fn preferences_keep_subject_attribution() {
        let item = note("n1", "Alice prefers butter rather than bacon, note this for me.");
        let provider = mock("alice | prefers | butter over bacon");
        let prefs = extract_preferences(&item, &provider).unwrap();
        assert_eq!(prefs.len(), 1);
        assert!(prefs[0].tags.contains(&"subject:alice".to_string()));
        assert!(!prefs[0].tags.contains(&"subject:user".to_string()));
        assert_eq!(prefs[0].text, "alice prefers butter over bacon");

        let item = note("n2", "Try to avoid spicy food for me.");
        let provider = mock("user | dislikes | spicy food");
        let prefs = extract_preferences(&item, &provider).unwrap();
        assert_eq!(prefs.len(), 1);
        assert!(prefs[0].tags.contains(&"subject:user".to_string()));
        assert!(prefs[0].tags.contains(&"polarity:dislikes".to_string()));

        let provider = mock("no preferences found");
        assert!(extract_preferences(&note("n3", "x"), &provider).unwrap().is_empty());
    }

    #[test]
    fn social_dedups_within_and_across_items() {
        let item = note("n1", "How can I make fried chicken for Emmy? She loves it.");
        let provider = mock("Emmy\nEmmy");
        let social = extract_social(&item, &provider).unwrap();
        assert_eq!(social.len(), 1);
        assert_eq!(social[0].text, "Emmy");

        let mut store = MemoryStore::new("u1");
        store.add(social[0].clone());
        let item2 = note("n2", "Emmy asked about dessert recipes.");
        let from_second = extract_social(&item2, &provider).unwrap();
        store.add(from_second[0].clone());
        let connections: Vec<&MemoryItem> = store
            .items()
            .iter()
            .filter(|i| i.kind == MemoryKind::SocialConnection)
            .collect();
        assert_eq!(connections.len(), 1);
        assert_eq!(connections[0].source_refs, vec!["n1".to_string(), "n2".to_string()]);
    }

    #[test]
    fn trend_unions_provenance() {
        let mut store = MemoryStore::new("u1");
        for (i, day) in [1u32, 3, 5].iter().enumerate() {
            store.add(
                MemoryItem::new(
                    "u1",
                    MemoryKind::SummarizedSentence,
                    Granularity::Sentence,
                    format!("Played basketball, session {i}."),
                    vec!["basketball".into()],
                    vec![format!("n{i}")],
                    Utc.with_ymd_and_hms(2024, 5, *day, 0, 0, 0).unwrap(),
                )
                .unwrap(),
            );
        }
        let window = (
            Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap(),
            Utc.with_ymd_and_hms(2024, 5, 31, 0, 0, 0).unwrap(),
        );
        let provider = mock("Basketball is trending up for this user.");
        let trend = mine_trend("Basketball", window, &store, &provider).unwrap();
        assert_eq!(trend.kind, MemoryKind::Trend);
        assert!(trend.source_refs.len() >= 3);

        let empty_window = (
            Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).unwrap(),
            Utc.with_ymd_and_hms(2023, 1, 2, 0, 0, 0).unwrap(),
        );
        assert!(matches!(
            mine_trend("basketball", empty_window, &store, &provider),
            Err(MemoryError::EmptyEvidence { .. })
        ));
        assert!(matches!(
            mine_trend("golf", window, &store, &provider),
            Err(MemoryError::EmptyEvidence { .. })
        ));
    }

    #[test]
    fn store_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MemoryStore::new("u1");
        store.add(
            MemoryItem::new(
                "u1",
                MemoryKind::SummarizedSentence,
                Granularity::Sentence,
                "User likes tea.",
                vec!["tea".into()],
                vec!["n1".into()],
                Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap(),
            )
            .unwrap(),
        );
        store.taxonomy.insert("tea");
        store.save(dir.path()).unwrap();
        let loaded = MemoryStore::load("u1", dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert!(loaded.taxonomy.contains("tea"));
    }

    #[test]
    fn store_conflict_screen_flags_pairs() {
        let mut store = MemoryStore::new("u1");
        let at = Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap();
        for (id, text) in [("n1", "I love butter on toast"), ("n2", "I don't enjoy butter, skip it")] {
            store.add(
                MemoryItem::new(
                    "u1",
                    MemoryKind::SummarizedSentence,
                    Granularity::Sentence,
                    text,
                    vec![],
                    vec![id.to_string()],
                    at,
                )
                .unwrap(),
            );
        }
        let flags = screen_store_conflicts(&store);
        assert_eq!(flags.len(), 1);
        assert!(flags[0].reason.contains("butter"));
    }
}
