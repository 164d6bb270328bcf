//! Fine-tune data synthesis: the `<|ME|>` prompt protocol, first-person
//! rephrasing, note-chunk and cross-note retrieval pairs with
//! chain-of-thought targets, date/period time-awareness pairs, and dataset
//! emission with template-diversity gates plus the training manifest.
//! Training itself is out of scope here: the output is data plus config.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, RawItem, TokenCounter, WhitespacePunctCounter};
use crate::provider::mock::ClosureChatProvider;
use crate::provider::{ChatMessage, ChatProvider, ProviderConfig, ProviderError};
use crate::text;

/// Sentinel prepended to every training and inference prompt.
pub const ME_SENTINEL: &str = "<|ME|>";

/// Marker that separates the echo section from the summary in cross-note
/// targets.
pub const SUMMARY_MARKER: &str = "In summary:";

#[derive(Debug, Error)]
pub enum LpmError {
    #[error("prompt already starts with the sentinel")]
    DoublePrefix,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("prompt batch is empty")]
    EmptyBatch,
    #[error("note `{0}` has no content to chunk")]
    EmptyNote(String),
    #[error("cross-note generation needs at least 2 chunks containing the keyphrase, got {0}")]
    InsufficientChunks(usize),
    #[error("unknown time phrase `{0}`")]
    UnknownPhrase(String),
    #[error("invalid training example: {0}")]
    InvalidExample(String),
    #[error("no examples to emit")]
    EmptyExamples,
    #[error("skeleton `{skeleton}` covers {share:.0}% of the batch (limit {limit:.0}%)")]
    SkeletonMonoculture {
        skeleton: String,
        share: f64,
        limit: f64,
    },
    #[error("chunker window must exceed its overlap")]
    BadChunker,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleCategory {
    ChunkRetrieval,
    CrossNote,
    DateRetrieval,
    PeriodSummary,
    MeRephrase,
}

impl ExampleCategory {
    pub fn label(&self) -> &'static str {
        match self {
            ExampleCategory::ChunkRetrieval => "chunk_retrieval",
            ExampleCategory::CrossNote => "cross_note",
            ExampleCategory::DateRetrieval => "date_retrieval",
            ExampleCategory::PeriodSummary => "period_summary",
            ExampleCategory::MeRephrase => "me_rephrase",
        }
    }
}

/// Prompt with content words masked; measures template diversity.
/// Stopwords survive, everything else becomes `_`.
pub fn skeleton_of(prompt: &str) -> String {
    let body = prompt.strip_prefix(ME_SENTINEL).unwrap_or(prompt);
    text::words(body)
        .into_iter()
        .map(|w| {
            if text::is_stopword(&w) {
                w
            } else {
                "_".to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One synthesized training pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prompt: String,
    pub target: String,
    pub category: ExampleCategory,
    #[serde(default)]
    pub source_refs: Vec<String>,
    pub cot: bool,
    pub skeleton: String,
}

const NO_NOTES_MARKER: &str = "I have no notes";

impl TrainingExample {
    pub fn new(
        prompt: String,
        target: String,
        category: ExampleCategory,
        source_refs: Vec<String>,
        cot: bool,
    ) -> Result<Self, LpmError> {
        if prompt.matches(ME_SENTINEL).count() != 1 || !prompt.starts_with(ME_SENTINEL) {
            return Err(LpmError::InvalidExample(
                "prompt must begin with the sentinel exactly once".into(),
            ));
        }
        if prompt.len() == ME_SENTINEL.len() {
            return Err(LpmError::InvalidExample("prompt body is empty".into()));
        }
        if target.trim().is_empty() {
            return Err(LpmError::InvalidExample("target is empty".into()));
        }
        // Absence examples (a time query with no matching notes) legitimately
        // have nothing to cite; everything else needs provenance.
        let absence = matches!(
            category,
            ExampleCategory::DateRetrieval | ExampleCategory::PeriodSummary
        ) && target.contains(NO_NOTES_MARKER);
        if source_refs.is_empty() && category != ExampleCategory::MeRephrase && !absence {
            return Err(LpmError::InvalidExample(format!(
                "{} example needs source refs",
                category.label()
            )));
        }
        let skeleton = skeleton_of(&prompt);
        Ok(TrainingExample {
            prompt,
            target,
            category,
            source_refs,
            cot,
            skeleton,
        })
    }
}

/// Prefixes the sentinel, with no separator.
pub fn me_prefix(prompt: &str) -> Result<String, LpmError> {
    if prompt.is_empty() {
        return Err(LpmError::EmptyPrompt);
    }
    if prompt.starts_with(ME_SENTINEL) {
        return Err(LpmError::DoublePrefix);
    }
    Ok(format!("{ME_SENTINEL}{prompt}"))
}

/// Word-boundary first-person test: `I` (case-sensitive) or `me`/`my`/`mine`
/// (case-insensitive). The sentinel is excluded from matching.
pub fn has_first_person(prompt: &str) -> bool {
    let body = prompt.strip_prefix(ME_SENTINEL).unwrap_or(prompt);
    let mut word = String::new();
    let mut check = |w: &str| -> bool {
        w == "I" || w.eq_ignore_ascii_case("me") || w.eq_ignore_ascii_case("my") || w.eq_ignore_ascii_case("mine")
    };
    for ch in body.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else if !word.is_empty() {
            if check(&word) {
                return true;
            }
            word.clear();
        }
    }
    !word.is_empty() && check(&word)
}

/// Fraction of prompts containing a first-person token.
pub fn me_ratio(prompts: &[String]) -> Result<f64, LpmError> {
    if prompts.is_empty() {
        return Err(LpmError::EmptyBatch);
    }
    let hits = prompts.iter().filter(|p| has_first_person(p)).count();
    Ok(hits as f64 / prompts.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RephraseRecord {
    pub before: String,
    pub after: String,
}

const REPHRASE_PROMPT: &str = "Rephrase this request in first person, as if asking about your own notes. Reply with the rephrased request only.";

/// Provider-backed first-person rephrasing. Records before and after so the
/// batch-level first-person ratio increase stays checkable.
pub fn rephrase_me(
    prompt: &str,
    provider: &dyn ChatProvider,
) -> Result<RephraseRecord, LpmError> {
    if prompt.trim().is_empty() {
        return Err(LpmError::EmptyPrompt);
    }
    let messages = vec![
        ChatMessage::system(REPHRASE_PROMPT),
        ChatMessage::user(prompt.to_string()),
    ];
    let reply = provider.complete(&messages)?;
    let after = reply.text.trim().to_string();
    Ok(RephraseRecord {
        before: prompt.to_string(),
        after: if after.is_empty() {
            prompt.to_string()
        } else {
            after
        },
    })
}

/// The shipped deterministic rephraser: swaps the first standalone
/// `the`/`this` for `my` and appends `for me` when the prompt still lacks a
/// first-person token. Prompts that already speak in first person pass
/// through unchanged, so a batch's first-person ratio never decreases and
/// strictly increases when any prompt lacked one.
pub fn heuristic_rephraser() -> ClosureChatProvider {
    ClosureChatProvider::new(ProviderConfig::mock("heuristic-rephraser", 1_000_000), |msgs| {
        let prompt = msgs
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        if has_first_person(prompt) {
            return prompt.to_string();
        }
        let mut rewritten: Vec<String> = Vec::new();
        let mut swapped = false;
        for word in prompt.split_whitespace() {
            if !swapped && (word.eq_ignore_ascii_case("the") || word.eq_ignore_ascii_case("this")) {
                rewritten.push("my".to_string());
                swapped = true;
            } else {
                rewritten.push(word.to_string());
            }
        }
        let mut out = rewritten.join(" ");
        let trimmed = out.trim_end_matches(['.', '?', '!']).len();
        out.truncate(trimmed);
        out.push_str(" for me");
        out
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChunkerConfig {
    pub window_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        ChunkerConfig {
            window_tokens: 256,
            overlap_tokens: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoteChunk {
    pub note_id: String,
    pub index: usize,
    pub text: String,
}

/// Fixed token windows with overlap over a note's content.
pub fn chunk_note(note: &RawItem, config: ChunkerConfig) -> Result<Vec<NoteChunk>, LpmError> {
    if config.overlap_tokens >= config.window_tokens {
        return Err(LpmError::BadChunker);
    }
    let content = match note {
        RawItem::Note { content, .. } => content.as_str(),
        RawItem::Chat { turns, .. } => {
            return chunk_text(
                note.id(),
                &turns.iter().map(|t| t.text.clone()).collect::<Vec<_>>().join("\n"),
                config,
            )
        }
    };
    chunk_text(note.id(), content, config)
}

fn chunk_text(id: &str, content: &str, config: ChunkerConfig) -> Result<Vec<NoteChunk>, LpmError> {
    let spans = text::token_spans(content);
    if spans.is_empty() {
        return Err(LpmError::EmptyNote(id.to_string()));
    }
    let stride = config.window_tokens - config.overlap_tokens;
    let mut chunks = Vec::new();
    let mut start = 0usize;
    let mut index = 0usize;
    while start < spans.len() {
        let end = (start + config.window_tokens).min(spans.len());
        let byte_start = spans[start].start;
        let byte_end = spans[end - 1].end;
        chunks.push(NoteChunk {
            note_id: id.to_string(),
            index,
            text: content[byte_start..byte_end].to_string(),
        });
        if end == spans.len() {
            break;
        }
        start += stride;
        index += 1;
    }
    Ok(chunks)
}

const CHUNK_PROMPT_TEMPLATES: [&str; 6] = [
    "What did I write about {kp}?",
    "Find the part of my notes that mentions {kp}.",
    "Remind me what my notes say regarding {kp}.",
    "I remember noting something about {kp}. What was it?",
    "Pull up my notes on {kp}.",
    "Could you show me where I wrote about {kp}?",
];

const KEYPHRASE_PROMPT: &str =
    "Pick the most distinctive keyphrase from this passage. Reply with the keyphrase only.";

const PARAPHRASE_PROMPT: &str = "Paraphrase the following passage, keeping every fact.";

#[derive(Debug, Clone, Copy, Default)]
pub struct ChunkGenOptions {
    /// Paraphrase targets through the provider instead of echoing the chunk
    /// verbatim.
    pub paraphrase: bool,
}

/// Generates chunk-retrieval examples for one note. The provider picks one
/// keyphrase per chunk; consecutive sibling chunks containing the same
/// keyphrase collapse into one example with their texts concatenated.
pub fn gen_chunk_retrieval(
    note: &RawItem,
    chunker: ChunkerConfig,
    provider: &dyn ChatProvider,
    options: ChunkGenOptions,
) -> Result<Vec<TrainingExample>, LpmError> {
    let chunks = chunk_note(note, chunker)?;
    let mut examples = Vec::new();
    let mut i = 0usize;
    while i < chunks.len() {
        let chunk = &chunks[i];
        let reply = provider.complete(&[
            ChatMessage::system(KEYPHRASE_PROMPT),
            ChatMessage::user(chunk.text.clone()),
        ])?;
        let keyphrase = reply.text.trim().trim_matches('"').to_string();
        if keyphrase.is_empty() {
            i += 1;
            continue;
        }
        // Extend over consecutive siblings that also contain the keyphrase.
        let lower = keyphrase.to_lowercase();
        let mut end = i + 1;
        while end < chunks.len() && chunks[end].text.to_lowercase().contains(&lower) {
            end += 1;
        }
        let target_text = chunks[i..end]
            .iter()
            .map(|c| c.text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let target = if options.paraphrase {
            provider
                .complete(&[
                    ChatMessage::system(PARAPHRASE_PROMPT),
                    ChatMessage::user(target_text.clone()),
                ])?
                .text
        } else {
            target_text
        };
        let template = CHUNK_PROMPT_TEMPLATES[examples.len() % CHUNK_PROMPT_TEMPLATES.len()];
        let prompt = me_prefix(&template.replace("{kp}", &keyphrase))?;
        examples.push(TrainingExample::new(
            prompt,
            target,
            ExampleCategory::ChunkRetrieval,
            vec![note.id().to_string()],
            false,
        )?);
        i = end;
    }
    Ok(examples)
}

const CROSSNOTE_PROMPT_TEMPLATES: [&str; 4] = [
    "Pull together everything my notes say about {kp}.",
    "Summarize all my mentions of {kp}.",
    "What do my notes collectively say about {kp}?",
    "Across my notes, what have I written about {kp}?",
];

const CROSSNOTE_SUMMARY_PROMPT: &str =
    "Summarize what these excerpts collectively say in one or two sentences.";

/// Builds one cross-note example: the chain-of-thought target first echoes
/// every chunk containing the keyphrase, in order, then summarizes after
/// the marker line.
pub fn gen_crossnote(
    keyphrase: &str,
    chunks: &[NoteChunk],
    provider: &dyn ChatProvider,
) -> Result<TrainingExample, LpmError> {
    let lower = keyphrase.to_lowercase();
    let containing: Vec<&NoteChunk> = chunks
        .iter()
        .filter(|c| c.text.to_lowercase().contains(&lower))
        .collect();
    if containing.len() < 2 {
        return Err(LpmError::InsufficientChunks(containing.len()));
    }
    let echoes = containing
        .iter()
        .enumerate()
        .map(|(i, c)| format!("[{}] {}", i + 1, c.text))
        .collect::<Vec<_>>()
        .join("\n");
    let summary = provider
        .complete(&[
            ChatMessage::system(CROSSNOTE_SUMMARY_PROMPT),
            ChatMessage::user(format!("Keyphrase: {keyphrase}\n{echoes}")),
        ])?
        .text;
    let target = format!(
        "Here is what my notes say about \"{keyphrase}\":\n{echoes}\n{SUMMARY_MARKER} {}",
        summary.trim()
    );
    let mut refs: Vec<String> = Vec::new();
    for c in &containing {
        if !refs.contains(&c.note_id) {
            refs.push(c.note_id.clone());
        }
    }
    let template_idx = keyphrase.bytes().map(|b| b as usize).sum::<usize>()
        % CROSSNOTE_PROMPT_TEMPLATES.len();
    let prompt = me_prefix(&CROSSNOTE_PROMPT_TEMPLATES[template_idx].replace("{kp}", keyphrase))?;
    TrainingExample::new(prompt, target, ExampleCategory::CrossNote, refs, true)
}

/// Checks the echo-before-summary structure of a cross-note target.
pub fn crossnote_structure_ok(target: &str, chunk_texts: &[&str]) -> bool {
    let Some(marker) = target.find(SUMMARY_MARKER) else {
        return false;
    };
    let echo_section = &target[..marker];
    chunk_texts.iter().all(|c| echo_section.contains(c))
}

/// Resolves a relative time phrase against `now`.
///
/// `yesterday` is the single previous day; `last week` the previous ISO week
/// (Monday through Sunday); `last month` the previous calendar month. An
/// explicit `YYYY-MM-DD` date resolves to itself.
pub fn resolve_period(phrase: &str, now: NaiveDate) -> Result<(NaiveDate, NaiveDate), LpmError> {
    match phrase.trim().to_lowercase().as_str() {
        "yesterday" => {
            let d = now - Duration::days(1);
            Ok((d, d))
        }
        "last week" => {
            let this_monday = now - Duration::days(now.weekday().num_days_from_monday() as i64);
            let prev_monday = this_monday - Duration::days(7);
            Ok((prev_monday, prev_monday + Duration::days(6)))
        }
        "last month" => {
            let first_of_this = now.with_day(1).expect("day 1 always valid");
            let last_of_prev = first_of_this - Duration::days(1);
            let first_of_prev = last_of_prev.with_day(1).expect("day 1 always valid");
            Ok((first_of_prev, last_of_prev))
        }
        other => match NaiveDate::parse_from_str(other, "%Y-%m-%d") {
            Ok(d) => Ok((d, d)),
            Err(_) => Err(LpmError::UnknownPhrase(phrase.to_string())),
        },
    }
}

/// Resolved period: phrase, reference date, and the inclusive range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodSpec {
    pub phrase: String,
    pub now: NaiveDate,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl PeriodSpec {
    pub fn resolve(phrase: &str, now: NaiveDate) -> Result<Self, LpmError> {
        let (start, end) = resolve_period(phrase, now)?;
        Ok(PeriodSpec {
            phrase: phrase.to_string(),
            now,
            start,
            end,
        })
    }
}

/// A time-awareness query: an explicit date or a relative phrase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TimeQuery {
    Date(NaiveDate),
    Period { phrase: String, now: NaiveDate },
}

const DATE_PROMPT_TEMPLATES: [&str; 3] = [
    "What did I note on {when}?",
    "Show me my notes from {when}.",
    "What happened in my notes on {when}?",
];

const PERIOD_PROMPT_TEMPLATES: [&str; 3] = [
    "What did I note {when}?",
    "Summarize my notes from {when}.",
    "What was I working on {when}?",
];

const TIME_SUMMARY_PROMPT: &str = "Summarize these notes in one or two sentences.";

/// Generates one time-awareness example. The chain-of-thought target first
/// resolves the phrase to its explicit date range (treating the date like a
/// long keyphrase), then lists and summarizes the matching notes — or
/// states that none exist in the range.
pub fn gen_time_examples(
    corpus: &Corpus,
    query: &TimeQuery,
    provider: &dyn ChatProvider,
) -> Result<Vec<TrainingExample>, LpmError> {
    let (category, phrase_text, start, end, now) = match query {
        TimeQuery::Date(d) => (
            ExampleCategory::DateRetrieval,
            d.format("%Y-%m-%d").to_string(),
            *d,
            *d,
            *d,
        ),
        TimeQuery::Period { phrase, now } => {
            let (start, end) = resolve_period(phrase, *now)?;
            (ExampleCategory::PeriodSummary, phrase.clone(), start, end, *now)
        }
    };
    let matching: Vec<&RawItem> = corpus
        .items()
        .iter()
        .filter(|i| {
            let d = i.timestamp().date_naive();
            d >= start && d <= end
        })
        .collect();

    let mut cot = match query {
        TimeQuery::Date(_) => format!("The date in question is {start}."),
        TimeQuery::Period { phrase, .. } => format!(
            "The period \"{phrase}\" relative to {now} is {start} to {end}."
        ),
    };
    cot.push('\n');
    let refs: Vec<String>;
    if matching.is_empty() {
        cot.push_str(&format!("{NO_NOTES_MARKER} between {start} and {end}."));
        refs = Vec::new();
    } else {
        let listing = matching
            .iter()
            .map(|i| format!("{} ({})", i.id(), i.timestamp().format("%Y-%m-%d")))
            .collect::<Vec<_>>()
            .join("; ");
        cot.push_str(&format!("Matching notes: {listing}.\n"));
        let bodies = matching
            .iter()
            .map(|i| crate::corpus::render_item(i))
            .collect::<Vec<_>>()
            .join("\n\n");
        let summary = provider
            .complete(&[
                ChatMessage::system(TIME_SUMMARY_PROMPT),
                ChatMessage::user(bodies),
            ])?
            .text;
        cot.push_str(summary.trim());
        refs = matching.iter().map(|i| i.id().to_string()).collect();
    }

    let templates = match category {
        ExampleCategory::DateRetrieval => &DATE_PROMPT_TEMPLATES,
        _ => &PERIOD_PROMPT_TEMPLATES,
    };
    let idx = (start.num_days_from_ce().unsigned_abs() as usize) % templates.len();
    let prompt = me_prefix(&templates[idx].replace("{when}", &phrase_text))?;
    Ok(vec![TrainingExample::new(
        prompt, cot, category, refs, true,
    )?])
}

/// Small pool of generic instructions used to synthesize first-person
/// rephrasing examples. None of the originals contain a first-person token.
pub const GENERIC_INSTRUCTION_POOL: [(&str, &str); 8] = [
    ("Summarize the note", "Here is a short summary of the note."),
    ("Translate the sentence into French", "Voici la traduction de la phrase."),
    ("List three healthy breakfast options", "Oatmeal, Greek yogurt with fruit, and eggs with toast."),
    ("Explain the water cycle briefly", "Water evaporates, condenses into clouds, and falls as precipitation."),
    ("Draft a polite reminder email", "A short, courteous reminder email is drafted below."),
    ("Suggest a name for the reading group", "How about \"Chapter and Verse\"?"),
    ("Outline the steps to repot a plant", "Loosen the roots, add fresh soil, replant, and water."),
    ("Convert the recipe to metric units", "The converted quantities are listed below."),
];

/// Rephrases the generic pool into first-person training examples.
pub fn gen_me_rephrase_examples(
    provider: &dyn ChatProvider,
) -> Result<Vec<TrainingExample>, LpmError> {
    let mut out = Vec::new();
    for (instruction, response) in GENERIC_INSTRUCTION_POOL {
        let record = rephrase_me(instruction, provider)?;
        let prompt = me_prefix(&record.after)?;
        out.push(TrainingExample::new(
            prompt,
            response.to_string(),
            ExampleCategory::MeRephrase,
            Vec::new(),
            false,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// A batch is rejected when any one skeleton exceeds this share.
    pub max_skeleton_share: f64,
    /// Warn when dataset tokens fall below this multiple of corpus tokens.
    pub min_token_multiplier: f64,
    pub base_model: String,
    pub lora_rank: u32,
    pub epochs: u32,
    pub lr_schedule: String,
    pub max_learning_rate: f64,
    pub decode_temperature: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            max_skeleton_share: 0.30,
            min_token_multiplier: 10.0,
            base_model: "qwen2-7b-instruct".into(),
            lora_rank: 64,
            epochs: 5,
            lr_schedule: "cosine".into(),
            max_learning_rate: 0.0001,
            decode_temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub examples: usize,
    pub duplicates_removed: usize,
    pub by_category: BTreeMap<String, usize>,
    pub dataset_tokens: usize,
    pub corpus_tokens: usize,
    pub token_multiplier: f64,
    pub below_multiplier: bool,
}

/// Training configuration emitted next to the dataset. Defaults: LoRA rank
/// 64, 5 epochs, cosine schedule with max learning rate 1e-4, decode
/// temperature 0. All overridable through [`DatasetConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneManifest {
    pub base_model: String,
    pub lora_rank: u32,
    pub epochs: u32,
    pub lr_schedule: String,
    pub max_learning_rate: f64,
    pub decode_temperature: f64,
    pub dataset_path: String,
    pub stats: DatasetStats,
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "finetune-manifest.json";

/// Deduplicates, enforces the sentinel and skeleton-diversity gates, writes
/// `dataset.jsonl` plus the manifest into `out_dir`, and returns the
/// manifest.
pub fn emit_dataset(
    examples: &[TrainingExample],
    corpus: &Corpus,
    config: &DatasetConfig,
    out_dir: impl AsRef<Path>,
) -> Result<(PathBuf, FinetuneManifest), LpmError> {
    if examples.is_empty() {
        return Err(LpmError::EmptyExamples);
    }
    // Dedup exact (prompt, target) pairs, keeping first occurrence.
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut kept: Vec<&TrainingExample> = Vec::new();
    for ex in examples {
        if ex.prompt.matches(ME_SENTINEL).count() != 1 || !ex.prompt.starts_with(ME_SENTINEL) {
            return Err(LpmError::InvalidExample(format!(
                "prompt must carry the sentinel exactly once: {:?}",
                ex.prompt
            )));
        }
        if seen.insert((ex.prompt.clone(), ex.target.clone())) {
            kept.push(ex);
        }
    }
    let duplicates_removed = examples.len() - kept.len();

    let mut skeleton_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in &kept {
        *skeleton_counts.entry(ex.skeleton.as_str()).or_insert(0) += 1;
    }
    for (skeleton, count) in &skeleton_counts {
        let share = *count as f64 / kept.len() as f64;
        if share > config.max_skeleton_share {
            return Err(LpmError::SkeletonMonoculture {
                skeleton: (*skeleton).to_string(),
                share: share * 100.0,
                limit: config.max_skeleton_share * 100.0,
            });
        }
    }

    let counter = WhitespacePunctCounter;
    let dataset_tokens: usize = kept
        .iter()
        .map(|ex| counter.count(&ex.prompt) + counter.count(&ex.target))
        .sum();
    let corpus_tokens = corpus.rendered_tokens(&counter);
    let token_multiplier = if corpus_tokens == 0 {
        0.0
    } else {
        dataset_tokens as f64 / corpus_tokens as f64
    };
    let below_multiplier = token_multiplier < config.min_token_multiplier;
    if below_multiplier {
        log::warn!(
            "dataset is {token_multiplier:.2}x the corpus tokens, below the {}x target",
            config.min_token_multiplier
        );
    }

    let mut by_category: BTreeMap<String, usize> = BTreeMap::new();
    for ex in &kept {
        *by_category.entry(ex.category.label().to_string()).or_insert(0) += 1;
    }

    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|source| LpmError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let dataset_path = out_dir.join(DATASET_FILE);
    let mut body = String::new();
    for ex in &kept {
        body.push_str(&serde_json::to_string(ex).expect("example serializes"));
        body.push('\n');
    }
    std::fs::write(&dataset_path, body).map_err(|source| LpmError::Io {
        path: dataset_path.display().to_string(),
        source,
    })?;

    let manifest = FinetuneManifest {
        base_model: config.base_model.clone(),
        lora_rank: config.lora_rank,
        epochs: config.epochs,
        lr_schedule: config.lr_schedule.clone(),
        max_learning_rate: config.max_learning_rate,
        decode_temperature: config.decode_temperature,
        dataset_path: DATASET_FILE.to_string(),
        stats: DatasetStats {
            examples: kept.len(),
            duplicates_removed,
            by_category,
            dataset_tokens,
            corpus_tokens,
            token_multiplier,
            below_multiplier,
        },
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&manifest_path, text).map_err(|source| LpmError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    Ok((dataset_path, manifest))
}

#[derive(Debug, Clone)]
pub struct GenOptions {
    pub chunker: ChunkerConfig,
    pub chunk_options: ChunkGenOptions,
    /// Reference date for relative phrases; defaults to the day after the
    /// newest corpus item so generation stays deterministic.
    pub now: Option<NaiveDate>,
    /// Rephrase generated prompts that lack a first-person token.
    pub rephrase: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            chunker: ChunkerConfig::default(),
            chunk_options: ChunkGenOptions::default(),
            now: None,
            rephrase: true,
        }
    }
}

/// Full synthesis pass over a corpus: chunk retrieval per note, cross-note
/// examples for keyphrases spanning several chunks, date and period
/// examples, and the generic rephrasing pool.
pub fn generate_dataset(
    corpus: &Corpus,
    provider: &dyn ChatProvider,
    options: &GenOptions,
) -> Result<Vec<TrainingExample>, LpmError> {
    let mut examples = Vec::new();
    let mut all_chunks: Vec<NoteChunk> = Vec::new();
    for item in corpus.items() {
        if matches!(item, RawItem::Note { .. }) {
            match chunk_note(item, options.chunker) {
                Ok(mut chunks) => all_chunks.append(&mut chunks),
                Err(LpmError::EmptyNote(_)) => continue,
                Err(e) => return Err(e),
            }
            let mut from_note =
                gen_chunk_retrieval(item, options.chunker, provider, options.chunk_options)?;
            examples.append(&mut from_note);
        }
    }

    // Cross-note examples for content words that span two or more chunks.
    let mut word_chunks: BTreeMap<String, usize> = BTreeMap::new();
    for chunk in &all_chunks {
        for word in BTreeSet::from_iter(text::content_words(&chunk.text)) {
            *word_chunks.entry(word).or_insert(0) += 1;
        }
    }
    let mut crossnote_count = 0usize;
    for (word, count) in &word_chunks {
        if *count >= 2 && word.len() >= 5 {
            match gen_crossnote(word, &all_chunks, provider) {
                Ok(ex) => {
                    examples.push(ex);
                    crossnote_count += 1;
                }
                Err(LpmError::InsufficientChunks(_)) => continue,
                Err(e) => return Err(e),
            }
            if crossnote_count >= 8 {
                break;
            }
        }
    }

    let now = options.now.unwrap_or_else(|| {
        corpus
            .items()
            .last()
            .map(|i| i.timestamp().date_naive() + Duration::days(1))
            .unwrap_or_else(|| NaiveDate::from_ymd_opt(2024, 7, 18).expect("valid date"))
    });
    for phrase in ["yesterday", "last week", "last month"] {
        let mut t = gen_time_examples(
            corpus,
            &TimeQuery::Period {
                phrase: phrase.into(),
                now,
            },
            provider,
        )?;
        examples.append(&mut t);
    }
    let mut dates: BTreeSet<NaiveDate> =
        corpus.items().iter().map(|i| i.timestamp().date_naive()).collect();
    // A date with no notes teaches the model to say so instead of guessing.
    dates.insert(NaiveDate::from_ymd_opt(2000, 4, 5).expect("valid date"));
    for date in dates.into_iter().take(6) {
        let mut t = gen_time_examples(corpus, &TimeQuery::Date(date), provider)?;
        examples.append(&mut t);
    }

    let mut me = gen_me_rephrase_examples(provider)?;
    examples.append(&mut me);

    if options.rephrase {
        let rephraser = heuristic_rephraser();
        for ex in &mut examples {
            let body = ex.prompt.strip_prefix(ME_SENTINEL).unwrap_or(&ex.prompt);
            if !has_first_person(body) {
                let record = rephrase_me(body, &rephraser)?;
                ex.prompt = me_prefix(&record.after)?;
                ex.skeleton = skeleton_of(&ex.prompt);
            }
        }
    }
    Ok(examples)
}
