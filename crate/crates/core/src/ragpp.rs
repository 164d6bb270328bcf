//! Summary-augmented retrieval pipeline: BM25 over an in-process inverted
//! index, provider-assisted query rewrite, embedding rerank, and final
//! generation — plus the method-adapter interface the benchmark runs
//! against. With every provider failing, the pipeline degrades to a lexical
//! context dump instead of crashing.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{assemble_haystack, render_item, Corpus, RawItem, TokenCounter};
use crate::provider::{cosine, ChatMessage, ChatProvider, EmbeddingProvider, ProviderError};
use crate::text;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("query is empty")]
    EmptyQuery,
    #[error("no hits supplied")]
    EmptyHits,
    #[error("method `{0}` is not registered")]
    UnknownMethod(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed index file: {0}")]
    MalformedIndex(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Default BM25 parameters.
pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// One indexed document: a rendered corpus item plus its generated summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexedDoc {
    pub id: String,
    pub body: String,
    /// Present for every note unless its summary call failed; chats carry
    /// no generated summary.
    pub summary: Option<String>,
    #[serde(default)]
    pub summary_failed: bool,
    /// Term count of body plus summary; the BM25 document length.
    pub tokens: usize,
    pub term_freqs: BTreeMap<String, usize>,
}

impl IndexedDoc {
    pub fn searchable_text(&self) -> String {
        match &self.summary {
            Some(s) => format!("{}\n{}", self.body, s),
            None => self.body.clone(),
        }
    }
}

/// In-process inverted index with BM25 scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RagIndex {
    pub docs: Vec<IndexedDoc>,
    pub k1: f64,
    pub b: f64,
    doc_freqs: BTreeMap<String, usize>,
    total_terms: usize,
}

const SUMMARY_PROMPT: &str = "Summarize this note in two or three sentences.";

/// Indexes every corpus item. Notes get a provider-generated summary; a
/// summary failure is logged, the note is indexed without it and flagged.
pub fn build_index(corpus: &Corpus, provider: &dyn ChatProvider) -> Result<RagIndex, RagError> {
    build_index_with_params(corpus, provider, DEFAULT_K1, DEFAULT_B)
}

pub fn build_index_with_params(
    corpus: &Corpus,
    provider: &dyn ChatProvider,
    k1: f64,
    b: f64,
) -> Result<RagIndex, RagError> {
    if corpus.is_empty() {
        return Err(RagError::EmptyCorpus);
    }
    let mut docs = Vec::with_capacity(corpus.len());
    for item in corpus.items() {
        let body = render_item(item);
        let (summary, summary_failed) = match item {
            RawItem::Note { .. } => {
                let messages = vec![
                    ChatMessage::system(SUMMARY_PROMPT),
                    ChatMessage::user(body.clone()),
                ];
                match provider.complete(&messages) {
                    Ok(r) => (Some(r.text), false),
                    Err(e) => {
                        log::warn!("summary for `{}` failed: {e}", item.id());
                        (None, true)
                    }
                }
            }
            RawItem::Chat { .. } => (None, false),
        };
        let mut doc = IndexedDoc {
            id: item.id().to_string(),
            body,
            summary,
            summary_failed,
            tokens: 0,
            term_freqs: BTreeMap::new(),
        };
        let terms = text::words(&doc.searchable_text());
        doc.tokens = terms.len();
        for term in terms {
            *doc.term_freqs.entry(term).or_insert(0) += 1;
        }
        docs.push(doc);
    }
    let mut doc_freqs: BTreeMap<String, usize> = BTreeMap::new();
    let mut total_terms = 0usize;
    for doc in &docs {
        total_terms += doc.tokens;
        for term in doc.term_freqs.keys() {
            *doc_freqs.entry(term.clone()).or_insert(0) += 1;
        }
    }
    Ok(RagIndex {
        docs,
        k1,
        b,
        doc_freqs,
        total_terms,
    })
}

impl RagIndex {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RagError> {
        let path = path.as_ref();
        let mut body = serde_json::to_string_pretty(self).expect("index serializes");
        body.push('\n');
        std::fs::write(path, body).map_err(|source| RagError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RagError> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|source| RagError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&body).map_err(|e| RagError::MalformedIndex(e.to_string()))
    }

    pub fn doc(&self, id: &str) -> Option<&IndexedDoc> {
        self.docs.iter().find(|d| d.id == id)
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_terms as f64 / self.docs.len() as f64
        }
    }

    /// BM25 score of one document for a query.
    ///
    /// Exact expression, accumulated over the query's unique terms in
    /// first-occurrence order:
    /// `sum idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))`
    /// with `idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1)`.
    pub fn bm25_score(&self, query_terms: &[String], doc: &IndexedDoc) -> f64 {
        let n = self.docs.len() as f64;
        let avgdl = self.avg_doc_len();
        let dl = doc.tokens as f64;
        let mut score = 0.0;
        for term in query_terms {
            let df = *self.doc_freqs.get(term).unwrap_or(&0) as f64;
            if df == 0.0 {
                continue;
            }
            let tf = *doc.term_freqs.get(term).unwrap_or(&0) as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * dl / avgdl));
        }
        score
    }
}

/// Unique query terms in first-occurrence order.
pub fn query_terms(query: &str) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    text::words(query)
        .into_iter()
        .filter(|w| seen.insert(w.clone()))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedHit {
    pub doc_id: String,
    pub lexical_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_score: Option<f64>,
    /// 1-based rank; ranks are always a permutation of 1..=n.
    pub rank: usize,
}

/// Top-k BM25 retrieval; ties break by doc id ascending.
pub fn lexical_retrieve(
    index: &RagIndex,
    query: &str,
    k: usize,
) -> Result<Vec<RankedHit>, RagError> {
    if query.trim().is_empty() {
        return Err(RagError::EmptyQuery);
    }
    let terms = query_terms(query);
    let mut scored: Vec<(f64, &IndexedDoc)> = index
        .docs
        .iter()
        .map(|d| (index.bm25_score(&terms, d), d))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.id.cmp(&b.1.id))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (score, doc))| RankedHit {
            doc_id: doc.id.clone(),
            lexical_score: score,
            embedding_score: None,
            rank: i + 1,
        })
        .collect())
}

const REWRITE_PROMPT: &str = "Rewrite the question to be more specific, using the retrieved context below. Reply with the rewritten question only.";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub query: String,
    pub fell_back: bool,
}

/// Provider-assisted query rewrite conditioned on the top hits. On provider
/// failure the original query is returned with the fallback flag set; this
/// op never errors.
pub fn rewrite_query(
    query: &str,
    top_hits: &[RankedHit],
    index: &RagIndex,
    provider: &dyn ChatProvider,
) -> Result<RewriteOutcome, RagError> {
    if top_hits.is_empty() {
        return Err(RagError::EmptyHits);
    }
    let mut contexts = String::new();
    for hit in top_hits {
        if let Some(doc) = index.doc(&hit.doc_id) {
            contexts.push_str(&format!("- {}\n", doc.searchable_text().replace('\n', " ")));
        }
    }
    let messages = vec![
        ChatMessage::system(REWRITE_PROMPT),
        ChatMessage::user(format!("Question: {query}\n\nContext:\n{contexts}")),
    ];
    match provider.complete(&messages) {
        Ok(r) if !r.text.trim().is_empty() => Ok(RewriteOutcome {
            query: r.text.trim().to_string(),
            fell_back: false,
        }),
        Ok(_) => {
            log::warn!("rewrite returned empty text; keeping the original query");
            Ok(RewriteOutcome {
                query: query.to_string(),
                fell_back: true,
            })
        }
        Err(e) => {
            log::warn!("rewrite failed ({e}); keeping the original query");
            Ok(RewriteOutcome {
                query: query.to_string(),
                fell_back: true,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerankOutcome {
    pub hits: Vec<RankedHit>,
    pub fell_back: bool,
}

/// Reranks hits by cosine similarity between the query embedding and each
/// hit's body-plus-summary embedding, descending. Equal similarities keep
/// their prior lexical order (the sort is stable). Embedding failure keeps
/// the prior order and sets the fallback flag.
pub fn embed_rerank(
    query: &str,
    hits: &[RankedHit],
    index: &RagIndex,
    embedder: &dyn EmbeddingProvider,
) -> Result<RerankOutcome, RagError> {
    if hits.is_empty() {
        return Err(RagError::EmptyHits);
    }
    let mut texts = Vec::with_capacity(hits.len() + 1);
    texts.push(query.to_string());
    for hit in hits {
        let doc = index
            .doc(&hit.doc_id)
            .map(|d| d.searchable_text())
            .unwrap_or_default();
        texts.push(doc);
    }
    let vectors = match embedder.embed(&texts) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("embedding failed ({e}); keeping lexical order");
            return Ok(RerankOutcome {
                hits: hits.to_vec(),
                fell_back: true,
            });
        }
    };
    let query_vec = &vectors[0];
    let mut reranked: Vec<RankedHit> = hits
        .iter()
        .enumerate()
        .map(|(i, hit)| {
            let mut hit = hit.clone();
            hit.embedding_score = Some(cosine(query_vec, &vectors[i + 1]));
            hit
        })
        .collect();
    reranked.sort_by(|a, b| {
        b.embedding_score
            .partial_cmp(&a.embedding_score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for (i, hit) in reranked.iter_mut().enumerate() {
        hit.rank = i + 1;
    }
    Ok(RerankOutcome {
        hits: reranked,
        fell_back: false,
    })
}

const GENERATE_PROMPT: &str =
    "You are a helpful assistant. Answer the question using only the provided context.";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub text: String,
    pub truncated: bool,
}

/// Final generation over the retrieved contexts. Contexts that do not fit
/// the provider budget are dropped from the lowest rank up, logged.
pub fn answer(
    query: &str,
    contexts: &[String],
    provider: &dyn ChatProvider,
    counter: &dyn TokenCounter,
) -> Result<GenerationOutcome, RagError> {
    if query.trim().is_empty() {
        return Err(RagError::EmptyQuery);
    }
    let template_tokens =
        counter.count(GENERATE_PROMPT) + counter.count(&format!("Context:\n\nQuestion: {query}"));
    let budget = provider
        .config()
        .max_context_tokens
        .saturating_sub(template_tokens);
    let mut kept = contexts.len();
    loop {
        let used: usize = contexts[..kept].iter().map(|c| counter.count(c)).sum();
        if used <= budget || kept == 0 {
            break;
        }
        kept -= 1;
    }
    let truncated = kept < contexts.len();
    if truncated {
        log::warn!("dropped {} context(s) to fit the budget", contexts.len() - kept);
    }
    let joined = contexts[..kept].join("\n\n");
    let messages = vec![
        ChatMessage::system(GENERATE_PROMPT),
        ChatMessage::user(format!("Context:\n{joined}\n\nQuestion: {query}")),
    ];
    let result = provider.complete(&messages)?;
    Ok(GenerationOutcome {
        text: result.text,
        truncated,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RagConfig {
    pub initial_k: usize,
    pub final_k: usize,
    pub rewrite_hits: usize,
}

impl Default for RagConfig {
    fn default() -> Self {
        RagConfig {
            initial_k: 20,
            final_k: 5,
            rewrite_hits: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RagAnswer {
    pub text: String,
    pub degraded: bool,
    pub rewrite_fell_back: bool,
    pub rerank_fell_back: bool,
    pub truncated: bool,
    pub hits: Vec<RankedHit>,
}

/// The full pipeline: lexical retrieve, rewrite, embed rerank with the
/// rewritten query, generate with the original question.
pub struct RagPipeline {
    pub index: RagIndex,
    pub generator: Arc<dyn ChatProvider>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub counter: Arc<dyn TokenCounter>,
    pub config: RagConfig,
}

impl RagPipeline {
    /// Answers a question. Provider failures downgrade stages; when even
    /// generation fails, the answer is a context dump flagged `degraded`.
    pub fn answer_question(&self, query: &str) -> Result<RagAnswer, RagError> {
        if query.trim().is_empty() {
            return Err(RagError::EmptyQuery);
        }
        let initial = lexical_retrieve(&self.index, query, self.config.initial_k)?;
        if initial.is_empty() {
            return Ok(RagAnswer {
                text: "No indexed documents.".into(),
                degraded: true,
                rewrite_fell_back: false,
                rerank_fell_back: false,
                truncated: false,
                hits: vec![],
            });
        }
        let rewrite_pool = &initial[..initial.len().min(self.config.rewrite_hits)];
        let rewrite = rewrite_query(query, rewrite_pool, &self.index, self.generator.as_ref())?;
        let rerank = embed_rerank(&rewrite.query, &initial, &self.index, self.embedder.as_ref())?;
        let final_hits: Vec<RankedHit> = rerank
            .hits
            .iter()
            .take(self.config.final_k)
            .cloned()
            .collect();
        let contexts: Vec<String> = final_hits
            .iter()
            .filter_map(|h| self.index.doc(&h.doc_id).map(|d| d.searchable_text()))
            .collect();
        match answer(query, &contexts, self.generator.as_ref(), self.counter.as_ref()) {
            Ok(generated) => Ok(RagAnswer {
                text: generated.text,
                degraded: false,
                rewrite_fell_back: rewrite.fell_back,
                rerank_fell_back: rerank.fell_back,
                truncated: generated.truncated,
                hits: final_hits,
            }),
            Err(e) => {
                log::warn!("generation failed ({e}); returning a context dump");
                let dump = format!(
                    "No generation available. Top retrieved contexts:\n\n{}",
                    contexts.join("\n\n")
                );
                Ok(RagAnswer {
                    text: dump,
                    degraded: true,
                    rewrite_fell_back: rewrite.fell_back,
                    rerank_fell_back: rerank.fell_back,
                    truncated: false,
                    hits: final_hits,
                })
            }
        }
    }
}

/// One compared method: a named question-answering function with a declared
/// context budget. Adapters are interchangeable in the benchmark runner.
pub trait MethodAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn context_budget(&self) -> usize;
    fn answer(&self, question: &str) -> Result<String, RagError>;
}

pub struct RagppAdapter {
    pub pipeline: RagPipeline,
}

impl MethodAdapter for RagppAdapter {
    fn name(&self) -> &str {
        "ragpp"
    }

    fn context_budget(&self) -> usize {
        self.pipeline.generator.config().max_context_tokens
    }

    fn answer(&self, question: &str) -> Result<String, RagError> {
        Ok(self.pipeline.answer_question(question)?.text)
    }
}

/// Long-context baseline: stuff the newest suffix of the corpus into the
/// window and ask directly.
pub struct LongContextAdapter {
    pub corpus: Corpus,
    pub provider: Arc<dyn ChatProvider>,
    pub counter: Arc<dyn TokenCounter>,
    pub budget: usize,
}

impl MethodAdapter for LongContextAdapter {
    fn name(&self) -> &str {
        "long-context"
    }

    fn context_budget(&self) -> usize {
        self.budget
    }

    fn answer(&self, question: &str) -> Result<String, RagError> {
        let overhead = self
            .counter
            .count(GENERATE_PROMPT)
            + self.counter.count(&format!("Context:\n\nQuestion: {question}"));
        let haystack = assemble_haystack(
            &self.corpus,
            self.budget.saturating_sub(overhead),
            self.counter.as_ref(),
        )
        .map_err(|e| RagError::MalformedIndex(e.to_string()))?;
        let generated = answer(
            question,
            &[haystack.rendered_text],
            self.provider.as_ref(),
            self.counter.as_ref(),
        )?;
        Ok(generated.text)
    }
}

/// Methods registered by name for the benchmark runner.
#[derive(Default)]
pub struct AdapterRegistry {
    adapters: BTreeMap<String, Box<dyn MethodAdapter>>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, adapter: Box<dyn MethodAdapter>) {
        self.adapters.insert(adapter.name().to_string(), adapter);
    }

    pub fn get(&self, name: &str) -> Result<&dyn MethodAdapter, RagError> {
        self.adapters
            .get(name)
            .map(|a| a.as_ref())
            .ok_or_else(|| RagError::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.adapters.keys().map(|s| s.as_str()).collect()
    }
}
