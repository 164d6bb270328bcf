//! Haystack evaluation runs: judge answers against a fixed rubric, sweep
//! providers x placement modes x context lengths, and aggregate scores into
//! a (provider, mode, context length, hops) matrix.

pub mod report;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{assemble_haystack, Corpus, CorpusError, TokenCounter};
use crate::needle::{
    inject, plan_depths, Injection, NeedleError, NeedleQueryPair, PlacementMode,
};
use crate::provider::{
    build_niah_messages, chat_fingerprint, ChatMessage, ChatProvider, ProviderError,
    NIAH_QUESTION_SUFFIX, NIAH_SYSTEM_PROMPT,
};
use crate::util::par_map_bounded;

/// Grading scale the judge replies on, one line per anchored score.
pub const JUDGE_RUBRIC: &str = "Accuracy:\n\
Score 0: The answer is completely unrelated or contradictory to the reference.\n\
Score 3: The answer has minor relevance with the reference but does not align with the reference.\n\
Score 5: The answer has moderate relevance but contains inaccuracies.\n\
Score 7: The answer aligns with the reference but has minor omissions.\n\
Score 10: The answer is completely accurate and aligns perfectly with the reference.";

/// Final instruction line of every judge prompt.
pub const JUDGE_INSTRUCTION: &str = "Only respond with a numerical score";

/// Scores on the rubric's anchor points.
pub const RUBRIC_VALUES: [u8; 5] = [0, 3, 5, 7, 10];

const REASK_INSTRUCTION: &str = "Respond with only a single integer score.";

#[derive(Debug, Error)]
pub enum NiahError {
    #[error("judge output unparsable after {attempts} attempts; last reply: {last:?}")]
    UnparsableJudgeOutput { attempts: u32, last: String },
    #[error("judge input must not be empty")]
    EmptyJudgeInput,
    #[error("no records to aggregate")]
    NoRecords,
    #[error("cell {provider}/{mode}/{context_length} failed on all records")]
    CellFailed {
        provider: String,
        mode: String,
        context_length: usize,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Needle(#[from] NeedleError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// A parsed judge reply. `rubric_aligned` is false for integers inside the
/// 0..=10 range that sit off the rubric's anchor points; those are accepted
/// but flagged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeScore {
    pub raw_text: String,
    pub value: u8,
    pub rubric_aligned: bool,
}

/// First contiguous digit run in `text`, if any.
pub fn parse_first_integer(text: &str) -> Option<i64> {
    let mut digits = String::new();
    for ch in text.chars() {
        if ch.is_ascii_digit() {
            digits.push(ch);
        } else if !digits.is_empty() {
            break;
        }
    }
    if digits.is_empty() {
        None
    } else {
        digits.parse().ok()
    }
}

/// Asks `judge_provider` to rate `candidate` against `reference` under
/// `rubric`, parsing the first integer of the reply and requiring it to fall
/// in `range`. Re-asks up to two times on unparsable or out-of-range output
/// (the retry carries the previous reply plus a firmer instruction), then
/// gives up.
pub fn judge_with_range(
    question: &str,
    reference: &str,
    candidate: &str,
    rubric: &str,
    range: std::ops::RangeInclusive<i64>,
    judge_provider: &dyn ChatProvider,
) -> Result<(String, i64), NiahError> {
    if question.trim().is_empty() || reference.trim().is_empty() || candidate.trim().is_empty() {
        return Err(NiahError::EmptyJudgeInput);
    }
    let mut messages = vec![
        ChatMessage::system(rubric.to_string()),
        ChatMessage::user(format!(
            "Question: {question}\n\nReference answer: {reference}\n\nCandidate answer: {candidate}\n\n{JUDGE_INSTRUCTION}"
        )),
    ];
    let mut last = String::new();
    for _attempt in 0..3 {
        let reply = judge_provider.complete(&messages)?;
        last = reply.text.clone();
        if let Some(value) = parse_first_integer(&reply.text) {
            if range.contains(&value) {
                return Ok((reply.text, value));
            }
        }
        messages.push(ChatMessage::assistant(reply.text));
        messages.push(ChatMessage::user(REASK_INSTRUCTION));
    }
    Err(NiahError::UnparsableJudgeOutput { attempts: 3, last })
}

/// Rates a provider answer on the 0..=10 haystack scale.
pub fn judge(
    question: &str,
    true_answer: &str,
    provider_answer: &str,
    judge_provider: &dyn ChatProvider,
) -> Result<JudgeScore, NiahError> {
    let (raw_text, value) = judge_with_range(
        question,
        true_answer,
        provider_answer,
        JUDGE_RUBRIC,
        0..=10,
        judge_provider,
    )?;
    let value = value as u8;
    let rubric_aligned = RUBRIC_VALUES.contains(&value);
    if !rubric_aligned {
        log::warn!("judge returned off-rubric value {value}; accepted and flagged");
    }
    Ok(JudgeScore {
        raw_text,
        value,
        rubric_aligned,
    })
}

/// One (pair, corpus) evaluation inside a cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub provider: String,
    pub mode: String,
    pub context_length: usize,
    pub pair_id: String,
    pub hops: u8,
    pub corpus_user: String,
    pub score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric_aligned: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub injections: Vec<Injection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_fingerprint: Option<String>,
}

/// Outcome of one grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CellOutcome {
    Completed(Vec<ScoredRecord>),
    /// All records failed; the records carry the individual errors.
    Failed(Vec<ScoredRecord>),
    Skipped { reason: String },
}

/// Fixed inputs of a sweep: the pair fixtures, the corpora (one haystack per
/// corpus), and the token counter.
pub struct NiahRun<'a> {
    pub pairs: &'a [NeedleQueryPair],
    pub corpora: &'a [Corpus],
    pub counter: &'a dyn TokenCounter,
}

/// Tokens reserved for the prompt template and the question, i.e. everything
/// in the request except the haystack and the needles.
pub fn template_overhead(pair: &NeedleQueryPair, counter: &dyn TokenCounter) -> usize {
    counter.count(NIAH_SYSTEM_PROMPT)
        + counter.count(&format!("{} {}", pair.query, NIAH_QUESTION_SUFFIX))
}

/// Token cost of the pair's needles rendered as synthetic entries under
/// `mode`. Dates always render to the same token count, so a placeholder
/// timestamp gives the exact value.
pub fn needle_overhead(
    pair: &NeedleQueryPair,
    mode: PlacementMode,
    counter: &dyn TokenCounter,
) -> usize {
    let date = chrono::DateTime::<chrono::Utc>::UNIX_EPOCH;
    let header = format!("[{}] Chat", date.format("%Y-%m-%d"));
    match mode {
        PlacementMode::MultiUniform => pair
            .needles
            .iter()
            .map(|n| counter.count(&format!("{header}\nUSER: {n}")))
            .sum(),
        PlacementMode::SingleCombined(_) => {
            let mut text = header;
            for n in &pair.needles {
                text.push('\n');
                text.push_str(&format!("USER: {n}"));
            }
            counter.count(&text)
        }
    }
}

fn record_failure(
    provider: &str,
    mode: PlacementMode,
    context_length: usize,
    pair: &NeedleQueryPair,
    corpus_user: &str,
    message: String,
) -> ScoredRecord {
    ScoredRecord {
        provider: provider.to_string(),
        mode: mode.label().to_string(),
        context_length,
        pair_id: pair.id.clone(),
        hops: pair.hops,
        corpus_user: corpus_user.to_string(),
        score: None,
        rubric_aligned: None,
        answer_text: None,
        error: Some(message),
        injections: Vec::new(),
        answer_fingerprint: None,
        judge_fingerprint: None,
    }
}

/// Runs every (pair x corpus) data point of one cell.
///
/// Per record: assemble a haystack at `context_length` minus the template
/// and needle reservations, inject per `mode`, ask, judge. The full request
/// always fits `context_length`. A provider whose window cannot fit the cell
/// is skipped without issuing any call. Individual record failures are
/// recorded; the cell fails only when every record failed.
pub fn run_cell(
    provider: &dyn ChatProvider,
    judge_provider: &dyn ChatProvider,
    run: &NiahRun<'_>,
    mode: PlacementMode,
    context_length: usize,
) -> Result<CellOutcome, NiahError> {
    let provider_name = provider.config().name.clone();
    let max_template = run
        .pairs
        .iter()
        .map(|p| template_overhead(p, run.counter))
        .max()
        .unwrap_or(0);
    if provider.config().max_context_tokens < context_length + max_template {
        return Ok(CellOutcome::Skipped {
            reason: format!(
                "provider window {} cannot fit context length {} plus template overhead {}",
                provider.config().max_context_tokens,
                context_length,
                max_template
            ),
        });
    }

    let work: Vec<(&NeedleQueryPair, &Corpus)> = run
        .pairs
        .iter()
        .flat_map(|p| run.corpora.iter().map(move |c| (p, c)))
        .collect();

    let records = par_map_bounded(
        work,
        provider.config().max_parallel,
        |(pair, corpus)| -> ScoredRecord {
            let fail = |message: String| {
                record_failure(&provider_name, mode, context_length, pair, &corpus.user_id, message)
            };
            let template = template_overhead(pair, run.counter);
            let needles = needle_overhead(pair, mode, run.counter);
            let budget = match context_length.checked_sub(template + needles) {
                Some(b) if b > 0 => b,
                _ => return fail(format!(
                    "context length {context_length} cannot fit template {template} and needles {needles}"
                )),
            };
            let haystack = match assemble_haystack(corpus, budget, run.counter) {
                Ok(h) => h,
                Err(e) => return fail(e.to_string()),
            };
            let plan = match plan_depths(mode, pair.needles.len()) {
                Ok(p) => p,
                Err(e) => return fail(e.to_string()),
            };
            let injected = match inject(&haystack, pair, &plan, run.counter) {
                Ok(i) => i,
                Err(e) => return fail(e.to_string()),
            };
            let messages = match build_niah_messages(&injected.rendered_text, &pair.query) {
                Ok(m) => m,
                Err(e) => return fail(e.to_string()),
            };
            debug_assert!(
                injected.token_length + template <= context_length,
                "request exceeds the cell budget"
            );
            let answer_fingerprint = chat_fingerprint(provider.config(), &messages);
            let answer = match provider.complete(&messages) {
                Ok(a) => a,
                Err(e) => return fail(e.to_string()),
            };
            let judge_fp = {
                let judge_messages = vec![
                    ChatMessage::system(JUDGE_RUBRIC.to_string()),
                    ChatMessage::user(format!(
                        "Question: {}\n\nReference answer: {}\n\nCandidate answer: {}\n\n{JUDGE_INSTRUCTION}",
                        pair.query, pair.true_answer, answer.text
                    )),
                ];
                chat_fingerprint(judge_provider.config(), &judge_messages)
            };
            let score = match judge(&pair.query, &pair.true_answer, &answer.text, judge_provider) {
                Ok(s) => s,
                Err(e) => return fail(format!("judge failed: {e}")),
            };
            ScoredRecord {
                provider: provider_name.clone(),
                mode: mode.label().to_string(),
                context_length,
                pair_id: pair.id.clone(),
                hops: pair.hops,
                corpus_user: corpus.user_id.clone(),
                score: Some(score.value),
                rubric_aligned: Some(score.rubric_aligned),
                answer_text: Some(answer.text),
                error: None,
                injections: injected.injections,
                answer_fingerprint: Some(answer_fingerprint),
                judge_fingerprint: Some(judge_fp),
            }
        },
    );

    if !records.is_empty() && records.iter().all(|r| r.error.is_some()) {
        return Ok(CellOutcome::Failed(records));
    }
    Ok(CellOutcome::Completed(records))
}

/// Sweeps every provider x mode x context length cell.
pub fn run_grid(
    providers: &[Arc<dyn ChatProvider>],
    judge_provider: &dyn ChatProvider,
    run: &NiahRun<'_>,
    modes: &[PlacementMode],
    context_lengths: &[usize],
) -> Result<GridOutput, NiahError> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut failed_cells = Vec::new();
    for provider in providers {
        for &mode in modes {
            for &len in context_lengths {
                match run_cell(provider.as_ref(), judge_provider, run, mode, len)? {
                    CellOutcome::Completed(mut rs) => records.append(&mut rs),
                    CellOutcome::Failed(mut rs) => {
                        failed_cells.push(CellRef {
                            provider: provider.config().name.clone(),
                            mode: mode.label().to_string(),
                            context_length: len,
                        });
                        records.append(&mut rs);
                    }
                    CellOutcome::Skipped { reason } => skipped.push(SkippedCell {
                        cell: CellRef {
                            provider: provider.config().name.clone(),
                            mode: mode.label().to_string(),
                            context_length: len,
                        },
                        reason,
                    }),
                }
            }
        }
    }
    Ok(GridOutput {
        records,
        skipped,
        failed_cells,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRef {
    pub provider: String,
    pub mode: String,
    pub context_length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedCell {
    pub cell: CellRef,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridOutput {
    pub records: Vec<ScoredRecord>,
    pub skipped: Vec<SkippedCell>,
    pub failed_cells: Vec<CellRef>,
}

/// Matrix cell address: provider x mode x context length x hops.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatrixKey {
    pub provider: String,
    pub mode: String,
    pub context_length: usize,
    pub hops: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    /// Scored sample count; failed records do not count.
    pub n: usize,
    /// Raw scores, sorted ascending for order independence.
    pub raw: Vec<u8>,
    /// Arithmetic mean of `raw`; absent when the cell has no samples.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub cells: BTreeMap<MatrixKey, MatrixCell>,
}

impl ScoreMatrix {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Records a skipped (provider, mode, context length) cell for each hop
    /// count present in `hops`, so reports render it as n/a.
    pub fn mark_skipped(&mut self, cell: &CellRef, hops: impl IntoIterator<Item = u8>) {
        for h in hops {
            self.cells
                .entry(MatrixKey {
                    provider: cell.provider.clone(),
                    mode: cell.mode.clone(),
                    context_length: cell.context_length,
                    hops: h,
                })
                .or_insert(MatrixCell {
                    n: 0,
                    raw: Vec::new(),
                    mean: None,
                });
        }
    }
}

/// Groups records into mean scores per (provider, mode, context length,
/// hops). Failed records are excluded with `n` decremented accordingly.
/// Integer score sums make the result exact and permutation-invariant.
pub fn aggregate(records: &[ScoredRecord]) -> Result<ScoreMatrix, NiahError> {
    if records.is_empty() {
        return Err(NiahError::NoRecords);
    }
    let mut cells: BTreeMap<MatrixKey, MatrixCell> = BTreeMap::new();
    for record in records {
        let key = MatrixKey {
            provider: record.provider.clone(),
            mode: record.mode.clone(),
            context_length: record.context_length,
            hops: record.hops,
        };
        let cell = cells.entry(key).or_insert(MatrixCell {
            n: 0,
            raw: Vec::new(),
            mean: None,
        });
        if let Some(score) = record.score {
            cell.n += 1;
            cell.raw.push(score);
        }
    }
    for cell in cells.values_mut() {
        cell.raw.sort_unstable();
        if cell.n > 0 {
            let sum: u64 = cell.raw.iter().map(|&v| v as u64).sum();
            cell.mean = Some(sum as f64 / cell.n as f64);
        }
    }
    Ok(ScoreMatrix { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::mock::{MockChatProvider, MockScript, SequenceChatProvider};
    use crate::provider::ProviderConfig;

    fn judge_mock(reply: &str) -> MockChatProvider {
        MockChatProvider::new(ProviderConfig::mock("judge", 100_000), MockScript::new(reply))
    }

    #[test]
    fn judge_parses_rubric_scores() {
        for (reply, aligned) in [("7", true), ("10", true), ("6", false), ("0", true)] {
            let j = judge_mock(reply);
            let score = judge("q", "ref", "cand", &j).unwrap();
            assert_eq!(score.value, reply.parse::<u8>().unwrap());
            assert_eq!(score.rubric_aligned, aligned);
            assert_eq!(score.raw_text, reply);
        }
    }

    #[test]
    fn judge_retries_twice_then_succeeds() {
        let j = SequenceChatProvider::new(
            ProviderConfig::mock("judge", 100_000),
            ["great", "great", "5"],
        );
        let score = judge("q", "ref", "cand", &j).unwrap();
        assert_eq!(score.value, 5);
        assert_eq!(j.call_count(), 3);
    }

    #[test]
    fn judge_gives_up_after_three_attempts() {
        let j = SequenceChatProvider::new(
            ProviderConfig::mock("judge", 100_000),
            ["nope", "still nope", "not a number"],
        );
        let err = judge("q", "ref", "cand", &j).unwrap_err();
        assert!(matches!(err, NiahError::UnparsableJudgeOutput { attempts: 3, .. }));
        assert_eq!(j.call_count(), 3);
    }

    #[test]
    fn judge_rejects_out_of_range_integers() {
        let j = judge_mock("42");
        let err = judge("q", "ref", "cand", &j).unwrap_err();
        assert!(matches!(err, NiahError::UnparsableJudgeOutput { .. }));
    }

    #[test]
    fn judge_prompt_contains_rubric_and_sections() {
        // Capture via a closure provider.
        use crate::provider::mock::ClosureChatProvider;
        use std::sync::Mutex;
        let captured: std::sync::Arc<Mutex<Vec<ChatMessage>>> =
            std::sync::Arc::new(Mutex::new(Vec::new()));
        let captured2 = std::sync::Arc::clone(&captured);
        let j = ClosureChatProvider::new(ProviderConfig::mock("judge", 100_000), move |msgs| {
            *captured2.lock().unwrap() = msgs.to_vec();
            "7".to_string()
        });
        judge("the question", "the reference", "the candidate", &j).unwrap();
        let msgs = captured.lock().unwrap();
        assert_eq!(msgs[0].content, JUDGE_RUBRIC);
        assert!(msgs[0].content.contains("Score 7: The answer aligns with the reference"));
        let user = &msgs[1].content;
        assert!(user.contains("Question: the question"));
        assert!(user.contains("Reference answer: the reference"));
        assert!(user.contains("Candidate answer: the candidate"));
        assert!(user.ends_with(JUDGE_INSTRUCTION));
    }

    #[test]
    fn aggregate_means_and_permutation_invariance() {
        let rec = |provider: &str, hops: u8, score: Option<u8>| ScoredRecord {
            provider: provider.into(),
            mode: "multi".into(),
            context_length: 1000,
            pair_id: "p".into(),
            hops,
            corpus_user: "u".into(),
            score,
            rubric_aligned: score.map(|_| true),
            answer_text: None,
            error: score.is_none().then(|| "boom".into()),
            injections: vec![],
            answer_fingerprint: None,
            judge_fingerprint: None,
        };
        let records = vec![
            rec("a", 1, Some(10)),
            rec("a", 1, Some(0)),
            rec("a", 2, Some(7)),
            rec("a", 2, None),
        ];
        let matrix = aggregate(&records).unwrap();
        let k1 = MatrixKey {
            provider: "a".into(),
            mode: "multi".into(),
            context_length: 1000,
            hops: 1,
        };
        assert_eq!(matrix.cells[&k1].mean, Some(5.0));
        assert_eq!(matrix.cells[&k1].n, 2);
        let k2 = MatrixKey { hops: 2, ..k1.clone() };
        assert_eq!(matrix.cells[&k2].mean, Some(7.0));
        assert_eq!(matrix.cells[&k2].n, 1); // failed record decremented n

        let mut shuffled = records.clone();
        shuffled.reverse();
        shuffled.swap(0, 1);
        assert_eq!(matrix, aggregate(&shuffled).unwrap());
    }
}
