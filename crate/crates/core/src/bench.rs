//! Pilot benchmark runner: four reasoning categories judged on a 1..=5
//! scale, truncation bookkeeping for window-limited baselines with the
//! exclusion-corrected mean, and judge-vs-human correlation support.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{assemble_haystack, Corpus, CorpusError, TokenCounter};
use crate::niah::{judge_with_range, NiahError};
use crate::provider::ChatProvider;
use crate::ragpp::MethodAdapter;
use crate::util::{csv_field, par_map_bounded};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid question `{id}`: {message}")]
    InvalidQuestion { id: String, message: String },
    #[error("malformed question record at line {line}: {message}")]
    MalformedQuestion { line: usize, message: String },
    #[error("corrected mean needs 0 < answered <= total, got {answered}/{total}")]
    InvalidCounts { answered: usize, total: usize },
    #[error("no category means supplied")]
    EmptyMeans,
    #[error("category {0} has no rated questions")]
    AllExcluded(String),
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least 2 paired samples")]
    TooShort,
    #[error("one of the vectors has zero variance")]
    DegenerateVariance,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BenchCategory {
    Memory,
    Understand,
    Predict,
    Recommend,
}

impl BenchCategory {
    pub const ALL: [BenchCategory; 4] = [
        BenchCategory::Memory,
        BenchCategory::Understand,
        BenchCategory::Predict,
        BenchCategory::Recommend,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            BenchCategory::Memory => "Memory",
            BenchCategory::Understand => "Understand",
            BenchCategory::Predict => "Predict",
            BenchCategory::Recommend => "Recommend",
        }
    }
}

/// One benchmark question with its reference answer and judging criteria.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchQuestion {
    pub id: String,
    pub category: BenchCategory,
    pub question: String,
    pub reference_answer: String,
    pub criteria: String,
    /// Dates whose notes the answer depends on; drives the truncation
    /// exclusion mechanically.
    #[serde(default)]
    pub required_source_dates: Vec<NaiveDate>,
}

impl BenchQuestion {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.reference_answer.trim().is_empty() {
            return Err(BenchError::InvalidQuestion {
                id: self.id.clone(),
                message: "reference answer is empty".into(),
            });
        }
        if self.criteria.trim().is_empty() {
            return Err(BenchError::InvalidQuestion {
                id: self.id.clone(),
                message: "criteria is empty".into(),
            });
        }
        Ok(())
    }
}

/// Reads a line-delimited question file.
pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<BenchQuestion>, BenchError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let q: BenchQuestion =
            serde_json::from_str(&line).map_err(|e| BenchError::MalformedQuestion {
                line: idx + 1,
                message: e.to_string(),
            })?;
        q.validate().map_err(|e| BenchError::MalformedQuestion {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

/// One judged answer. `rating` is present exactly when the question was not
/// excluded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchScore {
    pub question_id: String,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_judge: Option<String>,
    pub excluded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Runs the adapter over every question and judges each answer on the
/// 1..=5 scale against the reference answer under the question's
/// category criteria. Failures (adapter or judge) exclude the question with
/// a recorded reason; they never abort the run. Questions in
/// `pre_excluded` are excluded up front with zero provider calls.
pub fn run_bench(
    adapter: &dyn MethodAdapter,
    questions: &[BenchQuestion],
    judge_provider: &dyn ChatProvider,
    pre_excluded: &BTreeSet<String>,
    max_parallel: usize,
) -> Vec<BenchScore> {
    let method = adapter.name().to_string();
    let work: Vec<&BenchQuestion> = questions.iter().collect();
    par_map_bounded(work, max_parallel, |q| {
        if pre_excluded.contains(&q.id) {
            return BenchScore {
                question_id: q.id.clone(),
                method: method.clone(),
                rating: None,
                raw_judge: None,
                excluded: true,
                reason: Some("required dates outside the truncated window".into()),
            };
        }
        let answer = match adapter.answer(&q.question) {
            Ok(a) => a,
            Err(e) => {
                return BenchScore {
                    question_id: q.id.clone(),
                    method: method.clone(),
                    rating: None,
                    raw_judge: None,
                    excluded: true,
                    reason: Some(format!("adapter failed: {e}")),
                }
            }
        };
        match judge_with_range(&q.question, &q.reference_answer, &answer, &q.criteria, 1..=5, judge_provider)
        {
            Ok((raw, value)) => BenchScore {
                question_id: q.id.clone(),
                method: method.clone(),
                rating: Some(value as u8),
                raw_judge: Some(raw),
                excluded: false,
                reason: None,
            },
            Err(e @ NiahError::UnparsableJudgeOutput { .. }) | Err(e @ NiahError::Provider(_)) => {
                BenchScore {
                    question_id: q.id.clone(),
                    method: method.clone(),
                    rating: None,
                    raw_judge: None,
                    excluded: true,
                    reason: Some(format!("judge failed: {e}")),
                }
            }
            Err(e) => BenchScore {
                question_id: q.id.clone(),
                method: method.clone(),
                rating: None,
                raw_judge: None,
                excluded: true,
                reason: Some(format!("judge failed: {e}")),
            },
        }
    })
}

/// Result of truncating a corpus to a context window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncationReport {
    pub kept_item_ids: Vec<String>,
    pub dropped_item_ids: Vec<String>,
    pub unanswerable_question_ids: Vec<String>,
}

/// Keeps the newest suffix of `corpus` within `max_tokens` (same rule as
/// haystack assembly) and marks questions whose required dates all fall
/// outside the kept window. When nothing is dropped, nothing becomes
/// unanswerable.
pub fn truncate_for_context(
    corpus: &Corpus,
    max_tokens: usize,
    questions: &[BenchQuestion],
    counter: &dyn TokenCounter,
) -> Result<TruncationReport, BenchError> {
    let haystack = assemble_haystack(corpus, max_tokens, counter)?;
    let kept: BTreeSet<&str> = haystack.entries.iter().map(|e| e.item_id.as_str()).collect();
    let kept_item_ids: Vec<String> = haystack.entries.iter().map(|e| e.item_id.clone()).collect();
    let dropped_item_ids: Vec<String> = corpus
        .items()
        .iter()
        .map(|i| i.id().to_string())
        .filter(|id| !kept.contains(id.as_str()))
        .collect();

    let mut unanswerable = Vec::new();
    if !dropped_item_ids.is_empty() {
        let window_start = haystack
            .entries
            .first()
            .map(|e| e.timestamp.date_naive())
            .expect("haystack non-empty");
        let window_end = haystack
            .entries
            .last()
            .map(|e| e.timestamp.date_naive())
            .expect("haystack non-empty");
        for q in questions {
            if q.required_source_dates.is_empty() {
                continue;
            }
            let all_outside = q
                .required_source_dates
                .iter()
                .all(|d| *d < window_start || *d > window_end);
            if all_outside {
                unanswerable.push(q.id.clone());
            }
        }
    }
    Ok(TruncationReport {
        kept_item_ids,
        dropped_item_ids,
        unanswerable_question_ids: unanswerable,
    })
}

/// Rescales a mean computed over the answered subset back to the full
/// question set: `reported * answered / total`.
pub fn corrected_mean(reported_mean: f64, answered: usize, total: usize) -> Result<f64, BenchError> {
    if answered == 0 || answered > total {
        return Err(BenchError::InvalidCounts { answered, total });
    }
    Ok(reported_mean * answered as f64 / total as f64)
}

/// Arithmetic mean of category means.
pub fn overall_mean(category_means: &[f64]) -> Result<f64, BenchError> {
    if category_means.is_empty() {
        return Err(BenchError::EmptyMeans);
    }
    Ok(category_means.iter().sum::<f64>() / category_means.len() as f64)
}

/// Product-moment correlation via single-pass co-moment accumulation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, BenchError> {
    if a.len() != b.len() {
        return Err(BenchError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(BenchError::TooShort);
    }
    let mut mean_a = 0.0f64;
    let mut mean_b = 0.0f64;
    let mut m2_a = 0.0f64;
    let mut m2_b = 0.0f64;
    let mut co = 0.0f64;
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mean_a;
        mean_a += dx / n;
        m2_a += dx * (x - mean_a);
        let dy = y - mean_b;
        mean_b += dy / n;
        m2_b += dy * (y - mean_b);
        co += dx * (y - mean_b);
    }
    if m2_a == 0.0 || m2_b == 0.0 {
        return Err(BenchError::DegenerateVariance);
    }
    Ok(co / (m2_a.sqrt() * m2_b.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryMean {
    /// Mean over the rated (non-excluded) questions of the category.
    pub reported: f64,
    pub answered: usize,
    pub total: usize,
    /// Exclusion-corrected value, present when any question was excluded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected: Option<f64>,
}

/// Per-method summary. `overall` is the mean of the four reported category
/// means (the corrected values ride alongside).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub categories: Vec<(BenchCategory, CategoryMean)>,
    pub overall: f64,
    pub excluded_question_ids: Vec<String>,
    pub corrected: bool,
}

/// Folds raw scores into per-category means with exclusion corrections.
pub fn method_result(
    method: &str,
    scores: &[BenchScore],
    questions: &[BenchQuestion],
) -> Result<MethodResult, BenchError> {
    let mut categories = Vec::new();
    let mut excluded_ids = Vec::new();
    for category in BenchCategory::ALL {
        let ids: BTreeSet<&str> = questions
            .iter()
            .filter(|q| q.category == category)
            .map(|q| q.id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        let total = ids.len();
        let mut sum = 0u64;
        let mut answered = 0usize;
        for score in scores.iter().filter(|s| ids.contains(s.question_id.as_str())) {
            match score.rating {
                Some(r) => {
                    sum += r as u64;
                    answered += 1;
                }
                None => excluded_ids.push(score.question_id.clone()),
            }
        }
        if answered == 0 {
            return Err(BenchError::AllExcluded(category.label().to_string()));
        }
        let reported = sum as f64 / answered as f64;
        let corrected = if answered < total {
            Some(corrected_mean(reported, answered, total)?)
        } else {
            None
        };
        categories.push((
            category,
            CategoryMean {
                reported,
                answered,
                total,
                corrected,
            },
        ));
    }
    let reported_means: Vec<f64> = categories.iter().map(|(_, m)| m.reported).collect();
    let overall = overall_mean(&reported_means)?;
    let corrected = categories.iter().any(|(_, m)| m.corrected.is_some());
    Ok(MethodResult {
        method: method.to_string(),
        categories,
        overall,
        excluded_question_ids: excluded_ids,
        corrected,
    })
}

/// Comparison table across methods, one row per method, categories as
/// columns plus the average; exclusion-corrected cells carry an asterisk.
pub fn comparison_csv(results: &[MethodResult]) -> String {
    let mut out = String::from("method,Memory,Understand,Predict,Recommend,Average\n");
    for r in results {
        let mut cells = Vec::new();
        for category in BenchCategory::ALL {
            let cell = r
                .categories
                .iter()
                .find(|(c, _)| *c == category)
                .map(|(_, m)| {
                    if m.corrected.is_some() {
                        format!("{:.2}*", m.reported)
                    } else {
                        format!("{:.2}", m.reported)
                    }
                })
                .unwrap_or_else(|| "n/a".to_string());
            cells.push(cell);
        }
        out.push_str(&format!(
            "{},{},{}\n",
            csv_field(&r.method),
            cells.join(","),
            format_args!("{:.3}", r.overall)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RawItem;
    use crate::provider::mock::{MockChatProvider, MockScript, SequenceChatProvider};
    use crate::provider::ProviderConfig;
    use crate::ragpp::RagError;
    use chrono::{TimeZone, Utc};

    struct CannedAdapter;

    impl MethodAdapter for CannedAdapter {
        fn name(&self) -> &str {
            "canned"
        }
        fn context_budget(&self) -> usize {
            100_000
        }
        fn answer(&self, _question: &str) -> Result<String, RagError> {
            Ok("a canned answer".into())
        }
    }

    fn q(id: &str, category: BenchCategory) -> BenchQuestion {
        BenchQuestion {
            id: id.into(),
            category,
            question: format!("question {id}"),
            reference_answer: "reference".into(),
            criteria: "Rate fidelity to the reference from 1 to 5.".into(),
            required_source_dates: vec![],
        }
    }

    fn sixty_questions() -> Vec<BenchQuestion> {
        let mut out = Vec::new();
        for category in BenchCategory::ALL {
            for i in 0..15 {
                out.push(q(&format!("{}-{i}", category.label()), category));
            }
        }
        out
    }

    #[test]
    fn full_run_produces_sixty_scores() {
        let judge = MockChatProvider::new(ProviderConfig::mock("judge", 100_000), MockScript::new("5"));
        let scores = run_bench(&CannedAdapter, &sixty_questions(), &judge, &BTreeSet::new(), 4);
        assert_eq!(scores.len(), 60);
        assert!(scores.iter().all(|s| s.rating == Some(5) && !s.excluded));
    }

    #[test]
    fn out_of_range_judge_rating_errors_after_retries() {
        let judge = SequenceChatProvider::new(ProviderConfig::mock("judge", 100_000), ["0", "0", "0"]);
        let scores = run_bench(&CannedAdapter, &[q("q1", BenchCategory::Memory)], &judge, &BTreeSet::new(), 1);
        assert_eq!(scores.len(), 1);
        assert!(scores[0].excluded);
        assert_eq!(judge.call_count(), 3);
        assert!(scores[0].reason.as_deref().unwrap().contains("judge failed"));
    }

    fn dated_note(id: &str, day: u32, tokens: usize) -> RawItem {
        RawItem::Note {
            id: id.into(),
            user_id: "u1".into(),
            created_at: Utc.with_ymd_and_hms(2024, 6, day, 12, 0, 0).unwrap(),
            title: "t".into(),
            summary: "s".into(),
            content: vec!["w"; tokens - 9].join(" "),
        }
    }

    #[test]
    fn truncation_marks_old_dates_unanswerable() {
        let corpus = Corpus::from_items(
            "u1",
            vec![
                dated_note("old", 1, 100),
                dated_note("mid", 10, 100),
                dated_note("new", 20, 100),
            ],
        )
        .unwrap();
        let counter = crate::corpus::WhitespacePunctCounter;
        let d = |day| NaiveDate::from_ymd_opt(2024, 6, day).unwrap();
        let questions = vec![
            BenchQuestion {
                required_source_dates: vec![d(1)],
                ..q("needs-old", BenchCategory::Memory)
            },
            BenchQuestion {
                required_source_dates: vec![d(1), d(20)],
                ..q("needs-any", BenchCategory::Memory)
            },
            q("dateless", BenchCategory::Predict),
        ];
        // Budget for two items: drops "old".
        let report = truncate_for_context(&corpus, 200, &questions, &counter).unwrap();
        assert_eq!(report.dropped_item_ids, vec!["old".to_string()]);
        assert_eq!(report.unanswerable_question_ids, vec!["needs-old".to_string()]);

        // Budget for everything: nothing unanswerable.
        let report = truncate_for_context(&corpus, 10_000, &questions, &counter).unwrap();
        assert!(report.dropped_item_ids.is_empty());
        assert!(report.unanswerable_question_ids.is_empty());
    }

    #[test]
    fn truncation_exclusion_is_monotone_in_budget() {
        let corpus = Corpus::from_items(
            "u1",
            (1..=8).map(|i| dated_note(&format!("n{i}"), i as u32, 60)).collect(),
        )
        .unwrap();
        let counter = crate::corpus::WhitespacePunctCounter;
        let questions: Vec<BenchQuestion> = (1..=8)
            .map(|i| BenchQuestion {
                required_source_dates: vec![NaiveDate::from_ymd_opt(2024, 6, i as u32).unwrap()],
                ..q(&format!("q{i}"), BenchCategory::Memory)
            })
            .collect();
        let mut previous: BTreeSet<String> = BTreeSet::new();
        for budget in [480usize, 360, 240, 120, 60] {
            let report = truncate_for_context(&corpus, budget, &questions, &counter).unwrap();
            let current: BTreeSet<String> =
                report.unanswerable_question_ids.iter().cloned().collect();
            assert!(current.is_superset(&previous), "budget {budget} shrank the set");
            previous = current;
        }
    }

    #[test]
    fn corrected_mean_matches_the_caption_arithmetic() {
        let v = corrected_mean(3.1, 10, 15).unwrap();
        assert!((v - 2.0667).abs() < 0.005);
        assert_eq!(corrected_mean(4.0, 7, 7).unwrap(), 4.0);
        let gemini = corrected_mean(2.2, 10, 15).unwrap();
        assert!((gemini - 1.4667).abs() < 0.005);
        assert!(matches!(
            corrected_mean(3.0, 0, 15),
            Err(BenchError::InvalidCounts { .. })
        ));
        // Homogeneity: corrected(c*m) = c*corrected(m).
        let m = corrected_mean(3.0, 9, 15).unwrap();
        let cm = corrected_mean(2.0 * 3.0, 9, 15).unwrap();
        assert!((cm - 2.0 * m).abs() < 1e-12);
    }

    #[test]
    fn overall_mean_matches_reported_row() {
        let v = overall_mean(&[3.13, 3.8, 4.2, 4.6]).unwrap();
        assert!((v - 3.9325).abs() < 0.0005);
        assert_eq!(overall_mean(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 1.0);
        let mut permuted = [4.6, 3.13, 4.2, 3.8];
        permuted.reverse();
        assert!((overall_mean(&permuted).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn pearson_identities() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let r = pearson(&a, &a).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let b = vec![2.0, 4.0, 5.0, 9.0];
        // Independent definitional route.
        let brute = {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let da: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>().sqrt();
            let db: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>().sqrt();
            num / (da / 1.0 * db)
        };
        assert!((pearson(&a, &b).unwrap() - brute).abs() < 1e-12);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[2.0, 3.0]),
            Err(BenchError::DegenerateVariance)
        ));
        assert!(matches!(pearson(&[1.0], &[2.0]), Err(BenchError::TooShort)));
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(BenchError::LengthMismatch(2, 3))
        ));
    }

    #[test]
    fn method_result_corrects_and_marks() {
        let questions = sixty_questions();
        let mut scores: Vec<BenchScore> = questions
            .iter()
            .map(|q| BenchScore {
                question_id: q.id.clone(),
                method: "m".into(),
                rating: Some(4),
                raw_judge: Some("4".into()),
                excluded: false,
                reason: None,
            })
            .collect();
        // Exclude 5 Memory questions: reported mean stays 4, corrected 4*10/15.
        for s in scores.iter_mut().filter(|s| s.question_id.starts_with("Memory")).take(5) {
            s.rating = None;
            s.excluded = true;
            s.reason = Some("outside window".into());
        }
        let result = method_result("m", &scores, &questions).unwrap();
        assert!(result.corrected);
        let memory = &result.categories[0].1;
        assert_eq!(memory.answered, 10);
        assert_eq!(memory.total, 15);
        assert!((memory.corrected.unwrap() - 4.0 * 10.0 / 15.0).abs() < 1e-12);
        assert!((result.overall - 4.0).abs() < 1e-12);

        let csv = comparison_csv(&[result]);
        assert!(csv.contains("4.00*"));
        assert!(csv.contains("4.000"));
    }
}
