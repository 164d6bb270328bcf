//! Needle-query pairs, depth planning, boundary injection, and the lexical
//! contradiction screen.
//!
//! Needles are injected as standalone user chat turns at item boundaries,
//! never spliced mid-item, with timestamps interpolated between the
//! neighbouring items so the haystack stays chronologically plausible.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{join_entries, Haystack, HaystackEntry, TokenCounter};
use crate::provider::{ChatMessage, ChatProvider, ProviderError};
use crate::text;

#[derive(Debug, Error)]
pub enum NeedleError {
    #[error("a plan needs at least one needle")]
    ZeroNeedles,
    #[error("invalid pair `{id}`: {message}")]
    InvalidPair { id: String, message: String },
    #[error("haystack has zero token length")]
    EmptyHaystack,
    #[error("plan has {depths} depth(s) but the pair has {needles} needle(s)")]
    DepthCountMismatch { depths: usize, needles: usize },
    #[error("malformed pair record at line {line}: {message}")]
    MalformedPair { line: usize, message: String },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    Low,
    Medium,
    High,
}

/// A close-ended evaluation case: statements to hide, the question, and the
/// reference answer the judge compares against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeedleQueryPair {
    pub id: String,
    pub needles: Vec<String>,
    pub query: String,
    pub true_answer: String,
    pub difficulty: Difficulty,
    #[serde(rename = "hop")]
    pub hops: u8,
    #[serde(rename = "type")]
    pub qtype: String,
    #[serde(default)]
    pub breakdown: Vec<String>,
}

impl NeedleQueryPair {
    pub fn validate(&self) -> Result<(), NeedleError> {
        let err = |message: &str| NeedleError::InvalidPair {
            id: self.id.clone(),
            message: message.into(),
        };
        if self.needles.is_empty() {
            return Err(err("no needles"));
        }
        if !(1..=3).contains(&self.hops) {
            return Err(err("hops must be 1, 2, or 3"));
        }
        if self.true_answer.trim().is_empty() {
            return Err(err("true_answer is empty"));
        }
        if self.query.trim().is_empty() {
            return Err(err("query is empty"));
        }
        Ok(())
    }
}

/// Reads a line-delimited pair fixture file.
pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<NeedleQueryPair>, NeedleError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| NeedleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| NeedleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: NeedleQueryPair =
            serde_json::from_str(&line).map_err(|e| NeedleError::MalformedPair {
                line: idx + 1,
                message: e.to_string(),
            })?;
        pair.validate().map_err(|e| NeedleError::MalformedPair {
            line: idx + 1,
            message: e.to_string(),
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn parse_pairs(text: &str) -> Result<Vec<NeedleQueryPair>, NeedleError> {
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: NeedleQueryPair =
            serde_json::from_str(line).map_err(|e| NeedleError::MalformedPair {
                line: idx + 1,
                message: e.to_string(),
            })?;
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Depth used when all needles are combined into one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CombinedDepth {
    #[serde(rename = "0.4")]
    D40,
    #[serde(rename = "0.6")]
    D60,
}

impl CombinedDepth {
    pub fn value(self) -> f64 {
        match self {
            CombinedDepth::D40 => 0.4,
            CombinedDepth::D60 => 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PlacementMode {
    /// Needles spread evenly: depth i/k for the i-th of k needles.
    MultiUniform,
    /// All needles concatenated into one block at 40% or 60%.
    SingleCombined(CombinedDepth),
}

impl PlacementMode {
    pub fn label(&self) -> &'static str {
        match self {
            PlacementMode::MultiUniform => "multi",
            PlacementMode::SingleCombined(CombinedDepth::D40) => "single40",
            PlacementMode::SingleCombined(CombinedDepth::D60) => "single60",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        match label {
            "multi" => Some(PlacementMode::MultiUniform),
            "single40" => Some(PlacementMode::SingleCombined(CombinedDepth::D40)),
            "single60" => Some(PlacementMode::SingleCombined(CombinedDepth::D60)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub mode: PlacementMode,
    pub depths: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl PlacementPlan {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Computes the depth schedule for `needle_count` needles: evenly spaced
/// `i/k` fractions in multi mode, the single chosen depth in combined mode.
pub fn plan_depths(mode: PlacementMode, needle_count: usize) -> Result<PlacementPlan, NeedleError> {
    if needle_count == 0 {
        return Err(NeedleError::ZeroNeedles);
    }
    let depths = match mode {
        PlacementMode::MultiUniform => (0..needle_count)
            .map(|i| i as f64 / needle_count as f64)
            .collect(),
        PlacementMode::SingleCombined(depth) => vec![depth.value()],
    };
    Ok(PlacementPlan {
        mode,
        depths,
        seed: 0,
    })
}

/// Where one needle (or the combined block) ended up.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Injection {
    pub needle_index: usize,
    pub target_depth: f64,
    pub target_token_offset: usize,
    pub chosen_boundary_offset: usize,
    /// Index of the synthetic entry in the final entry list.
    pub inserted_position: usize,
}

/// A haystack with needles inserted at item boundaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectedHaystack {
    pub user_id: String,
    pub entries: Vec<HaystackEntry>,
    pub injections: Vec<Injection>,
    pub rendered_text: String,
    pub token_length: usize,
    pub base_token_length: usize,
}

fn synthetic_timestamp(
    entries: &[HaystackEntry],
    gap: usize,
    slot: usize,
    slots: usize,
) -> DateTime<Utc> {
    let n = entries.len();
    if n == 0 {
        return Utc::now();
    }
    if gap == 0 {
        return entries[0].timestamp - Duration::hours(1);
    }
    if gap >= n {
        return entries[n - 1].timestamp + Duration::hours(1);
    }
    let a = entries[gap - 1].timestamp;
    let b = entries[gap].timestamp;
    let span = b - a;
    a + span * (slot as i32 + 1) / (slots as i32 + 1)
}

fn needle_entry_text(date: DateTime<Utc>, needles: &[&str]) -> String {
    let mut out = format!("[{}] Chat", date.format("%Y-%m-%d"));
    for n in needles {
        out.push('\n');
        out.push_str(&format!("USER: {n}"));
    }
    out
}

/// Inserts the pair's needles into `haystack` per `plan`.
///
/// For each depth `d` the target offset is `round(d * token_length)`; the
/// entry boundary minimizing `|boundary - target|` is chosen, ties going to
/// the smaller boundary. Needle order is preserved; in combined mode all
/// needles form one synthetic chat entry.
pub fn inject(
    haystack: &Haystack,
    pair: &NeedleQueryPair,
    plan: &PlacementPlan,
    counter: &dyn TokenCounter,
) -> Result<InjectedHaystack, NeedleError> {
    if haystack.token_length == 0 {
        return Err(NeedleError::EmptyHaystack);
    }
    pair.validate()?;
    if matches!(plan.mode, PlacementMode::MultiUniform) && plan.depths.len() != pair.needles.len() {
        return Err(NeedleError::DepthCountMismatch {
            depths: plan.depths.len(),
            needles: pair.needles.len(),
        });
    }

    let boundaries = haystack.boundaries();
    let choose_gap = |target: usize| -> usize {
        let mut best = 0usize;
        let mut best_dist = usize::MAX;
        for (gap, b) in boundaries.iter().enumerate() {
            let dist = b.abs_diff(target);
            if dist < best_dist {
                best_dist = dist;
                best = gap;
            }
        }
        best
    };

    // needle groups per chosen gap, in needle order
    struct Planned {
        needle_indices: Vec<usize>,
        depth: f64,
        target: usize,
        boundary: usize,
    }
    let mut per_gap: BTreeMap<usize, Vec<Planned>> = BTreeMap::new();
    match plan.mode {
        PlacementMode::MultiUniform => {
            for (i, depth) in plan.depths.iter().enumerate() {
                let target = (depth * haystack.token_length as f64).round() as usize;
                let gap = choose_gap(target);
                per_gap.entry(gap).or_default().push(Planned {
                    needle_indices: vec![i],
                    depth: *depth,
                    target,
                    boundary: boundaries[gap],
                });
            }
        }
        PlacementMode::SingleCombined(_) => {
            let depth = plan.depths[0];
            let target = (depth * haystack.token_length as f64).round() as usize;
            let gap = choose_gap(target);
            per_gap.entry(gap).or_default().push(Planned {
                needle_indices: (0..pair.needles.len()).collect(),
                depth,
                target,
                boundary: boundaries[gap],
            });
        }
    }

    let mut entries: Vec<HaystackEntry> = Vec::with_capacity(haystack.entries.len() + plan.depths.len());
    let mut injections = Vec::new();
    let mut needle_tokens_total = 0usize;
    for gap in 0..=haystack.entries.len() {
        if let Some(planned) = per_gap.get(&gap) {
            let slots = planned.len();
            for (slot, p) in planned.iter().enumerate() {
                let ts = synthetic_timestamp(&haystack.entries, gap, slot, slots);
                let texts: Vec<&str> = p
                    .needle_indices
                    .iter()
                    .map(|&i| pair.needles[i].as_str())
                    .collect();
                let text = needle_entry_text(ts, &texts);
                let tokens = counter.count(&text);
                needle_tokens_total += tokens;
                let inserted_position = entries.len();
                entries.push(HaystackEntry {
                    item_id: format!("needle-{}-{}", pair.id, p.needle_indices[0]),
                    timestamp: ts,
                    text,
                    tokens,
                });
                for &needle_index in &p.needle_indices {
                    injections.push(Injection {
                        needle_index,
                        target_depth: p.depth,
                        target_token_offset: p.target,
                        chosen_boundary_offset: p.boundary,
                        inserted_position,
                    });
                }
            }
        }
        if gap < haystack.entries.len() {
            entries.push(haystack.entries[gap].clone());
        }
    }

    injections.sort_by_key(|i| (i.chosen_boundary_offset, i.needle_index));
    let rendered_text = join_entries(&entries);
    Ok(InjectedHaystack {
        user_id: haystack.user_id.clone(),
        entries,
        injections,
        rendered_text,
        token_length: haystack.token_length + needle_tokens_total,
        base_token_length: haystack.token_length,
    })
}

/// A haystack item suspected of contradicting a needle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictFlag {
    pub item_position: usize,
    pub needle_index: usize,
    pub reason: String,
}

/// Lexical contradiction rule shared with the memory screen: the two texts
/// share a content word and exactly one side carries a polarity cue.
pub(crate) fn lexical_conflict(a: &str, b: &str) -> Option<String> {
    let words_a = text::content_words(a);
    let words_b = text::content_words(b);
    let shared: Vec<&String> = words_a.iter().filter(|w| words_b.contains(w)).collect();
    if shared.is_empty() {
        return None;
    }
    let cue_a = text::has_polarity_cue(a);
    let cue_b = text::has_polarity_cue(b);
    if cue_a == cue_b {
        return None;
    }
    Some(format!(
        "shared content word \"{}\" with a polarity cue on {} side only",
        shared[0],
        if cue_a { "the item" } else { "the needle" }
    ))
}

/// Flags haystack items that lexically look contradictory to a needle. With
/// a `checker` provider, each lexical flag is confirmed or dismissed by one
/// provider call. The haystack is never mutated.
pub fn screen_conflicts(
    haystack: &Haystack,
    pair: &NeedleQueryPair,
    checker: Option<&dyn ChatProvider>,
) -> Result<Vec<ConflictFlag>, NeedleError> {
    let mut flags = Vec::new();
    for (pos, entry) in haystack.entries.iter().enumerate() {
        for (needle_index, needle) in pair.needles.iter().enumerate() {
            if let Some(reason) = lexical_conflict(&entry.text, needle) {
                let confirmed = match checker {
                    None => true,
                    Some(provider) => {
                        let messages = vec![
                            ChatMessage::system(
                                "You check whether two statements contradict each other.",
                            ),
                            ChatMessage::user(format!(
                                "Statement A: {}\nStatement B: {}\nDo they contradict each other? Answer YES or NO.",
                                entry.text, needle
                            )),
                        ];
                        let result = provider.complete(&messages)?;
                        result.text.trim().to_uppercase().starts_with("YES")
                    }
                };
                if confirmed {
                    flags.push(ConflictFlag {
                        item_position: pos,
                        needle_index,
                        reason,
                    });
                }
            }
        }
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{assemble_haystack, Corpus, RawItem, WhitespacePunctCounter};
    use crate::provider::mock::{MockChatProvider, MockScript};
    use crate::provider::ProviderConfig;
    use chrono::TimeZone;

    fn pair(needles: &[&str]) -> NeedleQueryPair {
        NeedleQueryPair {
            id: "t1".into(),
            needles: needles.iter().map(|s| s.to_string()).collect(),
            query: "q?".into(),
            true_answer: "a".into(),
            difficulty: Difficulty::Low,
            hops: 1,
            qtype: "test".into(),
            breakdown: vec![],
        }
    }

    fn uniform_haystack(items: usize, tokens_each: usize) -> Haystack {
        let make = |i: usize| RawItem::Note {
            id: format!("n{i:03}"),
            user_id: "u".into(),
            created_at: Utc.with_ymd_and_hms(2024, 1, 1 + i as u32, 0, 0, 0).unwrap(),
            title: "t".into(),
            summary: "s".into(),
            content: vec!["w"; tokens_each - 9].join(" "),
        };
        let corpus = Corpus::from_items("u", (0..items).map(make).collect()).unwrap();
        assemble_haystack(&corpus, items * tokens_each, &WhitespacePunctCounter).unwrap()
    }

    #[test]
    fn depth_schedules_match_the_formula() {
        let plan = plan_depths(PlacementMode::MultiUniform, 5).unwrap();
        assert_eq!(plan.depths, vec![0.0, 0.2, 0.4, 0.6, 0.8]);

        let plan = plan_depths(PlacementMode::MultiUniform, 1).unwrap();
        assert_eq!(plan.depths, vec![0.0]);

        let plan = plan_depths(PlacementMode::MultiUniform, 4).unwrap();
        assert_eq!(plan.depths, vec![0.0, 0.25, 0.5, 0.75]);

        let plan = plan_depths(PlacementMode::SingleCombined(CombinedDepth::D60), 7).unwrap();
        assert_eq!(plan.depths, vec![0.6]);

        assert!(matches!(
            plan_depths(PlacementMode::MultiUniform, 0),
            Err(NeedleError::ZeroNeedles)
        ));
    }

    #[test]
    fn boundary_choice_minimizes_distance_with_tie_to_smaller() {
        // 4 items of 250 tokens: boundaries [0, 250, 500, 750, 1000].
        let hs = uniform_haystack(4, 250);
        assert_eq!(hs.boundaries(), vec![0, 250, 500, 750, 1000]);

        let p = pair(&["needle text"]);
        let plan = PlacementPlan {
            mode: PlacementMode::SingleCombined(CombinedDepth::D40),
            depths: vec![0.4],
            seed: 0,
        };
        let injected = inject(&hs, &p, &plan, &WhitespacePunctCounter).unwrap();
        // target 400: |500-400| = 100 beats |250-400| = 150.
        assert_eq!(injected.injections[0].target_token_offset, 400);
        assert_eq!(injected.injections[0].chosen_boundary_offset, 500);

        // Equidistant target 125 -> smaller boundary 0... 125 is also 125 from 250.
        let plan = PlacementPlan {
            mode: PlacementMode::MultiUniform,
            depths: vec![0.125],
            seed: 0,
        };
        let injected = inject(&hs, &p, &plan, &WhitespacePunctCounter).unwrap();
        assert_eq!(injected.injections[0].target_token_offset, 125);
        assert_eq!(injected.injections[0].chosen_boundary_offset, 0);
    }

    #[test]
    fn depth_zero_inserts_before_first_item() {
        let hs = uniform_haystack(3, 100);
        let p = pair(&["first thing"]);
        let plan = plan_depths(PlacementMode::MultiUniform, 1).unwrap();
        let injected = inject(&hs, &p, &plan, &WhitespacePunctCounter).unwrap();
        assert_eq!(injected.injections[0].chosen_boundary_offset, 0);
        assert_eq!(injected.injections[0].inserted_position, 0);
        assert!(injected.rendered_text.starts_with('['));
        assert!(injected.entries[0].item_id.starts_with("needle-"));
    }

    #[test]
    fn multi_mode_preserves_needle_order_and_token_arithmetic() {
        let hs = uniform_haystack(6, 120);
        let p = pair(&["alpha one", "beta two", "gamma three", "delta four", "epsilon five"]);
        let plan = plan_depths(PlacementMode::MultiUniform, 5).unwrap();
        let injected = inject(&hs, &p, &plan, &WhitespacePunctCounter).unwrap();

        let boundaries: Vec<usize> = injected
            .injections
            .iter()
            .map(|i| i.chosen_boundary_offset)
            .collect();
        let mut sorted = boundaries.clone();
        sorted.sort_unstable();
        assert_eq!(boundaries, sorted);

        let needle_tokens: usize = injected
            .entries
            .iter()
            .filter(|e| e.item_id.starts_with("needle-"))
            .map(|e| e.tokens)
            .sum();
        assert_eq!(injected.token_length, injected.base_token_length + needle_tokens);
        assert_eq!(
            WhitespacePunctCounter.count(&injected.rendered_text),
            injected.token_length
        );

        // Determinism: byte-identical on repeat.
        let again = inject(&hs, &p, &plan, &WhitespacePunctCounter).unwrap();
        assert_eq!(injected.rendered_text, again.rendered_text);
    }

    #[test]
    fn combined_mode_is_one_block_in_listed_order() {
        let hs = uniform_haystack(5, 100);
        let p = pair(&["first statement", "second statement", "third statement"]);
        let plan = plan_depths(PlacementMode::SingleCombined(CombinedDepth::D40), 3).unwrap();
        let injected = inject(&hs, &p, &plan, &WhitespacePunctCounter).unwrap();

        let synthetic: Vec<&HaystackEntry> = injected
            .entries
            .iter()
            .filter(|e| e.item_id.starts_with("needle-"))
            .collect();
        assert_eq!(synthetic.len(), 1);
        let text = &synthetic[0].text;
        let p1 = text.find("first statement").unwrap();
        let p2 = text.find("second statement").unwrap();
        let p3 = text.find("third statement").unwrap();
        assert!(p1 < p2 && p2 < p3);
        assert_eq!(injected.injections.len(), 3);
        assert!(injected
            .injections
            .iter()
            .all(|i| i.inserted_position == injected.injections[0].inserted_position));
    }

    #[test]
    fn injection_offset_error_is_bounded_by_max_item() {
        for items in [3usize, 5, 9] {
            let hs = uniform_haystack(items, 80);
            let p = pair(&["one", "two", "three"]);
            let plan = plan_depths(PlacementMode::MultiUniform, 3).unwrap();
            let injected = inject(&hs, &p, &plan, &WhitespacePunctCounter).unwrap();
            for inj in &injected.injections {
                assert!(
                    inj.chosen_boundary_offset.abs_diff(inj.target_token_offset)
                        <= hs.max_entry_tokens()
                );
            }
        }
    }

    #[test]
    fn screen_flags_polarity_mismatch_on_shared_word() {
        let hs = {
            let mut hs = uniform_haystack(1, 50);
            hs.entries[0].text = "I love butter on toast".into();
            hs
        };
        let p = pair(&["I don't particularly enjoy butter, skip it."]);
        let flags = screen_conflicts(&hs, &p, None).unwrap();
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].item_position, 0);
        assert!(flags[0].reason.contains("butter"));
    }

    #[test]
    fn screen_is_quiet_on_disjoint_or_empty() {
        let hs = uniform_haystack(2, 60);
        let p = pair(&["I don't enjoy quasar maintenance"]);
        assert!(screen_conflicts(&hs, &p, None).unwrap().is_empty());
    }

    #[test]
    fn checker_can_dismiss_lexical_flags() {
        let mut hs = uniform_haystack(2, 60);
        hs.entries[0].text = "I love butter on toast".into();
        let p = pair(&["I don't particularly enjoy butter, skip it."]);

        let yes = MockChatProvider::new(ProviderConfig::mock("yes", 10_000), MockScript::new("YES"));
        assert_eq!(screen_conflicts(&hs, &p, Some(&yes)).unwrap().len(), 1);

        let no = MockChatProvider::new(ProviderConfig::mock("no", 10_000), MockScript::new("NO"));
        assert!(screen_conflicts(&hs, &p, Some(&no)).unwrap().is_empty());
    }
}
