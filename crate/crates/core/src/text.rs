//! Shared text primitives: the default token rule, word extraction, and the
//! stopword / polarity-cue lists used by the conflict screen.

/// Byte span of a single token under the default token rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

/// Splits `text` into token byte spans under the default rule:
///
/// - Unicode whitespace (`char::is_whitespace`) separates tokens and never
///   belongs to one.
/// - Every ASCII punctuation character (`char::is_ascii_punctuation`) is a
///   token of its own, wherever it occurs.
/// - Maximal runs of the remaining characters form one token each.
///
/// The rule guarantees `count(a ++ b) >= max(count(a), count(b))`: gluing two
/// texts together can merge at most the word pair that meets at the seam.
pub fn token_spans(text: &str) -> Vec<TokenSpan> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (idx, ch) in text.char_indices() {
        if ch.is_whitespace() || ch.is_ascii_punctuation() {
            if let Some(start) = word_start.take() {
                spans.push(TokenSpan { start, end: idx });
            }
            if ch.is_ascii_punctuation() {
                spans.push(TokenSpan {
                    start: idx,
                    end: idx + ch.len_utf8(),
                });
            }
        } else if word_start.is_none() {
            word_start = Some(idx);
        }
    }
    if let Some(start) = word_start {
        spans.push(TokenSpan {
            start,
            end: text.len(),
        });
    }
    spans
}

/// Token count under the default rule. See [`token_spans`].
pub fn count_tokens(text: &str) -> usize {
    let mut count = 0usize;
    let mut in_word = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            in_word = false;
        } else if ch.is_ascii_punctuation() {
            count += 1;
            in_word = false;
        } else if !in_word {
            count += 1;
            in_word = true;
        }
    }
    count
}

/// Lowercased words of a text: whitespace-split, leading/trailing
/// non-alphanumeric characters trimmed. Apostrophes and hyphens inside a word
/// survive ("don't" stays one word), which is what the cue lists expect.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Small English stopword list used when deciding whether two statements
/// share a content word.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "if", "then", "else", "for", "nor", "so", "yet", "of",
    "on", "in", "at", "to", "from", "by", "with", "about", "as", "into", "onto", "over", "under",
    "is", "am", "are", "was", "were", "be", "been", "being", "do", "does", "did", "have", "has",
    "had", "will", "would", "shall", "should", "can", "could", "may", "might", "must", "i", "me",
    "my", "mine", "you", "your", "yours", "he", "him", "his", "she", "her", "hers", "it", "its",
    "we", "us", "our", "ours", "they", "them", "their", "theirs", "this", "that", "these",
    "those", "there", "here", "what", "which", "who", "whom", "how", "when", "where", "why",
    "please", "just", "very", "really", "some", "any", "each", "every", "also", "too", "s", "t",
];

/// Polarity cues: words signalling negation or avoidance. A lexical conflict
/// flag requires one side to carry a cue while the other does not.
pub const POLARITY_CUES: &[&str] = &[
    "not", "no", "never", "none", "don't", "dont", "doesn't", "doesnt", "didn't", "didnt",
    "won't", "wont", "wouldn't", "wouldnt", "can't", "cant", "cannot", "couldn't", "couldnt",
    "isn't", "isnt", "aren't", "arent", "wasn't", "wasnt", "shouldn't", "shouldnt", "avoid",
    "skip", "without", "dislike", "dislikes", "hate", "hates", "stop",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.contains(&word)
}

pub fn is_polarity_cue(word: &str) -> bool {
    POLARITY_CUES.contains(&word)
}

/// Content words: lowercased words minus stopwords and polarity cues.
pub fn content_words(text: &str) -> Vec<String> {
    words(text)
        .into_iter()
        .filter(|w| !is_stopword(w) && !is_polarity_cue(w))
        .collect()
}

pub fn has_polarity_cue(text: &str) -> bool {
    words(text).iter().any(|w| is_polarity_cue(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_counts_zero() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("   \n\t "), 0);
    }

    #[test]
    fn punctuation_is_its_own_token() {
        assert_eq!(count_tokens("hello"), 1);
        assert_eq!(count_tokens("(hello),"), 4);
        assert_eq!(count_tokens("don't"), 3); // don / ' / t
        assert_eq!(count_tokens("2024-05-01"), 5);
    }

    #[test]
    fn spans_cover_tokens_in_order() {
        let text = "a (b) c";
        let spans = token_spans(text);
        let toks: Vec<&str> = spans.iter().map(|s| &text[s.start..s.end]).collect();
        assert_eq!(toks, vec!["a", "(", "b", ")", "c"]);
        assert_eq!(count_tokens(text), spans.len());
    }

    #[test]
    fn words_trim_edges_keep_interior() {
        assert_eq!(words("I don't, like (butter)."), vec!["i", "don't", "like", "butter"]);
    }

    proptest! {
        // counter(a ++ b) >= max(counter(a), counter(b)) for arbitrary texts.
        #[test]
        fn concat_never_shrinks_below_either_side(a in ".{0,40}", b in ".{0,40}") {
            let joined = format!("{a}{b}");
            let ca = count_tokens(&a);
            let cb = count_tokens(&b);
            prop_assert!(count_tokens(&joined) >= ca.max(cb));
        }

        #[test]
        fn count_matches_span_count(a in ".{0,80}") {
            prop_assert_eq!(count_tokens(&a), token_spans(&a).len());
        }
    }
}
