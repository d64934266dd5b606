//! Tokenization, sentence segmentation and stopwords shared by every stage.

pub const SUBJECT_SLOT: &str = "[X]";
pub const OBJECT_SLOT: &str = "[Y]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any",
    "are", "as", "at", "be", "because", "been", "before", "being", "below", "between", "both",
    "but", "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few",
    "for", "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers",
    "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of",
    "off", "on", "once", "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own",
    "same", "she", "should", "so", "some", "such", "than", "that", "the", "their", "theirs",
    "them", "themselves", "then", "there", "these", "they", "this", "those", "through", "to",
    "too", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "whose", "why", "will", "with", "would", "you", "your", "yours",
    "yourself", "yourselves",
];

/// Words that leave a template dangling when they sit at its edge.
const EDGE_FUNCTION_WORDS: &[&str] = &[
    "and", "or", "but", "nor", "of", "in", "on", "at", "to", "for", "from", "by", "with", "into",
    "onto", "over", "under", "near", "about", "as", "than", "the", "a", "an",
];

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "vs", "etc", "inc", "ltd",
    "co", "corp", "dept", "univ", "gen", "gov", "sen", "rep", "no", "fig", "approx", "e.g", "i.e",
    "u.s", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

pub fn is_edge_function_word(token: &str) -> bool {
    EDGE_FUNCTION_WORDS.contains(&token)
}

pub fn is_placeholder(token: &str) -> bool {
    token == SUBJECT_SLOT || token == OBJECT_SLOT
}

/// Lowercased word tokens. Punctuation separates tokens, except a hyphen
/// joining two alphanumeric characters. Underscores separate words, so an
/// entity code like `east_new_york` tokenizes like its surface form.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if c == '-'
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            current.push('-');
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Tokens with stopwords removed.
pub fn content_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|t| !is_stopword(t)).collect()
}

/// A sentence as a byte range of its document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
}

/// Split on `.`, `!` or `?` when followed by whitespace and then an uppercase
/// letter or a digit, unless the period closes a known abbreviation.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    let indexed: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < indexed.len() {
        let (pos, c) = indexed[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < indexed.len() && indexed[j].1.is_whitespace() {
                j += 1;
            }
            let boundary = j > i + 1
                && j < indexed.len()
                && (indexed[j].1.is_uppercase() || indexed[j].1.is_ascii_digit())
                && !(c == '.' && ends_with_abbreviation(&text[start..pos]));
            if boundary {
                push_span(text, start, pos + c.len_utf8(), &mut spans);
                start = indexed[j].0;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    push_span(text, start, text.len(), &mut spans);
    spans
}

fn push_span(text: &str, start: usize, end: usize, spans: &mut Vec<SentenceSpan>) {
    let slice = &text[start..end];
    let trimmed_start = start + (slice.len() - slice.trim_start().len());
    let trimmed_end = start + slice.trim_end().len();
    if trimmed_end > trimmed_start {
        spans.push(SentenceSpan {
            start: trimmed_start,
            end: trimmed_end,
        });
    }
}

fn ends_with_abbreviation(before: &str) -> bool {
    let word = before
        .rsplit(|c: char| c.is_whitespace())
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Positions where `needle` occurs as a contiguous token run in `haystack`.
pub fn find_token_runs(haystack: &[String], needle: &[String]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    (0..=haystack.len() - needle.len())
        .filter(|&i| haystack[i..i + needle.len()] == *needle)
        .collect()
}

/// Locate non-overlapping runs for two labels, earliest head first.
pub fn find_pair(tokens: &[String], head: &[String], tail: &[String]) -> Option<(usize, usize)> {
    let heads = find_token_runs(tokens, head);
    if heads.is_empty() {
        return None;
    }
    let tails = find_token_runs(tokens, tail);
    for &h in &heads {
        for &t in &tails {
            let disjoint = h + head.len() <= t || t + tail.len() <= h;
            if disjoint {
                return Some((h, t));
            }
        }
    }
    None
}

/// Replace the head and tail runs with `[X]` and `[Y]`.
pub fn rewrite_with_slots(
    tokens: &[String],
    (head_at, head_len): (usize, usize),
    (tail_at, tail_len): (usize, usize),
) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if i == head_at {
            out.push(SUBJECT_SLOT.to_string());
            i += head_len;
        } else if i == tail_at {
            out.push(OBJECT_SLOT.to_string());
            i += tail_len;
        } else {
            out.push(tokens[i].clone());
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn stopword_table_is_sorted() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort();
        assert_eq!(sorted, STOPWORDS);
    }

    #[test]
    fn tokenizes_lowercase_and_keeps_inner_hyphens() {
        assert_eq!(
            tokenize("The well-known Café, in São-Paulo -- really!"),
            vec!["the", "well-known", "café", "in", "são-paulo", "really"]
        );
        assert_eq!(tokenize("east_new_york"), vec!["east", "new", "york"]);
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn two_short_sentences() {
        let text = "A. B.";
        let spans = split_sentences(text);
        assert_eq!(spans.len(), 2);
        assert_eq!(&text[spans[0].start..spans[0].end], "A.");
        assert_eq!(&text[spans[1].start..spans[1].end], "B.");
    }

    #[test]
    fn abbreviations_and_lowercase_continuations_do_not_split() {
        let text = "Dr. Smith met Mr. Jones in St. Louis. they left. Then 3 more came!";
        let parts: Vec<&str> = split_sentences(text)
            .iter()
            .map(|s| &text[s.start..s.end])
            .collect();
        assert_eq!(
            parts,
            vec!["Dr. Smith met Mr. Jones in St. Louis. they left.", "Then 3 more came!"]
        );
    }

    #[test]
    fn token_run_matching_is_not_substring_matching() {
        let sent = toks("albany is far from alba");
        assert_eq!(find_token_runs(&sent, &toks("alba")), vec![4]);
        assert_eq!(find_pair(&sent, &toks("alba"), &toks("albany")), Some((4, 0)));
        assert_eq!(find_pair(&toks("new york city"), &toks("new york"), &toks("york")), None);
    }

    #[test]
    fn rewrite_multiword_labels() {
        let sent = toks("east new york is a neighborhood of brooklyn");
        let (h, t) = find_pair(&sent, &toks("east new york"), &toks("brooklyn")).unwrap();
        assert_eq!(
            rewrite_with_slots(&sent, (h, 3), (t, 1)),
            toks("[X] is a neighborhood of [Y]")
        );
    }
}
