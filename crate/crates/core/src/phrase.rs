//! Placeholder rewriting and statistical phrase fusion over a sub-corpus.
//!
//! Frequent contiguous n-grams (2 ≤ n ≤ 5) whose pointwise mutual information
//! clears a floor become single tokens joined by `_`. Fusion is greedy,
//! left to right, longest match first, and never crosses a placeholder.

use std::collections::{BTreeSet, HashMap};

use crate::corpus::SubCorpus;
use crate::text::{self, is_placeholder};

pub const MAX_PHRASE_LEN: usize = 5;
pub const PHRASE_JOINER: char = '_';

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSentence {
    pub head: String,
    pub tail: String,
    /// Rewritten tokens: head run → `[X]`, tail run → `[Y]`, phrases fused.
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSubCorpus {
    pub relation: String,
    pub sentences: Vec<AnnotatedSentence>,
    pub phrases: BTreeSet<String>,
    /// Number of KG tuples the sub-corpus was mined for.
    pub num_tuples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhraseConfig {
    pub min_count: usize,
    pub pmi_floor: f64,
}

impl Default for PhraseConfig {
    fn default() -> Self {
        Self {
            min_count: 5,
            pmi_floor: 3.0,
        }
    }
}

/// Rewrite every sub-corpus sentence with slots, without phrase fusion.
pub fn rewrite(sub: &SubCorpus) -> AnnotatedSubCorpus {
    let sentences = sub
        .entries
        .iter()
        .flat_map(|e| {
            e.sentences.iter().map(move |s| AnnotatedSentence {
                head: e.head.clone(),
                tail: e.tail.clone(),
                tokens: text::rewrite_with_slots(&s.tokens, s.head_span, s.tail_span),
            })
        })
        .collect();
    AnnotatedSubCorpus {
        relation: sub.relation.clone(),
        sentences,
        phrases: BTreeSet::new(),
        num_tuples: sub.tuples_searched,
    }
}

/// n-gram and unigram counts over placeholder-free runs.
pub struct NgramCounts {
    pub unigrams: HashMap<String, usize>,
    pub ngrams: HashMap<Vec<String>, usize>,
    pub total_tokens: usize,
}

pub fn count_ngrams<'a>(sentences: impl IntoIterator<Item = &'a [String]>) -> NgramCounts {
    let mut counts = NgramCounts {
        unigrams: HashMap::new(),
        ngrams: HashMap::new(),
        total_tokens: 0,
    };
    for tokens in sentences {
        for (i, tok) in tokens.iter().enumerate() {
            if is_placeholder(tok) {
                continue;
            }
            counts.total_tokens += 1;
            *counts.unigrams.entry(tok.clone()).or_default() += 1;
            for n in 2..=MAX_PHRASE_LEN {
                let Some(gram) = tokens.get(i..i + n) else { break };
                if gram.iter().any(|t| is_placeholder(t)) {
                    break;
                }
                *counts.ngrams.entry(gram.to_vec()).or_default() += 1;
            }
        }
    }
    counts
}

/// `ln P(g) - Σ ln P(w)` with probabilities estimated over all tokens.
pub fn ngram_pmi(counts: &NgramCounts, gram: &[String]) -> f64 {
    let n = counts.total_tokens as f64;
    let joint = counts.ngrams.get(gram).copied().unwrap_or(0) as f64;
    if joint == 0.0 {
        return f64::NEG_INFINITY;
    }
    let mut pmi = (joint / n).ln();
    for w in gram {
        pmi -= (counts.unigrams[w] as f64 / n).ln();
    }
    pmi
}

pub fn segment_phrases(sub: &SubCorpus, config: PhraseConfig) -> AnnotatedSubCorpus {
    fuse(rewrite(sub), config)
}

/// Fuse phrases in an already rewritten sub-corpus.
pub fn fuse(mut annotated: AnnotatedSubCorpus, config: PhraseConfig) -> AnnotatedSubCorpus {
    let counts = count_ngrams(annotated.sentences.iter().map(|s| s.tokens.as_slice()));
    let phrases: BTreeSet<Vec<String>> = counts
        .ngrams
        .iter()
        .filter(|(g, &c)| c >= config.min_count.max(1) && ngram_pmi(&counts, g) >= config.pmi_floor)
        .map(|(g, _)| g.clone())
        .collect();
    if phrases.is_empty() {
        return annotated;
    }
    for s in &mut annotated.sentences {
        s.tokens = fuse_tokens(&s.tokens, &phrases);
    }
    annotated.phrases = phrases.iter().map(|g| g.join("_")).collect();
    annotated
}

fn fuse_tokens(tokens: &[String], phrases: &BTreeSet<Vec<String>>) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let matched = (2..=MAX_PHRASE_LEN)
            .rev()
            .find(|&n| tokens.get(i..i + n).is_some_and(|g| phrases.contains(g)));
        match matched {
            Some(n) => {
                out.push(tokens[i..i + n].join("_"));
                i += n;
            }
            None => {
                out.push(tokens[i].clone());
                i += 1;
            }
        }
    }
    out
}

/// Split fused phrase tokens back into words.
pub fn unfuse(token: &str) -> impl Iterator<Item = &str> {
    token.split(PHRASE_JOINER).filter(|w| !w.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn annotated(lines: &[&str]) -> AnnotatedSubCorpus {
        AnnotatedSubCorpus {
            relation: "r".into(),
            sentences: lines
                .iter()
                .map(|l| AnnotatedSentence {
                    head: "h".into(),
                    tail: "t".into(),
                    tokens: l.split_whitespace().map(str::to_string).collect(),
                })
                .collect(),
            phrases: BTreeSet::new(),
            num_tuples: 1,
        }
    }

    fn fixture() -> Vec<String> {
        let mut lines = Vec::new();
        for i in 0..12 {
            lines.push(format!("[X] verb{i} new york city place{i} [Y]"));
        }
        for i in 0..4 {
            lines.push(format!("[X] visited new york with friend{i} [Y]"));
        }
        for i in 0..6 {
            lines.push(format!("[X] met [Y] at the old market{i}"));
        }
        lines
    }

    #[test]
    fn frequent_high_pmi_trigram_is_fused_longest_first() {
        let lines = fixture();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let base = annotated(&refs);

        // Brute-force the statistics the fuser relies on.
        let total: usize = base
            .sentences
            .iter()
            .map(|s| s.tokens.iter().filter(|t| !is_placeholder(t)).count())
            .sum();
        let count = |w: &str| {
            base.sentences
                .iter()
                .flat_map(|s| s.tokens.iter())
                .filter(|t| *t == w)
                .count()
        };
        let city_count = base
            .sentences
            .iter()
            .filter(|s| s.tokens.windows(3).any(|g| g == ["new", "york", "city"]))
            .count();
        assert_eq!(city_count, 12);
        let n = total as f64;
        let pmi = (12.0 / n).ln()
            - (count("new") as f64 / n).ln()
            - (count("york") as f64 / n).ln()
            - (count("city") as f64 / n).ln();
        let counts = count_ngrams(base.sentences.iter().map(|s| s.tokens.as_slice()));
        let trigram: Vec<String> = ["new", "york", "city"].iter().map(|s| s.to_string()).collect();
        assert!((ngram_pmi(&counts, &trigram) - pmi).abs() < 1e-12);
        assert!(pmi > 1.5);

        let fused = fuse(base, PhraseConfig { min_count: 10, pmi_floor: 1.5 });
        assert!(fused.phrases.contains("new_york_city"));
        assert_eq!(
            fused.sentences[0].tokens[..4],
            ["[X]".to_string(), "verb0".into(), "new_york_city".into(), "place0".into()]
        );
        // "new york" alone occurs 16 times, but the trigram wins where it applies.
        assert!(fused.phrases.contains("new_york"));
        assert!(fused.sentences[12].tokens.contains(&"new_york".to_string()));
    }

    #[test]
    fn unique_sentences_are_left_alone() {
        let base = annotated(&["[X] alpha beta [Y]", "[X] gamma delta [Y]", "[Y] epsilon [X] zeta"]);
        let fused = fuse(base.clone(), PhraseConfig { min_count: 2, pmi_floor: 0.0 });
        assert_eq!(fused.sentences, base.sentences);
        assert!(fused.phrases.is_empty());
    }

    #[test]
    fn fusion_never_crosses_placeholders() {
        let lines: Vec<String> = (0..10).map(|_| "a [X] b [Y] c".to_string()).collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let fused = fuse(annotated(&refs), PhraseConfig { min_count: 2, pmi_floor: -10.0 });
        assert_eq!(fused.sentences[0].tokens, vec!["a", "[X]", "b", "[Y]", "c"]);
    }

    #[test]
    fn unfuse_splits_joined_words() {
        assert_eq!(unfuse("new_york_city").collect::<Vec<_>>(), vec!["new", "york", "city"]);
        assert_eq!(unfuse("word").collect::<Vec<_>>(), vec!["word"]);
    }
}
