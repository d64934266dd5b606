//! Okapi BM25 over reliable-corpus sentences and cloze instance assembly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusStore, Source};
use crate::error::{Error, Result};
use crate::kg::{Direction, Query, Triple};
use crate::prompt::Prompt;
use crate::rng::SplitMix64;
use crate::text::{self, is_stopword, CLS_TOKEN, MASK_TOKEN, SEP_TOKEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub delta: f64,
    pub phi: usize,
    pub k1: f64,
    pub b: f64,
    pub seed: u64,
    /// Take the top passage instead of a seeded draw.
    pub deterministic: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            delta: 0.9,
            phi: 100,
            k1: 1.2,
            b: 0.75,
            seed: 55,
            deterministic: false,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) {
            return Err(Error::config("retrieval.delta", "must be ≥ 0"));
        }
        if self.phi < 1 {
            return Err(Error::config("retrieval.phi", "must be ≥ 1"));
        }
        if !(self.k1 > 0.0) {
            return Err(Error::config("retrieval.k1", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::config("retrieval.b", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct IndexedSentence {
    doc_id: String,
    index: usize,
    start: usize,
    end: usize,
    text: String,
}

/// Immutable BM25 index; one entry per reliable sentence.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    sentences: Vec<IndexedSentence>,
    lengths: Vec<usize>,
    avg_len: f64,
    /// term -> (sentence, tf), ascending by sentence.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPassage {
    pub doc_id: String,
    pub sent_index: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub length: usize,
    pub text: String,
}

impl Bm25Index {
    pub fn build(corpus: &CorpusStore) -> Result<Self> {
        let mut sentences = Vec::new();
        let mut lengths = Vec::new();
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for s in corpus.sentences().iter().filter(|s| s.source == Source::Reliable) {
            let id = sentences.len() as u32;
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &s.tokens {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t.to_string()).or_default().push((id, c));
            }
            lengths.push(s.tokens.len());
            sentences.push(IndexedSentence {
                doc_id: s.doc_id.clone(),
                index: s.index,
                start: s.start,
                end: s.end,
                text: s.raw.clone(),
            });
        }
        if sentences.is_empty() {
            return Err(Error::Empty("reliable corpus has no sentences to index".into()));
        }
        let avg_len = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
        Ok(Self {
            sentences,
            lengths,
            avg_len,
            postings,
        })
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`; defined for unseen terms too.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.sentences.len() as f64;
        let df = self.df(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 of every sentence against the deduplicated query terms, including zeros.
    pub fn score_all(&self, query_terms: &[String], k1: f64, b: f64) -> Vec<f64> {
        let mut scores = vec![0.0; self.sentences.len()];
        let terms: BTreeSet<&str> = query_terms.iter().map(String::as_str).collect();
        for term in terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(id, tf) in list {
                let tf = tf as f64;
                let len = self.lengths[id as usize] as f64;
                let norm = tf + k1 * (1.0 - b + b * len / self.avg_len);
                scores[id as usize] += idf * tf * (k1 + 1.0) / norm;
            }
        }
        scores
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (t, list) in &self.postings {
            h.update(t.as_bytes());
            h.update([0]);
            for (id, tf) in list {
                h.update(id.to_le_bytes());
                h.update(tf.to_le_bytes());
            }
        }
        for s in &self.sentences {
            h.update(s.doc_id.as_bytes());
            h.update([0]);
            h.update((s.index as u64).to_le_bytes());
        }
        crate::checksum::hex(&h.finalize())
    }
}

/// Passages scoring above `delta` and shorter than `phi` tokens, best first;
/// ties by `(doc_id, sentence index)`.
pub fn retrieve(index: &Bm25Index, query_terms: &[String], config: &RetrievalConfig) -> Vec<SupportPassage> {
    let scores = index.score_all(query_terms, config.k1, config.b);
    let mut out: Vec<SupportPassage> = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > config.delta && index.lengths[i] < config.phi)
        .map(|(i, &score)| {
            let s = &index.sentences[i];
            SupportPassage {
                doc_id: s.doc_id.clone(),
                sent_index: s.index,
                start: s.start,
                end: s.end,
                score,
                length: index.lengths[i],
                text: s.text.clone(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
            .then(a.sent_index.cmp(&b.sent_index))
    });
    debug_assert!(out.iter().all(|p| p.score > config.delta && p.length < config.phi));
    out
}

/// Content words of a relation key: last path segment split on `_` and `/`.
pub fn relation_words(relation: &str) -> Vec<String> {
    let last = relation.trim_end_matches('/').rsplit('/').next().unwrap_or(relation);
    last.split(['_', '/'])
        .flat_map(text::tokenize)
        .filter(|w| !is_stopword(w))
        .collect()
}

/// Query-wise terms: the known entity's label plus relation words.
pub fn query_terms(subject_label: &str, relation: &str) -> Vec<String> {
    let mut terms = text::tokenize(subject_label);
    terms.extend(relation_words(relation));
    terms
}

/// Triple-wise terms: both labels plus relation words.
pub fn triple_terms(head_label: &str, tail_label: &str, relation: &str) -> Vec<String> {
    let mut terms = text::tokenize(head_label);
    terms.extend(text::tokenize(tail_label));
    terms.extend(relation_words(relation));
    terms
}

/// Pick one passage: the top one in deterministic mode, otherwise a draw
/// seeded by `config.seed` and `key`.
/// Whether `passage` contains the token run of any label in `labels`.
pub fn mentions_any(passage: &str, labels: &[&str]) -> bool {
    let tokens = text::tokenize(passage);
    labels.iter().any(|l| {
        let run = text::tokenize(l);
        !run.is_empty() && tokens.windows(run.len()).any(|w| w == run.as_slice())
    })
}

pub fn choose_support(passages: &[SupportPassage], config: &RetrievalConfig, key: &str) -> Option<SupportPassage> {
    if passages.is_empty() {
        return None;
    }
    if config.deterministic {
        return Some(passages[0].clone());
    }
    let mut rng = SplitMix64::derived(config.seed, key);
    Some(passages[rng.below(passages.len())].clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClozeMode {
    Train,
    Infer,
}

/// A rendered prompt instance. `subject` is the known entity; in head
/// direction it sits in the `[Y]` slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ClozeInstance {
    pub mode: ClozeMode,
    pub direction: Direction,
    pub relation: String,
    pub subject: String,
    pub subject_label: String,
    /// Filled entity and its label; `None` means the slot is masked.
    pub object: Option<(String, String)>,
    pub support: Option<String>,
    pub prompt_index: usize,
    pub prompt: Prompt,
    pub label: Option<u8>,
}

impl ClozeInstance {
    pub fn is_masked(&self) -> bool {
        self.object.is_none()
    }

    pub fn object_label(&self) -> Option<&str> {
        self.object.as_ref().map(|(_, l)| l.as_str())
    }

    /// The same instance with `label` filled into the open slot.
    pub fn filled_with(&self, id: &str, label: &str) -> ClozeInstance {
        ClozeInstance {
            object: Some((id.to_string(), label.to_string())),
            ..self.clone()
        }
    }

    pub fn filled_prompt(&self) -> String {
        let other = self.object_label().unwrap_or(MASK_TOKEN);
        match self.direction {
            Direction::Tail => self.prompt.fill(&self.subject_label, other),
            Direction::Head => self.prompt.fill(other, &self.subject_label),
        }
    }

    /// `[CLS] {support} [SEP] {filled prompt}`.
    pub fn render(&self) -> String {
        match &self.support {
            Some(s) => format!("{CLS_TOKEN} {s} {SEP_TOKEN} {}", self.filled_prompt()),
            None => format!("{CLS_TOKEN} {SEP_TOKEN} {}", self.filled_prompt()),
        }
    }

    pub fn to_record(&self) -> ClozeRecord {
        ClozeRecord {
            mode: self.mode,
            relation: self.relation.clone(),
            subject: self.subject.clone(),
            object: self.object.as_ref().map(|(id, _)| id.clone()),
            support: self.support.clone(),
            prompt_index: self.prompt_index,
            text: self.render(),
            label: self.label,
            direction: Some(self.direction),
        }
    }
}

/// One JSONL line of the cloze instance file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClozeRecord {
    pub mode: ClozeMode,
    pub relation: String,
    pub subject: String,
    pub object: Option<String>,
    pub support: Option<String>,
    pub prompt_index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
}

/// Split a rendered sequence back into `(support, filled prompt)`.
pub fn parse_rendered(text: &str) -> Option<(Option<String>, String)> {
    let rest = text.strip_prefix(CLS_TOKEN)?;
    let (support, prompt) = rest.split_once(SEP_TOKEN)?;
    let support = support.trim();
    let prompt = prompt.strip_prefix(' ').unwrap_or(prompt);
    Some(((!support.is_empty()).then(|| support.to_string()), prompt.to_string()))
}

/// What the instances are built for: a query to complete, or a known triple.
#[derive(Debug, Clone)]
pub enum ClozeTarget<'a> {
    Query(&'a Query),
    Triple { triple: &'a Triple, direction: Direction, label: u8 },
}

/// One instance per prompt. Query targets are masked; triple targets are filled.
pub fn make_cloze<F>(target: ClozeTarget<'_>, prompts: &[Prompt], support: Option<&str>, label_of: F) -> Vec<ClozeInstance>
where
    F: Fn(&str) -> String,
{
    let (mode, direction, relation, subject, object, label) = match target {
        ClozeTarget::Query(q) => (ClozeMode::Infer, q.direction, &q.relation, q.subject.clone(), None, None),
        ClozeTarget::Triple { triple, direction, label } => {
            let (s, o) = match direction {
                Direction::Tail => (&triple.head, &triple.tail),
                Direction::Head => (&triple.tail, &triple.head),
            };
            (
                ClozeMode::Train,
                direction,
                &triple.relation,
                s.clone(),
                Some((o.clone(), label_of(o))),
                Some(label),
            )
        }
    };
    let subject_label = label_of(&subject);
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            assert!(p.has_both_slots(), "prompt {:?} lacks a slot", p.display());
            ClozeInstance {
                mode,
                direction,
                relation: relation.clone(),
                subject: subject.clone(),
                subject_label: subject_label.clone(),
                object: object.clone(),
                support: support.map(str::to_string),
                prompt_index: i,
                prompt: p.clone(),
                label,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use proptest::prelude::*;

    fn reliable(texts: &[&str]) -> CorpusStore {
        CorpusStore::from_documents(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document {
                    doc_id: format!("r{i}"),
                    text: t.to_string(),
                    source: Source::Reliable,
                })
                .collect(),
        )
        .unwrap()
    }

    fn terms(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn idf_table_matches_hand_count() {
        let idx = Bm25Index::build(&reliable(&["alba is in piedmont.", "alba makes wine.", "texas is big."])).unwrap();
        // N = 3; alba df 2, is df 2, piedmont df 1, zzz df 0.
        let idf = |df: f64| ((3.0 - df + 0.5) / (df + 0.5) + 1.0f64).ln();
        assert_eq!(idx.df("alba"), 2);
        assert!((idx.idf("alba") - idf(2.0)).abs() < 1e-12);
        assert!((idx.idf("piedmont") - idf(1.0)).abs() < 1e-12);
        assert!((idx.idf("zzz") - idf(0.0)).abs() < 1e-12);
        let s = idx.score_all(&terms("zzz"), 1.2, 0.75);
        assert!(s.iter().all(|&x| x == 0.0));
        assert_eq!(idx.checksum(), Bm25Index::build(&reliable(&["alba is in piedmont.", "alba makes wine.", "texas is big."])).unwrap().checksum());
    }

    #[test]
    fn four_sentence_fixture_alba_piedmont() {
        let idx = Bm25Index::build(&reliable(&[
            "alba is a town in piedmont.",
            "alba alba truffles.",
            "piedmont borders france.",
            "texas is large.",
        ]))
        .unwrap();
        // Lengths 6, 3, 3, 3; avg 3.75. alba df 2, piedmont df 2.
        let (k1, b, avg) = (1.2, 0.75, 3.75);
        let idf = ((4.0 - 2.0 + 0.5) / 2.5 + 1.0f64).ln();
        let part = |tf: f64, len: f64| idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avg));
        let expected = [part(1.0, 6.0) * 2.0, part(2.0, 3.0), part(1.0, 3.0), 0.0];
        let got = idx.score_all(&terms("alba piedmont"), k1, b);
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{got:?} vs {expected:?}");
        }
        let config = RetrievalConfig { delta: 0.0, ..Default::default() };
        let ranked = retrieve(&idx, &terms("alba piedmont"), &config);
        let order: Vec<&str> = ranked.iter().map(|p| p.doc_id.as_str()).collect();
        let mut by_hand: Vec<(usize, f64)> = expected.iter().copied().enumerate().filter(|(_, s)| *s > 0.0).collect();
        by_hand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let hand_order: Vec<String> = by_hand.iter().map(|(i, _)| format!("r{i}")).collect();
        assert_eq!(order, hand_order);
        assert!(retrieve(&idx, &terms("nothing here"), &RetrievalConfig::default()).is_empty());
    }

    #[test]
    fn relation_words_from_key() {
        assert_eq!(relation_words("/people/person/place_of_birth"), vec!["place", "birth"]);
        assert_eq!(query_terms("Alba", "/location/contains"), vec!["alba", "contains"]);
        assert_eq!(triple_terms("Alba", "Piedmont", "r/located_in"), vec!["alba", "piedmont", "located"]);
    }

    #[test]
    fn seeded_choice_is_stable() {
        let p: Vec<SupportPassage> = (0..5)
            .map(|i| SupportPassage {
                doc_id: format!("d{i}"),
                sent_index: 0,
                start: 0,
                end: 1,
                score: 5.0 - i as f64,
                length: 3,
                text: format!("s{i}"),
            })
            .collect();
        let config = RetrievalConfig::default();
        assert_eq!(choose_support(&p, &config, "q"), choose_support(&p, &config, "q"));
        let det = RetrievalConfig { deterministic: true, ..Default::default() };
        assert_eq!(choose_support(&p, &det, "q").unwrap().doc_id, "d0");
        assert_eq!(choose_support(&[], &config, "q"), None);
    }

    #[test]
    fn cloze_per_prompt_with_one_mask() {
        let prompts = vec![Prompt::parse("r", "[X] lies_in [Y]"), Prompt::parse("r", "[Y] contains [X]")];
        let q = Query::tail("e1", "r");
        let label = |id: &str| if id == "e1" { "Alba".to_string() } else { "Piedmont".to_string() };
        let inst = make_cloze(ClozeTarget::Query(&q), &prompts, Some("Alba is old."), label);
        assert_eq!(inst.len(), 2);
        for i in &inst {
            assert_eq!(i.render().matches(MASK_TOKEN).count(), 1);
        }
        assert_eq!(inst[0].render(), "[CLS] Alba is old. [SEP] Alba lies in [MASK]");
        assert_eq!(inst[1].render(), "[CLS] Alba is old. [SEP] [MASK] contains Alba");
        let t = Triple::new("e2", "r", "e1");
        let train = make_cloze(ClozeTarget::Triple { triple: &t, direction: Direction::Head, label: 1 }, &prompts, None, label);
        assert_eq!(train[0].render(), "[CLS] [SEP] Piedmont lies in Alba");
        assert!(!train[0].render().contains(MASK_TOKEN));
    }

    proptest! {
        #[test]
        fn bm25_nondecreasing_in_tf(tf in 1usize..6, filler in 1usize..6) {
            // Same length, one more occurrence of the query term in the second sentence.
            let mut lower: Vec<&str> = vec!["w"; tf + filler];
            lower[..tf].fill("alba");
            let mut higher = lower.clone();
            higher[tf] = "alba";
            let docs = [lower.join(" "), higher.join(" "), "other text".to_string()];
            let idx = Bm25Index::build(&reliable(&docs.iter().map(String::as_str).collect::<Vec<_>>())).unwrap();
            let s = idx.score_all(&terms("alba"), 1.2, 0.75);
            prop_assert!(s[1] >= s[0]);
        }

        #[test]
        fn emitted_passages_respect_thresholds(delta in 0.0f64..3.0, phi in 1usize..8) {
            let idx = Bm25Index::build(&reliable(&[
                "alba piedmont wine.", "alba.", "piedmont piedmont piedmont hills and rivers.", "alba is a fine town in piedmont today.",
            ])).unwrap();
            let config = RetrievalConfig { delta, phi, ..Default::default() };
            for p in retrieve(&idx, &terms("alba piedmont"), &config) {
                prop_assert!(p.score > delta && p.length < phi);
            }
        }

        #[test]
        fn record_round_trip(support in proptest::option::of("[a-z ]{1,20}"), idx in 0usize..5, head in any::<bool>()) {
            let support = support.map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
            let direction = if head { Direction::Head } else { Direction::Tail };
            let inst = ClozeInstance {
                mode: ClozeMode::Infer,
                direction,
                relation: "r".into(),
                subject: "e1".into(),
                subject_label: "alba".into(),
                object: None,
                support: support.clone(),
                prompt_index: idx,
                prompt: Prompt::parse("r", "[X] is_near [Y]"),
                label: None,
            };
            let rec = inst.to_record();
            let back: ClozeRecord = serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
            prop_assert_eq!(&back, &rec);
            let (s, p) = parse_rendered(&rec.text).unwrap();
            prop_assert_eq!(s, support);
            prop_assert_eq!(p, inst.filled_prompt());
        }
    }

    #[test]
    fn mention_check_matches_whole_token_runs() {
        assert!(mentions_any("Alba visited New Lohu last year.", &["new lohu"]));
        assert!(!mentions_any("Alba visited Lohu.", &["New Lohu"]));
        assert!(!mentions_any("Albanians visited.", &["Alba"]));
        assert!(!mentions_any("Alba visited Lohu.", &[]));
    }
}
