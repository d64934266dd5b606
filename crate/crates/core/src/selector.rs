//! Pattern quality scoring and cosine self-training filter that turn mined
//! candidates into a prompt ensemble.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::error::{Error, Result};
use crate::miner::{Candidate, CandidateSet};
use crate::phrase::{unfuse, AnnotatedSubCorpus};
use crate::prompt::{has_both_slots, template_words, Prompt};
use crate::text::{self, is_edge_function_word, is_placeholder, is_stopword, OBJECT_SLOT, SUBJECT_SLOT};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QualityScore {
    pub frequency_concordance: f64,
    pub informativeness: f64,
    pub completeness: f64,
    pub coverage: f64,
    pub total: f64,
}

/// Statistics a candidate is scored against.
pub struct QualityContext<'a> {
    annotated: &'a AnnotatedSubCorpus,
    corpus: &'a CorpusStore,
    unigrams: HashMap<&'a str, usize>,
    bigrams: HashMap<(&'a str, &'a str), usize>,
    total_tokens: usize,
    max_support: usize,
}

impl<'a> QualityContext<'a> {
    pub fn new(annotated: &'a AnnotatedSubCorpus, corpus: &'a CorpusStore, candidates: &CandidateSet) -> Self {
        let mut unigrams = HashMap::new();
        let mut bigrams = HashMap::new();
        let mut total_tokens = 0;
        for s in &annotated.sentences {
            for (i, t) in s.tokens.iter().enumerate() {
                if is_placeholder(t) {
                    continue;
                }
                total_tokens += 1;
                *unigrams.entry(t.as_str()).or_default() += 1;
                if let Some(next) = s.tokens.get(i + 1).filter(|n| !is_placeholder(n)) {
                    *bigrams.entry((t.as_str(), next.as_str())).or_default() += 1;
                }
            }
        }
        let max_support = candidates.candidates.iter().map(|c| c.support).max().unwrap_or(1);
        Self {
            annotated,
            corpus,
            unigrams,
            bigrams,
            total_tokens,
            max_support,
        }
    }

    /// Association of two adjacent template tokens in the sub-corpus.
    fn bigram_pmi(&self, a: &str, b: &str) -> f64 {
        let joint = self.bigrams.get(&(a, b)).copied().unwrap_or(0);
        if joint == 0 {
            return f64::NEG_INFINITY;
        }
        let n = self.total_tokens as f64;
        let ca = self.unigrams.get(a).copied().unwrap_or(1) as f64;
        let cb = self.unigrams.get(b).copied().unwrap_or(1) as f64;
        (joint as f64 * n / (ca * cb)).ln()
    }

    /// Background IDF normalized into [0, 1] by the largest attainable value.
    fn normalized_idf(&self, word: &str) -> f64 {
        let n = self.corpus.sentences().len() as f64;
        if n <= 1.0 {
            return 1.0;
        }
        let df = self.corpus.postings(word).len().max(1) as f64;
        ((n / df).ln() / n.ln()).clamp(0.0, 1.0)
    }
}

/// Which sub-corpus sentences contain `template` as a contiguous run.
pub fn matching_sentences(annotated: &AnnotatedSubCorpus, template: &[String]) -> Vec<usize> {
    annotated
        .sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| !text::find_token_runs(&s.tokens, template).is_empty())
        .map(|(i, _)| i)
        .collect()
}

pub fn score_quality(candidate: &Candidate, ctx: &QualityContext<'_>) -> QualityScore {
    let template = &candidate.template;

    let frequency = (1.0 + candidate.support as f64).ln() / (1.0 + ctx.max_support as f64).ln();
    let content: Vec<&String> = template.iter().filter(|t| !is_placeholder(t)).collect();
    let concordance = template
        .windows(2)
        .filter(|w| !is_placeholder(&w[0]) && !is_placeholder(&w[1]))
        .map(|w| ctx.bigram_pmi(&w[0], &w[1]))
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.min(x))))
        .map_or(1.0, |pmi| 1.0 / (1.0 + (-pmi).exp()));
    let frequency_concordance = (frequency * concordance).clamp(0.0, 1.0);

    let words = template_words(template);
    let informativeness = if words.is_empty() {
        0.0
    } else {
        let non_stop = words.iter().filter(|w| !is_stopword(w)).count() as f64 / words.len() as f64;
        let idf = words.iter().map(|w| ctx.normalized_idf(w)).sum::<f64>() / words.len() as f64;
        non_stop * idf
    };

    let completeness = completeness(template);

    let matched = matching_sentences(ctx.annotated, template);
    let tuples: BTreeSet<(&str, &str)> = matched
        .iter()
        .map(|&i| {
            let s = &ctx.annotated.sentences[i];
            (s.head.as_str(), s.tail.as_str())
        })
        .collect();
    let coverage = if ctx.annotated.num_tuples == 0 {
        0.0
    } else {
        tuples.len() as f64 / ctx.annotated.num_tuples as f64
    };

    let total = if completeness == 0.0 || content.is_empty() {
        0.0
    } else {
        (frequency_concordance * informativeness * completeness * coverage).powf(0.25)
    };
    QualityScore {
        frequency_concordance,
        informativeness,
        completeness,
        coverage,
        total,
    }
}

/// Zero unless the template has one `[X]`, one `[Y]` and no function word
/// dangling at either edge; otherwise decays with tokens outside the slot span.
pub fn completeness(template: &[String]) -> f64 {
    if !has_both_slots(template) {
        return 0.0;
    }
    let dangling = |tok: &String| {
        !is_placeholder(tok)
            && unfuse(tok)
                .collect::<Vec<_>>()
                .first()
                .is_some_and(|w| is_edge_function_word(w))
    };
    let dangling_end = |tok: &String| {
        !is_placeholder(tok) && unfuse(tok).last().is_some_and(is_edge_function_word)
    };
    if template.first().is_some_and(dangling) || template.last().is_some_and(dangling_end) {
        return 0.0;
    }
    let x = template.iter().position(|t| t == SUBJECT_SLOT).unwrap();
    let y = template.iter().position(|t| t == OBJECT_SLOT).unwrap();
    let (lo, hi) = (x.min(y), x.max(y));
    let outside = lo + (template.len() - 1 - hi);
    1.0 / (1.0 + 0.25 * outside as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    /// Support quantile below which a pattern's similarity is shrunk.
    pub penalty: f64,
    pub positive: f64,
    pub negative: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            penalty: 0.5,
            positive: 0.7,
            negative: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub quality_floor: f64,
    /// Candidates between the thresholds are kept only at or above this quality.
    pub middle_floor: f64,
    pub max_candidates: usize,
    pub max_iterations: usize,
    pub thresholds: FilterThresholds,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            quality_floor: 0.3,
            middle_floor: 0.5,
            max_candidates: 20,
            max_iterations: 10,
            thresholds: FilterThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    pub quality: QualityScore,
}

pub fn score_all(candidates: &CandidateSet, ctx: &QualityContext<'_>) -> Vec<ScoredCandidate> {
    candidates
        .candidates
        .iter()
        .map(|c| ScoredCandidate {
            candidate: c.clone(),
            quality: score_quality(c, ctx),
        })
        .collect()
}

/// Sparse, unit-norm vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatternEmbedding {
    pub weights: BTreeMap<String, f64>,
    pub is_zero: bool,
}

impl PatternEmbedding {
    pub fn cosine(&self, other: &PatternEmbedding) -> f64 {
        if self.is_zero || other.is_zero {
            return 0.0;
        }
        let (small, large) = if self.weights.len() <= other.weights.len() {
            (&self.weights, &other.weights)
        } else {
            (&other.weights, &self.weights)
        };
        small
            .iter()
            .filter_map(|(k, v)| large.get(k).map(|w| v * w))
            .sum()
    }
}

/// Context words of sub-corpus sentences against background document
/// frequencies. A pattern's own words are not part of its context.
pub struct EmbeddingSpace {
    sentence_words: Vec<BTreeSet<String>>,
    background_df: HashMap<String, usize>,
    background_n: usize,
}

impl EmbeddingSpace {
    pub fn new(annotated: &AnnotatedSubCorpus, background: &CorpusStore) -> Self {
        let sentence_words: Vec<BTreeSet<String>> = annotated
            .sentences
            .iter()
            .map(|s| {
                s.tokens
                    .iter()
                    .filter(|t| !is_placeholder(t))
                    .flat_map(|t| unfuse(t).map(str::to_string).collect::<Vec<_>>())
                    .collect()
            })
            .collect();
        let vocab: BTreeSet<&str> = sentence_words.iter().flatten().map(String::as_str).collect();
        let background_df = vocab
            .into_iter()
            .map(|w| (w.to_string(), background.postings(w).len()))
            .collect();
        Self {
            sentence_words,
            background_df,
            background_n: background.sentences().len(),
        }
    }

    /// PPMI of each context word in the matched sentences against its
    /// background rate, L2-normalized.
    pub fn embed(&self, matched: &[usize], template: &[String]) -> PatternEmbedding {
        let own: BTreeSet<&str> = template_words(template).into_iter().collect();
        let np = matched.len() as f64;
        let n = self.background_n as f64;
        let mut joint: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in matched {
            for w in &self.sentence_words[i] {
                if !own.contains(w.as_str()) {
                    *joint.entry(w.as_str()).or_default() += 1;
                }
            }
        }
        let mut weights = BTreeMap::new();
        for (w, c) in joint {
            let df = self.background_df[w];
            if df == 0 {
                continue;
            }
            let pmi = (c as f64 * n / (np * df as f64)).ln();
            if pmi > 0.0 {
                weights.insert(w.to_string(), pmi);
            }
        }
        let norm = weights.values().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return PatternEmbedding {
                weights,
                is_zero: true,
            };
        }
        for v in weights.values_mut() {
            *v /= norm;
        }
        PatternEmbedding {
            weights,
            is_zero: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrompt {
    pub template: Vec<String>,
    pub weight: f64,
    pub quality: QualityScore,
}

/// Serialized ensemble: `{"relation", "prompts": [{"template", "weight", "quality"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub relation: String,
    pub prompts: Vec<EnsemblePrompt>,
}

/// Prompts of one relation with their combination weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEnsemble {
    pub relation: String,
    pub prompts: Vec<Prompt>,
    pub weights: Vec<f64>,
    pub quality: Vec<QualityScore>,
}

impl PromptEnsemble {
    pub fn uniform(relation: impl Into<String>, prompts: Vec<Prompt>, quality: Vec<QualityScore>) -> Self {
        let n = prompts.len();
        Self {
            relation: relation.into(),
            weights: vec![1.0 / n as f64; n],
            prompts,
            quality,
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn with_uniform_weights(&self) -> Self {
        let n = self.len();
        Self {
            weights: vec![1.0 / n as f64; n],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::Invalid(format!("ensemble for {} is empty", self.relation)));
        }
        if self.weights.len() != self.prompts.len() {
            return Err(Error::Invalid("weights and prompts differ in length".into()));
        }
        if let Some(p) = self.prompts.iter().find(|p| !p.has_both_slots()) {
            return Err(Error::Invalid(format!("prompt {:?} lacks a slot", p.display())));
        }
        crate::ensemble::check_simplex(&self.weights)
    }

    pub fn to_file(&self) -> EnsembleFile {
        EnsembleFile {
            relation: self.relation.clone(),
            prompts: self
                .prompts
                .iter()
                .zip(&self.weights)
                .zip(&self.quality)
                .map(|((p, &weight), &quality)| EnsemblePrompt {
                    template: p.template.clone(),
                    weight,
                    quality,
                })
                .collect(),
        }
    }

    pub fn from_file(file: EnsembleFile) -> Result<Self> {
        let ens = Self {
            prompts: file
                .prompts
                .iter()
                .map(|p| Prompt::new(file.relation.clone(), p.template.clone()))
                .collect(),
            weights: file.prompts.iter().map(|p| p.weight).collect(),
            quality: file.prompts.iter().map(|p| p.quality).collect(),
            relation: file.relation,
        };
        ens.validate()?;
        Ok(ens)
    }
}

/// Linear interpolation quantile of `values` at `q` in [0, 1].
fn quantile(values: &[usize], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.is_empty() {
        return 0.0;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Seed-driven self-training over pattern embeddings.
///
/// The seed (highest quality unless given) starts the positive set. A
/// candidate whose penalized best cosine to a positive reaches
/// `thresholds.positive` becomes positive; this repeats to a fixed point or
/// `max_iterations`. Candidates at or below `thresholds.negative` are
/// dropped, and those in between survive only with quality ≥ `middle_floor`.
/// Patterns with support under the `thresholds.penalty` quantile have their
/// similarity scaled by `support / quantile`.
pub fn truepie_filter(
    relation: &str,
    scored: &[ScoredCandidate],
    annotated: &AnnotatedSubCorpus,
    background: &CorpusStore,
    seed: Option<&[String]>,
    config: &SelectionConfig,
) -> Result<PromptEnsemble> {
    let mut pool: Vec<&ScoredCandidate> = scored
        .iter()
        .filter(|s| s.quality.total > 0.0 && s.quality.total >= config.quality_floor)
        .collect();
    pool.sort_by(|a, b| {
        b.quality
            .total
            .partial_cmp(&a.quality.total)
            .unwrap()
            .then(b.candidate.support.cmp(&a.candidate.support))
            .then_with(|| a.candidate.template.cmp(&b.candidate.template))
    });
    pool.truncate(config.max_candidates);

    let manual_seed;
    let seed_index = match seed {
        Some(template) => {
            if !has_both_slots(template) {
                return Err(Error::config("select.seed", "seed prompt needs exactly one [X] and one [Y]"));
            }
            match pool.iter().position(|s| s.candidate.template == template) {
                Some(i) => i,
                None => {
                    let support = matching_sentences(annotated, template).len();
                    manual_seed = ScoredCandidate {
                        candidate: Candidate {
                            template: template.to_vec(),
                            support,
                        },
                        quality: QualityScore {
                            completeness: completeness(template),
                            ..Default::default()
                        },
                    };
                    pool.insert(0, &manual_seed);
                    0
                }
            }
        }
        None => {
            if pool.is_empty() {
                return Err(Error::NoPrompts {
                    relation: relation.to_string(),
                });
            }
            0
        }
    };

    let space = EmbeddingSpace::new(annotated, background);
    let embeddings: Vec<PatternEmbedding> = pool
        .iter()
        .map(|s| space.embed(&matching_sentences(annotated, &s.candidate.template), &s.candidate.template))
        .collect();
    let supports: Vec<usize> = pool.iter().map(|s| s.candidate.support).collect();
    let cut = quantile(&supports, config.thresholds.penalty);
    let penalty: Vec<f64> = supports
        .iter()
        .map(|&s| if cut > 0.0 && (s as f64) < cut { s as f64 / cut } else { 1.0 })
        .collect();

    let n = pool.len();
    let mut positive = vec![false; n];
    positive[seed_index] = true;
    let mut best = vec![0.0f64; n];
    for _ in 0..config.max_iterations.max(1) {
        for i in 0..n {
            best[i] = (0..n)
                .filter(|&j| positive[j])
                .map(|j| if i == j { 1.0 } else { embeddings[i].cosine(&embeddings[j]) * penalty[i] })
                .fold(0.0, f64::max);
        }
        let mut changed = false;
        for i in 0..n {
            if !positive[i] && best[i] >= config.thresholds.positive {
                positive[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for i in 0..n {
        best[i] = (0..n)
            .filter(|&j| positive[j])
            .map(|j| if i == j { 1.0 } else { embeddings[i].cosine(&embeddings[j]) * penalty[i] })
            .fold(0.0, f64::max);
    }

    let mut kept = Vec::new();
    for i in 0..n {
        let keep = positive[i]
            || (best[i] > config.thresholds.negative && pool[i].quality.total >= config.middle_floor);
        if keep {
            kept.push(i);
        }
    }
    let prompts = kept
        .iter()
        .map(|&i| Prompt::new(relation, pool[i].candidate.template.clone()))
        .collect();
    let quality = kept.iter().map(|&i| pool[i].quality).collect();
    Ok(PromptEnsemble::uniform(relation, prompts, quality))
}
