//! The scoring contract, the classification loss, and a corpus-statistics
//! reference scorer with a logistic head.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStore, Source};
use crate::error::{Error, Result, ScorerError};
use crate::phrase::unfuse;
use crate::retriever::ClozeInstance;
use crate::text::{self, is_stopword};

pub const LOG_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScore {
    pub c0: f64,
    pub c1: f64,
}

impl ClassificationScore {
    pub fn from_c1(c1: f64) -> Self {
        Self { c0: 1.0 - c1, c1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Divisor applied to negative terms of the loss.
    pub m: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1.0,
            m: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub model_version: String,
    /// Training loss before the first update and after each epoch.
    pub losses: Vec<f64>,
}

/// What every language model backend provides. Candidate lists are entity labels.
pub trait Scorer: Send + Sync {
    /// Probability of each candidate filling the mask; sums to 1.
    fn score_cloze(&self, instance: &ClozeInstance, candidates: &[String]) -> std::result::Result<Vec<f64>, ScorerError>;

    fn classify(&self, instance: &ClozeInstance) -> std::result::Result<ClassificationScore, ScorerError>;

    /// Instances must be filled and carry a label.
    fn finetune(&mut self, instances: &[ClozeInstance], config: &FinetuneConfig) -> Result<FinetuneReport>;

    fn classify_batch(&self, instances: &[ClozeInstance]) -> std::result::Result<Vec<ClassificationScore>, ScorerError> {
        instances.iter().map(|i| self.classify(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Some active probability was below the clamp.
    pub clamped: bool,
}

/// `-Σ [ y·ln c1 + (1 - y)·ln(c0) / m ]` with log arguments clamped at ε.
pub fn loss(batch: &[(ClassificationScore, u8)], m: f64) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Invalid("loss over an empty batch".into()));
    }
    if !(m > 0.0) {
        return Err(Error::config("train.m_ratio", "must be positive"));
    }
    let mut clamped = false;
    let mut value = 0.0;
    for (score, y) in batch {
        let p = if *y == 1 { score.c1 } else { score.c0 };
        if p < LOG_EPSILON {
            clamped = true;
        }
        let term = p.max(LOG_EPSILON).ln();
        value -= if *y == 1 { term } else { term / m };
    }
    Ok(LossValue { value, clamped })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `c1 = σ(weight·evidence + bias)`; zero-initialized.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogisticHead {
    pub weight: f64,
    pub bias: f64,
}

impl LogisticHead {
    pub fn score(&self, evidence: f64) -> ClassificationScore {
        ClassificationScore::from_c1(sigmoid(self.weight * evidence + self.bias))
    }

    pub fn loss(&self, data: &[(f64, u8)], m: f64) -> Result<f64> {
        let batch: Vec<_> = data.iter().map(|&(e, y)| (self.score(e), y)).collect();
        Ok(loss(&batch, m)?.value)
    }

    /// Gradient of the loss with respect to `(weight, bias)`.
    pub fn gradient(&self, data: &[(f64, u8)], m: f64) -> (f64, f64) {
        let (mut gw, mut gb) = (0.0, 0.0);
        for &(e, y) in data {
            let c1 = sigmoid(self.weight * e + self.bias);
            let dz = if y == 1 {
                // d/dz of -ln σ(z), ignoring the clamp which only bites at saturation.
                -(1.0 - c1)
            } else {
                c1 / m
            };
            gw += dz * e;
            gb += dz;
        }
        (gw, gb)
    }

    /// Steps of size `lr·∇L/|T|` per epoch. Aborts when the loss rises five epochs running.
    pub fn fit(&mut self, data: &[(f64, u8)], config: &FinetuneConfig) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Empty("no training instances".into()));
        }
        let n = data.len() as f64;
        let mut losses = vec![self.loss(data, config.m)? / n];
        let mut rising = 0;
        for epoch in 0..config.epochs {
            let (gw, gb) = self.gradient(data, config.m);
            self.weight -= config.learning_rate * gw / n;
            self.bias -= config.learning_rate * gb / n;
            let current = self.loss(data, config.m)? / n;
            if current > *losses.last().unwrap() {
                rising += 1;
                if rising >= 5 {
                    return Err(Error::Divergence(format!(
                        "loss rose five epochs in a row, epoch {epoch}, loss {current}, lr {}",
                        config.learning_rate
                    )));
                }
            } else {
                rising = 0;
            }
            losses.push(current);
        }
        Ok(losses)
    }
}

/// Sentence-level token occurrence in the reliable corpus.
#[derive(Debug, Clone, Default)]
pub struct Cooccurrence {
    num_sentences: usize,
    postings: BTreeMap<String, Vec<u32>>,
}

impl Cooccurrence {
    pub fn from_corpus(corpus: &CorpusStore) -> Self {
        let mut postings: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        let mut n = 0u32;
        for s in corpus.sentences().iter().filter(|s| s.source == Source::Reliable) {
            let words: BTreeSet<&str> = s.tokens.iter().flat_map(|t| unfuse(t)).collect();
            for w in words {
                postings.entry(w.to_string()).or_default().push(n);
            }
            n += 1;
        }
        Self {
            num_sentences: n as usize,
            postings,
        }
    }

    pub fn count(&self, token: &str) -> usize {
        self.postings.get(token).map_or(0, Vec::len)
    }

    pub fn joint(&self, a: &str, b: &str) -> usize {
        let (Some(x), Some(y)) = (self.postings.get(a), self.postings.get(b)) else {
            return 0;
        };
        let (mut i, mut j, mut c) = (0, 0, 0);
        while i < x.len() && j < y.len() {
            match x[i].cmp(&y[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    c += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        c
    }

    /// `max(0, ln(P(a,b) / (P(a)·P(b))))`; zero for unseen tokens.
    pub fn ppmi(&self, a: &str, b: &str) -> f64 {
        let joint = self.joint(a, b);
        if joint == 0 {
            return 0.0;
        }
        let n = self.num_sentences as f64;
        let pmi = (joint as f64 * n / (self.count(a) as f64 * self.count(b) as f64)).ln();
        pmi.max(0.0)
    }
}

/// How token-pair PPMI values are pooled into one evidence value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One mean over every (context, candidate) token pair.
    Mean,
    /// Mean within each context group (subject, support, prompt), summed over groups.
    #[default]
    GroupSum,
}

/// Context tokens of an instance, split by where they came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextGroups {
    pub subject: Vec<String>,
    pub support: Vec<String>,
    pub prompt: Vec<String>,
}

fn content_words(text: &str) -> Vec<String> {
    let all = text::tokenize(text);
    let content: Vec<String> = all.iter().filter(|w| !is_stopword(w)).cloned().collect();
    if content.is_empty() {
        all
    } else {
        content
    }
}

fn dedup(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v.dedup();
    v
}

impl ContextGroups {
    /// The support group leaves out the subject's own tokens.
    pub fn of(instance: &ClozeInstance) -> Self {
        let subject = dedup(content_words(&instance.subject_label));
        let support = instance
            .support
            .as_deref()
            .map(|s| {
                dedup(text::content_tokens(s))
                    .into_iter()
                    .filter(|w| subject.binary_search(w).is_err())
                    .collect()
            })
            .unwrap_or_default();
        let prompt = dedup(instance.prompt.content_words().into_iter().map(str::to_string).collect());
        Self { subject, support, prompt }
    }
}

/// Deterministic stand-in for a masked language model. A candidate's evidence
/// is its label's PPMI with the instance context. A token is evidence for
/// itself only when it comes from the support passage.
#[derive(Debug, Clone)]
pub struct ReferenceScorer {
    stats: std::sync::Arc<Cooccurrence>,
    pub head: LogisticHead,
    pub aggregation: Aggregation,
    version: u64,
}

impl ReferenceScorer {
    pub fn new(stats: Cooccurrence, aggregation: Aggregation) -> Self {
        Self {
            stats: std::sync::Arc::new(stats),
            head: LogisticHead::default(),
            aggregation,
            version: 0,
        }
    }

    pub fn stats(&self) -> &Cooccurrence {
        &self.stats
    }

    fn pair_mean(&self, group: &[String], candidate: &[String], identity: bool) -> Option<f64> {
        if group.is_empty() || candidate.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for c in group {
            for l in candidate {
                if c != l || identity {
                    sum += self.stats.ppmi(c, l);
                }
            }
        }
        Some(sum / (group.len() * candidate.len()) as f64)
    }

    pub fn evidence(&self, groups: &ContextGroups, candidate_label: &str) -> f64 {
        let candidate = dedup(content_words(candidate_label));
        match self.aggregation {
            Aggregation::GroupSum => [
                self.pair_mean(&groups.subject, &candidate, false),
                self.pair_mean(&groups.support, &candidate, true),
                self.pair_mean(&groups.prompt, &candidate, false),
            ]
            .into_iter()
            .flatten()
            .sum(),
            Aggregation::Mean => {
                let (mut sum, mut n) = (0.0, 0usize);
                for (group, identity) in [(&groups.subject, false), (&groups.support, true), (&groups.prompt, false)] {
                    for c in group {
                        for l in &candidate {
                            if c != l || identity {
                                sum += self.stats.ppmi(c, l);
                            }
                            n += 1;
                        }
                    }
                }
                if n == 0 {
                    0.0
                } else {
                    sum / n as f64
                }
            }
        }
    }

    pub fn instance_evidence(&self, instance: &ClozeInstance) -> std::result::Result<f64, ScorerError> {
        let label = instance
            .object_label()
            .ok_or_else(|| ScorerError::Request("classify needs a filled instance".into()))?;
        Ok(self.evidence(&ContextGroups::of(instance), label))
    }
}

/// Softmax over candidate evidence, temperature 1.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

impl Scorer for ReferenceScorer {
    fn score_cloze(&self, instance: &ClozeInstance, candidates: &[String]) -> std::result::Result<Vec<f64>, ScorerError> {
        if !instance.is_masked() {
            return Err(ScorerError::Request("score_cloze needs a masked instance".into()));
        }
        if candidates.is_empty() {
            return Err(ScorerError::Request("no candidates".into()));
        }
        let groups = ContextGroups::of(instance);
        let evidence: Vec<f64> = candidates.iter().map(|c| self.evidence(&groups, c)).collect();
        Ok(softmax(&evidence))
    }

    fn classify(&self, instance: &ClozeInstance) -> std::result::Result<ClassificationScore, ScorerError> {
        Ok(self.head.score(self.instance_evidence(instance)?))
    }

    fn finetune(&mut self, instances: &[ClozeInstance], config: &FinetuneConfig) -> Result<FinetuneReport> {
        let data = instances
            .iter()
            .map(|i| {
                let y = i.label.ok_or_else(|| Error::Invalid("training instance without a label".into()))?;
                Ok((self.instance_evidence(i)?, y))
            })
            .collect::<Result<Vec<_>>>()?;
        let losses = self.head.fit(&data, config)?;
        self.version += 1;
        Ok(FinetuneReport {
            model_version: format!("reference-{}", self.version),
            losses,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::kg::Direction;
    use crate::prompt::Prompt;
    use crate::retriever::ClozeMode;
    use proptest::prelude::*;

    fn corpus(texts: &[&str]) -> CorpusStore {
        CorpusStore::from_documents(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document {
                    doc_id: format!("r{i:03}"),
                    text: t.to_string(),
                    source: Source::Reliable,
                })
                .collect(),
        )
        .unwrap()
    }

    fn masked(subject: &str, support: Option<&str>, template: &str) -> ClozeInstance {
        ClozeInstance {
            mode: ClozeMode::Infer,
            direction: Direction::Tail,
            relation: "r".into(),
            subject: "s".into(),
            subject_label: subject.into(),
            object: None,
            support: support.map(str::to_string),
            prompt_index: 0,
            prompt: Prompt::parse("r", template),
            label: None,
        }
    }

    #[test]
    fn loss_hand_examples() {
        let pos = ClassificationScore::from_c1(0.8);
        let neg = ClassificationScore { c0: 0.6, c1: 0.4 };
        let l = loss(&[(pos, 1), (neg, 0)], 30.0).unwrap();
        assert!((l.value - (-(0.8f64).ln() - (0.6f64).ln() / 30.0)).abs() < 1e-15);
        assert!((l.value - 0.2401).abs() < 1e-4);
        assert_eq!(loss(&[(ClassificationScore::from_c1(1.0), 1)], 30.0).unwrap().value, 0.0);
        let e = ClassificationScore { c0: (-1.0f64).exp(), c1: 1.0 - (-1.0f64).exp() };
        assert!((loss(&[(e, 0)], 1.0).unwrap().value - 1.0).abs() < 1e-15);
        let zero = loss(&[(ClassificationScore::from_c1(0.0), 1)], 30.0).unwrap();
        assert!(zero.clamped);
        assert!((zero.value + LOG_EPSILON.ln()).abs() < 1e-9);
        assert!(loss(&[], 30.0).is_err());
    }

    #[test]
    fn untrained_head_is_one_half() {
        let s = LogisticHead::default().score(3.7);
        assert_eq!(s.c1, 0.5);
        assert_eq!(s.c0 + s.c1, 1.0);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut head = LogisticHead { weight: 0.3, bias: -0.1 };
        let config = FinetuneConfig { epochs: 7, learning_rate: 0.0, m: 30.0 };
        head.fit(&[(1.0, 1), (0.0, 0)], &config).unwrap();
        assert_eq!(head, LogisticHead { weight: 0.3, bias: -0.1 });
    }

    #[test]
    fn separable_fixture_reaches_high_c1() {
        let data: Vec<(f64, u8)> = (0..10)
            .map(|i| (3.0 + i as f64 * 0.1, 1))
            .chain((0..10).map(|i| (i as f64 * 0.1, 0)))
            .collect();
        // Brute-force grid: some (w, b) separates the fixture with margin.
        let separable = (0..100).any(|wi| {
            (0..100).any(|bi| {
                let (w, b) = (wi as f64 * 0.1, -(bi as f64) * 0.1);
                data.iter().all(|&(e, y)| (sigmoid(w * e + b) > 0.9) == (y == 1))
            })
        });
        assert!(separable);
        let mut head = LogisticHead::default();
        let losses = head.fit(&data, &FinetuneConfig { epochs: 3000, learning_rate: 2.0, m: 1.0 }).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        for &(e, y) in &data {
            if y == 1 {
                assert!(head.score(e).c1 > 0.9, "{e} -> {}", head.score(e).c1);
            }
        }
    }

    #[test]
    fn divergence_aborts() {
        let mut head = LogisticHead::default();
        let data = [(1.0, 1), (0.0, 0)];
        let config = FinetuneConfig { epochs: 200, learning_rate: -1.0, m: 1.0 };
        assert!(matches!(head.fit(&data, &config), Err(Error::Divergence(_))));
    }

    #[test]
    fn cooccurring_candidate_wins() {
        let mut texts = vec!["alba lies in piedmont."; 5];
        texts.extend(["texas is far.", "texas has ranches.", "rome is old.", "wine is red."]);
        let c = corpus(&texts);
        let scorer = ReferenceScorer::new(Cooccurrence::from_corpus(&c), Aggregation::GroupSum);
        let inst = masked("alba", None, "[X] is_in [Y]");
        let cands = vec!["piedmont".to_string(), "texas".to_string(), "nowhere".to_string()];
        let p = scorer.score_cloze(&inst, &cands).unwrap();
        // By hand: N = 9, alba/piedmont each in 5 sentences, jointly 5 -> ln(9/5).
        // Prompt group has no content word in common with the candidates.
        let e = (9.0f64 / 5.0).ln();
        let z = e.exp() + 2.0;
        assert!((p[0] - e.exp() / z).abs() < 1e-12);
        assert!((p[1] - 1.0 / z).abs() < 1e-12);
        assert_eq!(p[1], p[2]);
        assert!(p[0] > p[1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(scorer.score_cloze(&inst, &cands[..1]).unwrap(), vec![1.0]);
    }

    #[test]
    fn support_can_name_the_answer() {
        let c = corpus(&["alba lies in piedmont.", "alba visited texas.", "texas borders mexico.", "piedmont has hills."]);
        let scorer = ReferenceScorer::new(Cooccurrence::from_corpus(&c), Aggregation::GroupSum);
        let cands = vec!["piedmont".to_string(), "texas".to_string()];
        let without = scorer.score_cloze(&masked("alba", None, "[X] lies_in [Y]"), &cands).unwrap();
        let with = scorer
            .score_cloze(&masked("alba", Some("alba lies in piedmont"), "[X] lies_in [Y]"), &cands)
            .unwrap();
        assert!(with[0] > without[0]);
        // Subject tokens never count for themselves.
        let groups = ContextGroups::of(&masked("alba", Some("alba lies in piedmont"), "[X] in [Y]"));
        assert_eq!(groups.support, vec!["lies", "piedmont"]);
    }

    proptest! {
        #[test]
        fn head_gradient_matches_finite_differences(
            w in -2.0f64..2.0,
            b in -2.0f64..2.0,
            data in prop::collection::vec((0.0f64..4.0, 0u8..2), 1..40),
            m in 1.0f64..40.0,
        ) {
            let head = LogisticHead { weight: w, bias: b };
            let (gw, gb) = head.gradient(&data, m);
            let h = 1e-5;
            let f = |w: f64, b: f64| LogisticHead { weight: w, bias: b }.loss(&data, m).unwrap();
            let nw = (f(w + h, b) - f(w - h, b)) / (2.0 * h);
            let nb = (f(w, b + h) - f(w, b - h)) / (2.0 * h);
            prop_assert!((gw - nw).abs() <= 1e-6 * gw.abs().max(nw.abs()).max(1.0));
            prop_assert!((gb - nb).abs() <= 1e-6 * gb.abs().max(nb.abs()).max(1.0));
        }

        #[test]
        fn loss_is_nonnegative(rows in prop::collection::vec((0.0f64..=1.0, 0u8..2), 1..30), m in 1.0f64..50.0) {
            let batch: Vec<_> = rows.iter().map(|&(c1, y)| (ClassificationScore::from_c1(c1), y)).collect();
            prop_assert!(loss(&batch, m).unwrap().value >= 0.0);
        }

        #[test]
        fn cloze_distribution_sums_to_one(n in 1usize..12) {
            let c = corpus(&["alba lies in piedmont.", "texas is far.", "rome is old."]);
            let scorer = ReferenceScorer::new(Cooccurrence::from_corpus(&c), Aggregation::Mean);
            let cands: Vec<String> = ["piedmont", "texas", "rome", "x", "alba", "old"].iter().cycle().take(n).map(|s| s.to_string()).collect();
            let p = scorer.score_cloze(&masked("alba", Some("rome is old"), "[X] in [Y]"), &cands).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }
    }
}
