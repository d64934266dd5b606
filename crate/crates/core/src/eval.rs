//! Re-ranking recalled entities with the classifier and computing Hits@N / MRR.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Direction, Query, Triple};
use crate::retriever::{make_cloze, ClozeTarget};
use crate::scorer::Scorer;
use crate::selector::PromptEnsemble;

/// `m × n` classification scores: one row per prompt, one column per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub candidates: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Plain sum over prompts.
    Uniform,
    /// Sum of `w_j · score`.
    #[default]
    Weighted,
}

impl ScoreMatrix {
    pub fn aggregate(&self, weights: &[f64], mode: EnsembleMode) -> Vec<f64> {
        let mut out = vec![0.0; self.candidates.len()];
        for (row, w) in self.cells.iter().zip(weights) {
            for (o, s) in out.iter_mut().zip(row) {
                *o += match mode {
                    EnsembleMode::Uniform => *s,
                    EnsembleMode::Weighted => w * s,
                };
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub query: Query,
    pub ranking: Vec<String>,
    pub scores: Vec<f64>,
}

impl RankedPrediction {
    /// Descending score, ties by entity id.
    pub fn from_scores(query: Query, candidates: &[String], scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| candidates[a].cmp(&candidates[b])));
        Self {
            query,
            ranking: order.iter().map(|&i| candidates[i].clone()).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        }
    }

    /// 1-based rank of `entity`, if present.
    pub fn rank_of(&self, entity: &str) -> Option<usize> {
        self.ranking.iter().position(|e| e == entity).map(|i| i + 1)
    }
}

/// Classify every (prompt, candidate) pair and rank by the aggregate.
/// Any scorer failure aborts the whole query.
pub fn predict<F>(
    query: &Query,
    ensemble: &PromptEnsemble,
    scorer: &dyn Scorer,
    recall: &[String],
    support: Option<&str>,
    mode: EnsembleMode,
    label_of: F,
) -> Result<(RankedPrediction, ScoreMatrix)>
where
    F: Fn(&str) -> String,
{
    if recall.is_empty() {
        return Err(Error::Invalid(format!("empty recall list for {query:?}")));
    }
    ensemble.validate()?;
    let masked = make_cloze(ClozeTarget::Query(query), &ensemble.prompts, support, &label_of);
    let mut cells = Vec::with_capacity(masked.len());
    for inst in &masked {
        let filled: Vec<_> = recall.iter().map(|e| inst.filled_with(e, &label_of(e))).collect();
        let row = scorer.classify_batch(&filled)?;
        cells.push(row.into_iter().map(|s| s.c1).collect());
    }
    let matrix = ScoreMatrix {
        candidates: recall.to_vec(),
        cells,
    };
    let scores = matrix.aggregate(&ensemble.weights, mode);
    Ok((RankedPrediction::from_scores(query.clone(), recall, &scores), matrix))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "hits@5")]
    pub hits5: f64,
    #[serde(rename = "hits@10")]
    pub hits10: f64,
    pub mrr: f64,
    pub q: usize,
    pub missing_gold: usize,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Hits@N over 1-based ranks; `None` is a miss.
pub fn hits_at(ranks: &[Option<usize>], n: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|r| r.is_some_and(|r| r <= n)).count() as f64 / ranks.len() as f64
}

/// Mean reciprocal rank; a missing gold contributes 0.
pub fn mrr(ranks: &[Option<usize>]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>() / ranks.len() as f64
}

pub fn report_from_ranks(ranks: &[Option<usize>]) -> EvalReport {
    EvalReport {
        hits5: hits_at(ranks, 5),
        hits10: hits_at(ranks, 10),
        mrr: mrr(ranks),
        q: ranks.len(),
        missing_gold: ranks.iter().filter(|r| r.is_none()).count(),
        config: serde_json::Value::Null,
    }
}

/// Unfiltered evaluation of `(prediction, gold)` pairs. Other correct answers
/// stay in the ranking. The same query may appear with different golds, but
/// a repeated `(query, gold)` pair is an error.
pub fn evaluate(items: &[(RankedPrediction, String)]) -> Result<(EvalReport, Vec<Option<usize>>)> {
    let mut seen = BTreeSet::new();
    for (p, gold) in items {
        if !seen.insert((&p.query, gold)) {
            return Err(Error::Invalid(format!("duplicate query {:?} with gold {gold}", p.query)));
        }
    }
    let ranks: Vec<Option<usize>> = items.iter().map(|(p, g)| p.rank_of(g)).collect();
    Ok((report_from_ranks(&ranks), ranks))
}

/// Group test triples into distinct queries and their gold answers, both directions.
pub fn queries_for(triples: &[Triple]) -> BTreeMap<Query, Vec<String>> {
    let mut out: BTreeMap<Query, Vec<String>> = BTreeMap::new();
    for t in triples {
        for (q, gold) in Query::from_triple(t) {
            out.entry(q).or_default().push(gold);
        }
    }
    for golds in out.values_mut() {
        golds.sort();
        golds.dedup();
    }
    out
}

pub fn f1_score(predicted: &[u8], gold: &[u8]) -> f64 {
    let tp = predicted.iter().zip(gold).filter(|(p, g)| **p == 1 && **g == 1).count() as f64;
    let fp = predicted.iter().zip(gold).filter(|(p, g)| **p == 1 && **g == 0).count() as f64;
    let fna = predicted.iter().zip(gold).filter(|(p, g)| **p == 0 && **g == 1).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fna);
    2.0 * precision * recall / (precision + recall)
}

/// Positive iff the weighted mean `c1` over the ensemble exceeds `threshold`.
pub fn classify_triples<F, S>(
    triples: &[(Triple, u8)],
    ensemble: &PromptEnsemble,
    scorer: &dyn Scorer,
    threshold: f64,
    support_for: S,
    label_of: F,
) -> Result<(Vec<u8>, f64)>
where
    F: Fn(&str) -> String,
    S: Fn(&Triple) -> Option<String>,
{
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config("classify.threshold", "must lie in (0, 1)"));
    }
    let mut predicted = Vec::with_capacity(triples.len());
    for (t, y) in triples {
        let support = support_for(t);
        let inst = make_cloze(
            ClozeTarget::Triple { triple: t, direction: Direction::Tail, label: *y },
            &ensemble.prompts,
            support.as_deref(),
            &label_of,
        );
        let scores = scorer.classify_batch(&inst)?;
        let mean: f64 = scores.iter().zip(&ensemble.weights).map(|(s, w)| w * s.c1).sum();
        predicted.push(u8::from(mean > threshold));
    }
    let gold: Vec<u8> = triples.iter().map(|(_, y)| *y).collect();
    let f1 = f1_score(&predicted, &gold);
    Ok((predicted, f1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct formula evaluation, written independently of the module.
    fn oracle(ranks: &[Option<usize>], n: usize) -> (f64, f64) {
        let q = ranks.len() as f64;
        let mut hits = 0.0;
        let mut rr = 0.0;
        for r in ranks {
            if let Some(r) = r {
                if *r <= n {
                    hits += 1.0;
                }
                rr += 1.0 / (*r as f64);
            }
        }
        (hits / q, rr / q)
    }

    #[test]
    fn hand_ranks() {
        let ranks = [Some(1), Some(3), Some(12)];
        assert!((hits_at(&ranks, 10) - 2.0 / 3.0).abs() < 1e-12);
        assert!((mrr(&ranks) - (1.0 + 1.0 / 3.0 + 1.0 / 12.0) / 3.0).abs() < 1e-12);
        assert!((mrr(&ranks) - 0.4722).abs() < 1e-4);
        let all_first = [Some(1); 4];
        assert_eq!((hits_at(&all_first, 5), hits_at(&all_first, 10), mrr(&all_first)), (1.0, 1.0, 1.0));
        let missing = [None, None];
        assert_eq!((hits_at(&missing, 10), mrr(&missing)), (0.0, 0.0));
    }

    #[test]
    fn weighted_two_by_three() {
        let m = ScoreMatrix {
            candidates: vec!["a".into(), "b".into(), "c".into()],
            cells: vec![vec![0.9, 0.2, 0.5], vec![0.1, 0.9, 0.6]],
        };
        // By hand: a 0.66, b 0.41, c 0.53.
        let agg = m.aggregate(&[0.7, 0.3], EnsembleMode::Weighted);
        let p = RankedPrediction::from_scores(Query::tail("s", "r"), &m.candidates, &agg);
        assert_eq!(p.ranking, vec!["a", "c", "b"]);
        let uniform = m.aggregate(&[0.5, 0.5], EnsembleMode::Weighted);
        let sum = m.aggregate(&[0.5, 0.5], EnsembleMode::Uniform);
        let a = RankedPrediction::from_scores(Query::tail("s", "r"), &m.candidates, &uniform);
        let b = RankedPrediction::from_scores(Query::tail("s", "r"), &m.candidates, &sum);
        assert_eq!(a.ranking, b.ranking);
    }

    #[test]
    fn duplicates_rejected() {
        let p = RankedPrediction::from_scores(Query::tail("s", "r"), &["a".to_string()], &[1.0]);
        assert!(evaluate(&[(p.clone(), "a".into()), (p.clone(), "a".into())]).is_err());
        let (r, _) = evaluate(&[(p.clone(), "a".into()), (p, "b".into())]).unwrap();
        assert_eq!((r.q, r.missing_gold), (2, 1));
    }

    #[test]
    fn ten_triple_f1() {
        let pred = [1, 1, 1, 0, 0, 1, 0, 0, 1, 0];
        let gold = [1, 0, 1, 1, 0, 1, 0, 1, 0, 0];
        // tp 3, fp 2, fn 2: p = 0.6, r = 0.6.
        assert!((f1_score(&pred, &gold) - 0.6).abs() < 1e-12);
        assert_eq!(f1_score(&gold, &gold), 1.0);
        assert_eq!(f1_score(&[0; 10], &gold), 0.0);
    }

    #[test]
    fn report_json_keys() {
        let r = report_from_ranks(&[Some(1)]);
        let v = serde_json::to_value(&r).unwrap();
        for k in ["hits@5", "hits@10", "mrr", "q", "missing_gold", "config"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    proptest! {
        #[test]
        fn metrics_match_oracle(ranks in prop::collection::vec(proptest::option::of(1usize..40), 1..50)) {
            for n in [1, 5, 10] {
                let (h, m) = oracle(&ranks, n);
                prop_assert_eq!(hits_at(&ranks, n), h);
                prop_assert_eq!(mrr(&ranks), m);
            }
            prop_assert!(hits_at(&ranks, 5) <= hits_at(&ranks, 10));
            prop_assert!(mrr(&ranks) >= hits_at(&ranks, 10) / 10.0 - 1e-12);
        }

        #[test]
        fn ranking_invariant_under_positive_affine(scores in prop::collection::vec(-5.0f64..5.0, 1..12), a in 0.01f64..10.0, b in -3.0f64..3.0) {
            let cands: Vec<String> = (0..scores.len()).map(|i| format!("e{i:02}")).collect();
            let q = Query::tail("s", "r");
            let base = RankedPrediction::from_scores(q.clone(), &cands, &scores);
            let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let other = RankedPrediction::from_scores(q, &cands, &moved);
            // Affine maps can merge near-equal floats; compare only when order is strict.
            let strict = base.scores.windows(2).all(|w| w[0] - w[1] > 1e-9);
            if strict {
                prop_assert_eq!(base.ranking, other.ranking);
            }
        }

        #[test]
        fn evaluate_is_permutation_invariant(golds in prop::collection::vec(0usize..6, 1..10), rot in 0usize..10) {
            let cands: Vec<String> = (0..5).map(|i| format!("e{i}")).collect();
            let items: Vec<(RankedPrediction, String)> = golds.iter().enumerate().map(|(i, g)| {
                let scores: Vec<f64> = (0..5).map(|k| ((k * 7 + i * 3) % 5) as f64).collect();
                (RankedPrediction::from_scores(Query::tail(format!("s{i}"), "r"), &cands, &scores), format!("e{g}"))
            }).collect();
            let mut rotated = items.clone();
            rotated.rotate_left(rot % items.len());
            let (a, _) = evaluate(&items).unwrap();
            let (b, _) = evaluate(&rotated).unwrap();
            prop_assert!((a.hits10 - b.hits10).abs() < 1e-12 && (a.mrr - b.mrr).abs() < 1e-12);
        }
    }
}
