//! TransE reference model, corrupted-triple negatives and recall lists.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{Direction, Query, Triple};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgeConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for KgeConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 300,
            learning_rate: 0.01,
            margin: 1.0,
            seed: 55,
        }
    }
}

/// Knowledge-graph embedding scorer: higher means more plausible.
pub trait Kge: Sync {
    fn entities(&self) -> &[String];
    fn score(&self, head: &str, relation: &str, tail: &str) -> Option<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransE {
    entities: Vec<String>,
    entity_index: BTreeMap<String, usize>,
    relation_index: BTreeMap<String, usize>,
    dim: usize,
    entity_vecs: Vec<f64>,
    relation_vecs: Vec<f64>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl TransE {
    /// Margin ranking loss with one uniform corruption per positive per epoch.
    /// `entities` is the candidate universe; it must cover the training triples.
    pub fn train(train: &[Triple], entities: &[String], config: &KgeConfig) -> Result<Self> {
        if config.dim < 1 {
            return Err(Error::config("kge.dim", "must be ≥ 1"));
        }
        if train.is_empty() {
            return Err(Error::Empty("no training triples for the KGE model".into()));
        }
        let mut entities: Vec<String> = entities.to_vec();
        entities.sort();
        entities.dedup();
        let entity_index: BTreeMap<String, usize> = entities.iter().cloned().enumerate().map(|(i, e)| (e, i)).collect();
        let mut relations: Vec<&str> = train.iter().map(|t| t.relation.as_str()).collect();
        relations.sort();
        relations.dedup();
        let relation_index: BTreeMap<String, usize> =
            relations.iter().enumerate().map(|(i, r)| (r.to_string(), i)).collect();

        let d = config.dim;
        let bound = 6.0 / (d as f64).sqrt();
        let mut rng = SplitMix64::derived(config.seed, "kge-init");
        let mut entity_vecs: Vec<f64> = (0..entities.len() * d).map(|_| rng.uniform(-bound, bound)).collect();
        let mut relation_vecs: Vec<f64> = (0..relations.len() * d).map(|_| rng.uniform(-bound, bound)).collect();
        for chunk in entity_vecs.chunks_mut(d).chain(relation_vecs.chunks_mut(d)) {
            normalize(chunk);
        }

        let mut encoded = Vec::with_capacity(train.len());
        for t in train {
            let h = *entity_index
                .get(&t.head)
                .ok_or_else(|| Error::NotFound { kind: "entity", key: t.head.clone() })?;
            let tl = *entity_index
                .get(&t.tail)
                .ok_or_else(|| Error::NotFound { kind: "entity", key: t.tail.clone() })?;
            encoded.push((h, relation_index[&t.relation], tl));
        }
        encoded.sort();

        let mut model = Self {
            entities,
            entity_index,
            relation_index,
            dim: d,
            entity_vecs,
            relation_vecs,
        };
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        let mut rng = SplitMix64::derived(config.seed, "kge-train");
        let n_ent = model.entities.len();
        for _ in 0..config.epochs {
            rng.shuffle(&mut order);
            for &i in &order {
                let (h, r, t) = encoded[i];
                let corrupt_head = rng.next_u64() & 1 == 1;
                let e = rng.below(n_ent);
                let (h2, t2) = if corrupt_head { (e, t) } else { (h, e) };
                if (h2, t2) == (h, t) {
                    continue;
                }
                model.sgd_step((h, r, t), (h2, r, t2), config);
            }
        }
        Ok(model)
    }

    fn residual(&self, h: usize, r: usize, t: usize) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|k| self.entity_vecs[h * d + k] + self.relation_vecs[r * d + k] - self.entity_vecs[t * d + k])
            .collect()
    }

    fn sgd_step(&mut self, pos: (usize, usize, usize), neg: (usize, usize, usize), config: &KgeConfig) {
        let rp = self.residual(pos.0, pos.1, pos.2);
        let rn = self.residual(neg.0, neg.1, neg.2);
        let dp = rp.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dn = rn.iter().map(|x| x * x).sum::<f64>().sqrt();
        if config.margin + dp - dn <= 0.0 {
            return;
        }
        let d = self.dim;
        let lr = config.learning_rate;
        for k in 0..d {
            let gp = if dp > 0.0 { rp[k] / dp } else { 0.0 };
            let gn = if dn > 0.0 { rn[k] / dn } else { 0.0 };
            self.entity_vecs[pos.0 * d + k] -= lr * gp;
            self.entity_vecs[pos.2 * d + k] += lr * gp;
            self.relation_vecs[pos.1 * d + k] -= lr * (gp - gn);
            self.entity_vecs[neg.0 * d + k] += lr * gn;
            self.entity_vecs[neg.2 * d + k] -= lr * gn;
        }
        for e in [pos.0, pos.2, neg.0, neg.2] {
            normalize(&mut self.entity_vecs[e * d..(e + 1) * d]);
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for x in self.entity_vecs.iter().chain(&self.relation_vecs) {
            h.update(x.to_bits().to_le_bytes());
        }
        crate::checksum::hex(&h.finalize())
    }
}

impl Kge for TransE {
    fn entities(&self) -> &[String] {
        &self.entities
    }

    /// `-‖h + r - t‖`.
    fn score(&self, head: &str, relation: &str, tail: &str) -> Option<f64> {
        let h = *self.entity_index.get(head)?;
        let t = *self.entity_index.get(tail)?;
        let r = *self.relation_index.get(relation)?;
        Some(-self.residual(h, r, t).iter().map(|x| x * x).sum::<f64>().sqrt())
    }
}

/// Every entity completing the query, best first, ties by id.
pub fn rank_all(model: &dyn Kge, query: &Query) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = model
        .entities()
        .iter()
        .map(|e| {
            let t = query.complete(e);
            (e.clone(), model.score(&t.head, &t.relation, &t.tail).unwrap_or(f64::NEG_INFINITY))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Top-`x` entities for the query.
pub fn recall(model: &dyn Kge, query: &Query, x: usize) -> Vec<String> {
    rank_all(model, query).into_iter().take(x).map(|(e, _)| e).collect()
}

/// Debug mode: put `gold` in place of the last entry when it is missing.
pub fn inject_gold(mut list: Vec<String>, gold: &str) -> Vec<String> {
    if !list.iter().any(|e| e == gold) {
        if let Some(last) = list.last_mut() {
            *last = gold.to_string();
        } else {
            list.push(gold.to_string());
        }
    }
    list
}

/// Recall sizes by benchmark family and training fraction.
pub fn default_recall_size(dataset: &str, train_fraction: f64) -> Option<usize> {
    let table: &[(f64, usize)] = match dataset {
        "fb60k" => &[(0.2, 70), (0.5, 40), (1.0, 20)],
        "umls" => &[(0.2, 50), (0.4, 50), (0.7, 30), (1.0, 30)],
        _ => return None,
    };
    table.iter().find(|(f, _)| (f - train_fraction).abs() < 1e-9).map(|&(_, x)| x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    Kge,
    Rand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Negative {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub label: u8,
    pub source: NegativeSource,
}

impl Negative {
    pub fn triple(&self) -> Triple {
        Triple::new(&self.head, &self.relation, &self.tail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub positives: Vec<Triple>,
    /// Negatives grouped per positive, in positive order.
    pub negatives: Vec<Negative>,
    pub m_ratio: usize,
    pub kge_count: usize,
    pub rand_count: usize,
}

/// Negatives for each positive: `⌈kge_fraction·m⌉` best-scored corruptions
/// alternating tail and head, then uniform random ones. None is a known triple.
pub fn gen_negatives(
    model: &dyn Kge,
    positives: &[Triple],
    known: &HashSet<Triple>,
    m_ratio: usize,
    kge_fraction: f64,
    seed: u64,
) -> Result<TrainingSet> {
    if m_ratio < 1 {
        return Err(Error::config("negatives.m_ratio", "must be ≥ 1"));
    }
    if !(0.0..=1.0).contains(&kge_fraction) {
        return Err(Error::config("negatives.kge_fraction", "must lie in [0, 1]"));
    }
    let n_kge = (kge_fraction * m_ratio as f64).ceil() as usize;
    let per_positive: Vec<Vec<Negative>> = positives
        .par_iter()
        .map(|p| negatives_for(model, p, known, m_ratio, n_kge, seed))
        .collect::<Result<_>>()?;
    let negatives: Vec<Negative> = per_positive.into_iter().flatten().collect();
    let kge_count = negatives.iter().filter(|n| n.source == NegativeSource::Kge).count();
    Ok(TrainingSet {
        positives: positives.to_vec(),
        rand_count: negatives.len() - kge_count,
        kge_count,
        negatives,
        m_ratio,
    })
}

fn negatives_for(
    model: &dyn Kge,
    positive: &Triple,
    known: &HashSet<Triple>,
    m: usize,
    n_kge: usize,
    seed: u64,
) -> Result<Vec<Negative>> {
    let usable = |t: &Triple| !known.contains(t) && t != positive;
    let tails: Vec<Triple> = rank_all(model, &Query::tail(&positive.head, &positive.relation))
        .into_iter()
        .map(|(e, _)| Triple::new(&positive.head, &positive.relation, e))
        .filter(usable)
        .collect();
    let heads: Vec<Triple> = rank_all(model, &Query::head(&positive.tail, &positive.relation))
        .into_iter()
        .map(|(e, _)| Triple::new(e, &positive.relation, &positive.tail))
        .filter(usable)
        .collect();
    let mut pool: Vec<Triple> = tails.iter().chain(&heads).cloned().collect();
    pool.sort();
    pool.dedup();
    if pool.len() < m {
        return Err(Error::NegativePool {
            triple: positive.to_string(),
            needed: m,
            available: pool.len(),
        });
    }

    let mut chosen: HashSet<Triple> = HashSet::new();
    let mut out = Vec::with_capacity(m);
    let (mut ti, mut hi) = (0, 0);
    let mut side = Direction::Tail;
    while out.len() < n_kge.min(m) {
        let next = match side {
            Direction::Tail if ti < tails.len() => {
                ti += 1;
                Some(&tails[ti - 1])
            }
            Direction::Head if hi < heads.len() => {
                hi += 1;
                Some(&heads[hi - 1])
            }
            _ if ti >= tails.len() && hi >= heads.len() => break,
            _ => None,
        };
        side = match side {
            Direction::Tail => Direction::Head,
            Direction::Head => Direction::Tail,
        };
        if let Some(t) = next {
            if chosen.insert(t.clone()) {
                out.push(t.clone());
            }
        }
    }
    let n_kge_taken = out.len();
    let mut rest: Vec<Triple> = pool.into_iter().filter(|t| !chosen.contains(t)).collect();
    let mut rng = SplitMix64::derived(seed, &positive.to_tsv());
    while out.len() < m {
        let i = rng.below(rest.len());
        out.push(rest.swap_remove(i));
    }
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, t)| Negative {
            head: t.head,
            relation: t.relation,
            tail: t.tail,
            label: 0,
            source: if i < n_kge_taken { NegativeSource::Kge } else { NegativeSource::Rand },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRecord {
    pub query: Query,
    pub entities: Vec<String>,
}
