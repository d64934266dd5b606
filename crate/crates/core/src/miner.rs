//! Placeholder-anchored pattern mining with FP-Growth.
//!
//! Each rewritten sentence yields one transaction per placeholder. Items are
//! `(offset from the placeholder, token)` pairs inside the window, so an
//! itemset is a positioned token set around the anchor. FP-Growth enumerates
//! every frequent itemset whose offset span fits the window; the contiguous
//! ones are exactly the contiguous templates containing that placeholder.
//! Because a rewritten sentence holds one `[X]` and one `[Y]`, the itemset
//! support equals the number of sentences containing the template.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phrase::AnnotatedSubCorpus;
use crate::text::{OBJECT_SLOT, SUBJECT_SLOT};

pub const DEFAULT_MIN_SUPPORT: usize = 3;
pub const DEFAULT_MAX_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub template: Vec<String>,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub relation: String,
    /// Sorted by support descending, then template.
    pub candidates: Vec<Candidate>,
}

/// One line of the candidate dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub relation: String,
    pub template: Vec<String>,
    pub support: usize,
}

impl CandidateSet {
    pub fn rows(&self) -> Vec<CandidateRow> {
        self.candidates
            .iter()
            .map(|c| CandidateRow {
                relation: self.relation.clone(),
                template: c.template.clone(),
                support: c.support,
            })
            .collect()
    }
}

pub fn mine_candidates(
    annotated: &AnnotatedSubCorpus,
    min_support: usize,
    max_window: usize,
) -> Result<CandidateSet> {
    let sentences: Vec<&[String]> = annotated.sentences.iter().map(|s| s.tokens.as_slice()).collect();
    let mined = mine_patterns(&sentences, min_support, max_window)?;
    let mut candidates: Vec<Candidate> = mined
        .into_iter()
        .map(|(template, support)| Candidate { template, support })
        .collect();
    candidates.sort_by(|a, b| b.support.cmp(&a.support).then_with(|| a.template.cmp(&b.template)));
    Ok(CandidateSet {
        relation: annotated.relation.clone(),
        candidates,
    })
}

/// All contiguous templates of 2..=`max_window` tokens that contain a
/// placeholder and occur in at least `min_support` sentences.
pub fn mine_patterns(
    sentences: &[&[String]],
    min_support: usize,
    max_window: usize,
) -> Result<BTreeMap<Vec<String>, usize>> {
    if min_support < 1 {
        return Err(Error::config("mine.min_support", "must be at least 1"));
    }
    if max_window < 2 {
        return Err(Error::config("mine.max_window", "must be at least 2"));
    }
    let reach = max_window as i32 - 1;
    let mut out = BTreeMap::new();
    for anchor in [SUBJECT_SLOT, OBJECT_SLOT] {
        let mut items: BTreeMap<(i32, &str), u32> = BTreeMap::new();
        let mut transactions: Vec<Vec<(i32, &str)>> = Vec::new();
        for tokens in sentences {
            let Some(pos) = tokens.iter().position(|t| t == anchor) else {
                continue;
            };
            let lo = (pos as i32 - reach).max(0) as usize;
            let hi = (pos + reach as usize).min(tokens.len() - 1);
            let tx: Vec<(i32, &str)> = (lo..=hi)
                .filter(|&i| i != pos)
                .map(|i| (i as i32 - pos as i32, tokens[i].as_str()))
                .collect();
            transactions.push(tx);
        }
        for tx in &transactions {
            for it in tx {
                items.entry(*it).or_insert(0);
            }
        }
        let decoded: Vec<(i32, &str)> = items.keys().copied().collect();
        for (i, v) in items.values_mut().enumerate() {
            *v = i as u32;
        }
        let encoded: Vec<(Vec<u32>, usize)> = transactions
            .iter()
            .map(|tx| (tx.iter().map(|it| items[it]).collect(), 1))
            .collect();

        let offset_of = |id: u32| decoded[id as usize].0;
        let fits = |set: &[u32]| {
            let (mut lo, mut hi) = (0i32, 0i32);
            for &id in set {
                lo = lo.min(offset_of(id));
                hi = hi.max(offset_of(id));
            }
            hi - lo <= reach
        };
        let mut frequent = Vec::new();
        fp_growth(encoded, min_support, &fits, &mut frequent);

        for (set, support) in frequent {
            let mut offs: Vec<(i32, &str)> = set.iter().map(|&id| decoded[id as usize]).collect();
            offs.push((0, anchor));
            offs.sort();
            let contiguous = offs.windows(2).all(|w| w[1].0 == w[0].0 + 1);
            if !contiguous {
                continue;
            }
            let template: Vec<String> = offs.iter().map(|(_, t)| t.to_string()).collect();
            let prev = out.insert(template, support);
            debug_assert!(prev.is_none() || prev == Some(support));
        }
    }
    Ok(out)
}

struct Node {
    item: u32,
    count: usize,
    parent: usize,
    children: HashMap<u32, usize>,
}

/// Classic FP-Growth over weighted transactions.
///
/// `admissible` must be anti-monotone: if a set is rejected, so is every
/// superset. Reports every admissible non-empty itemset with support ≥
/// `min_support`.
pub fn fp_growth(
    transactions: Vec<(Vec<u32>, usize)>,
    min_support: usize,
    admissible: &dyn Fn(&[u32]) -> bool,
    out: &mut Vec<(Vec<u32>, usize)>,
) {
    grow(&transactions, min_support, admissible, &mut Vec::new(), out);
}

fn grow(
    transactions: &[(Vec<u32>, usize)],
    min_support: usize,
    admissible: &dyn Fn(&[u32]) -> bool,
    suffix: &mut Vec<u32>,
    out: &mut Vec<(Vec<u32>, usize)>,
) {
    let mut freq: BTreeMap<u32, usize> = BTreeMap::new();
    for (tx, w) in transactions {
        for &it in tx {
            *freq.entry(it).or_default() += w;
        }
    }
    let mut order: Vec<(u32, usize)> = freq
        .into_iter()
        .filter(|&(it, c)| {
            c >= min_support && {
                suffix.push(it);
                let ok = admissible(suffix);
                suffix.pop();
                ok
            }
        })
        .collect();
    if order.is_empty() {
        return;
    }
    // Most frequent first; ties by item id keep the tree deterministic.
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let rank: HashMap<u32, usize> = order.iter().enumerate().map(|(r, &(it, _))| (it, r)).collect();

    let mut nodes = vec![Node {
        item: u32::MAX,
        count: 0,
        parent: usize::MAX,
        children: HashMap::new(),
    }];
    let mut header: Vec<Vec<usize>> = vec![Vec::new(); order.len()];
    for (tx, w) in transactions {
        let mut path: Vec<u32> = tx.iter().copied().filter(|it| rank.contains_key(it)).collect();
        path.sort_by_key(|it| rank[it]);
        path.dedup();
        let mut cur = 0;
        for it in path {
            let next = match nodes[cur].children.get(&it) {
                Some(&n) => n,
                None => {
                    let n = nodes.len();
                    nodes.push(Node {
                        item: it,
                        count: 0,
                        parent: cur,
                        children: HashMap::new(),
                    });
                    nodes[cur].children.insert(it, n);
                    header[rank[&it]].push(n);
                    n
                }
            };
            nodes[next].count += w;
            cur = next;
        }
    }

    for r in (0..order.len()).rev() {
        let (item, support) = order[r];
        suffix.push(item);
        let mut found = suffix.clone();
        found.sort_unstable();
        out.push((found, support));

        let mut base = Vec::new();
        for &n in &header[r] {
            let mut prefix = Vec::new();
            let mut p = nodes[n].parent;
            while p != 0 {
                prefix.push(nodes[p].item);
                p = nodes[p].parent;
            }
            if !prefix.is_empty() {
                base.push((prefix, nodes[n].count));
            }
        }
        if !base.is_empty() {
            grow(&base, min_support, admissible, suffix, out);
        }
        suffix.pop();
    }
}
