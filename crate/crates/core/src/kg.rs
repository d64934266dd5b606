//! Entities, relations, triples and reproducible splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub label: String,
    /// False when no surface form was found and the code stands in as label.
    pub mapped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }

    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}", self.head, self.relation, self.tail)
    }
}

impl std::fmt::Display for Triple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `(h, r, ?)`
    Tail,
    /// `(?, r, t)`
    Head,
}

/// A link-prediction query: the known entity, the relation and which side is missing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Query {
    pub subject: String,
    pub relation: String,
    pub direction: Direction,
}

impl Query {
    pub fn tail(subject: impl Into<String>, relation: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            direction: Direction::Tail,
        }
    }

    pub fn head(subject: impl Into<String>, relation: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            direction: Direction::Head,
        }
    }

    /// Both queries derived from a triple, paired with their gold answers.
    pub fn from_triple(t: &Triple) -> [(Query, String); 2] {
        [
            (Query::tail(&t.head, &t.relation), t.tail.clone()),
            (Query::head(&t.tail, &t.relation), t.head.clone()),
        ]
    }

    /// Assemble the triple obtained by putting `entity` in the missing slot.
    pub fn complete(&self, entity: &str) -> Triple {
        match self.direction {
            Direction::Tail => Triple::new(&self.subject, &self.relation, entity),
            Direction::Head => Triple::new(entity, &self.relation, &self.subject),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub lines: usize,
    pub duplicates: usize,
    pub unmapped: usize,
}

/// Immutable store of the knowledge graph.
#[derive(Debug, Clone, Default)]
pub struct KgStore {
    entities: BTreeMap<String, Entity>,
    relations: BTreeSet<String>,
    triples: Vec<Triple>,
    report: LoadReport,
}

impl KgStore {
    pub fn load(triples_file: &Path, label_map_file: Option<&Path>) -> Result<Self> {
        let raw = fs::read_to_string(triples_file).map_err(|e| Error::io(triples_file, e))?;
        let labels = match label_map_file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_label_map(&text, p)?
            }
            None => BTreeMap::new(),
        };
        let triples = parse_triples(&raw, triples_file)?;
        Ok(Self::from_triples(triples, &labels))
    }

    /// Build from triples in file order plus an id → label map.
    pub fn from_triples(raw: Vec<Triple>, labels: &BTreeMap<String, String>) -> Self {
        let mut seen = HashSet::new();
        let mut report = LoadReport {
            lines: raw.len(),
            ..Default::default()
        };
        let mut triples = Vec::with_capacity(raw.len());
        let mut entities = BTreeMap::new();
        let mut relations = BTreeSet::new();
        for t in raw {
            if !seen.insert(t.clone()) {
                report.duplicates += 1;
                continue;
            }
            for id in [&t.head, &t.tail] {
                entities.entry(id.clone()).or_insert_with(|| match labels.get(id) {
                    Some(label) if !label.trim().is_empty() => Entity {
                        id: id.clone(),
                        label: label.trim().to_string(),
                        mapped: true,
                    },
                    _ => Entity {
                        id: id.clone(),
                        label: id.clone(),
                        mapped: false,
                    },
                });
            }
            relations.insert(t.relation.clone());
            triples.push(t);
        }
        report.unmapped = entities.values().filter(|e| !e.mapped).count();
        Self {
            entities,
            relations,
            triples,
            report,
        }
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn label<'a>(&'a self, id: &'a str) -> &'a str {
        self.entities.get(id).map(|e| e.label.as_str()).unwrap_or(id)
    }

    pub fn entity_ids(&self) -> Vec<String> {
        self.entities.keys().cloned().collect()
    }

    pub fn relations(&self) -> &BTreeSet<String> {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn report(&self) -> &LoadReport {
        &self.report
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Fraction of entities with a resolved surface form (1.0 when empty).
    pub fn label_coverage(&self) -> f64 {
        if self.entities.is_empty() {
            return 1.0;
        }
        1.0 - self.report.unmapped as f64 / self.entities.len() as f64
    }

    pub fn check_coverage(&self, required: f64) -> Result<()> {
        let coverage = self.label_coverage();
        if coverage + 1e-12 < required {
            return Err(Error::LabelCoverage { coverage, required });
        }
        Ok(())
    }

    /// `(head, tail)` pairs of a relation sorted by head id then tail id.
    pub fn tuples_for_relation(&self, relation: &str) -> Result<Vec<(String, String)>> {
        if !self.relations.contains(relation) {
            return Err(Error::NotFound {
                kind: "relation",
                key: relation.to_string(),
            });
        }
        Ok(tuples_of(&self.triples, relation))
    }
}

/// Sorted `(head, tail)` pairs of `relation` within an arbitrary triple slice.
pub fn tuples_of(triples: &[Triple], relation: &str) -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = triples
        .iter()
        .filter(|t| t.relation == relation)
        .map(|t| (t.head.clone(), t.tail.clone()))
        .collect();
    pairs.sort();
    pairs.dedup();
    pairs
}

pub fn parse_triples(text: &str, path: &Path) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected head<TAB>relation<TAB>tail, got {line:?}"),
            });
        }
        out.push(Triple::new(fields[0].trim(), fields[1].trim(), fields[2].trim()));
    }
    Ok(out)
}

pub fn parse_label_map(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, label)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected entity_id<TAB>surface form, got {line:?}"),
            });
        };
        out.insert(id.trim().to_string(), label.trim().to_string());
    }
    Ok(out)
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> Result<()> {
    let mut body = String::new();
    for t in triples {
        body.push_str(&t.to_tsv());
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// train / valid / test proportions.
    pub ratios: [f64; 3],
    /// Fraction of the training split that is kept.
    pub sub_ratio: f64,
    pub seed: u64,
    /// Draw sub-splits as prefixes of one permutation so smaller ratios nest
    /// inside larger ones. Off by default.
    #[serde(default)]
    pub nested: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            sub_ratio: 1.0,
            seed: 55,
            nested: false,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("split.ratios", "each proportion must lie in [0, 1]"));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("split.ratios", format!("proportions sum to {sum}, not 1")));
        }
        if !(self.sub_ratio > 0.0 && self.sub_ratio <= 1.0) {
            return Err(Error::config("split.sub_ratio", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    /// Training split before sub-sampling.
    pub train_full: Vec<Triple>,
}

/// Shuffle the lexicographically sorted triple set and cut it by `ratios`.
///
/// Counts are `floor(n * ratio)` for train and valid; test takes the rest.
/// Valid and test keep only triples of `eval_relations`; train keeps everything.
pub fn split(triples: &[Triple], spec: &SplitSpec, eval_relations: &[String]) -> Result<Splits> {
    spec.validate()?;
    if eval_relations.is_empty() {
        return Err(Error::config("split.eval_relations", "evaluation relation list is empty"));
    }
    let mut all = triples.to_vec();
    all.sort();
    all.dedup();
    SplitMix64::new(spec.seed).shuffle(&mut all);

    let n = all.len();
    let n_train = (n as f64 * spec.ratios[0]).floor() as usize;
    let n_valid = ((n as f64 * spec.ratios[1]).floor() as usize).min(n - n_train);
    let keep: HashSet<&str> = eval_relations.iter().map(String::as_str).collect();

    let train_full = all[..n_train].to_vec();
    let valid = all[n_train..n_train + n_valid]
        .iter()
        .filter(|t| keep.contains(t.relation.as_str()))
        .cloned()
        .collect();
    let test = all[n_train + n_valid..]
        .iter()
        .filter(|t| keep.contains(t.relation.as_str()))
        .cloned()
        .collect();
    let train = sub_split(&train_full, spec.sub_ratio, spec.seed, spec.nested);
    Ok(Splits {
        train,
        valid,
        test,
        train_full,
    })
}

/// Keep `round(sub_ratio * |train|)` triples of the training split.
///
/// Nested mode takes a prefix of the permutation drawn from `seed`; the
/// default mode folds the ratio into the seed so each ratio is an independent draw.
pub fn sub_split(train: &[Triple], sub_ratio: f64, seed: u64, nested: bool) -> Vec<Triple> {
    if sub_ratio >= 1.0 {
        return train.to_vec();
    }
    let mut pool = train.to_vec();
    pool.sort();
    let stream_seed = if nested {
        seed
    } else {
        seed ^ sub_ratio.to_bits()
    };
    SplitMix64::new(stream_seed).shuffle(&mut pool);
    let k = (sub_ratio * train.len() as f64).round() as usize;
    pool.truncate(k);
    pool
}

/// Reproducibility record for a split run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub sub_ratio: f64,
    pub counts: SplitCounts,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitManifest {
    pub fn new(spec: &SplitSpec, splits: &Splits) -> Self {
        let mut hasher = Sha256::new();
        for (name, part) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
            let mut members: Vec<String> = part.iter().map(Triple::to_tsv).collect();
            members.sort();
            hasher.update(name.as_bytes());
            hasher.update(b"\n");
            for m in members {
                hasher.update(m.as_bytes());
                hasher.update(b"\n");
            }
        }
        Self {
            seed: spec.seed,
            ratios: spec.ratios,
            sub_ratio: spec.sub_ratio,
            counts: SplitCounts {
                train: splits.train.len(),
                valid: splits.valid.len(),
                test: splits.test.len(),
            },
            checksum: crate::checksum::hex(&hasher.finalize()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize, relations: usize) -> Vec<Triple> {
        (0..n)
            .map(|i| Triple::new(format!("e{:03}", i), format!("r{}", i % relations), format!("e{:03}", (i * 7 + 1) % n)))
            .collect()
    }

    #[test]
    fn dedups_with_warning_count() {
        let text = "a\tr\tb\na\tr\tb\nb\tr\tc\n";
        let triples = parse_triples(text, Path::new("t.tsv")).unwrap();
        let store = KgStore::from_triples(triples, &BTreeMap::new());
        assert_eq!(store.triples().len(), 2);
        assert_eq!(store.report().duplicates, 1);
        assert_eq!(store.num_entities(), 3);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_triples("a\tr\tb\nbroken line\n", Path::new("t.tsv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_empty_store() {
        let store = KgStore::from_triples(parse_triples("", Path::new("t")).unwrap(), &BTreeMap::new());
        assert_eq!(store.num_entities(), 0);
        assert_eq!(store.label_coverage(), 1.0);
    }

    #[test]
    fn label_coverage_fraction() {
        // 3600 entities with 3500 mapped gives 0.97222...
        let triples: Vec<Triple> = (0..1800)
            .map(|i| Triple::new(format!("h{i}"), "r", format!("t{i}")))
            .collect();
        let mut labels = BTreeMap::new();
        for i in 0..1800 {
            labels.insert(format!("h{i}"), format!("head {i}"));
        }
        for i in 0..1700 {
            labels.insert(format!("t{i}"), format!("tail {i}"));
        }
        let store = KgStore::from_triples(triples, &labels);
        assert_eq!(store.report().unmapped, 100);
        assert!((store.label_coverage() - 0.9722).abs() < 1e-4);
        assert!(store.check_coverage(0.97).is_ok());
        assert!(store.check_coverage(0.98).is_err());
        assert_eq!(store.label("t1750"), "t1750");
        assert!(!store.entity("t1750").unwrap().mapped);
    }

    #[test]
    fn split_sizes_follow_floor_arithmetic() {
        let triples = synthetic(100, 1);
        let spec = SplitSpec::default();
        let s = split(&triples, &spec, &["r0".to_string()]).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let again = split(&triples, &spec, &["r0".to_string()]).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn split_partitions_and_filters_eval_relations() {
        let triples = synthetic(200, 4);
        let eval = vec!["r1".to_string(), "r2".to_string()];
        let s = split(&triples, &SplitSpec::default(), &eval).unwrap();
        assert!(s.valid.iter().chain(&s.test).all(|t| t.relation == "r1" || t.relation == "r2"));
        assert!(s.train.iter().any(|t| t.relation == "r0"));
        let mut seen = HashSet::new();
        for t in s.train.iter().chain(&s.valid).chain(&s.test) {
            assert!(seen.insert(t.clone()), "overlap on {t}");
        }
    }

    #[test]
    fn empty_eval_relations_is_config_error() {
        assert!(matches!(
            split(&synthetic(10, 1), &SplitSpec::default(), &[]),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn sub_split_is_reproducible_and_sized() {
        let triples = synthetic(100, 1);
        let s = split(&triples, &SplitSpec::default(), &["r0".into()]).unwrap();
        let a = sub_split(&s.train_full, 0.2, 55, false);
        let b = sub_split(&s.train_full, 0.2, 55, false);
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        let train: HashSet<_> = s.train_full.iter().collect();
        assert!(a.iter().all(|t| train.contains(t)));
    }

    #[test]
    fn nested_sub_splits_nest() {
        let triples = synthetic(100, 1);
        let s = split(&triples, &SplitSpec::default(), &["r0".into()]).unwrap();
        let small: HashSet<_> = sub_split(&s.train_full, 0.2, 83, true).into_iter().collect();
        let large: HashSet<_> = sub_split(&s.train_full, 0.5, 83, true).into_iter().collect();
        assert!(small.is_subset(&large));
    }

    #[test]
    fn sub_split_matches_hand_enumerated_shuffle() {
        // Independent enumeration: sort, Fisher-Yates with the seed folded by the
        // ratio bits, keep the first round(0.2 * 80) = 16.
        let train: Vec<Triple> = (0..80).map(|i| Triple::new(format!("h{i:02}"), "r", "t")).collect();
        let mut idx: Vec<usize> = (0..80).collect();
        let mut state: u64 = 55 ^ 0.2f64.to_bits();
        let mut next = || {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^ (z >> 31)
        };
        for i in (1..80usize).rev() {
            let j = (next() % (i as u64 + 1)) as usize;
            idx.swap(i, j);
        }
        let expected: Vec<Triple> = idx[..16].iter().map(|&i| train[i].clone()).collect();
        assert_eq!(sub_split(&train, 0.2, 55, false), expected);
    }

    #[test]
    fn tuples_sorted_and_unknown_relation_errors() {
        let triples = vec![
            Triple::new("microsoft", "founders", "paul_allen"),
            Triple::new("apple", "founders", "steve_jobs"),
            Triple::new("microsoft", "founders", "bill_gates"),
        ];
        let store = KgStore::from_triples(triples, &BTreeMap::new());
        assert_eq!(
            store.tuples_for_relation("founders").unwrap(),
            vec![
                ("apple".to_string(), "steve_jobs".to_string()),
                ("microsoft".to_string(), "bill_gates".to_string()),
                ("microsoft".to_string(), "paul_allen".to_string()),
            ]
        );
        assert!(matches!(store.tuples_for_relation("nope"), Err(Error::NotFound { .. })));
        assert!(tuples_of(store.triples(), "other").is_empty());
    }

    #[test]
    fn manifest_checksum_is_stable() {
        let triples = synthetic(50, 2);
        let spec = SplitSpec::default();
        let eval = vec!["r0".to_string(), "r1".to_string()];
        let a = SplitManifest::new(&spec, &split(&triples, &spec, &eval).unwrap());
        let b = SplitManifest::new(&spec, &split(&triples, &spec, &eval).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.checksum.len(), 64);
    }
}
