//! Seeded synthetic world: typed entities, facts, and a templated corpus
//! whose distractor sentences use relation wording for non-facts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Source};
use crate::error::{Error, Result};
use crate::kg::Triple;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub people: usize,
    pub cities: usize,
    pub companies: usize,
    pub facts_per_relation: usize,
    pub sentences: usize,
    pub distractor_fraction: f64,
    /// Non-fact partners per head entity and relation, used by distractors.
    pub decoys_per_entity: usize,
    pub sentences_per_document: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            people: 30,
            cities: 15,
            companies: 15,
            facts_per_relation: 100,
            sentences: 3000,
            distractor_fraction: 0.3,
            decoys_per_entity: 2,
            sentences_per_document: 5,
            seed: 55,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Person,
    City,
    Company,
}

struct RelationSpec {
    key: &'static str,
    head: Kind,
    tail: Kind,
    templates: &'static [&'static str],
    clauses: &'static [&'static str],
    /// Sentences that use the relation's wording for pairs that are not facts.
    distractors: &'static [&'static str],
}

// Two templates per relation use verbs that the relation's distractors also
// use, and "stayed in" is shared between two relations.
const RELATIONS: [RelationSpec; 4] = [
    RelationSpec {
        key: "/person/travel/visited",
        head: Kind::Person,
        tail: Kind::City,
        templates: &[
            "[X] visited [Y]{c}.",
            "[Y] was visited by [X]{c}.",
            "[X] toured [Y]{c}.",
            "[X] explored [Y]{c}.",
            "[X] stayed in [Y]{c}.",
        ],
        clauses: &[" on a long trip", " during a holiday", " to see the museums", " with a travel group", ""],
        distractors: &[
            "[A] never toured [B].",
            "[A] never explored [B].",
            "Reports that [A] toured [B] were wrong.",
            "Claims that [A] explored [B] were false.",
        ],
    },
    RelationSpec {
        key: "/person/residence/lived_in",
        head: Kind::Person,
        tail: Kind::City,
        templates: &[
            "[X] lived in [Y]{c}.",
            "[Y] is where [X] lived{c}.",
            "[X] settled in [Y]{c}.",
            "[X] moved to [Y]{c}.",
            "[X] stayed in [Y]{c}.",
        ],
        clauses: &[" with family", " for many years", " in a small apartment", " near the river", ""],
        distractors: &[
            "[A] never settled in [B].",
            "[A] never moved to [B].",
            "Reports that [A] settled in [B] were wrong.",
            "Claims that [A] moved to [B] were false.",
        ],
    },
    RelationSpec {
        key: "/person/career/worked_for",
        head: Kind::Person,
        tail: Kind::Company,
        templates: &[
            "[X] worked for [Y]{c}.",
            "[Y] employed [X]{c}.",
            "[X] joined [Y]{c}.",
            "[X] consulted for [Y]{c}.",
            "[X] worked at [Y]{c}.",
        ],
        clauses: &[" as an engineer", " for a decade", " on the payroll team", " as a manager", ""],
        distractors: &[
            "[A] never joined [B].",
            "[A] never consulted for [B].",
            "Reports that [A] joined [B] were wrong.",
            "Claims that [A] consulted for [B] were false.",
        ],
    },
    RelationSpec {
        key: "/company/location/office_in",
        head: Kind::Company,
        tail: Kind::City,
        templates: &[
            "[X] has an office in [Y]{c}.",
            "[Y] hosts an office of [X]{c}.",
            "[X] expanded to [Y]{c}.",
            "[X] invested in [Y]{c}.",
            "[X] runs an office in [Y]{c}.",
        ],
        clauses: &[" with fifty staff", " near the station", " for regional sales", " since last year", ""],
        distractors: &[
            "[A] never expanded to [B].",
            "[A] never invested in [B].",
            "Reports that [A] expanded to [B] were wrong.",
            "Claims that [A] invested in [B] were false.",
        ],
    },
];

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ra", "ve", "to", "su", "ne", "di", "ba", "fo", "ge", "hu", "ja", "pe", "qui", "ro", "sa", "ti", "zu",
];

/// Entities, facts and the two corpora.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub labels: BTreeMap<String, String>,
    pub triples: Vec<Triple>,
    pub general: Vec<Document>,
    pub reliable: Vec<Document>,
    pub distractor_sentences: usize,
    pub fact_sentences: usize,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn names(rng: &mut SplitMix64, n: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = 2 + rng.below(2);
        let name: String = (0..len).map(|_| SYLLABLES[rng.below(SYLLABLES.len())]).collect();
        if taken.insert(name.clone()) {
            out.push(capitalize(&name));
        }
    }
    out
}

pub fn generate(config: &SynthConfig) -> Result<World> {
    if !(0.0..1.0).contains(&config.distractor_fraction) {
        return Err(Error::config("synth.distractor_fraction", "must lie in [0, 1)"));
    }
    let mut rng = SplitMix64::derived(config.seed, "synth");
    let mut taken = BTreeSet::new();
    let mut by_kind: BTreeMap<Kind, Vec<String>> = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for (kind, prefix, n) in [
        (Kind::Person, "p", config.people),
        (Kind::City, "c", config.cities),
        (Kind::Company, "k", config.companies),
    ] {
        let mut ids = Vec::new();
        for (i, name) in names(&mut rng, n, &mut taken).into_iter().enumerate() {
            let id = format!("/m/{prefix}{i:02}");
            labels.insert(id.clone(), name);
            ids.push(id);
        }
        by_kind.insert(kind, ids);
    }

    let mut triples = Vec::new();
    for spec in &RELATIONS {
        let heads = &by_kind[&spec.head];
        let tails = &by_kind[&spec.tail];
        let mut pairs: Vec<(usize, usize)> = (0..heads.len()).flat_map(|h| (0..tails.len()).map(move |t| (h, t))).collect();
        if pairs.len() < config.facts_per_relation {
            return Err(Error::config("synth.facts_per_relation", "more facts than type-compatible pairs"));
        }
        rng.shuffle(&mut pairs);
        for &(h, t) in &pairs[..config.facts_per_relation] {
            triples.push(Triple::new(&heads[h], spec.key, &tails[t]));
        }
    }
    triples.sort();

    let linked: BTreeSet<(&str, &str)> = triples
        .iter()
        .flat_map(|t| [(t.head.as_str(), t.tail.as_str()), (t.tail.as_str(), t.head.as_str())])
        .collect();
    // Decoys: per head entity and relation, tail-type entities it has no fact with.
    let mut decoys: BTreeMap<(&str, usize), Vec<&str>> = BTreeMap::new();
    for (r, spec) in RELATIONS.iter().enumerate() {
        for h in &by_kind[&spec.head] {
            let mut pool: Vec<&str> = by_kind[&spec.tail]
                .iter()
                .map(String::as_str)
                .filter(|t| *t != h && !linked.contains(&(h.as_str(), *t)))
                .collect();
            rng.shuffle(&mut pool);
            pool.truncate(config.decoys_per_entity);
            decoys.insert((h.as_str(), r), pool);
        }
    }

    let n_distract = (config.sentences as f64 * config.distractor_fraction).round() as usize;
    let n_fact = config.sentences - n_distract;
    let mut sentences: Vec<(String, bool)> = Vec::with_capacity(config.sentences);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    rng.shuffle(&mut order);
    let base = n_fact / triples.len();
    let extra = n_fact % triples.len();
    for (rank, &i) in order.iter().enumerate() {
        let t = &triples[i];
        let spec = RELATIONS.iter().find(|s| s.key == t.relation).unwrap();
        let count = base + usize::from(rank < extra);
        for k in 0..count {
            let template = spec.templates[rng.below(spec.templates.len())];
            let clause = spec.clauses[rng.below(spec.clauses.len())];
            let s = template
                .replace("[X]", &labels[&t.head])
                .replace("[Y]", &labels[&t.tail])
                .replace("{c}", clause);
            // Alternate corpora so every fact has reliable evidence.
            sentences.push((capitalize(&s), k % 2 == 0));
        }
    }
    for k in 0..n_distract {
        let r = k % RELATIONS.len();
        let spec = &RELATIONS[r];
        let heads = &by_kind[&spec.head];
        let a = heads[rng.below(heads.len())].as_str();
        let list = &decoys[&(a, r)];
        if list.is_empty() {
            return Err(Error::config("synth.decoys_per_entity", "no entity left to act as a decoy"));
        }
        let b = list[rng.below(list.len())];
        let template = spec.distractors[rng.below(spec.distractors.len())];
        let s = template.replace("[A]", &labels[a]).replace("[B]", &labels[b]);
        sentences.push((capitalize(&s), k % 2 == 0));
    }
    rng.shuffle(&mut sentences);

    let mut general = Vec::new();
    let mut reliable = Vec::new();
    for (reliable_side, docs, prefix, source) in [
        (false, &mut general, "g", Source::General),
        (true, &mut reliable, "r", Source::Reliable),
    ] {
        let side: Vec<&String> = sentences.iter().filter(|(_, r)| *r == reliable_side).map(|(s, _)| s).collect();
        for (i, chunk) in side.chunks(config.sentences_per_document.max(1)).enumerate() {
            docs.push(Document {
                doc_id: format!("{prefix}{i:04}"),
                text: chunk.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" "),
                source,
            });
        }
    }
    Ok(World {
        labels,
        triples,
        general,
        reliable,
        distractor_sentences: n_distract,
        fact_sentences: n_fact,
    })
}

#[derive(Serialize)]
struct DocLine<'a> {
    doc_id: &'a str,
    text: &'a str,
}

impl World {
    /// Write `kg.tsv`, `labels.tsv`, `general.jsonl` and `reliable.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let kg = dir.join("kg.tsv");
        crate::kg::write_triples(&kg, &self.triples)?;
        let labels: String = self.labels.iter().map(|(id, l)| format!("{id}\t{l}\n")).collect();
        let path = dir.join("labels.tsv");
        fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;
        for (name, docs) in [("general.jsonl", &self.general), ("reliable.jsonl", &self.reliable)] {
            let mut out = String::new();
            for d in docs {
                out.push_str(&serde_json::to_string(&DocLine { doc_id: &d.doc_id, text: &d.text })?);
                out.push('\n');
            }
            let path = dir.join(name);
            fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn relations(&self) -> BTreeSet<&str> {
        self.triples.iter().map(|t| t.relation.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusStore;

    #[test]
    fn default_world_has_the_stated_shape() {
        let w = generate(&SynthConfig::default()).unwrap();
        assert_eq!(w.labels.len(), 60);
        assert_eq!(w.relations().len(), 4);
        assert_eq!(w.triples.len(), 400);
        assert_eq!(w.fact_sentences + w.distractor_sentences, 3000);
        assert_eq!(w.distractor_sentences, 900);
        let docs: Vec<Document> = w.general.iter().chain(&w.reliable).cloned().collect();
        let corpus = CorpusStore::from_documents(docs).unwrap();
        assert_eq!(corpus.sentences().len(), 3000);
        let labels: BTreeSet<&String> = w.labels.values().collect();
        assert_eq!(labels.len(), 60);
    }

    #[test]
    fn seeded() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 7, ..Default::default() }).unwrap();
        assert_ne!(a.triples, c.triples);
    }
}
