//! Stage orchestration over a run directory.
//!
//! Layout: `<run_dir>/<stage>/...` holds each stage's artifacts,
//! `<run_dir>/manifests/<stage>.json` records input and output checksums plus
//! the config hash, and `<run_dir>/logs/<stage>.jsonl` holds timing lines.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{MReading, PipelineConfig, ScorerMode};
use crate::corpus::{self, CorpusStore, Document, LabeledTuple, Source, SubCorpus, SubCorpusEntry, SubSentence};
use crate::ensemble;
use crate::error::{Error, Result};
use crate::eval::{self, EnsembleMode, RankedPrediction};
use crate::kg::{self, Direction, KgStore, Query, SplitManifest, Triple};
use crate::miner::{self, Candidate, CandidateSet};
use crate::negatives::{self, Negative, RecallRecord, TransE};
use crate::phrase::{self, AnnotatedSentence, AnnotatedSubCorpus, PhraseConfig};
use crate::prompt::Prompt;
use crate::remote::RemoteScorer;
use crate::retriever::{self, Bm25Index, ClozeInstance, ClozeRecord, ClozeTarget};
use crate::scorer::{Cooccurrence, FinetuneConfig, LogisticHead, ReferenceScorer, Scorer};
use crate::selector::{self, EnsembleFile, PromptEnsemble, QualityContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Split,
    Subcorpus,
    Mine,
    Select,
    Optimize,
    Index,
    Negatives,
    Assemble,
    Train,
    Predict,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Ingest,
        Stage::Split,
        Stage::Subcorpus,
        Stage::Mine,
        Stage::Select,
        Stage::Optimize,
        Stage::Index,
        Stage::Negatives,
        Stage::Assemble,
        Stage::Train,
        Stage::Predict,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Subcorpus => "subcorpus",
            Stage::Mine => "mine",
            Stage::Select => "select",
            Stage::Optimize => "optimize",
            Stage::Index => "index",
            Stage::Negatives => "negatives",
            Stage::Assemble => "assemble",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Answers the training graph holds for each query.
type KnownAnswers = BTreeMap<Query, Vec<String>>;

fn known_answers(triples: &[Triple]) -> KnownAnswers {
    let mut out: KnownAnswers = BTreeMap::new();
    for t in triples {
        for (q, o) in Query::from_triple(t) {
            out.entry(q).or_default().push(o);
        }
    }
    out
}

/// A run directory bound to a configuration.
pub struct Run {
    pub config: PipelineConfig,
    pub dir: PathBuf,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io(path, fs::write(path, text))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = io(path, fs::read_to_string(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    io(path, fs::write(path, out))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = io(path, fs::read_to_string(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// File-system-safe name for a relation key.
pub fn slug(relation: &str) -> String {
    let s: String = relation
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    let s = s.trim_matches('_').to_string();
    format!("{s}_{:08x}", crate::rng::fnv1a64(relation.as_bytes()) as u32)
}

#[derive(Serialize, Deserialize)]
struct DocumentLine {
    doc_id: String,
    text: String,
    source: Source,
}

#[derive(Serialize, Deserialize)]
struct SubCorpusLine {
    relation: String,
    head: String,
    tail: String,
    sentence_id: u32,
    doc_id: String,
    sent_index: usize,
    head_span: (usize, usize),
    tail_span: (usize, usize),
    raw: String,
}

#[derive(Serialize, Deserialize)]
struct SubCorpusSummary {
    relation: String,
    file: String,
    tuples_searched: usize,
    tuples_found: usize,
    sentences: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnotatedLine {
    head: String,
    tail: String,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MinedRelation {
    relation: String,
    num_tuples: usize,
    phrases: Vec<String>,
    annotated: String,
    candidates: Vec<Candidate>,
}

#[derive(Serialize, Deserialize)]
struct QualityLine {
    relation: String,
    template: Vec<String>,
    support: usize,
    quality: selector::QualityScore,
}

#[derive(Serialize, Deserialize)]
struct OptimizeReport {
    relation: String,
    held_out: usize,
    uniform_log_likelihood: f64,
    learned_log_likelihood: f64,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct IndexSummary {
    sentences: usize,
    avg_len: f64,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
struct KgeSummary {
    checksum: String,
    entities: usize,
    recall_size: usize,
    kge_negatives: usize,
    rand_negatives: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub mode: ScorerMode,
    pub model_version: String,
    pub head: LogisticHead,
    pub aggregation: crate::scorer::Aggregation,
    pub m_divisor: f64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionLine {
    pub query: Query,
    pub ranking: Vec<String>,
    pub scores: Vec<f64>,
    pub gold: String,
    pub gold_rank: Option<usize>,
    pub support: Option<String>,
}

impl Run {
    pub fn new(config: PipelineConfig) -> Self {
        let dir = config.run_dir.clone();
        Self { config, dir }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.name())
    }

    pub fn artifact(&self, stage: Stage, file: &str) -> PathBuf {
        self.stage_dir(stage).join(file)
    }

    /// Path of an upstream artifact, or an error naming the stage that makes it.
    pub fn require(&self, stage: Stage, file: &str) -> Result<PathBuf> {
        let p = self.artifact(stage, file);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                stage: stage.name(),
                path: p,
            })
        }
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn log(&self, stage: Stage, event: &str, duration: Duration, counters: serde_json::Value) -> Result<()> {
        let dir = self.dir.join("logs");
        io(&dir, fs::create_dir_all(&dir))?;
        let path = dir.join(format!("{}.jsonl", stage.name()));
        let line = serde_json::json!({
            "stage": stage.name(),
            "event": event,
            "duration_ms": duration.as_millis() as u64,
            "counters": counters,
        });
        let mut f = io(&path, fs::OpenOptions::new().create(true).append(true).open(&path))?;
        io(&path, writeln!(f, "{line}"))
    }

    fn write_manifest(&self, stage: Stage, inputs: &[PathBuf]) -> Result<Manifest> {
        let mut input_sums = BTreeMap::new();
        for p in inputs {
            input_sums.insert(self.relative(p), crate::checksum::sha256_file(p)?);
        }
        let mut outputs = BTreeMap::new();
        let dir = self.stage_dir(stage);
        let mut files = Vec::new();
        collect_files(&dir, &mut files)?;
        files.sort();
        for f in files {
            outputs.insert(self.relative(&f), crate::checksum::sha256_file(&f)?);
        }
        let manifest = Manifest {
            stage: stage.name().into(),
            config_hash: self.config.hash(),
            inputs: input_sums,
            outputs,
        };
        let mdir = self.dir.join("manifests");
        io(&mdir, fs::create_dir_all(&mdir))?;
        write_json(&mdir.join(format!("{}.json", stage.name())), &manifest)?;
        Ok(manifest)
    }

    fn fresh_stage_dir(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            io(&dir, fs::remove_dir_all(&dir))?;
        }
        io(&dir, fs::create_dir_all(&dir))?;
        Ok(dir)
    }

    pub fn run(&self, stage: Stage) -> Result<Manifest> {
        let start = Instant::now();
        self.fresh_stage_dir(stage)?;
        let (inputs, counters) = match stage {
            Stage::Ingest => self.ingest()?,
            Stage::Split => self.split()?,
            Stage::Subcorpus => self.subcorpus()?,
            Stage::Mine => self.mine()?,
            Stage::Select => self.select()?,
            Stage::Optimize => self.optimize()?,
            Stage::Index => self.index()?,
            Stage::Negatives => self.negatives()?,
            Stage::Assemble => self.assemble()?,
            Stage::Train => self.train()?,
            Stage::Predict => self.predict()?,
            Stage::Evaluate => self.evaluate()?,
        };
        let manifest = self.write_manifest(stage, &inputs)?;
        self.log(stage, "done", start.elapsed(), counters)?;
        Ok(manifest)
    }

    pub fn run_all(&self) -> Result<Vec<Manifest>> {
        Stage::ALL.iter().map(|&s| self.run(s)).collect()
    }

    // Loaders for upstream artifacts.

    fn load_kg(&self) -> Result<KgStore> {
        let triples = self.require(Stage::Ingest, "triples.tsv")?;
        let labels = self.require(Stage::Ingest, "labels.tsv")?;
        KgStore::load(&triples, Some(&labels))
    }

    fn load_corpus(&self) -> Result<CorpusStore> {
        let path = self.require(Stage::Ingest, "documents.jsonl")?;
        let docs: Vec<DocumentLine> = read_jsonl(&path)?;
        CorpusStore::from_documents(
            docs.into_iter()
                .map(|d| Document {
                    doc_id: d.doc_id,
                    text: d.text,
                    source: d.source,
                })
                .collect(),
        )
    }

    fn load_split(&self, name: &str) -> Result<Vec<Triple>> {
        let path = self.require(Stage::Split, &format!("{name}.tsv"))?;
        let text = io(&path, fs::read_to_string(&path))?;
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        kg::parse_triples(&text, &path)
    }

    fn load_ensembles(&self, stage: Stage) -> Result<BTreeMap<String, PromptEnsemble>> {
        let path = self.require(stage, "ensembles.json")?;
        let files: Vec<EnsembleFile> = read_json(&path)?;
        files
            .into_iter()
            .map(|f| Ok((f.relation.clone(), PromptEnsemble::from_file(f)?)))
            .collect()
    }

    fn relations(&self, train: &[Triple]) -> Vec<String> {
        let mut rels: Vec<String> = train.iter().map(|t| t.relation.clone()).collect();
        rels.sort();
        rels.dedup();
        rels
    }

    fn eval_relations(&self, kg: &KgStore) -> Vec<String> {
        if self.config.split.eval_relations.is_empty() {
            kg.relations().iter().cloned().collect()
        } else {
            self.config.split.eval_relations.clone()
        }
    }

    fn support_passage(&self, index: Option<&Bm25Index>, terms: &[String], key: &str) -> Option<String> {
        let index = index?;
        let config = self.config.retrieval_config();
        let passages = retriever::retrieve(index, terms, &config);
        retriever::choose_support(&passages, &config, key).map(|p| p.text)
    }

    fn build_index(&self, corpus: &CorpusStore) -> Result<Option<Bm25Index>> {
        if self.config.retrieval.enabled {
            Ok(Some(Bm25Index::build(corpus)?))
        } else {
            Ok(None)
        }
    }

    fn query_support(&self, index: Option<&Bm25Index>, kg: &KgStore, q: &Query, known: &KnownAnswers) -> Option<String> {
        let index = index?;
        let terms = retriever::query_terms(kg.label(&q.subject), &q.relation);
        let key = format!("query\t{}\t{}\t{:?}", q.subject, q.relation, q.direction);
        let config = self.config.retrieval_config();
        let mut passages = retriever::retrieve(index, &terms, &config);
        if self.config.retrieval.skip_known {
            let labels: Vec<&str> = known.get(q).iter().flat_map(|v| v.iter()).map(|e| kg.label(e)).collect();
            passages.retain(|p| !retriever::mentions_any(&p.text, &labels));
        }
        retriever::choose_support(&passages, &config, &key).map(|p| p.text)
    }

    fn triple_support(&self, index: Option<&Bm25Index>, kg: &KgStore, t: &Triple) -> Option<String> {
        let terms = retriever::triple_terms(kg.label(&t.head), kg.label(&t.tail), &t.relation);
        self.support_passage(index, &terms, &format!("triple\t{}", t.to_tsv()))
    }

    fn scorer(&self, corpus: &CorpusStore, head: LogisticHead) -> Result<Box<dyn Scorer>> {
        match self.config.scorer.mode {
            ScorerMode::Reference => {
                let mut s = ReferenceScorer::new(Cooccurrence::from_corpus(corpus), self.config.scorer.aggregation);
                s.head = head;
                Ok(Box::new(s))
            }
            ScorerMode::Remote => Ok(Box::new(RemoteScorer::new(
                &self.config.scorer.url,
                Duration::from_secs(self.config.scorer.timeout_secs),
            )?)),
        }
    }

    // Stages.

    fn ingest(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let p = &self.config.paths;
        let kg = KgStore::load(&p.kg, p.labels.as_deref())?;
        kg.check_coverage(self.config.split.min_label_coverage)?;
        let mut files: Vec<(PathBuf, Source)> = p.general.iter().map(|f| (f.clone(), Source::General)).collect();
        files.extend(p.reliable.iter().map(|f| (f.clone(), Source::Reliable)));
        let mut docs = Vec::new();
        for (path, source) in &files {
            docs.extend(corpus::read_documents(path, *source)?);
        }
        let corpus = CorpusStore::from_documents(docs.clone())?;
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));

        kg::write_triples(&self.artifact(Stage::Ingest, "triples.tsv"), kg.triples())?;
        let labels: String = kg
            .entities()
            .filter(|e| e.mapped)
            .map(|e| format!("{}\t{}\n", e.id, e.label))
            .collect();
        let lp = self.artifact(Stage::Ingest, "labels.tsv");
        io(&lp, fs::write(&lp, labels))?;
        let lines: Vec<DocumentLine> = docs
            .into_iter()
            .map(|d| DocumentLine {
                doc_id: d.doc_id,
                text: d.text,
                source: d.source,
            })
            .collect();
        write_jsonl(&self.artifact(Stage::Ingest, "documents.jsonl"), &lines)?;
        let report = serde_json::json!({
            "triples": kg.triples().len(),
            "entities": kg.num_entities(),
            "relations": kg.relations().len(),
            "duplicates": kg.report().duplicates,
            "label_coverage": kg.label_coverage(),
            "documents": corpus.report().documents,
            "sentences": corpus.report().sentences,
            "skipped_empty": corpus.report().skipped_empty,
            "index_checksum": corpus.index_checksum(),
        });
        write_json(&self.artifact(Stage::Ingest, "report.json"), &report)?;
        let mut inputs = vec![p.kg.clone()];
        inputs.extend(p.labels.clone());
        inputs.extend(files.into_iter().map(|(f, _)| f));
        Ok((inputs, report))
    }

    fn split(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let kg = self.load_kg()?;
        let spec = self.config.split_spec();
        let splits = kg::split(kg.triples(), &spec, &self.eval_relations(&kg))?;
        for (name, part) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
            let mut sorted = part.clone();
            sorted.sort();
            kg::write_triples(&self.artifact(Stage::Split, &format!("{name}.tsv")), &sorted)?;
        }
        let manifest = SplitManifest::new(&spec, &splits);
        write_json(&self.artifact(Stage::Split, "manifest.json"), &manifest)?;
        let counters = serde_json::to_value(&manifest.counts)?;
        Ok((vec![self.artifact(Stage::Ingest, "triples.tsv")], counters))
    }

    fn subcorpus(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let kg = self.load_kg()?;
        let corpus = self.load_corpus()?;
        let train = self.load_split("train")?;
        let mut summary = Vec::new();
        for relation in self.relations(&train) {
            let tuples: Vec<LabeledTuple> = kg::tuples_of(&train, &relation)
                .into_iter()
                .map(|(h, t)| LabeledTuple {
                    head_label: kg.label(&h).to_string(),
                    tail_label: kg.label(&t).to_string(),
                    head: h,
                    tail: t,
                })
                .collect();
            let sub = corpus::mine_sub_corpus(&corpus, &relation, &tuples, self.config.mine.theta)?;
            let file = format!("{}.jsonl", slug(&relation));
            let lines: Vec<SubCorpusLine> = sub
                .entries
                .iter()
                .flat_map(|e| {
                    e.sentences.iter().map(|s| SubCorpusLine {
                        relation: relation.clone(),
                        head: e.head.clone(),
                        tail: e.tail.clone(),
                        sentence_id: s.sentence_id,
                        doc_id: s.doc_id.clone(),
                        sent_index: s.sent_index,
                        head_span: s.head_span,
                        tail_span: s.tail_span,
                        raw: s.raw.clone(),
                    })
                })
                .collect();
            write_jsonl(&self.artifact(Stage::Subcorpus, &file), &lines)?;
            summary.push(SubCorpusSummary {
                relation: relation.clone(),
                file,
                tuples_searched: sub.tuples_searched,
                tuples_found: sub.entries.len(),
                sentences: sub.num_sentences(),
            });
        }
        write_json(&self.artifact(Stage::Subcorpus, "summary.json"), &summary)?;
        let total: usize = summary.iter().map(|s| s.sentences).sum();
        Ok((
            vec![
                self.artifact(Stage::Ingest, "documents.jsonl"),
                self.artifact(Stage::Split, "train.tsv"),
            ],
            serde_json::json!({ "relations": summary.len(), "sentences": total }),
        ))
    }

    fn load_subcorpus(&self, corpus: &CorpusStore) -> Result<Vec<SubCorpus>> {
        let summaries: Vec<SubCorpusSummary> = read_json(&self.require(Stage::Subcorpus, "summary.json")?)?;
        let mut out = Vec::new();
        for s in summaries {
            let lines: Vec<SubCorpusLine> = read_jsonl(&self.require(Stage::Subcorpus, &s.file)?)?;
            let mut entries: Vec<SubCorpusEntry> = Vec::new();
            for l in lines {
                let sentence = corpus.sentences().get(l.sentence_id as usize).ok_or_else(|| Error::NotFound {
                    kind: "sentence",
                    key: l.sentence_id.to_string(),
                })?;
                let sub = SubSentence {
                    sentence_id: l.sentence_id,
                    doc_id: l.doc_id,
                    sent_index: l.sent_index,
                    raw: l.raw,
                    tokens: sentence.tokens.clone(),
                    head_span: l.head_span,
                    tail_span: l.tail_span,
                };
                match entries.last_mut() {
                    Some(e) if e.head == l.head && e.tail == l.tail => e.sentences.push(sub),
                    _ => entries.push(SubCorpusEntry {
                        head: l.head,
                        tail: l.tail,
                        sentences: vec![sub],
                    }),
                }
            }
            out.push(SubCorpus {
                relation: s.relation,
                theta: self.config.mine.theta,
                entries,
                tuples_searched: s.tuples_searched,
            });
        }
        Ok(out)
    }

    fn mine(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let corpus = self.load_corpus()?;
        let subs = self.load_subcorpus(&corpus)?;
        let phrase_config = PhraseConfig {
            min_count: self.config.mine.phrase_min_count,
            pmi_floor: self.config.mine.phrase_pmi_floor,
        };
        let mut mined = Vec::new();
        let mut total = 0;
        for sub in &subs {
            let annotated = phrase::segment_phrases(sub, phrase_config);
            let set = miner::mine_candidates(&annotated, self.config.mine.min_support, self.config.mine.max_window)?;
            let file = format!("{}.annotated.jsonl", slug(&sub.relation));
            let lines: Vec<AnnotatedLine> = annotated
                .sentences
                .iter()
                .map(|s| AnnotatedLine {
                    head: s.head.clone(),
                    tail: s.tail.clone(),
                    tokens: s.tokens.clone(),
                })
                .collect();
            write_jsonl(&self.artifact(Stage::Mine, &file), &lines)?;
            total += set.candidates.len();
            mined.push(MinedRelation {
                relation: sub.relation.clone(),
                num_tuples: annotated.num_tuples,
                phrases: annotated.phrases.iter().cloned().collect(),
                annotated: file,
                candidates: set.candidates,
            });
        }
        write_json(&self.artifact(Stage::Mine, "candidates.json"), &mined)?;
        Ok((
            vec![self.artifact(Stage::Subcorpus, "summary.json")],
            serde_json::json!({ "relations": mined.len(), "candidates": total }),
        ))
    }

    fn select(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let corpus = self.load_corpus()?;
        let mined: Vec<MinedRelation> = read_json(&self.require(Stage::Mine, "candidates.json")?)?;
        let selection = self.config.select.selection();
        let mut files = Vec::new();
        let mut quality_lines = Vec::new();
        for m in &mined {
            if let Some(manual) = self.config.select.manual.get(&m.relation) {
                let prompts: Vec<Prompt> = manual.iter().map(|t| Prompt::parse(&m.relation, t)).collect();
                let n = prompts.len();
                let ens = PromptEnsemble::uniform(&m.relation, prompts, vec![Default::default(); n]);
                ens.validate()?;
                files.push(ens.to_file());
                continue;
            }
            let lines: Vec<AnnotatedLine> = read_jsonl(&self.require(Stage::Mine, &m.annotated)?)?;
            let annotated = AnnotatedSubCorpus {
                relation: m.relation.clone(),
                sentences: lines
                    .into_iter()
                    .map(|l| AnnotatedSentence {
                        head: l.head,
                        tail: l.tail,
                        tokens: l.tokens,
                    })
                    .collect(),
                phrases: m.phrases.iter().cloned().collect(),
                num_tuples: m.num_tuples,
            };
            let set = CandidateSet {
                relation: m.relation.clone(),
                candidates: m.candidates.clone(),
            };
            let ctx = QualityContext::new(&annotated, &corpus, &set);
            let scored = selector::score_all(&set, &ctx);
            quality_lines.extend(scored.iter().map(|s| QualityLine {
                relation: m.relation.clone(),
                template: s.candidate.template.clone(),
                support: s.candidate.support,
                quality: s.quality,
            }));
            let seed: Option<Vec<String>> = self
                .config
                .select
                .seeds
                .get(&m.relation)
                .map(|s| s.split_whitespace().map(str::to_string).collect());
            let ens = selector::truepie_filter(&m.relation, &scored, &annotated, &corpus, seed.as_deref(), &selection)?;
            files.push(ens.to_file());
        }
        write_json(&self.artifact(Stage::Select, "ensembles.json"), &files)?;
        write_jsonl(&self.artifact(Stage::Select, "quality.jsonl"), &quality_lines)?;
        let sizes: BTreeMap<&str, usize> = files.iter().map(|f| (f.relation.as_str(), f.prompts.len())).collect();
        Ok((
            vec![self.artifact(Stage::Mine, "candidates.json")],
            serde_json::json!({ "ensemble_sizes": sizes }),
        ))
    }

    fn held_out(&self, train: &[Triple], relation: &str) -> Vec<Triple> {
        let mut mine: Vec<Triple> = train.iter().filter(|t| t.relation == relation).cloned().collect();
        mine.sort();
        let mut rng = crate::rng::SplitMix64::derived(self.config.seed, &format!("held-out\t{relation}"));
        rng.shuffle(&mut mine);
        let k = ((self.config.optimize.held_out * mine.len() as f64).ceil() as usize).min(mine.len());
        mine.truncate(k);
        mine
    }

    fn optimize(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let kg = self.load_kg()?;
        let corpus = self.load_corpus()?;
        let train = self.load_split("train")?;
        let ensembles = self.load_ensembles(Stage::Select)?;
        let index = self.build_index(&corpus)?;
        let scorer = self.scorer(&corpus, LogisticHead::default())?;
        let entity_ids = kg.entity_ids();
        let candidates: Vec<String> = entity_ids.iter().map(|e| kg.label(e).to_string()).collect();
        let learn = self.config.optimize.learn();
        let mut out = Vec::new();
        let mut reports = Vec::new();
        for (relation, ens) in &ensembles {
            if !self.config.optimize.enabled || ens.len() == 1 {
                out.push(ens.with_uniform_weights().to_file());
                continue;
            }
            let held = self.held_out(&train, relation);
            if held.is_empty() {
                self.log(Stage::Optimize, "no_held_out", Duration::ZERO, serde_json::json!({ "relation": relation }))?;
                out.push(ens.with_uniform_weights().to_file());
                continue;
            }
            let held_set: HashSet<&Triple> = held.iter().collect();
            let rest: Vec<Triple> = train.iter().filter(|t| !held_set.contains(t)).cloned().collect();
            let known = known_answers(&rest);
            let queries: Vec<(Query, String)> = held.iter().flat_map(Query::from_triple).collect();
            let rows: Vec<Vec<f64>> = queries
                .par_iter()
                .map(|(q, gold)| {
                    let support = self.query_support(index.as_ref(), &kg, q, &known);
                    let gold_index = entity_ids.binary_search(gold).expect("gold is a known entity");
                    let inst = retriever::make_cloze(ClozeTarget::Query(q), &ens.prompts, support.as_deref(), |e| {
                        kg.label(e).to_string()
                    });
                    inst.iter()
                        .map(|i| Ok(scorer.score_cloze(i, &candidates)?[gold_index]))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?;
            let weights = ensemble::learn_weights(&rows, &learn)?;
            reports.push(OptimizeReport {
                relation: relation.clone(),
                held_out: held.len(),
                uniform_log_likelihood: ensemble::log_likelihood(&rows, &ens.with_uniform_weights().weights),
                learned_log_likelihood: ensemble::log_likelihood(&rows, &weights),
                weights: weights.clone(),
            });
            let mut learned = ens.clone();
            learned.weights = weights;
            learned.validate()?;
            out.push(learned.to_file());
        }
        write_json(&self.artifact(Stage::Optimize, "ensembles.json"), &out)?;
        write_json(&self.artifact(Stage::Optimize, "report.json"), &reports)?;
        Ok((
            vec![
                self.artifact(Stage::Select, "ensembles.json"),
                self.artifact(Stage::Split, "train.tsv"),
                self.artifact(Stage::Ingest, "documents.jsonl"),
            ],
            serde_json::json!({ "relations": out.len(), "learned": reports.len() }),
        ))
    }

    fn index(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let corpus = self.load_corpus()?;
        let index = Bm25Index::build(&corpus)?;
        let summary = IndexSummary {
            sentences: index.num_sentences(),
            avg_len: index.avg_len(),
            checksum: index.checksum(),
        };
        write_json(&self.artifact(Stage::Index, "summary.json"), &summary)?;
        Ok((
            vec![self.artifact(Stage::Ingest, "documents.jsonl")],
            serde_json::json!({ "sentences": summary.sentences }),
        ))
    }

    fn recall_size(&self, entities: usize) -> usize {
        let n = &self.config.negatives;
        let x = if n.recall_size > 0 {
            n.recall_size
        } else {
            negatives::default_recall_size(&n.dataset, self.config.split.sub_ratio).unwrap_or(entities)
        };
        x.clamp(1, entities.max(1))
    }

    fn negatives(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let kg = self.load_kg()?;
        let train = self.load_split("train")?;
        let test = self.load_split("test")?;
        let entities = kg.entity_ids();
        let model = TransE::train(&train, &entities, &self.config.kge_config())?;
        let known: HashSet<Triple> = kg.triples().iter().cloned().collect();
        let n = &self.config.negatives;
        let set = negatives::gen_negatives(&model, &train, &known, n.m_ratio, n.kge_fraction, self.config.seed)?;
        write_jsonl(&self.artifact(Stage::Negatives, "negatives.jsonl"), &set.negatives)?;

        let x = self.recall_size(entities.len());
        let records: Vec<RecallRecord> = eval::queries_for(&test)
            .into_iter()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|(q, golds)| {
                let mut list = negatives::recall(&model, q, x);
                if n.inject_gold {
                    for g in golds {
                        if !list.contains(g) {
                            let slot = list.iter().rposition(|e| !golds.contains(e));
                            match slot {
                                Some(i) => list[i] = g.clone(),
                                None => list.push(g.clone()),
                            }
                        }
                    }
                }
                RecallRecord {
                    query: q.clone(),
                    entities: list,
                }
            })
            .collect();
        write_jsonl(&self.artifact(Stage::Negatives, "recall.jsonl"), &records)?;
        let summary = KgeSummary {
            checksum: model.checksum(),
            entities: entities.len(),
            recall_size: x,
            kge_negatives: set.kge_count,
            rand_negatives: set.rand_count,
        };
        write_json(&self.artifact(Stage::Negatives, "kge.json"), &summary)?;
        Ok((
            vec![
                self.artifact(Stage::Split, "train.tsv"),
                self.artifact(Stage::Split, "test.tsv"),
                self.artifact(Stage::Ingest, "triples.tsv"),
            ],
            serde_json::json!({
                "positives": train.len(),
                "negatives": set.negatives.len(),
                "queries": records.len(),
                "recall_size": x,
            }),
        ))
    }

    fn assemble(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let kg = self.load_kg()?;
        let corpus = self.load_corpus()?;
        let train = self.load_split("train")?;
        let ensembles = self.load_ensembles(Stage::Optimize)?;
        let negatives: Vec<Negative> = read_jsonl(&self.require(Stage::Negatives, "negatives.jsonl")?)?;
        let m = self.config.negatives.m_ratio;
        if negatives.len() != m * train.len() {
            return Err(Error::Invalid(format!(
                "{} negatives for {} positives at ratio {m}; rerun the negatives stage",
                negatives.len(),
                train.len()
            )));
        }
        let index = self.build_index(&corpus)?;
        // Each positive in tail direction, then its negatives in the direction of the corrupted side.
        let groups: Vec<(&Triple, &[Negative])> = train.iter().zip(negatives.chunks(m)).collect();
        let records: Vec<Vec<ClozeRecord>> = groups
            .par_iter()
            .map(|(pos, negs)| {
                let mut out = Vec::new();
                let targets = std::iter::once(((*pos).clone(), Direction::Tail, 1u8)).chain(negs.iter().map(|n| {
                    let t = n.triple();
                    let dir = if t.head == pos.head { Direction::Tail } else { Direction::Head };
                    (t, dir, 0u8)
                }));
                for (t, direction, label) in targets {
                    let Some(ens) = ensembles.get(&t.relation) else {
                        continue;
                    };
                    let support = self.triple_support(index.as_ref(), &kg, &t);
                    let inst = retriever::make_cloze(
                        ClozeTarget::Triple { triple: &t, direction, label },
                        &ens.prompts,
                        support.as_deref(),
                        |e| kg.label(e).to_string(),
                    );
                    out.extend(inst.iter().map(ClozeInstance::to_record));
                }
                out
            })
            .collect();
        let records: Vec<ClozeRecord> = records.into_iter().flatten().collect();
        write_jsonl(&self.artifact(Stage::Assemble, "train.jsonl"), &records)?;
        let positives = records.iter().filter(|r| r.label == Some(1)).count();
        Ok((
            vec![
                self.artifact(Stage::Optimize, "ensembles.json"),
                self.artifact(Stage::Negatives, "negatives.jsonl"),
                self.artifact(Stage::Split, "train.tsv"),
            ],
            serde_json::json!({ "instances": records.len(), "positive_instances": positives }),
        ))
    }

    fn instance_from_record(
        &self,
        r: ClozeRecord,
        kg: &KgStore,
        ensembles: &BTreeMap<String, PromptEnsemble>,
    ) -> Result<ClozeInstance> {
        let ens = ensembles.get(&r.relation).ok_or_else(|| Error::NotFound {
            kind: "ensemble",
            key: r.relation.clone(),
        })?;
        let prompt = ens.prompts.get(r.prompt_index).cloned().ok_or_else(|| Error::NotFound {
            kind: "prompt",
            key: format!("{}#{}", r.relation, r.prompt_index),
        })?;
        let object = r.object.map(|o| {
            let l = kg.label(&o).to_string();
            (o, l)
        });
        Ok(ClozeInstance {
            mode: r.mode,
            direction: r.direction.unwrap_or(Direction::Tail),
            subject_label: kg.label(&r.subject).to_string(),
            subject: r.subject,
            relation: r.relation,
            object,
            support: r.support,
            prompt_index: r.prompt_index,
            prompt,
            label: r.label,
        })
    }

    fn train(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let kg = self.load_kg()?;
        let corpus = self.load_corpus()?;
        let ensembles = self.load_ensembles(Stage::Optimize)?;
        let records: Vec<ClozeRecord> = read_jsonl(&self.require(Stage::Assemble, "train.jsonl")?)?;
        let instances: Vec<ClozeInstance> = records
            .into_iter()
            .map(|r| self.instance_from_record(r, &kg, &ensembles))
            .collect::<Result<_>>()?;
        let m = self.config.negatives.m_ratio as f64;
        let m_divisor = match self.config.train.m_reading {
            MReading::NegativesPerPositive => m,
            MReading::PositiveNegativeRatio => 1.0 / m,
        };
        let config = FinetuneConfig {
            epochs: self.config.train.epochs,
            learning_rate: self.config.train.learning_rate,
            m: m_divisor,
        };
        let (head, report) = match self.config.scorer.mode {
            ScorerMode::Reference => {
                let mut s = ReferenceScorer::new(Cooccurrence::from_corpus(&corpus), self.config.scorer.aggregation);
                let report = s.finetune(&instances, &config)?;
                (s.head, report)
            }
            ScorerMode::Remote => {
                let mut s = RemoteScorer::new(&self.config.scorer.url, Duration::from_secs(self.config.scorer.timeout_secs))?;
                (LogisticHead::default(), s.finetune(&instances, &config)?)
            }
        };
        let model = ModelFile {
            mode: self.config.scorer.mode,
            model_version: report.model_version,
            head,
            aggregation: self.config.scorer.aggregation,
            m_divisor,
            losses: report.losses,
        };
        write_json(&self.artifact(Stage::Train, "model.json"), &model)?;
        Ok((
            vec![self.artifact(Stage::Assemble, "train.jsonl")],
            serde_json::json!({
                "instances": instances.len(),
                "final_loss": model.losses.last(),
            }),
        ))
    }

    fn predict(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let kg = self.load_kg()?;
        let corpus = self.load_corpus()?;
        let test = self.load_split("test")?;
        let ensembles = self.load_ensembles(Stage::Optimize)?;
        let recalls: Vec<RecallRecord> = read_jsonl(&self.require(Stage::Negatives, "recall.jsonl")?)?;
        let model: ModelFile = read_json(&self.require(Stage::Train, "model.json")?)?;
        let scorer = self.scorer(&corpus, model.head)?;
        let index = self.build_index(&corpus)?;
        let recall_of: BTreeMap<&Query, &Vec<String>> = recalls.iter().map(|r| (&r.query, &r.entities)).collect();
        let queries: Vec<(Query, Vec<String>)> = eval::queries_for(&test).into_iter().collect();
        let known = known_answers(&self.load_split("train")?);
        let lines: Vec<Vec<PredictionLine>> = queries
            .par_iter()
            .map(|(q, golds)| {
                let ens = ensembles.get(&q.relation).ok_or_else(|| Error::NotFound {
                    kind: "ensemble",
                    key: q.relation.clone(),
                })?;
                let recall = recall_of.get(q).ok_or_else(|| Error::MissingArtifact {
                    stage: Stage::Negatives.name(),
                    path: self.artifact(Stage::Negatives, "recall.jsonl"),
                })?;
                let support = self.query_support(index.as_ref(), &kg, q, &known);
                let (pred, _) = eval::predict(q, ens, scorer.as_ref(), recall, support.as_deref(), EnsembleMode::Weighted, |e| {
                    kg.label(e).to_string()
                })?;
                Ok(golds
                    .iter()
                    .map(|g| PredictionLine {
                        query: q.clone(),
                        ranking: pred.ranking.clone(),
                        scores: pred.scores.clone(),
                        gold: g.clone(),
                        gold_rank: pred.rank_of(g),
                        support: support.clone(),
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let lines: Vec<PredictionLine> = lines.into_iter().flatten().collect();
        write_jsonl(&self.artifact(Stage::Predict, "predictions.jsonl"), &lines)?;
        Ok((
            vec![
                self.artifact(Stage::Train, "model.json"),
                self.artifact(Stage::Negatives, "recall.jsonl"),
                self.artifact(Stage::Optimize, "ensembles.json"),
                self.artifact(Stage::Split, "test.tsv"),
            ],
            serde_json::json!({ "queries": queries.len(), "predictions": lines.len() }),
        ))
    }

    fn evaluate(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let path = self.require(Stage::Predict, "predictions.jsonl")?;
        let lines: Vec<PredictionLine> = read_jsonl(&path)?;
        let items: Vec<(RankedPrediction, String)> = lines
            .into_iter()
            .map(|l| {
                (
                    RankedPrediction {
                        query: l.query,
                        ranking: l.ranking,
                        scores: l.scores,
                    },
                    l.gold,
                )
            })
            .collect();
        let (mut report, _) = eval::evaluate(&items)?;
        let by_direction: BTreeMap<&str, eval::EvalReport> = [("tail", Direction::Tail), ("head", Direction::Head)]
            .into_iter()
            .map(|(name, d)| {
                let ranks: Vec<Option<usize>> = items
                    .iter()
                    .filter(|(p, _)| p.query.direction == d)
                    .map(|(p, g)| p.rank_of(g))
                    .collect();
                (name, eval::report_from_ranks(&ranks))
            })
            .collect();
        let c = &self.config;
        report.config = serde_json::json!({
            "seed": c.seed,
            "sub_ratio": c.split.sub_ratio,
            "optimize": c.optimize.enabled,
            "retrieval": c.retrieval.enabled,
            "delta": c.retrieval.delta,
            "phi": c.retrieval.phi,
            "m_ratio": c.negatives.m_ratio,
            "scorer": c.scorer.mode,
            "config_hash": c.hash(),
        });
        write_json(&self.artifact(Stage::Evaluate, "report.json"), &report)?;
        write_json(&self.artifact(Stage::Evaluate, "by_direction.json"), &by_direction)?;
        Ok((vec![path], serde_json::to_value(&report)?))
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in io(dir, fs::read_dir(dir))? {
        let entry = io(dir, entry)?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Run `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Write the synthetic world and a matching config into `dir`.
pub fn write_synthetic_fixture(dir: &Path, synth: &crate::synth::SynthConfig) -> Result<PathBuf> {
    let world = crate::synth::generate(synth)?;
    world.write(dir)?;
    let config = format!(
        "seed = {seed}\nrun_dir = \"run\"\n\n[paths]\nkg = \"kg.tsv\"\nlabels = \"labels.tsv\"\ngeneral = [\"general.jsonl\"]\nreliable = [\"reliable.jsonl\"]\n\n{SYNTHETIC_OVERRIDES}",
        seed = synth.seed
    );
    let path = dir.join("config.toml");
    io(&path, fs::write(&path, config))?;
    Ok(path)
}

/// Settings the synthetic fixture runs with, beyond the defaults.
pub const SYNTHETIC_OVERRIDES: &str = "[retrieval]\ndeterministic = true\n\n[negatives]\nrecall_size = 30\nkge_epochs = 100\n";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_distinct_and_safe() {
        let a = slug("/people/person/place_of_birth");
        assert!(a.starts_with("people_person_place_of_birth_"));
        assert_ne!(slug("a/b"), slug("a_b"));
        assert!(a.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()), Some(s));
        }
        assert_eq!(Stage::parse("nope"), None);
    }
}
