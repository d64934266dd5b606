//! Corpus ingestion, sentence index and per-relation sub-corpus mining.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    General,
    Reliable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(skip, default = "default_source")]
    pub source: Source,
}

fn default_source() -> Source {
    Source::General
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub doc_id: String,
    pub index: usize,
    pub source: Source,
    pub tokens: Vec<String>,
    pub raw: String,
    /// Byte offsets of `raw` inside the document text.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub documents: usize,
    pub sentences: usize,
    pub skipped_empty: usize,
    pub sentences_per_doc: BTreeMap<String, usize>,
}

/// Sentences of every ingested corpus, in `(doc_id, index)` order, with a
/// token → sentence inverted index.
#[derive(Debug, Clone, Default)]
pub struct CorpusStore {
    sentences: Vec<Sentence>,
    postings: BTreeMap<String, Vec<u32>>,
    report: IngestReport,
}

#[derive(Deserialize)]
struct JsonlDoc {
    doc_id: String,
    text: String,
}

pub fn read_documents(path: &Path, source: Source) -> Result<Vec<Document>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: JsonlDoc = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(Document {
            doc_id: doc.doc_id,
            text: doc.text,
            source,
        });
    }
    Ok(docs)
}

impl CorpusStore {
    pub fn ingest(files: &[(PathBuf, Source)]) -> Result<Self> {
        let mut docs = Vec::new();
        for (path, source) in files {
            docs.extend(read_documents(path, *source)?);
        }
        Self::from_documents(docs)
    }

    pub fn from_documents(mut docs: Vec<Document>) -> Result<Self> {
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        if let Some(w) = docs.windows(2).find(|w| w[0].doc_id == w[1].doc_id) {
            return Err(Error::Invalid(format!("duplicate doc_id {}", w[0].doc_id)));
        }
        let mut report = IngestReport::default();
        let mut sentences = Vec::new();
        for doc in &docs {
            if doc.text.trim().is_empty() {
                report.skipped_empty += 1;
                continue;
            }
            report.documents += 1;
            let mut index = 0;
            for span in text::split_sentences(&doc.text) {
                let raw = &doc.text[span.start..span.end];
                let tokens = text::tokenize(raw);
                if tokens.is_empty() {
                    continue;
                }
                sentences.push(Sentence {
                    doc_id: doc.doc_id.clone(),
                    index,
                    source: doc.source,
                    tokens,
                    raw: raw.to_string(),
                    start: span.start,
                    end: span.end,
                });
                index += 1;
            }
            report.sentences_per_doc.insert(doc.doc_id.clone(), index);
        }
        report.sentences = sentences.len();

        let mut postings: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for (id, s) in sentences.iter().enumerate() {
            for tok in &s.tokens {
                let list = postings.entry(tok.clone()).or_default();
                if list.last() != Some(&(id as u32)) {
                    list.push(id as u32);
                }
            }
        }
        Ok(Self {
            sentences,
            postings,
            report,
        })
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn sentence(&self, id: u32) -> &Sentence {
        &self.sentences[id as usize]
    }

    pub fn postings(&self, token: &str) -> &[u32] {
        self.postings.get(token).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn report(&self) -> &IngestReport {
        &self.report
    }

    /// Hash over the inverted index; identical input gives an identical value.
    pub fn index_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (tok, list) in &self.postings {
            hasher.update(tok.as_bytes());
            hasher.update([0u8]);
            for id in list {
                hasher.update(id.to_le_bytes());
            }
        }
        for s in &self.sentences {
            hasher.update(s.doc_id.as_bytes());
            hasher.update((s.index as u64).to_le_bytes());
        }
        crate::checksum::hex(&hasher.finalize())
    }

    /// Sentences containing every token in `tokens`, ascending by id.
    fn sentences_with_all(&self, tokens: &[String]) -> Vec<u32> {
        let mut lists: Vec<&[u32]> = tokens.iter().map(|t| self.postings(t)).collect();
        lists.sort_by_key(|l| l.len());
        let Some((first, rest)) = lists.split_first() else {
            return Vec::new();
        };
        first
            .iter()
            .copied()
            .filter(|id| rest.iter().all(|l| l.binary_search(id).is_ok()))
            .collect()
    }
}

/// A KG tuple with its surface forms resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTuple {
    pub head: String,
    pub tail: String,
    pub head_label: String,
    pub tail_label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubSentence {
    pub sentence_id: u32,
    pub doc_id: String,
    pub sent_index: usize,
    pub raw: String,
    pub tokens: Vec<String>,
    /// `(position, length)` of the head and tail runs in `tokens`.
    pub head_span: (usize, usize),
    pub tail_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubCorpusEntry {
    pub head: String,
    pub tail: String,
    pub sentences: Vec<SubSentence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubCorpus {
    pub relation: String,
    pub theta: usize,
    /// Entries sorted by `(head, tail)`; tuples without matches are absent.
    pub entries: Vec<SubCorpusEntry>,
    pub tuples_searched: usize,
}

impl SubCorpus {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_sentences(&self) -> usize {
        self.entries.iter().map(|e| e.sentences.len()).sum()
    }

    pub fn dump_rows(&self) -> Vec<SubCorpusRow> {
        self.entries
            .iter()
            .flat_map(|e| {
                e.sentences.iter().map(move |s| SubCorpusRow {
                    relation: self.relation.clone(),
                    head: e.head.clone(),
                    tail: e.tail.clone(),
                    doc_id: s.doc_id.clone(),
                    sent_index: s.sent_index,
                    raw: s.raw.clone(),
                })
            })
            .collect()
    }
}

/// One line of the sub-corpus dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubCorpusRow {
    pub relation: String,
    pub head: String,
    pub tail: String,
    pub doc_id: String,
    pub sent_index: usize,
    pub raw: String,
}

/// For each tuple, the first `theta` sentences (in `(doc_id, index)` order)
/// that contain both labels as whole token runs.
pub fn mine_sub_corpus(
    corpus: &CorpusStore,
    relation: &str,
    tuples: &[LabeledTuple],
    theta: usize,
) -> Result<SubCorpus> {
    if theta < 1 {
        return Err(Error::config("theta", "must be at least 1"));
    }
    let entries: Vec<Option<SubCorpusEntry>> = tuples
        .par_iter()
        .map(|t| {
            let head_tokens = text::tokenize(&t.head_label);
            let tail_tokens = text::tokenize(&t.tail_label);
            if head_tokens.is_empty() || tail_tokens.is_empty() {
                return None;
            }
            let mut needed = head_tokens.clone();
            needed.extend(tail_tokens.iter().cloned());
            needed.sort();
            needed.dedup();
            let mut sentences = Vec::new();
            for id in corpus.sentences_with_all(&needed) {
                let s = corpus.sentence(id);
                if let Some((h, tl)) = text::find_pair(&s.tokens, &head_tokens, &tail_tokens) {
                    sentences.push(SubSentence {
                        sentence_id: id,
                        doc_id: s.doc_id.clone(),
                        sent_index: s.index,
                        raw: s.raw.clone(),
                        tokens: s.tokens.clone(),
                        head_span: (h, head_tokens.len()),
                        tail_span: (tl, tail_tokens.len()),
                    });
                    if sentences.len() == theta {
                        break;
                    }
                }
            }
            (!sentences.is_empty()).then(|| SubCorpusEntry {
                head: t.head.clone(),
                tail: t.tail.clone(),
                sentences,
            })
        })
        .collect();
    let mut entries: Vec<SubCorpusEntry> = entries.into_iter().flatten().collect();
    entries.sort_by(|a, b| (&a.head, &a.tail).cmp(&(&b.head, &b.tail)));
    entries.dedup_by(|a, b| a.head == b.head && a.tail == b.tail);
    Ok(SubCorpus {
        relation: relation.to_string(),
        theta,
        entries,
        tuples_searched: tuples.len(),
    })
}
